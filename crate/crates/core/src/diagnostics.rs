//! Firing-level studies on wide random rule bases and structure-evolution
//! reports built from training metric streams.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config, NfnError, Result};
use crate::fuzzy::MembershipLayer;
use crate::inference::{
    normalized_entropy, CertaintyMode, FiringMode, FiringRecord, InferenceConfig, NfnBlock, Normalizer, TskHead,
};
use crate::rules::{RuleBank, RuleBankConfig};
use crate::training::StepMetrics;

/// One inference configuration of the firing study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FiringVariant {
    pub mode: FiringMode,
    pub normalizer: Normalizer,
    pub layer_norm: bool,
}

impl FiringVariant {
    pub const fn new(mode: FiringMode, normalizer: Normalizer, layer_norm: bool) -> Self {
        Self {
            mode,
            normalizer,
            layer_norm,
        }
    }

    /// All eight combinations.
    pub fn all() -> Vec<Self> {
        let mut out = Vec::with_capacity(8);
        for mode in [FiringMode::Sum, FiringMode::Mean] {
            for normalizer in [Normalizer::Softmax, Normalizer::Entmax15] {
                for layer_norm in [false, true] {
                    out.push(Self::new(mode, normalizer, layer_norm));
                }
            }
        }
        out
    }

    /// Parses a comma-separated list such as `sum-softmax,mean-entmax-ln`,
    /// or `all`.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        if s.trim() == "all" {
            return Ok(Self::all());
        }
        s.split(',').map(|v| v.trim().parse()).collect()
    }

    fn inference(&self) -> InferenceConfig {
        InferenceConfig {
            firing_mode: self.mode,
            normalizer: self.normalizer,
            layer_norm: self.layer_norm,
            ..InferenceConfig::default()
        }
    }
}

impl fmt::Display for FiringVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            FiringMode::Sum => "sum",
            FiringMode::Mean => "mean",
        };
        let norm = match self.normalizer {
            Normalizer::Softmax => "softmax",
            Normalizer::Entmax15 => "entmax",
        };
        write!(f, "{mode}-{norm}{}", if self.layer_norm { "-ln" } else { "" })
    }
}

impl FromStr for FiringVariant {
    type Err = NfnError;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('-').collect();
        let mode = match parts.first().copied() {
            Some("sum") => FiringMode::Sum,
            Some("mean") => FiringMode::Mean,
            _ => return Err(config(format!("unknown firing variant `{s}`"))),
        };
        let normalizer = match parts.get(1).copied() {
            Some("softmax") => Normalizer::Softmax,
            Some("entmax") => Normalizer::Entmax15,
            _ => return Err(config(format!("unknown firing variant `{s}`"))),
        };
        let layer_norm = match parts.get(2).copied() {
            None => false,
            Some("ln") if parts.len() == 3 => true,
            _ => return Err(config(format!("unknown firing variant `{s}`"))),
        };
        Ok(Self::new(mode, normalizer, layer_norm))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiringStudyConfig {
    pub input_dim: usize,
    pub rule_count: usize,
    pub variants: Vec<FiringVariant>,
    pub sample_count: usize,
    pub seed: u64,
    pub initial_terms: usize,
    /// Observations are drawn uniformly from this range, which is also the
    /// span of the initial terms.
    pub input_range: (f64, f64),
}

impl Default for FiringStudyConfig {
    fn default() -> Self {
        Self {
            input_dim: 1600,
            rule_count: 256,
            variants: FiringVariant::all(),
            sample_count: 100,
            seed: 0,
            initial_terms: 3,
            input_range: (-1.0, 1.0),
        }
    }
}

impl FiringStudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.variants.is_empty() {
            return Err(config("firing study needs at least one variant"));
        }
        if self.input_dim == 0 || self.rule_count < 2 || self.sample_count == 0 {
            return Err(config("firing study needs inputs, at least two rules and observations"));
        }
        let (lo, hi) = self.input_range;
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(config("input range must be finite and increasing"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantResult {
    pub variant: FiringVariant,
    pub record: FiringRecord,
    /// Row entropy of the normalized firing divided by `ln |U|`.
    pub entropy: Array1<f64>,
    /// Whether every intermediate of the forward pass was finite.
    pub finite: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantSummary {
    pub variant: String,
    pub mean_entropy: f64,
    pub median_entropy: f64,
    pub median_support: f64,
    pub min_support: usize,
    pub max_support: usize,
    pub finite: bool,
}

fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

impl VariantResult {
    pub fn summary(&self) -> VariantSummary {
        let support: Vec<f64> = self.record.support_count.iter().map(|&s| s as f64).collect();
        VariantSummary {
            variant: self.variant.to_string(),
            mean_entropy: self.entropy.mean().unwrap_or(f64::NAN),
            median_entropy: median(self.entropy.as_slice().unwrap_or(&self.entropy.to_vec())),
            median_support: median(&support),
            min_support: self.record.support_count.iter().copied().min().unwrap_or(0),
            max_support: self.record.support_count.iter().copied().max().unwrap_or(0),
            finite: self.finite,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiringStudy {
    pub config: FiringStudyConfig,
    pub observations: Array2<f64>,
    pub results: Vec<VariantResult>,
}

#[derive(Serialize)]
struct LevelRow<'a> {
    variant: &'a str,
    observation: usize,
    rule: usize,
    w: f64,
    w_bar: f64,
    log10_w_bar: Option<f64>,
    rank: usize,
    sorted_w_bar: f64,
    log10_sorted_w_bar: Option<f64>,
}

#[derive(Serialize)]
struct ObservationRow<'a> {
    variant: &'a str,
    observation: usize,
    entropy: f64,
    support_count: usize,
}

fn log10_or_none(v: f64) -> Option<f64> {
    (v > 0.0).then(|| v.log10())
}

impl FiringStudy {
    pub fn variant(&self, v: FiringVariant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == v)
    }

    pub fn summaries(&self) -> Vec<VariantSummary> {
        self.results.iter().map(VariantResult::summary).collect()
    }

    /// Mean entropy of Mean+softmax above Sum+LN+softmax above Sum+softmax.
    /// `None` when one of the three variants was not run.
    pub fn entropy_ordering_holds(&self) -> Option<bool> {
        let mean_entropy = |v| self.variant(v).map(|r| r.summary().mean_entropy);
        let mean = mean_entropy(FiringVariant::new(FiringMode::Mean, Normalizer::Softmax, false))?;
        let sum_ln = mean_entropy(FiringVariant::new(FiringMode::Sum, Normalizer::Softmax, true))?;
        let sum = mean_entropy(FiringVariant::new(FiringMode::Sum, Normalizer::Softmax, false))?;
        Some(mean > sum_ln && sum_ln > sum)
    }

    /// One row per variant, observation and rule: the raw and normalized
    /// firing in rule order, the rule's rank, and the rank-sorted levels.
    pub fn write_levels(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.results {
            let name = r.variant.to_string();
            for (obs, row) in r.record.normalized.rows().into_iter().enumerate() {
                let mut order: Vec<usize> = (0..row.len()).collect();
                order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
                let mut rank = vec![0; row.len()];
                for (k, &u) in order.iter().enumerate() {
                    rank[u] = k + 1;
                }
                for u in 0..row.len() {
                    let sorted = row[order[u]];
                    w.serialize(LevelRow {
                        variant: &name,
                        observation: obs,
                        rule: u,
                        w: r.record.preliminary[[obs, u]],
                        w_bar: row[u],
                        log10_w_bar: log10_or_none(row[u]),
                        rank: rank[u],
                        sorted_w_bar: sorted,
                        log10_sorted_w_bar: log10_or_none(sorted),
                    })?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    /// Entropy and support count per variant and observation.
    pub fn write_observations(&self, out: impl Write) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        for r in &self.results {
            let name = r.variant.to_string();
            for (obs, (&entropy, &support_count)) in r.entropy.iter().zip(&r.record.support_count).enumerate() {
                w.serialize(ObservationRow {
                    variant: &name,
                    observation: obs,
                    entropy,
                    support_count,
                })?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, mut out: impl Write) -> Result<()> {
        let doc = serde_json::json!({
            "input_dim": self.config.input_dim,
            "rule_count": self.config.rule_count,
            "sample_count": self.config.sample_count,
            "seed": self.config.seed,
            "entropy_ordering_holds": self.entropy_ordering_holds(),
            "variants": self.summaries(),
        });
        serde_json::to_writer_pretty(&mut out, &doc)?;
        writeln!(out)?;
        Ok(())
    }

    /// Writes `firing_levels.csv`, `firing_observations.csv` and
    /// `firing_summary.json` into `dir`.
    pub fn write_dir(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.write_levels(std::io::BufWriter::new(File::create(dir.join("firing_levels.csv"))?))?;
        self.write_observations(std::io::BufWriter::new(File::create(
            dir.join("firing_observations.csv"),
        )?))?;
        self.write_summary(File::create(dir.join("firing_summary.json"))?)
    }
}

/// Builds one random rule base and pushes the same random observations
/// through it under every requested inference variant.
pub fn firing_study(cfg: &FiringStudyConfig) -> Result<FiringStudy> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (lo, hi) = cfg.input_range;
    let membership = MembershipLayer::uniform(cfg.input_dim, cfg.initial_terms, lo, hi)?;
    let rules = RuleBank::new(cfg.rule_count, &membership, RuleBankConfig::default(), &mut rng)?;
    let head = TskHead::new(cfg.rule_count, cfg.input_dim, 1, CertaintyMode::Off, &mut rng);
    let observations = Array2::from_shape_fn((cfg.sample_count, cfg.input_dim), |_| rng.gen_range(lo..hi));
    let structure = rules.greedy_structure();

    let mut results = Vec::with_capacity(cfg.variants.len());
    for &variant in &cfg.variants {
        let block = NfnBlock::from_parts(membership.clone(), rules.clone(), head.clone(), variant.inference())?;
        let (_, tape) = block.forward(observations.view(), &structure)?;
        let finite = [&tape.raw_firing, &tape.preliminary, &tape.firing, &tape.output]
            .iter()
            .all(|a| a.iter().all(|v| v.is_finite()))
            && tape.q.iter().all(|v| v.is_finite());
        let record = tape.firing_record();
        let entropy = normalized_entropy(record.normalized.view());
        results.push(VariantResult {
            variant,
            record,
            entropy,
            finite,
        });
    }
    Ok(FiringStudy {
        config: cfg.clone(),
        observations,
        results,
    })
}

/// Per-epoch structure statistics of a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructurePoint {
    pub epoch: u64,
    pub steps: usize,
    /// Rule slots whose selected term changed, summed over the epoch.
    pub structure_edits: usize,
    pub epsilon_failures: usize,
    /// Terms across all blocks and attributes at the end of the epoch.
    pub total_terms: usize,
    pub mean_loss: f64,
}

/// Groups a metrics stream by epoch.
pub fn structure_series(metrics: &[StepMetrics]) -> Vec<StructurePoint> {
    let mut out: Vec<StructurePoint> = Vec::new();
    for m in metrics {
        let terms = m.term_counts.iter().sum();
        match out.last_mut() {
            Some(p) if p.epoch == m.epoch => {
                p.mean_loss += (m.loss - p.mean_loss) / (p.steps + 1) as f64;
                p.steps += 1;
                p.structure_edits += m.structure_edits;
                p.epsilon_failures += m.epsilon_failures;
                p.total_terms = terms;
            }
            _ => out.push(StructurePoint {
                epoch: m.epoch,
                steps: 1,
                structure_edits: m.structure_edits,
                epsilon_failures: m.epsilon_failures,
                total_terms: terms,
                mean_loss: m.loss,
            }),
        }
    }
    out
}

/// Reads a JSONL metrics stream written during supervised training.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let file =
        File::open(path).map_err(|e| NfnError::Usage(format!("cannot open metrics log {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

pub fn structure_report(log: &Path) -> Result<Vec<StructurePoint>> {
    Ok(structure_series(&read_metrics(log)?))
}

pub fn write_structure_csv(points: &[StructurePoint], out: impl Write) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for p in points {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> FiringStudyConfig {
        FiringStudyConfig {
            input_dim: 40,
            rule_count: 16,
            sample_count: 7,
            ..FiringStudyConfig::default()
        }
    }

    #[test]
    fn variant_names_round_trip() {
        for v in FiringVariant::all() {
            assert_eq!(v.to_string().parse::<FiringVariant>().unwrap(), v);
        }
        assert_eq!(FiringVariant::parse_list("all").unwrap().len(), 8);
        assert_eq!(
            FiringVariant::parse_list("sum-softmax, mean-entmax-ln").unwrap(),
            vec![
                FiringVariant::new(FiringMode::Sum, Normalizer::Softmax, false),
                FiringVariant::new(FiringMode::Mean, Normalizer::Entmax15, true),
            ]
        );
        for bad in ["sum", "max-softmax", "sum-softmax-ln-x", "sum-sparsemax"] {
            assert!(bad.parse::<FiringVariant>().is_err(), "{bad}");
        }
    }

    #[test]
    fn empty_variant_set_is_rejected() {
        let cfg = FiringStudyConfig {
            variants: vec![],
            ..small()
        };
        assert!(matches!(firing_study(&cfg), Err(NfnError::Config(_))));
    }

    #[test]
    fn tables_cover_every_rule_once() {
        let study = firing_study(&small()).unwrap();
        let mut buf = Vec::new();
        study.write_levels(&mut buf).unwrap();
        let mut reader = csv::Reader::from_reader(buf.as_slice());
        let mut seen = std::collections::HashSet::new();
        let mut rows = 0;
        for rec in reader.records() {
            let rec = rec.unwrap();
            assert!(seen.insert((rec[0].to_string(), rec[1].to_string(), rec[2].to_string())));
            rows += 1;
        }
        assert_eq!(rows, 8 * 7 * 16);
        for r in &study.results {
            for row in r.record.normalized.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn study_is_reproducible() {
        let render = || {
            let study = firing_study(&small()).unwrap();
            let mut buf = Vec::new();
            study.write_levels(&mut buf).unwrap();
            study.write_summary(&mut buf).unwrap();
            buf
        };
        assert_eq!(render(), render());
    }

    fn metrics(epoch: u64, edits: usize, terms: Vec<usize>) -> StepMetrics {
        StepMetrics {
            step: 0,
            epoch,
            loss: 1.0,
            epsilon_failures: 0,
            structure_edits: edits,
            term_counts: terms,
        }
    }

    #[test]
    fn series_groups_by_epoch() {
        let points = structure_series(&[
            metrics(0, 2, vec![3, 3]),
            metrics(0, 1, vec![3, 4]),
            metrics(1, 0, vec![3, 4]),
        ]);
        assert_eq!(points.len(), 2);
        assert_eq!(
            (points[0].structure_edits, points[0].total_terms, points[0].steps),
            (3, 7, 2)
        );
        assert_eq!((points[1].structure_edits, points[1].total_terms), (0, 7));
    }

    #[test]
    fn missing_log_is_a_usage_error() {
        let err = structure_report(Path::new("/nonexistent/metrics.jsonl")).unwrap_err();
        assert!(matches!(err, NfnError::Usage(_)));
    }
}
