use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use nfn_core::config::{ApproximatorKind, RunConfig};
use nfn_core::diagnostics::{firing_study, structure_report, write_structure_csv, FiringStudyConfig, FiringVariant};
use nfn_core::rl::train::{mean_sd, oracle_scores, random_scores, train_loop, RlReport};
use nfn_core::rl::{Approximator, DuelHeads, Environment};
use nfn_core::training::{fit_supervised, gradient_suite, Adam, Checkpoint, GradCheckConfig};

#[derive(Parser)]
#[command(name = "nfn", version, about = "Neuro-fuzzy network training and diagnostics")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Firing-level and structure studies.
    #[command(subcommand)]
    Study(Study),
    /// Train a model from a TOML configuration.
    #[command(subcommand)]
    Train(Train),
    /// Correctness checks.
    #[command(subcommand)]
    Verify(Verify),
    /// Print the default configuration as TOML.
    Defaults,
}

#[derive(Subcommand)]
enum Study {
    /// Firing levels of a wide random rule base under several inference variants.
    Firing {
        #[arg(long, default_value_t = 1600)]
        dim: usize,
        #[arg(long, default_value_t = 256)]
        rules: usize,
        /// `all` or a comma-separated list such as `sum-softmax,mean-entmax-ln`.
        #[arg(long, default_value = "all")]
        variants: String,
        #[arg(long, default_value_t = 100)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-epoch structure edits and term growth from a metrics log.
    Structure {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Metrics stream (JSON lines); defaults to stdout.
    #[arg(long)]
    log: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Train {
    /// Regression on the configured task.
    Supervised {
        #[command(flatten)]
        args: TrainArgs,
        /// Write a checkpoint after training.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Dueling Double DQL on the configured environment.
    Rl {
        #[command(flatten)]
        args: TrainArgs,
    },
}

#[derive(Subcommand)]
enum Verify {
    /// Finite-difference check of every parameter gradient in all 32
    /// configuration cells.
    Gradients {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 20)]
        networks: usize,
    },
}

fn open_log(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(std::io::stdout().lock()),
    })
}

fn run_rl<M: Approximator>(
    heads: &mut DuelHeads<M>,
    env: &mut dyn Environment,
    cfg: &RunConfig,
    log: &mut dyn Write,
) -> Result<RlReport> {
    Ok(train_loop(env, heads, &cfg.rl.train_config(), Some(log))?)
}

fn main() -> Result<()> {
    run(Cli::parse())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Study(Study::Firing {
            dim,
            rules,
            variants,
            samples,
            seed,
            out,
        }) => {
            let cfg = FiringStudyConfig {
                input_dim: dim,
                rule_count: rules,
                variants: FiringVariant::parse_list(&variants)?,
                sample_count: samples,
                seed,
                ..FiringStudyConfig::default()
            };
            let study = firing_study(&cfg)?;
            study.write_dir(&out)?;
            for s in study.summaries() {
                eprintln!(
                    "{:<18} entropy {:.4}  median support {}",
                    s.variant, s.mean_entropy, s.median_support
                );
            }
            if let Some(ok) = study.entropy_ordering_holds() {
                eprintln!("entropy ordering holds: {ok}");
            }
        }
        Command::Study(Study::Structure { log, out }) => {
            let points = structure_report(&log)?;
            write_structure_csv(&points, BufWriter::new(File::create(&out)?))?;
            eprintln!("{} epochs written to {}", points.len(), out.display());
        }
        Command::Train(Train::Supervised { args, checkpoint }) => {
            let cfg = RunConfig::load(&args.config)?;
            let data = cfg.supervised.dataset()?;
            let train = cfg.supervised.training_config();
            let mut model = cfg.supervised.model(&cfg.nfn)?;
            let mut adam = Adam::new(train.adam);
            let mut log = open_log(args.log.as_deref())?;
            let report = fit_supervised(&mut model, &mut adam, &data, &train, Some(&mut *log))?;
            log.flush()?;
            eprintln!(
                "final mse {:.6e}  neurogenesis events {}  structure edits {}",
                report.final_loss,
                report.events.len(),
                report.structure_edits()
            );
            if let Some(path) = checkpoint {
                Checkpoint::capture(&model, &adam).save(&path)?;
            }
        }
        Command::Train(Train::Rl { args }) => {
            let cfg = RunConfig::load(&args.config)?;
            let mut env = cfg.rl.env.build();
            let (inputs, actions) = (env.observation_dim(), env.action_count());
            let mut log = open_log(args.log.as_deref())?;
            let report = match cfg.rl.approximator {
                ApproximatorKind::Nfn => {
                    let mut heads = cfg.rl.nfn_heads(&cfg.nfn, inputs, actions)?;
                    run_rl(&mut heads, env.as_mut(), &cfg, &mut *log)?
                }
                ApproximatorKind::Mlp => {
                    let mut heads = cfg.rl.mlp_heads(inputs, actions)?;
                    run_rl(&mut heads, env.as_mut(), &cfg, &mut *log)?
                }
            };
            log.flush()?;
            let train = cfg.rl.train_config();
            let (oracle, _) = match oracle_scores(env.as_mut(), train.eval_episodes, train.eval_seed, train.frames) {
                Ok(s) => mean_sd(&s),
                Err(_) => (f64::NAN, 0.0),
            };
            let (random, _) = mean_sd(&random_scores(
                env.as_mut(),
                train.eval_episodes,
                train.eval_seed,
                train.frames,
                train.seed,
            )?);
            eprintln!(
                "best epoch mean {:.3}  slope {:.4}  scripted {:.3}  random {:.3}  neurogenesis events {}",
                report.best_mean(),
                report.final_slope(),
                oracle,
                random,
                report.events.len()
            );
        }
        Command::Verify(Verify::Gradients { seed, networks }) => {
            let cfg = GradCheckConfig::default();
            let report = gradient_suite(seed, networks, &cfg)?;
            for c in &report.cells {
                println!(
                    "{:?} {:?} ln={} cf={} {:?}: checked {} skipped {} max rel {:.2e} failures {}",
                    c.cell.firing_mode,
                    c.cell.normalizer,
                    c.cell.layer_norm,
                    c.cell.certainty,
                    c.cell.estimator,
                    c.checked,
                    c.skipped,
                    c.max_relative_error,
                    c.failures
                );
                if c.failures > 0 {
                    if let Some(w) = &c.worst {
                        println!(
                            "  worst {}: analytic {:.6e} numeric {:.6e}",
                            w.path, w.analytic, w.numeric
                        );
                    }
                }
            }
            if !report.passed() {
                bail!(
                    "gradient check failed (max relative error {:.2e})",
                    report.max_relative_error()
                );
            }
            println!(
                "all cells pass (max relative error {:.2e})",
                report.max_relative_error()
            );
        }
        Command::Defaults => print!("{}", RunConfig::default().to_toml()?),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run_args(args: &[&str]) -> Result<()> {
        run(Cli::try_parse_from(std::iter::once("nfn").chain(args.iter().copied()))?)
    }

    #[test]
    fn defaults_use_hyperparameter_symbols() {
        let text = RunConfig::default().to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), RunConfig::default());
        for key in ["\"|U|\"", "\"τ\"", "\"ε\"", "\"+μ\"", "\"α\"", "\"η\""] {
            assert!(text.contains(key), "{key} missing from defaults");
        }
    }

    #[test]
    fn shipped_configs_load() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        for name in ["sine.toml", "rl-nfn.toml", "rl-mlp.toml"] {
            RunConfig::load(&root.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"));
        }
    }

    #[test]
    fn unknown_config_key_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.toml");
        std::fs::write(&path, "[nfn]\nrulez = 3\n").unwrap();
        let err = run_args(&["train", "supervised", "--config", path.to_str().unwrap()]).unwrap_err();
        assert!(format!("{err:#}").contains("rulez"), "{err:#}");
    }

    #[test]
    fn structure_study_needs_a_log() {
        let dir = tempfile::tempdir().unwrap();
        let log = dir.path().join("missing.jsonl");
        let out = dir.path().join("s.csv");
        assert!(run_args(&[
            "study",
            "structure",
            "--log",
            log.to_str().unwrap(),
            "--out",
            out.to_str().unwrap()
        ])
        .is_err());
    }

    #[test]
    fn unknown_firing_variant_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let args = [
            "study",
            "firing",
            "--dim",
            "4",
            "--rules",
            "4",
            "--variants",
            "sum-sparsemax",
            "--out",
        ];
        let mut args = args.to_vec();
        args.push(dir.path().to_str().unwrap());
        assert!(run_args(&args).is_err());
        assert!(!dir.path().join("firing_summary.json").exists());
    }

    #[test]
    fn small_firing_study_writes_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("study");
        run_args(&[
            "study",
            "firing",
            "--dim",
            "6",
            "--rules",
            "5",
            "--samples",
            "3",
            "--out",
            out.to_str().unwrap(),
        ])
        .unwrap();
        for file in ["firing_levels.csv", "firing_observations.csv", "firing_summary.json"] {
            assert!(out.join(file).exists(), "{file}");
        }
    }
}
