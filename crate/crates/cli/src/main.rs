use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use nesyaug::config::{DetectorKind, DetectorSettings, ExperimentConfig, GeneratorSettings};
use nesyaug::experiment::run_experiment;
use nesyaug::stages::{self, read_json, Dataset, SampleOptions, GENERATOR_FILE, WORLD_FILE};
use nesyaug::{exit_code, Failure, OUT_ENV};
use nesyaug_core::filter::FilterPolicy;
use nesyaug_core::report::{
    build_report, render_predicate_table, render_recall_table, EvalReport, TableRow, TableStyle,
};
use nesyaug_core::world::WorldSpec;
use nesyaug_models::diffusion::Generator;
use nesyaug_models::sgg::{ScoreMode, SggHyper};
use serde::de::DeserializeOwned;

#[derive(Parser)]
#[command(name = "nesyaug", version, about = "Scene-graph-conditioned synthetic data augmentation pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Procedural shapes world.
    World {
        #[command(subcommand)]
        command: WorldCommand,
    },
    /// Apply the dataset filters to a dataset directory.
    Filter {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with filter thresholds.
        #[arg(long)]
        policy: Option<PathBuf>,
        /// Use the full-size annotation thresholds instead of the 64-pixel ones.
        #[arg(long, conflicts_with = "policy")]
        full_scale: bool,
    },
    /// Train a generator on a dataset directory.
    TrainGen {
        #[arg(long)]
        data: PathBuf,
        /// baseline or 1..4
        #[arg(long)]
        generator: String,
        #[arg(long)]
        out: PathBuf,
        /// TOML file with generator settings.
        #[arg(long)]
        settings: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Sample images from a trained generator for fresh layouts.
    Sample {
        /// Directory written by train-gen.
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 2.0)]
        guidance: f64,
        #[arg(long, default_value_t = 50)]
        steps: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the requested relations that the detector confirms.
    Extract {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Detector::Pixel)]
        detector: Detector,
        #[arg(long, default_value_t = nesyaug_core::extract::DEFAULT_THRESHOLD)]
        threshold: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the SGG model on one or more dataset directories.
    TrainSgg {
        /// Dataset directory, optionally `DIR:LIMIT` to use only the first LIMIT records.
        #[arg(long = "data", required = true)]
        data: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Score a trained SGG model on a test dataset and write its report.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        test: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = Mode::Tde)]
        mode: Mode,
        #[arg(long, default_value = "model")]
        name: String,
        /// Report of the baseline model for mean Δ.
        #[arg(long)]
        baseline: Option<PathBuf>,
    },
    /// Render recall and per-predicate tables from report files.
    Report {
        /// Report JSON files, one table row each.
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Name of the baseline row.
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Whole experiments.
    Experiment {
        #[command(subcommand)]
        command: ExperimentCommand,
    },
}

#[derive(Subcommand)]
enum WorldCommand {
    /// Render scenes with ground-truth graphs.
    Gen(WorldGen),
}

#[derive(Args)]
struct WorldGen {
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with world parameters.
    #[arg(long)]
    world: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum ExperimentCommand {
    /// Run (or resume) an experiment from its TOML config.
    Run {
        config: PathBuf,
        /// Output directory; defaults to $NESYAUG_OUT/<name> or runs/<name>.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Detector {
    Pixel,
    Oracle,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Plain,
    Tde,
}

fn config_file<T: DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    let text = std::fs::read_to_string(path).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))
}

/// Runs one verb, classing its errors as a failure of that stage.
fn stage<T>(name: &str, work: impl FnOnce() -> anyhow::Result<T>) -> anyhow::Result<T> {
    work().map_err(|e| match e.downcast::<Failure>() {
        Ok(f) => f.into(),
        Err(e) => Failure::Stage {
            stage: name.to_string(),
            message: format!("{e:#}"),
        }
        .into(),
    })
}

fn fresh_dir(dir: &Path) -> anyhow::Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::World {
            command: WorldCommand::Gen(a),
        } => {
            let world: WorldSpec = match &a.world {
                Some(p) => config_file(p)?,
                None => WorldSpec::default(),
            };
            world.validate().map_err(Failure::Config)?;
            stage("world gen", || {
                fresh_dir(&a.out)?;
                let d = stages::world_gen(&a.out, &world, a.n, a.seed)?;
                println!("{} scenes written to {}", d.manifest.len(), a.out.display());
                Ok(())
            })
        }
        Command::Filter {
            input,
            out,
            policy,
            full_scale,
        } => {
            let policy = match (&policy, full_scale) {
                (Some(p), _) => config_file(p)?,
                (None, true) => FilterPolicy::full_scale(),
                (None, false) => FilterPolicy::toy(),
            };
            policy.validate().map_err(Failure::Config)?;
            stage("filter", || {
                fresh_dir(&out)?;
                let r = stages::filter(&Dataset::load(&input)?, &out, &policy)?;
                println!("kept {} of {} records", r.kept, r.input_records);
                Ok(())
            })
        }
        Command::TrainGen {
            data,
            generator,
            out,
            settings,
            steps,
            seed,
        } => {
            let id = generator.parse().map_err(Failure::Config)?;
            let mut settings: GeneratorSettings = match &settings {
                Some(p) => config_file(p)?,
                None => GeneratorSettings::default(),
            };
            if let Some(s) = steps {
                settings.train_steps = s;
            }
            stage("train-gen", || {
                fresh_dir(&out)?;
                let d = Dataset::load(&data)?;
                let s = stages::train_generator(&d, &out, id, &settings, seed)?;
                std::fs::copy(data.join(WORLD_FILE), out.join(WORLD_FILE))?;
                println!("loss {:.4} -> {:.4} over {} steps", s.first_loss, s.final_loss, s.steps);
                Ok(())
            })
        }
        Command::Sample {
            model,
            n,
            seed,
            guidance,
            steps,
            out,
        } => {
            if n == 0 || !(guidance >= 0.0) {
                return Err(Failure::Config("n must be positive and guidance >= 0".into()).into());
            }
            stage("sample", || {
                let world: WorldSpec = read_json(&model.join(WORLD_FILE))?;
                let gen = Generator::load(&model.join(GENERATOR_FILE), &world.vocab())?;
                fresh_dir(&out)?;
                let opts = SampleOptions {
                    n,
                    seed,
                    guidance,
                    steps,
                };
                let d = stages::sample(&gen, &world, &out, opts)?;
                println!("{} images written to {}", d.manifest.len(), out.display());
                Ok(())
            })
        }
        Command::Extract {
            input,
            out,
            detector,
            threshold,
            seed,
        } => {
            if !(0.0..=1.0).contains(&threshold) {
                return Err(Failure::Config("threshold must be in [0, 1]".into()).into());
            }
            let settings = DetectorSettings {
                kind: match detector {
                    Detector::Pixel => DetectorKind::Pixel,
                    Detector::Oracle => DetectorKind::Oracle,
                },
                threshold,
                ..DetectorSettings::default()
            };
            stage("extract", || {
                fresh_dir(&out)?;
                let r = stages::extract(&Dataset::load(&input)?, &out, &settings, seed)?;
                println!(
                    "kept {} of {} images, {} of {} triples",
                    r.kept_images, r.images, r.kept_triples, r.requested_triples
                );
                Ok(())
            })
        }
        Command::TrainSgg {
            data,
            out,
            epochs,
            seed,
        } => {
            let mut parts = Vec::new();
            for d in &data {
                parts.push(match d.rsplit_once(':') {
                    Some((dir, limit)) if limit.chars().all(|c| c.is_ascii_digit()) && !limit.is_empty() => {
                        (PathBuf::from(dir), Some(limit.parse::<usize>().expect("digits")))
                    }
                    _ => (PathBuf::from(d), None),
                });
            }
            let mut hyper = SggHyper {
                seed,
                ..SggHyper::default()
            };
            if let Some(e) = epochs {
                if e == 0 {
                    return Err(Failure::Config("epochs must be positive".into()).into());
                }
                hyper.epochs = e;
            }
            stage("train-sgg", || {
                fresh_dir(&out)?;
                let sets: Vec<Dataset> = parts.iter().map(|(p, _)| Dataset::load(p)).collect::<anyhow::Result<_>>()?;
                let refs: Vec<(&Dataset, Option<usize>)> = sets.iter().zip(&parts).map(|(d, (_, l))| (d, *l)).collect();
                let s = stages::train_sgg_on(&refs, &out, &hyper)?;
                println!(
                    "relation loss {:.4} -> {:.4} on {} pairs",
                    s.initial_relation_loss, s.final_relation_loss, s.pairs
                );
                Ok(())
            })
        }
        Command::Eval {
            model,
            test,
            out,
            mode,
            name,
            baseline,
        } => {
            let baseline: Option<EvalReport> = match &baseline {
                Some(p) => Some(read_json(p).map_err(|e| Failure::Config(format!("{e:#}")))?),
                None => None,
            };
            let mode = match mode {
                Mode::Plain => ScoreMode::Plain,
                Mode::Tde => ScoreMode::Tde,
            };
            stage("eval", || {
                fresh_dir(&out)?;
                let metrics = stages::eval_sgg(&model, &Dataset::load(&test)?, mode, &out)?;
                let report = build_report(&name, &metrics, baseline.as_ref())?;
                std::fs::write(out.join("report.json"), report.to_json() + "\n")?;
                for (k, r) in &report.recall {
                    println!("R@{k} {r:.4}  NG-R@{k} {:.4}", report.ng_recall[k]);
                }
                Ok(())
            })
        }
        Command::Report { reports, baseline, out } => {
            let reports: Vec<EvalReport> = reports
                .iter()
                .map(|p| read_json(p).map_err(|e| Failure::Config(format!("{e:#}"))))
                .collect::<Result<_, _>>()?;
            let base = match &baseline {
                Some(b) => Some(
                    reports
                        .iter()
                        .position(|r| &r.name == b)
                        .ok_or_else(|| Failure::Config(format!("no report named {b}")))?,
                ),
                None => None,
            };
            stage("report", || {
                fresh_dir(&out)?;
                let rows: Vec<TableRow> = reports
                    .iter()
                    .map(|r| TableRow {
                        label: r.name.clone(),
                        masks: None,
                        report: r.clone(),
                    })
                    .collect();
                for (style, ext) in [(TableStyle::Markdown, "md"), (TableStyle::Csv, "csv")] {
                    std::fs::write(out.join(format!("recall.{ext}")), render_recall_table(&rows, base, style)?)?;
                    std::fs::write(
                        out.join(format!("predicates.{ext}")),
                        render_predicate_table(&rows, base, style)?,
                    )?;
                }
                print!("{}", render_recall_table(&rows, base, TableStyle::Markdown)?);
                Ok(())
            })
        }
        Command::Experiment {
            command: ExperimentCommand::Run { config, out },
        } => {
            let cfg = ExperimentConfig::load(&config)?;
            let out = out.unwrap_or_else(|| {
                std::env::var_os(OUT_ENV)
                    .map(PathBuf::from)
                    .unwrap_or_else(|| PathBuf::from("runs"))
                    .join(&cfg.name)
            });
            let outcome = run_experiment(&cfg, &out)?;
            for s in &outcome.scenarios {
                println!("{} (mean over seeds {:?}):", s.scenario.as_str(), cfg.seeds);
                for r in &s.mean {
                    let mean = |m: &std::collections::BTreeMap<usize, f64>| m.values().sum::<f64>() / m.len() as f64;
                    println!("  {:<16} mean R {:.4}  mean NG-R {:.4}", r.name, mean(&r.recall), mean(&r.ng_recall));
                }
            }
            println!("reports in {}", outcome.report_dir.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
