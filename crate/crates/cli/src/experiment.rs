//! Orchestration of the augmentation and synthetic-only experiments.
//!
//! Per seed: render and filter the real and test splits, then for every
//! generator train it on the real split, sample the synthetic set from shared
//! layouts and extract annotations. All synthetic sets are cut to the smallest
//! surviving count so that every generator contributes equally. SGG models are
//! trained per table row and scored on the same test split. A final stage
//! writes per-seed and seed-averaged reports and the tables.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::Context;
use nesyaug_core::json::to_canonical;
use nesyaug_core::manifest::GeneratorId;
use nesyaug_core::report::{
    build_report, render_predicate_table, render_recall_table, EvalMetrics, EvalReport, TableRow, TableStyle,
};
use nesyaug_models::diffusion::Generator;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::config::{ExperimentConfig, Scenario};
use crate::ledger::{RunLedger, Stage};
use crate::stages::{self, derive_seed, read_json, write_json, Dataset, SampleOptions, GENERATOR_FILE, METRICS_FILE};

/// One table row: an SGG model and the data it was trained on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Row {
    Real,
    Augmented(GeneratorId),
    SyntheticOnly(GeneratorId),
}

impl Row {
    pub fn slug(self) -> String {
        match self {
            Row::Real => "real".into(),
            Row::Augmented(g) => format!("aug-{g}"),
            Row::SyntheticOnly(g) => format!("synth-{g}"),
        }
    }

    pub fn label(self) -> String {
        match self {
            Row::Real => "Real dataset".into(),
            Row::Augmented(g) => format!("Real + {}", g.display_name()),
            Row::SyntheticOnly(g) => g.display_name(),
        }
    }

    fn masks(self) -> Option<(bool, bool)> {
        match self {
            Row::Real => None,
            Row::Augmented(g) | Row::SyntheticOnly(g) => g.mask_flags(),
        }
    }
}

/// Rows of a scenario's table and the index of its Δ baseline.
pub fn scenario_rows(scenario: Scenario, gens: &[GeneratorId]) -> (Vec<Row>, Option<usize>) {
    match scenario {
        Scenario::Augmentation => (
            std::iter::once(Row::Real).chain(gens.iter().map(|&g| Row::Augmented(g))).collect(),
            Some(0),
        ),
        Scenario::SyntheticOnly => (
            gens.iter().map(|&g| Row::SyntheticOnly(g)).collect(),
            gens.iter().position(|&g| g == GeneratorId::Baseline),
        ),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReports {
    pub scenario: Scenario,
    /// Seed → reports in row order.
    pub per_seed: BTreeMap<u64, Vec<EvalReport>>,
    pub mean: Vec<EvalReport>,
}

#[derive(Debug, Clone)]
pub struct ExperimentOutcome {
    pub report_dir: PathBuf,
    pub scenarios: Vec<ScenarioReports>,
    /// Seed → synthetic records per generator after truncation.
    pub synthetic_counts: BTreeMap<u64, usize>,
    pub ledger: RunLedger,
}

impl ExperimentOutcome {
    pub fn scenario(&self, s: Scenario) -> Option<&ScenarioReports> {
        self.scenarios.iter().find(|r| r.scenario == s)
    }
}

/// All reports of a run, as written by the report stage.
pub const REPORTS_FILE: &str = "reports.json";

fn stage_name(seed: u64, parts: &[&str]) -> String {
    format!("seed{seed}/{}", parts.join("/"))
}

#[derive(Serialize, Deserialize)]
struct Truncation {
    survivors: BTreeMap<String, usize>,
    count: usize,
}

/// Runs (or resumes) the configured experiment under `out`.
pub fn run_experiment(cfg: &ExperimentConfig, out: &Path) -> anyhow::Result<ExperimentOutcome> {
    cfg.validate()?;
    let gens = cfg.generator_ids()?;
    let mut ledger = RunLedger::open(out)?;
    let mut rows: Vec<Row> = Vec::new();
    for &s in &cfg.scenarios {
        for r in scenario_rows(s, &gens).0 {
            if !rows.contains(&r) {
                rows.push(r);
            }
        }
    }
    let mut synthetic_counts = BTreeMap::new();
    let mut evals: Vec<String> = Vec::new();
    for &seed in &cfg.seeds {
        let count = run_seed(cfg, &gens, &rows, seed, &mut ledger, &mut evals)?;
        synthetic_counts.insert(seed, count);
    }

    let mut eval_dirs = BTreeMap::new();
    for stage in &evals {
        eval_dirs.insert(stage.clone(), ledger.dir(stage).expect("evaluated"));
    }
    let report_dir = ledger.run(
        Stage {
            name: "report".into(),
            seed: 0,
            params: &json!({ "scenarios": cfg.scenarios, "seeds": cfg.seeds, "generators": cfg.generators }),
            inputs: evals,
        },
        |dir| write_reports(cfg, &gens, &eval_dirs, dir, &synthetic_counts),
    )?;
    let scenarios = read_json(&report_dir.join(REPORTS_FILE))?;
    Ok(ExperimentOutcome {
        report_dir,
        scenarios,
        synthetic_counts,
        ledger,
    })
}

fn run_seed(
    cfg: &ExperimentConfig,
    gens: &[GeneratorId],
    rows: &[Row],
    seed: u64,
    ledger: &mut RunLedger,
    evals: &mut Vec<String>,
) -> anyhow::Result<usize> {
    let mut splits = BTreeMap::new();
    for (split, n) in [("real", cfg.real_size), ("test", cfg.test_size)] {
        let world_stage = stage_name(seed, &["world", split]);
        let world_seed = derive_seed(seed, split);
        ledger.run(
            Stage {
                name: world_stage.clone(),
                seed: world_seed,
                params: &json!({ "world": cfg.world, "n": n }),
                inputs: vec![],
            },
            |dir| stages::world_gen(dir, &cfg.world, n, world_seed).map(drop),
        )?;
        let src = ledger.dir(&world_stage).expect("just ran");
        let filter_stage = stage_name(seed, &["filter", split]);
        ledger.run(
            Stage {
                name: filter_stage.clone(),
                seed: world_seed,
                params: &cfg.filter,
                inputs: vec![world_stage],
            },
            |dir| stages::filter(&Dataset::load(&src)?, dir, &cfg.filter).map(drop),
        )?;
        splits.insert(split, filter_stage);
    }
    let real_stage = splits["real"].clone();
    let test_stage = splits["test"].clone();

    let mut extracted = BTreeMap::new();
    let sample_seed = derive_seed(seed, "sample");
    for &g in gens {
        let gname = g.to_string();
        let train_stage = stage_name(seed, &["train-gen", &gname]);
        let gen_seed = derive_seed(seed, "generator");
        let real_dir = ledger.dir(&real_stage).expect("filtered");
        ledger.run(
            Stage {
                name: train_stage.clone(),
                seed: gen_seed,
                params: &json!({ "generator": gname, "settings": cfg.generator }),
                inputs: vec![real_stage.clone()],
            },
            |dir| stages::train_generator(&Dataset::load(&real_dir)?, dir, g, &cfg.generator, gen_seed).map(drop),
        )?;
        let ckpt = ledger.dir(&train_stage).expect("trained").join(GENERATOR_FILE);
        let sample_stage = stage_name(seed, &["sample", &gname]);
        let opts = SampleOptions {
            n: cfg.synthetic_size,
            seed: sample_seed,
            guidance: cfg.generator.guidance,
            steps: cfg.generator.sample_steps,
        };
        ledger.run(
            Stage {
                name: sample_stage.clone(),
                seed: sample_seed,
                params: &json!({ "world": cfg.world, "n": opts.n, "guidance": opts.guidance, "steps": opts.steps }),
                inputs: vec![train_stage],
            },
            |dir| {
                let gen = Generator::load(&ckpt, &cfg.world.vocab())?;
                stages::sample(&gen, &cfg.world, dir, opts).map(drop)
            },
        )?;
        let sample_dir = ledger.dir(&sample_stage).expect("sampled");
        let extract_stage = stage_name(seed, &["extract", &gname]);
        let extract_seed = derive_seed(seed, "detector");
        ledger.run(
            Stage {
                name: extract_stage.clone(),
                seed: extract_seed,
                params: &cfg.detector,
                inputs: vec![sample_stage],
            },
            |dir| stages::extract(&Dataset::load(&sample_dir)?, dir, &cfg.detector, extract_seed).map(drop),
        )?;
        extracted.insert(g, extract_stage);
    }

    let trunc_stage = stage_name(seed, &["truncate"]);
    let mut survivors = BTreeMap::new();
    for (g, stage) in &extracted {
        let d = Dataset::load(&ledger.dir(stage).expect("extracted"))?;
        survivors.insert(g.to_string(), d.manifest.len());
    }
    let count = survivors.values().copied().min().unwrap_or(0);
    ledger.run(
        Stage {
            name: trunc_stage.clone(),
            seed,
            params: &json!({}),
            inputs: extracted.values().cloned().collect(),
        },
        |dir| write_json(&dir.join("truncation.json"), &Truncation { survivors, count }),
    )?;

    let sgg_seed = derive_seed(seed, "sgg");
    let mut hyper = cfg.sgg.hyper.clone();
    hyper.seed = sgg_seed;
    let test_dir = ledger.dir(&test_stage).expect("filtered");
    for &row in rows {
        let slug = row.slug();
        let (parts, mut inputs): (Vec<(String, Option<usize>)>, Vec<String>) = match row {
            Row::Real => (vec![(real_stage.clone(), None)], vec![real_stage.clone()]),
            Row::Augmented(g) => (
                vec![(real_stage.clone(), None), (extracted[&g].clone(), Some(count))],
                vec![real_stage.clone(), extracted[&g].clone()],
            ),
            Row::SyntheticOnly(g) => (vec![(extracted[&g].clone(), Some(count))], vec![extracted[&g].clone()]),
        };
        if row != Row::Real {
            inputs.push(trunc_stage.clone());
        }
        let part_dirs: Vec<(PathBuf, Option<usize>)> = parts
            .iter()
            .map(|(s, l)| (ledger.dir(s).expect("upstream ran"), *l))
            .collect();
        let train_stage = stage_name(seed, &["train-sgg", &slug]);
        ledger.run(
            Stage {
                name: train_stage.clone(),
                seed: sgg_seed,
                params: &json!({ "hyper": hyper, "limits": parts.iter().map(|p| p.1).collect::<Vec<_>>() }),
                inputs,
            },
            |dir| {
                if let Row::SyntheticOnly(g) = row {
                    if count == 0 {
                        anyhow::bail!("no synthetic record from generator {g} kept a relation after extraction");
                    }
                }
                let data: Vec<Dataset> = part_dirs.iter().map(|(d, _)| Dataset::load(d)).collect::<anyhow::Result<_>>()?;
                let refs: Vec<(&Dataset, Option<usize>)> = data.iter().zip(&part_dirs).map(|(d, (_, l))| (d, *l)).collect();
                stages::train_sgg_on(&refs, dir, &hyper).map(drop)
            },
        )?;
        let model_dir = ledger.dir(&train_stage).expect("trained");
        let eval_stage = stage_name(seed, &["eval", &slug]);
        ledger.run(
            Stage {
                name: eval_stage.clone(),
                seed,
                params: &json!({ "score_mode": cfg.sgg.score_mode }),
                inputs: vec![train_stage, test_stage.clone()],
            },
            |dir| stages::eval_sgg(&model_dir, &Dataset::load(&test_dir)?, cfg.sgg.score_mode, dir).map(drop),
        )?;
        evals.push(eval_stage);
    }
    Ok(count)
}

fn mean_metrics(all: &[&EvalMetrics]) -> EvalMetrics {
    fn avg<K: Ord + Clone>(maps: Vec<&BTreeMap<K, f64>>) -> BTreeMap<K, f64> {
        let mut sum: BTreeMap<K, (f64, usize)> = BTreeMap::new();
        for m in maps {
            for (k, v) in m {
                let e = sum.entry(k.clone()).or_default();
                e.0 += v;
                e.1 += 1;
            }
        }
        sum.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
    }
    EvalMetrics {
        recall: avg(all.iter().map(|m| &m.recall).collect()),
        ng_recall: avg(all.iter().map(|m| &m.ng_recall).collect()),
        per_predicate: avg(all.iter().map(|m| &m.per_predicate).collect()),
    }
}

fn reports_for(rows: &[Row], baseline: Option<usize>, metrics: &[EvalMetrics]) -> anyhow::Result<Vec<EvalReport>> {
    let base = match baseline {
        Some(b) => Some(build_report(&rows[b].slug(), &metrics[b], None)?),
        None => None,
    };
    rows.iter()
        .zip(metrics)
        .enumerate()
        .map(|(i, (r, m))| {
            let against = if Some(i) == baseline { None } else { base.as_ref() };
            Ok(build_report(&r.slug(), m, against)?)
        })
        .collect()
}

fn write_tables(
    dir: &Path,
    stem: &str,
    rows: &[Row],
    reports: &[EvalReport],
    baseline: Option<usize>,
    per_predicate: bool,
) -> anyhow::Result<()> {
    let table_rows: Vec<TableRow> = rows
        .iter()
        .zip(reports)
        .map(|(r, rep)| TableRow {
            label: r.label(),
            masks: r.masks(),
            report: rep.clone(),
        })
        .collect();
    for (style, ext) in [(TableStyle::Markdown, "md"), (TableStyle::Csv, "csv")] {
        let text = if per_predicate {
            render_predicate_table(&table_rows, baseline, style)?
        } else {
            render_recall_table(&table_rows, baseline, style)?
        };
        std::fs::write(dir.join(format!("{stem}.{ext}")), text)?;
    }
    Ok(())
}

fn write_reports(
    cfg: &ExperimentConfig,
    gens: &[GeneratorId],
    eval_dirs: &BTreeMap<String, PathBuf>,
    dir: &Path,
    synthetic_counts: &BTreeMap<u64, usize>,
) -> anyhow::Result<()> {
    let mut all = Vec::new();
    for &scenario in &cfg.scenarios {
        let (rows, baseline) = scenario_rows(scenario, gens);
        let sdir = dir.join(scenario.as_str());
        let mut per_seed = BTreeMap::new();
        let mut seed_metrics: Vec<Vec<EvalMetrics>> = Vec::new();
        for &seed in &cfg.seeds {
            let metrics: Vec<EvalMetrics> = rows
                .iter()
                .map(|r| {
                    let d = eval_dirs
                        .get(&stage_name(seed, &["eval", &r.slug()]))
                        .context("evaluation missing")?;
                    read_json(&d.join(METRICS_FILE))
                })
                .collect::<anyhow::Result<_>>()?;
            let reports = reports_for(&rows, baseline, &metrics)?;
            let seed_dir = sdir.join(format!("seed-{seed}"));
            std::fs::create_dir_all(&seed_dir)?;
            for r in &reports {
                std::fs::write(seed_dir.join(format!("{}.json", r.name)), r.to_json() + "\n")?;
            }
            write_tables(&seed_dir, "recall", &rows, &reports, baseline, false)?;
            per_seed.insert(seed, reports);
            seed_metrics.push(metrics);
        }
        let mean_metrics: Vec<EvalMetrics> = (0..rows.len())
            .map(|i| mean_metrics(&seed_metrics.iter().map(|m| &m[i]).collect::<Vec<_>>()))
            .collect();
        let mean = reports_for(&rows, baseline, &mean_metrics)?;
        let mean_dir = sdir.join("mean");
        std::fs::create_dir_all(&mean_dir)?;
        for r in &mean {
            std::fs::write(mean_dir.join(format!("{}.json", r.name)), r.to_json() + "\n")?;
        }
        match scenario {
            Scenario::Augmentation => {
                write_tables(dir, "table1", &rows, &mean, baseline, false)?;
                write_tables(dir, "table2", &rows, &mean, baseline, true)?;
            }
            Scenario::SyntheticOnly => {
                write_tables(dir, "table3", &rows, &mean, baseline, false)?;
                write_tables(dir, "table3_predicates", &rows, &mean, baseline, true)?;
            }
        }
        all.push(ScenarioReports {
            scenario,
            per_seed,
            mean,
        });
    }
    std::fs::write(dir.join(REPORTS_FILE), to_canonical(&all)? + "\n")?;
    write_json(&dir.join("synthetic_counts.json"), synthetic_counts)
}
