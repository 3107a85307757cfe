//! Pipeline steps over dataset directories.
//!
//! A dataset directory holds `manifest.jsonl`, `vocab.json`, `world.json` and
//! the PNGs the manifest points at. Steps that derive a dataset copy the images
//! they keep and renumber them, so every directory is self-contained.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use nesyaug_core::caption::build_caption;
use nesyaug_core::detect::{oracle_detect, PixelDetector};
use nesyaug_core::extract::extract_annotations;
use nesyaug_core::filter::{apply_filters, FilterPolicy, FilterReport};
use nesyaug_core::json::to_canonical;
use nesyaug_core::manifest::{
    image_file_name, load_png, save_png, write_scenes, DatasetManifest, GeneratorId, ManifestRecord, Provenance,
    MANIFEST_FILE,
};
use nesyaug_core::mask::AttentionMaskPair;
use nesyaug_core::report::EvalMetrics;
use nesyaug_core::world::{generate_world, random_layout, scene_rng, WorldSpec};
use nesyaug_core::{SceneGraph, Vocab};
use nesyaug_models::diffusion::{images_to_tensor, CondInput, Generator, SampleRequest};
use nesyaug_models::sgg::{evaluate, train_sgg, ScoreMode, SggExample, SggHyper, SggModel, SggTrainStats};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{DetectorKind, DetectorSettings, GeneratorSettings};

pub const VOCAB_FILE: &str = "vocab.json";
pub const WORLD_FILE: &str = "world.json";
pub const GENERATOR_FILE: &str = "generator.ckpt";
pub const SGG_FILE: &str = "sgg.ckpt";
pub const METRICS_FILE: &str = "metrics.json";

/// Independent seed for a named sub-task of run `seed`.
pub fn derive_seed(seed: u64, tag: &str) -> u64 {
    let d = Sha256::digest(format!("{seed}/{tag}").as_bytes());
    u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")
        .with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text)?)
}

pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
    pub vocab: Vocab,
    pub world: WorldSpec,
}

impl Dataset {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let vocab = Vocab::from_json(
            &std::fs::read_to_string(dir.join(VOCAB_FILE)).with_context(|| format!("no vocabulary in {}", dir.display()))?,
        )?;
        let world: WorldSpec = read_json(&dir.join(WORLD_FILE))?;
        let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE), &vocab)
            .with_context(|| format!("loading manifest in {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            vocab,
            world,
        })
    }

    /// Writes the manifest and metadata; the images must already be in place.
    pub fn save(dir: &Path, manifest: &DatasetManifest, world: &WorldSpec) -> anyhow::Result<()> {
        let vocab = world.vocab();
        manifest.save(&dir.join(MANIFEST_FILE), &vocab)?;
        std::fs::write(dir.join(VOCAB_FILE), vocab.to_json())?;
        std::fs::write(dir.join(WORLD_FILE), to_canonical(world)? + "\n")?;
        Ok(())
    }

    pub fn image(&self, r: &ManifestRecord) -> anyhow::Result<image::RgbImage> {
        Ok(load_png(&self.dir.join(&r.image))?)
    }

    /// The first `limit` records (all when `None`) as SGG examples.
    pub fn examples(&self, limit: Option<usize>) -> anyhow::Result<Vec<SggExample>> {
        let n = limit.unwrap_or(self.manifest.len()).min(self.manifest.len());
        self.manifest.records[..n]
            .iter()
            .map(|r| {
                Ok(SggExample {
                    image: self.image(r)?,
                    graph: r.graph.clone(),
                })
            })
            .collect()
    }
}

/// Copies the images of `records` from `src` into `dst`, renumbered in order.
fn copy_records(src: &Path, dst: &Path, records: Vec<ManifestRecord>) -> anyhow::Result<DatasetManifest> {
    std::fs::create_dir_all(dst.join("images"))?;
    let mut out = Vec::with_capacity(records.len());
    for (i, mut r) in records.into_iter().enumerate() {
        let name = image_file_name(i);
        std::fs::copy(src.join(&r.image), dst.join(&name))
            .with_context(|| format!("copying {}", src.join(&r.image).display()))?;
        r.image = name;
        out.push(r);
    }
    Ok(DatasetManifest { records: out })
}

/// Renders `n` scenes of `world` into `dir`.
pub fn world_gen(dir: &Path, world: &WorldSpec, n: usize, seed: u64) -> anyhow::Result<Dataset> {
    world.validate().map_err(anyhow::Error::msg)?;
    if n == 0 {
        bail!("scene count must be at least 1");
    }
    let scenes = generate_world(n, world, seed);
    let m = write_scenes(dir, &scenes, &vec![seed; n], Provenance::Real, &world.vocab())?;
    Dataset::save(dir, &m, world)?;
    Dataset::load(dir)
}

pub fn filter(src: &Dataset, dir: &Path, policy: &FilterPolicy) -> anyhow::Result<FilterReport> {
    policy.validate().map_err(anyhow::Error::msg)?;
    let (kept, report) = apply_filters(&src.manifest, policy, &src.vocab);
    let m = copy_records(&src.dir, dir, kept.records)?;
    Dataset::save(dir, &m, &src.world)?;
    write_json(&dir.join("filter_report.json"), &report)?;
    Ok(report)
}

fn cond_inputs(records: &[ManifestRecord], v: &Vocab) -> anyhow::Result<Vec<CondInput>> {
    records
        .iter()
        .enumerate()
        .map(|(i, r)| Ok(CondInput::new(r.graph.clone(), r.caption.clone(), v, i as u64)?))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainGenSummary {
    pub generator: String,
    pub records: usize,
    pub steps: usize,
    pub first_loss: f32,
    /// Mean loss over the last 10% of steps.
    pub final_loss: f32,
}

/// Trains generator `id` on a real dataset and saves its checkpoint in `dir`.
pub fn train_generator(
    data: &Dataset,
    dir: &Path,
    id: GeneratorId,
    settings: &GeneratorSettings,
    seed: u64,
) -> anyhow::Result<TrainGenSummary> {
    if data.manifest.is_empty() {
        bail!("no training records in {}", data.dir.display());
    }
    let mut cfg = settings.model.clone();
    cfg.seed = seed;
    let mut gen = Generator::new(id, &data.vocab, cfg)?;
    let images: Vec<_> = data.manifest.records.iter().map(|r| data.image(r)).collect::<anyhow::Result<_>>()?;
    let inputs = cond_inputs(&data.manifest.records, &data.vocab)?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "train-noise"));
    let losses = gen.train(&images_to_tensor(&images)?, &inputs, settings.train_steps, &mut rng)?;
    gen.save(&dir.join(GENERATOR_FILE))?;
    let tail = &losses[losses.len() - (losses.len() / 10).max(1)..];
    let summary = TrainGenSummary {
        generator: id.to_string(),
        records: data.manifest.len(),
        steps: losses.len(),
        first_loss: losses[0],
        final_loss: tail.iter().sum::<f32>() / tail.len() as f32,
    };
    write_json(&dir.join("losses.json"), &losses)?;
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// `n` layouts with at least one relation and a valid caption; layout `i`
/// comes from stream `i` of `seed`, skipping unusable streams.
pub fn request_layouts(world: &WorldSpec, n: usize, seed: u64) -> Vec<(u64, SceneGraph)> {
    let v = world.vocab();
    let mut out = Vec::with_capacity(n);
    let mut stream = 0u64;
    while out.len() < n {
        let g = random_layout(world, &mut scene_rng(seed, stream));
        if !g.relations.is_empty() && build_caption(&g, &v).is_ok() {
            out.push((stream, g));
        }
        stream += 1;
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct SampleOptions {
    pub n: usize,
    pub seed: u64,
    pub guidance: f64,
    pub steps: usize,
}

/// Draws `opts.n` images conditioned on fresh layouts and writes them with
/// their requested graphs to `dir`.
pub fn sample(gen: &Generator, world: &WorldSpec, dir: &Path, opts: SampleOptions) -> anyhow::Result<Dataset> {
    let v = world.vocab();
    if gen.vocab() != &v {
        bail!("generator vocabulary does not match the world");
    }
    let layouts = request_layouts(world, opts.n, opts.seed);
    let conditions: Vec<CondInput> = layouts
        .iter()
        .map(|(stream, g)| Ok(CondInput::new(g.clone(), build_caption(g, &v)?, &v, *stream)?))
        .collect::<anyhow::Result<_>>()?;
    let mut records = Vec::with_capacity(opts.n);
    // Chunked only to bound memory; image i always uses noise stream i.
    const CHUNK: usize = 256;
    for (c, chunk) in conditions.chunks(CHUNK).enumerate() {
        let req = SampleRequest {
            image_size: gen.cfg.image_size,
            steps: opts.steps,
            guidance: opts.guidance,
            seed: derive_seed(opts.seed, &format!("noise/{c}")),
            conditions: chunk.to_vec(),
        };
        let images = gen.sample(&req)?;
        for (j, (img, cond)) in images.iter().zip(chunk).enumerate() {
            let i = c * CHUNK + j;
            let name = image_file_name(i);
            save_png(img, &dir.join(&name))?;
            let masks = gen.id.mask_flags().map(|_| {
                let pair = AttentionMaskPair::build(&cond.caption);
                (pair.sgc.to_bits(), pair.satt.to_bits())
            });
            records.push(ManifestRecord {
                image: name,
                graph: cond.graph.clone(),
                caption: cond.caption.clone(),
                provenance: Provenance::Synthetic(gen.id),
                seed: opts.seed,
                freeform: (gen.id == GeneratorId::Config(4)).then(|| cond.freeform.clone()),
                masks,
                guidance: Some(opts.guidance),
            });
        }
    }
    let m = DatasetManifest { records };
    Dataset::save(dir, &m, world)?;
    Dataset::load(dir)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ExtractReport {
    pub images: usize,
    pub kept_images: usize,
    pub requested_triples: usize,
    pub kept_triples: usize,
    pub detections: usize,
}

/// Verifies each generated image against its requested graph and keeps the
/// records with at least one surviving relation.
pub fn extract(src: &Dataset, dir: &Path, detector: &DetectorSettings, seed: u64) -> anyhow::Result<ExtractReport> {
    let pixel = PixelDetector::new(&src.world, detector.pixel.clone());
    let mut report = ExtractReport::default();
    let mut kept = Vec::new();
    for (i, r) in src.manifest.records.iter().enumerate() {
        let detections = match detector.kind {
            DetectorKind::Pixel => pixel.detect(&src.image(r)?),
            DetectorKind::Oracle => {
                oracle_detect(&r.graph, src.vocab.objects.len(), &detector.noise, &mut scene_rng(seed, i as u64))
            }
        };
        report.images += 1;
        report.detections += detections.len();
        report.requested_triples += r.graph.relations.len();
        let graph = extract_annotations(&r.graph, &detections, detector.threshold);
        if graph.relations.is_empty() {
            continue;
        }
        let Ok(caption) = build_caption(&graph, &src.vocab) else {
            continue;
        };
        report.kept_images += 1;
        report.kept_triples += graph.relations.len();
        kept.push(ManifestRecord {
            graph,
            caption,
            freeform: None,
            masks: None,
            ..r.clone()
        });
    }
    let m = copy_records(&src.dir, dir, kept)?;
    Dataset::save(dir, &m, &src.world)?;
    write_json(&dir.join("extract_report.json"), &report)?;
    Ok(report)
}

/// Trains the SGG model on the union of `parts` (each truncated to its limit).
pub fn train_sgg_on(
    parts: &[(&Dataset, Option<usize>)],
    dir: &Path,
    hyper: &SggHyper,
) -> anyhow::Result<SggTrainStats> {
    let vocab = &parts.first().context("no training data")?.0.vocab;
    let mut examples = Vec::new();
    for (d, limit) in parts {
        if &d.vocab != vocab {
            bail!("training sets use different vocabularies");
        }
        examples.extend(d.examples(*limit)?);
    }
    let (model, stats) = train_sgg(&examples, vocab.objects.len(), vocab.predicates.len(), hyper)?;
    model.save(&dir.join(SGG_FILE), vocab)?;
    std::fs::write(dir.join(VOCAB_FILE), vocab.to_json())?;
    write_json(&dir.join("train_stats.json"), &stats)?;
    Ok(stats)
}

/// Scores a trained SGG checkpoint on a test dataset.
pub fn eval_sgg(model_dir: &Path, test: &Dataset, mode: ScoreMode, out: &Path) -> anyhow::Result<EvalMetrics> {
    let model = SggModel::load(&model_dir.join(SGG_FILE), &test.vocab)?;
    let metrics = evaluate(&model, &test.examples(None)?, mode, &test.vocab)?;
    std::fs::write(out.join(METRICS_FILE), to_canonical(&metrics)? + "\n")?;
    Ok(metrics)
}
