//! JSON-lines dataset manifests.
//!
//! One canonical JSON object per line:
//!
//! ```text
//! {"caption":{...},"graph":{...},"image":"images/000000.png","provenance":"real","seed":7}
//! ```
//!
//! Synthetic records may also carry `freeform` (the free-form caption used for
//! generation), `masks` (packed attention masks) and `guidance`.
//! Image paths are relative to the manifest's directory.

use std::fmt;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use image::RgbImage;
use serde_json::{Map, Value};

use crate::caption::{build_caption, CaptionMapping, TokenSeq};
use crate::error::GraphError;
use crate::graph::{graph_from_value, graph_to_value, SceneGraph};
use crate::json::canonical_string;
use crate::mask::PackedMask;
use crate::vocab::Vocab;
use crate::world::Scene;

/// The five image sources compared by the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GeneratorId {
    /// Caption-only diffusion without the scene-graph adapter.
    Baseline,
    /// Adapter configuration 1..=4.
    Config(u8),
}

impl GeneratorId {
    pub const ALL: [GeneratorId; 5] = [
        GeneratorId::Baseline,
        GeneratorId::Config(1),
        GeneratorId::Config(2),
        GeneratorId::Config(3),
        GeneratorId::Config(4),
    ];

    /// (cross-attention mask, self-attention mask) flags; `None` for the baseline.
    pub fn mask_flags(self) -> Option<(bool, bool)> {
        match self {
            GeneratorId::Baseline => None,
            GeneratorId::Config(1) => Some((true, true)),
            GeneratorId::Config(2) => Some((true, false)),
            GeneratorId::Config(3) => Some((false, true)),
            GeneratorId::Config(_) => Some((false, false)),
        }
    }

    pub fn display_name(self) -> String {
        match self {
            GeneratorId::Baseline => "Plain diffusion".into(),
            GeneratorId::Config(c) => format!("Adapter configuration {c}"),
        }
    }
}

impl fmt::Display for GeneratorId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GeneratorId::Baseline => f.write_str("baseline"),
            GeneratorId::Config(c) => write!(f, "{c}"),
        }
    }
}

impl FromStr for GeneratorId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "baseline" => Ok(GeneratorId::Baseline),
            other => match other.trim_start_matches("config").trim_start_matches('-').parse::<u8>() {
                Ok(c @ 1..=4) => Ok(GeneratorId::Config(c)),
                _ => Err(format!("unknown generator {s:?}; expected baseline or 1..4")),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Provenance {
    Real,
    Synthetic(GeneratorId),
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Provenance::Real => f.write_str("real"),
            Provenance::Synthetic(g) => write!(f, "synthetic:{g}"),
        }
    }
}

impl FromStr for Provenance {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "real" => Ok(Provenance::Real),
            _ => match s.strip_prefix("synthetic:") {
                Some(g) => Ok(Provenance::Synthetic(g.parse()?)),
                None => Err(format!("unknown provenance {s:?}")),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRecord {
    pub image: String,
    pub graph: SceneGraph,
    pub caption: CaptionMapping,
    pub provenance: Provenance,
    pub seed: u64,
    pub freeform: Option<TokenSeq>,
    pub masks: Option<(PackedMask, PackedMask)>,
    pub guidance: Option<f64>,
}

impl ManifestRecord {
    pub fn to_json(&self, v: &Vocab) -> String {
        let mut m = Map::new();
        m.insert("image".into(), Value::String(self.image.clone()));
        m.insert("graph".into(), graph_to_value(&self.graph, v));
        m.insert(
            "caption".into(),
            serde_json::to_value(&self.caption).expect("caption serializes"),
        );
        m.insert("provenance".into(), Value::String(self.provenance.to_string()));
        m.insert("seed".into(), Value::from(self.seed));
        if let Some(f) = &self.freeform {
            m.insert("freeform".into(), serde_json::to_value(f).expect("tokens serialize"));
        }
        if let Some((sgc, satt)) = &self.masks {
            m.insert(
                "masks".into(),
                serde_json::json!({ "sgc": sgc, "satt": satt }),
            );
        }
        if let Some(g) = self.guidance {
            m.insert("guidance".into(), serde_json::json!(g));
        }
        canonical_string(&Value::Object(m))
    }

    pub fn from_json(line: &str, v: &Vocab, record: usize) -> Result<Self, GraphError> {
        let fmt_err = |message: String| GraphError::Format { record, message };
        let value: Value = serde_json::from_str(line).map_err(|e| fmt_err(e.to_string()))?;
        let m = value
            .as_object()
            .ok_or_else(|| fmt_err("record must be an object".into()))?;
        let get = |k: &str| m.get(k).ok_or_else(|| fmt_err(format!("missing {k:?}")));
        let image = get("image")?
            .as_str()
            .ok_or_else(|| fmt_err("image must be a string".into()))?
            .to_string();
        let graph = graph_from_value(get("graph")?, v)?;
        let caption: CaptionMapping =
            serde_json::from_value(get("caption")?.clone()).map_err(|e| fmt_err(e.to_string()))?;
        let provenance = get("provenance")?
            .as_str()
            .ok_or_else(|| fmt_err("provenance must be a string".into()))?
            .parse()
            .map_err(fmt_err)?;
        let seed = get("seed")?
            .as_u64()
            .ok_or_else(|| fmt_err("seed must be an integer".into()))?;
        let freeform = match m.get("freeform") {
            Some(f) => Some(serde_json::from_value(f.clone()).map_err(|e| fmt_err(e.to_string()))?),
            None => None,
        };
        let masks = match m.get("masks") {
            Some(mk) => {
                let sgc = serde_json::from_value(mk["sgc"].clone()).map_err(|e| fmt_err(e.to_string()))?;
                let satt = serde_json::from_value(mk["satt"].clone()).map_err(|e| fmt_err(e.to_string()))?;
                Some((sgc, satt))
            }
            None => None,
        };
        let guidance = m.get("guidance").and_then(Value::as_f64);
        Ok(Self {
            image,
            graph,
            caption,
            provenance,
            seed,
            freeform,
            masks,
            guidance,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DatasetManifest {
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl DatasetManifest {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self, v: &Vocab) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&r.to_json(v));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str, v: &Vocab) -> Result<Self, GraphError> {
        let records = text
            .lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| ManifestRecord::from_json(l, v, i))
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path, v: &Vocab) -> Result<(), GraphError> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(self.to_jsonl(v).as_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path, v: &Vocab) -> Result<Self, GraphError> {
        Self::from_jsonl(&std::fs::read_to_string(path)?, v)
    }
}

pub fn image_file_name(index: usize) -> String {
    format!("images/{index:06}.png")
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<(), GraphError> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| GraphError::Io(std::io::Error::other(e)))
}

pub fn load_png(path: &Path) -> Result<RgbImage, GraphError> {
    Ok(image::open(path)
        .map_err(|e| GraphError::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?
        .to_rgb8())
}

/// Writes scenes as PNGs under `dir/images` and returns their manifest
/// (not yet saved). Scenes whose caption cannot be built are skipped.
pub fn write_scenes(
    dir: &Path,
    scenes: &[Scene],
    seeds: &[u64],
    provenance: Provenance,
    v: &Vocab,
) -> Result<DatasetManifest, GraphError> {
    let mut records = Vec::with_capacity(scenes.len());
    for (i, scene) in scenes.iter().enumerate() {
        let Ok(caption) = build_caption(&scene.graph, v) else {
            continue;
        };
        let image = image_file_name(i);
        save_png(&scene.image, &dir.join(&image))?;
        records.push(ManifestRecord {
            image,
            graph: scene.graph.clone(),
            caption,
            provenance,
            seed: seeds.get(i).copied().unwrap_or(0),
            freeform: None,
            masks: None,
            guidance: None,
        });
    }
    Ok(DatasetManifest { records })
}

/// Loads the images of a manifest saved at `manifest_path`.
pub fn load_images(manifest_path: &Path, m: &DatasetManifest) -> Result<Vec<RgbImage>, GraphError> {
    let dir: PathBuf = manifest_path.parent().map(Path::to_path_buf).unwrap_or_default();
    m.records.iter().map(|r| load_png(&dir.join(&r.image))).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::AttentionMaskPair;
    use crate::world::{generate_world, WorldSpec};

    #[test]
    fn provenance_strings() {
        for p in [
            Provenance::Real,
            Provenance::Synthetic(GeneratorId::Baseline),
            Provenance::Synthetic(GeneratorId::Config(3)),
        ] {
            assert_eq!(p.to_string().parse::<Provenance>().unwrap(), p);
        }
        assert!("synthetic:7".parse::<Provenance>().is_err());
        assert!("fake".parse::<Provenance>().is_err());
    }

    #[test]
    fn records_round_trip_with_optional_fields() {
        let spec = WorldSpec::default();
        let v = spec.vocab();
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_world(3, &spec, 5);
        let mut m = write_scenes(dir.path(), &scenes, &[1, 2, 3], Provenance::Real, &v).unwrap();
        let masks = AttentionMaskPair::build(&m.records[0].caption);
        m.records[0].provenance = Provenance::Synthetic(GeneratorId::Config(1));
        m.records[0].masks = Some((masks.sgc.to_bits(), masks.satt.to_bits()));
        m.records[0].guidance = Some(2.0);
        let path = dir.path().join(MANIFEST_FILE);
        m.save(&path, &v).unwrap();
        let back = DatasetManifest::load(&path, &v).unwrap();
        assert_eq!(back, m);
        let images = load_images(&path, &back).unwrap();
        assert_eq!(images[1], scenes[1].image);
    }
}
