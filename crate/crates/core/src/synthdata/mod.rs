//! Procedural implicit-attribute dataset: rendering, text, splits and audit.

mod ppm;
mod render;
mod schema;

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use ppm::{decode_ppm, encode_ppm, read_ppm, write_ppm};
pub use render::{builtin_schema, render_image, render_with, Nuisance, IMAGE_SIZE};
pub use schema::{default_schemas, AttributeSchema, Renderer, ValueSpec, ADJECTIVES, CATEGORIES, NOUNS};

use crate::error::{EivenError, Result};
use crate::lbc::normalize;
use crate::vision::ImageGrid;

pub const MANIFEST: &str = "manifest.jsonl";
pub const STATS: &str = "stats.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = EivenError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(EivenError::Input(format!("unknown split {other:?}"))),
        }
    }
}

/// Where the value can be read off: the image, a text cue, or both.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Evidence {
    Image,
    TextCue,
    Both,
}

impl Evidence {
    pub fn shows_image(self) -> bool {
        self != Evidence::TextCue
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProductInstance {
    pub id: String,
    pub image_path: String,
    pub text_context: String,
    pub attribute: String,
    pub value: String,
    pub split: Split,
    pub evidence: Evidence,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub samples_per_value: usize,
    pub cap: usize,
    /// Train, validation and test fractions.
    pub split_ratios: [f64; 3],
    /// Image-only, text-cue-only and both.
    pub evidence_mix: [f64; 3],
    /// Restricts generation to these attributes; empty means all.
    pub attributes: Vec<String>,
    pub seed: u64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            samples_per_value: 200,
            cap: 1000,
            split_ratios: [0.70, 0.15, 0.15],
            evidence_mix: [0.5, 0.3, 0.2],
            attributes: Vec::new(),
            seed: 0,
        }
    }
}

fn check_fractions(field: &str, v: &[f64; 3], strictly_positive: bool) -> Result<()> {
    let ok = v
        .iter()
        .all(|&x| x.is_finite() && if strictly_positive { x > 0.0 } else { x >= 0.0 });
    if !ok || (v.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(EivenError::config(
            field,
            format!(
                "{v:?} must be {} and sum to 1",
                if strictly_positive { "positive" } else { "non-negative" }
            ),
        ));
    }
    Ok(())
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<()> {
        check_fractions("data.split_ratios", &self.split_ratios, true)?;
        check_fractions("data.evidence_mix", &self.evidence_mix, false)?;
        if self.samples_per_value == 0 {
            return Err(EivenError::config("data.samples_per_value", "must be at least 1"));
        }
        if self.samples_per_value > self.cap {
            return Err(EivenError::config(
                "data.samples_per_value",
                format!("{} exceeds the per-value cap {}", self.samples_per_value, self.cap),
            ));
        }
        Ok(())
    }

    pub fn schemas(&self) -> Result<Vec<AttributeSchema>> {
        let all = default_schemas();
        if self.attributes.is_empty() {
            return Ok(all);
        }
        self.attributes
            .iter()
            .map(|a| {
                all.iter()
                    .find(|s| &s.name == a)
                    .cloned()
                    .ok_or_else(|| EivenError::config("data.attributes", format!("unknown attribute {a:?}")))
            })
            .collect()
    }
}

/// Splits `n` into three integer counts, each within one of `n * fraction`.
pub fn apportion(n: usize, fractions: &[f64; 3]) -> [usize; 3] {
    let a = (n as f64 * fractions[0]).round() as usize;
    let b = ((n as f64 * fractions[1]).round() as usize).min(n - a.min(n));
    let a = a.min(n);
    [a, b, n - a - b]
}

/// A generated or loaded dataset; `images[i]` belongs to `instances[i]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub instances: Vec<ProductInstance>,
    pub images: Vec<ImageGrid>,
}

impl Dataset {
    pub fn split(&self, split: Split) -> Vec<usize> {
        (0..self.instances.len())
            .filter(|&i| self.instances[i].split == split)
            .collect()
    }

    pub fn attributes(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for inst in &self.instances {
            if !out.contains(&inst.attribute) {
                out.push(inst.attribute.clone());
            }
        }
        out
    }
}

fn text_context(value: &ValueSpec, evidence: Evidence, rng: &mut ChaCha8Rng) -> String {
    let mut words: Vec<&str> = vec![ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())]];
    let second = ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
    if second != words[0] {
        words.push(second);
    }
    if evidence != Evidence::Image {
        let cue = value.cues[rng.gen_range(0..value.cues.len())].as_str();
        let at = rng.gen_range(0..=words.len());
        words.insert(at, cue);
    }
    words.push(NOUNS[rng.gen_range(0..NOUNS.len())]);
    format!(
        "{}: {}",
        CATEGORIES[rng.gen_range(0..CATEGORIES.len())],
        words.join(" ")
    )
}

/// Generates the dataset in memory. Instances are ordered by attribute,
/// then value, then a shuffled position; ids are sequential.
pub fn generate(schemas: &[AttributeSchema], cfg: &DatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    if schemas.is_empty() {
        return Err(EivenError::Schema("no attributes to generate".into()));
    }
    for s in schemas {
        s.validate()?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.samples_per_value;
    let mut instances = Vec::new();
    let mut images = Vec::new();
    for schema in schemas {
        for value in &schema.values {
            let mix = apportion(n, &cfg.evidence_mix);
            let mut evidence: Vec<Evidence> = [Evidence::Image, Evidence::TextCue, Evidence::Both]
                .iter()
                .zip(mix)
                .flat_map(|(&e, k)| std::iter::repeat(e).take(k))
                .collect();
            evidence.shuffle(&mut rng);
            let [n_train, n_val, _] = apportion(n, &cfg.split_ratios);
            for (i, &ev) in evidence.iter().enumerate() {
                let split = if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                };
                let id = format!("p{:05}", instances.len());
                let image = render_image(schema, &value.name, ev, &mut rng)?;
                let text = text_context(value, ev, &mut rng);
                let inst = ProductInstance {
                    image_path: format!("images/{id}.ppm"),
                    id,
                    text_context: text,
                    attribute: schema.name.clone(),
                    value: value.name.clone(),
                    split,
                    evidence: ev,
                };
                if let Some(bad) = violation(&inst, schemas) {
                    return Err(EivenError::Schema(format!("generated text names the value: {bad}")));
                }
                instances.push(inst);
                images.push(image);
            }
        }
    }
    Ok(Dataset { instances, images })
}

fn violation(inst: &ProductInstance, schemas: &[AttributeSchema]) -> Option<String> {
    let text = normalize(&inst.text_context);
    let mut names = vec![normalize(&inst.value)];
    if let Some(v) = schemas
        .iter()
        .find(|s| s.name == inst.attribute)
        .and_then(|s| s.value(&inst.value).ok())
    {
        names.extend(v.synonyms.iter().map(|w| normalize(w)));
    }
    names
        .into_iter()
        .find(|n| !n.is_empty() && text.contains(n.as_str()))
        .map(|n| format!("{} mentions {n:?}", inst.id))
}

/// Ids of instances whose text contains their value or a listed synonym.
pub fn verify_implicitness(instances: &[ProductInstance], schemas: &[AttributeSchema]) -> Vec<String> {
    instances
        .iter()
        .filter(|i| violation(i, schemas).is_some())
        .map(|i| i.id.clone())
        .collect()
}

pub fn verify_manifest(path: &Path, schemas: &[AttributeSchema]) -> Result<Vec<String>> {
    Ok(verify_implicitness(&read_manifest(path)?, schemas))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributeStats {
    pub attribute: String,
    pub samples: usize,
    pub values: usize,
    /// Largest and smallest per-value instance counts.
    pub head: usize,
    pub tail: usize,
    pub per_value: BTreeMap<String, usize>,
    pub per_split: BTreeMap<String, usize>,
    pub per_evidence: BTreeMap<String, usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub samples: usize,
    pub values: usize,
    pub head: usize,
    pub tail: usize,
    pub attributes: Vec<AttributeStats>,
    pub config: DatasetConfig,
}

pub fn stats(instances: &[ProductInstance], cfg: &DatasetConfig) -> DatasetStats {
    let mut attributes: Vec<AttributeStats> = Vec::new();
    for inst in instances {
        let idx = match attributes.iter().position(|a| a.attribute == inst.attribute) {
            Some(i) => i,
            None => {
                attributes.push(AttributeStats {
                    attribute: inst.attribute.clone(),
                    samples: 0,
                    values: 0,
                    head: 0,
                    tail: 0,
                    per_value: BTreeMap::new(),
                    per_split: BTreeMap::new(),
                    per_evidence: BTreeMap::new(),
                });
                attributes.len() - 1
            }
        };
        let a = &mut attributes[idx];
        a.samples += 1;
        *a.per_value.entry(inst.value.clone()).or_default() += 1;
        *a.per_split.entry(inst.split.name().to_string()).or_default() += 1;
        let ev = serde_json::to_value(inst.evidence)
            .ok()
            .and_then(|v| v.as_str().map(String::from))
            .unwrap_or_default();
        *a.per_evidence.entry(ev).or_default() += 1;
    }
    for a in &mut attributes {
        a.values = a.per_value.len();
        a.head = a.per_value.values().copied().max().unwrap_or(0);
        a.tail = a.per_value.values().copied().min().unwrap_or(0);
    }
    DatasetStats {
        samples: instances.len(),
        values: attributes.iter().map(|a| a.values).sum(),
        head: attributes.iter().map(|a| a.head).max().unwrap_or(0),
        tail: attributes.iter().map(|a| a.tail).min().unwrap_or(0),
        attributes,
        config: cfg.clone(),
    }
}

/// Generates and writes `manifest.jsonl`, `images/*.ppm` and `stats.json`.
pub fn gen_dataset(schemas: &[AttributeSchema], cfg: &DatasetConfig, out: &Path) -> Result<Dataset> {
    let data = generate(schemas, cfg)?;
    let images_dir = out.join("images");
    fs::create_dir_all(&images_dir).map_err(|e| EivenError::io(&images_dir, e))?;
    for (inst, img) in data.instances.iter().zip(&data.images) {
        write_ppm(&out.join(&inst.image_path), img)?;
    }
    write_manifest(&out.join(MANIFEST), &data.instances)?;
    let stats_path = out.join(STATS);
    let json = serde_json::to_string_pretty(&stats(&data.instances, cfg))?;
    fs::write(&stats_path, json + "\n").map_err(|e| EivenError::io(&stats_path, e))?;
    Ok(data)
}

pub fn write_manifest(path: &Path, instances: &[ProductInstance]) -> Result<()> {
    let mut buf = Vec::new();
    for inst in instances {
        serde_json::to_writer(&mut buf, inst)?;
        buf.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| EivenError::io(path, e))?;
    f.write_all(&buf).map_err(|e| EivenError::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ProductInstance>> {
    let f = fs::File::open(path).map_err(|e| EivenError::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line.map_err(|e| EivenError::io(path, e))?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Loads a dataset directory written by [`gen_dataset`].
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let instances = read_manifest(&dir.join(MANIFEST))?;
    let images = instances
        .iter()
        .map(|i| read_ppm(&resolve(dir, &i.image_path)))
        .collect::<Result<_>>()?;
    Ok(Dataset { instances, images })
}

fn resolve(dir: &Path, p: &str) -> PathBuf {
    let p = Path::new(p);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        dir.join(p)
    }
}
