//! Deterministic synthetic image world.
//!
//! Every image is rendered from an attribute tuple: one attribute chooses the
//! silhouette, one the fill colour, one a texture and one the proportions.
//! Value `i` of an attribute selects entry `i` of the motif bank for that
//! attribute's [`MotifKind`], so the palette is fixed by the schema order.

use std::collections::{BTreeMap, HashSet};

use ndarray::Array3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{ImageRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MotifKind {
    Shape,
    Fill,
    Texture,
    Proportion,
}

impl MotifKind {
    pub fn bank_size(self) -> usize {
        match self {
            MotifKind::Shape => SHAPES,
            MotifKind::Fill => FILLS.len(),
            MotifKind::Texture => TEXTURES,
            MotifKind::Proportion => PROPORTIONS.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttributeSpec {
    pub name: String,
    pub values: Vec<String>,
    pub motif: MotifKind,
}

impl AttributeSpec {
    pub fn new(name: &str, values: &[&str], motif: MotifKind) -> Self {
        Self {
            name: name.into(),
            values: values.iter().map(|v| v.to_string()).collect(),
            motif,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticWorldConfig {
    /// Ordered schema. Captions list the non-head attributes in this order.
    pub attributes: Vec<AttributeSpec>,
    /// The noun attribute: emitted last in captions and used as meta class.
    pub head_attribute: String,
    pub image_size: usize,
    pub seed: u64,
    /// Standard deviation of per-pixel Gaussian noise before quantization.
    pub noise: f64,
    /// Render a seeded sample of this many tuples instead of all of them.
    pub sample: Option<usize>,
    pub max_tuples: usize,
    pub query_fraction: f64,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        Self {
            attributes: vec![
                AttributeSpec::new(
                    "object",
                    &["dress", "shirt", "skirt", "pants", "hat"],
                    MotifKind::Shape,
                ),
                AttributeSpec::new(
                    "color",
                    &["red", "blue", "green", "yellow", "purple", "orange"],
                    MotifKind::Fill,
                ),
                AttributeSpec::new(
                    "pattern",
                    &["solid", "striped", "dotted", "checked"],
                    MotifKind::Texture,
                ),
                AttributeSpec::new(
                    "style",
                    &["slim", "regular", "loose", "cropped"],
                    MotifKind::Proportion,
                ),
            ],
            head_attribute: "object".into(),
            image_size: 32,
            seed: 0,
            noise: 0.02,
            sample: None,
            max_tuples: 100_000,
            query_fraction: 0.2,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.attributes.is_empty() {
            return bad("synthetic schema has no attributes".into());
        }
        if self.image_size < 8 {
            return bad(format!("image_size {} too small (min 8)", self.image_size));
        }
        if !(0.0..1.0).contains(&self.query_fraction) {
            return bad(format!("query_fraction {} outside [0, 1)", self.query_fraction));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return bad(format!("noise {} must be finite and >= 0", self.noise));
        }
        let mut names = HashSet::new();
        let mut motifs = HashSet::new();
        let mut values = HashSet::new();
        for attr in &self.attributes {
            if attr.name.is_empty() || !names.insert(attr.name.as_str()) {
                return bad(format!("attribute name `{}` empty or repeated", attr.name));
            }
            if !motifs.insert(attr.motif) {
                return bad(format!("motif {:?} used by more than one attribute", attr.motif));
            }
            if attr.values.is_empty() {
                return bad(format!("attribute `{}` has no values", attr.name));
            }
            if attr.values.len() > attr.motif.bank_size() {
                return bad(format!(
                    "attribute `{}` has {} values, the {:?} bank holds {}",
                    attr.name,
                    attr.values.len(),
                    attr.motif,
                    attr.motif.bank_size()
                ));
            }
            for v in &attr.values {
                let single_word = !v.is_empty()
                    && v.chars().all(|c| c.is_ascii_lowercase() || c.is_ascii_digit());
                if !single_word {
                    return bad(format!("value `{v}` must be one lowercase word"));
                }
                if !values.insert(v.as_str()) {
                    return bad(format!("value `{v}` appears in more than one attribute"));
                }
            }
        }
        if !names.contains(self.head_attribute.as_str()) {
            return bad(format!("head attribute `{}` not in schema", self.head_attribute));
        }
        Ok(())
    }

    pub fn tuple_count(&self) -> usize {
        self.attributes
            .iter()
            .map(|a| a.values.len())
            .fold(1usize, |acc, n| acc.saturating_mul(n))
    }

    /// Decodes a mixed-radix tuple index (first attribute varies slowest).
    pub fn tuple_at(&self, mut index: usize) -> Vec<usize> {
        let mut out = vec![0; self.attributes.len()];
        for (slot, attr) in out.iter_mut().zip(&self.attributes).rev() {
            *slot = index % attr.values.len();
            index /= attr.values.len();
        }
        out
    }

    pub fn attribute(&self, name: &str) -> Option<&AttributeSpec> {
        self.attributes.iter().find(|a| a.name == name)
    }
}

const SHAPES: usize = 6;
const TEXTURES: usize = 5;

const FILLS: [[f64; 3]; 8] = [
    [0.85, 0.15, 0.15],
    [0.15, 0.30, 0.85],
    [0.15, 0.65, 0.20],
    [0.95, 0.85, 0.15],
    [0.55, 0.20, 0.70],
    [0.95, 0.55, 0.10],
    [0.95, 0.50, 0.70],
    [0.10, 0.60, 0.60],
];

/// (width scale, height scale)
const PROPORTIONS: [(f64, f64); 5] = [(0.55, 1.0), (0.8, 1.0), (1.0, 1.0), (0.8, 0.6), (1.0, 0.6)];

const BACKGROUND: f64 = 0.92;

/// `x` in [-1, 1] across the garment, `y` in [0, 1] top to bottom.
fn shape_contains(shape: usize, x: f64, y: f64) -> bool {
    let ax = x.abs();
    match shape {
        // dress: widens downward
        0 => ax <= 0.35 + 0.65 * y,
        // shirt: sleeves across the top, body below
        1 => (y < 0.35 && ax <= 1.0) || ax <= 0.55,
        // skirt: lower flare only
        2 => y >= 0.35 && ax <= 0.5 + 0.5 * (y - 0.35) / 0.65,
        // pants: waistband then two legs
        3 => (y < 0.3 && ax <= 0.8) || (y >= 0.3 && (0.15..=0.8).contains(&ax)),
        // hat: crown and brim
        4 => ((0.55..=0.75).contains(&y) && ax <= 1.0) || ((0.15..0.55).contains(&y) && ax <= 0.55),
        // bag: body plus handles
        _ => (y >= 0.3 && ax <= 0.8) || ((0.1..0.3).contains(&y) && (0.3..=0.45).contains(&ax)),
    }
}

fn texture_factor(texture: usize, row: usize, col: usize) -> f64 {
    match texture {
        0 => 1.0,
        1 if (row / 2).is_multiple_of(2) => 0.55,
        2 if row % 4 < 2 && col % 4 < 2 => 0.5,
        3 if (row / 4 + col / 4) % 2 == 1 => 0.6,
        4 if ((row + col) / 3) % 2 == 1 => 0.6,
        _ => 1.0,
    }
}

fn motif_index(cfg: &SyntheticWorldConfig, tuple: &[usize], kind: MotifKind) -> Option<usize> {
    cfg.attributes
        .iter()
        .position(|a| a.motif == kind)
        .map(|i| tuple[i])
}

fn noise_seed(world_seed: u64, tuple: &[usize]) -> u64 {
    let mut h = Sha256::new();
    h.update(world_seed.to_le_bytes());
    for v in tuple {
        h.update((*v as u64).to_le_bytes());
    }
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

/// Renders one attribute tuple. Output is quantized to multiples of 1/255.
pub fn render(cfg: &SyntheticWorldConfig, tuple: &[usize]) -> Array3<f64> {
    let s = cfg.image_size;
    let shape = motif_index(cfg, tuple, MotifKind::Shape).unwrap_or(0);
    let fill = FILLS[motif_index(cfg, tuple, MotifKind::Fill).unwrap_or(0)];
    let texture = motif_index(cfg, tuple, MotifKind::Texture).unwrap_or(0);
    let (sx, sy) = PROPORTIONS[motif_index(cfg, tuple, MotifKind::Proportion).unwrap_or(1)];

    let mut rng = ChaCha8Rng::seed_from_u64(noise_seed(cfg.seed, tuple));
    let normal = Normal::new(0.0, cfg.noise.max(f64::MIN_POSITIVE)).unwrap();
    let (top, span) = (0.08, 0.84);
    let mut px = Array3::<f64>::zeros((s, s, 3));
    for row in 0..s {
        for col in 0..s {
            let u = (col as f64 + 0.5) / s as f64;
            let v = (row as f64 + 0.5) / s as f64;
            let x = (u - 0.5) / (0.45 * sx);
            let y = (v - top) / (span * sy);
            let inside = (0.0..=1.0).contains(&y) && x.abs() <= 1.0 && shape_contains(shape, x, y);
            for ch in 0..3 {
                let base = if inside {
                    fill[ch] * texture_factor(texture, row, col)
                } else {
                    BACKGROUND
                };
                let noisy = if cfg.noise > 0.0 {
                    base + normal.sample(&mut rng)
                } else {
                    base
                };
                px[[row, col, ch]] = (noisy.clamp(0.0, 1.0) * 255.0).round() / 255.0;
            }
        }
    }
    px
}

fn split_key(seed: u64, id: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(id.as_bytes());
    h.finalize().into()
}

/// Renders the whole schema (or a seeded sample of it) into a collection.
///
/// Ids are `img-NNNN` from the tuple's enumeration index, so they are stable
/// under sampling. The `query_fraction` of images with the smallest seeded
/// hash go to the query split, the rest to the index split.
pub fn generate_world(cfg: &SyntheticWorldConfig) -> Result<Vec<ImageRecord>> {
    cfg.validate()?;
    let total = cfg.tuple_count();
    let indices: Vec<usize> = match cfg.sample {
        None => {
            if total > cfg.max_tuples {
                return Err(Error::SchemaTooLarge {
                    tuples: total,
                    cap: cfg.max_tuples,
                });
            }
            (0..total).collect()
        }
        Some(n) => {
            if n > cfg.max_tuples {
                return Err(Error::SchemaTooLarge {
                    tuples: n,
                    cap: cfg.max_tuples,
                });
            }
            if n == 0 || n > total {
                return Err(Error::InvalidConfig(format!(
                    "sample of {n} tuples from a schema of {total}"
                )));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut picked = rand::seq::index::sample(&mut rng, total, n).into_vec();
            picked.sort_unstable();
            picked
        }
    };
    let width = (total.max(2) - 1).to_string().len().max(4);
    let head = cfg
        .attributes
        .iter()
        .position(|a| a.name == cfg.head_attribute)
        .expect("validated");

    let mut images = Vec::with_capacity(indices.len());
    let mut seen = HashSet::new();
    for idx in indices {
        let tuple = cfg.tuple_at(idx);
        let pixels = render(cfg, &tuple);
        let digest: [u8; 32] = Sha256::digest(
            pixels
                .iter()
                .map(|v| (v * 255.0).round() as u8)
                .collect::<Vec<u8>>(),
        )
        .into();
        if !seen.insert(digest) {
            return Err(Error::InvalidConfig(format!(
                "tuple {tuple:?} renders to the same pixels as another tuple; enlarge image_size"
            )));
        }
        let attributes: BTreeMap<String, String> = cfg
            .attributes
            .iter()
            .zip(&tuple)
            .map(|(a, &v)| (a.name.clone(), a.values[v].clone()))
            .collect();
        images.push(ImageRecord {
            id: format!("img-{idx:0width$}"),
            pixels,
            meta_class: Some(cfg.attributes[head].values[tuple[head]].clone()),
            attributes,
            split: Split::Index,
        });
    }

    let n_query = (cfg.query_fraction * images.len() as f64).round() as usize;
    let mut order: Vec<usize> = (0..images.len()).collect();
    order.sort_by_key(|&i| (split_key(cfg.seed, &images[i].id), i));
    for &i in order.iter().take(n_query) {
        images[i].split = Split::Query;
    }
    Ok(images)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SyntheticWorldConfig {
        SyntheticWorldConfig {
            attributes: vec![
                AttributeSpec::new("object", &["dress", "shirt"], MotifKind::Shape),
                AttributeSpec::new("color", &["red", "blue"], MotifKind::Fill),
                AttributeSpec::new("pattern", &["solid", "striped"], MotifKind::Texture),
            ],
            image_size: 16,
            ..Default::default()
        }
    }

    #[test]
    fn full_enumeration_counts() {
        let world = generate_world(&tiny()).unwrap();
        assert_eq!(world.len(), 8);
        let default = generate_world(&SyntheticWorldConfig::default()).unwrap();
        assert_eq!(default.len(), 480);
        let queries = default.iter().filter(|im| im.split == Split::Query).count();
        assert_eq!(queries, 96);
    }

    #[test]
    fn same_config_renders_identical_bytes() {
        let a = generate_world(&tiny()).unwrap();
        let b = generate_world(&tiny()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn distinct_tuples_have_distinct_pixels() {
        let world = generate_world(&SyntheticWorldConfig::default()).unwrap();
        let hashes: HashSet<Vec<u8>> = world
            .iter()
            .map(|im| im.pixels.iter().map(|v| (v * 255.0).round() as u8).collect())
            .collect();
        assert_eq!(hashes.len(), world.len());
        let noiseless = SyntheticWorldConfig {
            noise: 0.0,
            ..Default::default()
        };
        assert_eq!(generate_world(&noiseless).unwrap().len(), 480);
    }

    #[test]
    fn meta_class_is_head_attribute() {
        for im in generate_world(&tiny()).unwrap() {
            assert_eq!(im.meta_class.as_deref(), im.attributes.get("object").map(|s| s.as_str()));
        }
    }

    #[test]
    fn schema_cap_enforced() {
        let cfg = SyntheticWorldConfig {
            max_tuples: 100,
            ..Default::default()
        };
        assert!(matches!(
            generate_world(&cfg),
            Err(Error::SchemaTooLarge { tuples: 480, cap: 100 })
        ));
    }

    #[test]
    fn seeded_sample_is_stable() {
        let cfg = SyntheticWorldConfig {
            sample: Some(50),
            seed: 7,
            ..Default::default()
        };
        let a = generate_world(&cfg).unwrap();
        assert_eq!(a.len(), 50);
        assert_eq!(a, generate_world(&cfg).unwrap());
    }

    #[test]
    fn rejects_empty_schema_and_shared_motifs() {
        let empty = SyntheticWorldConfig {
            attributes: vec![],
            ..Default::default()
        };
        assert!(generate_world(&empty).is_err());
        let mut clash = tiny();
        clash.attributes[1].motif = MotifKind::Shape;
        assert!(matches!(clash.validate(), Err(Error::InvalidConfig(_))));
    }
}
