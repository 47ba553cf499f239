//! Image records and the on-disk image collection.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::BufRead;
use std::path::Path;

use base64::Engine;
use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::artifact;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Query,
    Index,
}

/// One image. Pixels are `H x W x C`, every value finite and in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageRecord {
    pub id: String,
    pub pixels: Array3<f64>,
    pub attributes: BTreeMap<String, String>,
    pub meta_class: Option<String>,
    pub split: Split,
}

impl ImageRecord {
    pub fn new(id: impl Into<String>, pixels: Array3<f64>, split: Split) -> Result<Self> {
        let rec = Self {
            id: id.into(),
            pixels,
            attributes: BTreeMap::new(),
            meta_class: None,
            split,
        };
        rec.validate()?;
        Ok(rec)
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.pixels.dim()
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::InvalidConfig("image id must be non-empty".into()));
        }
        if let Some(v) = self
            .pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::InvalidConfig(format!(
                "image `{}` has pixel value {v} outside [0, 1]",
                self.id
            )));
        }
        Ok(())
    }
}

/// Checks the collection-level invariants: unique ids, one shared shape.
pub fn validate_collection(images: &[ImageRecord]) -> Result<()> {
    let mut seen = HashSet::new();
    let shape = images.first().map(|im| im.shape());
    for im in images {
        im.validate()?;
        if !seen.insert(im.id.as_str()) {
            return Err(Error::DuplicateId(im.id.clone()));
        }
        if Some(im.shape()) != shape {
            return Err(Error::ShapeMismatch(format!(
                "image `{}` is {:?}, collection is {:?}",
                im.id,
                im.shape(),
                shape.unwrap()
            )));
        }
    }
    Ok(())
}

/// Id -> position lookup over a collection.
pub fn index_by_id(images: &[ImageRecord]) -> HashMap<&str, usize> {
    images
        .iter()
        .enumerate()
        .map(|(i, im)| (im.id.as_str(), i))
        .collect()
}

#[derive(Serialize, Deserialize)]
struct StoredImage {
    id: String,
    split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    meta_class: Option<String>,
    #[serde(default)]
    attributes: BTreeMap<String, String>,
    height: usize,
    width: usize,
    channels: usize,
    /// base64 of 8-bit samples in H, W, C order.
    pixels: String,
}

fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Collections are stored as JSON lines with 8-bit pixels. Images whose pixels
/// are already multiples of 1/255 (everything the renderer emits) reload exactly.
pub fn write_collection(path: &Path, images: &[ImageRecord]) -> Result<()> {
    validate_collection(images)?;
    artifact::write_atomic_with(path, |w| {
        for im in images {
            let (h, wd, c) = im.shape();
            let bytes: Vec<u8> = im.pixels.iter().map(|&v| quantize(v)).collect();
            let stored = StoredImage {
                id: im.id.clone(),
                split: im.split,
                meta_class: im.meta_class.clone(),
                attributes: im.attributes.clone(),
                height: h,
                width: wd,
                channels: c,
                pixels: base64::engine::general_purpose::STANDARD.encode(bytes),
            };
            serde_json::to_writer(&mut *w, &stored)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    })
}

pub fn read_collection(path: &Path) -> Result<Vec<ImageRecord>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let stored: StoredImage = serde_json::from_str(&line)?;
        let bytes = base64::engine::general_purpose::STANDARD
            .decode(stored.pixels.as_bytes())
            .map_err(|e| Error::format("collection", format!("line {}: {e}", n + 1)))?;
        let expected = stored.height * stored.width * stored.channels;
        if bytes.len() != expected {
            return Err(Error::format(
                "collection",
                format!("line {}: {} pixel bytes, expected {expected}", n + 1, bytes.len()),
            ));
        }
        let pixels = Array3::from_shape_vec(
            (stored.height, stored.width, stored.channels),
            bytes.into_iter().map(|b| b as f64 / 255.0).collect(),
        )
        .map_err(|e| Error::format("collection", e.to_string()))?;
        out.push(ImageRecord {
            id: stored.id,
            pixels,
            attributes: stored.attributes,
            meta_class: stored.meta_class,
            split: stored.split,
        });
    }
    validate_collection(&out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(id: &str, fill: f64) -> ImageRecord {
        ImageRecord::new(id, Array3::from_elem((4, 4, 3), fill), Split::Index).unwrap()
    }

    #[test]
    fn rejects_out_of_range_pixels() {
        let err = ImageRecord::new("a", Array3::from_elem((2, 2, 1), 1.5), Split::Train);
        assert!(matches!(err, Err(Error::InvalidConfig(_))));
        let err = ImageRecord::new("a", Array3::from_elem((2, 2, 1), f64::NAN), Split::Train);
        assert!(err.is_err());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let err = validate_collection(&[img("a", 0.0), img("a", 1.0)]);
        assert!(matches!(err, Err(Error::DuplicateId(id)) if id == "a"));
    }

    #[test]
    fn mixed_shapes_rejected() {
        let other = ImageRecord::new("b", Array3::zeros((2, 2, 3)), Split::Index).unwrap();
        assert!(matches!(
            validate_collection(&[img("a", 0.0), other]),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn collection_round_trip_is_exact_for_quantized_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        let mut a = img("a", 51.0 / 255.0);
        a.meta_class = Some("dress".into());
        a.attributes.insert("color".into(), "red".into());
        let images = vec![a, img("b", 1.0)];
        write_collection(&path, &images).unwrap();
        assert_eq!(read_collection(&path).unwrap(), images);
    }
}
