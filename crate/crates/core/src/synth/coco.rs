//! COCO detection JSON.
//!
//! View and pair membership travel in the image file name,
//! `pair_{pair_id:06}_{ground|aerial}.png`. The extra image field
//! `noise_seed` lets synthetic features be re-rendered; it defaults to 0 for
//! foreign documents. Category ids are 0-based.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{SceneSample, View};
use crate::error::{Error, Result};
use crate::geometry::BBox;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: f64,
    pub height: f64,
    #[serde(default)]
    pub noise_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: usize,
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: usize,
    pub name: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CocoDocument {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

pub fn file_name(pair_id: u64, view: View) -> String {
    format!("pair_{pair_id:06}_{view}.png")
}

/// Parses `pair_{id}_{view}` with any extension.
pub fn parse_file_name(name: &str) -> Option<(u64, View)> {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let rest = stem.strip_prefix("pair_")?;
    let (id, view) = rest.split_once('_')?;
    Some((id.parse().ok()?, view.parse().ok()?))
}

impl CocoDocument {
    pub fn from_samples(samples: &[SceneSample], categories: &[String]) -> Self {
        let images = samples
            .iter()
            .map(|s| CocoImage {
                id: s.id,
                file_name: file_name(s.pair_id, s.view),
                width: s.width,
                height: s.height,
                noise_seed: s.noise_seed,
            })
            .collect();
        let mut annotations = Vec::new();
        for s in samples {
            for (b, &c) in s.boxes.iter().zip(&s.categories) {
                annotations.push(CocoAnnotation {
                    id: annotations.len() as u64,
                    image_id: s.id,
                    category_id: c,
                    bbox: [b.x, b.y, b.w, b.h],
                    area: b.area(),
                    iscrowd: 0,
                });
            }
        }
        let categories = categories
            .iter()
            .enumerate()
            .map(|(id, name)| CocoCategory { id, name: name.clone() })
            .collect();
        Self {
            images,
            annotations,
            categories,
        }
    }

    /// Checks that every annotation references an existing image and
    /// category; the error lists every offending id.
    pub fn check_references(&self) -> Result<()> {
        let images: BTreeSet<u64> = self.images.iter().map(|i| i.id).collect();
        let cats: BTreeSet<usize> = self.categories.iter().map(|c| c.id).collect();
        let missing_images: BTreeSet<u64> = self
            .annotations
            .iter()
            .filter(|a| !images.contains(&a.image_id))
            .map(|a| a.image_id)
            .collect();
        let missing_cats: BTreeSet<usize> = self
            .annotations
            .iter()
            .filter(|a| !cats.contains(&a.category_id))
            .map(|a| a.category_id)
            .collect();
        let mut parts = Vec::new();
        if !missing_images.is_empty() {
            parts.push(format!("image_id {missing_images:?}"));
        }
        if !missing_cats.is_empty() {
            parts.push(format!("category_id {missing_cats:?}"));
        }
        if parts.is_empty() {
            Ok(())
        } else {
            Err(Error::DanglingReference(parts.join(", ")))
        }
    }

    /// Samples in image order, without features.
    pub fn to_samples(&self) -> Result<Vec<SceneSample>> {
        self.check_references()?;
        let mut by_image: BTreeMap<u64, Vec<&CocoAnnotation>> = BTreeMap::new();
        for a in &self.annotations {
            by_image.entry(a.image_id).or_default().push(a);
        }
        let mut seen = BTreeSet::new();
        self.images
            .iter()
            .map(|img| {
                if !seen.insert(img.id) {
                    return Err(Error::invalid(format!("duplicate image id {}", img.id)));
                }
                let (pair_id, view) = parse_file_name(&img.file_name).ok_or_else(|| {
                    Error::invalid(format!(
                        "image {}: file name `{}` does not follow pair_<id>_<view>",
                        img.id, img.file_name
                    ))
                })?;
                let anns = by_image.get(&img.id).map(Vec::as_slice).unwrap_or(&[]);
                Ok(SceneSample {
                    id: img.id,
                    pair_id,
                    view,
                    width: img.width,
                    height: img.height,
                    boxes: anns.iter().map(|a| BBox::new(a.bbox[0], a.bbox[1], a.bbox[2], a.bbox[3])).collect(),
                    categories: anns.iter().map(|a| a.category_id).collect(),
                    noise_seed: img.noise_seed,
                    features: None,
                })
            })
            .collect()
    }

    pub fn category_names(&self) -> Vec<String> {
        let mut cats = self.categories.clone();
        cats.sort_by_key(|c| c.id);
        cats.into_iter().map(|c| c.name).collect()
    }
}

pub fn load_coco(path: &Path) -> Result<Vec<SceneSample>> {
    read_document(path)?.to_samples()
}

pub fn read_document(path: &Path) -> Result<CocoDocument> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn save_coco(samples: &[SceneSample], categories: &[String], path: &Path) -> Result<()> {
    let doc = CocoDocument::from_samples(samples, categories);
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_name_roundtrip() {
        assert_eq!(file_name(12, View::Aerial), "pair_000012_aerial.png");
        assert_eq!(parse_file_name("pair_000012_aerial.png"), Some((12, View::Aerial)));
        assert_eq!(parse_file_name("pair_3_ground.jpg"), Some((3, View::Ground)));
        assert_eq!(parse_file_name("img_3_ground.jpg"), None);
        assert_eq!(parse_file_name("pair_3_side.jpg"), None);
    }

    #[test]
    fn dangling_ids_are_named() {
        let doc = CocoDocument {
            images: vec![CocoImage {
                id: 1,
                file_name: file_name(0, View::Ground),
                width: 10.0,
                height: 10.0,
                noise_seed: 0,
            }],
            annotations: vec![CocoAnnotation {
                id: 0,
                image_id: 99,
                category_id: 0,
                bbox: [1.0, 1.0, 2.0, 2.0],
                area: 4.0,
                iscrowd: 0,
            }],
            categories: vec![CocoCategory { id: 0, name: "car".into() }],
        };
        let err = doc.to_samples().unwrap_err();
        assert!(matches!(&err, Error::DanglingReference(m) if m.contains("99")), "{err}");
    }
}
