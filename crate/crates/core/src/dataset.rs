//! In-memory datasets and the COCO-style annotation format.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::matching::GroundTruthObject;
use crate::preprocess::{read_image, write_image, GrayImage};

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: u64,
    pub file_name: String,
    pub image: GrayImage,
    /// Class ids are 0-based here; the file format is 1-based.
    pub objects: Vec<GroundTruthObject>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub class_names: Vec<String>,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Splits off the last `fraction` of samples (at least one when
    /// `fraction > 0` and there are two or more samples).
    pub fn split_tail(mut self, fraction: f64) -> (Dataset, Dataset) {
        let n = self.samples.len();
        let mut k = (n as f64 * fraction).round() as usize;
        if fraction > 0.0 && k == 0 && n > 1 {
            k = 1;
        }
        let tail = self.samples.split_off(n - k.min(n));
        let names = self.class_names.clone();
        (
            self,
            Dataset {
                class_names: names,
                samples: tail,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoImage {
    pub id: u64,
    pub file_name: String,
    pub width: usize,
    pub height: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotation {
    pub id: u64,
    pub image_id: u64,
    pub category_id: u64,
    /// Absolute pixels, top-left `x, y, w, h`.
    pub bbox: [f64; 4],
    #[serde(default)]
    pub area: f64,
    #[serde(default)]
    pub iscrowd: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoCategory {
    pub id: u64,
    pub name: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoAnnotations {
    pub images: Vec<CocoImage>,
    pub annotations: Vec<CocoAnnotation>,
    pub categories: Vec<CocoCategory>,
}

/// One entry of a COCO results file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CocoResult {
    pub image_id: u64,
    pub category_id: u64,
    pub bbox: [f64; 4],
    pub score: f64,
}

impl CocoAnnotations {
    /// Checks referential integrity and that category ids are `1..=n`.
    pub fn validate(&self) -> Result<()> {
        let mut cat_ids: Vec<u64> = self.categories.iter().map(|c| c.id).collect();
        cat_ids.sort_unstable();
        if cat_ids != (1..=cat_ids.len() as u64).collect::<Vec<_>>() {
            return Err(Error::Data(format!(
                "category ids must be 1-based and contiguous, got {cat_ids:?}"
            )));
        }
        let mut image_ids = HashSet::new();
        for im in &self.images {
            if !image_ids.insert(im.id) {
                return Err(Error::Data(format!(
                    "duplicate image id {} ({})",
                    im.id, im.file_name
                )));
            }
        }
        for a in &self.annotations {
            if !image_ids.contains(&a.image_id) {
                return Err(Error::Data(format!(
                    "annotation {} references missing image id {}",
                    a.id, a.image_id
                )));
            }
            if a.category_id == 0 || a.category_id > cat_ids.len() as u64 {
                return Err(Error::Data(format!(
                    "annotation {} references missing category id {}",
                    a.id, a.category_id
                )));
            }
            if a.bbox.iter().any(|v| !v.is_finite()) || a.bbox[2] <= 0.0 || a.bbox[3] <= 0.0 {
                return Err(Error::Data(format!(
                    "annotation {} has a malformed bbox {:?}",
                    a.id, a.bbox
                )));
            }
        }
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        let coco: CocoAnnotations = serde_json::from_str(&text)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        coco.validate()?;
        Ok(coco)
    }

    pub fn class_names(&self) -> Vec<String> {
        let mut cats = self.categories.clone();
        cats.sort_by_key(|c| c.id);
        cats.into_iter().map(|c| c.name).collect()
    }

    /// Ground truth per image id, normalized and 0-based.
    pub fn objects_by_image(&self) -> HashMap<u64, Vec<GroundTruthObject>> {
        let dims: HashMap<u64, (usize, usize)> = self
            .images
            .iter()
            .map(|i| (i.id, (i.width, i.height)))
            .collect();
        let mut out: HashMap<u64, Vec<GroundTruthObject>> =
            self.images.iter().map(|i| (i.id, Vec::new())).collect();
        for a in &self.annotations {
            let (w, h) = dims[&a.image_id];
            let b = BoundingBox::from_xywh_pixels(a.bbox, w as f64, h as f64);
            out.get_mut(&a.image_id)
                .expect("validated")
                .push(GroundTruthObject::new((a.category_id - 1) as usize, b));
        }
        out
    }
}

/// Annotation file plus every referenced image, resolved relative to the
/// annotation file's directory (directly or under `images/`).
pub fn ingest(annotation_path: &Path) -> Result<Dataset> {
    let coco = CocoAnnotations::read(annotation_path)?;
    let base = annotation_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let objects = coco.objects_by_image();
    let mut samples = Vec::with_capacity(coco.images.len());
    for im in &coco.images {
        let path = resolve_image(&base, &im.file_name).ok_or_else(|| {
            Error::Data(format!(
                "image {} ({}) not found next to {}",
                im.id,
                im.file_name,
                annotation_path.display()
            ))
        })?;
        let image = read_image(&path)?;
        if image.width != im.width || image.height != im.height {
            return Err(Error::Data(format!(
                "image {} ({}) is {}x{} but the annotation says {}x{}",
                im.id, im.file_name, image.width, image.height, im.width, im.height
            )));
        }
        samples.push(Sample {
            id: im.id,
            file_name: im.file_name.clone(),
            image,
            objects: objects[&im.id].clone(),
        });
    }
    Ok(Dataset {
        class_names: coco.class_names(),
        samples,
    })
}

fn resolve_image(base: &Path, file: &str) -> Option<PathBuf> {
    [base.join(file), base.join("images").join(file)]
        .into_iter()
        .find(|p| p.is_file())
}

/// Builds the annotation document. Pixel boxes are recovered from the
/// normalized ones and rounded to 1e-6 px.
pub fn to_coco(ds: &Dataset) -> CocoAnnotations {
    let mut annotations = Vec::new();
    for s in &ds.samples {
        for o in &s.objects {
            let mut bbox = o
                .bbox
                .to_xywh_pixels(s.image.width as f64, s.image.height as f64);
            for v in &mut bbox {
                *v = (*v * 1e6).round() / 1e6;
            }
            annotations.push(CocoAnnotation {
                id: annotations.len() as u64 + 1,
                image_id: s.id,
                category_id: o.class_id as u64 + 1,
                bbox,
                area: bbox[2] * bbox[3],
                iscrowd: 0,
            });
        }
    }
    CocoAnnotations {
        images: ds
            .samples
            .iter()
            .map(|s| CocoImage {
                id: s.id,
                file_name: s.file_name.clone(),
                width: s.image.width,
                height: s.image.height,
            })
            .collect(),
        annotations,
        categories: ds
            .class_names
            .iter()
            .enumerate()
            .map(|(i, n)| CocoCategory {
                id: i as u64 + 1,
                name: n.clone(),
            })
            .collect(),
    }
}

/// Writes `images/<file>` for every sample and `annotations.json` into `dir`.
pub fn export_coco(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    if ds.is_empty() {
        return Err(Error::InvalidArgument(
            "refusing to export an empty dataset".into(),
        ));
    }
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(|e| Error::Data(format!("{}: {e}", img_dir.display())))?;
    for s in &ds.samples {
        write_image(&s.image, &img_dir.join(&s.file_name))?;
    }
    let path = dir.join("annotations.json");
    let json = serde_json::to_string_pretty(&to_coco(ds))?;
    write_atomic(&path, json.as_bytes())?;
    Ok(path)
}

/// Write to a sibling temp file, then rename over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::Data(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Dataset {
        Dataset {
            class_names: vec!["a".into(), "b".into()],
            samples: vec![Sample {
                id: 7,
                file_name: "p7.png".into(),
                image: GrayImage::filled(100, 100, 255),
                objects: vec![GroundTruthObject::new(
                    1,
                    BoundingBox::from_xywh_pixels([10.0, 20.0, 30.0, 40.0], 100.0, 100.0),
                )],
            }],
        }
    }

    #[test]
    fn pixel_conversion_example() {
        let b = tiny().samples[0].objects[0].bbox;
        for (x, y) in b.to_array().iter().zip([0.25, 0.40, 0.30, 0.40]) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn export_then_ingest() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny();
        let path = export_coco(&ds, dir.path()).unwrap();
        let back = ingest(&path).unwrap();
        assert_eq!(back, ds);
        let coco = CocoAnnotations::read(&path).unwrap();
        assert_eq!(coco.annotations[0].category_id, 2);
    }

    #[test]
    fn dangling_image_id_is_named() {
        let mut coco = to_coco(&tiny());
        coco.annotations[0].image_id = 99;
        let err = coco.validate().unwrap_err().to_string();
        assert!(err.contains("99"), "{err}");
    }

    #[test]
    fn missing_file_and_bad_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotations.json");
        fs::write(&path, serde_json::to_string(&to_coco(&tiny())).unwrap()).unwrap();
        let err = ingest(&path).unwrap_err().to_string();
        assert!(err.contains("p7.png"), "{err}");
        fs::write(&path, "{\"images\": [").unwrap();
        assert!(matches!(ingest(&path), Err(Error::Data(_))));
    }
}
