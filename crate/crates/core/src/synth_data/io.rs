use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{BoxAnnotation, DataError, Domain, ImageSample};
use crate::detector::boxes::BBox;

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBox {
    pub class: usize,
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub domain: Domain,
    /// Relative to the dataset directory.
    pub image_path: String,
    pub boxes: Vec<ManifestBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub resolution: Option<usize>,
    pub num_classes: usize,
    pub samples: Vec<ManifestEntry>,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub num_classes: usize,
    pub resolution: Option<usize>,
    pub samples: Vec<ImageSample>,
}

impl Dataset {
    pub fn domain(&self, domain: Domain) -> Vec<ImageSample> {
        self.samples
            .iter()
            .filter(|s| s.domain == domain)
            .cloned()
            .collect()
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes 8-bit PNGs under `images/` plus `manifest.json`.
pub fn write_dataset(
    samples: &[ImageSample],
    num_classes: usize,
    dir: &Path,
) -> Result<Manifest, DataError> {
    let img_dir = dir.join("images");
    fs::create_dir_all(&img_dir).map_err(io_err(&img_dir))?;
    let resolution = samples.first().map(|s| s.width);
    let mut entries = Vec::with_capacity(samples.len());
    for s in samples {
        if Some(s.width) != resolution || s.height != s.width {
            return Err(DataError::Sample {
                id: s.id.clone(),
                reason: "all images in a dataset must share one square resolution".into(),
            });
        }
        let rel = format!("images/{}.png", s.id);
        let path = dir.join(&rel);
        image::RgbImage::from_raw(s.width as u32, s.height as u32, s.to_rgb8())
            .expect("buffer matches dimensions")
            .save(&path)
            .map_err(|e| DataError::Read {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        let boxes = s
            .annotations
            .iter()
            .map(|a| ManifestBox {
                class: a.class_id,
                x1: a.bbox.x1,
                y1: a.bbox.y1,
                x2: a.bbox.x2,
                y2: a.bbox.y2,
            })
            .collect();
        entries.push(ManifestEntry {
            id: s.id.clone(),
            domain: s.domain,
            image_path: rel,
            boxes,
        });
    }
    let manifest = Manifest {
        resolution,
        num_classes,
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
    fs::write(&path, json).map_err(io_err(&path))?;
    Ok(manifest)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest, DataError> {
    let path = dir.join(MANIFEST_FILE);
    if !path.is_file() {
        return Err(DataError::MissingManifest(path.display().to_string()));
    }
    let bytes = fs::read(&path).map_err(io_err(&path))?;
    serde_json::from_slice(&bytes).map_err(|e| DataError::Read {
        path: path.display().to_string(),
        reason: e.to_string(),
    })
}

pub fn load_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let manifest = read_manifest(dir)?;
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for e in &manifest.samples {
        let path: PathBuf = dir.join(&e.image_path);
        let (w, h, pixels) = read_rgb(&path).map_err(|reason| DataError::Sample {
            id: e.id.clone(),
            reason,
        })?;
        if let Some(r) = manifest.resolution {
            if w != r || h != r {
                return Err(DataError::Sample {
                    id: e.id.clone(),
                    reason: format!("image {} is {w}x{h}, manifest says {r}x{r}", path.display()),
                });
            }
        }
        let mut annotations = Vec::with_capacity(e.boxes.len());
        for b in &e.boxes {
            if b.class >= manifest.num_classes {
                return Err(DataError::Sample {
                    id: e.id.clone(),
                    reason: format!(
                        "box class {} out of range for {} classes in {}",
                        b.class,
                        manifest.num_classes,
                        dir.join(MANIFEST_FILE).display()
                    ),
                });
            }
            let bbox = BBox::new(b.x1, b.y1, b.x2, b.y2);
            if !bbox.is_valid() || !bbox.within(w as f64, h as f64) {
                return Err(DataError::Sample {
                    id: e.id.clone(),
                    reason: format!(
                        "box {:?} is degenerate or outside the image",
                        bbox.to_array()
                    ),
                });
            }
            annotations.push(BoxAnnotation {
                class_id: b.class,
                bbox,
            });
        }
        samples.push(ImageSample::new(
            e.id.clone(),
            e.domain,
            w,
            h,
            pixels,
            annotations,
        ));
    }
    Ok(Dataset {
        num_classes: manifest.num_classes,
        resolution: manifest.resolution,
        samples,
    })
}

fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<f32>), String> {
    let img = image::open(path)
        .map_err(|err| format!("cannot read image {}: {err}", path.display()))?
        .to_rgb8();
    let pixels = img.as_raw().iter().map(|&v| v as f32 / 255.0).collect();
    Ok((img.width() as usize, img.height() as usize, pixels))
}

/// One unannotated image from any RGB-convertible file.
pub fn load_image(path: &Path, domain: Domain) -> Result<ImageSample, DataError> {
    let (w, h, pixels) = read_rgb(path).map_err(|reason| DataError::Read {
        path: path.display().to_string(),
        reason,
    })?;
    let id = path
        .file_stem()
        .map_or_else(|| "image".to_string(), |s| s.to_string_lossy().into_owned());
    Ok(ImageSample::new(id, domain, w, h, pixels, Vec::new()))
}

/// SHA-256 over the manifest and every referenced image, in manifest order.
pub fn dataset_hash(dir: &Path) -> Result<String, DataError> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest = read_manifest(dir)?;
    let mut h = Sha256::new();
    h.update(fs::read(&manifest_path).map_err(io_err(&manifest_path))?);
    for e in &manifest.samples {
        let p = dir.join(&e.image_path);
        h.update(fs::read(&p).map_err(io_err(&p))?);
    }
    Ok(hex::encode(h.finalize()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{generate_dataset, DomainShiftParams, SceneConfig};

    #[test]
    fn round_trip_preserves_everything_quantized() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let samples = generate_dataset(3, 5, 5, &DomainShiftParams::default(), &cfg).unwrap();
        write_dataset(&samples, 3, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(back.samples.len(), 10);
        for (a, b) in samples.iter().zip(&back.samples) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.domain, b.domain);
            assert_eq!(a.annotations, b.annotations);
            assert_eq!(a.to_rgb8(), b.to_rgb8());
        }
    }

    #[test]
    fn empty_dataset_has_valid_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = write_dataset(&[], 3, dir.path()).unwrap();
        assert!(m.samples.is_empty());
        let back = load_dataset(dir.path()).unwrap();
        assert!(back.samples.is_empty());
    }

    #[test]
    fn missing_image_names_the_sample() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let samples = generate_dataset(1, 2, 0, &DomainShiftParams::default(), &cfg).unwrap();
        write_dataset(&samples, 3, dir.path()).unwrap();
        fs::remove_file(dir.path().join("images/source_00001.png")).unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("source_00001"), "{err}");
    }

    #[test]
    fn missing_manifest_and_corrupt_image() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_dataset(dir.path()),
            Err(DataError::MissingManifest(_))
        ));
        let cfg = SceneConfig::default();
        let samples = generate_dataset(1, 1, 0, &DomainShiftParams::default(), &cfg).unwrap();
        write_dataset(&samples, 3, dir.path()).unwrap();
        fs::write(dir.path().join("images/source_00000.png"), b"not a png").unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(err.contains("source_00000.png"), "{err}");
    }

    #[test]
    fn out_of_range_class_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SceneConfig::default();
        let samples = generate_dataset(1, 1, 0, &DomainShiftParams::default(), &cfg).unwrap();
        write_dataset(&samples, 3, dir.path()).unwrap();
        let mut m = read_manifest(dir.path()).unwrap();
        m.samples[0].boxes[0].class = 7;
        fs::write(
            dir.path().join(MANIFEST_FILE),
            serde_json::to_vec(&m).unwrap(),
        )
        .unwrap();
        let err = load_dataset(dir.path()).unwrap_err().to_string();
        assert!(
            err.contains("source_00000") && err.contains("out of range"),
            "{err}"
        );
    }
}
