use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use wspace_tensor::Tensor;

use super::attributes::{sample_attributes, AttributeVector};
use super::grammar::{describe, DEFAULT_DESCRIPTIONS, GRAMMAR_VERSION};
use super::render::{check_resolution, extract_label_map, render, Part};
use super::sketch::{extract_sketch, SketchConfig};
use crate::error::{Error, Result};
use crate::imageio;
use crate::util::{derive_seed, sha256_hex};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub size: usize,
    pub resolution: usize,
    pub seed: u64,
    pub split_ratio: f64,
    pub sketch: SketchConfig,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig { size: 5000, resolution: 32, seed: 0, split_ratio: 0.8, sketch: SketchConfig::default() }
    }
}

impl DatasetConfig {
    /// Test count is `floor((1 - split_ratio) * size)`; train takes the rest,
    /// so a single sample always lands in train.
    pub fn train_count(&self) -> usize {
        // the epsilon absorbs representation error such as (1 - 0.8) * 5000 = 999.99..
        let test = ((1.0 - self.split_ratio) * self.size as f64 + 1e-9).floor() as usize;
        self.size - test.min(self.size)
    }

    fn validate(&self) -> Result<()> {
        check_resolution(self.resolution)?;
        if !(0.0..=1.0).contains(&self.split_ratio) {
            return Err(Error::InvalidArgument(format!("split_ratio {} outside [0, 1]", self.split_ratio)));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Clone, Debug)]
pub struct FaceSample {
    pub id: usize,
    /// `[R, R, 3]` in [0, 1]
    pub image: Tensor,
    pub attrs: AttributeVector,
    pub texts: Vec<String>,
    /// `[R, R, 1]`, values 0 or 1
    pub sketch: Tensor,
    /// Row-major part ids
    pub label_map: Vec<u8>,
    pub split: Split,
    pub jitter_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: usize,
    pub attrs: AttributeVector,
    pub texts: Vec<String>,
    pub split: Split,
    pub jitter_seed: u64,
    pub image: String,
    pub sketch: String,
    pub label_map: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub seed: u64,
    pub resolution: usize,
    pub split_ratio: f64,
    pub grammar_version: String,
    pub sketch: SketchConfig,
    pub samples: Vec<SampleRecord>,
}

impl DatasetManifest {
    pub fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec_pretty(self).expect("manifest serializes")
    }

    pub fn hash(&self) -> String {
        sha256_hex(&self.to_json())
    }
}

/// Build sample `i` of the dataset described by `cfg`.
pub fn generate_sample(cfg: &DatasetConfig, i: usize) -> Result<FaceSample> {
    let attrs = sample_attributes(derive_seed(cfg.seed, i as u64, 0));
    let jitter_seed = derive_seed(cfg.seed, i as u64, 1);
    let texts = describe(&attrs, DEFAULT_DESCRIPTIONS, derive_seed(cfg.seed, i as u64, 2))?;
    let image = render(&attrs, cfg.resolution, jitter_seed)?;
    let sketch = extract_sketch(&image, &cfg.sketch);
    let label_map = extract_label_map(&attrs, cfg.resolution, jitter_seed)?;
    let split = if i < cfg.train_count() { Split::Train } else { Split::Test };
    Ok(FaceSample { id: i, image, attrs, texts, sketch, label_map, split, jitter_seed })
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub config: DatasetConfig,
    pub samples: Vec<FaceSample>,
}

fn rel_paths(id: usize) -> (String, String, String) {
    (format!("images/{id:05}.png"), format!("sketches/{id:05}.png"), format!("labels/{id:05}.png"))
}

impl Dataset {
    /// Generate every sample in memory.
    pub fn generate(cfg: &DatasetConfig) -> Result<Dataset> {
        cfg.validate()?;
        let samples = (0..cfg.size).map(|i| generate_sample(cfg, i)).collect::<Result<Vec<_>>>()?;
        Ok(Dataset { config: cfg.clone(), samples })
    }

    pub fn resolution(&self) -> usize {
        self.config.resolution
    }

    pub fn manifest(&self) -> DatasetManifest {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let (image, sketch, label_map) = rel_paths(s.id);
                SampleRecord {
                    id: s.id,
                    attrs: s.attrs,
                    texts: s.texts.clone(),
                    split: s.split,
                    jitter_seed: s.jitter_seed,
                    image,
                    sketch,
                    label_map,
                }
            })
            .collect();
        DatasetManifest {
            version: MANIFEST_VERSION,
            seed: self.config.seed,
            resolution: self.config.resolution,
            split_ratio: self.config.split_ratio,
            grammar_version: GRAMMAR_VERSION.to_string(),
            sketch: self.config.sketch,
            samples,
        }
    }

    pub fn hash(&self) -> String {
        self.manifest().hash()
    }

    /// Persist all modalities under `dir` and write the manifest.
    pub fn write(&self, dir: &Path) -> Result<DatasetManifest> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let r = self.resolution();
        let manifest = self.manifest();
        for (s, rec) in self.samples.iter().zip(&manifest.samples) {
            imageio::write_file(&dir.join(&rec.image), &imageio::encode_rgb_png(&s.image)?)?;
            let sk: Vec<u8> = s.sketch.data().iter().map(|&v| if v > 0.5 { 255 } else { 0 }).collect();
            imageio::write_file(&dir.join(&rec.sketch), &imageio::encode_gray_png(&sk, r, r)?)?;
            imageio::write_file(&dir.join(&rec.label_map), &imageio::encode_gray_png(&s.label_map, r, r)?)?;
        }
        imageio::write_file(&dir.join(MANIFEST_FILE), &manifest.to_json())?;
        Ok(manifest)
    }

    /// Load from a dataset directory or its manifest file.
    pub fn load(path: &Path) -> Result<Dataset> {
        let manifest_path: PathBuf = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = manifest_path.parent().unwrap_or(Path::new(".")).to_path_buf();
        let manifest: DatasetManifest = serde_json::from_slice(&imageio::read_file(&manifest_path)?)?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::InvalidArgument(format!("unsupported manifest version {}", manifest.version)));
        }
        let r = manifest.resolution;
        let mut samples = Vec::with_capacity(manifest.samples.len());
        for rec in &manifest.samples {
            let image = imageio::load_rgb(&root.join(&rec.image))?;
            let (sk, h, w) = imageio::decode_gray_png(&imageio::read_file(&root.join(&rec.sketch))?)?;
            let (label_map, lh, lw) = imageio::decode_gray_png(&imageio::read_file(&root.join(&rec.label_map))?)?;
            if image.shape() != [r, r, 3] || (h, w) != (r, r) || (lh, lw) != (r, r) {
                return Err(Error::InvalidArgument(format!("sample {} has wrong dimensions", rec.id)));
            }
            let sketch = Tensor::new(vec![r, r, 1], sk.iter().map(|&b| if b > 127 { 1.0 } else { 0.0 }).collect());
            samples.push(FaceSample {
                id: rec.id,
                image,
                attrs: rec.attrs,
                texts: rec.texts.clone(),
                sketch,
                label_map,
                split: rec.split,
                jitter_seed: rec.jitter_seed,
            });
        }
        let config = DatasetConfig {
            size: samples.len(),
            resolution: r,
            seed: manifest.seed,
            split_ratio: manifest.split_ratio,
            sketch: manifest.sketch,
        };
        Ok(Dataset { config, samples })
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.samples.len()).filter(|&i| self.samples[i].split == split).collect()
    }

    /// `[n, R, R, 3]`
    pub fn images(&self, idx: &[usize]) -> Tensor {
        Tensor::stack(&idx.iter().map(|&i| self.samples[i].image.clone()).collect::<Vec<_>>())
    }

    /// `[n, R, R, 1]`
    pub fn sketches(&self, idx: &[usize]) -> Tensor {
        Tensor::stack(&idx.iter().map(|&i| self.samples[i].sketch.clone()).collect::<Vec<_>>())
    }

    /// One-hot label maps `[n, R, R, 6]`.
    pub fn label_maps(&self, idx: &[usize]) -> Tensor {
        let r = self.resolution();
        Tensor::stack(&idx.iter().map(|&i| one_hot_labels(&self.samples[i].label_map, r)).collect::<Vec<_>>())
    }
}

/// `[R, R, 6]` one-hot encoding of a label map.
pub fn one_hot_labels(labels: &[u8], res: usize) -> Tensor {
    let mut d = vec![0.0; res * res * Part::COUNT];
    for (i, &l) in labels.iter().enumerate() {
        d[i * Part::COUNT + l as usize] = 1.0;
    }
    Tensor::new(vec![res, res, Part::COUNT], d)
}

/// Generate and persist a dataset in one step.
pub fn build_dataset(cfg: &DatasetConfig, dir: &Path) -> Result<DatasetManifest> {
    Dataset::generate(cfg)?.write(dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_follows_floor_rule() {
        let cfg = DatasetConfig { size: 7, ..Default::default() };
        assert_eq!(cfg.train_count(), 6);
        let ds = Dataset::generate(&cfg).unwrap();
        assert_eq!(ds.indices(Split::Train), vec![0, 1, 2, 3, 4, 5]);
        assert_eq!(ds.indices(Split::Test), vec![6]);
        assert_eq!(DatasetConfig { size: 10, ..Default::default() }.train_count(), 8);
    }

    #[test]
    fn one_hot_sums_to_one() {
        let t = one_hot_labels(&[0, 5, 2, 1], 2);
        assert_eq!(t.shape(), &[2, 2, 6]);
        assert_eq!(t.sum(), 4.0);
        assert_eq!(t.data()[6 + 5], 1.0);
    }
}
