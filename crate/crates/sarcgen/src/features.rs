//! Per-sample image features: a P x d grid of patch vectors, either loaded
//! from a JSON tensor file or synthesized deterministically from the
//! `image_ref` string. Synthetic features decouple every test and desk run
//! from any actual vision model.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::rng::{fnv1a, SeededRng};
use crate::nn::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureSource {
    Loaded,
    Synthetic,
}

#[derive(Debug, Clone)]
pub struct ImageFeatures {
    pub grid: Tensor,
    pub source: FeatureSource,
}

impl ImageFeatures {
    pub fn new(grid: Tensor, source: FeatureSource) -> Result<Self> {
        if grid.rows == 0 {
            return Err(Error::Shape("image grid needs at least one patch".into()));
        }
        if !grid.is_finite() {
            return Err(Error::Numeric("non-finite image feature".into()));
        }
        Ok(ImageFeatures { grid, source })
    }

    pub fn patches(&self) -> usize {
        self.grid.rows
    }

    pub fn dim(&self) -> usize {
        self.grid.cols
    }

    /// Mean over patch vectors; the whole-image embedding used by the
    /// incongruity measure.
    pub fn pooled(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.grid.cols];
        for r in 0..self.grid.rows {
            for (o, v) in out.iter_mut().zip(self.grid.row(r)) {
                *o += v;
            }
        }
        let inv = 1.0 / self.grid.rows as f64;
        for o in &mut out {
            *o *= inv;
        }
        out
    }
}

#[derive(Serialize, Deserialize)]
struct FeatureFile {
    schema_version: u32,
    patches: usize,
    dim: usize,
    data: Vec<f64>,
}

pub fn save_features(path: &Path, features: &ImageFeatures) -> Result<()> {
    let file = FeatureFile {
        schema_version: 1,
        patches: features.grid.rows,
        dim: features.grid.cols,
        data: features.grid.data.clone(),
    };
    std::fs::write(path, serde_json::to_string(&file)?)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<ImageFeatures> {
    let raw = std::fs::read_to_string(path)?;
    let file: FeatureFile = serde_json::from_str(&raw)?;
    if file.schema_version != 1 {
        return Err(Error::Data(format!(
            "unsupported feature file version {}",
            file.schema_version
        )));
    }
    let grid = Tensor::from_vec(file.patches, file.dim, file.data)?;
    ImageFeatures::new(grid, FeatureSource::Loaded)
}

/// Deterministic Gaussian grid keyed by the image_ref hash.
pub fn synthetic_features(image_ref: &str, patches: usize, dim: usize) -> ImageFeatures {
    let mut rng = SeededRng::new(fnv1a(image_ref));
    let data = (0..patches * dim).map(|_| rng.normal() * 0.5).collect();
    ImageFeatures {
        grid: Tensor {
            rows: patches,
            cols: dim,
            data,
        },
        source: FeatureSource::Synthetic,
    }
}

/// Load features from `image_ref` resolved against `features_dir` when the
/// file exists; otherwise synthesize. The loaded grid must match `dim`.
pub fn resolve_features(
    image_ref: &str,
    features_dir: Option<&Path>,
    patches: usize,
    dim: usize,
) -> Result<ImageFeatures> {
    let candidate = match features_dir {
        Some(dir) => dir.join(image_ref),
        None => Path::new(image_ref).to_path_buf(),
    };
    if candidate.is_file() {
        let f = load_features(&candidate)?;
        if f.dim() != dim {
            return Err(Error::Shape(format!(
                "feature file {} has dim {}, model expects {}",
                candidate.display(),
                f.dim(),
                dim
            )));
        }
        Ok(f)
    } else {
        Ok(synthetic_features(image_ref, patches, dim))
    }
}
