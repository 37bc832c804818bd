//! Value types shared across the crate: samples, latent codes, loss weights,
//! model configuration and the task registry.

pub mod archive;
pub mod config_file;
mod config;
mod tasks;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use config::{
    validate_config, ConfigError, GanGeneratorLoss, KlPlacement, ModelConfig, Norm, Preset,
    Recovery, WeightSharing, ZInjection,
};
pub use tasks::{
    find_task, task_registry, DataKind, InferenceOutputs, ReferencePolicy, TaskSpec,
};

/// Data type class of a sample. Speech-like data uses `Sequence`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityTag {
    Image,
    Text,
    Sequence,
}

impl fmt::Display for ModalityTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModalityTag::Image => "image",
            ModalityTag::Text => "text",
            ModalityTag::Sequence => "sequence",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SampleData {
    Real(Vec<f32>),
    Ids(Vec<u32>),
}

/// A modality-tagged tensor.
///
/// Layouts: image `[C, H, W]` with values in `[-1, 1]`; text `[L]` token
/// ids; sequence `[T, F]` real frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    modality: ModalityTag,
    shape: Vec<usize>,
    data: SampleData,
}

impl Sample {
    pub fn image(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        let s = Sample {
            modality: ModalityTag::Image,
            shape: vec![channels, height, width],
            data: SampleData::Real(data),
        };
        s.validate(None)?;
        Ok(s)
    }

    pub fn sequence(frames: usize, features: usize, data: Vec<f32>) -> Result<Self> {
        let s = Sample {
            modality: ModalityTag::Sequence,
            shape: vec![frames, features],
            data: SampleData::Real(data),
        };
        s.validate(None)?;
        Ok(s)
    }

    pub fn text(ids: Vec<u32>) -> Result<Self> {
        let s = Sample {
            modality: ModalityTag::Text,
            shape: vec![ids.len()],
            data: SampleData::Ids(ids),
        };
        s.validate(None)?;
        Ok(s)
    }

    /// Rebuilds a sample from a decoded archive, inferring the modality from
    /// dtype and rank.
    pub fn from_parts(shape: Vec<usize>, data: SampleData) -> Result<Self> {
        let modality = match (&data, shape.len()) {
            (SampleData::Real(_), 3) => ModalityTag::Image,
            (SampleData::Real(_), 2) => ModalityTag::Sequence,
            (SampleData::Ids(_), 1) => ModalityTag::Text,
            _ => {
                return Err(Error::shape(format!(
                    "no modality has rank {} with this dtype",
                    shape.len()
                )))
            }
        };
        let s = Sample {
            modality,
            shape,
            data,
        };
        s.validate(None)?;
        Ok(s)
    }

    /// Checks the type invariants; `vocab` additionally bounds text ids.
    pub fn validate(&self, vocab: Option<usize>) -> Result<()> {
        let n: usize = self.shape.iter().product();
        let len = match &self.data {
            SampleData::Real(v) => v.len(),
            SampleData::Ids(v) => v.len(),
        };
        if n != len || n == 0 {
            return Err(Error::shape(format!(
                "{} sample of shape {:?} holds {len} values",
                self.modality, self.shape
            )));
        }
        match (&self.data, self.modality) {
            (SampleData::Real(v), ModalityTag::Image) => {
                if let Some(bad) = v.iter().find(|x| !(-1.0..=1.0).contains(*x)) {
                    return Err(Error::contract(format!(
                        "image value {bad} outside [-1, 1]"
                    )));
                }
            }
            (SampleData::Real(v), ModalityTag::Sequence) => {
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::contract("non-finite sequence frame"));
                }
            }
            (SampleData::Ids(v), ModalityTag::Text) => {
                if let Some(bad) = vocab.and_then(|n| v.iter().find(|&&i| i as usize >= n)) {
                    let vocab = vocab.unwrap_or_default();
                    return Err(Error::contract(format!(
                        "token id {bad} outside vocabulary of {vocab}"
                    )));
                }
            }
            _ => return Err(Error::contract("dtype does not match modality")),
        }
        Ok(())
    }

    pub fn modality(&self) -> ModalityTag {
        self.modality
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &SampleData {
        &self.data
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Real-valued payload; `None` for text.
    pub fn values(&self) -> Option<&[f32]> {
        match &self.data {
            SampleData::Real(v) => Some(v),
            SampleData::Ids(_) => None,
        }
    }

    pub fn ids(&self) -> Option<&[u32]> {
        match &self.data {
            SampleData::Ids(v) => Some(v),
            SampleData::Real(_) => None,
        }
    }

    /// Values as `f64`, with text ids converted to their numeric value.
    pub fn to_f64(&self) -> Vec<f64> {
        match &self.data {
            SampleData::Real(v) => v.iter().map(|&x| x as f64).collect(),
            SampleData::Ids(v) => v.iter().map(|&x| x as f64).collect(),
        }
    }
}

/// One training triple. During training the reference is the target.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedExample {
    pub source: Sample,
    pub target: Sample,
    pub reference: Sample,
}

impl PairedExample {
    pub fn new(source: Sample, target: Sample, reference: Sample) -> Result<Self> {
        if target.modality() != reference.modality() {
            return Err(Error::contract(format!(
                "reference modality {} differs from target modality {}",
                reference.modality(),
                target.modality()
            )));
        }
        Ok(Self {
            source,
            target,
            reference,
        })
    }

    /// Training pair whose reference is the ground-truth target.
    pub fn training(source: Sample, target: Sample) -> Self {
        let reference = target.clone();
        Self {
            source,
            target,
            reference,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LatentOrigin {
    SampledPrior,
    EncodedReference,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub values: Vec<f64>,
    pub origin: LatentOrigin,
}

impl LatentCode {
    pub fn new(values: Vec<f64>, origin: LatentOrigin) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::contract("latent code must have dim >= 1"));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::contract("latent code must be finite"));
        }
        Ok(Self { values, origin })
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Coefficients of the composite objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rec: f64,
    pub lambda_kl: f64,
    pub lambda_lat: f64,
    pub lambda_1: f64,
    pub lambda_2: f64,
    pub lambda_3: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_rec: 10.0,
            lambda_kl: 0.01,
            lambda_lat: 0.5,
            lambda_1: 1.0,
            lambda_2: 1.0,
            lambda_3: 0.05,
        }
    }
}

impl LossWeights {
    pub fn named(&self) -> [(&'static str, f64); 6] {
        [
            ("lambda_rec", self.lambda_rec),
            ("lambda_kl", self.lambda_kl),
            ("lambda_lat", self.lambda_lat),
            ("lambda_1", self.lambda_1),
            ("lambda_2", self.lambda_2),
            ("lambda_3", self.lambda_3),
        ]
    }

    pub fn validate(&self) -> std::result::Result<(), Vec<ConfigError>> {
        let errs: Vec<_> = self
            .named()
            .iter()
            .filter(|(_, v)| !(v.is_finite() && *v >= 0.0))
            .map(|(name, v)| ConfigError::new(*name, format!("must be finite and >= 0, got {v}")))
            .collect();
        if errs.is_empty() {
            Ok(())
        } else {
            Err(errs)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sample_invariants() {
        assert!(Sample::image(1, 2, 2, vec![0.0; 4]).is_ok());
        assert!(Sample::image(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(Sample::image(1, 1, 1, vec![1.5]).is_err());
        assert!(Sample::sequence(2, 2, vec![0.0, 1.0, f32::NAN, 0.0]).is_err());
        let t = Sample::text(vec![0, 4, 2]).unwrap();
        assert!(t.validate(Some(5)).is_ok());
        assert!(t.validate(Some(4)).is_err());
        assert!(Sample::text(vec![]).is_err());
    }

    #[test]
    fn modality_inferred_from_parts() {
        let s = Sample::from_parts(vec![3, 2], SampleData::Real(vec![0.0; 6])).unwrap();
        assert_eq!(s.modality(), ModalityTag::Sequence);
        let s = Sample::from_parts(vec![4], SampleData::Ids(vec![1; 4])).unwrap();
        assert_eq!(s.modality(), ModalityTag::Text);
        assert!(Sample::from_parts(vec![4], SampleData::Real(vec![0.0; 4])).is_err());
    }

    #[test]
    fn reference_must_share_target_modality() {
        let img = Sample::image(1, 1, 1, vec![0.0]).unwrap();
        let txt = Sample::text(vec![1]).unwrap();
        assert!(PairedExample::new(txt.clone(), img.clone(), txt.clone()).is_err());
        let p = PairedExample::training(txt, img.clone());
        assert_eq!(p.reference, img);
    }

    #[test]
    fn negative_weight_rejected() {
        let w = LossWeights {
            lambda_kl: -1.0,
            ..LossWeights::default()
        };
        let errs = w.validate().unwrap_err();
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].field, "lambda_kl");
    }

    #[test]
    fn latent_code_rejects_empty() {
        assert!(LatentCode::new(vec![], LatentOrigin::SampledPrior).is_err());
        assert!(LatentCode::new(vec![f64::INFINITY], LatentOrigin::SampledPrior).is_err());
    }
}
