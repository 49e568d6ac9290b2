//! Flat JSON run configuration shared by every CLI subcommand.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::car::{CarConfig, CarTrainConfig, Sampling, TokenGeometry, TokenInput};
use crate::datasets::{CorpusKind, CorpusSpec};
use crate::error::{Error, Result};
use crate::nested::DropoutSchedule;
use crate::optim::AdamConfig;
use crate::quantizer::Axis;
use crate::tokenizer::{AutoencoderConfig, LossWeights};
use crate::train::TokenizerTrainConfig;

/// Every hyperparameter of a run. Unknown keys are rejected; missing keys
/// take the defaults below.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset directory (shards plus manifest).
    pub data_dir: String,
    pub corpus_kind: CorpusKind,
    pub corpus_count: usize,
    pub image_height: usize,
    pub image_width: usize,
    pub image_channels: usize,
    pub classes: usize,
    pub data_seed: u64,
    /// Directory of PGM/PPM files to ingest instead of synthesizing.
    pub ingest_dir: String,
    /// Tokenizer checkpoint read by downstream commands.
    pub tokenizer_dir: String,
    /// Token corpus read by `train-car`.
    pub tokens_dir: String,
    /// CAR checkpoint read by `generate`.
    pub car_dir: String,

    /// Quantization axis: `patch` or `channel`.
    pub axis: Axis,
    /// Codebook size N.
    pub codebook_size: usize,
    /// Latent channels c.
    pub latent_channels: usize,
    /// Downsample factor f.
    pub downsample: usize,
    pub hidden: usize,
    pub blocks: usize,
    /// Commitment weight.
    pub beta: f64,
    pub lambda_lpips: f64,
    pub lambda_gan: f64,
    /// Nested dropout ratio.
    pub alpha: f64,
    pub eta: f64,
    pub lambda0: f64,

    pub lr: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,

    pub car_d_model: usize,
    pub car_layers: usize,
    pub car_heads: usize,
    pub car_input: TokenInput,
    pub car_lr: f64,
    pub car_steps: usize,
    pub car_batch_size: usize,
    pub car_seed: u64,
    /// Early stop once training accuracy reaches this value.
    pub car_target_accuracy: Option<f64>,
    pub car_eval_every: usize,

    pub temperature: f64,
    /// `None` samples from the full distribution.
    pub top_k: Option<usize>,
    pub generate_seed: u64,
    /// Labels to generate; empty means every class.
    pub generate_labels: Vec<usize>,

    /// Channel counts for the progressive sweep; empty means `1..=c`.
    pub sweep_channels: Vec<usize>,
    pub compare_axes: Vec<Axis>,
    pub compare_sizes: Vec<usize>,
    /// Validation images used for evaluation reports; 0 means all.
    pub eval_images: usize,
    /// 1-based channel zeroed by `ablate-channel`; 0 means every channel.
    pub ablate_channel: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let spec = CorpusSpec::default();
        RunConfig {
            data_dir: "data".into(),
            corpus_kind: spec.kind,
            corpus_count: spec.count,
            image_height: spec.height,
            image_width: spec.width,
            image_channels: spec.channels,
            classes: spec.classes,
            data_seed: spec.seed,
            ingest_dir: String::new(),
            tokenizer_dir: String::new(),
            tokens_dir: String::new(),
            car_dir: String::new(),
            axis: Axis::Channel,
            codebook_size: 512,
            latent_channels: 16,
            downsample: 8,
            hidden: 64,
            blocks: 1,
            beta: 0.25,
            lambda_lpips: 1.0,
            lambda_gan: 1.0,
            alpha: 0.25,
            eta: 0.05,
            lambda0: 1.0,
            lr: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.9,
            adam_eps: 1e-8,
            weight_decay: 1e-4,
            steps: 5000,
            batch_size: 32,
            seed: 0,
            car_d_model: 128,
            car_layers: 4,
            car_heads: 4,
            car_input: TokenInput::Projector,
            car_lr: 1e-4,
            car_steps: 3000,
            car_batch_size: 32,
            car_seed: 0,
            car_target_accuracy: None,
            car_eval_every: 100,
            temperature: 1.0,
            top_k: None,
            generate_seed: 0,
            generate_labels: Vec::new(),
            sweep_channels: Vec::new(),
            compare_axes: vec![Axis::Patch, Axis::Channel],
            compare_sizes: vec![64, 256, 512],
            eval_images: 0,
            ablate_channel: 0,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        RunConfig::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the canonical compact serialization.
    pub fn hash(&self) -> String {
        config_hash(self)
    }

    pub fn corpus_spec(&self) -> CorpusSpec {
        CorpusSpec {
            kind: self.corpus_kind,
            count: self.corpus_count,
            height: self.image_height,
            width: self.image_width,
            channels: self.image_channels,
            classes: self.classes,
            seed: self.data_seed,
        }
    }

    pub fn autoencoder(&self) -> AutoencoderConfig {
        AutoencoderConfig {
            height: self.image_height,
            width: self.image_width,
            in_channels: self.image_channels,
            patch: self.downsample,
            latent_channels: self.latent_channels,
            hidden: self.hidden,
            blocks: self.blocks,
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn schedule(&self) -> Result<DropoutSchedule> {
        DropoutSchedule::new(self.alpha, self.eta, self.lambda0, self.latent_channels)
    }

    pub fn tokenizer_train(&self) -> Result<TokenizerTrainConfig> {
        let cfg = TokenizerTrainConfig {
            autoencoder: self.autoencoder(),
            axis: self.axis,
            codebook_size: self.codebook_size,
            weights: LossWeights {
                beta: self.beta,
                lambda_lpips: self.lambda_lpips,
                lambda_gan: self.lambda_gan,
            },
            adam: self.adam(self.lr),
            schedule: self.schedule()?,
            steps: self.steps,
            batch_size: self.batch_size,
            seed: self.seed,
        };
        cfg.autoencoder.validate()?;
        if !(self.beta > 0.0) {
            return Err(Error::Config(format!(
                "beta {} must be positive",
                self.beta
            )));
        }
        if self.batch_size == 0 || self.codebook_size == 0 {
            return Err(Error::Config(
                "batch_size and codebook_size must be positive".into(),
            ));
        }
        Ok(cfg)
    }

    pub fn car(&self, geometry: TokenGeometry) -> CarConfig {
        CarConfig {
            geometry,
            classes: self.classes,
            d_model: self.car_d_model,
            layers: self.car_layers,
            heads: self.car_heads,
            input: self.car_input,
        }
    }

    pub fn car_train(&self) -> CarTrainConfig {
        CarTrainConfig {
            adam: self.adam(self.car_lr),
            steps: self.car_steps,
            batch_size: self.car_batch_size,
            seed: self.car_seed,
            target_accuracy: self.car_target_accuracy,
            eval_every: self.car_eval_every,
        }
    }

    pub fn sampling(&self, n: usize) -> Sampling {
        Sampling {
            temperature: self.temperature,
            top_k: self.top_k.unwrap_or(n),
        }
    }

    /// Sweep channel counts, defaulting to every prefix length.
    pub fn sweep_list(&self) -> Vec<usize> {
        if self.sweep_channels.is_empty() {
            (1..=self.latent_channels).collect()
        } else {
            self.sweep_channels.clone()
        }
    }
}

/// SHA-256 hex digest of any serializable value's compact JSON.
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).unwrap_or_default();
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_defaults() {
        let c = RunConfig::default();
        let back = RunConfig::from_json(&c.to_json().unwrap()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::from_json("{}").unwrap(), c);
        assert_eq!(back.hash(), c.hash());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::from_json(r#"{"axis": "patch", "learning_rate": 1}"#).unwrap_err();
        assert_eq!(err.class(), "config");
        assert!(err.to_string().contains("learning_rate"));
    }

    #[test]
    fn partial_override() {
        let c = RunConfig::from_json(r#"{"axis": "patch", "alpha": 0}"#).unwrap();
        assert_eq!(c.axis, Axis::Patch);
        assert_eq!(c.alpha, 0.0);
        assert_eq!(c.lr, 1e-4);
        assert_ne!(c.hash(), RunConfig::default().hash());
    }

    #[test]
    fn derived_configs_validate() {
        let mut c = RunConfig::default();
        assert!(c.tokenizer_train().is_ok());
        c.beta = 0.0;
        assert!(c.tokenizer_train().is_err());
        c.beta = 0.25;
        c.downsample = 5;
        assert!(c.tokenizer_train().is_err());
    }
}
