//! Flat JSON run configuration.
//!
//! Defaults are the desk-scale settings. Where they differ from the
//! full-scale recipe the field docs give the full-scale value.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::asa::{AsaConfig, LossKind};
use crate::attention::AttentionConfig;
use crate::error::{AsaError, Result};
use crate::optim::{OptimizerConfig, SgdConfig};
use crate::phantom::PhantomSpec;
use crate::position::EncodingKind;
use crate::seg::SegConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Volume size (full scale: 128³ crops).
    pub dims: [usize; 3],
    pub patch: usize,
    pub mask_ratio: f64,
    /// Histogram bins per angle axis.
    pub bins: usize,

    pub dim: usize,
    pub n_heads: usize,
    pub window: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
    pub dec_dim: usize,
    pub dec_heads: usize,
    pub dec_depth: usize,
    pub encoding: EncodingKind,
    pub loss: LossKind,

    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub base_lr: f64,
    pub warmup_start_lr: f64,
    /// `None` means 5% of `total_steps`.
    pub warmup_steps: Option<usize>,
    pub adam_eps: f64,
    /// Full scale: 96.
    pub batch_size: usize,
    pub total_steps: usize,

    pub n_classes: usize,
    pub seg_c1: usize,
    pub seg_c2: usize,
    /// Full scale: 0.01 with momentum 0.99.
    pub ft_lr: f64,
    pub ft_momentum: f64,
    pub ft_weight_decay: f64,
    pub ft_poly_power: f64,
    pub ft_clip_norm: f64,
    pub ft_batch_size: usize,
    pub ft_steps: usize,
    pub ft_augment: bool,

    /// Volumes generated when no data directory is given.
    pub n_volumes: usize,
    pub phantom_structures: usize,
    pub phantom_lesions: usize,
    pub phantom_noise: f64,
    /// Directory of `.asav` files; phantoms are generated when absent.
    pub data_dir: Option<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let asa = AsaConfig::default();
        let opt = OptimizerConfig::default();
        let sgd = SgdConfig::default();
        let seg = SegConfig::default();
        let ph = PhantomSpec::default();
        Self {
            seed: 42,
            dims: asa.dims,
            patch: asa.patch,
            mask_ratio: asa.mask_ratio,
            bins: asa.bins,
            dim: asa.encoder.dim,
            n_heads: asa.encoder.n_heads,
            window: asa.encoder.window,
            depth: asa.encoder.depth,
            mlp_ratio: asa.encoder.mlp_ratio,
            dec_dim: asa.decoder.dim,
            dec_heads: asa.decoder.n_heads,
            dec_depth: asa.decoder.depth,
            encoding: asa.encoding,
            loss: asa.loss,
            beta1: opt.beta1,
            beta2: opt.beta2,
            weight_decay: opt.weight_decay,
            base_lr: opt.base_lr,
            warmup_start_lr: opt.warmup_start_lr,
            warmup_steps: None,
            adam_eps: opt.eps,
            batch_size: 4,
            total_steps: 200,
            n_classes: seg.n_classes,
            seg_c1: seg.c1,
            seg_c2: seg.c2,
            // the small unnormalized decoder never picks up the lesion class at 0.01
            ft_lr: 0.1,
            ft_momentum: sgd.momentum,
            ft_weight_decay: sgd.weight_decay,
            ft_poly_power: sgd.poly_power,
            ft_clip_norm: sgd.clip_norm,
            ft_batch_size: 2,
            ft_steps: 300,
            ft_augment: true,
            n_volumes: 8,
            phantom_structures: ph.n_structures,
            phantom_lesions: ph.n_lesions,
            phantom_noise: ph.noise_sigma,
            data_dir: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| AsaError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Re-checks every constraint the modules impose.
    pub fn validate(&self) -> Result<()> {
        let cfg_err = |e: AsaError| match e {
            AsaError::Contract(m) => AsaError::Config(m),
            other => other,
        };
        self.asa().validate().map_err(cfg_err)?;
        self.seg().validate().map_err(cfg_err)?;
        self.optimizer().validate().map_err(cfg_err)?;
        self.phantom(0).validate().map_err(cfg_err)?;
        if self.batch_size == 0 || self.ft_batch_size == 0 {
            return Err(AsaError::Config("batch sizes must be positive".into()));
        }
        if self.ft_steps == 0 {
            return Err(AsaError::Config("ft_steps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.ft_momentum) || self.ft_lr <= 0.0 || self.ft_weight_decay < 0.0 {
            return Err(AsaError::Config("fine-tuning optimizer settings out of range".into()));
        }
        if self.n_volumes == 0 && self.data_dir.is_none() {
            return Err(AsaError::Config("n_volumes must be positive without a data directory".into()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> AttentionConfig {
        AttentionConfig {
            dim: self.dim,
            n_heads: self.n_heads,
            window: self.window,
            depth: self.depth,
            mlp_ratio: self.mlp_ratio,
        }
    }

    pub fn asa(&self) -> AsaConfig {
        AsaConfig {
            dims: self.dims,
            patch: self.patch,
            mask_ratio: self.mask_ratio,
            bins: self.bins,
            encoder: self.encoder(),
            decoder: AttentionConfig {
                dim: self.dec_dim,
                n_heads: self.dec_heads,
                window: self.window,
                depth: self.dec_depth,
                mlp_ratio: self.mlp_ratio,
            },
            encoding: self.encoding,
            loss: self.loss,
        }
    }

    pub fn seg(&self) -> SegConfig {
        SegConfig {
            dims: self.dims,
            patch: self.patch,
            encoder: self.encoder(),
            encoding: self.encoding,
            n_classes: self.n_classes,
            c1: self.seg_c1,
            c2: self.seg_c2,
        }
    }

    pub fn optimizer(&self) -> OptimizerConfig {
        OptimizerConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            weight_decay: self.weight_decay,
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps.unwrap_or(OptimizerConfig::default_warmup(self.total_steps)),
            total_steps: self.total_steps,
            warmup_start_lr: self.warmup_start_lr,
            eps: self.adam_eps,
        }
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            lr: self.ft_lr,
            momentum: self.ft_momentum,
            weight_decay: self.ft_weight_decay,
            total_steps: self.ft_steps,
            poly_power: self.ft_poly_power,
            clip_norm: self.ft_clip_norm,
        }
    }

    pub fn phantom(&self, seed: u64) -> PhantomSpec {
        PhantomSpec {
            dims: self.dims,
            seed,
            n_structures: self.phantom_structures,
            n_lesions: self.phantom_lesions,
            noise_sigma: self.phantom_noise,
        }
    }
}
