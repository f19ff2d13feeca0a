//! Backbone + head bundled with their parameters and configuration.

use std::sync::Arc;

use inbn_tensor::{Bound, Element, ParamStore, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig, CandidateVars, ReferenceCache, ReferenceVars, FUSED_STRIDE};
use crate::error::{CoreError, Result};
use crate::head::{Head, HeadConfig, HeadOutput};
use crate::loss::{CropGeometry, LossConfig};
use crate::tracker::TrackerParams;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
    pub tracker: TrackerParams,
    pub loss: LossConfig,
}

impl ModelConfig {
    pub fn from_backbone(backbone: BackboneConfig, hidden: usize) -> Self {
        let head = HeadConfig::new(backbone.fused_channels, hidden);
        Self {
            backbone,
            head,
            tracker: TrackerParams::default(),
            loss: LossConfig::default(),
        }
    }

    pub fn toy() -> Self {
        Self::from_backbone(BackboneConfig::toy(), 64)
    }

    pub fn full_tiny() -> Self {
        Self::from_backbone(BackboneConfig::full_tiny(), 8)
    }

    pub fn transformer() -> Self {
        Self::from_backbone(BackboneConfig::transformer(), 256)
    }

    pub fn cnn() -> Self {
        Self::from_backbone(BackboneConfig::cnn(), 256)
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "full-tiny" => Ok(Self::full_tiny()),
            "transformer" => Ok(Self::transformer()),
            "cnn" => Ok(Self::cnn()),
            other => Err(CoreError::Config(format!("unknown model preset {other:?}"))),
        }
    }

    /// Score-map side: valid correlation of the fused candidate and reference maps.
    pub fn score_map_size(&self) -> usize {
        let b = &self.backbone;
        b.fused_size(b.candidate_size) + 1 - b.fused_size(b.reference_size)
    }

    /// Maps score cells to candidate-crop pixels. Valid correlation places
    /// cell 0 half a reference map in from the crop edge.
    pub fn crop_geometry(&self) -> CropGeometry {
        let b = &self.backbone;
        let stride = FUSED_STRIDE as f64;
        CropGeometry {
            crop_size: b.candidate_size as f64,
            stride,
            offset: (b.fused_size(b.reference_size) as f64 - 1.0) * stride / 2.0,
        }
    }
}

/// Reference-side values reused for every candidate frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelCache<T: Element> {
    pub backbone: ReferenceCache<T>,
    pub fused: Arc<Tensor<T>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOut {
    pub head: HeadOutput,
    pub candidate: CandidateVars,
    pub reference: ReferenceVars,
    pub fused_x: Var,
    pub fused_z: Var,
}

#[derive(Debug, Clone)]
pub struct Model<T: Element> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    pub backbone: Backbone,
    pub head: Head,
}

impl<T: Element> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        if cfg.head.in_channels != cfg.backbone.fused_channels {
            return Err(CoreError::Config(format!(
                "head input width {} differs from fused width {}",
                cfg.head.in_channels, cfg.backbone.fused_channels
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let backbone = Backbone::new(&mut params, &cfg.backbone, &mut rng)?;
        let head = Head::new(&mut params, cfg.head, &mut rng)?;
        Ok(Self {
            cfg,
            params,
            backbone,
            head,
        })
    }

    /// Adopts `params`, which must hold exactly this configuration's parameters in order.
    pub fn with_params(cfg: ModelConfig, params: ParamStore<T>) -> Result<Self> {
        let fresh = Self::new(cfg, 0)?;
        if fresh.params.len() != params.len() {
            return Err(CoreError::Config(format!(
                "configuration expects {} parameters, got {}",
                fresh.params.len(),
                params.len()
            )));
        }
        for ((_, n1, t1), (_, n2, t2)) in fresh.params.iter().zip(params.iter()) {
            if n1 != n2 || t1.shape() != t2.shape() {
                return Err(CoreError::Config(format!(
                    "parameter mismatch: expected {n1} {:?}, got {n2} {:?}",
                    t1.shape(),
                    t2.shape()
                )));
            }
        }
        Ok(Self { params, ..fresh })
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            backbone: self.backbone.clone(),
            head: self.head.clone(),
        }
    }

    /// Full two-stream forward pass: `x [B, S_x, S_x, C_in]`, `z [B, S_z, S_z, C_in]`.
    pub fn forward(&self, tape: &mut Tape<T>, p: &Bound, x: Var, z: Var) -> Result<ForwardOut> {
        let reference = self.backbone.forward_reference_vars(tape, p, z)?;
        self.forward_with_reference(tape, p, x, reference)
    }

    fn forward_with_reference(&self, tape: &mut Tape<T>, p: &Bound, x: Var, reference: ReferenceVars) -> Result<ForwardOut> {
        let b = &self.cfg.backbone;
        let fused_z = self.backbone.fuse(tape, p, &reference.stages, b.reference_size)?;
        self.forward_candidate(tape, p, x, reference, fused_z)
    }

    fn forward_candidate(
        &self,
        tape: &mut Tape<T>,
        p: &Bound,
        x: Var,
        reference: ReferenceVars,
        fused_z: Var,
    ) -> Result<ForwardOut> {
        let b = &self.cfg.backbone;
        let candidate = self.backbone.forward_candidate_vars(tape, p, x, &reference)?;
        let fused_x = self.backbone.fuse(tape, p, &candidate.stages, b.candidate_size)?;
        let head = self.head.forward(tape, p, fused_x, fused_z)?;
        Ok(ForwardOut {
            head,
            candidate,
            reference,
            fused_x,
            fused_z,
        })
    }

    /// Runs the reference branch once (no gradients).
    pub fn reference_cache(&self, z: &Tensor<T>) -> Result<ModelCache<T>> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false);
        let zv = tape.constant(z.clone());
        let r = self.backbone.forward_reference_vars(&mut tape, &p, zv)?;
        let fused = self.backbone.fuse(&mut tape, &p, &r.stages, self.cfg.backbone.reference_size)?;
        Ok(ModelCache {
            backbone: ReferenceCache::from_vars(&tape, &r),
            fused: tape.value_arc(fused),
        })
    }

    /// Candidate forward against a cached reference.
    pub fn forward_cached(&self, tape: &mut Tape<T>, p: &Bound, x: Var, cache: &ModelCache<T>) -> Result<ForwardOut> {
        let reference = cache.backbone.to_vars(tape);
        let fused_z = tape.leaf_arc(Arc::clone(&cache.fused), false);
        self.forward_candidate(tape, p, x, reference, fused_z)
    }
}
