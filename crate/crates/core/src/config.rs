//! Run configuration: clip geometry, model sections, training and diffusion
//! knobs. Serializable to JSON, re-loadable to an identical value, and
//! validated up front with every violated constraint reported at once.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::dynamics::DynamicsConfig;
use crate::error::{Error, Result};
use crate::structure::StructureConfig;
use crate::vae::LossWeights;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClipGeometry {
    pub channels: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub fps: f32,
}

impl ClipGeometry {
    pub fn desk() -> Self {
        Self {
            channels: 3,
            frames: 8,
            height: 32,
            width: 32,
            fps: 8.0,
        }
    }

    pub fn reference() -> Self {
        Self {
            channels: 3,
            frames: 16,
            height: 224,
            width: 224,
            fps: 8.0,
        }
    }

    pub fn element_count(&self) -> usize {
        self.channels * self.frames * self.height * self.width
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch: usize,
    pub steps: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1.6e-4,
            beta1: 0.9,
            beta2: 0.999,
            batch: 2,
            steps: 2000,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DiffusionModelConfig {
    /// Total diffusion steps `T`.
    pub t_total: usize,
    /// DDIM inference steps.
    pub sample_steps: usize,
    /// Classifier-free guidance weight.
    pub guidance: f64,
    /// Probability of dropping the class condition during training.
    pub drop_prob: f64,
    pub hidden: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    /// Unified patch size for latent packing.
    pub patch: usize,
    pub n_classes: usize,
    pub seed: u64,
}

impl Default for DiffusionModelConfig {
    fn default() -> Self {
        Self {
            t_total: 1000,
            sample_steps: 50,
            guidance: 5.0,
            drop_prob: 0.2,
            hidden: 512,
            layers: 6,
            heads: 8,
            mlp_ratio: 4.0,
            patch: 2,
            n_classes: 8,
            seed: 0,
        }
    }
}

impl DiffusionModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.t_total == 0 {
            v.push("diffusion.t_total must be >= 1".into());
        }
        if self.sample_steps == 0 || self.sample_steps > self.t_total {
            v.push(format!(
                "diffusion.sample_steps {} must be in 1..=t_total {}",
                self.sample_steps, self.t_total
            ));
        }
        if !(0.0..=1.0).contains(&self.drop_prob) {
            v.push(format!(
                "diffusion.drop_prob {} must be in [0, 1]",
                self.drop_prob
            ));
        }
        if self.hidden == 0 || self.hidden % self.heads != 0 {
            v.push(format!(
                "diffusion.hidden {} must be a positive multiple of heads {}",
                self.hidden, self.heads
            ));
        }
        if self.patch == 0 {
            v.push("diffusion.patch must be >= 1".into());
        }
        if self.n_classes == 0 {
            v.push("diffusion.n_classes must be >= 1".into());
        }
        v
    }
}

/// Everything one run needs; the architecture subset feeds the fingerprint.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct RunConfig {
    pub clip: ClipGeometry,
    pub backbone: BackboneConfig,
    pub structure: StructureConfig,
    pub dynamics: DynamicsConfig,
    pub vae: LossWeights,
    pub train: TrainConfig,
    pub diffusion: DiffusionModelConfig,
    /// Seed for the frozen perceptual feature net.
    pub perceptual_seed: u64,
    /// Stride-2 stages in the patch discriminator.
    pub discriminator_stages: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            clip: ClipGeometry::desk(),
            backbone: BackboneConfig::desk(),
            structure: StructureConfig::desk(),
            dynamics: DynamicsConfig::desk(),
            vae: LossWeights::default(),
            train: TrainConfig::default(),
            diffusion: DiffusionModelConfig::default(),
            perceptual_seed: 7,
            discriminator_stages: 3,
        }
    }

    /// Reference-scale configuration (constructible for shape and parameter
    /// checks; not meant for CPU training).
    pub fn reference() -> Self {
        Self {
            clip: ClipGeometry::reference(),
            backbone: BackboneConfig::reference(),
            structure: StructureConfig::reference(),
            dynamics: DynamicsConfig::reference(),
            vae: LossWeights::default(),
            train: TrainConfig::default(),
            diffusion: DiffusionModelConfig::default(),
            perceptual_seed: 7,
            discriminator_stages: 4,
        }
    }

    /// Latent grid `(c, f, h, w)` produced by the encoder.
    pub fn core_latent_dims(&self) -> (usize, usize, usize, usize) {
        (
            self.backbone.hidden_c,
            self.clip.frames,
            self.clip.height / self.backbone.spatial_patch,
            self.clip.width / self.backbone.spatial_patch,
        )
    }

    /// Structure latent `(n_q, d_s, h_s, w_s)`.
    pub fn structure_latent_dims(&self) -> (usize, usize, usize, usize) {
        let (_, _, h, w) = self.core_latent_dims();
        self.structure.latent_dims(h, w)
    }

    /// Dynamics latent `(f, d_d, w_d + h_d)` plus split point `w_d`.
    pub fn dynamics_latent_dims(&self) -> (usize, usize, usize, usize) {
        let (_, f, h, w) = self.core_latent_dims();
        self.dynamics.latent_dims(f, h, w)
    }

    /// Latent element count used for compression accounting.
    pub fn latent_element_count(&self) -> usize {
        let (nq, ds, hs, ws) = self.structure_latent_dims();
        let (f, dd, l, _) = self.dynamics_latent_dims();
        nq * ds * hs * ws + f * dd * l
    }

    /// Collect every violated constraint; empty means valid.
    pub fn violations(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.clip.channels != 3 {
            v.push(format!("clip.channels must be 3, got {}", self.clip.channels));
        }
        if self.clip.frames == 0 || self.clip.height == 0 || self.clip.width == 0 {
            v.push("clip dimensions must be positive".into());
        }
        if !(self.clip.fps.is_finite() && self.clip.fps > 0.0) {
            v.push(format!("clip.fps must be positive, got {}", self.clip.fps));
        }
        v.extend(self.backbone.validate());
        let max_down = self.structure.n_down.max(self.dynamics.n_down);
        let div = self.backbone.spatial_patch << max_down;
        if div > 0 && (self.clip.height % div != 0 || self.clip.width % div != 0) {
            v.push(format!(
                "clip {}x{} must be divisible by spatial_patch * 2^max(n_down) = {div}",
                self.clip.height, self.clip.width
            ));
        }
        if self.backbone.spatial_patch > 0
            && self.clip.height % self.backbone.spatial_patch == 0
            && self.clip.width % self.backbone.spatial_patch == 0
        {
            let (_, f, h, w) = self.core_latent_dims();
            v.extend(self.structure.validate(f, h, w));
            v.extend(self.dynamics.validate(h, w));
        }
        v.extend(self.vae.validate());
        if !(self.train.lr.is_finite() && self.train.lr > 0.0) {
            v.push(format!("train.lr must be positive, got {}", self.train.lr));
        }
        if self.train.batch == 0 {
            v.push("train.batch must be >= 1".into());
        }
        v.extend(self.diffusion.validate());
        if self.discriminator_stages == 0
            || (self.clip.height >> self.discriminator_stages) == 0
            || (self.clip.width >> self.discriminator_stages) == 0
        {
            v.push(format!(
                "discriminator_stages {} too deep for clip {}x{}",
                self.discriminator_stages, self.clip.height, self.clip.width
            ));
        }
        v
    }

    pub fn validated(self) -> Result<Self> {
        let v = self.violations();
        if v.is_empty() {
            Ok(self)
        } else {
            Err(Error::ConfigViolations(v))
        }
    }

    /// 32-byte digest of the architecture-relevant subset (clip geometry and
    /// the three model sections); bundles and checkpoints must agree on it.
    pub fn fingerprint(&self) -> [u8; 32] {
        #[derive(Serialize)]
        struct Arch<'a> {
            clip: (usize, usize, usize, usize),
            backbone: &'a BackboneConfig,
            structure: &'a StructureConfig,
            dynamics: &'a DynamicsConfig,
        }
        let arch = Arch {
            clip: (
                self.clip.channels,
                self.clip.frames,
                self.clip.height,
                self.clip.width,
            ),
            backbone: &self.backbone,
            structure: &self.structure,
            dynamics: &self.dynamics,
        };
        let json = serde_json::to_string(&arch).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().into()
    }

    pub fn fingerprint_hex(&self) -> String {
        self.fingerprint().iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config serialization failed: {e}")))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("config parse failed: {e}")))
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_and_reference_configs_are_valid() {
        assert!(RunConfig::desk().violations().is_empty());
        assert!(RunConfig::reference().violations().is_empty());
    }

    #[test]
    fn json_round_trip_is_identity() {
        let cfg = RunConfig::desk();
        let back = RunConfig::from_json(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(cfg.fingerprint(), back.fingerprint());
    }

    #[test]
    fn validation_enumerates_every_violation() {
        let mut cfg = RunConfig::desk();
        cfg.clip.channels = 4;
        cfg.backbone.temporal_patch = 2;
        cfg.structure.n_q = 99;
        cfg.train.batch = 0;
        let v = cfg.violations();
        assert!(v.len() >= 4, "expected >= 4 violations, got {v:?}");
        assert!(matches!(cfg.validated(), Err(Error::ConfigViolations(_))));
    }

    #[test]
    fn fingerprint_tracks_architecture_not_training_knobs() {
        let a = RunConfig::desk();
        let mut b = a.clone();
        b.train.lr = 9.9;
        b.vae.lambda_p = 0.0;
        assert_eq!(a.fingerprint(), b.fingerprint());

        let mut c = a.clone();
        c.structure.n_q = 2;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }

    #[test]
    fn latent_dims_reference_config() {
        let cfg = RunConfig::reference();
        assert_eq!(cfg.core_latent_dims(), (768, 16, 14, 14));
        assert_eq!(cfg.structure_latent_dims(), (16, 4, 7, 7));
        assert_eq!(cfg.dynamics_latent_dims(), (16, 8, 14, 7));
        assert_eq!(cfg.latent_element_count(), 4928);
    }
}
