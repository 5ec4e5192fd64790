//! Spatial-temporal transformer backbone.
//!
//! The encoder turns a clip `(C, F, H, W)` into a latent `(c, f, h, w)` with
//! `f = F`, `h = H / p_s`, `w = W / p_s`. Each block applies full attention
//! over the `h*w` tokens of every frame, then causally masked attention over
//! the `f` positions at each spatial location, then an MLP — so latent slices
//! at time `t` never depend on input frames after `t`. The decoder mirrors
//! the encoder (including the causal mask) and maps a fused latent back to
//! pixel space through a linear un-patchify and `tanh`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{causal_mask, space_to_depth, Attention, Init, LayerNorm, Linear, Mlp, ParamStore};
use crate::video::CHANNELS;

/// Backbone hyperparameters. The temporal patch size is fixed to 1.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct BackboneConfig {
    /// Token width and latent channel count `c`.
    pub hidden_c: usize,
    /// Transformer depth per stack (encoder and decoder each get this many).
    pub layers: usize,
    pub heads: usize,
    /// Spatial patch size `p_s`.
    pub spatial_patch: usize,
    /// Temporal patch size; must be 1.
    pub temporal_patch: usize,
    pub mlp_ratio: f64,
}

impl BackboneConfig {
    /// Reference configuration: hidden 768, patch 16, 16+16 layers, 12 heads.
    pub fn reference() -> Self {
        Self {
            hidden_c: 768,
            layers: 16,
            heads: 12,
            spatial_patch: 16,
            temporal_patch: 1,
            mlp_ratio: 4.0,
        }
    }

    /// Small configuration for 32x32x8 clips on a CPU.
    pub fn desk() -> Self {
        Self {
            hidden_c: 64,
            layers: 4,
            heads: 4,
            spatial_patch: 4,
            temporal_patch: 1,
            mlp_ratio: 4.0,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        if self.hidden_c == 0 || self.hidden_c % self.heads != 0 {
            v.push(format!(
                "backbone.hidden_c {} must be a positive multiple of heads {}",
                self.hidden_c, self.heads
            ));
        }
        if self.temporal_patch != 1 {
            v.push(format!(
                "backbone.temporal_patch must be 1, got {}",
                self.temporal_patch
            ));
        }
        if self.spatial_patch == 0 {
            v.push("backbone.spatial_patch must be >= 1".into());
        }
        if self.layers == 0 {
            v.push("backbone.layers must be >= 1".into());
        }
        v
    }

    pub fn mlp_hidden(&self) -> usize {
        (self.hidden_c as f64 * self.mlp_ratio).round() as usize
    }
}

/// Encoder output `z` of shape `(c, f, h, w)` (batched internally as
/// `(B, c, f, h, w)`).
#[derive(Clone)]
pub struct CoreLatent {
    pub data: Tensor,
}

impl CoreLatent {
    pub fn dims(&self) -> Result<(usize, usize, usize, usize)> {
        let d = self.data.dims();
        if d.len() != 4 {
            return Err(Error::Shape(format!("core latent must be rank 4: {d:?}")));
        }
        Ok((d[0], d[1], d[2], d[3]))
    }
}

/// One pre-norm block: per-frame spatial attention, causal temporal
/// attention, then an MLP.
struct SpaceTimeBlock {
    ln_s: LayerNorm,
    attn_s: Attention,
    ln_t: LayerNorm,
    attn_t: Attention,
    ln_m: LayerNorm,
    mlp: Mlp,
}

impl SpaceTimeBlock {
    fn new(ps: &mut ParamStore, name: &str, cfg: &BackboneConfig) -> Result<Self> {
        Ok(Self {
            ln_s: LayerNorm::new(ps, &format!("{name}.ln_s"), cfg.hidden_c)?,
            attn_s: Attention::new(ps, &format!("{name}.attn_s"), cfg.hidden_c, cfg.heads)?,
            ln_t: LayerNorm::new(ps, &format!("{name}.ln_t"), cfg.hidden_c)?,
            attn_t: Attention::new(ps, &format!("{name}.attn_t"), cfg.hidden_c, cfg.heads)?,
            ln_m: LayerNorm::new(ps, &format!("{name}.ln_m"), cfg.hidden_c)?,
            mlp: Mlp::new(
                ps,
                &format!("{name}.mlp"),
                cfg.hidden_c,
                cfg.mlp_hidden(),
            )?,
        })
    }

    /// `x`: `(B, F, S, D)` token grid; `mask`: causal `(F, F)`.
    fn forward(&self, x: &Tensor, mask: &Tensor) -> Result<Tensor> {
        let (b, f, s, d) = x.dims4()?;
        // Spatial attention within each frame.
        let xs = x.reshape((b * f, s, d))?;
        let ys = self.attn_s.forward(&self.ln_s.forward(&xs)?, &self.ln_s.forward(&xs)?, None)?;
        let x = (xs + ys)?.reshape((b, f, s, d))?;
        // Causal temporal attention at each spatial location.
        let xt = x
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * s, f, d))?;
        let nt = self.ln_t.forward(&xt)?;
        let yt = self.attn_t.forward(&nt, &nt, Some(mask))?;
        let x = (xt + yt)?
            .reshape((b, s, f, d))?
            .transpose(1, 2)?
            .contiguous()?;
        // MLP.
        let y = self.mlp.forward(&self.ln_m.forward(&x)?)?;
        Ok((x + y)?)
    }
}

fn spacetime_stack(
    ps: &mut ParamStore,
    name: &str,
    cfg: &BackboneConfig,
) -> Result<Vec<SpaceTimeBlock>> {
    (0..cfg.layers)
        .map(|i| SpaceTimeBlock::new(ps, &format!("{name}.block{i}"), cfg))
        .collect()
}

/// Transformer encoder `E`.
pub struct SpaceTimeEncoder {
    cfg: BackboneConfig,
    frames: usize,
    grid_h: usize,
    grid_w: usize,
    patch_embed: Linear,
    pos_spatial: Tensor,
    pos_temporal: Tensor,
    blocks: Vec<SpaceTimeBlock>,
    ln_out: LayerNorm,
}

impl SpaceTimeEncoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &BackboneConfig,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height % cfg.spatial_patch != 0 || width % cfg.spatial_patch != 0 {
            return Err(Error::Shape(format!(
                "clip {height}x{width} not divisible by spatial patch {}",
                cfg.spatial_patch
            )));
        }
        let (gh, gw) = (height / cfg.spatial_patch, width / cfg.spatial_patch);
        let p = cfg.spatial_patch;
        Ok(Self {
            cfg: cfg.clone(),
            frames,
            grid_h: gh,
            grid_w: gw,
            patch_embed: Linear::new(ps, &format!("{name}.patch_embed"), CHANNELS * p * p, cfg.hidden_c)?,
            pos_spatial: ps.param(
                &format!("{name}.pos_spatial"),
                &[gh * gw, cfg.hidden_c],
                Init::Normal(0.02),
            )?,
            pos_temporal: ps.param(
                &format!("{name}.pos_temporal"),
                &[frames, cfg.hidden_c],
                Init::Normal(0.02),
            )?,
            blocks: spacetime_stack(ps, &format!("{name}.enc"), cfg)?,
            ln_out: LayerNorm::new(ps, &format!("{name}.ln_out"), cfg.hidden_c)?,
        })
    }

    /// `x`: `(B, C, F, H, W)` -> latent `(B, c, f, h, w)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, f, h, w) = x.dims5()?;
        let p = self.cfg.spatial_patch;
        if c != CHANNELS {
            return Err(Error::Shape(format!("expected {CHANNELS} channels, got {c}")));
        }
        if f != self.frames || h != self.grid_h * p || w != self.grid_w * p {
            return Err(Error::Shape(format!(
                "clip ({c},{f},{h},{w}) does not match encoder built for ({CHANNELS},{},{},{})",
                self.frames,
                self.grid_h * p,
                self.grid_w * p
            )));
        }
        // Patchify each frame: (B*F, C, H, W) -> (B*F, C*p*p, h, w) -> tokens.
        let frames_2d = x
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * f, c, h, w))?;
        let patches = space_to_depth(&frames_2d, p)?; // (B*F, C*p*p, gh, gw)
        let s = self.grid_h * self.grid_w;
        let tokens = patches
            .reshape((b * f, c * p * p, s))?
            .transpose(1, 2)?
            .contiguous()?;
        let mut tok = self.patch_embed.forward(&tokens)?.reshape((
            b,
            f,
            s,
            self.cfg.hidden_c,
        ))?;
        tok = tok.broadcast_add(&self.pos_spatial.reshape((1, 1, s, self.cfg.hidden_c))?)?;
        tok = tok.broadcast_add(&self.pos_temporal.reshape((1, f, 1, self.cfg.hidden_c))?)?;

        let mask = causal_mask(f, tok.dtype(), tok.device())?;
        for blk in &self.blocks {
            tok = blk.forward(&tok, &mask)?;
        }
        let tok = self.ln_out.forward(&tok)?;
        // (B, F, S, D) -> (B, c, f, h, w)
        let z = tok
            .permute((0, 3, 1, 2))?
            .contiguous()?
            .reshape((b, self.cfg.hidden_c, f, self.grid_h, self.grid_w))?;
        Ok(z)
    }

    pub fn latent_dims(&self) -> (usize, usize, usize, usize) {
        (self.cfg.hidden_c, self.frames, self.grid_h, self.grid_w)
    }
}

/// Transformer decoder `D`; consumes the element-wise sum of the aligned
/// branch outputs and produces a clip in `[-1, 1]`.
pub struct SpaceTimeDecoder {
    cfg: BackboneConfig,
    frames: usize,
    grid_h: usize,
    grid_w: usize,
    pos_spatial: Tensor,
    pos_temporal: Tensor,
    blocks: Vec<SpaceTimeBlock>,
    ln_out: LayerNorm,
    unpatch: Linear,
}

impl SpaceTimeDecoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &BackboneConfig,
        frames: usize,
        height: usize,
        width: usize,
    ) -> Result<Self> {
        if height % cfg.spatial_patch != 0 || width % cfg.spatial_patch != 0 {
            return Err(Error::Shape(format!(
                "clip {height}x{width} not divisible by spatial patch {}",
                cfg.spatial_patch
            )));
        }
        let (gh, gw) = (height / cfg.spatial_patch, width / cfg.spatial_patch);
        let p = cfg.spatial_patch;
        Ok(Self {
            cfg: cfg.clone(),
            frames,
            grid_h: gh,
            grid_w: gw,
            pos_spatial: ps.param(
                &format!("{name}.pos_spatial"),
                &[gh * gw, cfg.hidden_c],
                Init::Normal(0.02),
            )?,
            pos_temporal: ps.param(
                &format!("{name}.pos_temporal"),
                &[frames, cfg.hidden_c],
                Init::Normal(0.02),
            )?,
            blocks: spacetime_stack(ps, &format!("{name}.dec"), cfg)?,
            ln_out: LayerNorm::new(ps, &format!("{name}.ln_out"), cfg.hidden_c)?,
            unpatch: Linear::new(ps, &format!("{name}.unpatch"), cfg.hidden_c, CHANNELS * p * p)?,
        })
    }

    /// `u`: fused latent `(B, c, f, h, w)` -> clip `(B, C, F, H, W)`.
    pub fn forward(&self, u: &Tensor) -> Result<Tensor> {
        let (b, c, f, gh, gw) = u.dims5()?;
        if c != self.cfg.hidden_c || f != self.frames || gh != self.grid_h || gw != self.grid_w {
            return Err(Error::Shape(format!(
                "latent ({c},{f},{gh},{gw}) does not match decoder built for ({},{},{},{})",
                self.cfg.hidden_c, self.frames, self.grid_h, self.grid_w
            )));
        }
        let s = gh * gw;
        let mut tok = u
            .reshape((b, c, f, s))?
            .permute((0, 2, 3, 1))?
            .contiguous()?; // (B, F, S, D)
        tok = tok.broadcast_add(&self.pos_spatial.reshape((1, 1, s, c))?)?;
        tok = tok.broadcast_add(&self.pos_temporal.reshape((1, f, 1, c))?)?;

        let mask = causal_mask(f, tok.dtype(), tok.device())?;
        for blk in &self.blocks {
            tok = blk.forward(&tok, &mask)?;
        }
        let tok = self.ln_out.forward(&tok)?;
        let px = self.unpatch.forward(&tok)?; // (B, F, S, C*p*p)
        let p = self.cfg.spatial_patch;
        let img = px
            .reshape((b * f, s, CHANNELS * p * p))?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * f, CHANNELS * p * p, gh, gw))?;
        let img = crate::nn::depth_to_space(&img, p)?; // (B*F, C, H, W)
        let out = img
            .reshape((b, f, CHANNELS, gh * p, gw * p))?
            .transpose(1, 2)?
            .contiguous()?;
        Ok(out.tanh()?)
    }
}

/// Element-wise fusion of the aligned branch outputs followed by decoding:
/// all three parts must share the decoder's latent shape, and the sum is
/// formed before any decoder computation.
pub fn fuse_and_decode(
    decoder: &SpaceTimeDecoder,
    u_s: &Tensor,
    u_dh: &Tensor,
    u_dw: &Tensor,
) -> Result<Tensor> {
    if u_s.dims() != u_dh.dims() || u_s.dims() != u_dw.dims() {
        return Err(Error::Shape(format!(
            "fusion parts disagree: {:?} vs {:?} vs {:?}",
            u_s.dims(),
            u_dh.dims(),
            u_dw.dims()
        )));
    }
    let fused = ((u_s + u_dh)? + u_dw)?;
    decoder.forward(&fused)
}

/// Analytic parameter count for one encoder+decoder pair under `cfg` at the
/// given clip geometry, via shape-only construction.
pub fn backbone_param_count(cfg: &BackboneConfig, frames: usize, height: usize, width: usize) -> Result<usize> {
    let mut ps = ParamStore::shape_only();
    SpaceTimeEncoder::new(&mut ps, "encoder", cfg, frames, height, width)?;
    SpaceTimeDecoder::new(&mut ps, "decoder", cfg, frames, height, width)?;
    Ok(ps.param_count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use rand::SeedableRng;

    fn desk_encoder(ps: &mut ParamStore) -> SpaceTimeEncoder {
        SpaceTimeEncoder::new(ps, "enc", &BackboneConfig::desk(), 8, 32, 32).unwrap()
    }

    #[test]
    fn encoder_shape_desk_config() {
        let mut ps = ParamStore::new(0, DType::F32);
        let enc = desk_encoder(&mut ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let x = crate::nn::randn_from(&mut rng, &[1, 3, 8, 32, 32], DType::F32, &Device::Cpu).unwrap();
        let z = enc.forward(&x).unwrap();
        assert_eq!(z.dims(), &[1, 64, 8, 8, 8]);
    }

    #[test]
    fn encoder_rejects_indivisible_dims() {
        let mut ps = ParamStore::new(0, DType::F32);
        assert!(matches!(
            SpaceTimeEncoder::new(&mut ps, "enc", &BackboneConfig::desk(), 8, 30, 32),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn encoder_is_temporally_causal() {
        // Perturb only the last frame; latent frames before it must be
        // bit-identical (the computation graph for frame t never reads
        // frames > t).
        let mut ps = ParamStore::new(1, DType::F32);
        let enc = desk_encoder(&mut ps);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let x = crate::nn::randn_from(&mut rng, &[1, 3, 8, 32, 32], DType::F32, &Device::Cpu)
            .unwrap()
            .tanh()
            .unwrap();
        let z_base = enc.forward(&x).unwrap();

        let noise =
            crate::nn::randn_from(&mut rng, &[1, 3, 1, 32, 32], DType::F32, &Device::Cpu).unwrap();
        let last = (x.narrow(2, 7, 1).unwrap() + (noise * 0.25).unwrap()).unwrap();
        let x2 = Tensor::cat(&[&x.narrow(2, 0, 7).unwrap(), &last], 2).unwrap();
        let z_pert = enc.forward(&x2).unwrap();

        let prefix_base = z_base.narrow(2, 0, 7).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let prefix_pert = z_pert.narrow(2, 0, 7).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let max_diff = prefix_base
            .iter()
            .zip(&prefix_pert)
            .map(|(a, b)| (a - b).abs())
            .fold(0f32, f32::max);
        assert!(max_diff <= 1e-5, "causality violated: prefix diff {max_diff}");

        let last_base = z_base.narrow(2, 7, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let last_pert = z_pert.narrow(2, 7, 1).unwrap().flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert!(
            last_base.iter().zip(&last_pert).any(|(a, b)| a != b),
            "perturbation had no effect at all"
        );
    }

    #[test]
    fn decoder_round_trips_shapes_and_fusion_commutes() {
        let mut ps = ParamStore::new(2, DType::F32);
        let dec = SpaceTimeDecoder::new(&mut ps, "dec", &BackboneConfig::desk(), 8, 32, 32).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = crate::nn::randn_from(&mut rng, &[1, 64, 8, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let b = crate::nn::randn_from(&mut rng, &[1, 64, 8, 8, 8], DType::F32, &Device::Cpu).unwrap();
        let c = crate::nn::randn_from(&mut rng, &[1, 64, 8, 8, 8], DType::F32, &Device::Cpu).unwrap();

        let abc = fuse_and_decode(&dec, &a, &b, &c).unwrap();
        assert_eq!(abc.dims(), &[1, 3, 8, 32, 32]);
        let bac = fuse_and_decode(&dec, &b, &a, &c).unwrap();
        let x = abc.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        let y = bac.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(x, y, "fusion must commute");

        let zero = Tensor::zeros((1, 64, 8, 8, 8), DType::F32, &Device::Cpu).unwrap();
        let d0 = fuse_and_decode(&dec, &zero, &zero, &zero).unwrap();
        let d0b = fuse_and_decode(&dec, &zero, &zero, &zero).unwrap();
        assert_eq!(
            d0.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            d0b.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );

        // Structure-only: zero dynamics parts reduce fusion to D(u_S).
        let s_only = fuse_and_decode(&dec, &a, &zero, &zero).unwrap();
        let direct = dec.forward(&a).unwrap();
        assert_eq!(
            s_only.flatten_all().unwrap().to_vec1::<f32>().unwrap(),
            direct.flatten_all().unwrap().to_vec1::<f32>().unwrap()
        );

        let bad = Tensor::zeros((1, 64, 8, 4, 8), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(
            fuse_and_decode(&dec, &a, &b, &bad),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn reference_config_params_near_300m() {
        let n = backbone_param_count(&BackboneConfig::reference(), 16, 224, 224).unwrap();
        let target = 300_000_000f64;
        let rel = (n as f64 - target).abs() / target;
        assert!(rel <= 0.20, "param count {n} deviates {rel:.3} from 300M");
    }

    #[test]
    fn outputs_stay_in_range() {
        let mut ps = ParamStore::new(4, DType::F32);
        let dec = SpaceTimeDecoder::new(&mut ps, "dec", &BackboneConfig::desk(), 4, 16, 16).unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let u = (crate::nn::randn_from(&mut rng, &[2, 64, 4, 4, 4], DType::F32, &Device::Cpu).unwrap() * 3.0).unwrap();
        let y = dec.forward(&u).unwrap();
        for v in y.flatten_all().unwrap().to_vec1::<f32>().unwrap() {
            assert!((-1.0..=1.0).contains(&v));
        }
    }
}
