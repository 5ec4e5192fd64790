//! Dynamics-latent branch: extraction `F_D` and decoding head `H_D`.
//!
//! Extraction downsamples each latent frame spatially with stride-2 convs to
//! `(f, c_mid, h_d, w_d)`, averages over the height and width axes, and maps
//! the concatenation `[avg_h ; avg_w]` (height-averaged part first) through a
//! per-position MLP head down to `d_d` channels. The result is
//! `(f, d_d, w_d + h_d)` — linear in `w_d + h_d` rather than quadratic in
//! `w_d * h_d`.
//!
//! Decoding splits at the stored point, lifts channels `d_d -> c` and
//! lengths `w_d -> w` / `h_d -> h` with separate linear maps per part, and
//! broadcasts along the missing axis so every row (resp. column) of the
//! aligned output is identical.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Conv2d, Init, LayerNorm, Linear, Mlp, ParamStore};

/// How the spatial collapse is performed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum DynamicsMode {
    #[default]
    Average,
    SqfAblation,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DynamicsConfig {
    /// Intermediate conv channels `c'_d`.
    pub c_mid: usize,
    /// Stride-2 stages; at least one.
    pub n_down: usize,
    /// Channel dimension of the final latent.
    pub d_d: usize,
    pub mode: DynamicsMode,
}

impl DynamicsConfig {
    /// Reference setting: one downsampling stage, 8 output channels.
    pub fn reference() -> Self {
        Self {
            c_mid: 64,
            n_down: 1,
            d_d: 8,
            mode: DynamicsMode::Average,
        }
    }

    pub fn desk() -> Self {
        Self {
            c_mid: 32,
            n_down: 1,
            d_d: 4,
            mode: DynamicsMode::Average,
        }
    }

    pub fn validate(&self, latent_h: usize, latent_w: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_down < 1 {
            v.push("dynamics.n_down must be >= 1".into());
        }
        if self.d_d == 0 || self.d_d > self.c_mid {
            v.push(format!(
                "dynamics.d_d {} must be in 1..=c_mid {}",
                self.d_d, self.c_mid
            ));
        }
        let div = 1usize << self.n_down;
        if self.n_down >= 1 && (latent_h % div != 0 || latent_w % div != 0) {
            v.push(format!(
                "latent grid {latent_h}x{latent_w} not divisible by 2^n_down = {div}"
            ));
        }
        v
    }

    /// `(f, d_d, w_d + h_d)` plus the split point `w_d`.
    pub fn latent_dims(
        &self,
        latent_f: usize,
        latent_h: usize,
        latent_w: usize,
    ) -> (usize, usize, usize, usize) {
        let div = 1usize << self.n_down;
        let (h_d, w_d) = (latent_h / div, latent_w / div);
        (latent_f, self.d_d, w_d + h_d, w_d)
    }
}

/// Dynamics latent `(f, d_d, w_d + h_d)`; the first `split` positions along
/// the last axis are the height-averaged part.
#[derive(Clone)]
pub struct DynamicsLatent {
    pub data: Tensor,
    pub split: usize,
}

/// Extraction function producing the dynamics latent from the core latent.
pub struct DynamicsEncoder {
    cfg: DynamicsConfig,
    downs: Vec<Conv2d>,
    head: Mlp,
    // Spatial Q-Former ablation.
    sqf_queries: Option<Tensor>,
    sqf_pos: Option<Tensor>,
    sqf_blocks: Vec<SqfBlock>,
    sqf_ln: Option<LayerNorm>,
    latent_c: usize,
    latent_f: usize,
    latent_h: usize,
    latent_w: usize,
}

/// Pre-norm cross-attention block for the spatial Q-Former ablation.
struct SqfBlock {
    ln_q: LayerNorm,
    ln_kv: LayerNorm,
    cross: Attention,
    ln_m: LayerNorm,
    mlp: Mlp,
}

impl SqfBlock {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_q: LayerNorm::new(ps, &format!("{name}.ln_q"), dim)?,
            ln_kv: LayerNorm::new(ps, &format!("{name}.ln_kv"), dim)?,
            cross: Attention::new(ps, &format!("{name}.cross"), dim, heads)?,
            ln_m: LayerNorm::new(ps, &format!("{name}.ln_m"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, dim * 2)?,
        })
    }

    fn forward(&self, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let y = self
            .cross
            .forward(&self.ln_q.forward(q)?, &self.ln_kv.forward(kv)?, None)?;
        let q = (q + y)?;
        let y = self.mlp.forward(&self.ln_m.forward(&q)?)?;
        Ok((q + y)?)
    }
}

impl DynamicsEncoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &DynamicsConfig,
        latent_c: usize,
        latent_f: usize,
        latent_h: usize,
        latent_w: usize,
    ) -> Result<Self> {
        let violations = cfg.validate(latent_h, latent_w);
        if !violations.is_empty() {
            return Err(Error::ConfigViolations(violations));
        }
        let mut downs = Vec::with_capacity(cfg.n_down);
        for i in 0..cfg.n_down {
            let in_ch = if i == 0 { latent_c } else { cfg.c_mid };
            downs.push(Conv2d::new(
                ps,
                &format!("{name}.down{i}"),
                in_ch,
                cfg.c_mid,
                3,
                2,
                1,
            )?);
        }
        let head = Mlp::new_proj(ps, &format!("{name}.head"), cfg.c_mid, cfg.c_mid, cfg.d_d)?;
        let mut enc = Self {
            cfg: cfg.clone(),
            downs,
            head,
            sqf_queries: None,
            sqf_pos: None,
            sqf_blocks: Vec::new(),
            sqf_ln: None,
            latent_c,
            latent_f,
            latent_h,
            latent_w,
        };
        if cfg.mode == DynamicsMode::SqfAblation {
            let div = 1usize << cfg.n_down;
            let (h_d, w_d) = (latent_h / div, latent_w / div);
            let heads = if cfg.c_mid % 4 == 0 { 4 } else { 1 };
            enc.sqf_queries = Some(ps.param(
                &format!("{name}.sqf_queries"),
                &[w_d + h_d, cfg.c_mid],
                Init::Normal(0.02),
            )?);
            // Positional table over the h_d*w_d key tokens; without it the
            // attention would be a set operation and could not be
            // position-sensitive at all.
            enc.sqf_pos = Some(ps.param(
                &format!("{name}.sqf_pos"),
                &[h_d * w_d, cfg.c_mid],
                Init::Normal(0.02),
            )?);
            enc.sqf_blocks = (0..2)
                .map(|i| SqfBlock::new(ps, &format!("{name}.sqf{i}"), cfg.c_mid, heads))
                .collect::<Result<Vec<_>>>()?;
            enc.sqf_ln = Some(LayerNorm::new(ps, &format!("{name}.sqf_ln"), cfg.c_mid)?);
        }
        Ok(enc)
    }

    fn check_input(&self, z: &Tensor) -> Result<(usize, usize, usize, usize, usize)> {
        let (b, c, f, h, w) = z.dims5()?;
        if c != self.latent_c || f != self.latent_f || h != self.latent_h || w != self.latent_w {
            return Err(Error::Shape(format!(
                "core latent ({c},{f},{h},{w}) does not match branch built for ({},{},{},{})",
                self.latent_c, self.latent_f, self.latent_h, self.latent_w
            )));
        }
        Ok((b, c, f, h, w))
    }

    /// Intermediate `z'_D`: `(B, f, c_mid, h_d, w_d)`.
    pub fn spatial_features(&self, z: &Tensor) -> Result<Tensor> {
        let (b, c, f, h, w) = self.check_input(z)?;
        let mut x = z.transpose(1, 2)?.contiguous()?.reshape((b * f, c, h, w))?;
        for conv in &self.downs {
            x = conv.forward(&x)?.gelu_erf()?;
        }
        let (_, cm, hd, wd) = x.dims4()?;
        Ok(x.reshape((b, f, cm, hd, wd))?)
    }

    /// Full extraction: `(B, c, f, h, w)` -> `(B, f, d_d, w_d + h_d)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let feats = self.spatial_features(z)?;
        let (b, f, cm, hd, wd) = feats.dims5()?;
        let profile = match self.cfg.mode {
            DynamicsMode::Average => {
                // avg over height (dim 3) keeps width positions, and vice
                // versa; concatenate [avg_h ; avg_w] along the last axis.
                let avg_h = feats.mean(3)?; // (B, f, c_mid, w_d)
                let avg_w = feats.mean(4)?; // (B, f, c_mid, h_d)
                Tensor::cat(&[&avg_h, &avg_w], 3)? // (B, f, c_mid, w_d + h_d)
            }
            DynamicsMode::SqfAblation => {
                let kv = feats
                    .reshape((b * f, cm, hd * wd))?
                    .transpose(1, 2)?
                    .contiguous()?; // (B*f, hd*wd, c_mid)
                let kv = kv.broadcast_add(&self.sqf_pos.as_ref().unwrap().reshape((
                    1,
                    hd * wd,
                    cm,
                ))?)?;
                let nq = wd + hd;
                let mut q = self
                    .sqf_queries
                    .as_ref()
                    .unwrap()
                    .reshape((1, nq, cm))?
                    .broadcast_as((b * f, nq, cm))?
                    .contiguous()?;
                for blk in &self.sqf_blocks {
                    q = blk.forward(&q, &kv)?;
                }
                let q = self.sqf_ln.as_ref().unwrap().forward(&q)?;
                q.transpose(1, 2)?.contiguous()?.reshape((b, f, cm, nq))?
            }
        };
        // Per-position head G on the channel axis.
        let x = profile.transpose(2, 3)?.contiguous()?; // (B, f, w_d+h_d, c_mid)
        let y = self.head.forward(&x)?; // (B, f, w_d+h_d, d_d)
        Ok(y.transpose(2, 3)?.contiguous()?)
    }

    /// Split point `w_d` for the active geometry.
    pub fn split(&self) -> usize {
        self.cfg
            .latent_dims(self.latent_f, self.latent_h, self.latent_w)
            .3
    }
}

/// Decoding head `H_D` with separate parameters for the `(h)` and `(w)`
/// parts (their input lengths differ).
pub struct DynamicsDecoder {
    chan_h: Linear,
    len_h: Linear,
    chan_w: Linear,
    len_w: Linear,
    split: usize,
    latent_c: usize,
    latent_f: usize,
    latent_h: usize,
    latent_w: usize,
    d_d: usize,
}

impl DynamicsDecoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &DynamicsConfig,
        latent_c: usize,
        latent_f: usize,
        latent_h: usize,
        latent_w: usize,
    ) -> Result<Self> {
        let (_, _, _, w_d) = cfg.latent_dims(latent_f, latent_h, latent_w);
        let div = 1usize << cfg.n_down;
        let h_d = latent_h / div;
        Ok(Self {
            chan_h: Linear::new(ps, &format!("{name}.h.chan"), cfg.d_d, latent_c)?,
            len_h: Linear::new(ps, &format!("{name}.h.len"), w_d, latent_w)?,
            chan_w: Linear::new(ps, &format!("{name}.w.chan"), cfg.d_d, latent_c)?,
            len_w: Linear::new(ps, &format!("{name}.w.len"), h_d, latent_h)?,
            split: w_d,
            latent_c,
            latent_f,
            latent_h,
            latent_w,
            d_d: cfg.d_d,
        })
    }

    /// `z_d`: `(B, f, d_d, w_d + h_d)` -> `(u_Dh, u_Dw)`, each
    /// `(B, c, f, h, w)`; `u_Dh` is constant along height, `u_Dw` along
    /// width.
    pub fn forward(&self, z_d: &Tensor, split: usize) -> Result<(Tensor, Tensor)> {
        let (b, f, dd, l) = z_d.dims4()?;
        if split != self.split {
            return Err(Error::Shape(format!(
                "split point {split} does not match decoder built for {}",
                self.split
            )));
        }
        let h_d = l
            .checked_sub(split)
            .filter(|v| *v > 0)
            .ok_or_else(|| Error::Shape(format!("split {split} out of range for length {l}")))?;
        if f != self.latent_f || dd != self.d_d {
            return Err(Error::Shape(format!(
                "dynamics latent ({f},{dd},{l}) does not match decoder built for ({},{},{})",
                self.latent_f,
                self.d_d,
                self.split + h_d
            )));
        }

        let z_h = z_d.narrow(3, 0, split)?; // (B, f, d_d, w_d)
        let z_w = z_d.narrow(3, split, h_d)?; // (B, f, d_d, h_d)

        // T: channels d_d -> c, then length w_d -> w (resp. h_d -> h).
        let part = |z: &Tensor, chan: &Linear, len: &Linear| -> Result<Tensor> {
            let t = z.transpose(2, 3)?.contiguous()?; // (B, f, len_in, d_d)
            let t = chan.forward(&t)?; // (B, f, len_in, c)
            let t = t.transpose(2, 3)?.contiguous()?; // (B, f, c, len_in)
            len.forward(&t) // (B, f, c, len_out)
        };

        let th = part(&z_h, &self.chan_h, &self.len_h)?; // (B, f, c, w)
        let tw = part(&z_w, &self.chan_w, &self.len_w)?; // (B, f, c, h)

        // Rep: broadcast along the missing axis.
        let u_dh = th
            .reshape((b, f, self.latent_c, 1, self.latent_w))?
            .broadcast_as((b, f, self.latent_c, self.latent_h, self.latent_w))?
            .transpose(1, 2)?
            .contiguous()?; // (B, c, f, h, w)
        let u_dw = tw
            .reshape((b, f, self.latent_c, self.latent_h, 1))?
            .broadcast_as((b, f, self.latent_c, self.latent_h, self.latent_w))?
            .transpose(1, 2)?
            .contiguous()?;
        Ok((u_dh, u_dw))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use proptest::prelude::*;
    use rand::SeedableRng;

    fn randn(seed: u64, dims: &[usize]) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        crate::nn::randn_from(&mut rng, dims, DType::F32, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn desk_extraction_shape_and_split() {
        let mut ps = ParamStore::new(0, DType::F32);
        let cfg = DynamicsConfig::desk();
        let enc = DynamicsEncoder::new(&mut ps, "d", &cfg, 64, 8, 8, 8).unwrap();
        let z = randn(1, &[2, 64, 8, 8, 8]);
        let zd = enc.forward(&z).unwrap();
        assert_eq!(zd.dims(), &[2, 8, 4, 8]);
        assert_eq!(enc.split(), 4);
    }

    #[test]
    fn latent_size_is_linear_not_quadratic() {
        for (h, w, n_down) in [(8usize, 8usize, 1usize), (16, 16, 2), (14, 14, 1)] {
            let cfg = DynamicsConfig {
                c_mid: 16,
                n_down,
                d_d: 4,
                mode: DynamicsMode::Average,
            };
            let (f, dd, l, split) = cfg.latent_dims(8, h, w);
            let div = 1usize << n_down;
            let (hd, wd) = (h / div, w / div);
            assert_eq!(l, wd + hd);
            assert_eq!(split, wd);
            assert_eq!(f * dd * l, 8 * 4 * (wd + hd));
            assert!(f * dd * l < 8 * 4 * wd * hd || wd + hd >= wd * hd);
        }
    }

    #[test]
    fn constant_features_average_to_the_constant() {
        // Bypass convs: averaging a constant plane must give that constant,
        // checked through the public op by zeroing conv weights and using
        // bias-only features.
        let mut ps = ParamStore::new(2, DType::F32);
        let cfg = DynamicsConfig::desk();
        let enc = DynamicsEncoder::new(&mut ps, "d", &cfg, 64, 8, 8, 8).unwrap();
        let z = randn(3, &[1, 64, 8, 8, 8]);
        let feats = enc.spatial_features(&z).unwrap();
        let avg_h = feats.mean(3).unwrap();
        let avg_w = feats.mean(4).unwrap();

        // Directly verify the averaging identities on the intermediate.
        let (_, f, cm, hd, wd) = feats.dims5().unwrap();
        let fv = flat(&feats);
        let ah = flat(&avg_h);
        for fi in 0..f {
            for c in 0..cm {
                for x in 0..wd {
                    let mut s = 0f64;
                    for y in 0..hd {
                        s += fv[((fi * cm + c) * hd + y) * wd + x] as f64;
                    }
                    let expect = (s / hd as f64) as f32;
                    let got = ah[(fi * cm + c) * wd + x];
                    assert!((expect - got).abs() < 1e-5);
                }
            }
        }
        let _ = avg_w;
    }

    #[test]
    fn averaging_is_permutation_invariant_and_linear() {
        let mut ps = ParamStore::new(4, DType::F32);
        let cfg = DynamicsConfig::desk();
        let enc = DynamicsEncoder::new(&mut ps, "d", &cfg, 64, 8, 8, 8).unwrap();
        let z = randn(5, &[1, 64, 8, 8, 8]);
        let feats = enc.spatial_features(&z).unwrap();
        let (b, f, cm, hd, wd) = feats.dims5().unwrap();

        // Permute height rows of the intermediate; avg_h must not change.
        let perm: Vec<usize> = (0..hd).rev().collect();
        let idx = Tensor::from_vec(
            perm.iter().map(|&v| v as i64).collect::<Vec<_>>(),
            hd,
            &Device::Cpu,
        )
        .unwrap();
        let permuted = feats.index_select(&idx, 3).unwrap();
        // Summation order changes under the permutation, so exact up to
        // last-ulp reordering noise.
        for (a, b) in flat(&feats.mean(3).unwrap())
            .iter()
            .zip(&flat(&permuted.mean(3).unwrap()))
        {
            assert!((a - b).abs() <= 1e-6, "{a} vs {b}");
        }

        // Linearity: avg(a*X + b*Y) = a*avg(X) + b*avg(Y).
        let other = randn(6, &[b, f, cm, hd, wd]);
        let combo = ((&feats * 2.5).unwrap() + (&other * (-0.5)).unwrap()).unwrap();
        let lhs = flat(&combo.mean(3).unwrap());
        let rhs = flat(
            &((feats.mean(3).unwrap() * 2.5).unwrap() + (other.mean(3).unwrap() * (-0.5)).unwrap())
                .unwrap(),
        );
        for (a, b) in lhs.iter().zip(&rhs) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn decoder_shapes_and_rep_identities() {
        let mut ps = ParamStore::new(7, DType::F32);
        let cfg = DynamicsConfig::desk();
        let dec = DynamicsDecoder::new(&mut ps, "dd", &cfg, 64, 8, 8, 8).unwrap();
        let zd = randn(8, &[1, 8, 4, 8]);
        let (u_dh, u_dw) = dec.forward(&zd, 4).unwrap();
        assert_eq!(u_dh.dims(), &[1, 64, 8, 8, 8]);
        assert_eq!(u_dw.dims(), &[1, 64, 8, 8, 8]);

        // u_Dh constant along height; avg over the repeated axis recovers
        // the pre-Rep tensor exactly.
        let v = flat(&u_dh);
        let (c, f, h, w) = (64usize, 8usize, 8usize, 8usize);
        for ci in 0..c {
            for fi in 0..f {
                for x in 0..w {
                    let v0 = v[((ci * f + fi) * h) * w + x];
                    for y in 1..h {
                        assert_eq!(v[((ci * f + fi) * h + y) * w + x], v0);
                    }
                }
            }
        }
        let mean_back = flat(&u_dh.mean(3).unwrap());
        let row0 = flat(&u_dh.narrow(3, 0, 1).unwrap().squeeze(3).unwrap());
        for (a, b) in mean_back.iter().zip(&row0) {
            assert!((a - b).abs() <= 1e-6, "avg of identical copies drifted: {a} vs {b}");
        }

        let vw = flat(&u_dw);
        for ci in 0..c {
            for fi in 0..f {
                for y in 0..h {
                    let v0 = vw[((ci * f + fi) * h + y) * w];
                    for x in 1..w {
                        assert_eq!(vw[((ci * f + fi) * h + y) * w + x], v0);
                    }
                }
            }
        }

        assert!(matches!(dec.forward(&zd, 3), Err(Error::Shape(_))));
    }

    #[test]
    fn sqf_ablation_shape_parity_and_position_sensitivity() {
        let mut ps = ParamStore::new(9, DType::F32);
        let mut cfg = DynamicsConfig::desk();
        cfg.mode = DynamicsMode::SqfAblation;
        let enc = DynamicsEncoder::new(&mut ps, "d", &cfg, 64, 8, 8, 8).unwrap();
        let z = randn(10, &[1, 64, 8, 8, 8]);
        let zd = enc.forward(&z).unwrap();
        assert_eq!(zd.dims(), &[1, 8, 4, 8]);

        // Spatially permuting the input changes the output (the averaging
        // path would have been invariant under height permutations; the
        // Q-Former with positional keys is not).
        let idx = Tensor::from_vec((0..8).rev().map(|v| v as i64).collect::<Vec<_>>(), 8, &Device::Cpu).unwrap();
        let z_perm = z.index_select(&idx, 3).unwrap().contiguous().unwrap();
        let zd_perm = enc.forward(&z_perm).unwrap();
        let a = flat(&zd);
        let b = flat(&zd_perm);
        let max_diff = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).fold(0f32, f32::max);
        assert!(max_diff > 1e-4, "spatial Q-Former output unexpectedly permutation-invariant");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn rep_then_average_recovers_input(seed in 0u64..1000) {
            // avg_axis(Rep_axis(Y)) = Y exactly, for random Y.
            let y = randn(seed, &[1, 2, 3, 5]);
            let rep = y
                .reshape((1, 2, 3, 1, 5)).unwrap()
                .broadcast_as((1, 2, 3, 4, 5)).unwrap()
                .contiguous().unwrap();
            let back = rep.mean(3).unwrap();
            prop_assert_eq!(flat(&y), flat(&back));
        }
    }
}
