//! Structure-latent branch: extraction `F_S` and decoding head `H_S`.
//!
//! Extraction runs in two stages. Stage 1 folds the spatial grid into the
//! batch axis (row-major, `(i, j) -> i*w + j`), lifts channels `c -> d_q`
//! with a one-hidden-layer MLP, and cross-attends a bank of learned queries
//! against the temporal sequence, so each spatial cell is summarized into
//! `n_q` tokens independently of every other cell. Stage 2 reshapes to
//! `(n_q, d_q, h, w)` and compresses spatially with stride-2 convs plus a
//! 1x1 bottleneck down to `d_s` channels.
//!
//! Two ablation extractors share the output contract: `conv` replaces the
//! Q-Former with a strided temporal convolution + MLP, and `hidden` folds
//! the spatial grid into the hidden dimension instead of the batch
//! (deliberately breaking spatial locality).

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Attention, Conv2d, Init, LayerNorm, Linear, Mlp, ParamStore};

/// How the temporal reduction `f -> n_q` is performed.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq, Default)]
#[serde(rename_all = "snake_case")]
pub enum StructureMode {
    #[default]
    Qformer,
    ConvAblation,
    HiddenAblation,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StructureConfig {
    /// Learned query count; must satisfy `n_q <= f`.
    pub n_q: usize,
    /// Q-Former hidden width.
    pub d_q: usize,
    pub qformer_layers: usize,
    pub qformer_heads: usize,
    /// Bottleneck channels of the final latent.
    pub d_s: usize,
    /// Stride-2 downsampling stages.
    pub n_down: usize,
    pub mode: StructureMode,
}

impl StructureConfig {
    /// Reference setting: 16 queries at width 64, 6 layers, 8 heads,
    /// bottleneck 4, one downsampling stage.
    pub fn reference() -> Self {
        Self {
            n_q: 16,
            d_q: 64,
            qformer_layers: 6,
            qformer_heads: 8,
            d_s: 4,
            n_down: 1,
            mode: StructureMode::Qformer,
        }
    }

    pub fn desk() -> Self {
        Self {
            n_q: 4,
            d_q: 32,
            qformer_layers: 2,
            qformer_heads: 4,
            d_s: 4,
            n_down: 1,
            mode: StructureMode::Qformer,
        }
    }

    pub fn validate(&self, latent_f: usize, latent_h: usize, latent_w: usize) -> Vec<String> {
        let mut v = Vec::new();
        if self.n_q == 0 || self.n_q > latent_f {
            v.push(format!(
                "structure.n_q {} must be in 1..={latent_f} (latent frame count)",
                self.n_q
            ));
        }
        if self.d_q == 0 || self.d_q % self.qformer_heads != 0 {
            v.push(format!(
                "structure.d_q {} must be a positive multiple of qformer_heads {}",
                self.d_q, self.qformer_heads
            ));
        }
        if self.d_s == 0 {
            v.push("structure.d_s must be >= 1".into());
        }
        let div = 1usize << self.n_down;
        if latent_h % div != 0 || latent_w % div != 0 {
            v.push(format!(
                "latent grid {latent_h}x{latent_w} not divisible by 2^n_down = {div}"
            ));
        }
        if self.mode == StructureMode::ConvAblation && latent_f % self.n_q != 0 {
            v.push(format!(
                "conv ablation needs n_q {} to divide latent frames {latent_f}",
                self.n_q
            ));
        }
        v
    }

    pub fn latent_dims(&self, latent_h: usize, latent_w: usize) -> (usize, usize, usize, usize) {
        let div = 1usize << self.n_down;
        (self.n_q, self.d_s, latent_h / div, latent_w / div)
    }
}

/// Bank of learned query tokens `(n_q, d_q)`.
pub struct QueryBank {
    pub queries: Tensor,
}

impl QueryBank {
    pub fn new(ps: &mut ParamStore, name: &str, cfg: &StructureConfig) -> Result<Self> {
        Ok(Self {
            queries: ps.param(
                &format!("{name}.queries"),
                &[cfg.n_q, cfg.d_q],
                Init::Normal(0.02),
            )?,
        })
    }
}

/// Structure latent `z_S` of shape `(n_q, d_s, h_s, w_s)` (batched as
/// `(B, n_q, d_s, h_s, w_s)` internally).
#[derive(Clone)]
pub struct StructureLatent {
    pub data: Tensor,
}

/// One pre-norm Q-Former block: cross-attention (queries <- sequence),
/// self-attention over queries, MLP.
struct QFormerBlock {
    ln_q_cross: LayerNorm,
    ln_kv: LayerNorm,
    cross: Attention,
    ln_q_self: LayerNorm,
    selfattn: Attention,
    ln_m: LayerNorm,
    mlp: Mlp,
}

impl QFormerBlock {
    fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            ln_q_cross: LayerNorm::new(ps, &format!("{name}.ln_q_cross"), dim)?,
            ln_kv: LayerNorm::new(ps, &format!("{name}.ln_kv"), dim)?,
            cross: Attention::new(ps, &format!("{name}.cross"), dim, heads)?,
            ln_q_self: LayerNorm::new(ps, &format!("{name}.ln_q_self"), dim)?,
            selfattn: Attention::new(ps, &format!("{name}.self"), dim, heads)?,
            ln_m: LayerNorm::new(ps, &format!("{name}.ln_m"), dim)?,
            mlp: Mlp::new(ps, &format!("{name}.mlp"), dim, dim * 4)?,
        })
    }

    fn forward(&self, q: &Tensor, kv: &Tensor) -> Result<Tensor> {
        let y = self
            .cross
            .forward(&self.ln_q_cross.forward(q)?, &self.ln_kv.forward(kv)?, None)?;
        let q = (q + y)?;
        let n = self.ln_q_self.forward(&q)?;
        let y = self.selfattn.forward(&n, &n, None)?;
        let q = (q + y)?;
        let y = self.mlp.forward(&self.ln_m.forward(&q)?)?;
        Ok((q + y)?)
    }
}

/// Shared stage 2: spatial stride-2 convs + 1x1 bottleneck `d_q -> d_s`.
struct SpatialSqueeze {
    downs: Vec<Conv2d>,
    bottleneck: Conv2d,
}

impl SpatialSqueeze {
    fn new(ps: &mut ParamStore, name: &str, cfg: &StructureConfig) -> Result<Self> {
        let downs = (0..cfg.n_down)
            .map(|i| Conv2d::new(ps, &format!("{name}.down{i}"), cfg.d_q, cfg.d_q, 3, 2, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            downs,
            bottleneck: Conv2d::new(ps, &format!("{name}.bottleneck"), cfg.d_q, cfg.d_s, 1, 1, 0)?,
        })
    }

    /// `(N, d_q, h, w)` -> `(N, d_s, h_s, w_s)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut x = x.clone();
        for conv in &self.downs {
            x = conv.forward(&x)?.gelu_erf()?;
        }
        self.bottleneck.forward(&x)
    }
}

/// Extraction function producing the structure latent from the core latent.
pub struct StructureEncoder {
    cfg: StructureConfig,
    mode: StructureMode,
    // Q-Former path.
    in_mlp: Option<Mlp>,
    queries: Option<QueryBank>,
    blocks: Vec<QFormerBlock>,
    ln_final: Option<LayerNorm>,
    // Conv-ablation path.
    conv_temporal: Option<Linear>,
    conv_mlp: Option<Mlp>,
    // Hidden-ablation path.
    hidden_in: Option<Linear>,
    hidden_out: Option<Linear>,
    squeeze: SpatialSqueeze,
    latent_f: usize,
    latent_h: usize,
    latent_w: usize,
    latent_c: usize,
}

impl StructureEncoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &StructureConfig,
        latent_c: usize,
        latent_f: usize,
        latent_h: usize,
        latent_w: usize,
    ) -> Result<Self> {
        let violations = cfg.validate(latent_f, latent_h, latent_w);
        if !violations.is_empty() {
            return Err(Error::ConfigViolations(violations));
        }
        let mut enc = Self {
            cfg: cfg.clone(),
            mode: cfg.mode,
            in_mlp: None,
            queries: None,
            blocks: Vec::new(),
            ln_final: None,
            conv_temporal: None,
            conv_mlp: None,
            hidden_in: None,
            hidden_out: None,
            squeeze: SpatialSqueeze::new(ps, &format!("{name}.squeeze"), cfg)?,
            latent_f,
            latent_h,
            latent_w,
            latent_c,
        };
        match cfg.mode {
            StructureMode::Qformer => {
                enc.in_mlp = Some(Mlp::new_proj(
                    ps,
                    &format!("{name}.in_mlp"),
                    latent_c,
                    cfg.d_q,
                    cfg.d_q,
                )?);
                enc.queries = Some(QueryBank::new(ps, &format!("{name}"), cfg)?);
                enc.blocks = (0..cfg.qformer_layers)
                    .map(|i| {
                        QFormerBlock::new(
                            ps,
                            &format!("{name}.qformer{i}"),
                            cfg.d_q,
                            cfg.qformer_heads,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                enc.ln_final = Some(LayerNorm::new(ps, &format!("{name}.ln_final"), cfg.d_q)?);
            }
            StructureMode::ConvAblation => {
                // Strided temporal conv realized as frame grouping + linear:
                // kernel = stride = f / n_q.
                let stride = latent_f / cfg.n_q;
                enc.conv_temporal = Some(Linear::with_init(
                    ps,
                    &format!("{name}.temporal_conv"),
                    latent_c * stride,
                    cfg.d_q,
                    Init::KaimingNormal {
                        fan_in: latent_c * stride,
                    },
                    true,
                )?);
                enc.conv_mlp = Some(Mlp::new(ps, &format!("{name}.conv_mlp"), cfg.d_q, cfg.d_q * 2)?);
            }
            StructureMode::HiddenAblation => {
                let chw = latent_c * latent_h * latent_w;
                enc.hidden_in = Some(Linear::with_init(
                    ps,
                    &format!("{name}.hidden_in"),
                    chw,
                    cfg.d_q,
                    Init::KaimingNormal { fan_in: chw },
                    true,
                )?);
                enc.queries = Some(QueryBank::new(ps, &format!("{name}"), cfg)?);
                enc.blocks = (0..cfg.qformer_layers)
                    .map(|i| {
                        QFormerBlock::new(
                            ps,
                            &format!("{name}.qformer{i}"),
                            cfg.d_q,
                            cfg.qformer_heads,
                        )
                    })
                    .collect::<Result<Vec<_>>>()?;
                enc.ln_final = Some(LayerNorm::new(ps, &format!("{name}.ln_final"), cfg.d_q)?);
                enc.hidden_out = Some(Linear::new(
                    ps,
                    &format!("{name}.hidden_out"),
                    cfg.d_q,
                    cfg.d_q * latent_h * latent_w,
                )?);
            }
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

    /// Stage 1 only: `(B, c, f, h, w)` -> `(B*h*w, n_q, d_q)`; exposed for
    /// the spatial-locality diagnostics.
    pub fn qformer_tokens(&self, z: &Tensor) -> Result<Tensor> {
        let (b, c, f, h, w) = self.check_input(z)?;
        let in_mlp = self
            .in_mlp
            .as_ref()
            .ok_or_else(|| Error::Contract("qformer_tokens requires qformer mode".into()))?;
        // (B, c, f, h, w) -> (B*h*w, f, c), row-major over (h, w).
        let seq = z
            .permute((0, 3, 4, 2, 1))?
            .contiguous()?
            .reshape((b * h * w, f, c))?;
        let kv = in_mlp.forward(&seq)?;
        let queries = &self.queries.as_ref().unwrap().queries;
        let mut q = queries
            .reshape((1, self.cfg.n_q, self.cfg.d_q))?
            .broadcast_as((b * h * w, self.cfg.n_q, self.cfg.d_q))?
            .contiguous()?;
        for blk in &self.blocks {
            q = blk.forward(&q, &kv)?;
        }
        self.ln_final.as_ref().unwrap().forward(&q).map_err(Into::into)
    }

    /// Full extraction: `(B, c, f, h, w)` -> `(B, n_q, d_s, h_s, w_s)`.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let (b, c, f, h, w) = self.check_input(z)?;
        let nq = self.cfg.n_q;
        let dq = self.cfg.d_q;
        let pre = match self.mode {
            StructureMode::Qformer => {
                let tokens = self.qformer_tokens(z)?; // (B*h*w, n_q, d_q)
                tokens
                    .reshape((b, h, w, nq, dq))?
                    .permute((0, 3, 4, 1, 2))?
                    .contiguous()?
            }
            StructureMode::ConvAblation => {
                let stride = f / nq;
                // Group frames: (B, h, w, n_q, stride*c) -> linear -> MLP.
                let grouped = z
                    .permute((0, 3, 4, 2, 1))?
                    .contiguous()?
                    .reshape((b, h, w, nq, stride * c))?;
                let t = self.conv_temporal.as_ref().unwrap().forward(&grouped)?;
                let t = self.conv_mlp.as_ref().unwrap().forward(&t.gelu_erf()?)?;
                t.permute((0, 3, 4, 1, 2))?.contiguous()? // (B, n_q, d_q, h, w)
            }
            StructureMode::HiddenAblation => {
                // Fold (c, h, w) into the hidden axis: per-frame tokens.
                let seq = z
                    .permute((0, 2, 1, 3, 4))?
                    .contiguous()?
                    .reshape((b, f, c * h * w))?;
                let kv = self.hidden_in.as_ref().unwrap().forward(&seq)?;
                let queries = &self.queries.as_ref().unwrap().queries;
                let mut q = queries
                    .reshape((1, nq, dq))?
                    .broadcast_as((b, nq, dq))?
                    .contiguous()?;
                for blk in &self.blocks {
                    q = blk.forward(&q, &kv)?;
                }
                let q = self.ln_final.as_ref().unwrap().forward(&q)?;
                let out = self.hidden_out.as_ref().unwrap().forward(&q)?; // (B, n_q, d_q*h*w)
                out.reshape((b, nq, dq, h, w))?
            }
        };
        // Stage 2 on (B*n_q, d_q, h, w) images.
        let imgs = pre.reshape((b * nq, dq, h, w))?;
        let out = self.squeeze.forward(&imgs)?;
        let (hs, ws) = (h >> self.cfg.n_down, w >> self.cfg.n_down);
        Ok(out.reshape((b, nq, self.cfg.d_s, hs, ws))?)
    }
}

/// Decoding head `H_S`: upsample the spatial grid, lift channels to `c`,
/// and map the token axis `n_q -> f` with one learned linear layer applied
/// identically at every channel/spatial position.
pub struct StructureDecoder {
    cfg: StructureConfig,
    chan_in: Conv2d,
    ups: Vec<Conv2d>,
    chan_out: Conv2d,
    token_map: Linear,
    latent_c: usize,
    latent_f: usize,
    latent_h: usize,
    latent_w: usize,
}

impl StructureDecoder {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        cfg: &StructureConfig,
        latent_c: usize,
        latent_f: usize,
        latent_h: usize,
        latent_w: usize,
    ) -> Result<Self> {
        let ups = (0..cfg.n_down)
            .map(|i| Conv2d::new(ps, &format!("{name}.up{i}"), cfg.d_q, cfg.d_q, 3, 1, 1))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg: cfg.clone(),
            chan_in: Conv2d::new(ps, &format!("{name}.chan_in"), cfg.d_s, cfg.d_q, 1, 1, 0)?,
            ups,
            chan_out: Conv2d::new(ps, &format!("{name}.chan_out"), cfg.d_q, latent_c, 1, 1, 0)?,
            token_map: Linear::new(ps, &format!("{name}.token_map"), cfg.n_q, latent_f)?,
            latent_c,
            latent_f,
            latent_h,
            latent_w,
        })
    }

    /// `z_s`: `(B, n_q, d_s, h_s, w_s)` -> `u_S`: `(B, c, f, h, w)`.
    pub fn forward(&self, z_s: &Tensor) -> Result<Tensor> {
        let (b, nq, ds, hs, ws) = z_s.dims5()?;
        let expect = self.cfg.latent_dims(self.latent_h, self.latent_w);
        if (nq, ds, hs, ws) != expect {
            return Err(Error::Shape(format!(
                "structure latent ({nq},{ds},{hs},{ws}) does not match decoder built for {expect:?}"
            )));
        }
        let mut x = self.chan_in.forward(&z_s.reshape((b * nq, ds, hs, ws))?)?;
        for conv in &self.ups {
            let (_, _, ch, cw) = x.dims4()?;
            x = x.upsample_nearest2d(ch * 2, cw * 2)?;
            x = conv.forward(&x)?.gelu_erf()?;
        }
        let x = self.chan_out.forward(&x)?; // (B*n_q, c, h, w)
        let x = x
            .reshape((b, nq, self.latent_c, self.latent_h, self.latent_w))?
            .permute((0, 2, 3, 4, 1))?
            .contiguous()?; // (B, c, h, w, n_q)
        let x = self.token_map.forward(&x)?; // (B, c, h, w, f)
        Ok(x.permute((0, 1, 4, 2, 3))?.contiguous()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device};
    use rand::SeedableRng;

    fn randn(seed: u64, dims: &[usize]) -> Tensor {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        crate::nn::randn_from(&mut rng, dims, DType::F32, &Device::Cpu).unwrap()
    }

    fn flat(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1::<f32>().unwrap()
    }

    #[test]
    fn desk_extraction_shapes() {
        let mut ps = ParamStore::new(0, DType::F32);
        let cfg = StructureConfig::desk();
        let enc = StructureEncoder::new(&mut ps, "s", &cfg, 64, 8, 8, 8).unwrap();
        let z = randn(1, &[2, 64, 8, 8, 8]);
        let zs = enc.forward(&z).unwrap();
        assert_eq!(zs.dims(), &[2, 4, 4, 4, 4]);
        let tokens = enc.qformer_tokens(&z.narrow(0, 0, 1).unwrap()).unwrap();
        assert_eq!(tokens.dims(), &[64, 4, 32]);
    }

    #[test]
    fn rejects_nq_larger_than_frames() {
        let mut ps = ParamStore::new(0, DType::F32);
        let mut cfg = StructureConfig::desk();
        cfg.n_q = 9;
        assert!(StructureEncoder::new(&mut ps, "s", &cfg, 64, 8, 8, 8).is_err());
    }

    #[test]
    fn stage1_is_spatially_local() {
        // Changing z only at spatial cell (i, j) may change only batch row
        // i*w + j of the stage-1 output.
        let mut ps = ParamStore::new(3, DType::F32);
        let cfg = StructureConfig::desk();
        let enc = StructureEncoder::new(&mut ps, "s", &cfg, 64, 8, 8, 8).unwrap();
        let z = randn(7, &[1, 64, 8, 8, 8]);
        let base = enc.qformer_tokens(&z).unwrap();

        let (i, j, w) = (2usize, 5usize, 8usize);
        let mut vals = flat(&z);
        // Perturb every (c, f) at cell (i, j): index layout (c, f, h, w).
        for c in 0..64 {
            for f in 0..8 {
                vals[((c * 8 + f) * 8 + i) * 8 + j] += 0.75;
            }
        }
        let z2 = Tensor::from_vec(vals, (1, 64, 8, 8, 8), &Device::Cpu).unwrap();
        let pert = enc.qformer_tokens(&z2).unwrap();

        let row = i * w + j;
        let nb = flat(&base);
        let np = flat(&pert);
        let row_len = 4 * 32;
        let mut changed_rows = Vec::new();
        for r in 0..64 {
            let diff = (0..row_len)
                .map(|k| (nb[r * row_len + k] - np[r * row_len + k]).abs())
                .fold(0f32, f32::max);
            if r == row {
                assert!(diff > 0.0, "perturbed row unchanged");
            } else {
                assert!(diff <= 1e-6, "off-target row {r} changed by {diff}");
            }
            if diff > 1e-6 {
                changed_rows.push(r);
            }
        }
        assert_eq!(changed_rows, vec![row]);
    }

    #[test]
    fn stage1_is_permutation_equivariant() {
        // Swapping two spatial cells of z swaps the matching batch rows.
        let mut ps = ParamStore::new(4, DType::F32);
        let cfg = StructureConfig::desk();
        let enc = StructureEncoder::new(&mut ps, "s", &cfg, 64, 8, 8, 8).unwrap();
        let z = randn(8, &[1, 64, 8, 8, 8]);
        let base = enc.qformer_tokens(&z).unwrap();

        let (a, b) = ((1usize, 2usize), (6usize, 3usize));
        let mut vals = flat(&z);
        for c in 0..64 {
            for f in 0..8 {
                let ia = ((c * 8 + f) * 8 + a.0) * 8 + a.1;
                let ib = ((c * 8 + f) * 8 + b.0) * 8 + b.1;
                vals.swap(ia, ib);
            }
        }
        let z2 = Tensor::from_vec(vals, (1, 64, 8, 8, 8), &Device::Cpu).unwrap();
        let pert = enc.qformer_tokens(&z2).unwrap();

        let nb = flat(&base);
        let np = flat(&pert);
        let row_len = 4 * 32;
        let (ra, rb) = (a.0 * 8 + a.1, b.0 * 8 + b.1);
        for k in 0..row_len {
            assert_eq!(nb[ra * row_len + k], np[rb * row_len + k]);
            assert_eq!(nb[rb * row_len + k], np[ra * row_len + k]);
        }
    }

    #[test]
    fn conv_ablation_matches_contract() {
        let mut ps = ParamStore::new(5, DType::F32);
        let mut cfg = StructureConfig::desk();
        cfg.mode = StructureMode::ConvAblation;
        let enc = StructureEncoder::new(&mut ps, "s", &cfg, 64, 8, 8, 8).unwrap();
        let z = randn(9, &[1, 64, 8, 8, 8]);
        let zs = enc.forward(&z).unwrap();
        assert_eq!(zs.dims(), &[1, 4, 4, 4, 4]);
    }

    #[test]
    fn hidden_ablation_shape_parity_and_nonlocality() {
        let mut ps_q = ParamStore::new(6, DType::F32);
        let mut ps_h = ParamStore::new(6, DType::F32);
        let cfg_q = StructureConfig::desk();
        let mut cfg_h = cfg_q.clone();
        cfg_h.mode = StructureMode::HiddenAblation;
        let enc_q = StructureEncoder::new(&mut ps_q, "s", &cfg_q, 64, 8, 8, 8).unwrap();
        let enc_h = StructureEncoder::new(&mut ps_h, "s", &cfg_h, 64, 8, 8, 8).unwrap();

        let z = randn(10, &[1, 64, 8, 8, 8]);
        assert_eq!(enc_q.forward(&z).unwrap().dims(), enc_h.forward(&z).unwrap().dims());

        // Hidden variant has strictly more parameters.
        assert!(
            ps_h.param_count() > ps_q.param_count(),
            "hidden {} <= batch-merged {}",
            ps_h.param_count(),
            ps_q.param_count()
        );

        // Locality is intentionally broken: a single-cell change reaches
        // (nearly) the whole latent.
        let base = flat(&enc_h.forward(&z).unwrap());
        let mut vals = flat(&z);
        for c in 0..64 {
            for f in 0..8 {
                vals[((c * 8 + f) * 8 + 3) * 8 + 3] += 0.75;
            }
        }
        let z2 = Tensor::from_vec(vals, (1, 64, 8, 8, 8), &Device::Cpu).unwrap();
        let pert = flat(&enc_h.forward(&z2).unwrap());
        let changed = base
            .iter()
            .zip(&pert)
            .filter(|(a, b)| (**a - **b).abs() > 1e-6)
            .count();
        assert!(
            changed > base.len() / 2,
            "only {changed}/{} latent cells changed",
            base.len()
        );
    }

    #[test]
    fn decoder_shapes_and_zero_final_layer() {
        let mut ps = ParamStore::new(7, DType::F32);
        let cfg = StructureConfig::desk();
        let dec = StructureDecoder::new(&mut ps, "sd", &cfg, 64, 8, 8, 8).unwrap();
        let zs = randn(11, &[1, 4, 4, 4, 4]);
        let u = dec.forward(&zs).unwrap();
        assert_eq!(u.dims(), &[1, 64, 8, 8, 8]);

        // Zeroing the final token map forces u_S = 0 regardless of input.
        ps.set(
            "sd.token_map.weight",
            &Tensor::zeros((8, 4), DType::F32, &Device::Cpu).unwrap(),
        )
        .unwrap();
        ps.set(
            "sd.token_map.bias",
            &Tensor::zeros(8, DType::F32, &Device::Cpu).unwrap(),
        )
        .unwrap();
        let u0 = dec.forward(&zs).unwrap();
        assert!(flat(&u0).iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decoder_two_stage_shape() {
        // (n_q, d_s, h_s, w_s) = (8, 2, 2, 2) with n_down = 2 lands on
        // (64, 8, 8, 8).
        let mut ps = ParamStore::new(8, DType::F32);
        let cfg = StructureConfig {
            n_q: 8,
            d_q: 16,
            qformer_layers: 1,
            qformer_heads: 2,
            d_s: 2,
            n_down: 2,
            mode: StructureMode::Qformer,
        };
        let dec = StructureDecoder::new(&mut ps, "sd", &cfg, 64, 8, 8, 8).unwrap();
        let zs = randn(12, &[1, 8, 2, 2, 2]);
        assert_eq!(dec.forward(&zs).unwrap().dims(), &[1, 64, 8, 8, 8]);
    }

    #[test]
    fn query_bank_receives_gradient() {
        let mut ps = ParamStore::new(9, DType::F32);
        let cfg = StructureConfig::desk();
        let enc = StructureEncoder::new(&mut ps, "s", &cfg, 64, 8, 8, 8).unwrap();
        let z = randn(13, &[1, 64, 8, 8, 8]);
        let loss = enc.forward(&z).unwrap().sqr().unwrap().mean_all().unwrap();
        let grads = loss.backward().unwrap();
        let q = ps.get("s.queries").unwrap();
        let g = grads.get(&q).expect("queries got no gradient");
        let norm = g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap();
        assert!(norm > 0.0, "query gradient identically zero");
    }
}
