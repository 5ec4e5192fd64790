//! Full two-latent autoencoder: backbone encoder, branch extractors with
//! their posterior heads, branch decoding heads, fusion, and the backbone
//! decoder. Also the matched-budget single-latent variant used by the
//! ablation harness, and checkpoint save/load.

use candle_core::{DType, Tensor};

use crate::backbone::{BackboneConfig, SpaceTimeDecoder, SpaceTimeEncoder};
use crate::config::RunConfig;
use crate::dynamics::{DynamicsDecoder, DynamicsEncoder};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ParamStore};
use crate::structure::{StructureDecoder, StructureEncoder};
use crate::vae::{reparameterize, GaussianPosterior, PosteriorHead};
use crate::video::VideoClip;

/// How latents are drawn from their posteriors.
pub enum LatentSampling<'a> {
    /// Posterior mean (inference).
    Mean,
    /// Reparameterized samples with caller-provided standard-normal noise
    /// matching each posterior's shape.
    Sample {
        noise_s: &'a Tensor,
        noise_d: &'a Tensor,
    },
}

/// Posteriors over both branch latents for one batch.
pub struct LatentPosteriors {
    pub structure: GaussianPosterior,
    pub dynamics: GaussianPosterior,
}

pub struct TwinAutoencoder {
    pub config: RunConfig,
    encoder: SpaceTimeEncoder,
    structure_enc: StructureEncoder,
    dynamics_enc: DynamicsEncoder,
    post_s: PosteriorHead,
    post_d: PosteriorHead,
    structure_dec: StructureDecoder,
    dynamics_dec: DynamicsDecoder,
    decoder: SpaceTimeDecoder,
    params: ParamStore,
}

impl TwinAutoencoder {
    pub fn new(config: &RunConfig, seed: u64, dtype: DType) -> Result<Self> {
        let config = config.clone().validated()?;
        let mut ps = ParamStore::new(seed, dtype);
        Ok(Self {
            encoder: Self::build_encoder(&config, &mut ps)?,
            structure_enc: Self::build_structure_enc(&config, &mut ps)?,
            dynamics_enc: Self::build_dynamics_enc(&config, &mut ps)?,
            post_s: PosteriorHead::new(&mut ps, "posterior_s", config.structure.d_s)?,
            post_d: PosteriorHead::new(&mut ps, "posterior_d", config.dynamics.d_d)?,
            structure_dec: Self::build_structure_dec(&config, &mut ps)?,
            dynamics_dec: Self::build_dynamics_dec(&config, &mut ps)?,
            decoder: Self::build_decoder(&config, &mut ps)?,
            params: ps,
            config,
        })
    }

    fn build_encoder(cfg: &RunConfig, ps: &mut ParamStore) -> Result<SpaceTimeEncoder> {
        SpaceTimeEncoder::new(
            ps,
            "encoder",
            &cfg.backbone,
            cfg.clip.frames,
            cfg.clip.height,
            cfg.clip.width,
        )
    }

    fn build_decoder(cfg: &RunConfig, ps: &mut ParamStore) -> Result<SpaceTimeDecoder> {
        SpaceTimeDecoder::new(
            ps,
            "decoder",
            &cfg.backbone,
            cfg.clip.frames,
            cfg.clip.height,
            cfg.clip.width,
        )
    }

    fn build_structure_enc(cfg: &RunConfig, ps: &mut ParamStore) -> Result<StructureEncoder> {
        let (c, f, h, w) = cfg.core_latent_dims();
        StructureEncoder::new(ps, "structure_enc", &cfg.structure, c, f, h, w)
    }

    fn build_structure_dec(cfg: &RunConfig, ps: &mut ParamStore) -> Result<StructureDecoder> {
        let (c, f, h, w) = cfg.core_latent_dims();
        StructureDecoder::new(ps, "structure_dec", &cfg.structure, c, f, h, w)
    }

    fn build_dynamics_enc(cfg: &RunConfig, ps: &mut ParamStore) -> Result<DynamicsEncoder> {
        let (c, f, h, w) = cfg.core_latent_dims();
        DynamicsEncoder::new(ps, "dynamics_enc", &cfg.dynamics, c, f, h, w)
    }

    fn build_dynamics_dec(cfg: &RunConfig, ps: &mut ParamStore) -> Result<DynamicsDecoder> {
        let (c, f, h, w) = cfg.core_latent_dims();
        DynamicsDecoder::new(ps, "dynamics_dec", &cfg.dynamics, c, f, h, w)
    }

    /// Analytic parameter manifest for this architecture (no allocation).
    pub fn shape_manifest(config: &RunConfig) -> Result<Vec<(String, Vec<usize>)>> {
        let config = config.clone().validated()?;
        let mut ps = ParamStore::shape_only();
        Self::build_encoder(&config, &mut ps)?;
        Self::build_structure_enc(&config, &mut ps)?;
        Self::build_dynamics_enc(&config, &mut ps)?;
        crate::vae::posterior_head_shape_only(&mut ps, "posterior_s", config.structure.d_s)?;
        crate::vae::posterior_head_shape_only(&mut ps, "posterior_d", config.dynamics.d_d)?;
        Self::build_structure_dec(&config, &mut ps)?;
        Self::build_dynamics_dec(&config, &mut ps)?;
        Self::build_decoder(&config, &mut ps)?;
        Ok(ps.manifest().to_vec())
    }

    pub fn param_count(config: &RunConfig) -> Result<usize> {
        Ok(Self::shape_manifest(config)?
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum())
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn dtype(&self) -> DType {
        self.params.dtype()
    }

    /// Dynamics split point `w_d`.
    pub fn split(&self) -> usize {
        self.config.dynamics_latent_dims().3
    }

    fn clip_tensor(&self, clip: &VideoClip) -> Result<Tensor> {
        let (c, f, h, w) = clip.shape();
        let expect = (
            self.config.clip.channels,
            self.config.clip.frames,
            self.config.clip.height,
            self.config.clip.width,
        );
        if (c, f, h, w) != expect {
            return Err(Error::Shape(format!(
                "clip ({c},{f},{h},{w}) does not match model built for {expect:?}"
            )));
        }
        Ok(clip
            .data()
            .to_dtype(self.dtype())?
            .reshape((1, c, f, h, w))?)
    }

    /// Backbone encode: `(B, C, F, H, W)` -> `(B, c, f, h, w)`.
    pub fn encode_core(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    /// Branch posteriors from a core latent.
    pub fn posteriors(&self, z: &Tensor) -> Result<LatentPosteriors> {
        let s_feat = self.structure_enc.forward(z)?; // (B, n_q, d_s, h_s, w_s)
        let (b, nq, ds, hs, ws) = s_feat.dims5()?;
        let s_post = self.post_s.forward(&s_feat.reshape((b * nq, ds, hs, ws))?)?;
        let structure = GaussianPosterior {
            mu: s_post.mu.reshape((b, nq, ds, hs, ws))?,
            logvar: s_post.logvar.reshape((b, nq, ds, hs, ws))?,
        };

        let d_feat = self.dynamics_enc.forward(z)?; // (B, f, d_d, L)
        let (b2, f, dd, l) = d_feat.dims4()?;
        let d_post = self.post_d.forward(&d_feat.reshape((b2 * f, dd, l, 1))?)?;
        let dynamics = GaussianPosterior {
            mu: d_post.mu.reshape((b2, f, dd, l))?,
            logvar: d_post.logvar.reshape((b2, f, dd, l))?,
        };
        Ok(LatentPosteriors {
            structure,
            dynamics,
        })
    }

    /// Draw `(z_S, z_D)` from the posteriors of `x`.
    pub fn encode_latents(&self, x: &Tensor, sampling: LatentSampling) -> Result<(Tensor, Tensor)> {
        let z = self.encode_core(x)?;
        let posts = self.posteriors(&z)?;
        match sampling {
            LatentSampling::Mean => Ok((posts.structure.mu, posts.dynamics.mu)),
            LatentSampling::Sample { noise_s, noise_d } => Ok((
                reparameterize(&posts.structure, noise_s, true)?,
                reparameterize(&posts.dynamics, noise_d, true)?,
            )),
        }
    }

    /// Aligned branch outputs `(u_S, u_Dh, u_Dw)`.
    pub fn align(&self, z_s: &Tensor, z_d: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let u_s = self.structure_dec.forward(z_s)?;
        let (u_dh, u_dw) = self.dynamics_dec.forward(z_d, self.split())?;
        Ok((u_s, u_dh, u_dw))
    }

    /// Decode latents to a clip tensor `(B, C, F, H, W)`.
    pub fn decode_latents(&self, z_s: &Tensor, z_d: &Tensor) -> Result<Tensor> {
        let (u_s, u_dh, u_dw) = self.align(z_s, z_d)?;
        crate::backbone::fuse_and_decode(&self.decoder, &u_s, &u_dh, &u_dw)
    }

    /// Decode with the other branch's aligned contribution zeroed.
    pub fn decode_single_branch(&self, z_s: &Tensor, z_d: &Tensor, which: BranchSelect) -> Result<Tensor> {
        let (u_s, u_dh, u_dw) = self.align(z_s, z_d)?;
        let zero = u_s.zeros_like()?;
        match which {
            BranchSelect::Structure => {
                crate::backbone::fuse_and_decode(&self.decoder, &u_s, &zero, &zero)
            }
            BranchSelect::Dynamics => {
                crate::backbone::fuse_and_decode(&self.decoder, &zero, &u_dh, &u_dw)
            }
        }
    }

    /// Encode one clip at the posterior mean; returns unbatched latents.
    pub fn encode_clip(&self, clip: &VideoClip) -> Result<(Tensor, Tensor)> {
        let x = self.clip_tensor(clip)?;
        let (z_s, z_d) = self.encode_latents(&x, LatentSampling::Mean)?;
        Ok((
            z_s.squeeze(0)?.to_dtype(DType::F32)?,
            z_d.squeeze(0)?.to_dtype(DType::F32)?,
        ))
    }

    /// Decode unbatched latents back to a clip.
    pub fn decode_clip(&self, z_s: &Tensor, z_d: &Tensor, id: &str) -> Result<VideoClip> {
        let z_s = z_s.to_dtype(self.dtype())?.unsqueeze(0)?;
        let z_d = z_d.to_dtype(self.dtype())?.unsqueeze(0)?;
        let x = self.decode_latents(&z_s, &z_d)?;
        VideoClip::new(
            x.squeeze(0)?.to_dtype(DType::F32)?,
            self.config.clip.fps,
            id,
        )
    }

    /// Mean-latent reconstruction of a clip.
    pub fn reconstruct_clip(&self, clip: &VideoClip) -> Result<VideoClip> {
        let (z_s, z_d) = self.encode_clip(clip)?;
        self.decode_clip(&z_s, &z_d, &format!("{}-recon", clip.id))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BranchSelect {
    Structure,
    Dynamics,
}

impl std::str::FromStr for BranchSelect {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "structure" => Ok(Self::Structure),
            "dynamics" => Ok(Self::Dynamics),
            other => Err(Error::Config(format!(
                "branch must be 'structure' or 'dynamics', got '{other}'"
            ))),
        }
    }
}

/// Single-latent ablation: the core latent is squeezed through one conv
/// bottleneck whose element count matches the decoupled budget, then decoded
/// by the same backbone decoder.
pub struct SingleLatentAutoencoder {
    pub config: RunConfig,
    pub bottleneck_channels: usize,
    pub n_down: usize,
    encoder: SpaceTimeEncoder,
    downs: Vec<Conv2d>,
    to_latent: Conv2d,
    post: PosteriorHead,
    from_latent: Conv2d,
    ups: Vec<Conv2d>,
    decoder: SpaceTimeDecoder,
    params: ParamStore,
}

/// Channel count so that `f * d * (h/2^n) * (w/2^n)` matches
/// `target_elems` within `tol` (relative); errors when impossible.
pub fn matched_budget_channels(
    target_elems: usize,
    f: usize,
    h: usize,
    w: usize,
    n_down: usize,
    tol: f64,
) -> Result<usize> {
    let div = 1usize << n_down;
    if h % div != 0 || w % div != 0 {
        return Err(Error::Config(format!(
            "latent grid {h}x{w} not divisible by 2^{n_down}"
        )));
    }
    let cell = f * (h / div) * (w / div);
    let d = ((target_elems as f64) / cell as f64).round().max(1.0) as usize;
    let got = d * cell;
    let rel = (got as f64 - target_elems as f64).abs() / target_elems as f64;
    if rel > tol {
        return Err(Error::Config(format!(
            "cannot match budget {target_elems} with grid f={f} {h}x{w}/{div}: closest {got} ({rel:.3} off)"
        )));
    }
    Ok(d)
}

impl SingleLatentAutoencoder {
    /// `n_down` defaults to the structure branch's; the bottleneck width is
    /// derived from the decoupled element budget (2% tolerance).
    pub fn new(config: &RunConfig, seed: u64, dtype: DType) -> Result<Self> {
        let config = config.clone().validated()?;
        let (c, f, h, w) = config.core_latent_dims();
        let n_down = config.structure.n_down.max(1);
        let d = matched_budget_channels(config.latent_element_count(), f, h, w, n_down, 0.02)?;
        let mut ps = ParamStore::new(seed, dtype);
        let encoder = SpaceTimeEncoder::new(
            &mut ps,
            "encoder",
            &config.backbone,
            config.clip.frames,
            config.clip.height,
            config.clip.width,
        )?;
        let mut downs = Vec::new();
        for i in 0..n_down {
            downs.push(Conv2d::new(&mut ps, &format!("single.down{i}"), c, c, 3, 2, 1)?);
        }
        let to_latent = Conv2d::new(&mut ps, "single.to_latent", c, d, 1, 1, 0)?;
        let post = PosteriorHead::new(&mut ps, "single.posterior", d)?;
        let from_latent = Conv2d::new(&mut ps, "single.from_latent", d, c, 1, 1, 0)?;
        let mut ups = Vec::new();
        for i in 0..n_down {
            ups.push(Conv2d::new(&mut ps, &format!("single.up{i}"), c, c, 3, 1, 1)?);
        }
        let decoder = SpaceTimeDecoder::new(
            &mut ps,
            "decoder",
            &config.backbone,
            config.clip.frames,
            config.clip.height,
            config.clip.width,
        )?;
        Ok(Self {
            config,
            bottleneck_channels: d,
            n_down,
            encoder,
            downs,
            to_latent,
            post,
            from_latent,
            ups,
            decoder,
            params: ps,
        })
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Latent element count per clip.
    pub fn latent_element_count(&self) -> usize {
        let (_, f, h, w) = self.config.core_latent_dims();
        let div = 1usize << self.n_down;
        f * self.bottleneck_channels * (h / div) * (w / div)
    }

    /// Posterior over the single latent `(B, f, d, h', w')`.
    pub fn posterior(&self, x: &Tensor) -> Result<GaussianPosterior> {
        let z = self.encoder.forward(x)?;
        let (b, c, f, h, w) = z.dims5()?;
        let mut cur = z.transpose(1, 2)?.contiguous()?.reshape((b * f, c, h, w))?;
        for conv in &self.downs {
            cur = conv.forward(&cur)?.gelu_erf()?;
        }
        let feat = self.to_latent.forward(&cur)?;
        let (_, d, hh, ww) = feat.dims4()?;
        let post = self.post.forward(&feat)?;
        Ok(GaussianPosterior {
            mu: post.mu.reshape((b, f, d, hh, ww))?,
            logvar: post.logvar.reshape((b, f, d, hh, ww))?,
        })
    }

    /// Decode a single latent `(B, f, d, h', w')` to a clip tensor.
    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        let (b, f, d, hh, ww) = latent.dims5()?;
        let mut cur = self
            .from_latent
            .forward(&latent.reshape((b * f, d, hh, ww))?)?;
        for conv in &self.ups {
            let (_, _, ch, cw) = cur.dims4()?;
            cur = cur.upsample_nearest2d(ch * 2, cw * 2)?;
            cur = conv.forward(&cur)?.gelu_erf()?;
        }
        let (_, c, h, w) = cur.dims4()?;
        let u = cur
            .reshape((b, f, c, h, w))?
            .transpose(1, 2)?
            .contiguous()?;
        self.decoder.forward(&u)
    }
}
