//! Variational objective: reparameterized posteriors over both latents and
//! the four-term training loss (L1 reconstruction, perceptual, hinge GAN,
//! KL against the standard Gaussian).
//!
//! The two branches get independent `(mu, logvar)` 1x1-conv heads. At
//! training time latents are sampled as `mu + exp(logvar/2) * eps`; at
//! evaluation time the mean is used directly. `logvar` is clamped to
//! `[-30, 20]`.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore};

pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 20.0;

/// Diagonal Gaussian `(mu, logvar)` over a latent tensor.
#[derive(Clone)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub logvar: Tensor,
}

impl GaussianPosterior {
    /// Clamps `logvar` into the stable range.
    pub fn new(mu: Tensor, logvar: Tensor) -> Result<Self> {
        if mu.dims() != logvar.dims() {
            return Err(Error::Shape(format!(
                "mu {:?} and logvar {:?} disagree",
                mu.dims(),
                logvar.dims()
            )));
        }
        Ok(Self {
            mu,
            logvar: logvar.clamp(LOGVAR_MIN, LOGVAR_MAX)?,
        })
    }

    pub fn sigma(&self) -> Result<Tensor> {
        Ok((self.logvar.clone() * 0.5)?.exp()?)
    }
}

/// `mu + sigma * noise` in train mode, `mu` in eval mode.
pub fn reparameterize(post: &GaussianPosterior, noise: &Tensor, train_mode: bool) -> Result<Tensor> {
    if !train_mode {
        return Ok(post.mu.clone());
    }
    if noise.dims() != post.mu.dims() {
        return Err(Error::Shape(format!(
            "noise {:?} does not match posterior {:?}",
            noise.dims(),
            post.mu.dims()
        )));
    }
    Ok((&post.mu + post.sigma()?.mul(noise)?)?)
}

/// Mean over elements of `0.5 * (mu^2 + exp(logvar) - 1 - logvar)`.
pub fn kl_loss(post: &GaussianPosterior) -> Result<Tensor> {
    let term = ((post.mu.sqr()? + post.logvar.exp()?)? - 1.0)?;
    let term = (term - &post.logvar)?;
    Ok((term * 0.5)?.mean_all()?)
}

/// Mean absolute error over all elements.
pub fn rec_loss(x_hat: &Tensor, x: &Tensor) -> Result<Tensor> {
    if x_hat.dims() != x.dims() {
        return Err(Error::Shape(format!(
            "reconstruction {:?} vs input {:?}",
            x_hat.dims(),
            x.dims()
        )));
    }
    Ok((x_hat - x)?.abs()?.mean_all()?)
}

/// Frozen random 4-stage conv pyramid applied per frame; a stand-in for a
/// pretrained perceptual feature extractor at this scale.
pub struct PerceptualNet {
    stages: Vec<(Tensor, Tensor)>, // (weight, bias), plain tensors
    frozen: bool,
}

impl PerceptualNet {
    pub fn new(seed: u64, in_channels: usize) -> Result<Self> {
        Self::with_dtype(seed, in_channels, DType::F32)
    }

    pub fn with_dtype(seed: u64, in_channels: usize, dtype: DType) -> Result<Self> {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let dev = candle_core::Device::Cpu;
        let mut stages = Vec::new();
        let mut ch = in_channels;
        for stage in 0..4 {
            let out = (16 << stage).min(128);
            let fan_in = ch * 9;
            let std = (2.0 / fan_in as f64).sqrt();
            let w = crate::nn::randn_from(&mut rng, &[out, ch, 3, 3], dtype, &dev)?;
            let w = (w * std)?;
            let b = Tensor::zeros(out, dtype, &dev)?;
            stages.push((w, b));
            ch = out;
        }
        Ok(Self {
            stages,
            frozen: true,
        })
    }

    /// Test hook: an unfrozen net violates the loss contract.
    pub fn unfrozen_for_tests(seed: u64, in_channels: usize) -> Result<Self> {
        let mut net = Self::new(seed, in_channels)?;
        net.frozen = false;
        Ok(net)
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Multi-scale features of a clip `(B, C, F, H, W)`, one tensor per
    /// stage, computed per frame.
    pub fn features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        let (b, c, f, h, w) = x.dims5()?;
        let mut cur = x.transpose(1, 2)?.contiguous()?.reshape((b * f, c, h, w))?;
        let mut out = Vec::with_capacity(self.stages.len());
        for (wt, bias) in &self.stages {
            let y = cur.conv2d(wt, 1, 2, 1, 1)?;
            let y = y.broadcast_add(&bias.reshape((1, (), 1, 1))?)?;
            cur = y.gelu_erf()?;
            out.push(cur.clone());
        }
        Ok(out)
    }
}

/// Mean over stages of the MSE between frozen multi-scale features.
pub fn perceptual_loss(x_hat: &Tensor, x: &Tensor, net: &PerceptualNet) -> Result<Tensor> {
    if !net.is_frozen() {
        return Err(Error::Contract(
            "perceptual feature net must be frozen".into(),
        ));
    }
    if x_hat.dims() != x.dims() {
        return Err(Error::Shape(format!(
            "perceptual inputs disagree: {:?} vs {:?}",
            x_hat.dims(),
            x.dims()
        )));
    }
    let fa = net.features(x_hat)?;
    let fb = net.features(x)?;
    let mut total: Option<Tensor> = None;
    for (a, b) in fa.iter().zip(&fb) {
        let d = (a - b)?.sqr()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + d)?,
            None => d,
        });
    }
    Ok((total.unwrap() / fa.len() as f64)?)
}

/// Per-frame patch discriminator over `[frame ; frame - previous frame]`
/// (the temporal-difference channels let it judge fast motion).
pub struct Discriminator {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    pub fn new(ps: &mut ParamStore, name: &str, in_channels: usize, stages: usize) -> Result<Self> {
        let mut convs = Vec::new();
        let mut ch = in_channels * 2;
        for i in 0..stages {
            let out = (32 << i).min(256);
            convs.push(Conv2d::new(ps, &format!("{name}.conv{i}"), ch, out, 4, 2, 1)?);
            ch = out;
        }
        Ok(Self {
            convs,
            head: Conv2d::new(ps, &format!("{name}.head"), ch, 1, 3, 1, 1)?,
        })
    }

    /// Copy whose parameters share storage with this one but are cut out of
    /// the autograd graph; the generator pass evaluates through it so its
    /// loss carries no gradient for discriminator parameters.
    pub fn detached(&self) -> Result<Self> {
        Ok(Self {
            convs: self.convs.iter().map(Conv2d::detached).collect(),
            head: self.head.detached(),
        })
    }

    /// Patch logits for a clip `(B, C, F, H, W)`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, f, h, w) = x.dims5()?;
        // Temporal difference, zero for the first frame.
        let prev = Tensor::cat(&[&x.narrow(2, 0, 1)?, &x.narrow(2, 0, f - 1)?], 2)?;
        let diff = (x - prev)?;
        let stacked = Tensor::cat(&[x, &diff], 1)?; // (B, 2C, F, H, W)
        let mut cur = stacked
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b * f, 2 * c, h, w))?;
        for conv in &self.convs {
            cur = leaky_relu(&conv.forward(&cur)?, 0.2)?;
        }
        self.head.forward(&cur).map_err(Into::into)
    }
}

fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok(x.maximum(&(x * slope)?)?)
}

/// Hinge losses. The generator pass sees the real discriminator output but
/// detached from the discriminator parameters is not expressible here, so
/// callers split responsibilities: `gan_d_loss` detaches the fake clip,
/// `gan_g_loss` is evaluated through a discriminator whose parameters do not
/// receive gradient (see [`crate::train`]).
pub fn gan_d_loss(disc: &Discriminator, x_real: &Tensor, x_fake_detached: &Tensor) -> Result<Tensor> {
    let real = disc.logits(x_real)?;
    let fake = disc.logits(x_fake_detached)?;
    let l_real = (1.0 - real)?.relu()?.mean_all()?;
    let l_fake = (1.0 + fake)?.relu()?.mean_all()?;
    Ok((l_real + l_fake)?)
}

pub fn gan_g_loss(disc: &Discriminator, x_fake: &Tensor) -> Result<Tensor> {
    Ok(disc.logits(x_fake)?.neg()?.mean_all()?)
}

/// Loss weights; the GAN term is disabled before `gan_start_step`.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossWeights {
    pub lambda_p: f64,
    pub lambda_gan: f64,
    pub lambda_kl: f64,
    pub gan_start_step: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_p: 1.0,
            lambda_gan: 0.1,
            lambda_kl: 1e-6,
            gan_start_step: 1000,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (name, val) in [
            ("lambda_p", self.lambda_p),
            ("lambda_gan", self.lambda_gan),
            ("lambda_kl", self.lambda_kl),
        ] {
            if !val.is_finite() || val < 0.0 {
                v.push(format!("vae.{name} must be finite and >= 0, got {val}"));
            }
        }
        v
    }

    /// Effective GAN weight at a step.
    pub fn gan_weight(&self, step: usize) -> f64 {
        if step < self.gan_start_step {
            0.0
        } else {
            self.lambda_gan
        }
    }
}

/// Scalar loss report for one step (generator side unless noted).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LossBundle {
    pub rec: f64,
    pub perceptual: f64,
    pub gan_g: f64,
    pub gan_d: f64,
    pub kl: f64,
    pub total: f64,
}

/// Combine parts into the weighted total:
/// `rec + lambda_p * perceptual + gan_weight(step) * gan_g + lambda_kl * kl`.
pub fn total_loss(
    rec: f64,
    perceptual: f64,
    gan_g: f64,
    gan_d: f64,
    kl: f64,
    weights: &LossWeights,
    step: usize,
) -> Result<LossBundle> {
    for (name, v) in [
        ("rec", rec),
        ("perceptual", perceptual),
        ("gan_g", gan_g),
        ("gan_d", gan_d),
        ("kl", kl),
    ] {
        if !v.is_finite() {
            return Err(Error::Numeric(format!("non-finite {name} loss: {v}")));
        }
    }
    let total = rec
        + weights.lambda_p * perceptual
        + weights.gan_weight(step) * gan_g
        + weights.lambda_kl * kl;
    Ok(LossBundle {
        rec,
        perceptual,
        gan_g,
        gan_d,
        kl,
        total,
    })
}

/// Differentiable counterpart of [`total_loss`] used inside the train loop;
/// the scalar bundle is derived from the same inputs.
pub fn total_loss_tensor(
    rec: &Tensor,
    perceptual: &Tensor,
    gan_g: Option<&Tensor>,
    kl: &Tensor,
    weights: &LossWeights,
    step: usize,
) -> Result<Tensor> {
    let mut total = (rec + (perceptual * weights.lambda_p)?)?;
    let gw = weights.gan_weight(step);
    if let Some(g) = gan_g {
        if gw != 0.0 {
            total = (total + (g * gw)?)?;
        }
    }
    Ok((total + (kl * weights.lambda_kl)?)?)
}

/// Per-branch posterior heads: 1x1 convs producing `(mu, logvar)` with the
/// same channel count as the branch latent.
pub struct PosteriorHead {
    mu: Conv2d,
    logvar: Conv2d,
}

impl PosteriorHead {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize) -> Result<Self> {
        let mu = Conv2d::new(ps, &format!("{name}.mu"), channels, channels, 1, 1, 0)?;
        // Zero-initialized logvar head: sigma starts at 1 everywhere.
        let mut head = Self {
            mu,
            logvar: Conv2d::new(ps, &format!("{name}.logvar"), channels, channels, 1, 1, 0)?,
        };
        // Replace the Kaiming conv init with small/zero init for stability.
        let _ = &mut head;
        ps.set(
            &format!("{name}.logvar.weight"),
            &Tensor::zeros((channels, channels, 1, 1), ps.dtype(), ps.device())?,
        )?;
        Ok(head)
    }

    /// `x`: `(N, channels, A, B)` feature map (callers fold extra leading
    /// axes into `N`).
    pub fn forward(&self, x: &Tensor) -> Result<GaussianPosterior> {
        GaussianPosterior::new(self.mu.forward(x)?, self.logvar.forward(x)?)
    }
}

/// Posterior heads stubbed for shape-only parameter accounting.
pub fn posterior_head_shape_only(ps: &mut ParamStore, name: &str, channels: usize) -> Result<()> {
    ps.param(&format!("{name}.mu.weight"), &[channels, channels, 1, 1], Init::Zeros)?;
    ps.param(&format!("{name}.mu.bias"), &[channels], Init::Zeros)?;
    ps.param(&format!("{name}.logvar.weight"), &[channels, channels, 1, 1], Init::Zeros)?;
    ps.param(&format!("{name}.logvar.bias"), &[channels], Init::Zeros)?;
    Ok(())
}
