//! Minimal neural-network toolkit on top of `candle` tensors.
//!
//! Everything trainable is registered in a [`ParamStore`] under a
//! hierarchical name, which gives deterministic initialization from a seed,
//! an ordered shape manifest for checkpoints and parameter counting, and a
//! stable enumeration for the optimizer and for gradient checking.

use candle_core::{DType, Device, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::HashMap;

use crate::error::{Error, Result};

/// Initialization scheme for a parameter tensor.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    /// Zero-mean Gaussian with the given standard deviation.
    Normal(f64),
    /// Gaussian with std `sqrt(2 / fan_in)`; used for conv/MLP stacks
    /// without residual connections.
    KaimingNormal { fan_in: usize },
    Zeros,
    Ones,
    Const(f64),
}

/// Named, ordered collection of trainable parameters.
///
/// In `shape_only` mode no storage is allocated (every parameter becomes a
/// zero-size stub); the manifest is still recorded, so architectures too big
/// to hold in memory can be counted analytically through the exact same
/// construction path as real models.
pub struct ParamStore {
    device: Device,
    dtype: DType,
    vars: Vec<(String, Var)>,
    index: HashMap<String, usize>,
    manifest: Vec<(String, Vec<usize>)>,
    rng: ChaCha8Rng,
    shape_only: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            device: Device::Cpu,
            dtype,
            vars: Vec::new(),
            index: HashMap::new(),
            manifest: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            shape_only: false,
        }
    }

    /// Store that records shapes but allocates nothing.
    pub fn shape_only() -> Self {
        let mut ps = Self::new(0, DType::F32);
        ps.shape_only = true;
        ps
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Register a parameter and return a tensor view that tracks later
    /// optimizer updates (all clones share storage with the held `Var`).
    pub fn param(&mut self, name: &str, dims: &[usize], init: Init) -> Result<Tensor> {
        if self.index.contains_key(name) {
            return Err(Error::Contract(format!("duplicate parameter name {name}")));
        }
        self.manifest.push((name.to_string(), dims.to_vec()));
        let n: usize = dims.iter().product();
        // Draw from the RNG even in shape-only mode so both modes walk the
        // same stream, then drop the values if nothing is allocated.
        let values: Vec<f64> = match init {
            Init::Normal(std) => (0..n)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut self.rng);
                    z * std
                })
                .collect(),
            Init::KaimingNormal { fan_in } => {
                let std = (2.0 / fan_in.max(1) as f64).sqrt();
                (0..n)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut self.rng);
                        z * std
                    })
                    .collect()
            }
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Const(c) => vec![c; n],
        };
        if self.shape_only {
            // Stub: 1-element tensor so constructors stay usable for counting.
            let t = Tensor::zeros(1, self.dtype, &self.device)?;
            return Ok(t);
        }
        let t = Tensor::from_vec(values, dims, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.index.insert(name.to_string(), self.vars.len());
        self.vars.push((name.to_string(), var));
        Ok(out)
    }

    pub fn get(&self, name: &str) -> Option<Tensor> {
        self.index
            .get(name)
            .map(|&i| self.vars[i].1.as_tensor().clone())
    }

    /// Overwrite a parameter in place (all live views observe the change).
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let idx = self
            .index
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter {name}")))?;
        self.vars[*idx].1.set(value)?;
        Ok(())
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn named_vars(&self) -> &[(String, Var)] {
        &self.vars
    }

    pub fn manifest(&self) -> &[(String, Vec<usize>)] {
        &self.manifest
    }

    pub fn param_count(&self) -> usize {
        self.manifest
            .iter()
            .map(|(_, d)| d.iter().product::<usize>())
            .sum()
    }

    /// Flat f32 values of every parameter, in manifest order.
    pub fn dump_values(&self) -> Result<Vec<(String, Vec<usize>, Vec<f32>)>> {
        let mut out = Vec::with_capacity(self.vars.len());
        for (name, var) in &self.vars {
            let t = var.as_tensor().to_dtype(DType::F32)?.flatten_all()?;
            let dims = var.as_tensor().dims().to_vec();
            out.push((name.clone(), dims, t.to_vec1::<f32>()?));
        }
        Ok(out)
    }

    /// Load flat f32 values by name; every stored parameter must be covered
    /// and shapes must match.
    pub fn load_values(&self, values: &[(String, Vec<usize>, Vec<f32>)]) -> Result<()> {
        let by_name: HashMap<&str, &(String, Vec<usize>, Vec<f32>)> =
            values.iter().map(|e| (e.0.as_str(), e)).collect();
        for (name, var) in &self.vars {
            let entry = by_name.get(name.as_str()).ok_or_else(|| {
                Error::Format(format!("checkpoint is missing parameter {name}"))
            })?;
            if entry.1 != var.as_tensor().dims() {
                return Err(Error::Format(format!(
                    "checkpoint shape mismatch for {name}: file {:?} vs model {:?}",
                    entry.1,
                    var.as_tensor().dims()
                )));
            }
            let t = Tensor::from_vec(entry.2.clone(), entry.1.as_slice(), &self.device)?
                .to_dtype(self.dtype)?;
            var.set(&t)?;
        }
        Ok(())
    }
}

/// Fully connected layer; weight stored as `(out, in)`.
pub struct Linear {
    w: Tensor,
    b: Option<Tensor>,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        Self::with_init(ps, name, in_dim, out_dim, Init::Normal(0.02), true)
    }

    pub fn with_init(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let w = ps.param(&format!("{name}.weight"), &[out_dim, in_dim], init)?;
        let b = if bias {
            Some(ps.param(&format!("{name}.bias"), &[out_dim], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { w, b })
    }

    /// `x` has shape `(..., in)`; returns `(..., out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        // Flatten leading dims so the matmul always runs 2D-contiguous.
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::Shape("scalar input".into()))?;
        let rows: usize = dims[..dims.len() - 1].iter().product();
        let x2 = x.contiguous()?.reshape((rows, in_dim))?;
        let mut y = x2.matmul(&self.w.t()?)?;
        if let Some(b) = &self.b {
            y = y.broadcast_add(b)?;
        }
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.w.dims()[0];
        Ok(y.reshape(out_dims)?)
    }
}

/// Layer normalization over the last dimension.
pub struct LayerNorm {
    w: Option<Tensor>,
    b: Option<Tensor>,
    eps: f64,
}

impl LayerNorm {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        let w = ps.param(&format!("{name}.weight"), &[dim], Init::Ones)?;
        let b = ps.param(&format!("{name}.bias"), &[dim], Init::Zeros)?;
        Ok(Self {
            w: Some(w),
            b: Some(b),
            eps: 1e-5,
        })
    }

    /// Normalization without learned affine, as used under adaptive
    /// conditioning where scale/shift come from elsewhere.
    pub fn without_affine() -> Self {
        Self {
            w: None,
            b: None,
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let last = x.rank() - 1;
        let mean = x.mean_keepdim(last)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(last)?;
        let denom = (var + self.eps)?.sqrt()?;
        let mut y = centered.broadcast_div(&denom)?;
        if let Some(w) = &self.w {
            y = y.broadcast_mul(w)?;
        }
        if let Some(b) = &self.b {
            y = y.broadcast_add(b)?;
        }
        Ok(y)
    }
}

/// Numerically stable softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let last = x.rank() - 1;
    let max = x.max_keepdim(last)?;
    let e = x.broadcast_sub(&max)?.exp()?;
    let sum = e.sum_keepdim(last)?;
    Ok(e.broadcast_div(&sum)?)
}

/// Additive causal mask of shape `(len, len)`: 0 on and below the diagonal,
/// -inf above it.
pub fn causal_mask(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let mut data = vec![0f32; len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = f32::NEG_INFINITY;
        }
    }
    Ok(Tensor::from_vec(data, (len, len), device)?.to_dtype(dtype)?)
}

/// Multi-head attention. Self-attention when `kv` is the query sequence,
/// cross-attention otherwise; both sides must share the model width.
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    heads: usize,
    head_dim: usize,
}

impl Attention {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(Error::Config(format!(
                "attention width {dim} not divisible by {heads} heads"
            )));
        }
        Ok(Self {
            q: Linear::new(ps, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(ps, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(ps, &format!("{name}.v"), dim, dim)?,
            o: Linear::new(ps, &format!("{name}.o"), dim, dim)?,
            heads,
            head_dim: dim / heads,
        })
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        debug_assert_eq!(d, self.heads * self.head_dim);
        Ok(x.reshape((b, l, self.heads, self.head_dim))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `q_in`: `(B, Lq, D)`, `kv_in`: `(B, Lk, D)`,
    /// `mask`: optional additive `(Lq, Lk)`.
    pub fn forward(&self, q_in: &Tensor, kv_in: &Tensor, mask: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, d) = q_in.dims3()?;
        let q = self.split_heads(&self.q.forward(q_in)?)?;
        let k = self.split_heads(&self.k.forward(kv_in)?)?;
        let v = self.split_heads(&self.v.forward(kv_in)?)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(m) = mask {
            scores = scores.broadcast_add(m)?;
        }
        let attn = softmax_last(&scores)?;
        let out = attn.matmul(&v)?; // (B, H, Lq, hd)
        let out = out.transpose(1, 2)?.contiguous()?.reshape((b, lq, d))?;
        self.o.forward(&out)
    }
}

/// Two-layer GELU MLP.
pub struct Mlp {
    fc1: Linear,
    fc2: Linear,
}

impl Mlp {
    pub fn new(ps: &mut ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(ps, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(ps, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    /// MLP with distinct input/output widths.
    pub fn new_proj(
        ps: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
    ) -> Result<Self> {
        Ok(Self {
            fc1: Linear::with_init(
                ps,
                &format!("{name}.fc1"),
                in_dim,
                hidden,
                Init::KaimingNormal { fan_in: in_dim },
                true,
            )?,
            fc2: Linear::with_init(
                ps,
                &format!("{name}.fc2"),
                hidden,
                out_dim,
                Init::KaimingNormal { fan_in: hidden },
                true,
            )?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.gelu_erf()?)?)
    }
}

/// 2D convolution wrapper holding its own parameters.
pub struct Conv2d {
    w: Tensor,
    b: Tensor,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    pub fn new(
        ps: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let fan_in = in_ch * kernel * kernel;
        let w = ps.param(
            &format!("{name}.weight"),
            &[out_ch, in_ch, kernel, kernel],
            Init::KaimingNormal { fan_in },
        )?;
        let b = ps.param(&format!("{name}.bias"), &[out_ch], Init::Zeros)?;
        Ok(Self {
            w,
            b,
            stride,
            padding,
        })
    }

    /// `x`: `(B, Cin, H, W)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.w, self.padding, self.stride, 1, 1)?;
        let b = self.b.reshape((1, (), 1, 1))?;
        Ok(y.broadcast_add(&b)?)
    }

    /// Copy with gradient-stopped parameters (storage stays shared, so
    /// optimizer updates remain visible).
    pub fn detached(&self) -> Self {
        Self {
            w: self.w.detach(),
            b: self.b.detach(),
            stride: self.stride,
            padding: self.padding,
        }
    }
}

/// `(B, C, H, W) -> (B, C*r*r, H/r, W/r)`, gathering each `r x r` block into
/// channels (block offset varies fastest).
pub fn space_to_depth(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(Error::Shape(format!(
            "space_to_depth: ({h}, {w}) not divisible by {r}"
        )));
    }
    let y = x
        .reshape((b, c, h / r, r, w / r, r))?
        .permute((0, 1, 3, 5, 2, 4))?
        .contiguous()?
        .reshape((b, c * r * r, h / r, w / r))?;
    Ok(y)
}

/// Inverse of [`space_to_depth`].
pub fn depth_to_space(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if c % (r * r) != 0 {
        return Err(Error::Shape(format!(
            "depth_to_space: {c} channels not divisible by {}",
            r * r
        )));
    }
    let c_out = c / (r * r);
    let y = x
        .reshape((b, c_out, r, r, h, w))?
        .permute((0, 1, 4, 2, 5, 3))?
        .contiguous()?
        .reshape((b, c_out, h * r, w * r))?;
    Ok(y)
}

/// Standard-normal tensor drawn from the caller's RNG (keeps every sample
/// on one deterministic stream regardless of thread count).
pub fn randn_from(
    rng: &mut impl rand::Rng,
    dims: &[usize],
    dtype: DType,
    device: &Device,
) -> Result<Tensor> {
    let n: usize = dims.iter().product();
    let values: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(values, dims, device)?.to_dtype(dtype)?)
}

/// Adam with bias correction; the two moment buffers are plain tensors.
pub struct Adam {
    vars: Vec<Var>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    step: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(vars: Vec<Var>, lr: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let m = vars
            .iter()
            .map(|v| Tensor::zeros(v.shape(), v.dtype(), v.device()))
            .collect::<candle_core::Result<Vec<_>>>()?;
        let v_ = vars
            .iter()
            .map(|v| Tensor::zeros(v.shape(), v.dtype(), v.device()))
            .collect::<candle_core::Result<Vec<_>>>()?;
        Ok(Self {
            vars,
            m,
            v: v_,
            step: 0,
            lr,
            beta1,
            beta2,
            eps: 1e-8,
        })
    }

    pub fn step(&mut self, grads: &candle_core::backprop::GradStore) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, var) in self.vars.iter().enumerate() {
            let Some(grad) = grads.get(var.as_tensor()) else {
                continue;
            };
            let grad = grad.detach();
            self.m[i] = ((&self.m[i] * self.beta1)? + (&grad * (1.0 - self.beta1))?)?;
            self.v[i] = ((&self.v[i] * self.beta2)? + (grad.sqr()? * (1.0 - self.beta2))?)?;
            let m_hat = (&self.m[i] / bc1)?;
            let v_hat = (&self.v[i] / bc2)?;
            let update = (m_hat * self.lr)?.div(&(v_hat.sqrt()? + self.eps)?)?;
            var.set(&var.as_tensor().sub(&update)?)?;
        }
        Ok(())
    }
}
