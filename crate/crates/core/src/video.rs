//! Clip ingestion, normalization, and the synthetic moving-shapes fixture.
//!
//! Pixels live in `[-1, 1]`. 8-bit values map through `v = u / 127.5 - 1`,
//! and [`denormalize`] inverts with round-half-up (`0.0` maps to 128), so
//! `normalize ∘ denormalize` is the identity on 8-bit inputs.

use candle_core::{DType, Device, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

/// A real-valued video clip of shape `(C, F, H, W)` with values in `[-1, 1]`.
#[derive(Clone)]
pub struct VideoClip {
    data: Tensor,
    pub fps: f32,
    pub id: String,
}

impl VideoClip {
    /// Validates channel count, dimensions, finiteness, and value range.
    pub fn new(data: Tensor, fps: f32, id: impl Into<String>) -> Result<Self> {
        let dims = data.dims();
        if dims.len() != 4 {
            return Err(Error::Shape(format!(
                "clip must be (C,F,H,W), got {dims:?}"
            )));
        }
        if dims[0] != CHANNELS {
            return Err(Error::Shape(format!(
                "clip must have {CHANNELS} channels, got {}",
                dims[0]
            )));
        }
        if dims[1] < 1 || dims[2] < 1 || dims[3] < 1 {
            return Err(Error::Shape(format!("empty clip dimension in {dims:?}")));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Config(format!("fps must be positive, got {fps}")));
        }
        let data = data.to_dtype(DType::F32)?.contiguous()?;
        let flat = data.flatten_all()?.to_vec1::<f32>()?;
        for (i, v) in flat.iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::Numeric(format!("non-finite pixel at index {i}")));
            }
            if *v < -1.0 || *v > 1.0 {
                return Err(Error::Range(format!(
                    "pixel {v} at index {i} outside [-1, 1]"
                )));
            }
        }
        Ok(Self {
            data,
            fps,
            id: id.into(),
        })
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    /// `(C, F, H, W)`.
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        let d = self.data.dims();
        (d[0], d[1], d[2], d[3])
    }

    pub fn frames(&self) -> usize {
        self.data.dims()[1]
    }

    /// Total number of scalar elements, `C*F*H*W`.
    pub fn element_count(&self) -> usize {
        self.data.elem_count()
    }
}

/// Non-empty batch of identically shaped clips.
pub struct ClipBatch {
    pub clips: Vec<VideoClip>,
    pub seed: u64,
}

impl ClipBatch {
    pub fn new(clips: Vec<VideoClip>, seed: u64) -> Result<Self> {
        let first = clips
            .first()
            .ok_or_else(|| Error::Config("empty clip batch".into()))?
            .shape();
        for c in &clips {
            if c.shape() != first {
                return Err(Error::Shape(format!(
                    "heterogeneous batch: {:?} vs {:?}",
                    c.shape(),
                    first
                )));
            }
        }
        Ok(Self { clips, seed })
    }

    /// Stack to `(B, C, F, H, W)`.
    pub fn stacked(&self) -> Result<Tensor> {
        let refs: Vec<&Tensor> = self.clips.iter().map(|c| c.data()).collect();
        Ok(Tensor::stack(&refs, 0)?)
    }
}

fn normalize_u8(u: u8) -> f32 {
    u as f32 / 127.5 - 1.0
}

fn denormalize_f32(v: f32) -> u8 {
    // Round half up; documented midpoint: 0.0 -> 128.
    ((v + 1.0) * 127.5 + 0.5).floor() as u8
}

/// Load the first `frames` images (lexicographic file order) from a
/// directory of PNG/PPM frames and normalize them to `[-1, 1]`.
pub fn load_image_sequence(dir_path: &Path, frames: usize) -> Result<VideoClip> {
    if frames == 0 {
        return Err(Error::Config("requested zero frames".into()));
    }
    let mut entries: Vec<_> = std::fs::read_dir(dir_path)
        .map_err(|e| Error::Ingestion(format!("cannot read {}: {e}", dir_path.display())))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            matches!(
                p.extension().and_then(|e| e.to_str()).map(|e| e.to_ascii_lowercase()),
                Some(ref e) if e == "png" || e == "ppm" || e == "pnm"
            )
        })
        .collect();
    entries.sort();
    if entries.len() < frames {
        return Err(Error::Ingestion(format!(
            "{} holds {} frame images, need {frames}",
            dir_path.display(),
            entries.len()
        )));
    }
    let mut planes: Vec<Vec<f32>> = vec![Vec::new(); CHANNELS];
    let mut size: Option<(u32, u32)> = None;
    for path in entries.iter().take(frames) {
        let img = image::open(path)
            .map_err(|e| Error::Ingestion(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let (w, h) = img.dimensions();
        match size {
            None => size = Some((w, h)),
            Some(s) if s != (w, h) => {
                return Err(Error::Shape(format!(
                    "mixed resolutions: {}x{} vs {}x{}",
                    s.0, s.1, w, h
                )))
            }
            _ => {}
        }
        for c in 0..CHANNELS {
            planes[c].extend(img.pixels().map(|p| normalize_u8(p.0[c])));
        }
    }
    let (w, h) = size.unwrap();
    let (h, w) = (h as usize, w as usize);
    let mut data = Vec::with_capacity(CHANNELS * frames * h * w);
    for plane in planes {
        data.extend(plane);
    }
    let t = Tensor::from_vec(data, (CHANNELS, frames, h, w), &Device::Cpu)?;
    VideoClip::new(t, 25.0, dir_path.display().to_string())
}

/// Invert normalization to 8-bit RGB frames (round-half-up).
pub fn denormalize(clip: &VideoClip) -> Result<Vec<image::RgbImage>> {
    let (c, f, h, w) = clip.shape();
    let flat = clip.data().flatten_all()?.to_vec1::<f32>()?;
    for v in &flat {
        if *v < -1.0 || *v > 1.0 {
            return Err(Error::Range(format!("value {v} outside [-1, 1]")));
        }
    }
    let plane = h * w;
    let mut frames = Vec::with_capacity(f);
    for t in 0..f {
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let mut px = [0u8; 3];
                for ch in 0..c {
                    let v = flat[ch * f * plane + t * plane + y * w + x];
                    px[ch] = denormalize_f32(v);
                }
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        frames.push(img);
    }
    Ok(frames)
}

/// Write each frame of the clip as `frame_NNNN.png` under `dir`.
pub fn save_frames_png(clip: &VideoClip, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (i, frame) in denormalize(clip)?.iter().enumerate() {
        let path = dir.join(format!("frame_{i:04}.png"));
        frame
            .save(&path)
            .map_err(|e| Error::Io(std::io::Error::other(format!("{}: {e}", path.display()))))?;
    }
    Ok(())
}

const VRAW_MAGIC: &[u8; 4] = b"VRAW";

/// Raw clip file: magic "VRAW", u32 C,F,H,W (little endian), then f32
/// little-endian payload in C,F,H,W order.
pub fn save_vraw(clip: &VideoClip, path: &Path) -> Result<()> {
    use byteorder::{LittleEndian, WriteBytesExt};
    let (c, f, h, w) = clip.shape();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(VRAW_MAGIC)?;
    for d in [c, f, h, w] {
        out.write_u32::<LittleEndian>(d as u32)?;
    }
    for v in clip.data().flatten_all()?.to_vec1::<f32>()? {
        out.write_f32::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn load_vraw(path: &Path) -> Result<VideoClip> {
    use byteorder::{LittleEndian, ReadBytesExt};
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    file.read_exact(&mut magic)?;
    if &magic != VRAW_MAGIC {
        return Err(Error::Format(format!(
            "bad VRAW magic {magic:?} in {}",
            path.display()
        )));
    }
    let mut dims = [0usize; 4];
    for d in dims.iter_mut() {
        *d = file.read_u32::<LittleEndian>()? as usize;
    }
    let n: usize = dims.iter().product();
    let mut values = vec![0f32; n];
    file.read_f32_into::<LittleEndian>(&mut values)
        .map_err(|e| Error::Format(format!("truncated VRAW payload: {e}")))?;
    let t = Tensor::from_vec(values, dims.as_slice(), &Device::Cpu)?;
    VideoClip::new(t, 25.0, path.display().to_string())
}

/// Per-frame center positions of the two synthetic objects.
pub struct SynthTrajectories {
    /// Large, slowly drifting shape.
    pub slow: Vec<(f64, f64)>,
    /// Small, fast-bouncing dot.
    pub fast: Vec<(f64, f64)>,
    pub slow_radius: f64,
    pub fast_radius: f64,
}

fn bounce_walk(
    start: (f64, f64),
    angle: f64,
    speed: f64,
    frames: usize,
    lo: (f64, f64),
    hi: (f64, f64),
) -> Vec<(f64, f64)> {
    let mut pos = start;
    let mut vel = (angle.cos() * speed, angle.sin() * speed);
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        out.push(pos);
        for (p, v, l, h) in [
            (&mut pos.0, &mut vel.0, lo.0, hi.0),
            (&mut pos.1, &mut vel.1, lo.1, hi.1),
        ] {
            *p += *v;
            if h > l {
                while *p < l || *p > h {
                    if *p < l {
                        *p = 2.0 * l - *p;
                        *v = -*v;
                    }
                    if *p > h {
                        *p = 2.0 * h - *p;
                        *v = -*v;
                    }
                }
            } else {
                *p = (l + h) / 2.0;
            }
        }
    }
    out
}

/// Deterministic object trajectories for `synth_moving_shapes`; exposed so
/// tests and diagnostics can compare rendered motion against ground truth.
pub fn synth_trajectories(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    slow_speed: f64,
    fast_speed: f64,
) -> SynthTrajectories {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let minside = height.min(width) as f64;
    let slow_radius = 0.27 * minside;
    let fast_radius = (0.055 * minside).max(1.4);
    let (hf, wf) = (height as f64, width as f64);

    let margin_s = slow_radius + 1.0;
    let sx = rng.random_range(margin_s..(wf - margin_s).max(margin_s + 1e-6));
    let sy = rng.random_range(margin_s..(hf - margin_s).max(margin_s + 1e-6));
    let sa = rng.random_range(0.0..std::f64::consts::TAU);

    let margin_f = fast_radius + 1.0;
    let fx = rng.random_range(margin_f..(wf - margin_f).max(margin_f + 1e-6));
    let fy = rng.random_range(margin_f..(hf - margin_f).max(margin_f + 1e-6));
    let fa = rng.random_range(0.0..std::f64::consts::TAU);

    let slow = bounce_walk(
        (sx, sy),
        sa,
        slow_speed,
        frames,
        (margin_s, margin_s),
        (wf - margin_s, hf - margin_s),
    );
    let fast = bounce_walk(
        (fx, fy),
        fa,
        fast_speed,
        frames,
        (margin_f, margin_f),
        (wf - margin_f, hf - margin_f),
    );
    SynthTrajectories {
        slow,
        fast,
        slow_radius,
        fast_radius,
    }
}

/// Render a clip with a static gradient background, one large slowly
/// drifting disc (the structure signal) and one small bright fast-bouncing
/// dot (the dynamics signal). Pure function of its arguments.
pub fn synth_moving_shapes(
    seed: u64,
    frames: usize,
    height: usize,
    width: usize,
    slow_speed: f64,
    fast_speed: f64,
) -> Result<VideoClip> {
    if frames < 1 || height < 1 || width < 1 {
        return Err(Error::Shape(format!(
            "non-positive clip dimensions ({frames}, {height}, {width})"
        )));
    }
    if !(slow_speed >= 0.0 && fast_speed >= slow_speed) {
        return Err(Error::Config(format!(
            "speeds must satisfy fast >= slow >= 0, got slow={slow_speed} fast={fast_speed}"
        )));
    }
    let traj = synth_trajectories(seed, frames, height, width, slow_speed, fast_speed);
    // Consume the same RNG prefix as synth_trajectories so appearance draws
    // start from a distinct but seed-determined state.
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);

    // Dim background gradient per channel.
    let base: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(-0.85..-0.55)).collect();
    let gx: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(-0.12..0.12)).collect();
    let gy: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(-0.12..0.12)).collect();
    // Mid-brightness slow shape, bright white-ish fast dot.
    let slow_color: Vec<f64> = (0..CHANNELS).map(|_| rng.random_range(0.0..0.45)).collect();
    let fast_color = [0.95, 0.95, 0.9];

    let soft_disc = |cx: f64, cy: f64, r: f64, x: usize, y: usize| -> f64 {
        let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
        (1.0 - (d - r).max(0.0)).clamp(0.0, 1.0)
    };

    let mut data = vec![0f32; CHANNELS * frames * height * width];
    let plane = height * width;
    for t in 0..frames {
        let (sx, sy) = traj.slow[t];
        let (fx, fy) = traj.fast[t];
        for y in 0..height {
            for x in 0..width {
                let xf = if width > 1 { x as f64 / (width - 1) as f64 } else { 0.0 };
                let yf = if height > 1 { y as f64 / (height - 1) as f64 } else { 0.0 };
                let a_slow = soft_disc(sx, sy, traj.slow_radius, x, y);
                let a_fast = soft_disc(fx, fy, traj.fast_radius, x, y);
                for c in 0..CHANNELS {
                    let mut v = base[c] + gx[c] * xf + gy[c] * yf;
                    v = v * (1.0 - a_slow) + slow_color[c] * a_slow;
                    v = v * (1.0 - a_fast) + fast_color[c] * a_fast;
                    data[c * frames * plane + t * plane + y * width + x] =
                        v.clamp(-1.0, 1.0) as f32;
                }
            }
        }
    }
    let tensor = Tensor::from_vec(data, (CHANNELS, frames, height, width), &Device::Cpu)?;
    VideoClip::new(tensor, 8.0, format!("synth-{seed}"))
}
