//! Synthetic forward ISP: scene synthesis, Bayer sampling, RGGB packing,
//! and a deterministic RAW -> RGB renderer (demosaic, white balance, color
//! matrix, gamma, quantization). This is the ground-truth pipeline the
//! learned models invert.

use ndarray::{Array2, Array3, Axis};
use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

/// Packed RGGB raw frame at half the mosaic resolution.
/// Channel order: R, G_r, G_b, B. Values are linear in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    /// (4, H/2, W/2)
    pub data: Array3<f64>,
    pub bit_depth: u8,
    /// Divisor that maps stored integer codes to [0,1]. Equals 2^bit_depth - 1
    /// for synthetic data.
    pub white_level: f64,
}

/// Display-referred RGB frame, values in [0,1].
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    /// (3, H, W)
    pub data: Array3<f64>,
    pub bit_depth: u8,
}

impl RawImage {
    /// Continuous-valued prediction (no quantized provenance).
    pub fn continuous(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 4 {
            return Err(Error::shape(format!(
                "raw data must have 4 channels, got {}",
                data.shape()[0]
            )));
        }
        check_unit_range(&data, "raw")?;
        Ok(RawImage {
            data,
            bit_depth: 0,
            white_level: 1.0,
        })
    }

    pub fn new(data: Array3<f64>, bit_depth: u8) -> Result<Self> {
        if data.shape()[0] != 4 {
            return Err(Error::shape(format!(
                "raw data must have 4 channels, got {}",
                data.shape()[0]
            )));
        }
        check_unit_range(&data, "raw")?;
        let white_level = ((1u32 << bit_depth) - 1) as f64;
        Ok(RawImage {
            data,
            bit_depth,
            white_level,
        })
    }

    /// (height, width) of the packed grid.
    pub fn dims(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    /// True when every value is an integer code over white_level (within
    /// 1 ulp of the division).
    pub fn is_quantized(&self) -> bool {
        self.bit_depth > 0 && is_quantized(&self.data, self.white_level)
    }
}

impl RgbImage {
    /// Continuous-valued prediction (no quantized provenance).
    pub fn continuous(data: Array3<f64>) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::shape(format!(
                "rgb data must have 3 channels, got {}",
                data.shape()[0]
            )));
        }
        check_unit_range(&data, "rgb")?;
        Ok(RgbImage { data, bit_depth: 0 })
    }

    pub fn new(data: Array3<f64>, bit_depth: u8) -> Result<Self> {
        if data.shape()[0] != 3 {
            return Err(Error::shape(format!(
                "rgb data must have 3 channels, got {}",
                data.shape()[0]
            )));
        }
        check_unit_range(&data, "rgb")?;
        Ok(RgbImage { data, bit_depth })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.data.shape()[1], self.data.shape()[2])
    }

    pub fn is_quantized(&self) -> bool {
        if self.bit_depth == 0 {
            return false;
        }
        let levels = ((1u32 << self.bit_depth) - 1) as f64;
        is_quantized(&self.data, levels)
    }
}

fn check_unit_range(data: &Array3<f64>, what: &str) -> Result<()> {
    for &v in data.iter() {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(Error::data(format!("{what} value {v} outside [0,1]")));
        }
    }
    Ok(())
}

fn is_quantized(data: &Array3<f64>, levels: f64) -> bool {
    data.iter().all(|&v| {
        let code = v * levels;
        (code - code.round()).abs() <= 4.0 * f64::EPSILON * levels
    })
}

/// Parameters of the synthetic forward ISP.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IspParams {
    /// White-balance multipliers for R, G, B.
    pub wb_gains: [f64; 3],
    /// 3x3 color-correction matrix; each row sums to 1.
    pub ccm: [[f64; 3]; 3],
    /// Power-law encoding exponent (1/2.2 by default).
    pub gamma: f64,
    /// Read-noise sigma in linear units, applied to the mosaic before
    /// quantization. 0 keeps the pipeline exact.
    pub noise_std: f64,
    pub rgb_bit_depth: u8,
    pub raw_bit_depth: u8,
}

impl Default for IspParams {
    fn default() -> Self {
        // Gains above 1 clip highlights after white balance; together with
        // 8-bit quantization this is what makes the inverse problem
        // genuinely ill-posed (the RAW retains what the RGB destroys).
        IspParams {
            wb_gains: [1.35, 1.0, 1.25],
            ccm: [
                [1.25, -0.15, -0.10],
                [-0.10, 1.30, -0.20],
                [-0.05, -0.25, 1.30],
            ],
            gamma: 1.0 / 2.2,
            noise_std: 0.0,
            rgb_bit_depth: 8,
            raw_bit_depth: 12,
        }
    }
}

impl IspParams {
    pub fn validate(&self) -> Result<()> {
        if self.wb_gains.iter().any(|&g| !(g > 0.0) || !g.is_finite()) {
            return Err(Error::config("wb_gains must be positive"));
        }
        for (i, row) in self.ccm.iter().enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > 1e-9 {
                return Err(Error::config(format!("ccm row {i} sums to {s}, expected 1")));
            }
        }
        if !(self.gamma > 0.0) {
            return Err(Error::config("gamma must be positive"));
        }
        if self.noise_std < 0.0 {
            return Err(Error::config("noise_std must be nonnegative"));
        }
        Ok(())
    }
}

/// Sample a full-color linear scene down to a single-channel RGGB mosaic.
/// Pattern: (0,0) R, (0,1) G, (1,0) G, (1,1) B.
pub fn mosaic(scene: &Array3<f64>) -> Result<Array2<f64>> {
    let (c, h, w) = scene.dim();
    if c != 3 {
        return Err(Error::shape(format!("scene must have 3 channels, got {c}")));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("mosaic needs even dims, got {h}x{w}")));
    }
    let mut bayer = Array2::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let ch = match (y % 2, x % 2) {
                (0, 0) => 0,
                (1, 1) => 2,
                _ => 1,
            };
            bayer[[y, x]] = scene[[ch, y, x]];
        }
    }
    Ok(bayer)
}

/// Pack an H x W mosaic into the (4, H/2, W/2) RGGB layout.
pub fn pack_rggb(bayer: &Array2<f64>) -> Result<Array3<f64>> {
    let (h, w) = bayer.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("pack_rggb needs even dims, got {h}x{w}")));
    }
    let mut out = Array3::zeros((4, h / 2, w / 2));
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            out[[0, i, j]] = bayer[[2 * i, 2 * j]];
            out[[1, i, j]] = bayer[[2 * i, 2 * j + 1]];
            out[[2, i, j]] = bayer[[2 * i + 1, 2 * j]];
            out[[3, i, j]] = bayer[[2 * i + 1, 2 * j + 1]];
        }
    }
    Ok(out)
}

/// Exact inverse of [`pack_rggb`].
pub fn unpack_rggb(packed: &Array3<f64>) -> Result<Array2<f64>> {
    let (c, hh, hw) = packed.dim();
    if c != 4 {
        return Err(Error::shape(format!("packed raw must have 4 channels, got {c}")));
    }
    let mut bayer = Array2::zeros((hh * 2, hw * 2));
    for i in 0..hh {
        for j in 0..hw {
            bayer[[2 * i, 2 * j]] = packed[[0, i, j]];
            bayer[[2 * i, 2 * j + 1]] = packed[[1, i, j]];
            bayer[[2 * i + 1, 2 * j]] = packed[[2, i, j]];
            bayer[[2 * i + 1, 2 * j + 1]] = packed[[3, i, j]];
        }
    }
    Ok(bayer)
}

/// Bilinear demosaic with mask-normalized integer kernels and replicate
/// padding. Constant mosaics come back constant in all three channels.
pub fn demosaic_bilinear(bayer: &Array2<f64>) -> Result<Array3<f64>> {
    let (h, w) = bayer.dim();
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("demosaic needs even dims, got {h}x{w}")));
    }
    // Kernels: cross for G, full 3x3 for R/B. Integer weights keep the
    // constant-input case exact up to a couple of ulp.
    const K_RB: [[f64; 3]; 3] = [[1.0, 2.0, 1.0], [2.0, 4.0, 2.0], [1.0, 2.0, 1.0]];
    const K_G: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, 4.0, 1.0], [0.0, 1.0, 0.0]];

    let chan_at = |y: usize, x: usize| -> usize {
        match (y % 2, x % 2) {
            (0, 0) => 0,
            (1, 1) => 2,
            _ => 1,
        }
    };

    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let k = if ch == 1 { &K_G } else { &K_RB };
                let mut num = 0.0;
                let mut den = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let wgt = k[(dy + 1) as usize][(dx + 1) as usize];
                        if wgt == 0.0 {
                            continue;
                        }
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        if chan_at(yy, xx) == ch {
                            num += wgt * bayer[[yy, xx]];
                            den += wgt;
                        }
                    }
                }
                debug_assert!(den > 0.0);
                out[[ch, y, x]] = num / den;
            }
        }
    }
    Ok(out)
}

/// Quantize to `bits` levels, rounding half away from zero, then map back
/// to [0,1]. Idempotent on already-quantized values.
pub fn quantize_unit(v: f64, bits: u8) -> f64 {
    let levels = ((1u32 << bits) - 1) as f64;
    (v.clamp(0.0, 1.0) * levels).round() / levels
}

/// Deterministic RAW -> RGB rendering: demosaic, white balance, clip, color
/// matrix, clip, power-law encode, quantize to rgb_bit_depth.
pub fn render_rgb(raw: &RawImage, params: &IspParams) -> Result<RgbImage> {
    params.validate()?;
    let bayer = unpack_rggb(&raw.data)?;
    let mut rgb = demosaic_bilinear(&bayer)?;

    for (ch, mut plane) in rgb.axis_iter_mut(Axis(0)).enumerate() {
        let g = params.wb_gains[ch];
        plane.mapv_inplace(|v| (v * g).clamp(0.0, 1.0));
    }

    let (_, h, w) = rgb.dim();
    for y in 0..h {
        for x in 0..w {
            let r = rgb[[0, y, x]];
            let g = rgb[[1, y, x]];
            let b = rgb[[2, y, x]];
            for ch in 0..3 {
                let row = &params.ccm[ch];
                let v = row[0] * r + row[1] * g + row[2] * b;
                rgb[[ch, y, x]] = v.clamp(0.0, 1.0);
            }
        }
    }

    rgb.mapv_inplace(|v| v.powf(params.gamma));
    rgb.mapv_inplace(|v| quantize_unit(v, params.rgb_bit_depth));
    RgbImage::new(rgb, params.rgb_bit_depth)
}

/// Deterministic toy scene: low-frequency gradients plus random rectangles
/// and disks, rescaled so every image spans a wide dynamic range.
pub fn synthesize_scene(seed: u64, size: (usize, usize)) -> Result<Array3<f64>> {
    let (h, w) = size;
    if h < 16 || w < 16 {
        return Err(Error::data(format!("scene size {h}x{w} below 16x16 minimum")));
    }
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(format!("scene needs even dims, got {h}x{w}")));
    }
    let mut rng = rng::stream(seed, "scene", 0);
    let mut img = Array3::zeros((3, h, w));

    // Smooth base: linear ramp plus one low-frequency sinusoid per channel.
    for ch in 0..3 {
        let a: f64 = rng.gen_range(0.2..0.8);
        let gx: f64 = rng.gen_range(-0.5..0.5);
        let gy: f64 = rng.gen_range(-0.5..0.5);
        let amp: f64 = rng.gen_range(0.05..0.25);
        let fx: f64 = rng.gen_range(0.5..2.0);
        let fy: f64 = rng.gen_range(0.5..2.0);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        for y in 0..h {
            for x in 0..w {
                let u = x as f64 / w as f64;
                let v = y as f64 / h as f64;
                let s = (std::f64::consts::TAU * (fx * u + fy * v) + phase).sin();
                img[[ch, y, x]] = a + gx * (u - 0.5) + gy * (v - 0.5) + amp * s;
            }
        }
    }

    // Random shapes with soft edges, composited over the base.
    let n_shapes = rng.gen_range(4..=8);
    for _ in 0..n_shapes {
        let color: [f64; 3] = [rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0), rng.gen_range(0.0..1.0)];
        let cx: f64 = rng.gen_range(0.1..0.9) * w as f64;
        let cy: f64 = rng.gen_range(0.1..0.9) * h as f64;
        let edge: f64 = rng.gen_range(0.75..2.5);
        let is_disk = rng.gen_bool(0.5);
        if is_disk {
            let radius: f64 = rng.gen_range(0.06..0.22) * w.min(h) as f64;
            for y in 0..h {
                for x in 0..w {
                    let d = ((x as f64 - cx).powi(2) + (y as f64 - cy).powi(2)).sqrt();
                    let t = smoothstep((radius - d) / edge);
                    if t > 0.0 {
                        blend(&mut img, y, x, &color, t);
                    }
                }
            }
        } else {
            let hw_: f64 = rng.gen_range(0.05..0.2) * w as f64;
            let hh_: f64 = rng.gen_range(0.05..0.2) * h as f64;
            for y in 0..h {
                for x in 0..w {
                    let dx = hw_ - (x as f64 - cx).abs();
                    let dy = hh_ - (y as f64 - cy).abs();
                    let t = smoothstep(dx.min(dy) / edge);
                    if t > 0.0 {
                        blend(&mut img, y, x, &color, t);
                    }
                }
            }
        }
    }

    // Rescale to a seed-chosen range inside [0,1]; guarantees per-image
    // dynamic range well above the 0.5 contract.
    let lo_t: f64 = rng.gen_range(0.02..0.12);
    let hi_t: f64 = rng.gen_range(0.88..0.98);
    let mut mn = f64::INFINITY;
    let mut mx = f64::NEG_INFINITY;
    for &v in img.iter() {
        mn = mn.min(v);
        mx = mx.max(v);
    }
    let span = (mx - mn).max(1e-12);
    img.mapv_inplace(|v| lo_t + (v - mn) / span * (hi_t - lo_t));
    Ok(img)
}

fn smoothstep(x: f64) -> f64 {
    let t = x.clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

fn blend(img: &mut Array3<f64>, y: usize, x: usize, color: &[f64; 3], t: f64) {
    for ch in 0..3 {
        let v = img[[ch, y, x]];
        img[[ch, y, x]] = v * (1.0 - t) + color[ch] * t;
    }
}
