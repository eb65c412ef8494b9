//! PSNR and SSIM in the RAW domain and on rendered RGB outputs.
//!
//! SSIM is the canonical single-scale formulation: 11x11 Gaussian window
//! (sigma 1.5), K1=0.01, K2=0.03, dynamic range 1.0, valid-position windows,
//! channel-averaged. The constants are frozen here rather than configurable
//! so reported numbers are comparable across runs.

use std::io::Write;
use std::path::Path;

use ndarray::{Array2, Array3};

use crate::data_isp::{render_rgb, IspParams, RawImage};
use crate::error::{Error, Result};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

/// Pairwise (tree) summation: O(log n) rounding error instead of O(n).
fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 8 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// 10*log10(peak^2 / MSE). Identical inputs give +inf, which callers must
/// exclude from means.
pub fn psnr(a: &Array3<f64>, b: &Array3<f64>, peak: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("psnr: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let sq: Vec<f64> = a
        .iter()
        .zip(b.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .collect();
    let mse = pairwise_sum(&sq) / sq.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(20.0 * peak.log10() - 10.0 * mse.log10())
}

fn gaussian_kernel_1d() -> Vec<f64> {
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = k.iter().sum();
    for v in k.iter_mut() {
        *v /= s;
    }
    k
}

/// Valid-mode separable Gaussian filter; output is (H-10) x (W-10).
fn gaussian_filter_valid(img: &Array2<f64>, k: &[f64]) -> Array2<f64> {
    let (h, w) = img.dim();
    let kw = k.len();
    let mut rows = Array2::zeros((h, w - kw + 1));
    for y in 0..h {
        for x in 0..w - kw + 1 {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * img[[y, x + i]];
            }
            rows[[y, x]] = acc;
        }
    }
    let mut out = Array2::zeros((h - kw + 1, w - kw + 1));
    for y in 0..h - kw + 1 {
        for x in 0..w - kw + 1 {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[[y + i, x]];
            }
            out[[y, x]] = acc;
        }
    }
    out
}

/// Channel-averaged single-scale SSIM over all valid window positions.
pub fn ssim(a: &Array3<f64>, b: &Array3<f64>) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::shape(format!("ssim: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (c, h, w) = a.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::shape(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let k = gaussian_kernel_1d();
    let c1 = (SSIM_K1 * 1.0_f64).powi(2);
    let c2 = (SSIM_K2 * 1.0_f64).powi(2);
    let mut total = 0.0;
    for ch in 0..c {
        let pa = a.index_axis(ndarray::Axis(0), ch).to_owned();
        let pb = b.index_axis(ndarray::Axis(0), ch).to_owned();
        let mu_a = gaussian_filter_valid(&pa, &k);
        let mu_b = gaussian_filter_valid(&pb, &k);
        let e_aa = gaussian_filter_valid(&(&pa * &pa), &k);
        let e_bb = gaussian_filter_valid(&(&pb * &pb), &k);
        let e_ab = gaussian_filter_valid(&(&pa * &pb), &k);
        let mut acc = 0.0;
        let (vh, vw) = mu_a.dim();
        for y in 0..vh {
            for x in 0..vw {
                let ma = mu_a[[y, x]];
                let mb = mu_b[[y, x]];
                let saa = e_aa[[y, x]] - ma * ma;
                let sbb = e_bb[[y, x]] - mb * mb;
                let sab = e_ab[[y, x]] - ma * mb;
                let num = (2.0 * ma * mb + c1) * (2.0 * sab + c2);
                let den = (ma * ma + mb * mb + c1) * (saa + sbb + c2);
                acc += num / den;
            }
        }
        total += acc / (vh * vw) as f64;
    }
    Ok(total / c as f64)
}

/// One evaluated pair: metrics on the packed RAW arrays plus metrics on
/// both sides rendered through the same ISP.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalRow {
    pub name: String,
    pub psnr_raw: f64,
    pub ssim_raw: f64,
    pub psnr_rgb: f64,
    pub ssim_rgb: f64,
}

pub fn evaluate(name: &str, pred: &RawImage, gt: &RawImage, isp: &IspParams) -> Result<EvalRow> {
    if pred.data.dim() != gt.data.dim() {
        return Err(Error::shape(format!(
            "evaluate: pred {:?} vs gt {:?}",
            pred.data.shape(),
            gt.data.shape()
        )));
    }
    let psnr_raw = psnr(&pred.data, &gt.data, 1.0)?;
    let ssim_raw = ssim(&pred.data, &gt.data)?;
    let pred_rgb = render_rgb(pred, isp)?;
    let gt_rgb = render_rgb(gt, isp)?;
    let psnr_rgb = psnr(&pred_rgb.data, &gt_rgb.data, 1.0)?;
    let ssim_rgb = ssim(&pred_rgb.data, &gt_rgb.data)?;
    Ok(EvalRow {
        name: name.to_string(),
        psnr_raw,
        ssim_raw,
        psnr_rgb,
        ssim_rgb,
    })
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
    pub mean_psnr_raw: f64,
    pub mean_ssim_raw: f64,
    pub mean_psnr_rgb: f64,
    pub mean_ssim_rgb: f64,
    pub count: usize,
    pub config_fingerprint: String,
}

impl EvalReport {
    /// Aggregate rows; infinite PSNR entries are excluded from PSNR means
    /// with a warning (SSIM means always use every row).
    pub fn from_rows(rows: Vec<EvalRow>, config_fingerprint: &str) -> Result<Self> {
        if rows.is_empty() {
            return Err(Error::data("evaluation produced no rows"));
        }
        let mean_of = |sel: &dyn Fn(&EvalRow) -> f64, excl_inf: bool| -> f64 {
            let vals: Vec<f64> = rows
                .iter()
                .map(sel)
                .filter(|v| !excl_inf || v.is_finite())
                .collect();
            if vals.is_empty() {
                f64::INFINITY
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let n_inf = rows.iter().filter(|r| !r.psnr_raw.is_finite()).count();
        if n_inf > 0 {
            log::warn!("{n_inf} identical pairs excluded from PSNR means");
        }
        Ok(EvalReport {
            mean_psnr_raw: mean_of(&|r| r.psnr_raw, true),
            mean_ssim_raw: mean_of(&|r| r.ssim_raw, false),
            mean_psnr_rgb: mean_of(&|r| r.psnr_rgb, true),
            mean_ssim_rgb: mean_of(&|r| r.ssim_rgb, false),
            count: rows.len(),
            config_fingerprint: config_fingerprint.to_string(),
            rows,
        })
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("name,psnr_raw,ssim_raw,psnr_rgb,ssim_rgb\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.name, r.psnr_raw, r.ssim_raw, r.psnr_rgb, r.ssim_rgb
            ));
        }
        out.push_str(&format!(
            "mean,{},{},{},{}\n",
            self.mean_psnr_raw, self.mean_ssim_raw, self.mean_psnr_rgb, self.mean_ssim_rgb
        ));
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let summary = serde_json::json!({
            "count": self.count,
            "config_fingerprint": self.config_fingerprint,
            "mean_psnr_raw": finite_or_null(self.mean_psnr_raw),
            "mean_ssim_raw": self.mean_ssim_raw,
            "mean_psnr_rgb": finite_or_null(self.mean_psnr_rgb),
            "mean_ssim_rgb": self.mean_ssim_rgb,
        });
        let text = serde_json::to_string_pretty(&summary)
            .map_err(|e| Error::data(format!("summary serialization: {e}")))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else {
        serde_json::Value::Null
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    #[test]
    fn psnr_fixture_twenty_db() {
        let a = Array3::from_elem((1, 8, 8), 0.1);
        let b = Array3::zeros((1, 8, 8));
        let p = psnr(&a, &b, 1.0).unwrap();
        assert_eq!(p, 20.0, "expected exactly 20 dB, got {p}");
    }

    #[test]
    fn psnr_identity_is_infinite() {
        let a = Array3::from_elem((3, 4, 4), 0.3);
        assert!(psnr(&a, &a, 1.0).unwrap().is_infinite());
    }

    #[test]
    fn psnr_unit_mse_is_zero_db() {
        let a = Array3::zeros((1, 4, 4));
        let b = Array3::ones((1, 4, 4));
        assert_eq!(psnr(&a, &b, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn psnr_decreases_with_noise_amplitude() {
        let base = crate::data_isp::synthesize_scene(3, (16, 16)).unwrap();
        let mut rng = crate::rng::stream(4, "noise", 0);
        let noise: Array3<f64> = {
            let mut n = Array3::zeros(base.dim());
            for v in n.iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            n
        };
        let mut prev = f64::INFINITY;
        for &amp in &[0.01, 0.05, 0.2] {
            let noisy = &base + &(&noise * amp);
            let p = psnr(&base, &noisy, 1.0).unwrap();
            assert!(p < prev, "psnr did not decrease at amplitude {amp}");
            prev = p;
        }
    }

    /// Straightforward windowed SSIM, computed directly from weighted
    /// moments around each window. Kept intentionally naive.
    fn ssim_brute_force(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
        let (c, h, w) = a.dim();
        let k1d = gaussian_kernel_1d();
        let mut win = vec![vec![0.0; SSIM_WINDOW]; SSIM_WINDOW];
        for (i, row) in win.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = k1d[i] * k1d[j];
            }
        }
        let c1 = SSIM_K1 * SSIM_K1;
        let c2 = SSIM_K2 * SSIM_K2;
        let mut total = 0.0;
        for ch in 0..c {
            let mut acc = 0.0;
            let mut count = 0usize;
            for y0 in 0..=(h - SSIM_WINDOW) {
                for x0 in 0..=(w - SSIM_WINDOW) {
                    let mut mu_a = 0.0;
                    let mut mu_b = 0.0;
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            mu_a += win[dy][dx] * a[[ch, y0 + dy, x0 + dx]];
                            mu_b += win[dy][dx] * b[[ch, y0 + dy, x0 + dx]];
                        }
                    }
                    let mut saa = 0.0;
                    let mut sbb = 0.0;
                    let mut sab = 0.0;
                    for dy in 0..SSIM_WINDOW {
                        for dx in 0..SSIM_WINDOW {
                            let da = a[[ch, y0 + dy, x0 + dx]] - mu_a;
                            let db = b[[ch, y0 + dy, x0 + dx]] - mu_b;
                            saa += win[dy][dx] * da * da;
                            sbb += win[dy][dx] * db * db;
                            sab += win[dy][dx] * da * db;
                        }
                    }
                    let num = (2.0 * mu_a * mu_b + c1) * (2.0 * sab + c2);
                    let den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2);
                    acc += num / den;
                    count += 1;
                }
            }
            total += acc / count as f64;
        }
        total / c as f64
    }

    fn random_image(seed: u64, c: usize, h: usize, w: usize) -> Array3<f64> {
        let mut rng = crate::rng::stream(seed, "metrics-img", 0);
        let mut a = Array3::zeros((c, h, w));
        for v in a.iter_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        a
    }

    #[test]
    fn ssim_identity_is_one() {
        let a = random_image(1, 3, 16, 16);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn ssim_is_symmetric() {
        let a = random_image(2, 1, 16, 16);
        let b = random_image(3, 1, 16, 16);
        let d = (ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs();
        assert!(d < 1e-12);
    }

    #[test]
    fn ssim_matches_brute_force_reference() {
        for seed in 0..10 {
            let a = random_image(100 + seed, 2, 32, 32);
            let b = random_image(200 + seed, 2, 32, 32);
            let fast = ssim(&a, &b).unwrap();
            let slow = ssim_brute_force(&a, &b);
            assert!(
                (fast - slow).abs() < 1e-6,
                "seed {seed}: {fast} vs reference {slow}"
            );
            assert!((-1.0..=1.0).contains(&fast));
        }
    }

    #[test]
    fn ssim_negative_on_inverted_binary_pattern() {
        // Checkerboard against its inversion: anti-correlated structure.
        let mut a = Array3::zeros((1, SSIM_WINDOW, SSIM_WINDOW));
        for y in 0..SSIM_WINDOW {
            for x in 0..SSIM_WINDOW {
                a[[0, y, x]] = ((x + y) % 2) as f64;
            }
        }
        let b = a.mapv(|v| 1.0 - v);
        let s = ssim(&a, &b).unwrap();
        let s_ref = ssim_brute_force(&a, &b);
        assert!(s < 0.0, "expected negative ssim, got {s}");
        assert!((s - s_ref).abs() < 1e-6);
    }

    #[test]
    fn ssim_rejects_small_images() {
        let a = random_image(5, 1, 8, 8);
        assert!(ssim(&a, &a).is_err());
    }

    #[test]
    fn evaluate_identity_pair() {
        let scene = crate::data_isp::synthesize_scene(9, (32, 32)).unwrap();
        let packed = crate::data_isp::pack_rggb(&crate::data_isp::mosaic(&scene).unwrap()).unwrap();
        let raw = RawImage::new(packed, 12).unwrap();
        let row = evaluate("x", &raw, &raw, &IspParams::default()).unwrap();
        assert!(row.psnr_raw.is_infinite());
        assert_eq!(row.ssim_raw, 1.0);
        assert!(row.psnr_rgb.is_infinite());
        assert_eq!(row.ssim_rgb, 1.0);
    }

    #[test]
    fn evaluate_domains_differ_for_nonlinear_isp() {
        let scene_a = crate::data_isp::synthesize_scene(10, (32, 32)).unwrap();
        let scene_b = crate::data_isp::synthesize_scene(11, (32, 32)).unwrap();
        let to_raw = |s: &Array3<f64>| {
            RawImage::new(
                crate::data_isp::pack_rggb(&crate::data_isp::mosaic(s).unwrap()).unwrap(),
                12,
            )
            .unwrap()
        };
        let row = evaluate("x", &to_raw(&scene_a), &to_raw(&scene_b), &IspParams::default()).unwrap();
        assert!((row.psnr_raw - row.psnr_rgb).abs() > 1e-6);
    }

    #[test]
    fn report_means_are_order_independent() {
        let rows = |rev: bool| {
            let mut v = vec![
                EvalRow { name: "a".into(), psnr_raw: 20.0, ssim_raw: 0.8, psnr_rgb: 21.0, ssim_rgb: 0.81 },
                EvalRow { name: "b".into(), psnr_raw: 30.0, ssim_raw: 0.9, psnr_rgb: 31.0, ssim_rgb: 0.91 },
                EvalRow { name: "c".into(), psnr_raw: 25.0, ssim_raw: 0.85, psnr_rgb: 26.0, ssim_rgb: 0.86 },
            ];
            if rev {
                v.reverse();
            }
            v
        };
        let fwd = EvalReport::from_rows(rows(false), "fp").unwrap();
        let rev = EvalReport::from_rows(rows(true), "fp").unwrap();
        assert_eq!(fwd.mean_psnr_raw, rev.mean_psnr_raw);
        assert_eq!(fwd.mean_ssim_rgb, rev.mean_ssim_rgb);
    }

    #[test]
    fn report_excludes_infinite_psnr_from_means() {
        let rows = vec![
            EvalRow { name: "a".into(), psnr_raw: 30.0, ssim_raw: 0.9, psnr_rgb: 31.0, ssim_rgb: 0.95 },
            EvalRow { name: "b".into(), psnr_raw: f64::INFINITY, ssim_raw: 1.0, psnr_rgb: f64::INFINITY, ssim_rgb: 1.0 },
        ];
        let rep = EvalReport::from_rows(rows, "fp").unwrap();
        assert_eq!(rep.mean_psnr_raw, 30.0);
        assert!((rep.mean_ssim_raw - 0.95).abs() < 1e-12);
    }
}
