//! Shared helpers for the integration suites: the finite-difference gradient
//! checks over every trainable block, and an independent brute-force SSIM.

use ndarray::{Array3, Array4};
use rand::Rng;

use rawflow_core::dlae::{
    feature_alignment_loss_nodes, reconstruction_loss_nodes, AlignmentSet,
};
use rawflow_core::nn::gradcheck::{fd_param_grad_sampled, rel_error, sample_coords, FD_STEP};
use rawflow_core::nn::layers::{Conv2d, Downsample, ResBlock, TimeEmbedding, Upsample};
use rawflow_core::nn::params::{Init, ParamId, ParamStore};
use rawflow_core::nn::phi::PhiNet;
use rawflow_core::nn::tape::Tape;
use rawflow_core::nn::unet::{UNet, UNetSpec};

pub const GRAD_TOL: f64 = 1e-4;
const MAX_COORDS: usize = 48;

pub struct GradCheckResult {
    pub name: String,
    pub rel_err: f64,
}

fn rand_arr(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
    let mut rng = rawflow_core::rng::stream(seed, "gradsuite", 0);
    let mut a = Array4::zeros(shape);
    for v in a.iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    a
}

/// Register an input tensor as a parameter so its gradient is observable.
fn input_param(store: &mut ParamStore, name: &str, value: Array4<f64>) -> ParamId {
    let id = store.register(name, value.dim(), Init::Zero);
    store.value_mut(id).assign(&value);
    id
}

/// Compare analytic gradients against central differences for every
/// parameter in `store`, on the scalar produced by `f`.
fn check_all_params(
    label: &str,
    store: &mut ParamStore,
    f: impl Fn(&ParamStore) -> f64,
    results: &mut Vec<GradCheckResult>,
    backward: impl Fn(&mut ParamStore),
) {
    store.zero_grads();
    backward(store);
    let ids = store.param_ids();
    let analytic: Vec<Array4<f64>> = ids.iter().map(|&id| store.grad(id).clone()).collect();
    store.zero_grads();
    for (i, &id) in ids.iter().enumerate() {
        let name = store.name_of(id).to_string();
        let len = store.value(id).len();
        let coords = sample_coords(len, MAX_COORDS, 7 + i as u64);
        let mut f_ref = |s: &ParamStore| f(s);
        let fd = fd_param_grad_sampled(store, id, &coords, FD_STEP, &mut f_ref);
        let err = rel_error(&analytic[i], &fd, Some(&coords));
        results.push(GradCheckResult {
            name: format!("{label}/{name}"),
            rel_err: err,
        });
    }
}

/// The full suite. Every entry's rel_err must be below GRAD_TOL.
pub fn run_gradient_suite() -> Vec<GradCheckResult> {
    let mut results = Vec::new();

    // conv3x3, stride 1 and 2, including the input path.
    for (label, stride) in [("conv3x3_s1", 1usize), ("conv3x3_s2", 2)] {
        let mut store = ParamStore::new();
        let mut rng = rawflow_core::rng::stream(1, label, 0);
        let conv = Conv2d::new(&mut store, "conv", 3, 4, 3, stride, &mut rng);
        let x = input_param(&mut store, "input", rand_arr((2, 3, 8, 8), 11));
        let fwd = |s: &ParamStore| {
            let mut tape = Tape::new();
            let xn = tape.param(s, x);
            let y = conv.forward(&mut tape, s, xn).unwrap();
            let sum = tape.sum(y);
            tape.scalar(sum)
        };
        check_all_params(label, &mut store, fwd, &mut results, |s| {
            let mut tape = Tape::new();
            let xn = tape.param(s, x);
            let y = conv.forward(&mut tape, s, xn).unwrap();
            let sum = tape.sum(y);
            tape.backward(sum, s).unwrap();
        });
    }

    // Residual block with time conditioning.
    {
        let mut store = ParamStore::new();
        let mut rng = rawflow_core::rng::stream(2, "res", 0);
        let te = TimeEmbedding::new(&mut store, "temb", 8, &mut rng);
        let block = ResBlock::new(&mut store, "res", 4, 8, &mut rng);
        let x = input_param(&mut store, "input", rand_arr((2, 4, 8, 8), 12));
        let ts = [0.3, 0.8];
        let fwd = |s: &ParamStore| {
            let mut tape = Tape::new();
            let emb = te.forward(&mut tape, s, &ts).unwrap();
            let xn = tape.param(s, x);
            let y = block.forward(&mut tape, s, xn, Some(emb)).unwrap();
            let sum = tape.sum(y);
            tape.scalar(sum)
        };
        check_all_params("resblock_time", &mut store, fwd, &mut results, |s| {
            let mut tape = Tape::new();
            let emb = te.forward(&mut tape, s, &ts).unwrap();
            let xn = tape.param(s, x);
            let y = block.forward(&mut tape, s, xn, Some(emb)).unwrap();
            let sum = tape.sum(y);
            tape.backward(sum, s).unwrap();
        });
    }

    // Downsample then upsample stack.
    {
        let mut store = ParamStore::new();
        let mut rng = rawflow_core::rng::stream(3, "updown", 0);
        let down = Downsample::new(&mut store, "down", 3, 6, &mut rng);
        let up = Upsample::new(&mut store, "up", 6, 3, &mut rng);
        let x = input_param(&mut store, "input", rand_arr((1, 3, 8, 8), 13));
        let fwd = |s: &ParamStore| {
            let mut tape = Tape::new();
            let xn = tape.param(s, x);
            let d = down.forward(&mut tape, s, xn).unwrap();
            let u = up.forward(&mut tape, s, d).unwrap();
            let sum = tape.sum(u);
            tape.scalar(sum)
        };
        check_all_params("down_up", &mut store, fwd, &mut results, |s| {
            let mut tape = Tape::new();
            let xn = tape.param(s, x);
            let d = down.forward(&mut tape, s, xn).unwrap();
            let u = up.forward(&mut tape, s, d).unwrap();
            let sum = tape.sum(u);
            tape.backward(sum, s).unwrap();
        });
    }

    // Full U-Net with time and guidance at every scale.
    {
        let mut store = ParamStore::new();
        let mut rng = rawflow_core::rng::stream(4, "unet", 0);
        let spec = UNetSpec {
            in_channels: 3,
            out_channels: 3,
            base_width: 8,
            num_scales: 3,
            time_embed_dim: 8,
            guidance_channels: vec![2, 2, 2],
        };
        let unet = UNet::new(&mut store, "unet", spec, false, &mut rng).unwrap();
        let x = input_param(&mut store, "input", rand_arr((1, 3, 8, 8), 14));
        let g0 = input_param(&mut store, "guidance0", rand_arr((1, 2, 8, 8), 15));
        let g1 = input_param(&mut store, "guidance1", rand_arr((1, 2, 4, 4), 16));
        let g2 = input_param(&mut store, "guidance2", rand_arr((1, 2, 2, 2), 17));
        let ts = [0.45];
        let fwd = |s: &ParamStore| {
            let mut tape = Tape::new();
            let xn = tape.param(s, x);
            let gs = [tape.param(s, g0), tape.param(s, g1), tape.param(s, g2)];
            let y = unet.forward(&mut tape, s, xn, Some(&ts), Some(&gs)).unwrap();
            let sum = tape.sum(y);
            tape.scalar(sum)
        };
        check_all_params("unet", &mut store, fwd, &mut results, |s| {
            let mut tape = Tape::new();
            let xn = tape.param(s, x);
            let gs = [tape.param(s, g0), tape.param(s, g1), tape.param(s, g2)];
            let y = unet.forward(&mut tape, s, xn, Some(&ts), Some(&gs)).unwrap();
            let sum = tape.sum(y);
            tape.backward(sum, s).unwrap();
        });
    }

    // Flow loss (MSE to a fixed target) through the prediction argument.
    {
        let mut store = ParamStore::new();
        let pred = input_param(&mut store, "pred", rand_arr((1, 4, 8, 8), 18));
        let target = rand_arr((1, 4, 8, 8), 19);
        let fwd = |s: &ParamStore| {
            let mut tape = Tape::new();
            let p = tape.param(s, pred);
            let t = tape.constant(target.clone());
            let l = tape.mse_loss(p, t).unwrap();
            tape.scalar(l)
        };
        check_all_params("flow_loss", &mut store, fwd, &mut results, |s| {
            let mut tape = Tape::new();
            let p = tape.param(s, pred);
            let t = tape.constant(target.clone());
            let l = tape.mse_loss(p, t).unwrap();
            tape.backward(l, s).unwrap();
        });
    }

    // L1 loss (used by end-to-end fine-tuning).
    {
        let mut store = ParamStore::new();
        let pred = input_param(&mut store, "pred", rand_arr((1, 4, 8, 8), 20));
        let target = rand_arr((1, 4, 8, 8), 21);
        let fwd = |s: &ParamStore| {
            let mut tape = Tape::new();
            let p = tape.param(s, pred);
            let t = tape.constant(target.clone());
            let l = tape.l1_loss(p, t).unwrap();
            tape.scalar(l)
        };
        check_all_params("l1_loss", &mut store, fwd, &mut results, |s| {
            let mut tape = Tape::new();
            let p = tape.param(s, pred);
            let t = tape.constant(target.clone());
            let l = tape.l1_loss(p, t).unwrap();
            tape.backward(l, s).unwrap();
        });
    }

    // Feature alignment loss through the RAW-side features.
    {
        let mut store = ParamStore::new();
        let f_raw0 = input_param(&mut store, "f_raw0", rand_arr((1, 3, 4, 4), 22));
        let f_raw1 = input_param(&mut store, "f_raw1", rand_arr((1, 6, 2, 2), 23));
        let f_rgb0 = rand_arr((1, 3, 8, 8), 24);
        let f_rgb1 = rand_arr((1, 6, 4, 4), 25);
        let fwd = |s: &ParamStore| {
            let mut tape = Tape::new();
            let raw = [tape.param(s, f_raw0), tape.param(s, f_raw1)];
            let rgb = [tape.constant(f_rgb0.clone()), tape.constant(f_rgb1.clone())];
            let l = feature_alignment_loss_nodes(&mut tape, &raw, &rgb, &AlignmentSet::default()).unwrap();
            tape.scalar(l)
        };
        check_all_params("alignment_loss", &mut store, fwd, &mut results, |s| {
            let mut tape = Tape::new();
            let raw = [tape.param(s, f_raw0), tape.param(s, f_raw1)];
            let rgb = [tape.constant(f_rgb0.clone()), tape.constant(f_rgb1.clone())];
            let l = feature_alignment_loss_nodes(&mut tape, &raw, &rgb, &AlignmentSet::default()).unwrap();
            tape.backward(l, s).unwrap();
        });
    }

    // Reconstruction loss (pixel + perceptual) for 3- and 4-channel inputs;
    // gradient flows through the prediction into the frozen extractor.
    let phi = PhiNet::new(0xfeed);
    for (label, channels) in [("recon_loss_rgb", 3usize), ("recon_loss_raw", 4)] {
        let mut store = ParamStore::new();
        let pred = input_param(
            &mut store,
            "pred",
            rand_arr((1, channels, 8, 8), 26 + channels as u64).mapv(f64::abs),
        );
        let target = rand_arr((1, channels, 8, 8), 28 + channels as u64).mapv(f64::abs);
        let fwd = |s: &ParamStore| {
            let mut tape = Tape::new();
            let p = tape.param(s, pred);
            let t = tape.constant(target.clone());
            let l = reconstruction_loss_nodes(&mut tape, &phi, p, t, 0.01).unwrap();
            tape.scalar(l)
        };
        check_all_params(label, &mut store, fwd, &mut results, |s| {
            let mut tape = Tape::new();
            let p = tape.param(s, pred);
            let t = tape.constant(target.clone());
            let l = reconstruction_loss_nodes(&mut tape, &phi, p, t, 0.01).unwrap();
            tape.backward(l, s).unwrap();
        });
    }

    results
}

/// Straightforward windowed SSIM: direct weighted moments per window.
/// Independent of the library implementation.
pub fn ssim_brute_force(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    use rawflow_core::metrics::{SSIM_K1, SSIM_K2, SSIM_SIGMA, SSIM_WINDOW};
    let (c, h, w) = a.dim();
    let half = (SSIM_WINDOW / 2) as f64;
    let mut k1d = [0.0; 11];
    for (i, v) in k1d.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = k1d.iter().sum();
    for v in k1d.iter_mut() {
        *v /= s;
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
                        let wgt = k1d[dy] * k1d[dx];
                        mu_a += wgt * a[[ch, y0 + dy, x0 + dx]];
                        mu_b += wgt * b[[ch, y0 + dy, x0 + dx]];
                    }
                }
                let mut saa = 0.0;
                let mut sbb = 0.0;
                let mut sab = 0.0;
                for dy in 0..SSIM_WINDOW {
                    for dx in 0..SSIM_WINDOW {
                        let wgt = k1d[dy] * k1d[dx];
                        let da = a[[ch, y0 + dy, x0 + dx]] - mu_a;
                        let db = b[[ch, y0 + dy, x0 + dx]] - mu_b;
                        saa += wgt * da * da;
                        sbb += wgt * db * db;
                        sab += wgt * da * db;
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
