//! Deterministic latent flow matching: straight-line interpolation between
//! paired latents, a constant target velocity, a guided velocity U-Net, and
//! Euler-integration inference. The stochastic variant (noise source instead
//! of the RGB latent) is kept as an ablation baseline.

use ndarray::{Array3, Array4};

use crate::data_isp::{RawImage, RgbImage};
use crate::dlae::{batch_of_one, unbatch, Dlae, Latent};
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Downsample, ResBlock};
use crate::nn::params::ParamStore;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::unet::{FeaturePyramid, UNet, UNetSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Deterministic,
    Stochastic,
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    /// Number of Euler steps K; step size is 1/K.
    pub steps: usize,
    pub variant: Variant,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            steps: 20,
            variant: Variant::Deterministic,
        }
    }
}

/// What conditions the velocity field.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    /// Full multi-scale context pyramid from the RGB image.
    Cross,
    /// Only the deepest (global) context level; shallower levels zeroed.
    Single,
    /// Guidance derived from the RGB latent instead of the image.
    Latent,
}

/// Elementwise t*z1 + (1-t)*z0. Exact at both endpoints.
pub fn interpolate(z0: &Latent, z1: &Latent, t: f64) -> Result<Latent> {
    if z0.dim() != z1.dim() {
        return Err(Error::shape(format!(
            "interpolate: {:?} vs {:?}",
            z0.shape(),
            z1.shape()
        )));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::numeric(format!("interpolation time {t} outside [0,1]")));
    }
    let mut out = Latent::zeros(z0.raw_dim());
    ndarray::Zip::from(&mut out)
        .and(z0)
        .and(z1)
        .for_each(|o, &a, &b| *o = t * b + (1.0 - t) * a);
    Ok(out)
}

/// Constant transport direction z1 - z0 (independent of t).
pub fn target_velocity(z0: &Latent, z1: &Latent) -> Result<Latent> {
    if z0.dim() != z1.dim() {
        return Err(Error::shape(format!(
            "target_velocity: {:?} vs {:?}",
            z0.shape(),
            z1.shape()
        )));
    }
    Ok(z1 - z0)
}

/// Ablation interpolant t*z1 + (1-t)*eps with a unit-Gaussian source.
pub fn stochastic_interpolate(z1: &Latent, eps: &Latent, t: f64) -> Result<Latent> {
    interpolate(eps, z1, t)
}

/// Mean squared velocity error.
pub fn flow_loss(pred: &Latent, target: &Latent) -> Result<f64> {
    if pred.dim() != target.dim() {
        return Err(Error::shape(format!(
            "flow_loss: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let mut acc = 0.0;
    for (a, b) in pred.iter().zip(target.iter()) {
        let d = a - b;
        acc += d * d;
    }
    Ok(acc / n)
}

/// Euler integration of an arbitrary velocity field from t=0 to t=1 with
/// left-endpoint times t_k = k/K. Aborts with the step index on non-finite
/// state.
pub fn euler_integrate_with(
    z0: &Latent,
    steps: usize,
    mut field: impl FnMut(&Latent, f64) -> Result<Latent>,
) -> Result<Latent> {
    if steps < 1 {
        return Err(Error::config("euler integration needs at least 1 step"));
    }
    let dt = 1.0 / steps as f64;
    let mut z = z0.clone();
    for k in 0..steps {
        let t = k as f64 / steps as f64;
        let v = field(&z, t)?;
        if v.dim() != z.dim() {
            return Err(Error::shape(format!(
                "velocity shape {:?} vs state {:?} at step {k}",
                v.shape(),
                z.shape()
            )));
        }
        z = &z + &(&v * dt);
        if z.iter().any(|x| !x.is_finite()) {
            return Err(Error::numeric(format!(
                "non-finite latent state at integration step {k}"
            )));
        }
    }
    Ok(z)
}

/// Residual stack + pyramid heads that turn the RGB image into guidance
/// levels matching the velocity U-Net scales (input/8, /16, /32).
pub struct ContextExtractor {
    stem: Downsample,
    r1: ResBlock,
    d1: Downsample,
    r2: ResBlock,
    d2: Downsample,
    head1: Conv2d,
    d3: Downsample,
    head2: Conv2d,
    d4: Downsample,
    head3: Conv2d,
}

impl ContextExtractor {
    pub fn new(store: &mut ParamStore, base: usize, out_channels: usize, rng: &mut dyn rand::RngCore) -> Self {
        let w = base;
        ContextExtractor {
            stem: Downsample::new(store, "dlfm.context.stem", 3, w, rng),
            r1: ResBlock::new(store, "dlfm.context.r1", w, 0, rng),
            d1: Downsample::new(store, "dlfm.context.d1", w, 2 * w, rng),
            r2: ResBlock::new(store, "dlfm.context.r2", 2 * w, 0, rng),
            d2: Downsample::new(store, "dlfm.context.d2", 2 * w, 2 * w, rng),
            head1: Conv2d::new(store, "dlfm.context.head1", 2 * w, out_channels, 3, 1, rng),
            d3: Downsample::new(store, "dlfm.context.d3", 2 * w, 2 * w, rng),
            head2: Conv2d::new(store, "dlfm.context.head2", 2 * w, out_channels, 3, 1, rng),
            d4: Downsample::new(store, "dlfm.context.d4", 2 * w, 2 * w, rng),
            head3: Conv2d::new(store, "dlfm.context.head3", 2 * w, out_channels, 3, 1, rng),
        }
    }

    pub fn forward_nodes(&self, tape: &mut Tape, store: &ParamStore, rgb: NodeId) -> Result<Vec<NodeId>> {
        let (_, c, h, w) = tape.value(rgb).dim();
        if c != 3 {
            return Err(Error::shape(format!("context extractor expects 3 channels, got {c}")));
        }
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::shape(format!(
                "context extractor input {h}x{w} must be divisible by 32"
            )));
        }
        let h1 = self.stem.forward(tape, store, rgb)?;
        let h1 = self.r1.forward(tape, store, h1, None)?;
        let h2 = self.d1.forward(tape, store, h1)?;
        let h2 = self.r2.forward(tape, store, h2, None)?;
        let h3 = self.d2.forward(tape, store, h2)?;
        let lvl1 = self.head1.forward(tape, store, h3)?;
        let h4 = self.d3.forward(tape, store, h3)?;
        let lvl2 = self.head2.forward(tape, store, h4)?;
        let h5 = self.d4.forward(tape, store, h4)?;
        let lvl3 = self.head3.forward(tape, store, h5)?;
        Ok(vec![lvl1, lvl2, lvl3])
    }
}

/// Guidance pyramid computed from the RGB latent (ablation mode).
pub struct LatentGuide {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
}

impl LatentGuide {
    pub fn new(store: &mut ParamStore, latent_channels: usize, out_channels: usize, rng: &mut dyn rand::RngCore) -> Self {
        LatentGuide {
            c1: Conv2d::new(store, "dlfm.latent_guide.c1", latent_channels, out_channels, 3, 1, rng),
            c2: Conv2d::new(store, "dlfm.latent_guide.c2", out_channels, out_channels, 3, 1, rng),
            c3: Conv2d::new(store, "dlfm.latent_guide.c3", out_channels, out_channels, 3, 1, rng),
        }
    }

    pub fn forward_nodes(&self, tape: &mut Tape, store: &ParamStore, z0: NodeId) -> Result<Vec<NodeId>> {
        let l1 = self.c1.forward(tape, store, z0)?;
        let l1a = tape.silu(l1);
        let p1 = tape.avg_pool2(l1a)?;
        let l2 = self.c2.forward(tape, store, p1)?;
        let l2a = tape.silu(l2);
        let p2 = tape.avg_pool2(l2a)?;
        let l3 = self.c3.forward(tape, store, p2)?;
        Ok(vec![l1, l2, l3])
    }
}

/// The flow module: velocity U-Net plus both guidance sources.
pub struct Dlfm {
    pub velocity_spec: UNetSpec,
    pub velocity: UNet,
    pub context: ContextExtractor,
    pub latent_guide: LatentGuide,
    pub guidance_channels: usize,
}

impl Dlfm {
    pub fn new(
        store: &mut ParamStore,
        velocity_spec: UNetSpec,
        context_base: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self> {
        velocity_spec.validate()?;
        let latent_channels = velocity_spec.in_channels;
        let guidance_channels = *velocity_spec
            .guidance_channels
            .first()
            .ok_or_else(|| Error::config("velocity spec needs guidance channels"))?;
        let velocity = UNet::new(store, "dlfm.velocity", velocity_spec.clone(), true, rng)?;
        let context = ContextExtractor::new(store, context_base, guidance_channels, rng);
        let latent_guide = LatentGuide::new(store, latent_channels, guidance_channels, rng);
        Ok(Dlfm {
            velocity_spec,
            velocity,
            context,
            latent_guide,
            guidance_channels,
        })
    }

    /// Build guidance nodes for a batch under the selected mode. `rgb` is the
    /// image batch; `z0` the RGB latent batch (used by Latent mode).
    pub fn guidance_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        mode: GuidanceMode,
        rgb: NodeId,
        z0: NodeId,
    ) -> Result<Vec<NodeId>> {
        match mode {
            GuidanceMode::Cross => self.context.forward_nodes(tape, store, rgb),
            GuidanceMode::Single => {
                let levels = self.context.forward_nodes(tape, store, rgb)?;
                let mut out = Vec::with_capacity(levels.len());
                for (i, &lvl) in levels.iter().enumerate() {
                    if i + 1 == levels.len() {
                        out.push(lvl);
                    } else {
                        let zeros = Array4::zeros(tape.value(lvl).raw_dim());
                        out.push(tape.constant(zeros));
                    }
                }
                Ok(out)
            }
            GuidanceMode::Latent => self.latent_guide.forward_nodes(tape, store, z0),
        }
    }

    /// Extract the guidance pyramid for one image (inference path).
    pub fn extract_context(&self, store: &ParamStore, img: &RgbImage) -> Result<FeaturePyramid> {
        let mut tape = Tape::new();
        let x = tape.constant(batch_of_one(&img.data));
        let nodes = self.context.forward_nodes(&mut tape, store, x)?;
        FeaturePyramid::new(nodes.iter().map(|&n| unbatch(tape.value(n))).collect())
    }

    /// Guidance pyramid as arrays under a mode, computed once per image and
    /// reused across all integration steps.
    pub fn guidance_arrays(
        &self,
        store: &ParamStore,
        mode: GuidanceMode,
        img: &RgbImage,
        z0: &Latent,
    ) -> Result<Vec<Array3<f64>>> {
        let mut tape = Tape::new();
        let rgb = tape.constant(batch_of_one(&img.data));
        let z0n = tape.constant(batch_of_one(z0));
        let nodes = self.guidance_nodes(&mut tape, store, mode, rgb, z0n)?;
        Ok(nodes.iter().map(|&n| unbatch(tape.value(n))).collect())
    }

    /// Single velocity evaluation v(z_t, t | guidance) for one image.
    pub fn predict_velocity(
        &self,
        store: &ParamStore,
        z_t: &Latent,
        t: f64,
        guidance: &[Array3<f64>],
    ) -> Result<Latent> {
        let mut tape = Tape::new();
        let z = tape.constant(batch_of_one(z_t));
        let g: Vec<NodeId> = guidance.iter().map(|a| tape.constant(batch_of_one(a))).collect();
        let v = self.velocity.forward(&mut tape, store, z, Some(&[t]), Some(&g))?;
        Ok(unbatch(tape.value(v)))
    }

    /// Euler-integrate the learned field from `z_start` under fixed guidance.
    pub fn integrate(
        &self,
        store: &ParamStore,
        z_start: &Latent,
        guidance: &[Array3<f64>],
        cfg: &SamplerConfig,
    ) -> Result<Latent> {
        euler_integrate_with(z_start, cfg.steps, |z, t| {
            self.predict_velocity(store, z, t, guidance)
        })
    }
}

/// Full RGB -> RAW reconstruction: encode, guide, integrate, decode.
/// `start_override` replaces the integration start (the stochastic ablation
/// passes its noise sample here); training and the deterministic path leave
/// it empty.
pub fn reconstruct(
    dlae: &Dlae,
    dlfm: &Dlfm,
    store: &ParamStore,
    img: &RgbImage,
    cfg: &SamplerConfig,
    mode: GuidanceMode,
    start_override: Option<&Latent>,
) -> Result<RawImage> {
    let (z0, f_rgb) = dlae.encode_rgb(store, img)?;
    let guidance = dlfm.guidance_arrays(store, mode, img, &z0)?;
    let start = start_override.unwrap_or(&z0);
    if start.dim() != z0.dim() {
        return Err(Error::shape(format!(
            "start latent {:?} vs encoder latent {:?}",
            start.shape(),
            z0.shape()
        )));
    }
    let z_final = dlfm.integrate(store, start, &guidance, cfg)?;
    dlae.decode_raw(store, &z_final, &f_rgb)
}
