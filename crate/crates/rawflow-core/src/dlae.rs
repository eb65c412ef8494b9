//! Dual-domain latent autoencoder: paired RGB and RAW encoder/decoders
//! sharing one latent grid. The RGB branch downsamples 8x from full
//! resolution and the RAW branch 4x from the half-resolution packed grid, so
//! paired latents always line up. Shallow RGB encoder features are injected
//! into matching RAW decoder scales, and a feature alignment penalty pulls
//! shallow RAW encoder features toward their RGB counterparts.

use ndarray::{Array3, Array4, Axis};

use crate::data_isp::{RawImage, RgbImage};
use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Downsample, ResBlock, Upsample};
use crate::nn::params::ParamStore;
use crate::nn::phi::PhiNet;
use crate::nn::tape::{NodeId, Tape};
use crate::nn::unet::FeaturePyramid;

/// h x w x c latent grid carried through the flow module.
pub type Latent = Array3<f64>;

/// Paired latents from the two encoders; shapes always match.
#[derive(Debug, Clone)]
pub struct LatentPair {
    pub rgb: Latent,
    pub raw: Latent,
}

impl LatentPair {
    pub fn new(rgb: Latent, raw: Latent) -> Result<Self> {
        if rgb.dim() != raw.dim() {
            return Err(Error::shape(format!(
                "latent pair mismatch: {:?} vs {:?}",
                rgb.shape(),
                raw.shape()
            )));
        }
        if rgb.iter().chain(raw.iter()).any(|v| !v.is_finite()) {
            return Err(Error::numeric("latent pair contains non-finite values"));
        }
        Ok(LatentPair { rgb, raw })
    }
}

/// Shallow encoder scales used for alignment and decoder injection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AlignmentSet {
    pub layer_ids: Vec<usize>,
}

impl Default for AlignmentSet {
    fn default() -> Self {
        AlignmentSet { layer_ids: vec![0, 1] }
    }
}

impl AlignmentSet {
    pub fn validate(&self, num_shallow: usize) -> Result<()> {
        if self.layer_ids.is_empty() {
            return Err(Error::config("alignment set must be nonempty"));
        }
        if self.layer_ids.iter().any(|&i| i >= num_shallow) {
            return Err(Error::config(format!(
                "alignment layer out of range (have {num_shallow} shallow layers)"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DlaeSpec {
    pub latent_channels: usize,
    pub base_width: usize,
    pub zero_init_decoders: bool,
}

/// Number of shallow scales exposed by both encoders.
pub const NUM_SHALLOW: usize = 2;

struct RgbEncoder {
    stem: Downsample,
    b1: ResBlock,
    d1: Downsample,
    b2: ResBlock,
    d2: Downsample,
    b3: ResBlock,
    head: Conv2d,
}

struct RawEncoder {
    stem: Downsample,
    b1: ResBlock,
    d1: Downsample,
    b2: ResBlock,
    b3: ResBlock,
    head: Conv2d,
}

struct RgbDecoder {
    inc: Conv2d,
    b0: ResBlock,
    u1: Upsample,
    b1: ResBlock,
    u2: Upsample,
    b2: ResBlock,
    u3: Upsample,
    b3: ResBlock,
    out: Conv2d,
}

struct RawDecoder {
    inc: Conv2d,
    b0: ResBlock,
    u1: Upsample,
    fuse1: Conv2d,
    b1: ResBlock,
    u2: Upsample,
    fuse2: Conv2d,
    b2: ResBlock,
    b3: ResBlock,
    out: Conv2d,
}

pub struct Dlae {
    pub spec: DlaeSpec,
    enc_rgb: RgbEncoder,
    enc_raw: RawEncoder,
    dec_rgb: RgbDecoder,
    dec_raw: RawDecoder,
}

impl Dlae {
    pub fn new(store: &mut ParamStore, spec: DlaeSpec, rng: &mut dyn rand::RngCore) -> Self {
        let w = spec.base_width;
        let c = spec.latent_channels;
        let tail = 8.max(w / 2);
        let enc_rgb = RgbEncoder {
            stem: Downsample::new(store, "dlae.rgb_enc.stem", 3, w, rng),
            b1: ResBlock::new(store, "dlae.rgb_enc.b1", w, 0, rng),
            d1: Downsample::new(store, "dlae.rgb_enc.d1", w, 2 * w, rng),
            b2: ResBlock::new(store, "dlae.rgb_enc.b2", 2 * w, 0, rng),
            d2: Downsample::new(store, "dlae.rgb_enc.d2", 2 * w, 4 * w, rng),
            b3: ResBlock::new(store, "dlae.rgb_enc.b3", 4 * w, 0, rng),
            head: Conv2d::new(store, "dlae.rgb_enc.head", 4 * w, c, 3, 1, rng),
        };
        let enc_raw = RawEncoder {
            stem: Downsample::new(store, "dlae.raw_enc.stem", 4, w, rng),
            b1: ResBlock::new(store, "dlae.raw_enc.b1", w, 0, rng),
            d1: Downsample::new(store, "dlae.raw_enc.d1", w, 2 * w, rng),
            b2: ResBlock::new(store, "dlae.raw_enc.b2", 2 * w, 0, rng),
            b3: ResBlock::new(store, "dlae.raw_enc.b3", 2 * w, 0, rng),
            head: Conv2d::new(store, "dlae.raw_enc.head", 2 * w, c, 3, 1, rng),
        };
        let dec_rgb = RgbDecoder {
            inc: Conv2d::new(store, "dlae.rgb_dec.inc", c, 4 * w, 3, 1, rng),
            b0: ResBlock::new(store, "dlae.rgb_dec.b0", 4 * w, 0, rng),
            u1: Upsample::new(store, "dlae.rgb_dec.u1", 4 * w, 2 * w, rng),
            b1: ResBlock::new(store, "dlae.rgb_dec.b1", 2 * w, 0, rng),
            u2: Upsample::new(store, "dlae.rgb_dec.u2", 2 * w, w, rng),
            b2: ResBlock::new(store, "dlae.rgb_dec.b2", w, 0, rng),
            u3: Upsample::new(store, "dlae.rgb_dec.u3", w, tail, rng),
            b3: ResBlock::new(store, "dlae.rgb_dec.b3", tail, 0, rng),
            out: if spec.zero_init_decoders {
                Conv2d::new_zeroed(store, "dlae.rgb_dec.out", tail, 3, 3)
            } else {
                Conv2d::new(store, "dlae.rgb_dec.out", tail, 3, 3, 1, rng)
            },
        };
        let dec_raw = RawDecoder {
            inc: Conv2d::new(store, "dlae.raw_dec.inc", c, 4 * w, 3, 1, rng),
            b0: ResBlock::new(store, "dlae.raw_dec.b0", 4 * w, 0, rng),
            u1: Upsample::new(store, "dlae.raw_dec.u1", 4 * w, 2 * w, rng),
            fuse1: Conv2d::new(store, "dlae.raw_dec.fuse1", 4 * w, 2 * w, 3, 1, rng),
            b1: ResBlock::new(store, "dlae.raw_dec.b1", 2 * w, 0, rng),
            u2: Upsample::new(store, "dlae.raw_dec.u2", 2 * w, w, rng),
            fuse2: Conv2d::new(store, "dlae.raw_dec.fuse2", 2 * w, 2 * w, 3, 1, rng),
            b2: ResBlock::new(store, "dlae.raw_dec.b2", 2 * w, 0, rng),
            b3: ResBlock::new(store, "dlae.raw_dec.b3", 2 * w, 0, rng),
            out: if spec.zero_init_decoders {
                Conv2d::new_zeroed(store, "dlae.raw_dec.out", 2 * w, 4, 3)
            } else {
                Conv2d::new(store, "dlae.raw_dec.out", 2 * w, 4, 3, 1, rng)
            },
        };
        Dlae {
            spec,
            enc_rgb,
            enc_raw,
            dec_rgb,
            dec_raw,
        }
    }

    /// RGB encoder on tape nodes: returns (latent, [shallow features]).
    /// Features come back at their native scales: level 0 at input/2 with
    /// base_width channels, level 1 at input/4 with 2*base_width.
    pub fn encode_rgb_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let (_, c, h, w) = tape.value(x).dim();
        if c != 3 {
            return Err(Error::shape(format!("rgb encoder expects 3 channels, got {c}")));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::shape(format!("rgb dims {h}x{w} must be divisible by 8")));
        }
        let e = &self.enc_rgb;
        let h1 = e.stem.forward(tape, store, x)?;
        let f1 = e.b1.forward(tape, store, h1, None)?;
        let h2 = e.d1.forward(tape, store, f1)?;
        let f2 = e.b2.forward(tape, store, h2, None)?;
        let h3 = e.d2.forward(tape, store, f2)?;
        let h3 = e.b3.forward(tape, store, h3, None)?;
        let z = e.head.forward(tape, store, h3)?;
        Ok((z, vec![f1, f2]))
    }

    /// RAW encoder; shallow features at input/2 and input/4 of the packed
    /// grid, matching the RGB features after one 2x average pool.
    pub fn encode_raw_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let (_, c, h, w) = tape.value(x).dim();
        if c != 4 {
            return Err(Error::shape(format!("raw encoder expects 4 channels, got {c}")));
        }
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::shape(format!("raw dims {h}x{w} must be divisible by 4")));
        }
        let e = &self.enc_raw;
        let h1 = e.stem.forward(tape, store, x)?;
        let f1 = e.b1.forward(tape, store, h1, None)?;
        let h2 = e.d1.forward(tape, store, f1)?;
        let f2 = e.b2.forward(tape, store, h2, None)?;
        let h3 = e.b3.forward(tape, store, f2, None)?;
        let z = e.head.forward(tape, store, h3)?;
        Ok((z, vec![f1, f2]))
    }

    pub fn decode_rgb_nodes(&self, tape: &mut Tape, store: &ParamStore, z: NodeId) -> Result<NodeId> {
        let d = &self.dec_rgb;
        let h = d.inc.forward(tape, store, z)?;
        let h = tape.silu(h);
        let h = d.b0.forward(tape, store, h, None)?;
        let h = d.u1.forward(tape, store, h)?;
        let h = d.b1.forward(tape, store, h, None)?;
        let h = d.u2.forward(tape, store, h)?;
        let h = d.b2.forward(tape, store, h, None)?;
        let h = d.u3.forward(tape, store, h)?;
        let h = d.b3.forward(tape, store, h, None)?;
        d.out.forward(tape, store, h)
    }

    /// RAW decoder with RGB feature injection: `f_rgb[1]` joins at the
    /// half-latent scale and `f_rgb[0]` at the output scale.
    pub fn decode_raw_nodes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        z: NodeId,
        f_rgb: &[NodeId],
    ) -> Result<NodeId> {
        if f_rgb.len() != NUM_SHALLOW {
            return Err(Error::shape(format!(
                "raw decoder expects {NUM_SHALLOW} injected levels, got {}",
                f_rgb.len()
            )));
        }
        let d = &self.dec_raw;
        let h = d.inc.forward(tape, store, z)?;
        let h = tape.silu(h);
        let h = d.b0.forward(tape, store, h, None)?;
        let h = d.u1.forward(tape, store, h)?;
        let cat = tape.concat_channels(&[h, f_rgb[1]])?;
        let h = d.fuse1.forward(tape, store, cat)?;
        let h = tape.silu(h);
        let h = d.b1.forward(tape, store, h, None)?;
        let h = d.u2.forward(tape, store, h)?;
        let cat = tape.concat_channels(&[h, f_rgb[0]])?;
        let h = d.fuse2.forward(tape, store, cat)?;
        let h = tape.silu(h);
        let h = d.b2.forward(tape, store, h, None)?;
        let h = d.b3.forward(tape, store, h, None)?;
        d.out.forward(tape, store, h)
    }

    // ---- Array-level (inference) API ----

    pub fn encode_rgb(&self, store: &ParamStore, img: &RgbImage) -> Result<(Latent, FeaturePyramid)> {
        let mut tape = Tape::new();
        let x = tape.constant(batch_of_one(&img.data));
        let (z, fs) = self.encode_rgb_nodes(&mut tape, store, x)?;
        let levels = fs.iter().map(|&f| unbatch(tape.value(f))).collect::<Vec<_>>();
        Ok((unbatch(tape.value(z)), FeaturePyramid::new(levels)?))
    }

    pub fn encode_raw(&self, store: &ParamStore, img: &RawImage) -> Result<(Latent, FeaturePyramid)> {
        let mut tape = Tape::new();
        let x = tape.constant(batch_of_one(&img.data));
        let (z, fs) = self.encode_raw_nodes(&mut tape, store, x)?;
        let levels = fs.iter().map(|&f| unbatch(tape.value(f))).collect::<Vec<_>>();
        Ok((unbatch(tape.value(z)), FeaturePyramid::new(levels)?))
    }

    /// Decode a latent into a clamped RAW image, injecting live RGB features.
    pub fn decode_raw(&self, store: &ParamStore, z: &Latent, f_rgb: &FeaturePyramid) -> Result<RawImage> {
        let mut tape = Tape::new();
        let zn = tape.constant(batch_of_one(z));
        let fs: Vec<NodeId> = f_rgb
            .levels
            .iter()
            .map(|l| tape.constant(batch_of_one(l)))
            .collect();
        let out = self.decode_raw_nodes(&mut tape, store, zn, &fs)?;
        let data = unbatch(tape.value(out)).mapv(|v| v.clamp(0.0, 1.0));
        RawImage::continuous(data)
    }

    pub fn decode_rgb(&self, store: &ParamStore, z: &Latent) -> Result<RgbImage> {
        let mut tape = Tape::new();
        let zn = tape.constant(batch_of_one(z));
        let out = self.decode_rgb_nodes(&mut tape, store, zn)?;
        let data = unbatch(tape.value(out)).mapv(|v| v.clamp(0.0, 1.0));
        RgbImage::continuous(data)
    }
}

pub fn batch_of_one(a: &Array3<f64>) -> Array4<f64> {
    a.clone().insert_axis(Axis(0))
}

pub fn unbatch(a: &Array4<f64>) -> Array3<f64> {
    debug_assert_eq!(a.dim().0, 1);
    a.index_axis(Axis(0), 0).to_owned()
}

/// Sum over selected layers of the per-layer mean squared feature distance.
/// RGB features are average-pooled 2x onto the RAW grid before comparison.
pub fn feature_alignment_loss_nodes(
    tape: &mut Tape,
    f_raw: &[NodeId],
    f_rgb: &[NodeId],
    set: &AlignmentSet,
) -> Result<NodeId> {
    set.validate(f_raw.len().min(f_rgb.len()))?;
    let mut total: Option<NodeId> = None;
    for &l in &set.layer_ids {
        let pooled = tape.avg_pool2(f_rgb[l])?;
        let term = tape.mse_loss(f_raw[l], pooled)?;
        total = Some(match total {
            Some(t) => tape.add(t, term)?,
            None => term,
        });
    }
    Ok(total.expect("alignment set validated nonempty"))
}

/// Array-level alignment loss matching the node version.
pub fn feature_alignment_loss(
    f_raw: &FeaturePyramid,
    f_rgb: &FeaturePyramid,
    set: &AlignmentSet,
) -> Result<f64> {
    let mut tape = Tape::new();
    let raw_nodes: Vec<NodeId> = f_raw.levels.iter().map(|l| tape.constant(batch_of_one(l))).collect();
    let rgb_nodes: Vec<NodeId> = f_rgb.levels.iter().map(|l| tape.constant(batch_of_one(l))).collect();
    let n = feature_alignment_loss_nodes(&mut tape, &raw_nodes, &rgb_nodes, set)?;
    Ok(tape.scalar(n))
}

/// Fixed 4->3 projection for perceptual terms on packed RAW tensors:
/// (R, (Gr+Gb)/2, B) via a constant 1x1 conv.
pub fn raw4_to_rgb3_node(tape: &mut Tape, x: NodeId) -> Result<NodeId> {
    let mut w = Array4::zeros((3, 4, 1, 1));
    w[[0, 0, 0, 0]] = 1.0;
    w[[1, 1, 0, 0]] = 0.5;
    w[[1, 2, 0, 0]] = 0.5;
    w[[2, 3, 0, 0]] = 1.0;
    let wn = tape.constant(w);
    tape.conv2d(x, wn, None, 1, 0)
}

/// Pixel MSE plus lambda1 times the perceptual pyramid distance. Inputs with
/// 4 channels are routed through the fixed RGGB->RGB projection before phi.
pub fn reconstruction_loss_nodes(
    tape: &mut Tape,
    phi: &PhiNet,
    pred: NodeId,
    target: NodeId,
    lambda1: f64,
) -> Result<NodeId> {
    let pix = tape.mse_loss(pred, target)?;
    if lambda1 == 0.0 {
        return Ok(pix);
    }
    let channels = tape.value(pred).dim().1;
    let (p3, t3) = if channels == 4 {
        (raw4_to_rgb3_node(tape, pred)?, raw4_to_rgb3_node(tape, target)?)
    } else {
        (pred, target)
    };
    let perc = phi.perceptual_loss(tape, p3, t3)?;
    let scaled = tape.scale(perc, lambda1);
    tape.add(pix, scaled)
}

/// Array-level reconstruction loss (images as (c,h,w)).
pub fn reconstruction_loss(
    phi: &PhiNet,
    pred: &Array3<f64>,
    target: &Array3<f64>,
    lambda1: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.constant(batch_of_one(pred));
    let t = tape.constant(batch_of_one(target));
    let l = reconstruction_loss_nodes(&mut tape, phi, p, t, lambda1)?;
    Ok(tape.scalar(l))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_isp::{mosaic, pack_rggb, synthesize_scene};
    use crate::nn::phi::DEFAULT_PHI_SEED;

    fn build() -> (Dlae, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = crate::rng::stream(1, "dlae-test", 0);
        let dlae = Dlae::new(
            &mut store,
            DlaeSpec { latent_channels: 8, base_width: 12, zero_init_decoders: true },
            &mut rng,
        );
        (dlae, store)
    }

    fn sample_pair(seed: u64, h: usize, w: usize) -> (RgbImage, RawImage) {
        let scene = synthesize_scene(seed, (h, w)).unwrap();
        let raw = RawImage::new(
            pack_rggb(&mosaic(&scene).unwrap()).unwrap().mapv(|v| crate::data_isp::quantize_unit(v, 12)),
            12,
        )
        .unwrap();
        let rgb = crate::data_isp::render_rgb(&raw, &crate::data_isp::IspParams::default()).unwrap();
        (rgb, raw)
    }

    #[test]
    fn latent_shapes_match_between_domains() {
        let (dlae, store) = build();
        let (rgb, raw) = sample_pair(0, 64, 64);
        let (z_rgb, f_rgb) = dlae.encode_rgb(&store, &rgb).unwrap();
        let (z_raw, _) = dlae.encode_raw(&store, &raw).unwrap();
        assert_eq!(z_rgb.dim(), (8, 8, 8));
        assert_eq!(z_rgb.dim(), z_raw.dim());
        assert_eq!(f_rgb.levels[0].dim(), (12, 32, 32));
        assert_eq!(f_rgb.levels[1].dim(), (24, 16, 16));
        LatentPair::new(z_rgb, z_raw).unwrap();
    }

    #[test]
    fn encode_is_deterministic() {
        let (dlae, store) = build();
        let (rgb, _) = sample_pair(1, 32, 32);
        let (z1, _) = dlae.encode_rgb(&store, &rgb).unwrap();
        let (z2, _) = dlae.encode_rgb(&store, &rgb).unwrap();
        assert_eq!(z1, z2);
    }

    #[test]
    fn encode_rejects_indivisible_dims() {
        let (dlae, store) = build();
        let img = RgbImage::new(Array3::zeros((3, 20, 20)), 8).unwrap();
        assert!(dlae.encode_rgb(&store, &img).is_err());
    }

    #[test]
    fn zero_raw_encodes_finite() {
        let (dlae, store) = build();
        let raw = RawImage::new(Array3::zeros((4, 16, 16)), 12).unwrap();
        let (z, _) = dlae.encode_raw(&store, &raw).unwrap();
        assert!(z.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn decoders_clamp_and_shape() {
        let (dlae, store) = build();
        let (rgb, raw) = sample_pair(2, 32, 32);
        let (z_rgb, f_rgb) = dlae.encode_rgb(&store, &rgb).unwrap();
        let (z_raw, _) = dlae.encode_raw(&store, &raw).unwrap();
        let out_raw = dlae.decode_raw(&store, &z_raw, &f_rgb).unwrap();
        assert_eq!(out_raw.data.dim(), (4, 16, 16));
        assert!(out_raw.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
        let out_rgb = dlae.decode_rgb(&store, &z_rgb).unwrap();
        assert_eq!(out_rgb.data.dim(), (3, 32, 32));
        assert!(out_rgb.data.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn alignment_loss_identity_offset_symmetry() {
        let lvl0 = Array3::from_elem((2, 8, 8), 0.5);
        let lvl1 = Array3::from_elem((4, 4, 4), -0.25);
        // RAW features are at half the RGB feature resolution.
        let raw = FeaturePyramid::new(vec![
            Array3::from_elem((2, 4, 4), 0.5),
            Array3::from_elem((4, 2, 2), -0.25),
        ])
        .unwrap();
        let rgb = FeaturePyramid::new(vec![lvl0.clone(), lvl1.clone()]).unwrap();
        let set = AlignmentSet::default();
        assert_eq!(feature_alignment_loss(&raw, &rgb, &set).unwrap(), 0.0);

        let raw_off = FeaturePyramid::new(vec![
            raw.levels[0].mapv(|v| v + 1.0),
            raw.levels[1].mapv(|v| v + 1.0),
        ])
        .unwrap();
        let l = feature_alignment_loss(&raw_off, &rgb, &set).unwrap();
        assert!((l - 2.0).abs() < 1e-12, "constant +1 over two layers: {l}");
    }

    #[test]
    fn alignment_loss_swap_invariance() {
        // Same-shape pyramids so both argument orders are well-formed: build
        // the raw side at pooled-RGB scale and compare pooled difference.
        let a = FeaturePyramid::new(vec![Array3::from_elem((2, 4, 4), 0.2)]).unwrap();
        let b_hi = Array3::from_elem((2, 8, 8), 0.7);
        let b = FeaturePyramid::new(vec![b_hi]).unwrap();
        let set = AlignmentSet { layer_ids: vec![0] };
        let l = feature_alignment_loss(&a, &b, &set).unwrap();
        // (0.2 - 0.7)^2 = 0.25 regardless of which side carries the offset.
        assert!((l - 0.25).abs() < 1e-12);
    }

    #[test]
    fn alignment_rejects_empty_set() {
        let a = FeaturePyramid::new(vec![Array3::zeros((1, 4, 4))]).unwrap();
        let b = FeaturePyramid::new(vec![Array3::zeros((1, 8, 8))]).unwrap();
        let set = AlignmentSet { layer_ids: vec![] };
        assert!(feature_alignment_loss(&a, &b, &set).is_err());
    }

    #[test]
    fn reconstruction_loss_identity_and_offsets() {
        let phi = PhiNet::new(DEFAULT_PHI_SEED);
        let x = synthesize_scene(3, (32, 32)).unwrap();
        assert_eq!(reconstruction_loss(&phi, &x, &x, 0.01).unwrap(), 0.0);

        // lambda1 = 0 reduces to plain MSE; constant offset delta gives
        // a pixel term of exactly delta^2.
        let delta = 0.125;
        let y = x.mapv(|v| v + delta);
        let l0 = reconstruction_loss(&phi, &y, &x, 0.0).unwrap();
        assert!((l0 - delta * delta).abs() < 1e-12);
        let l1 = reconstruction_loss(&phi, &y, &x, 0.01).unwrap();
        assert!(l1 >= l0);
    }
}
