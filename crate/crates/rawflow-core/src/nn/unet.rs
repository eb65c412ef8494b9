//! Small U-Net with skip connections, optional time conditioning, and
//! optional per-scale guidance injected by channel concatenation on the
//! decoder path.

use ndarray::Array3;

use crate::error::{Error, Result};
use crate::nn::layers::{Conv2d, Downsample, ResBlock, TimeEmbedding, Upsample};
use crate::nn::params::ParamStore;
use crate::nn::tape::{NodeId, Tape};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub base_width: usize,
    pub num_scales: usize,
    /// 0 disables time conditioning.
    pub time_embed_dim: usize,
    /// Per-scale guidance channel counts; 0 disables injection at a scale.
    pub guidance_channels: Vec<usize>,
}

impl UNetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_scales < 1 {
            return Err(Error::config("num_scales must be >= 1"));
        }
        if self.base_width < 8 {
            return Err(Error::config("base_width must be >= 8"));
        }
        if self.guidance_channels.len() != self.num_scales {
            return Err(Error::config(format!(
                "guidance_channels has {} entries for {} scales",
                self.guidance_channels.len(),
                self.num_scales
            )));
        }
        if self.time_embed_dim % 2 != 0 {
            return Err(Error::config("time_embed_dim must be even"));
        }
        Ok(())
    }

    /// Channel width at scale i (doubles per downsampling).
    pub fn width(&self, scale: usize) -> usize {
        self.base_width << scale
    }
}

/// Ordered multi-resolution feature maps; level i is at 1/2^i of the base
/// resolution of whatever produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    pub levels: Vec<Array3<f64>>,
}

impl FeaturePyramid {
    pub fn new(levels: Vec<Array3<f64>>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::shape("feature pyramid needs at least one level"));
        }
        for pair in levels.windows(2) {
            let (_, h0, w0) = pair[0].dim();
            let (_, h1, w1) = pair[1].dim();
            if h1 >= h0 || w1 >= w0 {
                return Err(Error::shape(format!(
                    "pyramid levels must strictly shrink: {h0}x{w0} then {h1}x{w1}"
                )));
            }
        }
        Ok(FeaturePyramid { levels })
    }

    pub fn len(&self) -> usize {
        self.levels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.levels.is_empty()
    }
}

pub struct UNet {
    pub spec: UNetSpec,
    time: Option<TimeEmbedding>,
    stem: Conv2d,
    enc_res: Vec<ResBlock>,
    downs: Vec<Downsample>,
    mid: ResBlock,
    ups: Vec<Upsample>,
    fuse: Vec<Conv2d>,
    dec_res: Vec<ResBlock>,
    out: Conv2d,
}

impl UNet {
    /// `zero_init_out` makes the freshly built network the constant-zero map.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        spec: UNetSpec,
        zero_init_out: bool,
        rng: &mut dyn rand::RngCore,
    ) -> Result<Self> {
        spec.validate()?;
        let l = spec.num_scales;
        let td = spec.time_embed_dim;
        let time = if td > 0 {
            Some(TimeEmbedding::new(store, &format!("{name}.time"), td, rng))
        } else {
            None
        };
        let stem = Conv2d::new(store, &format!("{name}.stem"), spec.in_channels, spec.width(0), 3, 1, rng);
        let mut enc_res = Vec::new();
        let mut downs = Vec::new();
        for i in 0..l {
            enc_res.push(ResBlock::new(store, &format!("{name}.enc{i}"), spec.width(i), td, rng));
            if i + 1 < l {
                downs.push(Downsample::new(store, &format!("{name}.down{i}"), spec.width(i), spec.width(i + 1), rng));
            }
        }
        let mid = ResBlock::new(store, &format!("{name}.mid"), spec.width(l - 1), td, rng);
        let mut ups = Vec::new();
        let mut fuse = Vec::new();
        let mut dec_res = Vec::new();
        for i in (0..l).rev() {
            if i + 1 < l {
                ups.push(Upsample::new(store, &format!("{name}.up{i}"), spec.width(i + 1), spec.width(i), rng));
            }
            let skip_ch = if i + 1 < l { spec.width(i) } else { 0 };
            let cin = spec.width(i) + skip_ch + spec.guidance_channels[i];
            fuse.push(Conv2d::new(store, &format!("{name}.fuse{i}"), cin, spec.width(i), 3, 1, rng));
            dec_res.push(ResBlock::new(store, &format!("{name}.dec{i}"), spec.width(i), td, rng));
        }
        let out = if zero_init_out {
            Conv2d::new_zeroed(store, &format!("{name}.out"), spec.width(0), spec.out_channels, 3)
        } else {
            Conv2d::new(store, &format!("{name}.out"), spec.width(0), spec.out_channels, 3, 1, rng)
        };
        Ok(UNet {
            spec,
            time,
            stem,
            enc_res,
            downs,
            mid,
            ups,
            fuse,
            dec_res,
            out,
        })
    }

    /// Forward on tape nodes. `guidance[i]`, when the spec enables it, must be
    /// an (N, guidance_channels[i], H/2^i, W/2^i) node.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        ts: Option<&[f64]>,
        guidance: Option<&[NodeId]>,
    ) -> Result<NodeId> {
        let l = self.spec.num_scales;
        let (n, c, h, w) = tape.value(x).dim();
        if c != self.spec.in_channels {
            return Err(Error::shape(format!(
                "unet input channels {c}, spec says {}",
                self.spec.in_channels
            )));
        }
        let factor = 1usize << (l - 1);
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!(
                "unet input {h}x{w} not divisible by {factor}"
            )));
        }
        let t_emb = match (&self.time, ts) {
            (Some(te), Some(ts)) => {
                if ts.len() != n {
                    return Err(Error::shape(format!("{} time values for batch {n}", ts.len())));
                }
                Some(te.forward(tape, store, ts)?)
            }
            (Some(_), None) => return Err(Error::config("time-conditioned unet called without t")),
            (None, _) => None,
        };
        let needs_guidance = self.spec.guidance_channels.iter().any(|&g| g > 0);
        if needs_guidance && guidance.is_none() {
            return Err(Error::config("unet spec enables guidance but none was passed"));
        }
        if let Some(gs) = guidance {
            if gs.len() != l {
                return Err(Error::shape(format!("guidance has {} levels, expected {l}", gs.len())));
            }
            for (i, &g) in gs.iter().enumerate() {
                if self.spec.guidance_channels[i] == 0 {
                    continue;
                }
                let (gn, gc, gh, gw) = tape.value(g).dim();
                let (eh, ew) = (h >> i, w >> i);
                if gn != n || gc != self.spec.guidance_channels[i] || gh != eh || gw != ew {
                    return Err(Error::shape(format!(
                        "guidance level {i}: got ({gn},{gc},{gh},{gw}), expected ({n},{},{eh},{ew})",
                        self.spec.guidance_channels[i]
                    )));
                }
            }
        }

        let mut hcur = self.stem.forward(tape, store, x)?;
        let mut skips = Vec::with_capacity(l);
        for i in 0..l {
            hcur = self.enc_res[i].forward(tape, store, hcur, t_emb)?;
            skips.push(hcur);
            if i + 1 < l {
                hcur = self.downs[i].forward(tape, store, hcur)?;
            }
        }
        hcur = self.mid.forward(tape, store, hcur, t_emb)?;

        for (di, i) in (0..l).rev().enumerate() {
            if i + 1 < l {
                hcur = self.ups[di - 1].forward(tape, store, hcur)?;
            }
            let mut parts = vec![hcur];
            if i + 1 < l {
                parts.push(skips[i]);
            }
            if self.spec.guidance_channels[i] > 0 {
                parts.push(guidance.unwrap()[i]);
            }
            let cat = if parts.len() > 1 {
                tape.concat_channels(&parts)?
            } else {
                parts[0]
            };
            let fused = self.fuse[di].forward(tape, store, cat)?;
            hcur = tape.silu(fused);
            hcur = self.dec_res[di].forward(tape, store, hcur, t_emb)?;
        }
        self.out.forward(tape, store, hcur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;

    fn spec(guidance: Vec<usize>, time_dim: usize) -> UNetSpec {
        UNetSpec {
            in_channels: 4,
            out_channels: 4,
            base_width: 8,
            num_scales: 3,
            time_embed_dim: time_dim,
            guidance_channels: guidance,
        }
    }

    fn rand_input(shape: (usize, usize, usize, usize), seed: u64) -> Array4<f64> {
        let mut rng = crate::rng::stream(seed, "unet-test", 0);
        let mut a = Array4::zeros(shape);
        for v in a.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
        a
    }

    #[test]
    fn zero_init_output_is_zero() {
        let mut rng = crate::rng::stream(1, "unet", 0);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, "u", spec(vec![0, 0, 0], 16), true, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_input((2, 4, 8, 8), 2));
        let y = net.forward(&mut tape, &store, x, Some(&[0.3, 0.9]), None).unwrap();
        assert!(tape.value(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn preserves_spatial_dims() {
        let mut rng = crate::rng::stream(2, "unet", 0);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, "u", spec(vec![0, 0, 0], 0), false, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_input((1, 4, 32, 32), 3));
        let y = net.forward(&mut tape, &store, x, None, None).unwrap();
        assert_eq!(tape.value(y).dim(), (1, 4, 32, 32));
    }

    #[test]
    fn rejects_indivisible_input() {
        let mut rng = crate::rng::stream(3, "unet", 0);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, "u", spec(vec![0, 0, 0], 0), false, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_input((1, 4, 6, 6), 4));
        assert!(net.forward(&mut tape, &store, x, None, None).is_err());
    }

    #[test]
    fn rejects_guidance_shape_mismatch() {
        let mut rng = crate::rng::stream(4, "unet", 0);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, "u", spec(vec![4, 4, 4], 0), false, &mut rng).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(rand_input((1, 4, 8, 8), 5));
        let g0 = tape.constant(rand_input((1, 4, 8, 8), 6));
        let g1 = tape.constant(rand_input((1, 4, 2, 2), 7)); // wrong: expect 4x4
        let g2 = tape.constant(rand_input((1, 4, 2, 2), 8));
        let err = net.forward(&mut tape, &store, x, None, Some(&[g0, g1, g2]));
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn guidance_perturbation_changes_output() {
        let mut rng = crate::rng::stream(5, "unet", 0);
        let mut store = ParamStore::new();
        let net = UNet::new(&mut store, "u", spec(vec![4, 4, 4], 0), false, &mut rng).unwrap();

        let x = rand_input((1, 4, 8, 8), 9);
        let mut g_levels = vec![
            rand_input((1, 4, 8, 8), 10),
            rand_input((1, 4, 4, 4), 11),
            rand_input((1, 4, 2, 2), 12),
        ];
        let run = |gs: &[Array4<f64>]| {
            let mut tape = Tape::new();
            let xn = tape.constant(x.clone());
            let gn: Vec<_> = gs.iter().map(|g| tape.constant(g.clone())).collect();
            let y = net.forward(&mut tape, &store, xn, None, Some(&gn)).unwrap();
            tape.value(y).clone()
        };
        let base = run(&g_levels);
        for lvl in 0..3 {
            let mut perturbed = g_levels.clone();
            perturbed[lvl][[0, 0, 0, 0]] += 1e-3;
            let out = run(&perturbed);
            let diff = (&out - &base).iter().map(|v| v.abs()).fold(0.0, f64::max);
            assert!(diff > 0.0, "guidance level {lvl} has zero influence");
        }
        g_levels.clear();
    }
}
