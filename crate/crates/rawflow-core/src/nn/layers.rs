//! Trainable building blocks: convolutions, residual blocks, resampling,
//! and the sinusoidal time embedding.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::nn::params::{Init, ParamId, ParamStore};
use crate::nn::tape::{NodeId, Tape};

/// 2D convolution with kernel k, padding k/2 unless overridden.
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Self {
        let w = store.register(
            &format!("{name}.w"),
            (cout, cin, k, k),
            Init::FanIn { fan_in: cin * k * k, rng },
        );
        let b = store.register(&format!("{name}.b"), (1, cout, 1, 1), Init::Zero);
        Conv2d { w, b, stride, pad: k / 2 }
    }

    /// Zero-filled weights and bias; used for output layers so freshly built
    /// networks predict exactly zero.
    pub fn new_zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let w = store.register(&format!("{name}.w"), (cout, cin, k, k), Init::Zero);
        let b = store.register(&format!("{name}.b"), (1, cout, 1, 1), Init::Zero);
        Conv2d { w, b, stride: 1, pad: k / 2 }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }

    /// Forward with weights as non-differentiable constants (frozen nets).
    pub fn forward_frozen(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let w = tape.constant(store.value(self.w).clone());
        let b = tape.constant(store.value(self.b).clone());
        tape.conv2d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Fully-connected layer on (N, F, 1, 1) tensors, implemented as 1x1 conv.
pub struct Linear {
    conv: Conv2d,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut dyn rand::RngCore) -> Self {
        Linear {
            conv: Conv2d::new(store, name, fin, fout, 1, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        self.conv.forward(tape, store, x)
    }
}

/// Residual block: x + conv2(silu(conv1(silu(x)))), with an optional
/// per-block linear map of the time embedding added between the convs.
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    time_proj: Option<Linear>,
}

impl ResBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        time_dim: usize,
        rng: &mut dyn rand::RngCore,
    ) -> Self {
        let conv1 = Conv2d::new(store, &format!("{name}.conv1"), channels, channels, 3, 1, rng);
        let conv2 = Conv2d::new(store, &format!("{name}.conv2"), channels, channels, 3, 1, rng);
        let time_proj = if time_dim > 0 {
            Some(Linear::new(store, &format!("{name}.time"), time_dim, channels, rng))
        } else {
            None
        };
        ResBlock { conv1, conv2, time_proj }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: NodeId,
        t_emb: Option<NodeId>,
    ) -> Result<NodeId> {
        let h = tape.silu(x);
        let mut h = self.conv1.forward(tape, store, h)?;
        if let Some(proj) = &self.time_proj {
            let emb = t_emb.ok_or_else(|| Error::config("block expects a time embedding"))?;
            let shift = proj.forward(tape, store, emb)?;
            h = tape.add_bias(h, shift)?;
        }
        let h = tape.silu(h);
        let h = self.conv2.forward(tape, store, h)?;
        tape.add(x, h)
    }
}

/// Stride-2 conv halving the spatial dims.
pub struct Downsample {
    conv: Conv2d,
}

impl Downsample {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut dyn rand::RngCore) -> Self {
        Downsample {
            conv: Conv2d::new(store, name, cin, cout, 3, 2, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let h = self.conv.forward(tape, store, x)?;
        Ok(tape.silu(h))
    }
}

/// Nearest-neighbor 2x upsample followed by a conv.
pub struct Upsample {
    conv: Conv2d,
}

impl Upsample {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, rng: &mut dyn rand::RngCore) -> Self {
        Upsample {
            conv: Conv2d::new(store, name, cin, cout, 3, 1, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: NodeId) -> Result<NodeId> {
        let up = tape.nearest_up2(x);
        let h = self.conv.forward(tape, store, up)?;
        Ok(tape.silu(h))
    }
}

/// Sin/cos features of t over a geometric frequency ladder from 1 to 1e4.
/// First half sines, second half cosines; t=0 maps to (0,...,0,1,...,1).
pub fn sinusoidal_ladder(t: f64, dim: usize) -> Result<Vec<f64>> {
    if dim % 2 != 0 || dim == 0 {
        return Err(Error::config(format!("time embedding dim must be even, got {dim}")));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::numeric(format!("time {t} outside [0,1]")));
    }
    let half = dim / 2;
    let mut out = vec![0.0; dim];
    for j in 0..half {
        let exponent = if half > 1 { j as f64 / (half - 1) as f64 } else { 0.0 };
        let freq = 1e4_f64.powf(exponent);
        out[j] = (freq * t).sin();
        out[half + j] = (freq * t).cos();
    }
    Ok(out)
}

/// Learned two-layer projection over the sinusoidal ladder.
pub struct TimeEmbedding {
    pub dim: usize,
    lin1: Linear,
    lin2: Linear,
}

impl TimeEmbedding {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize, rng: &mut dyn rand::RngCore) -> Self {
        let lin1 = Linear::new(store, &format!("{name}.lin1"), dim, dim, rng);
        let lin2 = Linear::new(store, &format!("{name}.lin2"), dim, dim, rng);
        TimeEmbedding { dim, lin1, lin2 }
    }

    /// Embed one t per batch element; output (N, dim, 1, 1).
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, ts: &[f64]) -> Result<NodeId> {
        let n = ts.len();
        let mut base = Array4::zeros((n, self.dim, 1, 1));
        for (i, &t) in ts.iter().enumerate() {
            for (j, v) in sinusoidal_ladder(t, self.dim)?.into_iter().enumerate() {
                base[[i, j, 0, 0]] = v;
            }
        }
        let x = tape.constant(base);
        let h = self.lin1.forward(tape, store, x)?;
        let h = tape.silu(h);
        self.lin2.forward(tape, store, h)
    }
}
