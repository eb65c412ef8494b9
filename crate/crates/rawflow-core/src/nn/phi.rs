//! Frozen random-weight convolutional pyramid used as the perceptual
//! feature extractor. Weights are derived from a fixed seed, never trained,
//! and never checkpointed; the seed is recorded alongside checkpoints so the
//! metric is reproducible.

use ndarray::Array4;

use crate::error::{Error, Result};
use crate::nn::layers::Conv2d;
use crate::nn::params::ParamStore;
use crate::nn::tape::{NodeId, Tape};
use crate::rng;

pub const DEFAULT_PHI_SEED: u64 = 0x9e1c_0ffe;

const LEVEL_WIDTHS: [usize; 3] = [8, 16, 32];

pub struct PhiNet {
    pub seed: u64,
    store: ParamStore,
    downs: Vec<Conv2d>,
    mixes: Vec<Conv2d>,
}

impl PhiNet {
    pub fn new(seed: u64) -> Self {
        let mut store = ParamStore::new();
        let mut rng = rng::stream(seed, "phi-init", 0);
        let mut downs = Vec::new();
        let mut mixes = Vec::new();
        let mut cin = 3;
        for (i, &w) in LEVEL_WIDTHS.iter().enumerate() {
            downs.push(Conv2d::new(&mut store, &format!("phi.down{i}"), cin, w, 3, 2, &mut rng));
            mixes.push(Conv2d::new(&mut store, &format!("phi.mix{i}"), w, w, 3, 1, &mut rng));
            cin = w;
        }
        PhiNet { seed, store, downs, mixes }
    }

    pub fn num_levels(&self) -> usize {
        LEVEL_WIDTHS.len()
    }

    /// Feature pyramid as tape nodes; weights enter as constants so gradient
    /// flows through the input only.
    pub fn forward_nodes(&self, tape: &mut Tape, x: NodeId) -> Result<Vec<NodeId>> {
        let (_, c, h, w) = tape.value(x).dim();
        if c != 3 {
            return Err(Error::shape(format!("phi expects 3 channels, got {c}")));
        }
        let factor = 1 << LEVEL_WIDTHS.len();
        if h % factor != 0 || w % factor != 0 {
            return Err(Error::shape(format!(
                "phi input {h}x{w} must be divisible by {factor}"
            )));
        }
        let mut levels = Vec::with_capacity(LEVEL_WIDTHS.len());
        let mut cur = x;
        for i in 0..LEVEL_WIDTHS.len() {
            let d = self.downs[i].forward_frozen(tape, &self.store, cur)?;
            let d = tape.silu(d);
            let m = self.mixes[i].forward_frozen(tape, &self.store, d)?;
            levels.push(m);
            cur = m;
        }
        Ok(levels)
    }

    /// Eval-only pyramid on a batched array.
    pub fn features(&self, x: &Array4<f64>) -> Result<Vec<Array4<f64>>> {
        let mut tape = Tape::new();
        let xn = tape.constant(x.clone());
        let nodes = self.forward_nodes(&mut tape, xn)?;
        Ok(nodes.into_iter().map(|n| tape.value(n).clone()).collect())
    }

    /// Mean over levels of the per-level feature MSE, as a scalar node.
    pub fn perceptual_loss(&self, tape: &mut Tape, a: NodeId, b: NodeId) -> Result<NodeId> {
        let fa = self.forward_nodes(tape, a)?;
        let fb = self.forward_nodes(tape, b)?;
        self.perceptual_from_levels(tape, &fa, &fb)
    }

    /// Same but against precomputed (constant) target levels.
    pub fn perceptual_from_levels(
        &self,
        tape: &mut Tape,
        fa: &[NodeId],
        fb: &[NodeId],
    ) -> Result<NodeId> {
        if fa.len() != fb.len() {
            return Err(Error::shape("pyramid level count mismatch"));
        }
        let mut total: Option<NodeId> = None;
        for (&a, &b) in fa.iter().zip(fb.iter()) {
            let l = tape.mse_loss(a, b)?;
            total = Some(match total {
                Some(t) => tape.add(t, l)?,
                None => l,
            });
        }
        let t = total.ok_or_else(|| Error::shape("empty pyramid"))?;
        Ok(tape.scale(t, 1.0 / fa.len() as f64))
    }

    /// Scalar perceptual distance between two images (eval path).
    pub fn perceptual_distance(&self, a: &Array4<f64>, b: &Array4<f64>) -> Result<f64> {
        let mut tape = Tape::new();
        let an = tape.constant(a.clone());
        let bn = tape.constant(b.clone());
        let l = self.perceptual_loss(&mut tape, an, bn)?;
        Ok(tape.scalar(l))
    }
}
