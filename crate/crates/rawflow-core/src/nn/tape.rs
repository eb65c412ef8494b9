//! Define-by-run reverse-mode autodiff over f64 NCHW tensors. Each forward
//! pass builds a fresh tape; `backward` walks it in reverse and accumulates
//! parameter gradients into the [`ParamStore`].
//!
//! The op set is exactly what the models need: conv2d (im2col + gemm), silu,
//! adds, channel concat, nearest upsample, 2x average pool, and the scalar
//! losses. Everything is sequential and allocation-order deterministic, so
//! identical inputs replay bit-identically.

use ndarray::{s, Array2, Array4, Axis};

use crate::error::{Error, Result};
use crate::nn::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    },
    Silu {
        x: NodeId,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    /// x + b broadcast over spatial dims; b is (1|N, C, 1, 1).
    AddBias {
        x: NodeId,
        b: NodeId,
    },
    Scale {
        x: NodeId,
        k: f64,
    },
    ConcatC {
        parts: Vec<NodeId>,
    },
    NearestUp2 {
        x: NodeId,
    },
    AvgPool2 {
        x: NodeId,
    },
    MseLoss {
        a: NodeId,
        b: NodeId,
    },
    L1Loss {
        a: NodeId,
        b: NodeId,
    },
    Sum {
        x: NodeId,
    },
}

struct Node {
    value: Array4<f64>,
    requires_grad: bool,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, id: NodeId) -> &Array4<f64> {
        &self.nodes[id.0].value
    }

    /// Scalar helper for (1,1,1,1) nodes.
    pub fn scalar(&self, id: NodeId) -> f64 {
        debug_assert_eq!(self.nodes[id.0].value.len(), 1);
        self.nodes[id.0].value[[0, 0, 0, 0]]
    }

    fn push(&mut self, value: Array4<f64>, requires_grad: bool, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn requires(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Leaf with no gradient flow.
    pub fn constant(&mut self, value: Array4<f64>) -> NodeId {
        self.push(value, false, Op::Constant)
    }

    /// Leaf bound to a stored parameter; backward accumulates into its grad.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.value(id).clone(), true, Op::Param(id))
    }

    /// Cut gradient flow at this value.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.nodes[id.0].value.clone();
        self.constant(v)
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, cin, h, wdt) = self.nodes[x.0].value.dim();
        let (cout, wcin, kh, kw) = self.nodes[w.0].value.dim();
        if cin != wcin {
            return Err(Error::shape(format!(
                "conv2d: input channels {cin} vs weight {wcin}"
            )));
        }
        if h + 2 * pad < kh || wdt + 2 * pad < kw {
            return Err(Error::shape(format!(
                "conv2d: {h}x{wdt} too small for kernel {kh}x{kw} pad {pad}"
            )));
        }
        if let Some(bid) = b {
            let bd = self.nodes[bid.0].value.dim();
            if bd != (1, cout, 1, 1) {
                return Err(Error::shape(format!("conv2d: bias shape {bd:?}")));
            }
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wdt + 2 * pad - kw) / stride + 1;

        let mut out = Array4::zeros((n, cout, ho, wo));
        {
            let xv = &self.nodes[x.0].value;
            let wv = &self.nodes[w.0].value;
            let wmat = weight_matrix(wv);
            let mut cols = Array2::zeros((cin * kh * kw, ho * wo));
            for ni in 0..n {
                im2col(&xv.index_axis(Axis(0), ni).to_owned(), kh, kw, stride, pad, &mut cols);
                let mut out_mat = Array2::zeros((cout, ho * wo));
                ndarray::linalg::general_mat_mul(1.0, &wmat.view(), &cols.view(), 0.0, &mut out_mat);
                let reshaped = out_mat.into_shape_with_order((cout, ho, wo)).expect("conv reshape");
                out.index_axis_mut(Axis(0), ni).assign(&reshaped);
            }
            if let Some(bid) = b {
                let bv = &self.nodes[bid.0].value;
                for c in 0..cout {
                    let bc = bv[[0, c, 0, 0]];
                    out.slice_mut(s![.., c, .., ..]).mapv_inplace(|v| v + bc);
                }
            }
        }
        let req = self.requires(x) || self.requires(w) || b.map(|bid| self.requires(bid)).unwrap_or(false);
        Ok(self.push(out, req, Op::Conv2d { x, w, b, stride, pad }))
    }

    pub fn silu(&mut self, x: NodeId) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| t * sigmoid(t));
        let req = self.requires(x);
        self.push(v, req, Op::Silu { x })
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a.0].value.dim() != self.nodes[b.0].value.dim() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let req = self.requires(a) || self.requires(b);
        Ok(self.push(v, req, Op::Add { a, b }))
    }

    /// x: (N,C,H,W), b: (1,C,1,1) or (N,C,1,1).
    pub fn add_bias(&mut self, x: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, c, _, _) = self.nodes[x.0].value.dim();
        let (nb, cb, hb, wb) = self.nodes[b.0].value.dim();
        if cb != c || hb != 1 || wb != 1 || (nb != 1 && nb != n) {
            return Err(Error::shape(format!(
                "add_bias: x {:?} vs b {:?}",
                self.nodes[x.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let mut v = self.nodes[x.0].value.clone();
        {
            let bv = &self.nodes[b.0].value;
            for ni in 0..n {
                let bn = if nb == 1 { 0 } else { ni };
                for ci in 0..c {
                    let bias = bv[[bn, ci, 0, 0]];
                    v.slice_mut(s![ni, ci, .., ..]).mapv_inplace(|t| t + bias);
                }
            }
        }
        let req = self.requires(x) || self.requires(b);
        Ok(self.push(v, req, Op::AddBias { x, b }))
    }

    pub fn scale(&mut self, x: NodeId, k: f64) -> NodeId {
        let v = self.nodes[x.0].value.mapv(|t| k * t);
        let req = self.requires(x);
        self.push(v, req, Op::Scale { x, k })
    }

    pub fn concat_channels(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::shape("concat of zero parts"));
        }
        let (n, _, h, w) = self.nodes[parts[0].0].value.dim();
        for &p in parts {
            let (pn, _, ph, pw) = self.nodes[p.0].value.dim();
            if (pn, ph, pw) != (n, h, w) {
                return Err(Error::shape(format!(
                    "concat: incompatible {:?} vs {:?}",
                    self.nodes[parts[0].0].value.shape(),
                    self.nodes[p.0].value.shape()
                )));
            }
        }
        let views: Vec<_> = parts.iter().map(|&p| self.nodes[p.0].value.view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat");
        let req = parts.iter().any(|&p| self.requires(p));
        Ok(self.push(v, req, Op::ConcatC { parts: parts.to_vec() }))
    }

    pub fn nearest_up2(&mut self, x: NodeId) -> NodeId {
        let (n, c, h, w) = self.nodes[x.0].value.dim();
        let mut v = Array4::zeros((n, c, 2 * h, 2 * w));
        {
            let xv = &self.nodes[x.0].value;
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h {
                        for xx in 0..w {
                            let t = xv[[ni, ci, y, xx]];
                            v[[ni, ci, 2 * y, 2 * xx]] = t;
                            v[[ni, ci, 2 * y, 2 * xx + 1]] = t;
                            v[[ni, ci, 2 * y + 1, 2 * xx]] = t;
                            v[[ni, ci, 2 * y + 1, 2 * xx + 1]] = t;
                        }
                    }
                }
            }
        }
        let req = self.requires(x);
        self.push(v, req, Op::NearestUp2 { x })
    }

    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.nodes[x.0].value.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape(format!("avg_pool2 needs even dims, got {h}x{w}")));
        }
        let mut v = Array4::zeros((n, c, h / 2, w / 2));
        {
            let xv = &self.nodes[x.0].value;
            for ni in 0..n {
                for ci in 0..c {
                    for y in 0..h / 2 {
                        for xx in 0..w / 2 {
                            v[[ni, ci, y, xx]] = 0.25
                                * (xv[[ni, ci, 2 * y, 2 * xx]]
                                    + xv[[ni, ci, 2 * y, 2 * xx + 1]]
                                    + xv[[ni, ci, 2 * y + 1, 2 * xx]]
                                    + xv[[ni, ci, 2 * y + 1, 2 * xx + 1]]);
                        }
                    }
                }
            }
        }
        let req = self.requires(x);
        Ok(self.push(v, req, Op::AvgPool2 { x }))
    }

    /// Sum of all elements, as a (1,1,1,1) scalar node.
    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s: f64 = self.nodes[x.0].value.iter().sum();
        let req = self.requires(x);
        self.push(Array4::from_elem((1, 1, 1, 1), s), req, Op::Sum { x })
    }

    /// Mean over all elements of (a-b)^2, as a (1,1,1,1) scalar node.
    pub fn mse_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.loss_common(a, b, true)
    }

    /// Mean over all elements of |a-b|.
    pub fn l1_loss(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.loss_common(a, b, false)
    }

    fn loss_common(&mut self, a: NodeId, b: NodeId, squared: bool) -> Result<NodeId> {
        if self.nodes[a.0].value.dim() != self.nodes[b.0].value.dim() {
            return Err(Error::shape(format!(
                "loss: {:?} vs {:?}",
                self.nodes[a.0].value.shape(),
                self.nodes[b.0].value.shape()
            )));
        }
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let n = av.len() as f64;
        let mut acc = 0.0;
        for (x, y) in av.iter().zip(bv.iter()) {
            let d = x - y;
            acc += if squared { d * d } else { d.abs() };
        }
        let v = Array4::from_elem((1, 1, 1, 1), acc / n);
        let req = self.requires(a) || self.requires(b);
        let op = if squared { Op::MseLoss { a, b } } else { Op::L1Loss { a, b } };
        Ok(self.push(v, req, op))
    }

    /// Reverse pass from a scalar node. Parameter gradients accumulate into
    /// `store`; call `store.zero_grads()` between steps.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::shape("backward root must be scalar"));
        }
        let mut grads: Vec<Option<Array4<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array4::ones((1, 1, 1, 1)));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let g = match grads[idx].take() {
                Some(g) => g,
                None => continue,
            };
            match &self.nodes[idx].op {
                Op::Constant => {}
                Op::Param(pid) => store.accumulate_grad(*pid, &g),
                Op::Conv2d { x, w, b, stride, pad } => {
                    self.conv2d_backward(&g, *x, *w, *b, *stride, *pad, &mut grads);
                }
                Op::Silu { x } => {
                    if self.requires(*x) {
                        let xv = &self.nodes[x.0].value;
                        let mut dx = g.clone();
                        ndarray::Zip::from(&mut dx).and(xv).for_each(|d, &t| {
                            let s = sigmoid(t);
                            *d *= s * (1.0 + t * (1.0 - s));
                        });
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::Add { a, b } => {
                    if self.requires(*a) {
                        accumulate(&mut grads[a.0], g.clone());
                    }
                    if self.requires(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                }
                Op::AddBias { x, b } => {
                    if self.requires(*x) {
                        accumulate(&mut grads[x.0], g.clone());
                    }
                    if self.requires(*b) {
                        let (nb, c, _, _) = self.nodes[b.0].value.dim();
                        let (n, _, h, w) = g.dim();
                        let mut db = Array4::zeros((nb, c, 1, 1));
                        for ni in 0..n {
                            let bn = if nb == 1 { 0 } else { ni };
                            for ci in 0..c {
                                let mut s_ = 0.0;
                                for y in 0..h {
                                    for xx in 0..w {
                                        s_ += g[[ni, ci, y, xx]];
                                    }
                                }
                                db[[bn, ci, 0, 0]] += s_;
                            }
                        }
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Scale { x, k } => {
                    if self.requires(*x) {
                        accumulate(&mut grads[x.0], g.mapv(|t| t * k));
                    }
                }
                Op::ConcatC { parts } => {
                    let mut offset = 0;
                    for &p in parts {
                        let pc = self.nodes[p.0].value.dim().1;
                        if self.requires(p) {
                            let slice = g.slice(s![.., offset..offset + pc, .., ..]).to_owned();
                            accumulate(&mut grads[p.0], slice);
                        }
                        offset += pc;
                    }
                }
                Op::NearestUp2 { x } => {
                    if self.requires(*x) {
                        let (n, c, h2, w2) = g.dim();
                        let (h, w) = (h2 / 2, w2 / 2);
                        let mut dx = Array4::zeros((n, c, h, w));
                        for ni in 0..n {
                            for ci in 0..c {
                                for y in 0..h {
                                    for xx in 0..w {
                                        dx[[ni, ci, y, xx]] = g[[ni, ci, 2 * y, 2 * xx]]
                                            + g[[ni, ci, 2 * y, 2 * xx + 1]]
                                            + g[[ni, ci, 2 * y + 1, 2 * xx]]
                                            + g[[ni, ci, 2 * y + 1, 2 * xx + 1]];
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::AvgPool2 { x } => {
                    if self.requires(*x) {
                        let (n, c, hh, hw) = g.dim();
                        let mut dx = Array4::zeros((n, c, hh * 2, hw * 2));
                        for ni in 0..n {
                            for ci in 0..c {
                                for y in 0..hh {
                                    for xx in 0..hw {
                                        let t = 0.25 * g[[ni, ci, y, xx]];
                                        dx[[ni, ci, 2 * y, 2 * xx]] = t;
                                        dx[[ni, ci, 2 * y, 2 * xx + 1]] = t;
                                        dx[[ni, ci, 2 * y + 1, 2 * xx]] = t;
                                        dx[[ni, ci, 2 * y + 1, 2 * xx + 1]] = t;
                                    }
                                }
                            }
                        }
                        accumulate(&mut grads[x.0], dx);
                    }
                }
                Op::MseLoss { a, b } => {
                    let gs = g[[0, 0, 0, 0]];
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let n = av.len() as f64;
                    if self.requires(*a) {
                        let da = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| gs * 2.0 * (x - y) / n);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.requires(*b) {
                        let db = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| -gs * 2.0 * (x - y) / n);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::L1Loss { a, b } => {
                    let gs = g[[0, 0, 0, 0]];
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let n = av.len() as f64;
                    if self.requires(*a) {
                        let da = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| gs * sign(x - y) / n);
                        accumulate(&mut grads[a.0], da);
                    }
                    if self.requires(*b) {
                        let db = ndarray::Zip::from(av).and(bv).map_collect(|&x, &y| -gs * sign(x - y) / n);
                        accumulate(&mut grads[b.0], db);
                    }
                }
                Op::Sum { x } => {
                    if self.requires(*x) {
                        let gs = g[[0, 0, 0, 0]];
                        let dx = Array4::from_elem(self.nodes[x.0].value.raw_dim(), gs);
                        accumulate(&mut grads[x.0], dx);
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        g: &Array4<f64>,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
        grads: &mut [Option<Array4<f64>>],
    ) {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (n, cin, h, wdt) = xv.dim();
        let (cout, _, kh, kw) = wv.dim();
        let (_, _, ho, wo) = g.dim();
        let wmat = weight_matrix(wv);

        let need_dx = self.requires(x);
        let need_dw = self.requires(w);
        let mut dx = if need_dx { Some(Array4::zeros((n, cin, h, wdt))) } else { None };
        let mut dwmat = if need_dw { Some(Array2::zeros((cout, cin * kh * kw))) } else { None };

        let mut cols = Array2::zeros((cin * kh * kw, ho * wo));
        let mut dcols = Array2::zeros((cin * kh * kw, ho * wo));
        for ni in 0..n {
            let g_mat = g
                .index_axis(Axis(0), ni)
                .to_owned()
                .into_shape_with_order((cout, ho * wo))
                .expect("grad reshape");
            if let Some(dw) = dwmat.as_mut() {
                im2col(&xv.index_axis(Axis(0), ni).to_owned(), kh, kw, stride, pad, &mut cols);
                ndarray::linalg::general_mat_mul(1.0, &g_mat.view(), &cols.t(), 1.0, dw);
            }
            if let Some(dx) = dx.as_mut() {
                ndarray::linalg::general_mat_mul(1.0, &wmat.t(), &g_mat.view(), 0.0, &mut dcols);
                col2im_add(&dcols, kh, kw, stride, pad, &mut dx.index_axis_mut(Axis(0), ni));
            }
        }
        if let Some(dw) = dwmat {
            let dw4 = dw.into_shape_with_order((cout, cin, kh, kw)).expect("dw reshape");
            accumulate(&mut grads[w.0], dw4);
        }
        if let Some(dx) = dx {
            accumulate(&mut grads[x.0], dx);
        }
        if let Some(bid) = b {
            if self.requires(bid) {
                let mut db = Array4::zeros((1, cout, 1, 1));
                for c in 0..cout {
                    db[[0, c, 0, 0]] = g.slice(s![.., c, .., ..]).sum();
                }
                accumulate(&mut grads[bid.0], db);
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn accumulate(slot: &mut Option<Array4<f64>>, g: Array4<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

/// (Cout, Cin*kh*kw) view of the conv weights.
fn weight_matrix(w: &Array4<f64>) -> Array2<f64> {
    let (cout, cin, kh, kw) = w.dim();
    w.to_owned()
        .into_shape_with_order((cout, cin * kh * kw))
        .expect("weight reshape")
}

/// Gather 3D (C,H,W) input patches into (C*kh*kw, Ho*Wo) columns.
fn im2col(
    x: &ndarray::Array3<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut Array2<f64>,
) {
    let (c, h, w) = x.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    debug_assert_eq!(cols.dim(), (c * kh * kw, ho * wo));
    cols.fill(0.0);
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        cols[[row, oy * wo + ox]] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
}

/// Scatter-add columns back onto the (C,H,W) input gradient.
fn col2im_add(
    dcols: &Array2<f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dx: &mut ndarray::ArrayViewMut3<f64>,
) {
    let (c, h, w) = dx.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    for ci in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = (ci * kh + ky) * kw + kx;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as i64 - pad as i64;
                    if iy < 0 || iy >= h as i64 {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as i64 - pad as i64;
                        if ix < 0 || ix >= w as i64 {
                            continue;
                        }
                        dx[[ci, iy as usize, ix as usize]] += dcols[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
}

/// Direct convolution used as the independent reference in tests.
#[cfg(test)]
pub fn conv2d_reference(
    x: &Array4<f64>,
    w: &Array4<f64>,
    b: Option<&Array4<f64>>,
    stride: usize,
    pad: usize,
) -> Array4<f64> {
    let (n, cin, h, wdt) = x.dim();
    let (cout, _, kh, kw) = w.dim();
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wdt + 2 * pad - kw) / stride + 1;
    let mut out = Array4::zeros((n, cout, ho, wo));
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.map(|bb| bb[[0, co, 0, 0]]).unwrap_or(0.0);
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as i64 - pad as i64;
                                let ix = (ox * stride + kx) as i64 - pad as i64;
                                if iy < 0 || iy >= h as i64 || ix < 0 || ix >= wdt as i64 {
                                    continue;
                                }
                                acc += x[[ni, ci, iy as usize, ix as usize]] * w[[co, ci, ky, kx]];
                            }
                        }
                    }
                    out[[ni, co, oy, ox]] = acc;
                }
            }
        }
    }
    out
}
