//! Central finite differences against a scalar-valued closure. This is the
//! independent oracle for every analytic gradient in the crate: it never
//! touches the tape's backward pass.

use ndarray::Array4;

use crate::nn::params::{ParamId, ParamStore};

pub const FD_STEP: f64 = 1e-3;

/// Central-difference gradient of `f` with respect to every element of the
/// parameter `id`.
pub fn fd_param_grad(
    store: &mut ParamStore,
    id: ParamId,
    h: f64,
    mut f: impl FnMut(&ParamStore) -> f64,
) -> Array4<f64> {
    let n = store.value(id).len();
    let coords: Vec<usize> = (0..n).collect();
    fd_param_grad_sampled(store, id, &coords, h, &mut f)
}

/// Central differences over a subset of flat coordinates; untouched
/// coordinates come back as 0.
pub fn fd_param_grad_sampled(
    store: &mut ParamStore,
    id: ParamId,
    coords: &[usize],
    h: f64,
    f: &mut impl FnMut(&ParamStore) -> f64,
) -> Array4<f64> {
    let mut grad = Array4::zeros(store.value(id).raw_dim());
    for &c in coords {
        let orig = store.value(id).as_slice().unwrap()[c];
        store.value_mut(id).as_slice_mut().unwrap()[c] = orig + h;
        let fp = f(store);
        store.value_mut(id).as_slice_mut().unwrap()[c] = orig - h;
        let fm = f(store);
        store.value_mut(id).as_slice_mut().unwrap()[c] = orig;
        grad.as_slice_mut().unwrap()[c] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Central-difference gradient with respect to an input array.
pub fn fd_input_grad(x: &mut Array4<f64>, h: f64, mut f: impl FnMut(&Array4<f64>) -> f64) -> Array4<f64> {
    let mut grad = Array4::zeros(x.raw_dim());
    for c in 0..x.len() {
        let orig = x.as_slice().unwrap()[c];
        x.as_slice_mut().unwrap()[c] = orig + h;
        let fp = f(x);
        x.as_slice_mut().unwrap()[c] = orig - h;
        let fm = f(x);
        x.as_slice_mut().unwrap()[c] = orig;
        grad.as_slice_mut().unwrap()[c] = (fp - fm) / (2.0 * h);
    }
    grad
}

/// Relative L2 error between analytic and reference gradients, restricted to
/// the coordinates where the reference was evaluated (non-zero mask applies
/// only for sampled checks; pass `None` to compare everything).
pub fn rel_error(analytic: &Array4<f64>, reference: &Array4<f64>, coords: Option<&[usize]>) -> f64 {
    let a = analytic.as_slice().unwrap();
    let r = reference.as_slice().unwrap();
    let idx: Vec<usize> = match coords {
        Some(c) => c.to_vec(),
        None => (0..a.len()).collect(),
    };
    let mut diff = 0.0;
    let mut norm = 0.0;
    for &i in &idx {
        diff += (a[i] - r[i]) * (a[i] - r[i]);
        norm += r[i] * r[i];
    }
    (diff.sqrt()) / norm.sqrt().max(1e-12)
}

/// Deterministic coordinate subsample for big tensors.
pub fn sample_coords(len: usize, max: usize, seed: u64) -> Vec<usize> {
    if len <= max {
        return (0..len).collect();
    }
    use rand::seq::SliceRandom;
    let mut rng = crate::rng::stream(seed, "gradcheck-coords", len as u64);
    let mut all: Vec<usize> = (0..len).collect();
    all.shuffle(&mut rng);
    let mut picked: Vec<usize> = all.into_iter().take(max).collect();
    picked.sort_unstable();
    picked
}
