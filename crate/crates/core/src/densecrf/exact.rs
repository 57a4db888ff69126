//! Brute-force inference by enumerating every labeling.

use super::{CrfModel, CrfParams};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Upper bound on `labels^pixels` accepted by the enumerators.
pub const MAX_EXACT_STATES: usize = 1 << 20;

fn state_count(model: &CrfModel) -> Result<usize> {
    let mut states = 1usize;
    for _ in 0..model.pixels() {
        states = states
            .checked_mul(model.labels())
            .filter(|&s| s <= MAX_EXACT_STATES)
            .ok_or_else(|| Error::InvalidArgument("model too large for exact enumeration".into()))?;
    }
    Ok(states)
}

/// Visits every labeling with its energy, in lexicographic order (pixel 0 fastest).
fn enumerate(model: &CrfModel, params: &CrfParams, mut visit: impl FnMut(&[usize], f64)) -> Result<()> {
    let states = state_count(model)?;
    let n = model.pixels();
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                k[i * n + j] = model.kernel(params, i, j);
            }
        }
    }
    let mut z = vec![0usize; n];
    for _ in 0..states {
        let mut e: f64 = z.iter().enumerate().map(|(i, &l)| model.unary(i, l)).sum();
        for i in 0..n {
            for j in i + 1..n {
                if z[i] != z[j] {
                    e += k[i * n + j];
                }
            }
        }
        visit(&z, e);
        for slot in z.iter_mut() {
            *slot += 1;
            if *slot < model.labels() {
                break;
            }
            *slot = 0;
        }
    }
    Ok(())
}

/// Exact marginals of `p(z) ∝ exp(-E(z))`, shaped `[L,H,W]`.
pub fn exact_marginals(model: &CrfModel, params: &CrfParams) -> Result<Tensor> {
    let (labels, n) = (model.labels(), model.pixels());
    let mut energies = Vec::new();
    enumerate(model, params, |_, e| energies.push(e))?;
    let e_min = energies.iter().cloned().fold(f64::INFINITY, f64::min);
    let mut marg = vec![0.0; labels * n];
    let mut total = 0.0;
    let mut idx = 0;
    enumerate(model, params, |z, _| {
        let w = (-(energies[idx] - e_min)).exp();
        idx += 1;
        total += w;
        for (i, &l) in z.iter().enumerate() {
            marg[l * n + i] += w;
        }
    })?;
    for v in marg.iter_mut() {
        *v /= total;
    }
    Tensor::new(&[labels, model.height(), model.width()], marg)
}

/// Minimum-energy labeling; the first one in enumeration order wins ties.
pub fn exact_map(model: &CrfModel, params: &CrfParams) -> Result<(Vec<usize>, f64)> {
    let mut best = (Vec::new(), f64::INFINITY);
    enumerate(model, params, |z, e| {
        if e < best.1 {
            best = (z.to_vec(), e);
        }
    })?;
    Ok(best)
}
