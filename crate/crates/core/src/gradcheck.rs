//! Central finite-difference checks for tape gradients.

use std::collections::BTreeMap;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

/// Default step for central differences.
pub const STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct Probe {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl Probe {
    /// `|a − n| / max(|a|, |n|)`, or 0 when both vanish.
    pub fn relative_error(&self) -> f64 {
        let scale = self.analytic.abs().max(self.numeric.abs());
        if scale == 0.0 {
            0.0
        } else {
            (self.analytic - self.numeric).abs() / scale
        }
    }

    /// Passes on relative error, or on absolute error below `floor` for
    /// coordinates whose true gradient is numerically zero.
    pub fn passes(&self, rel_tol: f64, floor: f64) -> bool {
        self.relative_error() <= rel_tol || (self.analytic - self.numeric).abs() <= floor
    }
}

/// `(f(θ + h e_i) − f(θ − h e_i)) / 2h` for one coordinate.
pub fn central_difference(
    store: &ParamStore,
    name: &str,
    index: usize,
    h: f64,
    f: &impl Fn(&ParamStore) -> Result<f64>,
) -> Result<f64> {
    let base = store
        .get(name)
        .ok_or_else(|| Error::Config(format!("no parameter `{name}`")))?;
    if index >= base.numel() {
        return Err(Error::Config(format!("index {index} out of range for `{name}`")));
    }
    let shifted = |delta: f64| -> Result<f64> {
        let mut s = store.clone();
        let t = s.get_mut(name).expect("checked above");
        t.data_mut()[index] += delta;
        f(&s)
    };
    Ok((shifted(h)? - shifted(-h)?) / (2.0 * h))
}

/// Draws up to `n` coordinates with a nonzero analytic gradient plus up to
/// `zeros` with a zero gradient, skipping parameters whose name starts with
/// any of `exclude`.
pub fn pick_coordinates(
    grads: &BTreeMap<String, Tensor>,
    n: usize,
    zeros: usize,
    seed: u64,
    exclude: &[&str],
) -> Vec<(String, usize)> {
    let mut nonzero = Vec::new();
    let mut zero = Vec::new();
    for (name, g) in grads {
        if exclude.iter().any(|p| name.starts_with(p)) {
            continue;
        }
        for (i, &v) in g.data().iter().enumerate() {
            if v != 0.0 {
                nonzero.push((name.clone(), i));
            } else {
                zero.push((name.clone(), i));
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<(String, usize)> = nonzero.choose_multiple(&mut rng, n).cloned().collect();
    out.extend(zero.choose_multiple(&mut rng, zeros).cloned());
    out
}

/// Compares analytic gradients against central differences of `f`.
pub fn check(
    store: &ParamStore,
    grads: &BTreeMap<String, Tensor>,
    coords: &[(String, usize)],
    h: f64,
    f: impl Fn(&ParamStore) -> Result<f64>,
) -> Result<Vec<Probe>> {
    coords
        .iter()
        .map(|(name, index)| {
            let analytic = grads.get(name).map_or(0.0, |g| g.data()[*index]);
            Ok(Probe {
                name: name.clone(),
                index: *index,
                analytic,
                numeric: central_difference(store, name, *index, h, &f)?,
            })
        })
        .collect()
}
