//! Central finite-difference verification of analytic gradients.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::params::ParamStore;
use crate::tensor::{KernelError, Tensor2};

/// Whether a loss evaluation should also populate gradients in the store.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GradMode {
    ValueOnly,
    WithGrads,
}

/// Symmetric relative error used by every gradient check.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / (analytic.abs() + fd.abs() + 1e-8)
}

/// Checks the analytic gradient of `param` against central differences.
///
/// `loss_fn` must rebuild the forward pass from the store's current values;
/// with [`GradMode::WithGrads`] it must also run backward into the store.
/// Returns the maximum relative error over all coordinates of the parameter.
pub fn finite_diff_check<F>(
    store: &mut ParamStore,
    param: &str,
    loss_fn: &mut F,
    epsilon: f64,
) -> Result<f64, KernelError>
where
    F: FnMut(&mut ParamStore, GradMode) -> Result<f64, KernelError>,
{
    finite_diff_check_sampled(store, param, loss_fn, epsilon, usize::MAX, 0)
}

/// Like [`finite_diff_check`] but probing at most `max_coords` coordinates,
/// chosen by a seeded shuffle when the parameter is larger than that.
pub fn finite_diff_check_sampled<F>(
    store: &mut ParamStore,
    param: &str,
    loss_fn: &mut F,
    epsilon: f64,
    max_coords: usize,
    sample_seed: u64,
) -> Result<f64, KernelError>
where
    F: FnMut(&mut ParamStore, GradMode) -> Result<f64, KernelError>,
{
    loss_fn(store, GradMode::WithGrads)?;
    let analytic = store.grad(param)?.clone();
    check_against(store, param, &analytic, loss_fn, epsilon, max_coords, sample_seed)
}

/// Verification seam: compares a caller-supplied analytic gradient against
/// central differences. Lets tests inject corrupted gradients and watch the
/// check fail.
pub fn finite_diff_check_against<F>(
    store: &mut ParamStore,
    param: &str,
    analytic: &Tensor2,
    loss_fn: &mut F,
    epsilon: f64,
) -> Result<f64, KernelError>
where
    F: FnMut(&mut ParamStore, GradMode) -> Result<f64, KernelError>,
{
    check_against(store, param, analytic, loss_fn, epsilon, usize::MAX, 0)
}

fn check_against<F>(
    store: &mut ParamStore,
    param: &str,
    analytic: &Tensor2,
    loss_fn: &mut F,
    epsilon: f64,
    max_coords: usize,
    sample_seed: u64,
) -> Result<f64, KernelError>
where
    F: FnMut(&mut ParamStore, GradMode) -> Result<f64, KernelError>,
{
    let n = store.value(param)?.len();
    let coords: Vec<usize> = if n <= max_coords {
        (0..n).collect()
    } else {
        let mut all: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(sample_seed ^ name_salt(param));
        all.shuffle(&mut rng);
        all.truncate(max_coords);
        all.sort_unstable();
        all
    };

    let mut max_err = 0.0f64;
    for &i in &coords {
        let original = store.value(param)?.data()[i];
        store.value_mut(param)?.data_mut()[i] = original + epsilon;
        let plus = loss_fn(store, GradMode::ValueOnly)?;
        store.value_mut(param)?.data_mut()[i] = original - epsilon;
        let minus = loss_fn(store, GradMode::ValueOnly)?;
        store.value_mut(param)?.data_mut()[i] = original;
        let fd = (plus - minus) / (2.0 * epsilon);
        max_err = max_err.max(relative_error(analytic.data()[i], fd));
    }
    Ok(max_err)
}

fn name_salt(name: &str) -> u64 {
    // FNV-1a, enough to decorrelate sampling across parameter names.
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}
