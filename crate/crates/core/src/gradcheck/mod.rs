//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward values; it never touches the
//! backward pass it is checking.
//!
//! Errors are measured per tensor as `‖g_auto − g_fd‖₂ / max(‖g_auto‖₂, ‖g_fd‖₂)`
//! over the checked coordinates, which is stable for coordinates whose true
//! gradient is near zero. A tensor whose gradient is negligible next to the
//! largest one in the same check is measured against that larger scale, so
//! round-off in an exactly zero gradient does not read as a 100% error.

use crate::Real;
use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

pub mod suites;

pub const DEFAULT_EPS: Real = 1e-3;
pub const DEFAULT_TOLERANCE: Real = 1e-3;
/// Step for the full encoder-to-loss chain. In double precision the central
/// difference error `O(ε²)` from the chain's curvature and L1 kinks dominates
/// at `1e-3`; `1e-5` sits near the double-precision optimum. Single precision
/// keeps `1e-3`, below which round-off dominates.
#[cfg(jh_real64)]
pub const CHAIN_EPS: Real = 1e-5;
#[cfg(not(jh_real64))]
pub const CHAIN_EPS: Real = 1e-3;

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub name: String,
    /// Worst per-tensor relative error.
    pub max_rel_err: Real,
    /// Number of scalar coordinates compared.
    pub checked: usize,
    /// Tensor holding the worst error (parameter name or `input{i}`).
    pub worst: String,
}

impl GradCheckReport {
    pub fn passes(&self, tol: Real) -> bool {
        self.max_rel_err.is_finite() && self.max_rel_err < tol
    }
}

/// Coordinates to probe: all of them when small, otherwise an even stride.
fn probe_indices(len: usize, max_coords: usize) -> Vec<usize> {
    if len <= max_coords {
        return (0..len).collect();
    }
    let step = len as f64 / max_coords as f64;
    (0..max_coords).map(|i| (i as f64 * step) as usize).collect()
}

/// Gradient norms below this fraction of the largest checked tensor norm are
/// compared in absolute terms against that scale.
pub const NEGLIGIBLE_FRACTION: f64 = 1e-6;

/// Auto and numeric gradients of one tensor at the probed coordinates.
struct Probe {
    name: String,
    auto: Vec<f64>,
    fd: Vec<f64>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn summarize(name: &str, probes: &[Probe]) -> GradCheckReport {
    let scale = probes
        .iter()
        .map(|p| norm(&p.auto).max(norm(&p.fd)))
        .fold(0.0, f64::max);
    let floor = (scale * NEGLIGIBLE_FRACTION).max(1e-12);
    let mut worst = 0.0 as Real;
    let mut worst_name = String::new();
    for p in probes {
        let diff: Vec<f64> = p.auto.iter().zip(&p.fd).map(|(a, b)| a - b).collect();
        let denom = norm(&p.auto).max(norm(&p.fd)).max(floor);
        let e = (norm(&diff) / denom) as Real;
        if !(e <= worst) {
            worst = e;
            worst_name = p.name.clone();
        }
    }
    GradCheckReport {
        name: name.to_string(),
        max_rel_err: worst,
        checked: probes.iter().map(|p| p.auto.len()).sum(),
        worst: worst_name,
    }
}

/// Checks gradients of `f` with respect to each tensor in `inputs`.
pub fn check_inputs<'s, F>(
    name: &str,
    inputs: &[Tensor],
    eps: Real,
    max_coords: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'s>, &[Var]) -> Result<Var>,
{
    check_inputs_split(name, inputs, eps, max_coords, &f, &f)
}

/// Input-gradient counterpart of [`check_params_split`].
pub fn check_inputs_split<'s, A, N>(
    name: &str,
    inputs: &[Tensor],
    eps: Real,
    max_coords: usize,
    auto: A,
    numeric: N,
) -> Result<GradCheckReport>
where
    A: Fn(&mut Graph<'s>, &[Var]) -> Result<Var>,
    N: Fn(&mut Graph<'s>, &[Var]) -> Result<Var>,
{
    let f = numeric;
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(t.clone())).collect();
    let root = auto(&mut g, &vars)?;
    let grads = g.backward(root)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let root = f(&mut g, &vars)?;
        Ok(g.scalar(root) as f64)
    };

    let mut probes = Vec::with_capacity(inputs.len());
    for (ti, t) in inputs.iter().enumerate() {
        let zero = Tensor::zeros(t.shape());
        let auto_t = grads.get(vars[ti]).unwrap_or(&zero);
        let idx = probe_indices(t.len(), max_coords);
        let mut auto = Vec::with_capacity(idx.len());
        let mut fd = Vec::with_capacity(idx.len());
        let mut xs = inputs.to_vec();
        for &i in &idx {
            let orig = xs[ti].data()[i];
            xs[ti].data_mut()[i] = orig + eps;
            let plus = eval(&xs)?;
            xs[ti].data_mut()[i] = orig - eps;
            let minus = eval(&xs)?;
            xs[ti].data_mut()[i] = orig;
            fd.push((plus - minus) / (2.0 * eps as f64));
            auto.push(auto_t.data()[i] as f64);
        }
        probes.push(Probe {
            name: format!("input{ti}"),
            auto,
            fd,
        });
    }
    Ok(summarize(name, &probes))
}

/// Anything that owns the parameter store its forward pass reads.
pub trait ParamOwner: Clone {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
}

impl ParamOwner for ParamStore {
    fn store(&self) -> &ParamStore {
        self
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        self
    }
}

impl ParamOwner for crate::codec::Codec {
    fn store(&self) -> &ParamStore {
        &self.store
    }

    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
}

/// Checks gradients of `f` with respect to the listed parameters of `owner`.
///
/// Perturbations are applied to a private copy of `owner`, so `f` must read
/// parameters only through the owner it is handed.
pub fn check_params<T, F>(
    name: &str,
    owner: &T,
    ids: &[ParamId],
    eps: Real,
    max_coords: usize,
    f: F,
) -> Result<GradCheckReport>
where
    T: ParamOwner,
    F: for<'a> Fn(&mut Graph<'a>, &'a T) -> Result<Var>,
{
    check_params_split(name, owner, ids, eps, max_coords, &f, &f)
}

/// Like [`check_params`], but differentiates `auto` and finite-differences
/// `numeric`. The two must share their gradient at `owner`; this is how a
/// stop-gradient objective is checked against an equivalent objective with
/// the stopped values frozen as constants.
pub fn check_params_split<T, A, N>(
    name: &str,
    owner: &T,
    ids: &[ParamId],
    eps: Real,
    max_coords: usize,
    auto: A,
    numeric: N,
) -> Result<GradCheckReport>
where
    T: ParamOwner,
    A: for<'a> Fn(&mut Graph<'a>, &'a T) -> Result<Var>,
    N: for<'a> Fn(&mut Graph<'a>, &'a T) -> Result<Var>,
{
    let f = numeric;
    let store = owner.store();
    let grads = {
        let mut g = Graph::with_trainable(store);
        let root = auto(&mut g, owner)?;
        let grads = g.backward(root)?;
        ids.iter()
            .map(|&id| {
                grads
                    .param(id)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(store.get(id).shape()))
            })
            .collect::<Vec<_>>()
    };

    let eval = |o: &T| -> Result<f64> {
        let mut g = Graph::new();
        let root = f(&mut g, o)?;
        Ok(g.scalar(root) as f64)
    };

    let mut probes = Vec::with_capacity(ids.len());
    let mut work = owner.clone();
    for (pi, &id) in ids.iter().enumerate() {
        let idx = probe_indices(store.get(id).len(), max_coords);
        let mut auto = Vec::with_capacity(idx.len());
        let mut fd = Vec::with_capacity(idx.len());
        for &i in &idx {
            let orig = work.store().get(id).data()[i];
            work.store_mut().get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(&work)?;
            work.store_mut().get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(&work)?;
            work.store_mut().get_mut(id).data_mut()[i] = orig;
            fd.push((plus - minus) / (2.0 * eps as f64));
            auto.push(grads[pi].data()[i] as f64);
        }
        probes.push(Probe {
            name: store.name(id).to_string(),
            auto,
            fd,
        });
    }
    Ok(summarize(name, &probes))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn probes_cover_small_tensors_fully() {
        assert_eq!(probe_indices(5, 10), vec![0, 1, 2, 3, 4]);
        assert_eq!(probe_indices(100, 4), vec![0, 25, 50, 75]);
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // `detach` hides the dependence from autodiff; finite differences see it.
        let x = Tensor::vector(vec![0.5, -1.0, 2.0]);
        let report = check_inputs("detached", &[x], DEFAULT_EPS, 16, |g, v| {
            let d = g.detach(v[0]);
            let y = g.mul(v[0], d)?;
            Ok(g.sum(y))
        })
        .unwrap();
        assert!(!report.passes(DEFAULT_TOLERANCE));
    }
}
