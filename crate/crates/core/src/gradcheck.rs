//! Central finite-difference gradient checker.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tape::{Graph, NodeId};
use crate::tensor::ParamStore;

/// Minimum number of sampled coordinates per tensor (all coordinates when
/// the tensor is smaller).
pub const MIN_COORDS: usize = 32;

#[derive(Clone, Debug)]
pub struct TensorCheck {
    pub name: String,
    /// Size of the tensor; all coordinates are checked when it is small.
    pub numel: usize,
    pub coords: usize,
    pub max_rel_error: f64,
    pub worst_coord: usize,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub tol: f64,
    pub tensors: Vec<TensorCheck>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.tensors.iter().all(|t| t.max_rel_error <= self.tol)
    }

    pub fn worst(&self) -> Option<&TensorCheck> {
        self.tensors
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |t| t.max_rel_error)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn eval(f: &impl Fn(&ParamStore, &mut Graph) -> Result<NodeId>, params: &ParamStore, name: &str) -> Result<f64> {
    let mut g = Graph::new();
    let loss = f(params, &mut g).map_err(|e| match e {
        Error::Numeric { detail, .. } => Error::numeric(name, detail),
        e => e,
    })?;
    let v = g.scalar(loss);
    if !v.is_finite() {
        return Err(Error::numeric(name, format!("objective is {v}")));
    }
    Ok(v)
}

/// Compares reverse-mode gradients of the scalar built by `f` against
/// `(f(θ+h·e) − f(θ−h·e)) / 2h` on a seeded subset of at least
/// [`MIN_COORDS`] coordinates of every trainable tensor.
pub fn finite_diff_grad_check<F>(f: F, params: &ParamStore, h: f64, tol: f64, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&ParamStore, &mut Graph) -> Result<NodeId>,
{
    if !(h > 0.0) || !h.is_finite() {
        return Err(Error::Contract(format!("finite-difference step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let loss = f(params, &mut g)?;
    if !g.scalar(loss).is_finite() {
        return Err(Error::numeric("objective", format!("value {}", g.scalar(loss))));
    }
    let grads = g.backward(loss)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = params.clone();
    let mut tensors = Vec::new();
    for idx in 0..params.len() {
        let (name, t) = params.by_index(idx);
        if !t.requires_grad {
            continue;
        }
        let n = t.numel();
        let zeros = vec![0.0; n];
        let analytic = grads.param(idx).unwrap_or(&zeros);
        let coords: Vec<usize> = if n <= MIN_COORDS {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, MIN_COORDS).into_vec();
            c.sort_unstable();
            c
        };
        let mut check = TensorCheck {
            name: name.to_string(),
            numel: n,
            coords: coords.len(),
            max_rel_error: 0.0,
            worst_coord: 0,
        };
        for &i in &coords {
            let orig = t.data()[i];
            work.by_index_mut(idx).1.data_mut()[i] = orig + h;
            let fp = eval(&f, &work, name)?;
            work.by_index_mut(idx).1.data_mut()[i] = orig - h;
            let fm = eval(&f, &work, name)?;
            work.by_index_mut(idx).1.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let err = relative_error(analytic[i], numeric);
            if err > check.max_rel_error {
                check.max_rel_error = err;
                check.worst_coord = i;
            }
        }
        tensors.push(check);
    }
    Ok(GradCheckReport { tol, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert(
            "theta",
            Tensor::new(vec![40], (0..40).map(|i| (i as f64 * 0.7).sin() * 3.0).collect())
                .unwrap()
                .with_grad(true),
        );
        s
    }

    #[test]
    fn quadratic_is_exact() {
        let f = |p: &ParamStore, g: &mut Graph| {
            let t = g.param(p, "theta")?;
            let sq = g.mul(t, t)?;
            let s = g.sum(sq);
            Ok(g.scale(s, 0.5))
        };
        // Exact for any step; a coarse step keeps round-off below 1e-8.
        let r = finite_diff_grad_check(f, &store(), 1e-2, 1e-8, 0).unwrap();
        assert!(r.passed(), "{r:?}");
        assert_eq!(r.tensors[0].coords, MIN_COORDS);
    }

    #[test]
    fn zero_step_is_contract_error() {
        let f = |p: &ParamStore, g: &mut Graph| {
            let t = g.param(p, "theta")?;
            Ok(g.sum(t))
        };
        assert!(matches!(
            finite_diff_grad_check(f, &store(), 0.0, 1e-4, 0),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn wrong_adjoint_is_caught() {
        // Fused loss claiming d/dθ (Σθ²) = θ instead of 2θ.
        let f = |p: &ParamStore, g: &mut Graph| {
            let t = g.param(p, "theta")?;
            let v: Vec<f64> = g.value(t).to_vec();
            let val = v.iter().map(|x| x * x).sum();
            g.fused_loss(val, vec![(t, v)])
        };
        let r = finite_diff_grad_check(f, &store(), 1e-6, 1e-4, 0).unwrap();
        assert!(!r.passed());
        assert!((r.max_rel_error() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_objective_names_tensor() {
        // sqrt(θ) is finite at θ = 0 but not at θ - h.
        let mut s = ParamStore::new();
        s.insert("root", Tensor::new(vec![1], vec![0.0]).unwrap().with_grad(true));
        let f = |p: &ParamStore, g: &mut Graph| {
            let t = g.param(p, "root")?;
            let v = g.value(t)[0];
            g.fused_loss(v.sqrt(), vec![(t, vec![0.0])])
        };
        match finite_diff_grad_check(f, &s, 1e-6, 1e-4, 0) {
            Err(Error::Numeric { name, .. }) => assert_eq!(name, "root"),
            other => panic!("unexpected {other:?}"),
        }
    }
}
