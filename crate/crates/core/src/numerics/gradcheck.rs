use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{contract_err, Result};

use super::{ParamStore, Tape, Var};

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub coordinates: usize,
    /// Worst relative error per checked parameter tensor.
    pub per_param: BTreeMap<String, f64>,
}

impl GradCheckReport {
    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.coordinates += other.coordinates;
        self.per_param.extend(other.per_param);
    }
}

/// `|a - n| / max(1e-8, |a| + |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares tape gradients of the scalar `f` against central differences
/// `(f(p + h) - f(p - h)) / 2h` on up to `samples` random coordinates of every
/// trainable tensor. Frozen tensors are skipped. `f` must build its graph on an
/// evaluation tape (no dropout); a computation that does not reproduce its own
/// value is rejected.
pub fn grad_check<F>(f: F, store: &ParamStore<f64>, h: f64, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    let eval = |s: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::new();
        let out = f(&mut tape, s)?;
        if tape.value(out).len() != 1 {
            return Err(contract_err!("grad_check objective must be a scalar"));
        }
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let out = f(&mut tape, store)?;
    if tape.value(out).len() != 1 {
        return Err(contract_err!("grad_check objective must be a scalar"));
    }
    let base = tape.scalar(out);
    if eval(store)?.to_bits() != base.to_bits() {
        return Err(contract_err!("objective is not deterministic; disable dropout before checking"));
    }
    let grads = tape.backward(out);
    let analytic = tape.param_grads(&grads);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = store.clone();
    let mut report = GradCheckReport::default();
    for (name, grad) in &analytic {
        let n = grad.len();
        let picks: Vec<usize> = if n <= samples {
            (0..n).collect()
        } else {
            let mut v = rand::seq::index::sample(&mut rng, n, samples).into_vec();
            v.sort_unstable();
            v
        };
        let mut worst = 0.0f64;
        for i in picks {
            let orig = work.get(name).unwrap().data()[i];
            work.get_mut(name).unwrap().data_mut()[i] = orig + h;
            let fp = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig - h;
            let fm = eval(&work)?;
            work.get_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            worst = worst.max(relative_error(grad.data()[i], numeric));
            report.coordinates += 1;
        }
        report.max_rel_error = report.max_rel_error.max(worst);
        report.per_param.insert(name.clone(), worst);
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut store = ParamStore::new();
        store.insert("x", Tensor::new(vec![1, 3], vec![1.0, 2.0, 3.0]).unwrap()).unwrap();
        let rep = grad_check(
            |tape, s| {
                let x = tape.param(s, "x");
                let sq = tape.matmul_t(x, false, x, true);
                Ok(tape.sum(sq))
            },
            &store,
            1e-5,
            64,
            0,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-7, "{rep:?}");
        assert_eq!(rep.coordinates, 3);
    }

    #[test]
    fn softmax_cross_entropy() {
        let mut store = ParamStore::new();
        store.insert("z", Tensor::new(vec![1, 4], vec![0.3, -1.1, 2.0, 0.5]).unwrap()).unwrap();
        let rep = grad_check(
            |tape, s| {
                let z = tape.param(s, "z");
                Ok(tape.cross_entropy(z, &[2], &[1.0]))
            },
            &store,
            1e-5,
            64,
            0,
        )
        .unwrap();
        assert!(rep.max_rel_error < 1e-6, "{rep:?}");
    }

    #[test]
    fn frozen_coordinates_are_excluded() {
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap()).unwrap();
        store.insert("b", Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap()).unwrap();
        store.freeze("b").unwrap();
        let f = |tape: &mut Tape<f64>, s: &ParamStore<f64>| {
            let a = tape.param(s, "a");
            let b = tape.param(s, "b");
            let ab = tape.matmul_t(a, false, b, true);
            Ok(tape.sum(ab))
        };
        let rep = grad_check(f, &store, 1e-5, 64, 0).unwrap();
        assert!(rep.per_param.contains_key("a"));
        assert!(!rep.per_param.contains_key("b"));
        let mut tape = Tape::new();
        let out = f(&mut tape, &store).unwrap();
        let g = tape.backward(out);
        assert!(!tape.param_grads(&g).contains_key("b"));
    }

    #[test]
    fn nondeterministic_objective_is_rejected() {
        use std::cell::Cell;
        let mut store = ParamStore::new();
        store.insert("a", Tensor::new(vec![1, 1], vec![1.0]).unwrap()).unwrap();
        let calls = Cell::new(0u64);
        let res = grad_check(
            |tape, s| {
                calls.set(calls.get() + 1);
                let a = tape.param(s, "a");
                let a = tape.scale(a, 1.0 + calls.get() as f64);
                Ok(tape.sum(a))
            },
            &store,
            1e-5,
            4,
            0,
        );
        assert!(matches!(res, Err(crate::Error::Contract(_))));
    }
}
