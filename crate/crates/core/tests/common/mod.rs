#![allow(dead_code)]

pub mod metric_oracle;
pub mod oracle;
pub mod toy;

use promptfuse_core::nn::{ActiveSet, Graph, ParamStore, Var};
use promptfuse_core::Tensor;
use rand::{Rng, SeedableRng};

/// Outcome of a finite-difference gradient check.
#[derive(Debug, Default)]
pub struct FdReport {
    pub checked: usize,
    /// Samples skipped because the central-difference stencil crossed a kink.
    pub redrawn: usize,
    pub worst_rel: f64,
    /// `(parameter name, analytic, numeric)` at the worst sample.
    pub worst: Option<(String, f64, f64)>,
}

/// Denominator floor of the relative error; below it the comparison is in
/// effect absolute, matching the round-off of the difference quotient.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares analytic parameter gradients of the scalar built by `build`
/// against central differences at `samples` random parameter entries.
pub fn check_param_grads(
    store: &mut ParamStore,
    samples: usize,
    h: f64,
    seed: u64,
    build: impl Fn(&mut Graph) -> Var,
) -> FdReport {
    let eval = |store: &ParamStore| -> (f64, ActiveSet) {
        let mut g = Graph::with_params(store);
        let out = build(&mut g);
        (g.value(out).data()[0], g.active_set())
    };
    let analytic: Vec<Tensor> = {
        let mut g = Graph::with_params(store);
        let out = build(&mut g);
        let grads = g.backward(out);
        g.param_grads(&grads)
    };
    let (_, base) = eval(store);
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport::default();
    let n = store.len();
    while report.checked < samples {
        assert!(report.redrawn < 10 * samples, "too many stencils cross non-smooth points");
        let ti = rng.random_range(0..n);
        let j = rng.random_range(0..store.tensors()[ti].len());
        let orig = store.tensors()[ti].data()[j];
        store.tensors_mut()[ti].data_mut()[j] = orig + h;
        let (lp, sp) = eval(store);
        store.tensors_mut()[ti].data_mut()[j] = orig - h;
        let (lm, sm) = eval(store);
        store.tensors_mut()[ti].data_mut()[j] = orig;
        if sp != base || sm != base {
            report.redrawn += 1;
            continue;
        }
        let numeric = (lp - lm) / (2.0 * h);
        let rel = rel_err(analytic[ti].data()[j], numeric);
        if rel >= report.worst_rel {
            report.worst_rel = rel;
            let name = store.iter().nth(ti).map(|(n, _)| n.to_string()).unwrap_or_default();
            report.worst = Some((format!("{name}[{j}]"), analytic[ti].data()[j], numeric));
        }
        report.checked += 1;
    }
    report
}

/// Fixed random projection turning a block output into an O(1) scalar loss.
pub fn project(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let w = Tensor::new(&shape, oracle::random_vec(n, seed).iter().map(|v| v / n as f64).collect()).unwrap();
    let wv = g.constant(w);
    let prod = g.mul(x, wv);
    g.sum(prod)
}
