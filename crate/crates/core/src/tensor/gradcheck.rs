use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Fault, Graph, Tensor, Var};
use crate::error::Result;

/// Coordinates drawn per input tensor (all of them when the tensor is smaller).
pub const MIN_SAMPLED_COORDS: usize = 64;

/// Outcome of comparing tape gradients with central differences.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// `(input index, flat coordinate, analytic, numeric)` at the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub checked: usize,
    pub non_finite: bool,
    pub passed: bool,
}

/// Checks a tensor-to-scalar function at `point`.
pub fn finite_diff_check<F>(f: F, point: &Tensor, tol: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    finite_diff_check_many(
        |g, vars| f(g, vars[0]),
        std::slice::from_ref(point),
        tol,
        0x5eed,
        Fault::None,
    )
}

/// Checks a scalar function of several tensors; `fault` is applied to the
/// analytic pass only.
pub fn finite_diff_check_many<F>(
    f: F,
    points: &[Tensor],
    tol: f64,
    seed: u64,
    fault: Fault,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut graph = Graph::with_fault(fault);
    let vars: Vec<Var> = points.iter().map(|p| graph.leaf(p.clone())).collect();
    let root = f(&mut graph, &vars)?;
    let base = graph.value(root).data()[0];
    if !base.is_finite() {
        return Ok(failed_non_finite());
    }
    graph.backward(root)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(points)
        .map(|(&v, p)| {
            graph
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.numel()])
        })
        .collect();
    drop(graph);

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
        let r = f(&mut g, &vs)?;
        Ok(g.value(r).data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work: Vec<Tensor> = points.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
        non_finite: false,
        passed: true,
    };
    for (ti, point) in points.iter().enumerate() {
        let n = point.numel();
        let coords: Vec<usize> = if n <= MIN_SAMPLED_COORDS {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, MIN_SAMPLED_COORDS).into_vec();
            c.sort_unstable();
            c
        };
        for ci in coords {
            let x = point.data()[ci];
            let h = 1e-5 * x.abs().max(1.0);
            work[ti].data_mut()[ci] = x + h;
            let fp = eval(&work)?;
            work[ti].data_mut()[ci] = x - h;
            let fm = eval(&work)?;
            work[ti].data_mut()[ci] = x;
            if !fp.is_finite() || !fm.is_finite() {
                return Ok(failed_non_finite());
            }
            let numeric = (fp - fm) / (2.0 * h);
            let a = analytic[ti][ci];
            let denom = a.abs().max(numeric.abs()).max(1e-8);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if report.worst.is_none() || rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = Some((ti, ci, a, numeric));
            }
        }
    }
    report.passed = report.max_rel_error <= tol;
    Ok(report)
}

fn failed_non_finite() -> GradCheckReport {
    GradCheckReport {
        max_rel_error: f64::INFINITY,
        worst: None,
        checked: 0,
        non_finite: true,
        passed: false,
    }
}
