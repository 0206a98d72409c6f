//! Central-difference verification of backward rules, in `f64`.

use std::fmt;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Fault, Tape, Var};
use crate::{Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckOptions {
    pub h: f64,
    pub tol: f64,
    /// Coordinates checked per input; 0 checks all of them.
    pub max_coords: usize,
    pub seed: u64,
    pub fault: Option<Fault>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            h: 1e-3,
            tol: 1e-3,
            max_coords: 0,
            seed: 0,
            fault: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Points where the one-sided slopes disagree (a kink inside the stencil).
    pub excluded: usize,
    pub tol: f64,
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.max_rel_error < self.tol
    }

    /// Folds another report for the same check into this one.
    pub fn merge(&mut self, other: GradCheckReport) {
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.checked += other.checked;
        self.excluded += other.excluded;
        self.failures.extend(other.failures);
    }
}

impl fmt::Display for GradCheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:<20} {} max_rel_err={:.3e} checked={} excluded={}",
            self.name,
            if self.passed() { "ok  " } else { "FAIL" },
            self.max_rel_error,
            self.checked,
            self.excluded
        )
    }
}

/// Relative error with a floor on the denominator so that vanishing
/// gradients are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

type Graph<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + 'a;

fn evaluate(graph: &Graph<'_>, inputs: &[Tensor<f64>], weights: &mut Option<Vec<f64>>, seed: u64) -> Result<f64, TensorError> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = graph(&mut tape, &vars)?;
    Ok(project(&mut tape, out, weights, seed)?.1)
}

/// Reduces a non-scalar output to a scalar with fixed random weights.
fn project(tape: &mut Tape<f64>, out: Var, weights: &mut Option<Vec<f64>>, seed: u64) -> Result<(Var, f64), TensorError> {
    if tape.value(out).len() == 1 {
        return Ok((out, tape.data(out)[0]));
    }
    let n = tape.value(out).len();
    let w = weights
        .get_or_insert_with(|| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
        })
        .clone();
    let s = tape.weighted_sum(out, w)?;
    Ok((s, tape.data(s)[0]))
}

/// Compares the tape's gradients of `graph` with central differences.
pub fn grad_check<F>(name: &str, inputs: &[Tensor<f64>], graph: F, opts: &GradCheckOptions) -> GradCheckReport
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError>,
{
    let mut report = GradCheckReport {
        name: name.to_string(),
        max_rel_error: 0.0,
        checked: 0,
        excluded: 0,
        tol: opts.tol,
        failures: Vec::new(),
    };
    let mut weights = None;

    let mut tape = Tape::with_fault(opts.fault);
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let analytic = graph(&mut tape, &vars)
        .and_then(|out| project(&mut tape, out, &mut weights, opts.seed))
        .and_then(|(loss, _)| tape.backward(loss));
    if let Err(e) = analytic {
        report.failures.push(format!("graph failed: {e}"));
        return report;
    }
    let base = match evaluate(&graph, inputs, &mut weights, opts.seed) {
        Ok(v) => v,
        Err(e) => {
            report.failures.push(format!("graph failed: {e}"));
            return report;
        }
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = inputs.to_vec();
    for (k, &v) in vars.iter().enumerate() {
        let n = inputs[k].len();
        let grad = tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if opts.max_coords == 0 || n <= opts.max_coords {
            (0..n).collect()
        } else {
            let mut c = sample(&mut rng, n, opts.max_coords).into_vec();
            c.sort_unstable();
            c
        };
        for j in coords {
            let x0 = inputs[k].data()[j];
            let mut at = |x: f64| {
                probe[k].data_mut()[j] = x;
                let r = evaluate(&graph, &probe, &mut weights, opts.seed);
                probe[k].data_mut()[j] = x0;
                r
            };
            let (fp, fm) = match (at(x0 + opts.h), at(x0 - opts.h)) {
                (Ok(a), Ok(b)) => (a, b),
                (Err(e), _) | (_, Err(e)) => {
                    report.failures.push(format!("input {k}[{j}]: perturbed graph failed: {e}"));
                    continue;
                }
            };
            let right = (fp - base) / opts.h;
            let left = (base - fm) / opts.h;
            if (right - left).abs() > 0.1 * right.abs().max(left.abs()).max(1e-3) {
                report.excluded += 1;
                continue;
            }
            let numeric = (fp - fm) / (2.0 * opts.h);
            let err = relative_error(grad[j], numeric);
            report.checked += 1;
            report.max_rel_error = report.max_rel_error.max(err);
            if err >= opts.tol {
                report
                    .failures
                    .push(format!("input {k}[{j}]: analytic {:.6e} numeric {numeric:.6e}", grad[j]));
            }
        }
    }
    report
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0) + rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).unwrap()
}

type Case = (Vec<Tensor<f64>>, Box<Graph<'static>>);

fn case(inputs: Vec<Tensor<f64>>, g: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var, TensorError> + 'static) -> Case {
    (inputs, Box::new(g))
}

/// Names of the differentiable operators covered by [`run_op_suite`].
pub const SUITE_OPS: &[&str] = &[
    "conv2d",
    "maxpool2d",
    "adaptive_maxpool2d",
    "roi_pool",
    "upsample_nearest",
    "relu",
    "sigmoid",
    "linear",
    "concat",
    "slice",
    "channels_last",
    "add",
    "scale",
    "sum",
    "reshape",
    "softmax",
    "smooth_l1",
    "cross_entropy",
    "bce",
    "bce_logits",
    "nll_relation",
];

fn build_case(op: &str, rng: &mut ChaCha8Rng) -> Case {
    let dim = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo..=hi);
    match op {
        "conv2d" => {
            let (n, c, o) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3));
            let k = dim(rng, 1, 3);
            let (stride, pad) = (dim(rng, 1, 2), dim(rng, 0, 1));
            let (h, w) = (dim(rng, k, 6), dim(rng, k, 6));
            let bias = rng.gen_bool(0.5);
            let mut inputs = vec![randn(rng, &[n, c, h, w]), randn(rng, &[o, c, k, k])];
            if bias {
                inputs.push(randn(rng, &[o]));
            }
            case(inputs, move |t, v| t.conv2d(v[0], v[1], v.get(2).copied(), stride, pad))
        }
        "maxpool2d" => {
            let k = dim(rng, 1, 3);
            let stride = dim(rng, 1, 2);
            let (h, w) = (dim(rng, k, 6), dim(rng, k, 6));
            case(vec![randn(rng, &[1, 2, h, w])], move |t, v| t.maxpool2d(v[0], k, stride))
        }
        "adaptive_maxpool2d" => {
            let (h, w) = (dim(rng, 2, 7), dim(rng, 2, 7));
            let out = (dim(rng, 1, h), dim(rng, 1, w));
            case(vec![randn(rng, &[1, 2, h, w])], move |t, v| t.adaptive_maxpool2d(v[0], out))
        }
        "roi_pool" => {
            let (h, w) = (dim(rng, 3, 8), dim(rng, 3, 8));
            let x1 = rng.gen_range(-1.0..w as f64 - 1.5);
            let y1 = rng.gen_range(-1.0..h as f64 - 1.5);
            let bbox = [x1, y1, x1 + rng.gen_range(1.0..4.0), y1 + rng.gen_range(1.0..4.0)];
            let p = dim(rng, 1, 3);
            case(vec![randn(rng, &[1, 2, h, w])], move |t, v| t.roi_pool(v[0], bbox, (p, p)))
        }
        "upsample_nearest" => {
            let (h, w) = (dim(rng, 1, 4), dim(rng, 1, 4));
            let out = (h * dim(rng, 1, 3), w + dim(rng, 0, 3));
            case(vec![randn(rng, &[1, 2, h, w])], move |t, v| t.upsample_nearest(v[0], out))
        }
        "relu" => {
            let s = [dim(rng, 1, 4), 5];
            case(vec![randn(rng, &s)], |t, v| Ok(t.relu(v[0])))
        }
        "sigmoid" => {
            let s = [dim(rng, 1, 4), 5];
            case(vec![randn(rng, &s)], |t, v| Ok(t.sigmoid(v[0])))
        }
        "linear" => {
            let (n, i, o) = (dim(rng, 1, 4), dim(rng, 1, 6), dim(rng, 1, 5));
            let bias = rng.gen_bool(0.5);
            let mut inputs = vec![randn(rng, &[n, i]), randn(rng, &[o, i])];
            if bias {
                inputs.push(randn(rng, &[o]));
            }
            case(inputs, |t, v| t.linear(v[0], v[1], v.get(2).copied()))
        }
        "concat" => {
            let axis = dim(rng, 0, 2);
            let mut a = [2, 3, 2];
            let mut b = a;
            a[axis] = dim(rng, 1, 3);
            b[axis] = dim(rng, 1, 3);
            case(vec![randn(rng, &a), randn(rng, &b)], move |t, v| t.concat(&[v[0], v[1]], axis))
        }
        "slice" => {
            let axis = dim(rng, 0, 2);
            let start = dim(rng, 0, 2);
            let len = dim(rng, 1, 4 - start);
            case(vec![randn(rng, &[4, 4, 4])], move |t, v| t.slice(v[0], axis, start, len))
        }
        "channels_last" => {
            let s = [dim(rng, 1, 2), 3, 2, dim(rng, 1, 3)];
            case(vec![randn(rng, &s)], |t, v| t.channels_last(v[0]))
        }
        "add" => {
            let s = [dim(rng, 1, 4), 3];
            case(vec![randn(rng, &s), randn(rng, &s)], |t, v| t.add(v[0], v[1]))
        }
        "scale" => {
            let c = rng.gen_range(-2.0..2.0);
            case(vec![randn(rng, &[3, 2])], move |t, v| Ok(t.scale(v[0], c)))
        }
        "sum" => {
            let s = [dim(rng, 1, 5), 2];
            case(vec![randn(rng, &s)], |t, v| Ok(t.sum(v[0])))
        }
        "reshape" => case(vec![randn(rng, &[2, 6])], |t, v| t.reshape(v[0], &[3, 4])),
        "softmax" => {
            let s = [dim(rng, 1, 4), dim(rng, 2, 5)];
            case(vec![randn(rng, &s)], |t, v| t.softmax(v[0]))
        }
        "smooth_l1" => {
            let shape = [dim(rng, 1, 4), 3];
            let gt = randn(rng, &shape);
            // Keep |pre - gt| away from the quadratic/linear seam.
            let mut pre = randn(rng, &shape);
            for (p, g) in pre.data_mut().iter_mut().zip(gt.data()) {
                if ((*p - g).abs() - 1.0).abs() < 0.01 {
                    *p += 0.05;
                }
            }
            case(vec![pre], move |t, v| t.smooth_l1(&gt, v[0]))
        }
        "cross_entropy" => {
            let (r, k) = (dim(rng, 1, 4), dim(rng, 2, 5));
            let mut gt = Tensor::zeros(&[r, k]);
            for row in 0..r {
                gt.data_mut()[row * k + rng.gen_range(0..k)] = rng.gen_range(0.5..2.0);
            }
            case(vec![randn(rng, &[r, k])], move |t, v| t.cross_entropy(&gt, v[0]))
        }
        "bce" => {
            let shape = [dim(rng, 1, 4), 3];
            let gt = uniform(rng, &shape, 0.0, 1.0);
            let mean = rng.gen_bool(0.5);
            case(vec![uniform(rng, &shape, 0.05, 0.95)], move |t, v| t.bce(&gt, v[0], mean))
        }
        "bce_logits" => {
            let shape = [dim(rng, 1, 4), 3];
            let gt = uniform(rng, &shape, 0.0, 1.0);
            let mean = rng.gen_bool(0.5);
            case(vec![randn(rng, &shape)], move |t, v| t.bce_logits(&gt, v[0], mean))
        }
        "nll_relation" => {
            let r = dim(rng, 1, 4);
            let labels: Vec<usize> = (0..r).map(|_| rng.gen_range(0..3)).collect();
            case(vec![uniform(rng, &[r, 3], 0.05, 1.0)], move |t, v| t.nll_relation(v[0], &labels))
        }
        other => panic!("no gradient check case for {other}"),
    }
}

/// Checks every operator on `seeds` randomized inputs starting at
/// `opts.seed`, one report per operator.
pub fn run_op_suite(seeds: u64, opts: &GradCheckOptions) -> Vec<GradCheckReport> {
    SUITE_OPS
        .iter()
        .map(|&op| {
            let mut total: Option<GradCheckReport> = None;
            for seed in (0..seeds).map(|i| opts.seed.wrapping_add(i)) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003) ^ op.len() as u64);
                let (inputs, graph) = build_case(op, &mut rng);
                let r = grad_check(op, &inputs, graph.as_ref(), &GradCheckOptions { seed, ..*opts });
                match total.as_mut() {
                    Some(t) => t.merge(r),
                    None => total = Some(r),
                }
            }
            total.expect("at least one seed")
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_layer_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let inputs = vec![randn(&mut rng, &[3, 4]), randn(&mut rng, &[2, 4]), randn(&mut rng, &[2])];
        let r = grad_check("linear", &inputs, |t, v| t.linear(v[0], v[1], Some(v[2])), &Default::default());
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn conv_on_six_by_six_passes() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let inputs = vec![randn(&mut rng, &[1, 1, 6, 6]), randn(&mut rng, &[1, 1, 3, 3])];
        let r = grad_check("conv2d", &inputs, |t, v| t.conv2d(v[0], v[1], None, 1, 1), &Default::default());
        assert!(r.passed(), "{r}");
        assert_eq!(r.checked + r.excluded, 45);
    }

    #[test]
    fn relu_at_zero_is_excluded_not_failed() {
        let x = Tensor::from_f64(&[3], &[0.0, 0.5, -0.5]).unwrap();
        let r = grad_check("relu", &[x], |t, v| Ok(t.relu(v[0])), &Default::default());
        assert_eq!(r.excluded, 1);
        assert_eq!(r.checked, 2);
        assert!(r.passed(), "{r}");
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let x = Tensor::from_f64(&[3], &[0.3, 0.5, -0.5]).unwrap();
        let opts = GradCheckOptions {
            fault: Some(Fault::ReluGradDoubled),
            ..Default::default()
        };
        let r = grad_check("relu", &[x], |t, v| Ok(t.relu(v[0])), &opts);
        assert!(!r.passed());
        let suite = run_op_suite(2, &GradCheckOptions {
            fault: Some(Fault::ConvWeightGradDoubled),
            ..Default::default()
        });
        assert!(!suite.iter().find(|r| r.name == "conv2d").unwrap().passed());
    }
}
