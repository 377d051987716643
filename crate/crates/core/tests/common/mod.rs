//! Independent oracles shared by the integration suites.
#![allow(dead_code)]

use densegrad::{Result, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients smaller than this are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-3;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.random_range(lo..hi))
}

/// Values bounded away from zero, for ops with a kink there.
pub fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// A random permutation of well-separated values (no near-ties).
pub fn distinct(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut values: Vec<f64> = (0..n).map(|i| i as f64 * 0.01 - n as f64 * 0.005).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        values.swap(i, j);
    }
    Tensor::new(shape.to_vec(), values).unwrap()
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// One scalar evaluation plus the identity of its smooth piece.
pub struct Eval {
    pub loss: f64,
    pub signature: u64,
}

#[derive(Debug, Default, Clone)]
pub struct GradReport {
    pub max_rel_err: f64,
    pub checked: usize,
    /// Entries whose ±h neighbourhood straddles a kink.
    pub skipped: usize,
    pub worst: String,
}

impl GradReport {
    pub fn merge(&mut self, other: &GradReport) {
        if other.max_rel_err > self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
        self.checked += other.checked;
        self.skipped += other.skipped;
    }
}

/// Central differences of `eval` around `inputs`, compared with `analytic`.
/// `limit` caps the number of entries probed per tensor (evenly strided).
pub fn finite_difference_check(
    names: &[String],
    inputs: &[Tensor<f64>],
    analytic: &[Tensor<f64>],
    limit: Option<usize>,
    mut eval: impl FnMut(&[Tensor<f64>]) -> Eval,
) -> GradReport {
    let mut report = GradReport::default();
    let mut work = inputs.to_vec();
    let base_sig = eval(&work).signature;
    for (t, (name, grad)) in names.iter().zip(analytic).enumerate() {
        let n = work[t].numel();
        let stride = limit.map_or(1, |l| n.div_ceil(l).max(1));
        for i in (0..n).step_by(stride) {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + FD_STEP;
            let plus = eval(&work);
            work[t].data_mut()[i] = orig - FD_STEP;
            let minus = eval(&work);
            work[t].data_mut()[i] = orig;
            if plus.signature != base_sig || minus.signature != base_sig {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * FD_STEP);
            let err = rel_err(grad.data()[i], numeric);
            report.checked += 1;
            if err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = format!(
                    "{name}[{i}]: analytic {:.8e}, numeric {numeric:.8e}",
                    grad.data()[i]
                );
            }
        }
    }
    report
}

/// Checks a graph built by `build`, which records `inputs` on the tape and
/// returns the output plus the handle of each input. The scalar probed is
/// `Σ out·R` for fixed random weights `R`.
pub fn check_graph(
    seed: u64,
    names: &[String],
    inputs: &[Tensor<f64>],
    limit: Option<usize>,
    build: impl Fn(&mut Tape<f64>, &[Tensor<f64>]) -> Result<(Var, Vec<Var>)>,
) -> GradReport {
    let weights: std::cell::RefCell<Option<Tensor<f64>>> = Default::default();
    let run = |tensors: &[Tensor<f64>], backward: bool| -> (Eval, Vec<Tensor<f64>>) {
        let mut tape = Tape::new();
        let (out, vars) = build(&mut tape, tensors).expect("graph under test failed");
        let w = weights
            .borrow_mut()
            .get_or_insert_with(|| {
                let mut r = rng(seed ^ 0x5eed);
                uniform(&mut r, tape.value(out).shape(), -1.0, 1.0)
            })
            .clone();
        let loss = tape.weighted_sum(out, w).unwrap();
        let eval = Eval {
            loss: tape.value(loss).data()[0],
            signature: tape.piecewise_signature(),
        };
        let mut grads = Vec::new();
        if backward {
            tape.backward(loss).unwrap();
            grads = vars
                .iter()
                .zip(tensors)
                .map(|(v, t)| {
                    tape.grad(*v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(t.shape().to_vec()))
                })
                .collect();
        }
        (eval, grads)
    };
    let (_, analytic) = run(inputs, true);
    finite_difference_check(names, inputs, &analytic, limit, |t| run(t, false).0)
}

/// [`check_graph`] for a single op whose inputs are all trainable leaves.
pub fn check_op(
    seed: u64,
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
) -> GradReport {
    let names: Vec<String> = (0..inputs.len()).map(|i| format!("input{i}")).collect();
    check_graph(seed, &names, inputs, None, |tape, tensors| {
        let vars: Vec<Var> = tensors.iter().map(|t| tape.param(t.clone())).collect();
        Ok((build(tape, &vars)?, vars))
    })
}

/// Rank-based binary AUC computed by exhaustive pair counting.
pub fn auc_pairs(scores: &[f64], positive: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for (i, &pi) in positive.iter().enumerate() {
        if !pi {
            continue;
        }
        for (j, &pj) in positive.iter().enumerate() {
            if pj {
                continue;
            }
            pairs += 1.0;
            if scores[i] > scores[j] {
                wins += 1.0;
            } else if scores[i] == scores[j] {
                wins += 0.5;
            }
        }
    }
    wins / pairs
}

/// Trapezoidal area under the ROC curve swept over every distinct threshold.
pub fn auc_trapezoid(scores: &[f64], positive: &[bool]) -> f64 {
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let p = positive.iter().filter(|&&x| x).count() as f64;
    let n = positive.len() as f64 - p;
    let mut points = vec![(0.0, 0.0)];
    for &t in &thresholds {
        let tp = scores
            .iter()
            .zip(positive)
            .filter(|(s, &y)| **s >= t && y)
            .count() as f64;
        let fp = scores
            .iter()
            .zip(positive)
            .filter(|(s, &y)| **s >= t && !y)
            .count() as f64;
        points.push((fp / n, tp / p));
    }
    points
        .windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}

/// Textbook bilinear sample with half-pixel centres and edge clamping.
pub fn bilinear_reference(src: &[f64], h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let y = ((i as f64 + 0.5) * h as f64 / oh as f64 - 0.5).clamp(0.0, (h - 1) as f64);
            let x = ((j as f64 + 0.5) * w as f64 / ow as f64 - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (dy, dx) = (y - y0 as f64, x - x0 as f64);
            let v = src[y0 * w + x0] * (1.0 - dy) * (1.0 - dx)
                + src[y0 * w + x1] * (1.0 - dy) * dx
                + src[y1 * w + x0] * dy * (1.0 - dx)
                + src[y1 * w + x1] * dy * dx;
            out.push(v);
        }
    }
    out
}
