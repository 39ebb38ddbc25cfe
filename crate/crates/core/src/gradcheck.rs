//! Central finite-difference gradient checking.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Conv2dSpec, Graph, Var};
use crate::tensor::Tensor;

/// Denominator floor for the relative error, so coordinates whose true
/// gradient is ~0 are judged on absolute error instead.
pub const RELATIVE_FLOOR: f64 = 1e-2;

#[derive(Clone, Debug)]
pub struct FdReport {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates whose one-sided differences disagree, i.e. a kink lies
    /// within `h` of the evaluation point. Excluded from `max_rel_error`.
    pub unreliable: Vec<usize>,
    pub max_rel_error: f64,
    /// Coordinate attaining `max_rel_error`.
    pub worst: Option<usize>,
    pub tol: f64,
    pub passed: bool,
}

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

/// Compares `analytic` against central differences of `f` at `x`.
pub fn finite_diff_check<F>(f: F, analytic: &Tensor, x: &Tensor, h: f64, tol: f64) -> Result<FdReport>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(analytic.shape(), x.shape(), "gradient shape must match input");
    let f0 = f(x)?;
    let mut numeric = Vec::with_capacity(x.len());
    let mut unreliable = Vec::new();
    let mut max_rel_error: f64 = 0.0;
    let mut worst = None;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let xi = x.data()[i];
        probe.data_mut()[i] = xi + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = xi - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = xi;
        let central = (fp - fm) / (2.0 * h);
        numeric.push(central);
        let forward = (fp - f0) / h;
        let backward = (f0 - fm) / h;
        // A smooth function has |forward - backward| ~ h |f''|; a kink gives
        // a jump that does not shrink with h.
        let asym = (forward - backward).abs();
        if asym > 1e-2 * forward.abs().max(backward.abs()).max(1.0) {
            unreliable.push(i);
            continue;
        }
        let e = relative_error(analytic.data()[i], central);
        if e > max_rel_error {
            max_rel_error = e;
            worst = Some(i);
        }
    }
    Ok(FdReport {
        analytic: analytic.data().to_vec(),
        numeric,
        unreliable,
        max_rel_error,
        worst,
        tol,
        passed: max_rel_error < tol,
    })
}

#[derive(Clone, Debug)]
enum Step {
    Conv { stride: usize, pad: usize },
    Relu,
    Sigmoid,
    Pool,
    Scale(f64),
    MulLeaf,
    AddLeaf,
    SubLeaf,
    Square,
    Gap,
    Flatten,
    Dense,
    ConcatLeaf,
    MaxOver(Vec<usize>),
    Index(usize),
    Bce(Vec<f64>),
    Sum,
}

/// A randomly wired scalar-valued graph whose leaves (input and weights)
/// are packed into one flat vector, for gradient checking every operator.
#[derive(Clone, Debug)]
pub struct RandomGraph {
    input: [usize; 3],
    steps: Vec<Step>,
    leaves: Vec<Vec<usize>>,
    init: Vec<f64>,
}

impl RandomGraph {
    pub fn sample(seed: u64) -> RandomGraph {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = [rng.random_range(1..=2), rng.random_range(3..=6), rng.random_range(3..=6)];
        let mut leaves = vec![input.to_vec()];
        let mut steps = Vec::new();
        let mut shape = input.to_vec();
        for _ in 0..rng.random_range(1..=4) {
            let step = match rng.random_range(0..9) {
                0 | 1 => {
                    let k = if rng.random_bool(0.5) { 3 } else { 1 };
                    let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
                    let stride = if shape[1] >= 4 && shape[2] >= 4 { rng.random_range(1..=2) } else { 1 };
                    if shape[1] + 2 * pad < k || shape[2] + 2 * pad < k {
                        Step::Relu
                    } else {
                        let co = rng.random_range(1..=3);
                        leaves.push(vec![co, shape[0], k, k]);
                        leaves.push(vec![co]);
                        shape = vec![co, (shape[1] + 2 * pad - k) / stride + 1, (shape[2] + 2 * pad - k) / stride + 1];
                        Step::Conv { stride, pad }
                    }
                }
                2 => Step::Relu,
                3 => Step::Sigmoid,
                4 if shape[1] >= 2 && shape[2] >= 2 => {
                    shape = vec![shape[0], shape[1] / 2, shape[2] / 2];
                    Step::Pool
                }
                5 => Step::Scale(rng.random_range(-2.0..2.0)),
                6 => {
                    leaves.push(shape.clone());
                    [Step::MulLeaf, Step::AddLeaf, Step::SubLeaf][rng.random_range(0..3)].clone()
                }
                _ => Step::Square,
            };
            steps.push(step);
        }
        let mut n = if rng.random_bool(0.5) {
            steps.push(Step::Gap);
            shape[0]
        } else {
            steps.push(Step::Flatten);
            shape.iter().product()
        };
        for _ in 0..rng.random_range(0..=3) {
            match rng.random_range(0..4) {
                0 => {
                    let out = rng.random_range(1..=4);
                    leaves.push(vec![out, n]);
                    leaves.push(vec![out]);
                    steps.push(Step::Dense);
                    n = out;
                }
                1 => {
                    let extra = rng.random_range(1..=3);
                    leaves.push(vec![extra]);
                    steps.push(Step::ConcatLeaf);
                    n += extra;
                }
                2 => steps.push(Step::Sigmoid),
                _ => steps.push(Step::Relu),
            }
        }
        match rng.random_range(0..4) {
            0 => {
                let k = rng.random_range(1..=n);
                let mut idx: Vec<usize> = (0..n).collect();
                for i in 0..k {
                    let j = rng.random_range(i..n);
                    idx.swap(i, j);
                }
                idx.truncate(k);
                steps.push(Step::MaxOver(idx));
            }
            1 => steps.push(Step::Index(rng.random_range(0..n))),
            2 => steps.push(Step::Bce((0..n).map(|_| rng.random_range(0.0..1.0)).collect())),
            _ => steps.push(Step::Sum),
        }
        let total: usize = leaves.iter().map(|s| s.iter().product::<usize>()).sum();
        let init = (0..total).map(|_| rng.random_range(-1.0..1.0)).collect();
        RandomGraph { input, steps, leaves, init }
    }

    pub fn n_params(&self) -> usize {
        self.init.len()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    /// Operators used, in order.
    pub fn describe(&self) -> String {
        self.steps.iter().map(|s| format!("{s:?}").split([' ', '(', '{']).next().unwrap_or("").to_string()).collect::<Vec<_>>().join(" > ")
    }

    /// The sampled leaf values, flattened.
    pub fn point(&self) -> Tensor {
        Tensor::from_vec(self.init.clone())
    }

    /// Output value and its gradient with respect to the flat leaf vector.
    pub fn eval(&self, flat: &Tensor) -> Result<(f64, Tensor)> {
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(self.leaves.len());
        let mut off = 0;
        for s in &self.leaves {
            let n: usize = s.iter().product();
            vars.push(g.leaf(Tensor::new(s.clone(), flat.data()[off..off + n].to_vec())?, true)?);
            off += n;
        }
        let mut next = 1;
        let mut take = |count: usize| -> Vec<Var> {
            let v = vars[next..next + count].to_vec();
            next += count;
            v
        };
        let mut h = vars[0];
        for step in &self.steps {
            h = match step {
                Step::Conv { stride, pad, .. } => {
                    let p = take(2);
                    g.conv2d(h, p[0], p[1], Conv2dSpec { stride: *stride, pad: *pad })?
                }
                Step::Relu => g.relu(h)?,
                Step::Sigmoid => g.sigmoid(h)?,
                Step::Pool => g.max_pool2d(h, 2, 2)?,
                Step::Scale(f) => g.scale(h, *f)?,
                Step::MulLeaf => g.mul(h, take(1)[0])?,
                Step::AddLeaf => g.add(h, take(1)[0])?,
                Step::SubLeaf => g.sub(h, take(1)[0])?,
                Step::Square => g.mul(h, h)?,
                Step::Gap => g.global_avg_pool(h)?,
                Step::Flatten => {
                    let n = g.value(h)?.len();
                    g.reshape(h, &[n])?
                }
                Step::Dense => {
                    let p = take(2);
                    g.dense(h, p[0], p[1])?
                }
                Step::ConcatLeaf => g.concat(&[h, take(1)[0]])?,
                Step::MaxOver(idx) => g.max_over(h, idx)?,
                Step::Index(i) => g.index(h, *i)?,
                Step::Bce(t) => g.bce_with_logits(h, t)?,
                Step::Sum => g.sum(h)?,
            };
        }
        let value = g.value(h)?.item()?;
        let grads = g.backward(h)?;
        let mut out = Vec::with_capacity(flat.len());
        for (v, s) in vars.iter().zip(&self.leaves) {
            match grads.get(*v) {
                Some(t) => out.extend_from_slice(t.data()),
                None => out.extend(std::iter::repeat_n(0.0, s.iter().product())),
            }
        }
        Ok((value, Tensor::from_vec(out)))
    }

    /// Central-difference check of [`RandomGraph::eval`] at the sampled point.
    pub fn check(&self, h: f64, tol: f64) -> Result<FdReport> {
        let x = self.point();
        let (_, grad) = self.eval(&x)?;
        finite_diff_check(|t| Ok(self.eval(t)?.0), &grad, &x, h, tol)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_of_squares_passes() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let grad = Tensor::from_vec(vec![2.0, 4.0]);
        let rep = finite_diff_check(|t| Ok(t.data().iter().map(|v| v * v).sum()), &grad, &x, 1e-3, 1e-5).unwrap();
        assert!(rep.passed, "{rep:?}");
        assert!(rep.unreliable.is_empty());
    }

    #[test]
    fn wrong_gradient_fails() {
        let x = Tensor::from_vec(vec![1.0, 2.0]);
        let grad = Tensor::from_vec(vec![2.0, 4.1]);
        let rep = finite_diff_check(|t| Ok(t.data().iter().map(|v| v * v).sum()), &grad, &x, 1e-3, 1e-5).unwrap();
        assert!(!rep.passed);
        assert_eq!(rep.worst, Some(1));
    }

    #[test]
    fn kink_is_flagged() {
        let x = Tensor::from_vec(vec![0.0, 1.0]);
        let grad = Tensor::from_vec(vec![0.0, 1.0]);
        let rep = finite_diff_check(|t| Ok(t.data().iter().map(|v| v.max(0.0)).sum()), &grad, &x, 1e-3, 1e-5).unwrap();
        assert_eq!(rep.unreliable, vec![0]);
        assert!(rep.passed);
    }

    #[test]
    fn random_graphs_build_and_pass() {
        for seed in 0..10 {
            let rg = RandomGraph::sample(seed);
            let rep = rg.check(1e-5, 1e-4).unwrap();
            assert!(rep.passed, "seed {seed}: {} {rep:?}", rg.describe());
        }
    }
}
