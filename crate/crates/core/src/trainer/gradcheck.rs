use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::mlp::{sigmoid, Mlp};
use super::{DistilledModel, LabeledExample, TrainError};

/// Gradients at or below this magnitude are left out of the error maximum.
pub const MIN_CHECKED_GRADIENT: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub max_relative_error: f64,
    pub checked: usize,
    /// Parameters skipped because the perturbation switched a rectifier.
    pub skipped_kinks: usize,
    /// Parameters skipped because the analytic gradient is negligible.
    pub skipped_small: usize,
}

/// Running sum with Neumaier compensation.
#[derive(Clone, Copy, Default)]
struct Sum {
    hi: f64,
    lo: f64,
}

impl Sum {
    fn new(v: f64) -> Self {
        Self { hi: v, lo: 0.0 }
    }

    fn add(&mut self, v: f64) {
        let t = self.hi + v;
        self.lo += if self.hi.abs() >= v.abs() { (self.hi - t) + v } else { (v - t) + self.hi };
        self.hi = t;
    }

    fn value(self) -> f64 {
        self.hi + self.lo
    }
}

fn pre_activation(mlp: &Mlp, l: usize, input: &[f64]) -> Vec<f64> {
    let fan_out = mlp.sizes[l + 1];
    let w = mlp.weights(l);
    let mut z: Vec<Sum> = mlp.biases(l).iter().map(|&b| Sum::new(b)).collect();
    for (i, &a) in input.iter().enumerate() {
        for (o, &wij) in z.iter_mut().zip(&w[i * fan_out..(i + 1) * fan_out]) {
            o.add(a * wij);
        }
    }
    z.into_iter().map(Sum::value).collect()
}

/// `loss(zp) - loss(zm)` for binary cross-entropy with target `y` in
/// {0, 1}, evaluated without cancellation.
fn loss_difference(zp: f64, zm: f64, y: f64) -> f64 {
    // loss(z) = softplus(s z) with s = 1 for negatives and -1 for positives
    let s = if y > 0.5 { -1.0 } else { 1.0 };
    (sigmoid(s * zm) * (s * (zp - zm)).exp_m1()).ln_1p()
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|v| v.max(0.0)).collect()
}

struct Base {
    /// Pre-activations per layer; the last holds the logit.
    z: Vec<Vec<f64>>,
    /// Inputs per layer; `a[0]` is the example.
    a: Vec<Vec<f64>>,
}

impl Base {
    fn new(mlp: &Mlp, x: &[f64]) -> Self {
        let mut a = vec![x.to_vec()];
        let mut z = Vec::new();
        for l in 0..mlp.layers() {
            let zl = pre_activation(mlp, l, &a[l]);
            a.push(relu(&zl));
            z.push(zl);
        }
        Self { z, a }
    }
}

fn same_mask(a: &[f64], b: &[f64]) -> bool {
    a.iter().zip(b).all(|(x, y)| (*x > 0.0) == (*y > 0.0))
}

/// Logit with parameter `k` (in layer `l`, output unit `j`, input row `i` or
/// bias when `None`) set to `value`. Returns `None` when a rectifier
/// switches state relative to the base pass.
fn perturbed_logit(mlp: &Mlp, base: &Base, l: usize, i: Option<usize>, j: usize, value: f64) -> Option<f64> {
    let fan_in = mlp.sizes[l];
    let fan_out = mlp.sizes[l + 1];
    let w = mlp.weights(l);
    let input = &base.a[l];
    let mut sum = Sum::new(match i {
        None => value,
        Some(_) => mlp.biases(l)[j],
    });
    for r in 0..fan_in {
        let wr = if i == Some(r) { value } else { w[r * fan_out + j] };
        sum.add(input[r] * wr);
    }
    let zj = sum.value();
    let last = mlp.layers() - 1;
    if l == last {
        return Some(zj);
    }
    if (zj > 0.0) != (base.z[l][j] > 0.0) {
        return None;
    }
    let delta = zj.max(0.0) - base.a[l + 1][j];
    // the next layer sees a single changed input unit
    let next_out = mlp.sizes[l + 2];
    let wn = &mlp.weights(l + 1)[j * next_out..(j + 1) * next_out];
    let mut z: Vec<f64> = base.z[l + 1]
        .iter()
        .zip(wn)
        .map(|(&b, &w)| {
            let mut s = Sum::new(b);
            s.add(w * delta);
            s.value()
        })
        .collect();
    for m in l + 1..last {
        if !same_mask(&z, &base.z[m]) {
            return None;
        }
        z = pre_activation(mlp, m + 1, &relu(&z));
    }
    Some(z[0])
}

/// Loss and analytic gradient for one example, in flat parameter order.
pub fn loss_gradient(model: &DistilledModel, example: &LabeledExample) -> Result<(f64, Vec<f64>), TrainError> {
    model.check_dim(0, &example.embedding)?;
    let mlp = model.mlp();
    let x: Vec<f64> = example.embedding.iter().map(|&v| f64::from(v)).collect();
    let mut grad = vec![0.0; mlp.params.len()];
    let loss = mlp.loss_and_gradient(&x, &[example.label.target()], &mut grad);
    Ok((loss, grad))
}

/// Compares the backward pass against central finite differences of the
/// single-example loss for every parameter and returns the largest
/// relative error.
pub fn gradient_check(model: &DistilledModel, example: &LabeledExample, step: f64) -> Result<GradientCheck, TrainError> {
    if !(step > 0.0 && step <= 1e-2) {
        return Err(TrainError::Precondition(format!("step {step} outside (0, 1e-2]")));
    }
    model.check_dim(0, &example.embedding)?;
    let mlp = model.mlp();
    let x: Vec<f64> = example.embedding.iter().map(|&v| f64::from(v)).collect();
    let y = example.label.target();
    let mut analytic = vec![0.0; mlp.params.len()];
    mlp.loss_and_gradient(&x, &[y], &mut analytic);
    let base = Base::new(&mlp, &x);

    let mut index = Vec::with_capacity(mlp.params.len());
    for l in 0..mlp.layers() {
        for i in 0..mlp.sizes[l] {
            for j in 0..mlp.sizes[l + 1] {
                index.push((l, Some(i), j));
            }
        }
        for j in 0..mlp.sizes[l + 1] {
            index.push((l, None, j));
        }
    }

    #[derive(Clone, Copy)]
    enum Outcome {
        Checked(f64),
        Kink,
        Small,
    }
    let outcomes: Vec<Outcome> = index
        .par_iter()
        .zip(analytic.par_iter().zip(mlp.params.par_iter()))
        .map(|(&(l, i, j), (&g, &p))| {
            if g.abs() <= MIN_CHECKED_GRADIENT {
                return Outcome::Small;
            }
            let plus = perturbed_logit(&mlp, &base, l, i, j, p + step);
            let minus = perturbed_logit(&mlp, &base, l, i, j, p - step);
            match (plus, minus) {
                (Some(zp), Some(zm)) => {
                    let numeric = loss_difference(zp, zm, y) / ((p + step) - (p - step));
                    Outcome::Checked((g - numeric).abs() / g.abs().max(numeric.abs()))
                }
                _ => Outcome::Kink,
            }
        })
        .collect();

    let mut out = GradientCheck { max_relative_error: 0.0, checked: 0, skipped_kinks: 0, skipped_small: 0 };
    for o in outcomes {
        match o {
            Outcome::Checked(e) => {
                out.checked += 1;
                out.max_relative_error = out.max_relative_error.max(e);
            }
            Outcome::Kink => out.skipped_kinks += 1,
            Outcome::Small => out.skipped_small += 1,
        }
    }
    Ok(out)
}
