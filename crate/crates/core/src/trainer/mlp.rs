//! f64 multilayer perceptron math shared by training, prediction and the
//! gradient check. Parameters are one flat vector; per layer the weights
//! come first as a (fan_in x fan_out) row-major matrix, then the biases.

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mlp {
    pub sizes: Vec<usize>,
    pub params: Vec<f64>,
    offsets: Vec<usize>,
}

pub(crate) fn param_count(sizes: &[usize]) -> usize {
    sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

/// Numerically stable binary cross-entropy on a logit.
pub(crate) fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Mlp {
    pub fn new(sizes: Vec<usize>, params: Vec<f64>) -> Self {
        assert_eq!(params.len(), param_count(&sizes), "parameter count does not match layer sizes");
        let mut offsets = Vec::with_capacity(sizes.len());
        let mut off = 0;
        for w in sizes.windows(2) {
            offsets.push(off);
            off += w[0] * w[1] + w[1];
        }
        Self { sizes, params, offsets }
    }

    pub fn layers(&self) -> usize {
        self.sizes.len() - 1
    }

    /// Offset of the first weight and of the first bias of layer `l`.
    pub fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let w = self.offsets[l];
        (w, w + self.sizes[l] * self.sizes[l + 1])
    }

    pub fn weights(&self, l: usize) -> &[f64] {
        let (w, b) = self.layer_offsets(l);
        &self.params[w..b]
    }

    pub fn biases(&self, l: usize) -> &[f64] {
        let (_, b) = self.layer_offsets(l);
        &self.params[b..b + self.sizes[l + 1]]
    }

    /// Applies layer `l` to `n` rows of `input`, writing `n` rows to `out`.
    pub fn layer_forward(&self, l: usize, input: &[f64], n: usize, out: &mut Vec<f64>) {
        let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
        let w = self.weights(l);
        let b = self.biases(l);
        out.clear();
        out.reserve(n * fan_out);
        for r in 0..n {
            let start = out.len();
            out.extend_from_slice(b);
            let row = &mut out[start..];
            for (i, &v) in input[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
                if v != 0.0 {
                    for (o, &wij) in row.iter_mut().zip(&w[i * fan_out..(i + 1) * fan_out]) {
                        *o += v * wij;
                    }
                }
            }
            if l + 1 < self.layers() {
                for o in row.iter_mut() {
                    *o = o.max(0.0);
                }
            }
        }
    }

    /// Forward pass over `n` rows; `acts[l]` holds the input of layer `l`
    /// and the last entry holds the logits.
    pub fn forward(&self, x: &[f64], n: usize, acts: &mut Vec<Vec<f64>>) {
        acts.resize_with(self.layers() + 1, Vec::new);
        acts[0].clear();
        acts[0].extend_from_slice(x);
        for l in 0..self.layers() {
            let (before, after) = acts.split_at_mut(l + 1);
            self.layer_forward(l, &before[l], n, &mut after[0]);
        }
    }

    pub fn logits(&self, x: &[f64], n: usize) -> Vec<f64> {
        let mut acts = Vec::new();
        self.forward(x, n, &mut acts);
        acts.pop().unwrap_or_default()
    }

    /// Mean BCE over the rows and its gradient, written into `grad`.
    pub fn loss_and_gradient(&self, x: &[f64], y: &[f64], grad: &mut [f64]) -> f64 {
        let n = y.len();
        let mut acts = Vec::new();
        self.forward(x, n, &mut acts);
        let logits = &acts[self.layers()];
        let inv = 1.0 / n as f64;
        let loss = logits.iter().zip(y).map(|(&z, &t)| bce_with_logit(z, t)).sum::<f64>() * inv;
        let mut delta: Vec<f64> = logits.iter().zip(y).map(|(&z, &t)| (sigmoid(z) - t) * inv).collect();
        grad.iter_mut().for_each(|g| *g = 0.0);
        for l in (0..self.layers()).rev() {
            let (fan_in, fan_out) = (self.sizes[l], self.sizes[l + 1]);
            let (w_off, b_off) = self.layer_offsets(l);
            let input = &acts[l];
            {
                let (gw, gb) = grad[w_off..b_off + fan_out].split_at_mut(b_off - w_off);
                for r in 0..n {
                    let d = &delta[r * fan_out..(r + 1) * fan_out];
                    for (g, &v) in gb.iter_mut().zip(d) {
                        *g += v;
                    }
                    for (i, &a) in input[r * fan_in..(r + 1) * fan_in].iter().enumerate() {
                        if a != 0.0 {
                            for (g, &v) in gw[i * fan_out..(i + 1) * fan_out].iter_mut().zip(d) {
                                *g += a * v;
                            }
                        }
                    }
                }
            }
            if l == 0 {
                break;
            }
            let w = self.weights(l);
            let mut prev = vec![0.0; n * fan_in];
            for r in 0..n {
                let d = &delta[r * fan_out..(r + 1) * fan_out];
                for i in 0..fan_in {
                    // rectifier derivative: zero where the unit was inactive
                    if input[r * fan_in + i] > 0.0 {
                        prev[r * fan_in + i] =
                            w[i * fan_out..(i + 1) * fan_out].iter().zip(d).map(|(a, b)| a * b).sum();
                    }
                }
            }
            delta = prev;
        }
        loss
    }
}
