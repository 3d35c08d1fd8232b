//! Fully connected feature extractor with an explicit forward tape and
//! reverse-mode gradients with respect to both weights and inputs. Hidden
//! layers share one activation; the final layer is linear so the features can
//! span all of feature space.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};

static FORWARD_EVALS: AtomicU64 = AtomicU64::new(0);

/// Number of forward passes executed since process start. Test instrumentation
/// for the one-shared-forward contract of multi-task prediction.
pub fn forward_eval_count() -> u64 {
    FORWARD_EVALS.load(Ordering::Relaxed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }

    /// He initialization variance for relu, Xavier-style for tanh.
    fn init_variance(self, fan_in: usize) -> f64 {
        match self {
            Activation::Relu => 2.0 / fan_in as f64,
            Activation::Tanh => 1.0 / fan_in as f64,
        }
    }
}

/// Dense network parameters. Layer `l` maps `widths[l] -> widths[l+1]` with a
/// `widths[l+1] x widths[l]` weight matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpParams {
    pub widths: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    pub activation: Activation,
}

/// Gradient bundle shaped like [`MlpParams`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        MlpGrads {
            weights: params.weights.iter().map(|w| Array2::zeros(w.dim())).collect(),
            biases: params.biases.iter().map(|b| Array1::zeros(b.len())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.weights.iter_mut().zip(&other.weights) {
            *a += b;
        }
        for (a, b) in self.biases.iter_mut().zip(&other.biases) {
            *a += b;
        }
    }
}

/// Per-layer inputs and pre-activations recorded by a forward pass; consumed
/// by [`MlpParams::backward_batch`].
#[derive(Debug, Clone)]
pub struct ForwardTape {
    widths: Vec<usize>,
    /// `inputs[l]` is the batch fed into layer `l` (post-activation of l-1).
    inputs: Vec<Array2<f64>>,
    /// `preacts[l]` is the affine output of layer `l` before activation.
    preacts: Vec<Array2<f64>>,
}

/// Initialize a network: weights zero-mean Gaussian with fan-in scaled
/// variance, biases zero. Deterministic for a given seed.
pub fn mlp_init(widths: &[usize], activation: Activation, seed: u64) -> Result<MlpParams> {
    if widths.len() < 2 {
        return Err(Error::InvalidArchitecture(
            "need at least input and output widths".into(),
        ));
    }
    if widths.iter().any(|&w| w == 0) {
        return Err(Error::InvalidArchitecture("zero-width layer".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::with_capacity(widths.len() - 1);
    let mut biases = Vec::with_capacity(widths.len() - 1);
    for l in 0..widths.len() - 1 {
        let (fan_in, fan_out) = (widths[l], widths[l + 1]);
        let std = activation.init_variance(fan_in).sqrt();
        let normal = Normal::new(0.0, std).expect("valid std");
        let w = Array2::from_shape_fn((fan_out, fan_in), |_| normal.sample(&mut rng));
        weights.push(w);
        biases.push(Array1::zeros(fan_out));
    }
    Ok(MlpParams {
        widths: widths.to_vec(),
        weights,
        biases,
        activation,
    })
}

impl MlpParams {
    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layer_count(&self) -> usize {
        self.widths.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[1] * (w[0] + 1))
            .sum::<usize>()
    }

    /// Forward pass over a batch of rows; returns features and the tape
    /// needed for the reverse pass.
    pub fn forward_batch(&self, x: ArrayView2<'_, f64>) -> Result<(Array2<f64>, ForwardTape)> {
        if x.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "mlp forward: expected {} input columns, got {}",
                self.input_dim(),
                x.ncols()
            )));
        }
        FORWARD_EVALS.fetch_add(1, Ordering::Relaxed);
        let layers = self.layer_count();
        let mut inputs = Vec::with_capacity(layers);
        let mut preacts = Vec::with_capacity(layers);
        let mut a = x.to_owned();
        for l in 0..layers {
            inputs.push(a.clone());
            let mut z = a.dot(&self.weights[l].t());
            z += &self.biases[l];
            preacts.push(z.clone());
            a = if l + 1 == layers {
                z // final layer linear
            } else {
                z.mapv(|v| self.activation.apply(v))
            };
        }
        Ok((
            a,
            ForwardTape {
                widths: self.widths.clone(),
                inputs,
                preacts,
            },
        ))
    }

    /// Single-row convenience wrapper over [`MlpParams::forward_batch`].
    pub fn forward(&self, x: ArrayView1<'_, f64>) -> Result<(Array1<f64>, ForwardTape)> {
        let row = x
            .to_owned()
            .into_shape_with_order((1, x.len()))
            .expect("row reshape");
        let (out, tape) = self.forward_batch(row.view())?;
        Ok((out.row(0).to_owned(), tape))
    }

    /// Reverse pass: gradients of `<grad_output, f(x)>` summed over the batch,
    /// with respect to every parameter and to the batch inputs.
    pub fn backward_batch(
        &self,
        tape: &ForwardTape,
        grad_output: ArrayView2<'_, f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        if tape.widths != self.widths {
            return Err(Error::StaleTape(format!(
                "tape widths {:?} vs params {:?}",
                tape.widths, self.widths
            )));
        }
        let layers = self.layer_count();
        if grad_output.ncols() != self.output_dim()
            || grad_output.nrows() != tape.inputs[0].nrows()
        {
            return Err(Error::DimensionMismatch(format!(
                "mlp backward: upstream is {}x{}, expected {}x{}",
                grad_output.nrows(),
                grad_output.ncols(),
                tape.inputs[0].nrows(),
                self.output_dim()
            )));
        }
        let mut grads = MlpGrads::zeros_like(self);
        let mut delta = grad_output.to_owned(); // gradient wrt layer output
        for l in (0..layers).rev() {
            // gradient wrt pre-activation
            let dz = if l + 1 == layers {
                delta
            } else {
                let mut dz = delta;
                dz.zip_mut_with(&tape.preacts[l], |g, &z| *g *= self.activation.derivative(z));
                dz
            };
            grads.weights[l] = dz.t().dot(&tape.inputs[l]);
            grads.biases[l] = dz.sum_axis(Axis(0));
            delta = dz.dot(&self.weights[l]);
        }
        Ok((grads, delta))
    }

    /// Single-row convenience wrapper over [`MlpParams::backward_batch`].
    pub fn backward(
        &self,
        tape: &ForwardTape,
        grad_output: ArrayView1<'_, f64>,
    ) -> Result<(MlpGrads, Array1<f64>)> {
        let row = grad_output
            .to_owned()
            .into_shape_with_order((1, grad_output.len()))
            .expect("row reshape");
        let (grads, dx) = self.backward_batch(tape, row.view())?;
        Ok((grads, dx.row(0).to_owned()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::Rng;
    use rand::SeedableRng;

    #[test]
    fn init_is_deterministic_and_counts_params() {
        let a = mlp_init(&[21, 64, 64, 8], Activation::Relu, 99).unwrap();
        let b = mlp_init(&[21, 64, 64, 8], Activation::Relu, 99).unwrap();
        for (wa, wb) in a.weights.iter().zip(&b.weights) {
            assert_eq!(wa, wb);
        }
        let small = mlp_init(&[4, 8], Activation::Tanh, 0).unwrap();
        assert_eq!(small.param_count(), 40);
    }

    #[test]
    fn init_rejects_bad_architectures() {
        assert!(mlp_init(&[4], Activation::Relu, 0).is_err());
        assert!(mlp_init(&[4, 0, 2], Activation::Relu, 0).is_err());
    }

    #[test]
    fn init_variance_matches_fan_in_rule() {
        // 10^4 draws via a wide first layer
        let p = mlp_init(&[25, 400], Activation::Relu, 5).unwrap();
        let flat: Vec<f64> = p.weights[0].iter().copied().collect();
        let n = flat.len() as f64;
        let mean = flat.iter().sum::<f64>() / n;
        let var = flat.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let expect = 2.0 / 25.0;
        assert!(
            (var - expect).abs() < 0.2 * expect,
            "sample variance {var} vs {expect}"
        );
    }

    #[test]
    fn zero_weights_give_zero_output() {
        let mut p = mlp_init(&[3, 4, 2], Activation::Relu, 1).unwrap();
        for w in &mut p.weights {
            w.fill(0.0);
        }
        let (y, _) = p.forward(array![1.0, -2.0, 3.0].view()).unwrap();
        assert_eq!(y, array![0.0, 0.0]);
    }

    #[test]
    fn identity_linear_layer_is_passthrough() {
        let p = MlpParams {
            widths: vec![3, 3],
            weights: vec![Array2::eye(3)],
            biases: vec![Array1::zeros(3)],
            activation: Activation::Relu,
        };
        let x = array![0.5, -1.5, 2.0];
        let (y, _) = p.forward(x.view()).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn forward_matches_straight_line_reevaluation() {
        let p = mlp_init(&[4, 6, 3], Activation::Tanh, 17).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array1::from_shape_fn(4, |_| rng.random_range(-1.0..1.0));
        let (y, _) = p.forward(x.view()).unwrap();
        // independent layer-by-layer evaluation with scalar loops
        let mut a: Vec<f64> = x.to_vec();
        for l in 0..p.layer_count() {
            let mut next = vec![0.0; p.widths[l + 1]];
            for (i, out) in next.iter_mut().enumerate() {
                let mut s = p.biases[l][i];
                for (j, aj) in a.iter().enumerate() {
                    s += p.weights[l][[i, j]] * aj;
                }
                *out = if l + 1 == p.layer_count() { s } else { s.tanh() };
            }
            a = next;
        }
        for (yi, ai) in y.iter().zip(&a) {
            assert_abs_diff_eq!(yi, ai, epsilon = 1e-14);
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero_grads() {
        let p = mlp_init(&[3, 5, 2], Activation::Relu, 4).unwrap();
        let (_, tape) = p.forward(array![0.3, 0.1, -0.2].view()).unwrap();
        let (g, dx) = p.backward(&tape, array![0.0, 0.0].view()).unwrap();
        assert!(g.weights.iter().all(|w| w.iter().all(|&v| v == 0.0)));
        assert!(dx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_layer_input_grad_is_weight_transpose_product() {
        let w = array![[1.0, 2.0, -1.0], [0.5, 0.0, 3.0]];
        let p = MlpParams {
            widths: vec![3, 2],
            weights: vec![w.clone()],
            biases: vec![Array1::zeros(2)],
            activation: Activation::Relu,
        };
        let (_, tape) = p.forward(array![0.2, -0.4, 1.0].view()).unwrap();
        let g_out = array![1.5, -2.0];
        let (_, dx) = p.backward(&tape, g_out.view()).unwrap();
        let expect = w.t().dot(&g_out);
        assert_abs_diff_eq!(dx, expect, epsilon = 1e-14);
    }

    #[test]
    fn stale_tape_is_rejected() {
        let p1 = mlp_init(&[3, 4, 2], Activation::Relu, 0).unwrap();
        let p2 = mlp_init(&[3, 5, 2], Activation::Relu, 0).unwrap();
        let (_, tape) = p1.forward(array![0.1, 0.2, 0.3].view()).unwrap();
        let err = p2.backward(&tape, array![1.0, 1.0].view()).unwrap_err();
        assert!(matches!(err, Error::StaleTape(_)));
    }

    fn flat_params(p: &MlpParams) -> Vec<f64> {
        let mut v = Vec::new();
        for l in 0..p.layer_count() {
            v.extend(p.weights[l].iter());
            v.extend(p.biases[l].iter());
        }
        v
    }

    fn set_flat(p: &mut MlpParams, flat: &[f64]) {
        let mut k = 0;
        for l in 0..p.layer_count() {
            for v in p.weights[l].iter_mut() {
                *v = flat[k];
                k += 1;
            }
            for v in p.biases[l].iter_mut() {
                *v = flat[k];
                k += 1;
            }
        }
    }

    fn grad_check(widths: &[usize], activation: Activation, seed: u64) {
        let p = mlp_init(widths, activation, seed).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
        let x = Array1::from_shape_fn(widths[0], |_| rng.random_range(-1.0..1.0));
        let g_out =
            Array1::from_shape_fn(*widths.last().unwrap(), |_| rng.random_range(-1.0..1.0));
        let objective = |params: &MlpParams| -> f64 {
            let (y, _) = params.forward(x.view()).unwrap();
            y.dot(&g_out)
        };
        let (_, tape) = p.forward(x.view()).unwrap();
        let (grads, dx) = p.backward(&tape, g_out.view()).unwrap();
        let mut analytic: Vec<f64> = Vec::new();
        for l in 0..p.layer_count() {
            analytic.extend(grads.weights[l].iter());
            analytic.extend(grads.biases[l].iter());
        }
        let base = flat_params(&p);
        let h = 1e-6;
        let mut scratch = p.clone();
        for (k, &g) in analytic.iter().enumerate() {
            let mut plus = base.clone();
            plus[k] += h;
            set_flat(&mut scratch, &plus);
            let fp = objective(&scratch);
            let mut minus = base.clone();
            minus[k] -= h;
            set_flat(&mut scratch, &minus);
            let fm = objective(&scratch);
            let fd = (fp - fm) / (2.0 * h);
            let denom = g.abs().max(fd.abs()).max(1e-3);
            assert!(
                (g - fd).abs() / denom < 1e-4,
                "param {k}: analytic {g} vs fd {fd}"
            );
        }
        // input gradient check
        for k in 0..x.len() {
            let mut xp = x.clone();
            xp[k] += h;
            let (yp, _) = p.forward(xp.view()).unwrap();
            let mut xm = x.clone();
            xm[k] -= h;
            let (ym, _) = p.forward(xm.view()).unwrap();
            let fd = (yp.dot(&g_out) - ym.dot(&g_out)) / (2.0 * h);
            let denom = dx[k].abs().max(fd.abs()).max(1e-3);
            assert!(
                (dx[k] - fd).abs() / denom < 1e-4,
                "input {k}: analytic {} vs fd {fd}",
                dx[k]
            );
        }
    }

    #[test]
    fn gradients_match_finite_differences_small_relu() {
        grad_check(&[4, 8, 2], Activation::Relu, 31);
    }

    #[test]
    fn gradients_match_finite_differences_small_tanh() {
        grad_check(&[4, 8, 2], Activation::Tanh, 32);
    }

    #[test]
    fn gradients_match_finite_differences_default_architecture() {
        grad_check(&[21, 64, 64, 8], Activation::Relu, 33);
        grad_check(&[21, 64, 64, 8], Activation::Tanh, 34);
    }

    #[test]
    fn relu_output_scales_with_final_layer_weights() {
        let mut p = mlp_init(&[5, 7, 3], Activation::Relu, 8).unwrap();
        let x = array![0.4, -0.2, 0.9, 0.0, -1.1];
        let (y1, _) = p.forward(x.view()).unwrap();
        let c = 3.5;
        let last = p.layer_count() - 1;
        p.weights[last] *= c;
        p.biases[last] *= c;
        let (y2, _) = p.forward(x.view()).unwrap();
        for (a, b) in y1.iter().zip(y2.iter()) {
            assert_abs_diff_eq!(a * c, *b, epsilon = 1e-12);
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let p = mlp_init(&[6, 9, 4], Activation::Tanh, 13).unwrap();
        let x = Array1::from_shape_fn(6, |i| (i as f64) * 0.37 - 1.0);
        let (y1, _) = p.forward(x.view()).unwrap();
        let (y2, _) = p.forward(x.view()).unwrap();
        assert_eq!(y1, y2);
    }
}
