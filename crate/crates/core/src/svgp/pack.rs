//! Flat-vector view of all trainable parameters, used by the optimizer and by
//! finite-difference checks. Layout: extractor layers (weights row-major then
//! bias, per layer), then per head: log signal std, log lengthscales, log
//! noise std, whitened mean, covariance factor rows (log-diagonal in place of
//! the diagonal), inducing inputs row-major.

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::mlp::MlpGrads;
use crate::svgp::elbo::{ElboGrads, HeadGrads};
use crate::svgp::SvdklModel;

/// Whole-model gradient accumulator matching the packed layout.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub extractor: Option<MlpGrads>,
    pub heads: Vec<HeadGrads>,
}

impl ModelGrads {
    pub fn zeros_like(model: &SvdklModel) -> Self {
        ModelGrads {
            extractor: model.extractor.as_ref().map(MlpGrads::zeros_like),
            heads: model.heads.iter().map(HeadGrads::zeros_like).collect(),
        }
    }

    /// Fold one task's ELBO gradients into the accumulator. Tasks must be
    /// accumulated in a fixed order for bitwise reproducibility.
    pub fn accumulate(&mut self, task: usize, g: &ElboGrads) {
        if let (Some(acc), Some(inc)) = (self.extractor.as_mut(), g.extractor.as_ref()) {
            acc.add_assign(inc);
        }
        self.heads[task].add_assign(&g.head);
    }

    /// Flip the sign of every gradient (ascent objective to descent loss).
    pub fn negate(&mut self) {
        if let Some(e) = self.extractor.as_mut() {
            for w in &mut e.weights {
                w.mapv_inplace(|v| -v);
            }
            for b in &mut e.biases {
                b.mapv_inplace(|v| -v);
            }
        }
        for h in &mut self.heads {
            h.kernel.log_signal_std = -h.kernel.log_signal_std;
            h.kernel.log_noise_std = -h.kernel.log_noise_std;
            h.kernel.log_lengthscales.mapv_inplace(|v| -v);
            h.var_mean.mapv_inplace(|v| -v);
            h.var_chol_strict.mapv_inplace(|v| -v);
            h.var_chol_log_diag.mapv_inplace(|v| -v);
            h.inducing.mapv_inplace(|v| -v);
        }
    }
}

/// Number of packed parameters of a model.
pub fn param_count(model: &SvdklModel) -> usize {
    let mut n = 0;
    if let Some(net) = &model.extractor {
        n += net.param_count();
    }
    for head in &model.heads {
        let m = head.variational.num_inducing();
        let d = head.kernel.dim();
        n += 2 + d; // log hyperparameters
        n += m; // whitened mean
        n += m * (m + 1) / 2; // factor lower triangle
        n += m * d; // inducing inputs
    }
    n
}

pub fn pack_params(model: &SvdklModel) -> Vec<f64> {
    let mut v = Vec::with_capacity(param_count(model));
    if let Some(net) = &model.extractor {
        for l in 0..net.layer_count() {
            v.extend(net.weights[l].iter());
            v.extend(net.biases[l].iter());
        }
    }
    for head in &model.heads {
        v.push(head.kernel.log_signal_std);
        v.extend(head.kernel.log_lengthscales.iter());
        v.push(head.kernel.log_noise_std);
        v.extend(head.variational.mean.iter());
        let m = head.variational.num_inducing();
        for i in 0..m {
            for j in 0..=i {
                if i == j {
                    v.push(head.variational.chol_log_diag[i]);
                } else {
                    v.push(head.variational.chol_strict[[i, j]]);
                }
            }
        }
        v.extend(head.variational.inducing.iter());
    }
    v
}

pub fn unpack_params(model: &mut SvdklModel, flat: &[f64]) -> Result<()> {
    if flat.len() != param_count(model) {
        return Err(Error::DimensionMismatch(format!(
            "packed vector of {} against {} parameters",
            flat.len(),
            param_count(model)
        )));
    }
    let mut k = 0;
    if let Some(net) = model.extractor.as_mut() {
        for l in 0..net.layer_count() {
            for w in net.weights[l].iter_mut() {
                *w = flat[k];
                k += 1;
            }
            for b in net.biases[l].iter_mut() {
                *b = flat[k];
                k += 1;
            }
        }
    }
    for head in &mut model.heads {
        head.kernel.log_signal_std = flat[k];
        k += 1;
        for l in head.kernel.log_lengthscales.iter_mut() {
            *l = flat[k];
            k += 1;
        }
        head.kernel.log_noise_std = flat[k];
        k += 1;
        for m in head.variational.mean.iter_mut() {
            *m = flat[k];
            k += 1;
        }
        let m = head.variational.num_inducing();
        for i in 0..m {
            for j in 0..=i {
                if i == j {
                    head.variational.chol_log_diag[i] = flat[k];
                } else {
                    head.variational.chol_strict[[i, j]] = flat[k];
                }
                k += 1;
            }
        }
        for z in head.variational.inducing.iter_mut() {
            *z = flat[k];
            k += 1;
        }
    }
    debug_assert_eq!(k, flat.len());
    Ok(())
}

/// Pack a gradient bundle with the same layout as [`pack_params`].
pub fn pack_grads(model: &SvdklModel, grads: &ModelGrads) -> Vec<f64> {
    let mut v = Vec::with_capacity(param_count(model));
    if let Some(g) = &grads.extractor {
        for l in 0..g.weights.len() {
            v.extend(g.weights[l].iter());
            v.extend(g.biases[l].iter());
        }
    }
    for (head, g) in model.heads.iter().zip(&grads.heads) {
        v.push(g.kernel.log_signal_std);
        v.extend(g.kernel.log_lengthscales.iter());
        v.push(g.kernel.log_noise_std);
        v.extend(g.var_mean.iter());
        let m = head.variational.num_inducing();
        for i in 0..m {
            for j in 0..=i {
                if i == j {
                    v.push(g.var_chol_log_diag[i]);
                } else {
                    v.push(g.var_chol_strict[[i, j]]);
                }
            }
        }
        v.extend(g.inducing.iter());
    }
    v
}

#[allow(dead_code)]
fn _shape_note(_: &Array2<f64>) {}
