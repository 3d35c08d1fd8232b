//! Minibatch evidence lower bound for one task head, with exact reverse-mode
//! gradients for every trainable quantity: whitened variational mean and
//! covariance factor, kernel log-hyperparameters, inducing inputs, and the
//! shared extractor weights.
//!
//! With whitening the bound is
//!
//! ```text
//! ELBO = (N/B) * sum_b E_q[log N(y_b | f_b, sn^2)] - KL(q(v) || N(0, I))
//! f_b  ~ N(a_b^T mu,  sf^2 - |a_b|^2 + |C^T a_b|^2),   a_b = L^-1 k(Z, f_b)
//! KL   = 1/2 (|C|_F^2 + |mu|^2 - m - 2 sum_i log C_ii)
//! ```
//!
//! The only nontrivial adjoint is the one through the Cholesky factor of the
//! inducing Gram matrix, handled by [`crate::numeric::chol_rev`].

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, kernel_matrix_grads, RbfGrads};
use crate::mlp::{ForwardTape, MlpGrads};
use crate::numeric::{chol_rev, solve_lower, solve_lower_t, CholFactor};
use crate::svgp::{inducing_factor, SvdklModel, TaskHead, VariationalState};

const LN_2PI: f64 = 1.837877066409345483560659472811;
/// Latent variance floor guarding against the Nystrom residual dipping
/// negative in floating point.
const VAR_FLOOR: f64 = 1e-12;

/// Gradients for one head, shaped like its parameters. The covariance factor
/// gradient is split like the storage: strictly-lower entries and log-domain
/// diagonal.
#[derive(Debug, Clone)]
pub struct HeadGrads {
    pub kernel: RbfGrads,
    pub var_mean: Array1<f64>,
    pub var_chol_strict: Array2<f64>,
    pub var_chol_log_diag: Array1<f64>,
    pub inducing: Array2<f64>,
}

impl HeadGrads {
    pub fn zeros_like(head: &TaskHead) -> Self {
        let m = head.variational.num_inducing();
        HeadGrads {
            kernel: RbfGrads::zeros(head.kernel.dim()),
            var_mean: Array1::zeros(m),
            var_chol_strict: Array2::zeros((m, m)),
            var_chol_log_diag: Array1::zeros(m),
            inducing: Array2::zeros(head.variational.inducing.raw_dim()),
        }
    }

    pub fn add_assign(&mut self, other: &HeadGrads) {
        self.kernel.add_assign(&other.kernel);
        self.var_mean += &other.var_mean;
        self.var_chol_strict += &other.var_chol_strict;
        self.var_chol_log_diag += &other.var_chol_log_diag;
        self.inducing += &other.inducing;
    }
}

/// Result of one `elbo_and_grads` call: extractor gradients (when the model
/// has an extractor) and the gradients of the queried head.
#[derive(Debug, Clone)]
pub struct ElboGrads {
    pub extractor: Option<MlpGrads>,
    pub head: HeadGrads,
}

/// KL divergence of the whitened variational posterior from its prior; zero
/// exactly when the mean is zero and the factor is the identity.
pub fn kl_divergence(state: &VariationalState) -> f64 {
    let m = state.num_inducing() as f64;
    let mut fro = 0.0;
    for i in 0..state.num_inducing() {
        for j in 0..i {
            fro += state.chol_strict[[i, j]] * state.chol_strict[[i, j]];
        }
        let d = state.chol_log_diag[i].exp();
        fro += d * d;
    }
    let logdet = 2.0 * state.chol_log_diag.sum();
    0.5 * (fro + state.mean.dot(&state.mean) - m - logdet)
}

struct ElboState {
    elbo: f64,
    tape: Option<ForwardTape>,
    feats: Array2<f64>,
    kzz: Array2<f64>,
    factor: CholFactor,
    kzf: Array2<f64>,
    a: Array2<f64>,
    c: Array2<f64>,
    mean_q: Array1<f64>,
    var_q: Array1<f64>,
    clamped: Vec<bool>,
    resid: Array1<f64>,
    scale: f64,
}

fn elbo_forward<'m>(
    model: &'m SvdklModel,
    task: usize,
    batch_x: ArrayView2<'_, f64>,
    batch_y: ArrayView1<'_, f64>,
    total_n: usize,
) -> Result<(ElboState, &'m TaskHead)> {
    let head = model
        .heads
        .get(task)
        .ok_or_else(|| Error::DimensionMismatch(format!("task {task} out of range")))?;
    let b = batch_x.nrows();
    if b == 0 {
        return Err(Error::EmptyDataset);
    }
    if batch_y.len() != b {
        return Err(Error::DimensionMismatch(format!(
            "{b} batch rows vs {} targets",
            batch_y.len()
        )));
    }
    if total_n < b {
        return Err(Error::OutOfRange(format!(
            "total_n {total_n} smaller than batch {b}"
        )));
    }
    let xn = model.normalize_inputs(batch_x)?;
    let (feats, tape) = match &model.extractor {
        Some(net) => {
            let (f, t) = net.forward_batch(xn.view())?;
            (f, Some(t))
        }
        None => (xn, None),
    };
    let yn = model.normalize_targets(task, batch_y)?;

    let (kzz, factor) = inducing_factor(head)?;
    let kzf = kernel_matrix(&head.kernel, head.variational.inducing.view(), feats.view())?;
    let a = solve_lower(factor.lower.view(), kzf.view())?;
    let c = head.variational.chol_matrix();
    let cta = c.t().dot(&a);

    let sf2 = head.kernel.signal_var();
    let sn2 = head.kernel.noise_var();
    let scale = total_n as f64 / b as f64;

    let mean_q = a.t().dot(&head.variational.mean);
    let mut var_q = Array1::<f64>::zeros(b);
    let mut clamped = vec![false; b];
    for i in 0..b {
        let nystrom = a.column(i).dot(&a.column(i));
        let extra = cta.column(i).dot(&cta.column(i));
        let v = sf2 - nystrom + extra;
        if v < VAR_FLOOR {
            var_q[i] = VAR_FLOOR;
            clamped[i] = true;
        } else {
            var_q[i] = v;
        }
    }
    let resid = &yn - &mean_q;

    let mut ell = 0.0;
    for i in 0..b {
        ell += -0.5 * LN_2PI - head.kernel.log_noise_std
            - (resid[i] * resid[i] + var_q[i]) / (2.0 * sn2);
    }
    let elbo = scale * ell - kl_divergence(&head.variational);

    Ok((
        ElboState {
            elbo,
            tape,
            feats,
            kzz,
            factor,
            kzf,
            a,
            c,
            mean_q,
            var_q,
            clamped,
            resid,
            scale,
        },
        head,
    ))
}

/// Minibatch-scaled ELBO for one task, without gradients.
pub fn elbo_value(
    model: &SvdklModel,
    task: usize,
    batch_x: ArrayView2<'_, f64>,
    batch_y: ArrayView1<'_, f64>,
    total_n: usize,
) -> Result<f64> {
    Ok(elbo_forward(model, task, batch_x, batch_y, total_n)?.0.elbo)
}

/// Minibatch-scaled ELBO together with exact gradients for all parameters it
/// depends on.
pub fn elbo_and_grads(
    model: &SvdklModel,
    task: usize,
    batch_x: ArrayView2<'_, f64>,
    batch_y: ArrayView1<'_, f64>,
    total_n: usize,
) -> Result<(f64, ElboGrads)> {
    let (st, head) = elbo_forward(model, task, batch_x, batch_y, total_n)?;
    let b = st.feats.nrows();
    let m = head.variational.num_inducing();
    let sn2 = head.kernel.noise_var();
    let sf2 = head.kernel.signal_var();

    // Likelihood adjoints.
    let g_mean = st.resid.mapv(|r| st.scale * r / sn2);
    let g_var = Array1::from_shape_fn(b, |i| {
        if st.clamped[i] {
            0.0
        } else {
            -st.scale / (2.0 * sn2)
        }
    });
    let mut d_log_noise = 0.0;
    for i in 0..b {
        d_log_noise +=
            st.scale * (-1.0 + (st.resid[i] * st.resid[i] + st.var_q[i]) / sn2);
    }

    // Whitened variational mean: likelihood pull minus KL shrinkage.
    let var_mean_grad = st.a.dot(&g_mean) - &head.variational.mean;

    // Covariance factor: Cbar_ell = 2 A diag(g_var) A^T C, then the KL part.
    let ag = &st.a * &g_var.view().insert_axis(Axis(0)); // scales columns
    let cbar_ell = ag.dot(&st.a.t()).dot(&st.c) * 2.0;
    let mut var_chol_strict = Array2::<f64>::zeros((m, m));
    let mut var_chol_log_diag = Array1::<f64>::zeros(m);
    for i in 0..m {
        for j in 0..i {
            var_chol_strict[[i, j]] = cbar_ell[[i, j]] - st.c[[i, j]];
        }
        let cii = st.c[[i, i]];
        var_chol_log_diag[i] = cii * cbar_ell[[i, i]] - cii * cii + 1.0;
    }

    // Adjoint of A: mean path and variance path.
    let s_a = st.c.dot(&st.c.t()).dot(&st.a); // S A with S = C C^T
    let mut abar = Array2::<f64>::zeros((m, b));
    for col in 0..b {
        for row in 0..m {
            abar[[row, col]] = g_mean[col] * head.variational.mean[row]
                + g_var[col] * 2.0 * (s_a[[row, col]] - st.a[[row, col]]);
        }
    }

    // A = L^-1 Kzf: adjoints of Kzf, L and (through chol_rev) Kzz.
    let kzf_bar = solve_lower_t(st.factor.lower.view(), abar.view())?;
    let lbar_full = kzf_bar.dot(&st.a.t()) * -1.0;
    let mut lbar = Array2::<f64>::zeros((m, m));
    for i in 0..m {
        for j in 0..=i {
            lbar[[i, j]] = lbar_full[[i, j]];
        }
    }
    let kzz_bar = chol_rev(st.factor.lower.view(), lbar.view())?;

    // Kernel-entry adjoints to hyperparameters, inducing inputs and features.
    let z = head.variational.inducing.view();
    let gz = kernel_matrix_grads(&head.kernel, z, z, &st.kzz, kzz_bar.view())?;
    let gf = kernel_matrix_grads(&head.kernel, z, st.feats.view(), &st.kzf, kzf_bar.view())?;

    let mut kernel = RbfGrads::zeros(head.kernel.dim());
    kernel.add_assign(&gz.params);
    kernel.add_assign(&gf.params);
    // diagonal k(f_b, f_b) = sf^2 term of the latent variance
    kernel.log_signal_std += 2.0 * sf2 * g_var.sum();
    kernel.log_noise_std += d_log_noise;

    let inducing = &gz.xs + &gz.xs2 + &gf.xs;

    let extractor = match (&model.extractor, &st.tape) {
        (Some(net), Some(tape)) => {
            let (wg, _) = net.backward_batch(tape, gf.xs2.view())?;
            Some(wg)
        }
        _ => None,
    };

    Ok((
        st.elbo,
        ElboGrads {
            extractor,
            head: HeadGrads {
                kernel,
                var_mean: var_mean_grad,
                var_chol_strict,
                var_chol_log_diag,
                inducing,
            },
        },
    ))
}
