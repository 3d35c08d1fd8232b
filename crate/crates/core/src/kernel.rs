//! RBF kernel with per-dimension (ARD) lengthscales, optionally composed with
//! the MLP feature extractor, plus exact reverse-mode gradients with respect
//! to the log-domain hyperparameters and the kernel inputs.
//!
//! Hyperparameters are stored in the log domain so positivity never needs a
//! constraint. The observation noise `sigma_n` lives here as well but is only
//! applied by the likelihood/predictive code.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mlp::{MlpGrads, MlpParams};

/// Log-domain RBF hyperparameters: signal std, ARD lengthscales, noise std.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RbfParams {
    pub log_signal_std: f64,
    pub log_lengthscales: Array1<f64>,
    pub log_noise_std: f64,
}

impl RbfParams {
    /// Unit signal, unit lengthscales, noise std 0.1 — sensible on
    /// standardized data.
    pub fn standard_init(dim: usize) -> Self {
        RbfParams {
            log_signal_std: 0.0,
            log_lengthscales: Array1::zeros(dim),
            log_noise_std: (0.1_f64).ln(),
        }
    }

    pub fn dim(&self) -> usize {
        self.log_lengthscales.len()
    }

    pub fn signal_var(&self) -> f64 {
        (2.0 * self.log_signal_std).exp()
    }

    pub fn signal_std(&self) -> f64 {
        self.log_signal_std.exp()
    }

    pub fn noise_var(&self) -> f64 {
        (2.0 * self.log_noise_std).exp()
    }

    pub fn noise_std(&self) -> f64 {
        self.log_noise_std.exp()
    }

    pub fn lengthscales(&self) -> Array1<f64> {
        self.log_lengthscales.mapv(f64::exp)
    }

    fn check_finite(&self) -> Result<()> {
        let ok = self.log_signal_std.is_finite()
            && self.log_noise_std.is_finite()
            && self.log_lengthscales.iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::OutOfRange("non-finite kernel hyperparameter".into()))
        }
    }
}

/// Gradients with respect to the log-domain hyperparameters.
#[derive(Debug, Clone)]
pub struct RbfGrads {
    pub log_signal_std: f64,
    pub log_lengthscales: Array1<f64>,
    pub log_noise_std: f64,
}

impl RbfGrads {
    pub fn zeros(dim: usize) -> Self {
        RbfGrads {
            log_signal_std: 0.0,
            log_lengthscales: Array1::zeros(dim),
            log_noise_std: 0.0,
        }
    }

    pub fn add_assign(&mut self, other: &RbfGrads) {
        self.log_signal_std += other.log_signal_std;
        self.log_lengthscales += &other.log_lengthscales;
        self.log_noise_std += other.log_noise_std;
    }
}

/// `sigma_f^2 * exp(-1/2 * sum_d (x_d - y_d)^2 / l_d^2)` — noise is not added.
pub fn rbf_eval(p: &RbfParams, x: ArrayView1<'_, f64>, y: ArrayView1<'_, f64>) -> Result<f64> {
    p.check_finite()?;
    if x.len() != p.dim() || y.len() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "rbf_eval: inputs of length {}/{} against {} lengthscales",
            x.len(),
            y.len(),
            p.dim()
        )));
    }
    let mut q = 0.0;
    for d in 0..p.dim() {
        let inv_l = (-p.log_lengthscales[d]).exp();
        let diff = (x[d] - y[d]) * inv_l;
        q += diff * diff;
    }
    Ok(p.signal_var() * (-0.5 * q).exp())
}

/// Gram matrix between two row-wise input sets.
pub fn kernel_matrix(
    p: &RbfParams,
    xs: ArrayView2<'_, f64>,
    xs2: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    p.check_finite()?;
    if xs.ncols() != p.dim() || xs2.ncols() != p.dim() {
        return Err(Error::DimensionMismatch(format!(
            "kernel_matrix: {} and {} columns against {} lengthscales",
            xs.ncols(),
            xs2.ncols(),
            p.dim()
        )));
    }
    let sf2 = p.signal_var();
    let inv_l: Vec<f64> = p.log_lengthscales.iter().map(|v| (-v).exp()).collect();
    let (n, m) = (xs.nrows(), xs2.nrows());
    let mut k = Array2::<f64>::zeros((n, m));
    for i in 0..n {
        let xi = xs.row(i);
        for j in 0..m {
            let xj = xs2.row(j);
            let mut q = 0.0;
            for (d, il) in inv_l.iter().enumerate() {
                let diff = (xi[d] - xj[d]) * il;
                q += diff * diff;
            }
            k[[i, j]] = sf2 * (-0.5 * q).exp();
        }
    }
    Ok(k)
}

/// RBF kernel evaluated on extractor features: `k(g(x), g(y))`.
pub fn deep_kernel_eval(
    p: &RbfParams,
    net: &MlpParams,
    x: ArrayView1<'_, f64>,
    y: ArrayView1<'_, f64>,
) -> Result<f64> {
    let (fx, _) = net.forward(x)?;
    let (fy, _) = net.forward(y)?;
    rbf_eval(p, fx.view(), fy.view())
}

/// Gradients of `<upstream, K>` for a precomputed Gram matrix `k` between
/// `xs` and `xs2`, with respect to log hyperparameters and both input sets.
/// `log_noise_std` does not enter `K` and its slot is always zero here.
pub struct KernelMatrixGrads {
    pub params: RbfGrads,
    pub xs: Array2<f64>,
    pub xs2: Array2<f64>,
}

pub fn kernel_matrix_grads(
    p: &RbfParams,
    xs: ArrayView2<'_, f64>,
    xs2: ArrayView2<'_, f64>,
    k: &Array2<f64>,
    upstream: ArrayView2<'_, f64>,
) -> Result<KernelMatrixGrads> {
    if upstream.dim() != k.dim() || k.nrows() != xs.nrows() || k.ncols() != xs2.nrows() {
        return Err(Error::DimensionMismatch(
            "kernel_matrix_grads: upstream/gram shape".into(),
        ));
    }
    let d = p.dim();
    let inv_l2: Vec<f64> = p
        .log_lengthscales
        .iter()
        .map(|v| (-2.0 * v).exp())
        .collect();
    let mut grads = RbfGrads::zeros(d);
    let mut gxs = Array2::<f64>::zeros(xs.raw_dim());
    let mut gxs2 = Array2::<f64>::zeros(xs2.raw_dim());
    for i in 0..xs.nrows() {
        let xi = xs.row(i);
        for j in 0..xs2.nrows() {
            let u = upstream[[i, j]];
            if u == 0.0 {
                continue;
            }
            let uk = u * k[[i, j]];
            grads.log_signal_std += 2.0 * uk;
            for (dd, il2) in inv_l2.iter().enumerate() {
                let diff = xi[dd] - xs2[[j, dd]];
                let scaled = diff * il2;
                grads.log_lengthscales[dd] += uk * diff * scaled;
                gxs[[i, dd]] -= uk * scaled;
                gxs2[[j, dd]] += uk * scaled;
            }
        }
    }
    Ok(KernelMatrixGrads {
        params: grads,
        xs: gxs,
        xs2: gxs2,
    })
}

/// Gradients of `<upstream, K>` where `K` is the (optionally deep) kernel
/// matrix between raw inputs `xs` and `xs2`. With a network present both
/// input sets pass through it and the weight gradients are accumulated over
/// both sides; the returned input gradients are with respect to the raw rows.
pub fn kernel_grads(
    p: &RbfParams,
    net: Option<&MlpParams>,
    xs: ArrayView2<'_, f64>,
    xs2: ArrayView2<'_, f64>,
    upstream: ArrayView2<'_, f64>,
) -> Result<(RbfGrads, Option<MlpGrads>, Array2<f64>, Array2<f64>)> {
    match net {
        None => {
            let k = kernel_matrix(p, xs, xs2)?;
            let g = kernel_matrix_grads(p, xs, xs2, &k, upstream)?;
            Ok((g.params, None, g.xs, g.xs2))
        }
        Some(net) => {
            let (f1, tape1) = net.forward_batch(xs)?;
            let (f2, tape2) = net.forward_batch(xs2)?;
            let k = kernel_matrix(p, f1.view(), f2.view())?;
            let g = kernel_matrix_grads(p, f1.view(), f2.view(), &k, upstream)?;
            let (mut wg, dx1) = net.backward_batch(&tape1, g.xs.view())?;
            let (wg2, dx2) = net.backward_batch(&tape2, g.xs2.view())?;
            wg.add_assign(&wg2);
            Ok((g.params, Some(wg), dx1, dx2))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{mlp_init, Activation};
    use crate::numeric::{cholesky_psd, SymMatrix};
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array1};
    use proptest::prelude::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_distance_gives_signal_variance() {
        let p = RbfParams {
            log_signal_std: 0.3,
            log_lengthscales: Array1::zeros(4),
            log_noise_std: -2.0,
        };
        let x = array![1.0, -2.0, 0.5, 3.0];
        let v = rbf_eval(&p, x.view(), x.view()).unwrap();
        assert_abs_diff_eq!(v, p.signal_var(), epsilon = 1e-15);
    }

    #[test]
    fn unit_params_at_squared_distance_two() {
        let p = RbfParams::standard_init(2);
        let x = array![0.0, 0.0];
        let y = array![1.0, 1.0]; // squared distance 2
        let v = rbf_eval(&p, x.view(), y.view()).unwrap();
        assert_abs_diff_eq!(v, (-1.0_f64).exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(v, 0.367879441, epsilon = 1e-8);
    }

    #[test]
    fn huge_lengthscale_approaches_signal_variance() {
        let p = RbfParams {
            log_signal_std: 0.0,
            log_lengthscales: Array1::from_elem(3, 20.0),
            log_noise_std: 0.0,
        };
        let v = rbf_eval(&p, array![5.0, -3.0, 2.0].view(), array![-1.0, 4.0, 0.0].view()).unwrap();
        assert!((v - p.signal_var()).abs() < 1e-9);
    }

    #[test]
    fn matrix_reduces_to_eval_and_has_signal_diag() {
        let p = RbfParams::standard_init(3);
        let xs = array![[0.1, 0.2, 0.3]];
        let ys = array![[-0.5, 0.4, 0.0]];
        let k = kernel_matrix(&p, xs.view(), ys.view()).unwrap();
        let e = rbf_eval(&p, xs.row(0), ys.row(0)).unwrap();
        assert_eq!(k[[0, 0]], e);

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let xs = Array2::from_shape_fn((5, 3), |_| rng.random_range(-1.0..1.0));
        let kk = kernel_matrix(&p, xs.view(), xs.view()).unwrap();
        for i in 0..5 {
            assert_abs_diff_eq!(kk[[i, i]], p.signal_var(), epsilon = 1e-15);
        }
    }

    #[test]
    fn gram_matrix_is_factorizable() {
        let p = RbfParams::standard_init(3);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs = Array2::from_shape_fn((6, 3), |_| rng.random_range(-2.0..2.0));
        let k = kernel_matrix(&p, xs.view(), xs.view()).unwrap();
        let sym = SymMatrix::new(k).unwrap();
        assert!(cholesky_psd(&sym, &[0.0, 1e-8]).is_ok());
    }

    #[test]
    fn deep_kernel_is_composition() {
        let net = mlp_init(&[5, 6, 3], Activation::Relu, 21).unwrap();
        let p = RbfParams::standard_init(3);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let y = Array1::from_shape_fn(5, |_| rng.random_range(-1.0..1.0));
        let deep = deep_kernel_eval(&p, &net, x.view(), y.view()).unwrap();
        let (fx, _) = net.forward(x.view()).unwrap();
        let (fy, _) = net.forward(y.view()).unwrap();
        assert_eq!(deep, rbf_eval(&p, fx.view(), fy.view()).unwrap());
        // same input: exactly the signal variance, whatever the net
        let same = deep_kernel_eval(&p, &net, x.view(), x.view()).unwrap();
        assert_abs_diff_eq!(same, p.signal_var(), epsilon = 1e-15);
    }

    #[test]
    fn identity_net_reduces_to_raw_kernel() {
        let net = MlpParams {
            widths: vec![3, 3],
            weights: vec![Array2::eye(3)],
            biases: vec![Array1::zeros(3)],
            activation: Activation::Relu,
        };
        let p = RbfParams::standard_init(3);
        let x = array![0.4, -0.1, 0.9];
        let y = array![-0.3, 0.5, 0.2];
        let deep = deep_kernel_eval(&p, &net, x.view(), y.view()).unwrap();
        let raw = rbf_eval(&p, x.view(), y.view()).unwrap();
        assert_abs_diff_eq!(deep, raw, epsilon = 1e-15);
    }

    #[test]
    fn zero_upstream_means_zero_grads() {
        let p = RbfParams::standard_init(2);
        let xs = array![[0.0, 1.0], [1.0, 0.0]];
        let up = Array2::zeros((2, 2));
        let (g, _, gx, gx2) = kernel_grads(&p, None, xs.view(), xs.view(), up.view()).unwrap();
        assert_eq!(g.log_signal_std, 0.0);
        assert!(g.log_lengthscales.iter().all(|&v| v == 0.0));
        assert!(gx.iter().all(|&v| v == 0.0));
        assert!(gx2.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn signal_grad_identity() {
        // d/d log sigma_f <U, K> = 2 <U, K>
        let p = RbfParams {
            log_signal_std: 0.4,
            log_lengthscales: array![0.1, -0.3],
            log_noise_std: 0.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let xs = Array2::from_shape_fn((4, 2), |_| rng.random_range(-1.0..1.0));
        let ys = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));
        let up = Array2::from_shape_fn((4, 3), |_| rng.random_range(-1.0..1.0));
        let k = kernel_matrix(&p, xs.view(), ys.view()).unwrap();
        let (g, _, _, _) = kernel_grads(&p, None, xs.view(), ys.view(), up.view()).unwrap();
        let inner = (&k * &up).sum();
        assert_abs_diff_eq!(g.log_signal_std, 2.0 * inner, epsilon = 1e-12);
    }

    #[test]
    fn kernel_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let net = mlp_init(&[4, 5, 3], Activation::Tanh, 13).unwrap();
        let p = RbfParams {
            log_signal_std: 0.2,
            log_lengthscales: array![0.05, -0.2, 0.3],
            log_noise_std: -1.0,
        };
        let xs = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));
        let ys = Array2::from_shape_fn((2, 4), |_| rng.random_range(-1.0..1.0));
        let up = Array2::from_shape_fn((3, 2), |_| rng.random_range(-1.0..1.0));

        let objective = |p: &RbfParams, net: &MlpParams, xs: &Array2<f64>, ys: &Array2<f64>| {
            let (f1, _) = net.forward_batch(xs.view()).unwrap();
            let (f2, _) = net.forward_batch(ys.view()).unwrap();
            let k = kernel_matrix(p, f1.view(), f2.view()).unwrap();
            (&k * &up).sum()
        };

        let (g, wg, gxs, gys) =
            kernel_grads(&p, Some(&net), xs.view(), ys.view(), up.view()).unwrap();
        let wg = wg.unwrap();
        let h = 1e-6;
        let check = |analytic: f64, fd: f64, what: &str| {
            let denom = analytic.abs().max(fd.abs()).max(1e-3);
            assert!(
                (analytic - fd).abs() / denom < 1e-4,
                "{what}: analytic {analytic} vs fd {fd}"
            );
        };

        // hyperparameters
        {
            let mut pp = p.clone();
            pp.log_signal_std += h;
            let mut pm = p.clone();
            pm.log_signal_std -= h;
            check(
                g.log_signal_std,
                (objective(&pp, &net, &xs, &ys) - objective(&pm, &net, &xs, &ys)) / (2.0 * h),
                "log_signal",
            );
        }
        for d in 0..3 {
            let mut pp = p.clone();
            pp.log_lengthscales[d] += h;
            let mut pm = p.clone();
            pm.log_lengthscales[d] -= h;
            check(
                g.log_lengthscales[d],
                (objective(&pp, &net, &xs, &ys) - objective(&pm, &net, &xs, &ys)) / (2.0 * h),
                "log_lengthscale",
            );
        }
        // a few network weights
        for (li, wi, wj) in [(0usize, 0usize, 1usize), (1, 2, 3)] {
            let mut np = net.clone();
            np.weights[li][[wi, wj]] += h;
            let mut nm = net.clone();
            nm.weights[li][[wi, wj]] -= h;
            check(
                wg.weights[li][[wi, wj]],
                (objective(&p, &np, &xs, &ys) - objective(&p, &nm, &xs, &ys)) / (2.0 * h),
                "net weight",
            );
        }
        // raw inputs
        for (r, c) in [(0usize, 0usize), (2, 3)] {
            let mut xp = xs.clone();
            xp[[r, c]] += h;
            let mut xm = xs.clone();
            xm[[r, c]] -= h;
            check(
                gxs[[r, c]],
                (objective(&p, &net, &xp, &ys) - objective(&p, &net, &xm, &ys)) / (2.0 * h),
                "xs entry",
            );
        }
        for (r, c) in [(1usize, 2usize), (0, 3)] {
            let mut yp = ys.clone();
            yp[[r, c]] += h;
            let mut ym = ys.clone();
            ym[[r, c]] -= h;
            check(
                gys[[r, c]],
                (objective(&p, &net, &xs, &yp) - objective(&p, &net, &xs, &ym)) / (2.0 * h),
                "ys entry",
            );
        }
    }

    proptest! {
        #[test]
        fn symmetry_and_bounds(
            xv in proptest::collection::vec(-5.0..5.0f64, 3),
            yv in proptest::collection::vec(-5.0..5.0f64, 3),
            ls in proptest::collection::vec(-1.0..1.0f64, 3),
            lsig in -1.0..1.0f64,
        ) {
            let p = RbfParams {
                log_signal_std: lsig,
                log_lengthscales: Array1::from_vec(ls),
                log_noise_std: 0.0,
            };
            let x = Array1::from_vec(xv);
            let y = Array1::from_vec(yv);
            let a = rbf_eval(&p, x.view(), y.view()).unwrap();
            let b = rbf_eval(&p, y.view(), x.view()).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a > 0.0);
            prop_assert!(a <= p.signal_var() * (1.0 + 1e-15));
        }

        #[test]
        fn lengthscale_monotonicity(
            shift in 0.01..2.0f64,
            base in -0.5..0.5f64,
        ) {
            let x = array![0.0, 0.0];
            let y = array![1.0, -0.7];
            let p1 = RbfParams {
                log_signal_std: 0.0,
                log_lengthscales: array![base, base],
                log_noise_std: 0.0,
            };
            let mut p2 = p1.clone();
            p2.log_lengthscales[0] += shift;
            let v1 = rbf_eval(&p1, x.view(), y.view()).unwrap();
            let v2 = rbf_eval(&p2, x.view(), y.view()).unwrap();
            prop_assert!(v2 >= v1);
        }
    }
}
