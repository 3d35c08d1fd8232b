//! Sparse variational GP heads over a shared feature extractor.
//!
//! Each output task owns one latent function: an RBF kernel in feature space,
//! a set of inducing inputs living in that same feature space, and a whitened
//! variational posterior `q(v) = N(mean, C C^T)` with `u = L_Z v`, where
//! `L_Z` is the Cholesky factor of the inducing Gram matrix. Whitening makes
//! the prior map to `N(0, I)`, so a freshly initialized head has zero KL and
//! exactly the prior predictive.
//!
//! The multi-output construction is deliberately degenerate: tasks are
//! independent, one latent per task with unit mixing weight, sharing only the
//! extractor.

mod elbo;
mod pack;

pub use elbo::{elbo_and_grads, elbo_value, kl_divergence, ElboGrads, HeadGrads};
pub use pack::{pack_grads, pack_params, param_count, unpack_params, ModelGrads};

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::dataset::column_mean_std;
use crate::error::{Error, Result};
use crate::kernel::{kernel_matrix, RbfParams};
use crate::mlp::{mlp_init, Activation, MlpParams};
use crate::numeric::{
    cholesky_psd, solve_lower, tri_solve_vec, CholFactor, SymMatrix, TriSide,
    DEFAULT_JITTER_LADDER,
};

/// Container format version for serialized models.
pub const MODEL_CONTAINER_VERSION: u32 = 1;

/// Whitened variational posterior plus the inducing inputs it refers to.
/// The covariance factor diagonal is stored in the log domain so it stays
/// strictly positive under unconstrained optimization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VariationalState {
    /// Inducing inputs in feature space, one per row.
    pub inducing: Array2<f64>,
    /// Whitened posterior mean.
    pub mean: Array1<f64>,
    /// Strictly lower triangular part of the whitened covariance factor.
    pub chol_strict: Array2<f64>,
    /// Log of the covariance factor diagonal.
    pub chol_log_diag: Array1<f64>,
}

impl VariationalState {
    /// Posterior equal to the whitened prior: zero mean, identity factor.
    pub fn identity(inducing: Array2<f64>) -> Self {
        let m = inducing.nrows();
        VariationalState {
            inducing,
            mean: Array1::zeros(m),
            chol_strict: Array2::zeros((m, m)),
            chol_log_diag: Array1::zeros(m),
        }
    }

    pub fn num_inducing(&self) -> usize {
        self.inducing.nrows()
    }

    /// Materialize the lower-triangular covariance factor `C`.
    pub fn chol_matrix(&self) -> Array2<f64> {
        let m = self.num_inducing();
        let mut c = Array2::<f64>::zeros((m, m));
        for i in 0..m {
            for j in 0..i {
                c[[i, j]] = self.chol_strict[[i, j]];
            }
            c[[i, i]] = self.chol_log_diag[i].exp();
        }
        c
    }

    /// Overwrite from a dense lower-triangular factor (diagonal must be
    /// strictly positive).
    pub fn set_chol_matrix(&mut self, c: ArrayView2<'_, f64>) -> Result<()> {
        let m = self.num_inducing();
        if c.nrows() != m || c.ncols() != m {
            return Err(Error::DimensionMismatch("variational factor shape".into()));
        }
        for i in 0..m {
            if !(c[[i, i]] > 0.0) {
                return Err(Error::OutOfRange(
                    "variational factor diagonal must be positive".into(),
                ));
            }
            self.chol_log_diag[i] = c[[i, i]].ln();
            for j in 0..i {
                self.chol_strict[[i, j]] = c[[i, j]];
            }
        }
        Ok(())
    }
}

/// One output task: kernel hyperparameters, variational state and the
/// normalization of its target column.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskHead {
    pub kernel: RbfParams,
    pub variational: VariationalState,
    pub target_mean: f64,
    pub target_std: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// RBF kernel directly on the normalized inputs.
    Svgp,
    /// RBF kernel on learned MLP features.
    Svdkl,
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ModelKind::Svgp => write!(f, "svgp"),
            ModelKind::Svdkl => write!(f, "svdkl"),
        }
    }
}

impl std::str::FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "svgp" => Ok(ModelKind::Svgp),
            "svdkl" => Ok(ModelKind::Svdkl),
            other => Err(Error::InvalidConfig(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Model construction choices, echoed into reports and the serialized
/// container.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub hidden_widths: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
    pub inducing_count: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn svdkl(inducing_count: usize, seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::Svdkl,
            hidden_widths: vec![64, 64],
            feature_dim: 8,
            activation: Activation::Relu,
            inducing_count,
            seed,
        }
    }

    pub fn svgp(inducing_count: usize, seed: u64) -> Self {
        ModelConfig {
            kind: ModelKind::Svgp,
            hidden_widths: Vec::new(),
            feature_dim: 0,
            activation: Activation::Relu,
            inducing_count,
            seed,
        }
    }
}

/// Shared extractor plus independent per-task GP heads, together with the
/// frozen input/target normalization.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SvdklModel {
    pub config: ModelConfig,
    pub extractor: Option<MlpParams>,
    pub heads: Vec<TaskHead>,
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
    /// Snapshot counter, bumped by every published training update.
    pub version: u64,
    pub warm_started: bool,
    /// Running observation count used for minibatch scaling of online
    /// updates.
    pub seen_count: usize,
}

/// Predictive distribution of one task at one input, in unnormalized torque
/// units. The variance includes observation noise, so `std` never falls below
/// the unnormalized noise floor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct PredictiveDist {
    pub mean: f64,
    pub std: f64,
}

impl SvdklModel {
    /// Initialize a model against training data: normalization statistics are
    /// computed from the data and frozen, the extractor (if any) is randomly
    /// initialized, and each head's inducing inputs are the featurized
    /// coordinates of a seeded random subset of the data.
    pub fn init(
        config: ModelConfig,
        inputs: ArrayView2<'_, f64>,
        targets: ArrayView2<'_, f64>,
    ) -> Result<SvdklModel> {
        let n = inputs.nrows();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        if targets.nrows() != n {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows vs {} target rows",
                n,
                targets.nrows()
            )));
        }
        if config.inducing_count == 0 {
            return Err(Error::InvalidConfig("need at least one inducing point".into()));
        }
        let input_dim = inputs.ncols();
        let (input_mean, input_std) = column_mean_std(inputs);
        let (target_mean, target_std) = column_mean_std(targets);

        let extractor = match config.kind {
            ModelKind::Svgp => None,
            ModelKind::Svdkl => {
                let mut widths = Vec::with_capacity(config.hidden_widths.len() + 2);
                widths.push(input_dim);
                widths.extend_from_slice(&config.hidden_widths);
                widths.push(config.feature_dim);
                Some(mlp_init(&widths, config.activation, config.seed)?)
            }
        };
        let feature_dim = match &extractor {
            Some(net) => net.output_dim(),
            None => input_dim,
        };

        // Featurized coordinates of a seeded random subset as inducing inits.
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
        let m = config.inducing_count;
        let indices: Vec<usize> = if n >= m {
            rand::seq::index::sample(&mut rng, n, m).into_vec()
        } else {
            (0..m).map(|i| i % n).collect()
        };
        let mut picked = Array2::<f64>::zeros((m, input_dim));
        for (r, &i) in indices.iter().enumerate() {
            for c in 0..input_dim {
                picked[[r, c]] = (inputs[[i, c]] - input_mean[c]) / input_std[c];
            }
        }
        let inducing = match &extractor {
            Some(net) => net.forward_batch(picked.view())?.0,
            None => picked,
        };

        let heads = (0..targets.ncols())
            .map(|t| TaskHead {
                kernel: RbfParams::standard_init(feature_dim),
                variational: VariationalState::identity(inducing.clone()),
                target_mean: target_mean[t],
                target_std: target_std[t],
            })
            .collect();

        Ok(SvdklModel {
            config,
            extractor,
            heads,
            input_mean,
            input_std,
            version: 0,
            warm_started: false,
            seen_count: 0,
        })
    }

    pub fn n_tasks(&self) -> usize {
        self.heads.len()
    }

    pub fn input_dim(&self) -> usize {
        self.input_mean.len()
    }

    pub fn feature_dim(&self) -> usize {
        match &self.extractor {
            Some(net) => net.output_dim(),
            None => self.input_dim(),
        }
    }

    /// Standardize raw input rows with the frozen statistics.
    pub fn normalize_inputs(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if xs.ncols() != self.input_dim() {
            return Err(Error::DimensionMismatch(format!(
                "expected {} input columns, got {}",
                self.input_dim(),
                xs.ncols()
            )));
        }
        let mut out = xs.to_owned();
        for mut row in out.rows_mut() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = (*v - self.input_mean[c]) / self.input_std[c];
            }
        }
        Ok(out)
    }

    /// Normalized target column for one task.
    pub fn normalize_targets(&self, task: usize, ys: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let head = self
            .heads
            .get(task)
            .ok_or_else(|| Error::DimensionMismatch(format!("task {task} out of range")))?;
        Ok(ys.mapv(|y| (y - head.target_mean) / head.target_std))
    }

    /// Map raw input rows into feature space (identity for plain SVGP).
    pub fn featurize(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let xn = self.normalize_inputs(xs)?;
        match &self.extractor {
            Some(net) => Ok(net.forward_batch(xn.view())?.0),
            None => Ok(xn),
        }
    }

    /// Predictive mean and std for every task at a batch of raw inputs; the
    /// extractor runs once for the whole call.
    pub fn predict_batch(&self, xs: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let feats = self.featurize(xs)?;
        let n = feats.nrows();
        let mut means = Array2::<f64>::zeros((n, self.n_tasks()));
        let mut stds = Array2::<f64>::zeros((n, self.n_tasks()));
        for (t, head) in self.heads.iter().enumerate() {
            let (m_col, s_col) = head_predict(head, feats.view())?;
            means.column_mut(t).assign(&m_col);
            stds.column_mut(t).assign(&s_col);
        }
        Ok((means, stds))
    }

    /// Predictive distribution of one task at a single raw input.
    pub fn predict(&self, task: usize, x: ArrayView1<'_, f64>) -> Result<PredictiveDist> {
        let head = self
            .heads
            .get(task)
            .ok_or_else(|| Error::DimensionMismatch(format!("task {task} out of range")))?;
        let row = x
            .to_owned()
            .into_shape_with_order((1, x.len()))
            .expect("row reshape");
        let feats = self.featurize(row.view())?;
        let (m, s) = head_predict(head, feats.view())?;
        Ok(PredictiveDist {
            mean: m[0],
            std: s[0],
        })
    }

    /// Per-task predictive distributions at one raw input, sharing a single
    /// extractor forward pass.
    pub fn predict_all(&self, x: ArrayView1<'_, f64>) -> Result<Vec<PredictiveDist>> {
        let row = x
            .to_owned()
            .into_shape_with_order((1, x.len()))
            .expect("row reshape");
        let (means, stds) = self.predict_batch(row.view())?;
        Ok((0..self.n_tasks())
            .map(|t| PredictiveDist {
                mean: means[[0, t]],
                std: stds[[0, t]],
            })
            .collect())
    }

    /// Unnormalized per-joint signal and noise stds, the variance bounds used
    /// by the gain schedule.
    pub fn sigma_bounds(&self) -> (Array1<f64>, Array1<f64>) {
        let sigma_f = Array1::from_iter(
            self.heads
                .iter()
                .map(|h| h.kernel.signal_std() * h.target_std),
        );
        let sigma_n = Array1::from_iter(
            self.heads
                .iter()
                .map(|h| h.kernel.noise_std() * h.target_std),
        );
        (sigma_f, sigma_n)
    }

    /// Serialize into the versioned container format.
    pub fn to_json(&self) -> Result<String> {
        let container = ModelContainer {
            format: FORMAT_TAG.to_string(),
            container_version: MODEL_CONTAINER_VERSION,
            model: self.clone(),
        };
        Ok(serde_json::to_string(&container)?)
    }

    pub fn from_json(text: &str) -> Result<SvdklModel> {
        let header: ContainerHeader = serde_json::from_str(text)?;
        if header.format != FORMAT_TAG {
            return Err(Error::HeaderMismatch(format!(
                "not a model container: format tag `{}`",
                header.format
            )));
        }
        if header.container_version != MODEL_CONTAINER_VERSION {
            return Err(Error::VersionMismatch {
                expected: MODEL_CONTAINER_VERSION,
                found: header.container_version,
            });
        }
        let container: ModelContainer = serde_json::from_str(text)?;
        Ok(container.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<SvdklModel> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }
}

const FORMAT_TAG: &str = "svdkl-model";

#[derive(Serialize, Deserialize)]
struct ModelContainer {
    format: String,
    container_version: u32,
    model: SvdklModel,
}

#[derive(Deserialize)]
struct ContainerHeader {
    format: String,
    container_version: u32,
}

/// Factor a head's inducing Gram matrix with the default jitter ladder.
pub(crate) fn inducing_factor(head: &TaskHead) -> Result<(Array2<f64>, CholFactor)> {
    let z = head.variational.inducing.view();
    let kzz = kernel_matrix(&head.kernel, z, z)?;
    let factor = cholesky_psd(&SymMatrix::new(kzz.clone())?, &DEFAULT_JITTER_LADDER)?;
    Ok((kzz, factor))
}

/// Whitened predictive for one head at featurized inputs: mean and std per
/// row, unnormalized, noise included.
fn head_predict(head: &TaskHead, feats: ArrayView2<'_, f64>) -> Result<(Array1<f64>, Array1<f64>)> {
    if feats.ncols() != head.kernel.dim() {
        return Err(Error::DimensionMismatch(format!(
            "feature dim {} vs kernel dim {}",
            feats.ncols(),
            head.kernel.dim()
        )));
    }
    let (_, l) = inducing_factor(head)?;
    let kzf = kernel_matrix(&head.kernel, head.variational.inducing.view(), feats)?;
    let a = solve_lower(l.lower.view(), kzf.view())?;
    let c = head.variational.chol_matrix();
    let cta = c.t().dot(&a);
    let sf2 = head.kernel.signal_var();
    let sn2 = head.kernel.noise_var();
    let n = feats.nrows();
    let mut means = Array1::<f64>::zeros(n);
    let mut stds = Array1::<f64>::zeros(n);
    for b in 0..n {
        let a_b = a.column(b);
        let mean_n = a_b.dot(&head.variational.mean);
        let nystrom = a_b.dot(&a_b);
        let extra = cta.column(b).dot(&cta.column(b));
        let latent_var = (sf2 - nystrom + extra).max(0.0);
        means[b] = mean_n * head.target_std + head.target_mean;
        stds[b] = (latent_var + sn2).sqrt() * head.target_std;
    }
    Ok((means, stds))
}

/// Closed-form GP regression posterior at a single test point, used as the
/// small-n oracle in tests: `mean = k*^T (K + sn^2 I)^-1 y`,
/// `var = k** - k*^T (K + sn^2 I)^-1 k* + sn^2`.
pub fn exact_gp_oracle(
    kernel: &RbfParams,
    xs: ArrayView2<'_, f64>,
    ys: ArrayView1<'_, f64>,
    xstar: ArrayView1<'_, f64>,
) -> Result<PredictiveDist> {
    let n = xs.nrows();
    if n > 512 {
        return Err(Error::OutOfRange(
            "exact GP oracle is capped at 512 points".into(),
        ));
    }
    if ys.len() != n {
        return Err(Error::DimensionMismatch("targets vs inputs".into()));
    }
    let sn2 = kernel.noise_var();
    let sf2 = kernel.signal_var();
    if n == 0 {
        return Ok(PredictiveDist {
            mean: 0.0,
            std: (sf2 + sn2).sqrt(),
        });
    }
    let l = noisy_factor(kernel, xs)?;
    let kstar_mat = kernel_matrix(
        kernel,
        xs,
        xstar
            .to_owned()
            .into_shape_with_order((1, xstar.len()))
            .expect("row reshape")
            .view(),
    )?;
    let kstar = kstar_mat.column(0).to_owned();
    let alpha = {
        let y = ys.to_owned();
        let v = tri_solve_vec(&l, y.view(), TriSide::Lower)?;
        tri_solve_vec(&l, v.view(), TriSide::LowerTranspose)?
    };
    let mean = kstar.dot(&alpha);
    let v = tri_solve_vec(&l, kstar.view(), TriSide::Lower)?;
    let var = (sf2 - v.dot(&v)).max(0.0) + sn2;
    Ok(PredictiveDist {
        mean,
        std: var.sqrt(),
    })
}

/// Exact GP log marginal likelihood with noise `sn^2`, the reference value
/// the ELBO lower-bounds.
pub fn exact_gp_log_marginal(
    kernel: &RbfParams,
    xs: ArrayView2<'_, f64>,
    ys: ArrayView1<'_, f64>,
) -> Result<f64> {
    let n = xs.nrows();
    if n == 0 || n > 512 {
        return Err(Error::OutOfRange("need 1..=512 points".into()));
    }
    let l = noisy_factor(kernel, xs)?;
    let v = tri_solve_vec(&l, ys, TriSide::Lower)?;
    let quad = v.dot(&v);
    let logdet = crate::numeric::log_det(&l);
    Ok(-0.5 * (quad + logdet + n as f64 * (2.0 * std::f64::consts::PI).ln()))
}

fn noisy_factor(kernel: &RbfParams, xs: ArrayView2<'_, f64>) -> Result<CholFactor> {
    let mut k = kernel_matrix(kernel, xs, xs)?;
    let sn2 = kernel.noise_var();
    for i in 0..k.nrows() {
        k[[i, i]] += sn2;
    }
    cholesky_psd(&SymMatrix::new(k)?, &DEFAULT_JITTER_LADDER)
}
