//! Dataset container and CSV interchange. Rows are observations: the input
//! columns are joint positions, velocities and accelerations concatenated
//! (`3 * dof` wide for the CSV contract), the target columns are per-joint
//! torques. Data is stored raw; normalization statistics ride along and are
//! applied by the model, never baked into the stored values.

use ndarray::{Array1, Array2, ArrayView2, Axis, s};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};

/// Per-column mean and standard deviation; columns with (near-)zero spread
/// get a unit std so normalization stays well defined.
pub fn column_mean_std(data: ArrayView2<'_, f64>) -> (Array1<f64>, Array1<f64>) {
    let n = data.nrows() as f64;
    let mean = data.mean_axis(Axis(0)).expect("nonempty");
    let mut std = Array1::<f64>::zeros(data.ncols());
    for (j, col) in std.iter_mut().enumerate() {
        let m = mean[j];
        let var = data.column(j).iter().map(|v| (v - m) * (v - m)).sum::<f64>() / n;
        let s = var.sqrt();
        *col = if s > 1e-12 { s } else { 1.0 };
    }
    (mean, std)
}

/// Normalization statistics: per-input-dimension and per-task.
#[derive(Debug, Clone)]
pub struct NormStats {
    pub input_mean: Array1<f64>,
    pub input_std: Array1<f64>,
    pub target_mean: Array1<f64>,
    pub target_std: Array1<f64>,
}

impl NormStats {
    pub fn from_data(inputs: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Self {
        let (input_mean, input_std) = column_mean_std(inputs);
        let (target_mean, target_std) = column_mean_std(targets);
        NormStats {
            input_mean,
            input_std,
            target_mean,
            target_std,
        }
    }
}

/// N observations of an inverse-dynamics style regression problem.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub inputs: Array2<f64>,
    pub targets: Array2<f64>,
    pub dof: usize,
    pub stats: NormStats,
}

impl Dataset {
    /// Build a dataset from raw matrices; statistics are computed from the
    /// given data. The input width is free here — the `3 * dof` column
    /// contract is enforced by the CSV loader.
    pub fn from_parts(inputs: Array2<f64>, targets: Array2<f64>) -> Result<Self> {
        if inputs.nrows() == 0 || targets.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if inputs.nrows() != targets.nrows() {
            return Err(Error::DimensionMismatch(format!(
                "{} input rows vs {} target rows",
                inputs.nrows(),
                targets.nrows()
            )));
        }
        if let Some((r, c)) = first_nonfinite(inputs.view()) {
            return Err(Error::NonFiniteValue { row: r, col: c });
        }
        if let Some((r, c)) = first_nonfinite(targets.view()) {
            return Err(Error::NonFiniteValue {
                row: r,
                col: c + inputs.ncols(),
            });
        }
        let stats = NormStats::from_data(inputs.view(), targets.view());
        let dof = targets.ncols();
        Ok(Dataset {
            inputs,
            targets,
            dof,
            stats,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }

    /// Row subset in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        let inputs = self.inputs.select(Axis(0), indices);
        let targets = self.targets.select(Axis(0), indices);
        Dataset {
            inputs,
            targets,
            dof: self.dof,
            stats: self.stats.clone(),
        }
    }

    /// Seeded shuffle followed by a contiguous split. Normalization
    /// statistics are recomputed on the train portion and copied onto all
    /// three returned datasets.
    pub fn split(&self, fractions: (f64, f64, f64), seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
        let (ft, fv, fs) = fractions;
        if ft <= 0.0 || fv < 0.0 || fs < 0.0 || ft + fv + fs > 1.0 + 1e-12 {
            return Err(Error::OutOfRange(format!(
                "split fractions ({ft}, {fv}, {fs}) must be positive and sum to at most 1"
            )));
        }
        let n = self.len();
        if n == 0 {
            return Err(Error::EmptyDataset);
        }
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        order.shuffle(&mut rng);
        let n_train = ((n as f64) * ft).round().max(1.0) as usize;
        let n_valid = ((n as f64) * fv).round() as usize;
        let n_train = n_train.min(n);
        let n_valid = n_valid.min(n - n_train);
        let n_test = (((n as f64) * fs).round() as usize).min(n - n_train - n_valid);
        let mut train = self.select(&order[..n_train]);
        let mut valid = self.select(&order[n_train..n_train + n_valid]);
        let mut test = self.select(&order[n_train + n_valid..n_train + n_valid + n_test]);
        let stats = NormStats::from_data(train.inputs.view(), train.targets.view());
        train.stats = stats.clone();
        valid.stats = stats.clone();
        test.stats = stats;
        Ok((train, valid, test))
    }

    /// Expected CSV header for a given dof.
    pub fn csv_header(dof: usize) -> String {
        let mut h = String::new();
        for prefix in ["q", "dq", "ddq"] {
            for j in 1..=dof {
                let _ = write!(h, "{prefix}{j},");
            }
        }
        for j in 1..=dof {
            let _ = write!(h, "tau{j}");
            if j != dof {
                h.push(',');
            }
        }
        h
    }

    /// Parse a dataset from the CSV contract: header
    /// `q1..qn,dq1..dqn,ddq1..ddqn,tau1..taun`, one decimal-point real per
    /// field, LF or CRLF line endings.
    pub fn load_csv(path: impl AsRef<Path>, dof: usize) -> Result<Dataset> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_csv(&text, dof)
    }

    pub fn parse_csv(text: &str, dof: usize) -> Result<Dataset> {
        if dof == 0 {
            return Err(Error::OutOfRange("dof must be positive".into()));
        }
        let mut lines = text.lines();
        let header = lines.next().ok_or(Error::EmptyDataset)?;
        let expected = Self::csv_header(dof);
        if header.trim_end() != expected {
            return Err(Error::HeaderMismatch(format!(
                "expected `{expected}`, found `{}`",
                header.trim_end()
            )));
        }
        let width = 4 * dof;
        let mut values: Vec<f64> = Vec::new();
        let mut n_rows = 0usize;
        for (i, line) in lines.enumerate() {
            let row = i + 1; // header is row 0
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != width {
                return Err(Error::ParseError {
                    row,
                    col: fields.len(),
                    message: format!("expected {width} fields, found {}", fields.len()),
                });
            }
            for (col, field) in fields.iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|e| Error::ParseError {
                    row,
                    col,
                    message: format!("{e}: `{field}`"),
                })?;
                if !v.is_finite() {
                    return Err(Error::NonFiniteValue { row, col });
                }
                values.push(v);
            }
            n_rows += 1;
        }
        if n_rows == 0 {
            return Err(Error::EmptyDataset);
        }
        let all = Array2::from_shape_vec((n_rows, width), values).expect("counted shape");
        let inputs = all.slice(s![.., ..3 * dof]).to_owned();
        let targets = all.slice(s![.., 3 * dof..]).to_owned();
        Dataset::from_parts(inputs, targets)
    }

    /// Write the dataset in the CSV contract. Values are printed with 17
    /// significant digits so a read-back reproduces them bit-exactly.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str(&Self::csv_header(self.dof));
        out.push('\n');
        for i in 0..self.len() {
            let mut first = true;
            for v in self.inputs.row(i).iter().chain(self.targets.row(i).iter()) {
                if !first {
                    out.push(',');
                }
                let _ = write!(out, "{v:.16e}");
                first = false;
            }
            out.push('\n');
        }
        out
    }
}

fn first_nonfinite(a: ArrayView2<'_, f64>) -> Option<(usize, usize)> {
    for ((r, c), v) in a.indexed_iter() {
        if !v.is_finite() {
            return Some((r, c));
        }
    }
    None
}
