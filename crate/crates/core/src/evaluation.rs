//! Ridge regression from discriminator features to the continuous AWI
//! target, with doubly nested cross-validation.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::config::RunConfig;
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::models::extract_features;
use crate::seed;
use crate::tasks::{AWI, NIGHTLIGHTS};
use crate::training::load_discriminator;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RidgeOptions {
    pub intercept: bool,
    /// Centre and scale each feature using the fitting rows only.
    pub standardize: bool,
}

impl Default for RidgeOptions {
    fn default() -> Self {
        RidgeOptions {
            intercept: true,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeModel {
    /// Coefficients on the original feature scale.
    pub coef: Vec<f64>,
    pub intercept: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> f64 {
        self.intercept + x.iter().zip(&self.coef).map(|(a, b)| a * b).sum::<f64>()
    }
}

/// Row-major `N x d` design matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::ShapeMismatch {
                expected: format!("{rows}x{cols}"),
                found: format!("{} values", data.len()),
            });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        Matrix::new(rows.len(), cols, rows.concat())
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }
}

/// Minimises `||y - X b - c||^2 + k ||b||^2` over the rows in `use_rows`
/// (all rows when `None`); the intercept `c` is not penalised.
pub fn ridge_fit_rows(x: &Matrix, y: &[f64], k: f64, opts: RidgeOptions, use_rows: Option<&[usize]>) -> Result<RidgeModel> {
    if !(k >= 0.0) {
        return Err(Error::InvalidArgument(format!("ridge penalty {k} < 0")));
    }
    if y.len() != x.rows {
        return Err(Error::ShapeMismatch {
            expected: format!("{} targets", x.rows),
            found: format!("{}", y.len()),
        });
    }
    let all: Vec<usize>;
    let rows = match use_rows {
        Some(r) => r,
        None => {
            all = (0..x.rows).collect();
            &all
        }
    };
    if rows.len() < 2 {
        return Err(Error::FoldTooSmall(format!("{} fitting rows", rows.len())));
    }
    let d = x.cols;
    let n = rows.len() as f64;

    let mut mu = vec![0.0; d];
    let mut sd = vec![1.0; d];
    if opts.standardize || opts.intercept {
        for &r in rows {
            for (m, v) in mu.iter_mut().zip(x.row(r)) {
                *m += v / n;
            }
        }
    }
    if opts.standardize {
        for (j, s) in sd.iter_mut().enumerate() {
            let var = rows.iter().map(|&r| (x.row(r)[j] - mu[j]).powi(2)).sum::<f64>() / n;
            *s = if var > 0.0 { var.sqrt() } else { 1.0 };
        }
    }
    let centre = opts.standardize || opts.intercept;
    let y_mean = if opts.intercept { rows.iter().map(|&r| y[r]).sum::<f64>() / n } else { 0.0 };
    let z = |r: usize, j: usize| {
        let v = x.row(r)[j];
        if centre {
            (v - mu[j]) / sd[j]
        } else {
            v / sd[j]
        }
    };

    let mut gram = vec![0.0; d * d];
    let mut rhs = vec![0.0; d];
    let mut zr = vec![0.0; d];
    for &r in rows {
        for (j, slot) in zr.iter_mut().enumerate() {
            *slot = z(r, j);
        }
        let t = y[r] - y_mean;
        for i in 0..d {
            rhs[i] += zr[i] * t;
            for j in 0..=i {
                gram[i * d + j] += zr[i] * zr[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[j * d + i] = gram[i * d + j];
        }
        gram[i * d + i] += k;
    }
    let beta_z = cholesky_solve(&mut gram, &rhs, d)?;

    let coef: Vec<f64> = beta_z.iter().zip(&sd).map(|(b, s)| b / s).collect();
    let offset = if centre { coef.iter().zip(&mu).map(|(b, m)| b * m).sum::<f64>() } else { 0.0 };
    Ok(RidgeModel {
        coef,
        intercept: y_mean - offset,
    })
}

pub fn ridge_fit(x: &Matrix, y: &[f64], k: f64, opts: RidgeOptions) -> Result<RidgeModel> {
    ridge_fit_rows(x, y, k, opts, None)
}

/// Solves `A b = rhs` for symmetric positive (semi)definite `A`, overwriting
/// `A` with its Cholesky factor.
fn cholesky_solve(a: &mut [f64], rhs: &[f64], d: usize) -> Result<Vec<f64>> {
    let scale = (0..d).map(|i| a[i * d + i].abs()).fold(0.0, f64::max).max(1e-300);
    for j in 0..d {
        let mut diag = a[j * d + j];
        for p in 0..j {
            diag -= a[j * d + p] * a[j * d + p];
        }
        if diag <= 1e-12 * scale {
            return Err(Error::SingularSystem);
        }
        let l = diag.sqrt();
        a[j * d + j] = l;
        for i in j + 1..d {
            let mut v = a[i * d + j];
            for p in 0..j {
                v -= a[i * d + p] * a[j * d + p];
            }
            a[i * d + j] = v / l;
        }
    }
    let mut w = rhs.to_vec();
    for i in 0..d {
        for p in 0..i {
            w[i] -= a[i * d + p] * w[p];
        }
        w[i] /= a[i * d + i];
    }
    for i in (0..d).rev() {
        for p in i + 1..d {
            w[i] -= a[p * d + i] * w[p];
        }
        w[i] /= a[i * d + i];
    }
    Ok(w)
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::InvalidArgument(format!("pearson needs two equal-length inputs of >= 2 values ({}, {})", a.len(), b.len())));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::ZeroVariance);
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

fn r_squared(y: &[f64], pred: &[f64]) -> f64 {
    let n = y.len() as f64;
    let m = y.iter().sum::<f64>() / n;
    let sst: f64 = y.iter().map(|v| (v - m).powi(2)).sum();
    let sse: f64 = y.iter().zip(pred).map(|(a, b)| (a - b).powi(2)).sum();
    if sst > 0.0 {
        1.0 - sse / sst
    } else {
        -sse
    }
}

/// What a set of rows was used for while producing one outer fold's predictions.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RowUse {
    /// Feature mean/scale estimation and coefficient fitting.
    Fit,
    /// Held-out scoring during penalty selection.
    Select,
}

/// Instrumentation: every row set touched while producing each outer fold.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowLedger {
    pub events: Vec<(usize, RowUse, Vec<usize>)>,
    pub test_rows: Vec<Vec<usize>>,
}

impl RowLedger {
    /// Number of (event, row) pairs where an outer fold's own test rows were
    /// used to build its predictor.
    pub fn leaks(&self) -> usize {
        self.events
            .iter()
            .map(|(fold, _, rows)| rows.iter().filter(|r| self.test_rows[*fold].contains(r)).count())
            .sum()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RegressionReport {
    pub outer_folds: usize,
    /// Penalty chosen in each outer fold.
    pub penalties: Vec<f64>,
    /// Mean inner-CV r^2 of the chosen penalty in each outer fold.
    pub inner_r2: Vec<f64>,
    /// Outer fold of each row.
    pub fold_of: Vec<usize>,
    /// Out-of-fold prediction for each row.
    pub predictions: Vec<f64>,
    pub y_true: Vec<f64>,
    pub pearson_r: f64,
    pub baseline_r: Option<f64>,
}

fn folds(rows: &[usize], k: usize, rng: &mut seed::Rng) -> Vec<Vec<usize>> {
    let mut order = rows.to_vec();
    order.shuffle(rng);
    let mut out = vec![Vec::new(); k];
    for (i, r) in order.into_iter().enumerate() {
        out[i % k].push(r);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    out
}

/// Outer folds give out-of-fold predictions; inside each, an inner CV over
/// the remaining rows picks the penalty with the best mean held-out r^2.
pub fn nested_cv(
    x: &Matrix,
    y: &[f64],
    grid: &[f64],
    outer_folds: usize,
    inner_folds: usize,
    seed_value: u64,
    mut ledger: Option<&mut RowLedger>,
) -> Result<RegressionReport> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty penalty grid".into()));
    }
    if outer_folds < 2 || inner_folds < 2 {
        return Err(Error::FoldTooSmall("need at least two folds".into()));
    }
    let n = x.rows;
    if n < outer_folds {
        return Err(Error::FoldTooSmall(format!("{n} rows for {outer_folds} outer folds")));
    }
    let opts = RidgeOptions::default();
    let mut rng = seed::stream(seed_value, "outer-folds", &[]);
    let all: Vec<usize> = (0..n).collect();
    let outer = folds(&all, outer_folds, &mut rng);
    if let Some(l) = ledger.as_deref_mut() {
        l.test_rows = outer.clone();
    }

    let mut predictions = vec![f64::NAN; n];
    let mut fold_of = vec![0; n];
    let mut penalties = Vec::with_capacity(outer_folds);
    let mut inner_r2 = Vec::with_capacity(outer_folds);
    for (f, test) in outer.iter().enumerate() {
        let train: Vec<usize> = all.iter().copied().filter(|r| !test.contains(r)).collect();
        if train.len() < 2 * inner_folds {
            return Err(Error::FoldTooSmall(format!("outer fold {f}: {} training rows for {inner_folds} inner folds", train.len())));
        }
        let mut inner_rng = seed::stream(seed_value, "inner-folds", &[f as u64]);
        let inner = folds(&train, inner_folds, &mut inner_rng);
        let mut best: Option<(f64, f64)> = None;
        for &k in grid {
            let mut score = 0.0;
            for held in &inner {
                let fit_rows: Vec<usize> = train.iter().copied().filter(|r| !held.contains(r)).collect();
                if let Some(l) = ledger.as_deref_mut() {
                    l.events.push((f, RowUse::Fit, fit_rows.clone()));
                    l.events.push((f, RowUse::Select, held.clone()));
                }
                let model = ridge_fit_rows(x, y, k, opts, Some(&fit_rows))?;
                let pred: Vec<f64> = held.iter().map(|&r| model.predict(x.row(r))).collect();
                let truth: Vec<f64> = held.iter().map(|&r| y[r]).collect();
                score += r_squared(&truth, &pred) / inner.len() as f64;
            }
            if best.is_none_or(|(_, s)| score > s) {
                best = Some((k, score));
            }
        }
        let (k, score) = best.expect("non-empty grid");
        if let Some(l) = ledger.as_deref_mut() {
            l.events.push((f, RowUse::Fit, train.clone()));
        }
        let model = ridge_fit_rows(x, y, k, opts, Some(&train))?;
        for &r in test {
            predictions[r] = model.predict(x.row(r));
            fold_of[r] = f;
        }
        penalties.push(k);
        inner_r2.push(score);
    }
    let pearson_r = pearson(y, &predictions)?;
    Ok(RegressionReport {
        outer_folds,
        penalties,
        inner_r2,
        fold_of,
        predictions,
        y_true: y.to_vec(),
        pearson_r,
        baseline_r: None,
    })
}

/// Examples used for evaluation: every one with a continuous AWI value.
pub fn awi_examples(data: &Dataset) -> Result<Vec<usize>> {
    let t = data
        .task_index(AWI)
        .ok_or_else(|| Error::MissingLabels("dataset has no AWI task".into()))?;
    let ids: Vec<usize> = data
        .examples
        .iter()
        .filter(|e| e.continuous[t].is_some())
        .map(|e| e.id)
        .collect();
    if ids.is_empty() {
        return Err(Error::MissingLabels("no AWI-labelled examples".into()));
    }
    Ok(ids)
}

/// Pearson correlation between the nightlight target and AWI over `ids`.
pub fn nightlight_baseline(data: &Dataset, ids: &[usize]) -> Option<f64> {
    let (a, n) = (data.task_index(AWI)?, data.task_index(NIGHTLIGHTS)?);
    let (lights, awi): (Vec<f64>, Vec<f64>) = ids
        .iter()
        .filter_map(|&i| {
            let e = &data.examples[i];
            Some((e.continuous[n]?, e.continuous[a]?))
        })
        .unzip();
    pearson(&lights, &awi).ok()
}

/// Nested CV of AWI on arbitrary per-example features (rows aligned with `ids`).
pub fn evaluate_features(data: &Dataset, ids: &[usize], features: Matrix, cfg: &RunConfig) -> Result<RegressionReport> {
    let t = data.task_index(AWI).ok_or_else(|| Error::MissingLabels("no AWI task".into()))?;
    let y: Vec<f64> = ids
        .iter()
        .map(|&i| data.examples[i].continuous[t].ok_or_else(|| Error::MissingLabels(format!("example {i} has no AWI value"))))
        .collect::<Result<_>>()?;
    let mut report = nested_cv(&features, &y, &cfg.penalty_grid(), cfg.outer_folds, cfg.inner_folds, cfg.seed, None)?;
    report.baseline_r = nightlight_baseline(data, ids);
    Ok(report)
}

/// Pooled discriminator features of the selected examples as an `f64` matrix.
pub fn feature_matrix(d: &crate::models::Discriminator<f32>, data: &Dataset, ids: &[usize]) -> Result<Matrix> {
    let dim = d.spec.feature_dim();
    let mut rows = Vec::with_capacity(ids.len() * dim);
    for chunk in ids.chunks(256) {
        let f = extract_features(d, &data.batch(chunk))?;
        rows.extend(f.data().iter().map(|&v| v as f64));
    }
    Matrix::new(ids.len(), dim, rows)
}

/// The latent development value at each example's location, regenerated from
/// the dataset's own config snapshot. Serves as an upper reference.
pub fn oracle_features(data: &Dataset, ids: &[usize]) -> Result<Matrix> {
    let cfg = RunConfig::from_toml(&data.config_snapshot)?;
    let world = crate::synthdata::generate_world(cfg.grid_size, cfg.seed)?;
    let mut d = Vec::with_capacity(ids.len());
    for &i in ids {
        let loc = data.examples[i].location;
        world.check(loc)?;
        d.push(world.development_at(loc));
    }
    Matrix::new(ids.len(), 1, d)
}

pub fn evaluate_checkpoint(checkpoint: &Path, data: &Dataset, cfg: &RunConfig) -> Result<(Vec<usize>, RegressionReport)> {
    let d = load_discriminator::<f32>(checkpoint)?;
    if d.spec.in_channels != data.bands {
        return Err(Error::ShapeMismatch {
            expected: format!("{} bands (checkpoint)", d.spec.in_channels),
            found: format!("{} bands (dataset)", data.bands),
        });
    }
    let ids = awi_examples(data)?;
    let x = feature_matrix(&d, data, &ids)?;
    let report = evaluate_features(data, &ids, x, cfg)?;
    Ok((ids, report))
}

pub const REPORT_FILE: &str = "report.csv";
pub const PREDICTIONS_FILE: &str = "predictions.csv";
pub const SUMMARY_FILE: &str = "summary.csv";

pub fn write_report(report: &RegressionReport, ids: &[usize], out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let mut w = csv::Writer::from_path(out_dir.join(REPORT_FILE))?;
    w.write_record(["fold", "penalty", "r2_inner"])?;
    for (f, (k, r2)) in report.penalties.iter().zip(&report.inner_r2).enumerate() {
        w.write_record([f.to_string(), k.to_string(), r2.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_dir.join(PREDICTIONS_FILE))?;
    w.write_record(["id", "y_true", "y_pred"])?;
    for ((id, y), p) in ids.iter().zip(&report.y_true).zip(&report.predictions) {
        w.write_record([id.to_string(), y.to_string(), p.to_string()])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_dir.join(SUMMARY_FILE))?;
    w.write_record(["pearson_r", "baseline_r"])?;
    w.write_record([
        report.pearson_r.to_string(),
        report.baseline_r.map(|b| b.to_string()).unwrap_or_default(),
    ])?;
    w.flush()?;
    Ok(())
}
