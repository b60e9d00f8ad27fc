//! Synthetic generators, CSV ingestion, preprocessing and splits.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::{seeded_rng, Rng};

/// Label used for normal rows by the benchmark generators.
pub const INLIER: i64 = 0;
/// Label used for anomalous rows by the benchmark generators.
pub const OUTLIER: i64 = 1;

/// An `N x D` table of samples with optional integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    rows: Tensor,
    labels: Option<Vec<i64>>,
    /// Where the rows came from and what was applied to them.
    pub meta: String,
}

impl Dataset {
    pub fn new(rows: Tensor, labels: Option<Vec<i64>>, meta: impl Into<String>) -> Result<Self> {
        if !rows.is_finite() {
            return Err(Error::config("dataset contains non-finite values"));
        }
        if let Some(l) = &labels {
            if l.len() != rows.rows() {
                return Err(Error::config(format!("{} labels for {} rows", l.len(), rows.rows())));
            }
        }
        Ok(Dataset {
            rows,
            labels,
            meta: meta.into(),
        })
    }

    pub fn rows(&self) -> &Tensor {
        &self.rows
    }

    pub fn into_rows(self) -> Tensor {
        self.rows
    }

    pub fn labels(&self) -> Option<&[i64]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.rows.cols()
    }

    /// Rows whose label equals `label`.
    pub fn rows_with_label(&self, label: i64) -> Option<Tensor> {
        let labels = self.labels.as_ref()?;
        let idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == label).collect();
        (!idx.is_empty()).then(|| self.rows.select_rows(&idx))
    }

    pub fn select(&self, indices: &[usize], meta: impl Into<String>) -> Result<Dataset> {
        if indices.is_empty() {
            return Err(Error::config("selection is empty"));
        }
        let labels = self.labels.as_ref().map(|l| indices.iter().map(|&i| l[i]).collect());
        Dataset::new(self.rows.select_rows(indices), labels, meta)
    }
}

pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
pub const EIGHT_GAUSSIANS_STD: f64 = 0.25;

fn eight_means(radius: f64) -> [(f64, f64); 8] {
    std::array::from_fn(|k| {
        let a = 2.0 * PI * k as f64 / 8.0;
        (radius * a.cos(), radius * a.sin())
    })
}

/// Equal-weight mixture of eight isotropic Gaussians centred on a circle.
pub fn make_eight_gaussians(n: usize, radius: f64, std: f64, seed: u64) -> Result<Dataset> {
    if n < 8 {
        return Err(Error::config(format!("eight gaussians needs n >= 8, got {n}")));
    }
    let means = eight_means(radius);
    let mut rng = seeded_rng(seed);
    let mut values = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let k = rng.random_range(0..8);
        let (mx, my) = means[k];
        let ex: f64 = rng.sample(StandardNormal);
        let ey: f64 = rng.sample(StandardNormal);
        values.push(mx + std * ex);
        values.push(my + std * ey);
        labels.push(k as i64);
    }
    Dataset::new(
        Tensor::new(n, 2, values)?,
        Some(labels),
        format!("eight-gaussians n={n} radius={radius} std={std} seed={seed}"),
    )
}

/// Exact mixture density at every row of `points` (`n x 2`).
pub fn true_density_eight_gaussians(points: &Tensor, radius: f64, std: f64) -> Result<Vec<f64>> {
    if !(std > 0.0) {
        return Err(Error::config(format!("std must be positive, got {std}")));
    }
    if points.cols() != 2 {
        return Err(Error::config("eight gaussians density is defined on 2-d points"));
    }
    let means = eight_means(radius);
    let var = std * std;
    let norm = 1.0 / (8.0 * 2.0 * PI * var);
    Ok((0..points.rows())
        .map(|i| {
            let (x, y) = (points.get(i, 0), points.get(i, 1));
            means
                .iter()
                .map(|(mx, my)| {
                    let d2 = (x - mx).powi(2) + (y - my).powi(2);
                    (-d2 / (2.0 * var)).exp()
                })
                .sum::<f64>()
                * norm
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ManifoldKind {
    /// Unit circle in a random 2-plane of the ambient space.
    Circle,
    /// Unit sphere of the ambient space.
    SphereShell,
}

/// Noise level of benchmark inliers around the manifold.
pub const BENCHMARK_NOISE: f64 = 0.01;
/// Radius band of outliers inside the unit manifold.
pub const BENCHMARK_INNER_BAND: (f64, f64) = (0.7, 0.9);
/// Radius band of outliers outside the unit manifold.
pub const BENCHMARK_OUTER_BAND: (f64, f64) = (1.1, 1.3);

/// Inliers near a unit circle or sphere plus labeled off-manifold outliers.
///
/// Half the outliers sit inside (radius in [`BENCHMARK_INNER_BAND`]), half
/// outside (radius in [`BENCHMARK_OUTER_BAND`]), close enough to the manifold
/// that an autoencoder tends to reconstruct them. They lie in the same plane
/// as the circle or in all directions for the sphere shell. Inliers come
/// first, outliers after.
pub fn make_manifold_benchmark(
    kind: ManifoldKind,
    dim: usize,
    n_in: usize,
    n_out: usize,
    seed: u64,
) -> Result<Dataset> {
    if dim < 2 {
        return Err(Error::config(format!("manifold benchmark needs dim >= 2, got {dim}")));
    }
    if n_in + n_out == 0 {
        return Err(Error::config("manifold benchmark needs at least one row"));
    }
    let mut rng = seeded_rng(seed);
    let frame = if dim == 2 {
        vec![vec![1.0, 0.0], vec![0.0, 1.0]]
    } else {
        random_orthonormal_pair(dim, &mut rng)
    };
    let direction = |rng: &mut Rng| -> Vec<f64> {
        match kind {
            ManifoldKind::Circle => {
                let a = rng.random_range(0.0..2.0 * PI);
                (0..dim)
                    .map(|j| a.cos() * frame[0][j] + a.sin() * frame[1][j])
                    .collect()
            }
            ManifoldKind::SphereShell => random_unit(dim, rng),
        }
    };
    let mut values = Vec::with_capacity((n_in + n_out) * dim);
    let mut labels = Vec::with_capacity(n_in + n_out);
    for i in 0..n_in + n_out {
        let radius = if i < n_in {
            1.0
        } else if (i - n_in).is_multiple_of(2) {
            rng.random_range(BENCHMARK_INNER_BAND.0..=BENCHMARK_INNER_BAND.1)
        } else {
            rng.random_range(BENCHMARK_OUTER_BAND.0..=BENCHMARK_OUTER_BAND.1)
        };
        let u = direction(&mut rng);
        for uj in u {
            let e: f64 = rng.sample(StandardNormal);
            values.push(radius * uj + BENCHMARK_NOISE * e);
        }
        labels.push(if i < n_in { INLIER } else { OUTLIER });
    }
    Dataset::new(
        Tensor::new(n_in + n_out, dim, values)?,
        Some(labels),
        format!("{kind:?} benchmark dim={dim} n_in={n_in} n_out={n_out} seed={seed}"),
    )
}

fn random_unit(dim: usize, rng: &mut Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

fn random_orthonormal_pair(dim: usize, rng: &mut Rng) -> Vec<Vec<f64>> {
    let a = random_unit(dim, rng);
    loop {
        let b = random_unit(dim, rng);
        let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        let c: Vec<f64> = b.iter().zip(&a).map(|(y, x)| y - dot * x).collect();
        let n = c.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-3 {
            return vec![a, c.into_iter().map(|x| x / n).collect()];
        }
    }
}

/// Whether the last CSV column holds an integer label.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelColumn {
    #[default]
    None,
    Last,
}

/// Reads a comma-separated numeric table. A first line with any non-numeric
/// cell is taken as a header.
pub fn load_csv(path: impl AsRef<Path>, label_col: LabelColumn) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    let mut n = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Parse {
            line: e.position().map_or(i + 1, |p| p.line() as usize),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(i + 1, |p| p.line() as usize);
        if record.iter().all(str::is_empty) {
            continue;
        }
        if i == 0 && record.iter().any(|c| c.parse::<f64>().is_err()) {
            continue;
        }
        match width {
            None => width = Some(record.len()),
            Some(w) if w != record.len() => {
                return Err(Error::Parse {
                    line,
                    message: format!("expected {w} fields, found {}", record.len()),
                })
            }
            _ => {}
        }
        let feature_count = match label_col {
            LabelColumn::None => record.len(),
            LabelColumn::Last => record.len().checked_sub(1).filter(|&c| c > 0).ok_or(Error::Parse {
                line,
                message: "label column requested but row has no feature columns".into(),
            })?,
        };
        for (j, cell) in record.iter().enumerate().take(feature_count) {
            let v: f64 = cell.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {} is not a number: {cell:?}", j + 1),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("column {} is not finite: {cell:?}", j + 1),
                });
            }
            values.push(v);
        }
        if label_col == LabelColumn::Last {
            let cell = &record[feature_count];
            let label = cell
                .parse::<i64>()
                .or_else(|_| {
                    cell.parse::<f64>()
                        .ok()
                        .filter(|f| f.fract() == 0.0)
                        .map(|f| f as i64)
                        .ok_or(())
                })
                .map_err(|_| Error::Parse {
                    line,
                    message: format!("label {cell:?} is not an integer"),
                })?;
            labels.push(label);
        }
        n += 1;
    }
    let Some(width) = width else {
        return Err(Error::config(format!("{} contains no data rows", path.display())));
    };
    let cols = width - usize::from(label_col == LabelColumn::Last);
    Dataset::new(
        Tensor::new(n, cols, values)?,
        (label_col == LabelColumn::Last).then_some(labels),
        format!("csv {}", path.display()),
    )
}

/// Writes rows (and labels, if any, as the last column) with 17 significant digits.
pub fn write_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    for i in 0..ds.len() {
        for (j, v) in ds.rows().row(i).iter().enumerate() {
            if j > 0 {
                out.push(',');
            }
            write!(out, "{v:.16e}").expect("string write");
        }
        if let Some(l) = ds.labels() {
            write!(out, ",{}", l[i]).expect("string write");
        }
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// A preprocessing step requested by the caller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PreprocessOp {
    /// Zero mean, unit variance per column.
    Standardize,
    /// Every row scaled to unit norm.
    SphereNormalize,
    /// Training-time jitter with the given standard deviation.
    AddGaussianNoise(f64),
}

/// Noise level used for training-set jitter on normalized feature vectors.
pub const DEFAULT_FEATURE_NOISE: f64 = 0.01;

/// A preprocessing step with whatever statistics it needs to be replayed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FittedStep {
    Standardize { mean: Vec<f64>, std: Vec<f64> },
    SphereNormalize,
    AddGaussianNoise(f64),
}

/// Preprocessing fitted on a training set.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub steps: Vec<FittedStep>,
}

impl Preprocessing {
    /// Replays the fitted steps on new data. Noise is a training-only
    /// augmentation and is skipped.
    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        let mut rows = ds.rows().clone();
        for step in &self.steps {
            match step {
                FittedStep::Standardize { mean, std } => {
                    if mean.len() != rows.cols() {
                        return Err(Error::config(format!(
                            "standardization fitted on {} columns, data has {}",
                            mean.len(),
                            rows.cols()
                        )));
                    }
                    standardize_with(&mut rows, mean, std);
                }
                FittedStep::SphereNormalize => rows = crate::nets::sphere_project_rows(&rows)?,
                FittedStep::AddGaussianNoise(_) => {}
            }
        }
        Dataset::new(
            rows,
            ds.labels().map(<[i64]>::to_vec),
            format!("{} | preprocessed", ds.meta),
        )
    }
}

/// Applies `ops` in order. Statistics are computed on `ds` itself and returned
/// so test data can be transformed identically.
pub fn preprocess(ds: &Dataset, ops: &[PreprocessOp], seed: u64) -> Result<(Dataset, Preprocessing)> {
    let mut rows = ds.rows().clone();
    let mut fitted = Preprocessing::default();
    let mut rng = seeded_rng(seed);
    for op in ops {
        match *op {
            PreprocessOp::Standardize => {
                let (mean, std) = column_stats(&rows);
                if let Some(j) = std.iter().position(|&s| !(s > 0.0)) {
                    return Err(Error::config(format!(
                        "column {j} has zero variance and cannot be standardized"
                    )));
                }
                standardize_with(&mut rows, &mean, &std);
                fitted.steps.push(FittedStep::Standardize { mean, std });
            }
            PreprocessOp::SphereNormalize => {
                rows = crate::nets::sphere_project_rows(&rows)?;
                fitted.steps.push(FittedStep::SphereNormalize);
            }
            PreprocessOp::AddGaussianNoise(std) => {
                if !(std >= 0.0) {
                    return Err(Error::config(format!("noise std must be >= 0, got {std}")));
                }
                for v in rows.values_mut() {
                    let e: f64 = rng.sample(StandardNormal);
                    *v += std * e;
                }
                fitted.steps.push(FittedStep::AddGaussianNoise(std));
            }
        }
    }
    let names: Vec<String> = ops.iter().map(|o| format!("{o:?}")).collect();
    let out = Dataset::new(
        rows,
        ds.labels().map(<[i64]>::to_vec),
        format!("{} | {}", ds.meta, names.join(",")),
    )?;
    Ok((out, fitted))
}

/// Population mean and standard deviation of every column.
pub fn column_stats(rows: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let n = rows.rows() as f64;
    let cols = rows.cols();
    let mut mean = vec![0.0; cols];
    for i in 0..rows.rows() {
        for (m, v) in mean.iter_mut().zip(rows.row(i)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = vec![0.0; cols];
    for i in 0..rows.rows() {
        for ((s, v), m) in var.iter_mut().zip(rows.row(i)).zip(&mean) {
            *s += (v - m).powi(2);
        }
    }
    (mean, var.into_iter().map(|s| (s / n).sqrt()).collect())
}

fn standardize_with(rows: &mut Tensor, mean: &[f64], std: &[f64]) {
    let cols = rows.cols();
    for row in rows.values_mut().chunks_mut(cols) {
        for ((v, m), s) in row.iter_mut().zip(mean).zip(std) {
            *v = (*v - m) / s;
        }
    }
}

/// Train inliers, test inliers and test outliers of a hold-out-class split.
#[derive(Clone, Debug)]
pub struct HoldoutSplit {
    pub train: Dataset,
    pub test_inliers: Dataset,
    pub test_outliers: Dataset,
}

/// Treats `held_class` as anomalous. Its rows all go to the test outliers; the
/// remaining rows are shuffled and `test_fraction` of them become test inliers.
pub fn holdout_split(ds: &Dataset, held_class: i64, test_fraction: f64, seed: u64) -> Result<HoldoutSplit> {
    let labels = ds.labels().ok_or_else(|| Error::config("holdout split needs labels"))?;
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::config(format!(
            "test fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    let held: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == held_class).collect();
    if held.is_empty() {
        return Err(Error::config(format!("class {held_class} does not occur")));
    }
    let mut rest: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] != held_class).collect();
    if rest.len() < 2 {
        return Err(Error::config("need at least two rows outside the held class"));
    }
    rest.shuffle(&mut seeded_rng(seed));
    let n_test = ((rest.len() as f64 * test_fraction).round() as usize).clamp(1, rest.len() - 1);
    let (test, train) = rest.split_at(n_test);
    Ok(HoldoutSplit {
        train: ds.select(train, format!("{} | train without class {held_class}", ds.meta))?,
        test_inliers: ds.select(test, format!("{} | test inliers", ds.meta))?,
        test_outliers: ds.select(&held, format!("{} | held class {held_class}", ds.meta))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn degenerate_mixture_sits_on_means() {
        let ds = make_eight_gaussians(64, 2.0, 0.0, 4).unwrap();
        let means = eight_means(2.0);
        for i in 0..ds.len() {
            let r = ds.rows().row(i);
            assert!(means.iter().any(|&(x, y)| r[0] == x && r[1] == y));
        }
    }

    #[test]
    fn eight_gaussians_needs_eight() {
        assert!(make_eight_gaussians(7, 2.0, 0.1, 0).is_err());
    }

    #[test]
    fn generators_are_deterministic() {
        assert_eq!(
            make_eight_gaussians(100, 2.0, 0.25, 9).unwrap(),
            make_eight_gaussians(100, 2.0, 0.25, 9).unwrap()
        );
        assert_eq!(
            make_manifold_benchmark(ManifoldKind::Circle, 5, 20, 10, 2).unwrap(),
            make_manifold_benchmark(ManifoldKind::Circle, 5, 20, 10, 2).unwrap()
        );
    }

    #[test]
    fn density_is_rotationally_symmetric() {
        let (r, s) = (2.0, 0.5);
        let a = PI / 4.0;
        let p = Tensor::row_vector(&[0.7, -1.3]);
        let q = Tensor::row_vector(&[0.7 * a.cos() + 1.3 * a.sin(), 0.7 * a.sin() - 1.3 * a.cos()]);
        let dp = true_density_eight_gaussians(&p, r, s).unwrap()[0];
        let dq = true_density_eight_gaussians(&q, r, s).unwrap()[0];
        assert!((dp - dq).abs() < 1e-12);
        assert!(true_density_eight_gaussians(&p, r, 0.0).is_err());
    }

    #[test]
    fn benchmark_labels_partition_rows() {
        let ds = make_manifold_benchmark(ManifoldKind::Circle, 2, 30, 0, 1).unwrap();
        assert!(ds.labels().unwrap().iter().all(|&l| l == INLIER));
        let ds = make_manifold_benchmark(ManifoldKind::SphereShell, 4, 30, 11, 1).unwrap();
        assert_eq!(ds.len(), 41);
        let outliers = ds.labels().unwrap().iter().filter(|&&l| l == OUTLIER).count();
        assert_eq!(outliers, 11);
    }

    #[test]
    fn standardize_zero_variance_names_column() {
        let rows = Tensor::new(3, 2, vec![1.0, 5.0, 2.0, 5.0, 3.0, 5.0]).unwrap();
        let ds = Dataset::new(rows, None, "t").unwrap();
        let err = preprocess(&ds, &[PreprocessOp::Standardize], 0).unwrap_err();
        assert!(err.to_string().contains("column 1"), "{err}");
    }

    #[test]
    fn standardize_and_sphere_normalize() {
        let ds = make_manifold_benchmark(ManifoldKind::Circle, 6, 200, 0, 3).unwrap();
        let (std_ds, fitted) = preprocess(&ds, &[PreprocessOp::Standardize], 0).unwrap();
        let (mean, _) = column_stats(std_ds.rows());
        assert!(mean.iter().all(|m| m.abs() < 1e-10));
        assert_eq!(std_ds.len(), ds.len());
        // replay uses the training statistics
        assert_eq!(fitted.apply(&ds).unwrap().rows(), std_ds.rows());

        let (sph, _) = preprocess(&ds, &[PreprocessOp::SphereNormalize], 0).unwrap();
        for n in sph.rows().row_norms() {
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn replay_ignores_test_statistics() {
        let train = Dataset::new(Tensor::new(2, 1, vec![0.0, 2.0]).unwrap(), None, "a").unwrap();
        let test = Dataset::new(Tensor::new(2, 1, vec![10.0, 20.0]).unwrap(), None, "b").unwrap();
        let (_, fitted) = preprocess(&train, &[PreprocessOp::Standardize], 0).unwrap();
        assert_eq!(fitted.apply(&test).unwrap().rows().values(), &[9.0, 19.0]);
    }

    #[test]
    fn holdout_split_removes_class() {
        let rows = Tensor::new(6, 1, (0..6).map(f64::from).collect()).unwrap();
        let ds = Dataset::new(rows, Some(vec![0, 1, 0, 1, 0, 0]), "t").unwrap();
        let split = holdout_split(&ds, 1, 0.25, 3).unwrap();
        assert!(split.train.labels().unwrap().iter().all(|&l| l == 0));
        assert_eq!(
            split.train.len() + split.test_inliers.len() + split.test_outliers.len(),
            6
        );
        assert!(holdout_split(&ds, 7, 0.25, 3).is_err());
    }
}
