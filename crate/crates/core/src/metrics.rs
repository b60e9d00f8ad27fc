//! Ranking metrics over anomaly scores and the grid l1 density error.
//!
//! Higher scores mean "more anomalous". Ties count as misses in AUROC and
//! pAUROC (a strict step function), unlike the usual rank-statistic
//! convention of one half.

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::Energy;

/// Scores of normal samples and of anomalous samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredSamples {
    normal: Vec<f64>,
    anomalous: Vec<f64>,
}

impl ScoredSamples {
    pub fn new(normal: Vec<f64>, anomalous: Vec<f64>) -> Result<Self> {
        if normal.is_empty() || anomalous.is_empty() {
            return Err(Error::config(format!(
                "metrics need both score sets non-empty (normal {}, anomalous {})",
                normal.len(),
                anomalous.len()
            )));
        }
        if normal.iter().chain(&anomalous).any(|s| !s.is_finite()) {
            return Err(Error::Numeric {
                location: "metric scores".into(),
                detail: "non-finite anomaly score".into(),
            });
        }
        Ok(ScoredSamples { normal, anomalous })
    }

    pub fn normal(&self) -> &[f64] {
        &self.normal
    }

    pub fn anomalous(&self) -> &[f64] {
        &self.anomalous
    }

    /// The same scores with the roles of the two sets exchanged.
    pub fn swapped(&self) -> ScoredSamples {
        ScoredSamples {
            normal: self.anomalous.clone(),
            anomalous: self.normal.clone(),
        }
    }
}

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    s
}

/// Number of (normal, anomalous) pairs with the anomaly strictly above.
fn strict_pairs(normal_sorted: &[f64], anomalous: &[f64]) -> u64 {
    anomalous
        .iter()
        .map(|&a| normal_sorted.partition_point(|&n| n < a) as u64)
        .sum()
}

pub fn auroc(s: &ScoredSamples) -> f64 {
    let normal = sorted(&s.normal);
    let pairs = strict_pairs(&normal, &s.anomalous);
    pairs as f64 / (s.normal.len() as f64 * s.anomalous.len() as f64)
}

/// AUROC restricted to false positive rates in `[0, p]`: only the
/// `floor(p N-)` highest-scoring normals enter the pair count.
pub fn pauroc(s: &ScoredSamples, p: f64) -> Result<f64> {
    if !(p > 0.0 && p <= 1.0) {
        return Err(Error::config(format!("pauroc p must lie in (0, 1], got {p}")));
    }
    let m = (p * s.normal.len() as f64).floor() as usize;
    if m == 0 {
        return Err(Error::config(format!(
            "pauroc with p={p} keeps no normal sample out of {}",
            s.normal.len()
        )));
    }
    let normal = sorted(&s.normal);
    let top = &normal[normal.len() - m..];
    let pairs = strict_pairs(top, &s.anomalous);
    Ok(pairs as f64 / (m as f64 * s.anomalous.len() as f64))
}

/// Average precision with anomalies as the positive class: the sum of
/// precision times recall increment over every distinct score threshold.
/// All-tied scores give the single operating point `N+ / (N+ + N-)`.
pub fn aupr(s: &ScoredSamples) -> f64 {
    let mut all: Vec<(f64, bool)> = s
        .anomalous
        .iter()
        .map(|&v| (v, true))
        .chain(s.normal.iter().map(|&v| (v, false)))
        .collect();
    all.sort_by(|a, b| b.0.total_cmp(&a.0));
    let total_pos = s.anomalous.len() as f64;
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut prev_recall = 0.0;
    let mut ap = 0.0;
    let mut i = 0;
    while i < all.len() {
        let t = all[i].0;
        while i < all.len() && all[i].0 == t {
            if all[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let recall = tp as f64 / total_pos;
        let precision = tp as f64 / (tp + fp) as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Cell-centred square grid over `[lo, hi]^2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DensityGrid {
    pub lo: f64,
    pub hi: f64,
    pub resolution: usize,
}

impl Default for DensityGrid {
    fn default() -> Self {
        DensityGrid {
            lo: -4.0,
            hi: 4.0,
            resolution: 100,
        }
    }
}

impl DensityGrid {
    pub fn new(lo: f64, hi: f64, resolution: usize) -> Result<Self> {
        let g = DensityGrid { lo, hi, resolution };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lo < self.hi) || !self.lo.is_finite() || !self.hi.is_finite() {
            return Err(Error::config(format!(
                "grid needs lo < hi, got [{}, {}]",
                self.lo, self.hi
            )));
        }
        if self.resolution == 0 {
            return Err(Error::config("grid resolution must be positive"));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        (self.hi - self.lo) / self.resolution as f64
    }

    pub fn cell_area(&self) -> f64 {
        self.spacing() * self.spacing()
    }

    pub fn len(&self) -> usize {
        self.resolution * self.resolution
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Cell centres, `x` varying fastest.
    pub fn points(&self) -> Tensor {
        let h = self.spacing();
        let c = |i: usize| self.lo + (i as f64 + 0.5) * h;
        let mut v = Vec::with_capacity(2 * self.len());
        for iy in 0..self.resolution {
            for ix in 0..self.resolution {
                v.push(c(ix));
                v.push(c(iy));
            }
        }
        Tensor::new(self.len(), 2, v).expect("grid is non-empty")
    }
}

/// `exp(-E)` normalized so that its grid sum times `cell_area` is one.
pub fn normalized_density(energies: &[f64], cell_area: f64) -> Result<Vec<f64>> {
    let min = energies.iter().copied().fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        return Err(Error::Numeric {
            location: "grid normalization".into(),
            detail: "no finite energy on the grid".into(),
        });
    }
    let w: Vec<f64> = energies.iter().map(|e| (-(e - min)).exp()).collect();
    let z: f64 = w.iter().sum::<f64>() * cell_area;
    Ok(w.into_iter().map(|v| v / z).collect())
}

fn normalize_weights(density: &[f64], cell_area: f64) -> Result<Vec<f64>> {
    if density.iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
        return Err(Error::config("true density must be finite and non-negative"));
    }
    let z: f64 = density.iter().sum::<f64>() * cell_area;
    if !(z > 0.0) {
        return Err(Error::DegenerateInput("true density vanishes on the grid".into()));
    }
    Ok(density.iter().map(|d| d / z).collect())
}

/// l1 distance between the grid-normalized model density and the
/// grid-normalized true density.
pub fn density_l1_from_energies(energies: &[f64], true_density: &[f64], cell_area: f64) -> Result<f64> {
    if energies.len() != true_density.len() {
        return Err(Error::config(format!(
            "{} energies for {} density values",
            energies.len(),
            true_density.len()
        )));
    }
    let p_hat = normalized_density(energies, cell_area)?;
    let p = normalize_weights(true_density, cell_area)?;
    Ok(p_hat.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum::<f64>() * cell_area)
}

pub fn density_l1<E: Energy + ?Sized>(model: &E, grid: &DensityGrid, true_density: &[f64]) -> Result<f64> {
    grid.validate()?;
    let energies = model.energy(&grid.points())?;
    density_l1_from_energies(&energies, true_density, grid.cell_area())
}
