//! Langevin Monte Carlo and the two-stage negative sampler.

use rand::{Rng as _, SeedableRng};
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::manifold::{check_sigma, mpd_perturb, split_batch, ManifoldEnsemble, PerturbationBatch};
use crate::nets::{check_dim, sphere_project_rows, Autoencoder, Energy};
use crate::recovery::{grad_recovery, RecoveryConfig, Space};
use crate::Rng;

/// Projection applied after every Langevin step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Constraint {
    #[default]
    None,
    Sphere,
    Clamp {
        lo: f64,
        hi: f64,
    },
}

impl Constraint {
    fn apply(&self, x: Tensor) -> Result<Tensor> {
        match *self {
            Constraint::None => Ok(x),
            Constraint::Sphere => sphere_project_rows(&x),
            Constraint::Clamp { lo, hi } => Ok(x.map(|v| v.clamp(lo, hi))),
        }
    }
}

/// `x <- x - step_size * grad E(x) + noise_scale * eps`, repeated `steps` times.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    pub steps: usize,
    pub step_size: f64,
    pub noise_scale: f64,
    pub space: Space,
    #[serde(default)]
    pub constraint: Constraint,
}

impl ChainSpec {
    pub fn new(space: Space, steps: usize, step_size: f64, noise_scale: f64) -> Result<Self> {
        let spec = ChainSpec {
            steps,
            step_size,
            noise_scale,
            space,
            constraint: Constraint::None,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// A chain that returns its starting point.
    pub fn disabled(space: Space) -> Self {
        ChainSpec {
            steps: 0,
            step_size: 0.0,
            noise_scale: 0.0,
            space,
            constraint: Constraint::None,
        }
    }

    pub fn with_constraint(mut self, constraint: Constraint) -> Result<Self> {
        self.constraint = constraint;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("step_size", self.step_size), ("noise_scale", self.noise_scale)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("chain {name} must be finite and >= 0, got {v}")));
            }
        }
        if let Constraint::Clamp { lo, hi } = self.constraint {
            if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
                return Err(Error::config(format!("clamp needs finite lo < hi, got [{lo}, {hi}]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChainResult {
    pub initial: Tensor,
    pub last: Tensor,
    pub energy_start: Vec<f64>,
    pub energy_end: Vec<f64>,
    /// Every step is accepted, so this always equals the configured step count.
    pub steps: usize,
}

/// Runs unadjusted Langevin dynamics on the energy behind `energy_fn`, which
/// returns per-row energies and the gradient of their sum.
pub fn lmc<F>(mut energy_fn: F, x0: &Tensor, spec: &ChainSpec, rng: &mut Rng) -> Result<ChainResult>
where
    F: FnMut(&Tensor) -> Result<(Vec<f64>, Tensor)>,
{
    spec.validate()?;
    if spec.steps == 0 {
        let (e, _) = energy_fn(x0)?;
        return Ok(ChainResult {
            initial: x0.clone(),
            last: x0.clone(),
            energy_start: e.clone(),
            energy_end: e,
            steps: 0,
        });
    }
    let mut x = x0.clone();
    let (energy_start, mut grad) = energy_fn(&x)?;
    let mut energy_end = energy_start.clone();
    for step in 0..spec.steps {
        if !grad.is_finite() {
            return Err(Error::Numeric {
                location: format!("lmc step {step}"),
                detail: "non-finite energy gradient".into(),
            });
        }
        for (v, g) in x.values_mut().iter_mut().zip(grad.values()) {
            *v -= spec.step_size * g;
        }
        if spec.noise_scale > 0.0 {
            for v in x.values_mut() {
                let eps: f64 = rng.sample(StandardNormal);
                *v += spec.noise_scale * eps;
            }
        }
        x = spec.constraint.apply(x)?;
        if !x.is_finite() {
            return Err(Error::Numeric {
                location: format!("lmc step {step}"),
                detail: "non-finite iterate".into(),
            });
        }
        let (e, g) = energy_fn(&x)?;
        energy_end = e;
        grad = g;
    }
    Ok(ChainResult {
        initial: x0.clone(),
        last: x,
        energy_start,
        energy_end,
        steps: spec.steps,
    })
}

fn require_space(spec: &ChainSpec, space: Space) -> Result<()> {
    if spec.space != space {
        return Err(Error::config(format!(
            "expected a {space:?} chain spec, got {:?}",
            spec.space
        )));
    }
    Ok(())
}

/// LMC on the latent pullback energy, started at `z_tilde`. Spherical
/// autoencoders always get the sphere projection.
#[allow(clippy::too_many_arguments)]
pub fn latent_chain<E: Energy + ?Sized>(
    model: &E,
    ae: &Autoencoder,
    z_tilde: &Tensor,
    spec: &ChainSpec,
    cfg: &RecoveryConfig,
    sigma: &[f64],
    rng: &mut Rng,
) -> Result<ChainResult> {
    require_space(spec, Space::Latent)?;
    let mut spec = *spec;
    if ae.is_spherical() {
        spec.constraint = Constraint::Sphere;
    }
    let gamma = cfg.gamma_latent;
    lmc(
        |z| grad_recovery(model, ae, z, z_tilde, sigma, gamma, Space::Latent),
        z_tilde,
        &spec,
        rng,
    )
}

/// LMC on the recovery energy in input space, started at `x0`.
#[allow(clippy::too_many_arguments)]
pub fn visible_chain<E: Energy + ?Sized>(
    model: &E,
    ae: &Autoencoder,
    x0: &Tensor,
    z_tilde: &Tensor,
    spec: &ChainSpec,
    cfg: &RecoveryConfig,
    sigma: &[f64],
    rng: &mut Rng,
) -> Result<ChainResult> {
    require_space(spec, Space::Visible)?;
    let gamma = cfg.gamma_visible;
    lmc(
        |x| grad_recovery(model, ae, x, z_tilde, sigma, gamma, Space::Visible),
        x0,
        spec,
        rng,
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub latent: ChainSpec,
    pub visible: ChainSpec,
    pub recovery: RecoveryConfig,
    /// Put the noisy latent back on the sphere before decoding (spherical encoders only).
    pub reproject_latent: bool,
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        require_space(&self.latent, Space::Latent)?;
        require_space(&self.visible, Space::Visible)?;
        self.latent.validate()?;
        self.visible.validate()?;
        self.recovery.validate()
    }
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            latent: ChainSpec::disabled(Space::Latent),
            visible: ChainSpec::disabled(Space::Visible),
            recovery: RecoveryConfig::default(),
            reproject_latent: true,
        }
    }
}

/// Published chain settings for the reference experiments.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LmcPreset {
    MnistScalar,
    MnistReconstruction,
    Cifar10Scalar,
    Cifar10Reconstruction,
    Cifar100VitScalar,
    Cifar100VitReconstruction,
    DcaseReconstruction,
    MvtecReconstruction,
    AdbenchReconstruction,
}

impl LmcPreset {
    pub const ALL: [LmcPreset; 9] = [
        LmcPreset::MnistScalar,
        LmcPreset::MnistReconstruction,
        LmcPreset::Cifar10Scalar,
        LmcPreset::Cifar10Reconstruction,
        LmcPreset::Cifar100VitScalar,
        LmcPreset::Cifar100VitReconstruction,
        LmcPreset::DcaseReconstruction,
        LmcPreset::MvtecReconstruction,
        LmcPreset::AdbenchReconstruction,
    ];

    /// Image presets clamp the visible chain to the pixel range `[0, 1]`.
    pub fn config(self) -> SamplerConfig {
        use LmcPreset::*;
        // (latent steps, step, noise, gamma), (visible steps, step, noise, gamma), image data
        let ((zs, zl1, zl2, zg), (xs, xl1, xl2, xg), image) = match self {
            MnistScalar => ((2, 0.05, 0.02, 1e-4), (5, 10.0, 0.005, 0.0), true),
            MnistReconstruction => ((5, 0.1, 0.02, 1e-4), (5, 10.0, 0.005, 0.0), true),
            Cifar10Scalar | Cifar10Reconstruction => ((10, 0.1, 0.01, 1e-4), (20, 10.0, 0.005, 0.0), true),
            Cifar100VitScalar | Cifar100VitReconstruction => ((0, 0.0, 0.0, 1e-4), (30, 1.0, 0.005, 1e-4), false),
            DcaseReconstruction => ((0, 0.0, 0.0, 1e-4), (5, 10.0, 0.005, 1e-4), false),
            MvtecReconstruction => ((0, 0.0, 0.0, 1e-4), (10, 0.1, 0.1, 1e-4), false),
            AdbenchReconstruction => ((1, 0.1, 0.05, 1e-4), (5, 10.0, 0.1, 1e-4), false),
        };
        let constraint = if image {
            Constraint::Clamp { lo: 0.0, hi: 1.0 }
        } else {
            Constraint::None
        };
        SamplerConfig {
            latent: ChainSpec {
                steps: zs,
                step_size: zl1,
                noise_scale: zl2,
                space: Space::Latent,
                constraint: Constraint::None,
            },
            visible: ChainSpec {
                steps: xs,
                step_size: xl1,
                noise_scale: xl2,
                space: Space::Visible,
                constraint,
            },
            recovery: RecoveryConfig {
                gamma_visible: xg,
                gamma_latent: zg,
            },
            reproject_latent: true,
        }
    }
}

/// Negatives for one batch, in input order.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeBatch {
    pub x_minus: Tensor,
    /// Start of the visible chain, `f_d(z-)`, in input order.
    pub x0_minus: Tensor,
    /// One record per manifold group; rows follow `groups[k]`.
    pub perturbations: Vec<PerturbationBatch>,
    pub groups: Vec<Vec<usize>>,
}

struct GroupOutput {
    perturbation: PerturbationBatch,
    x0: Tensor,
    x_minus: Tensor,
}

fn sample_group<E: Energy + ?Sized>(
    model: &E,
    ae: &Autoencoder,
    manifold_index: usize,
    x: &Tensor,
    sigma: &[f64],
    cfg: &SamplerConfig,
    seed: u64,
) -> Result<GroupOutput> {
    let mut rng = Rng::seed_from_u64(seed);
    let mut pert = mpd_perturb(ae, x, sigma, cfg.reproject_latent, &mut rng)?;
    pert.manifold_index = manifold_index;
    let latent = latent_chain(model, ae, &pert.z_tilde, &cfg.latent, &cfg.recovery, sigma, &mut rng)?;
    let x0 = ae.decode(&latent.last)?;
    let visible = visible_chain(
        model,
        ae,
        &x0,
        &pert.z_tilde,
        &cfg.visible,
        &cfg.recovery,
        sigma,
        &mut rng,
    )?;
    Ok(GroupOutput {
        perturbation: pert,
        x0,
        x_minus: visible.last,
    })
}

/// Splits the batch across the ensemble and runs perturbation, latent chain,
/// decoding and visible chain for each group.
///
/// Each group gets its own RNG stream seeded from `rng`, so the result does
/// not depend on the thread count. A batch smaller than the ensemble uses only
/// the first `n` autoencoders.
pub fn two_stage_sample<E: Energy + ?Sized>(
    model: &E,
    ensemble: &ManifoldEnsemble,
    x: &Tensor,
    sigmas: &[f64],
    cfg: &SamplerConfig,
    rng: &mut Rng,
) -> Result<NegativeBatch> {
    cfg.validate()?;
    check_dim("negative sampling batch", x, ensemble.input_dim())?;
    check_sigma(sigmas, x.rows())?;
    let k = ensemble.len().min(x.rows());
    let groups = split_batch(x.rows(), k)?;
    let seeds: Vec<u64> = (0..k).map(|_| rng.random()).collect();
    let outputs = groups
        .par_iter()
        .zip(seeds.par_iter())
        .enumerate()
        .map(|(m, (idx, &seed))| {
            let xs = x.select_rows(idx);
            let sg: Vec<f64> = idx.iter().map(|&i| sigmas[i]).collect();
            sample_group(model, &ensemble.autoencoders()[m], m, &xs, &sg, cfg, seed)
        })
        .collect::<Result<Vec<_>>>()?;

    let mut x_minus = Tensor::zeros(x.rows(), x.cols());
    let mut x0_minus = Tensor::zeros(x.rows(), x.cols());
    let cols = x.cols();
    let mut perturbations = Vec::with_capacity(k);
    for (idx, out) in groups.iter().zip(outputs) {
        for (r, &i) in idx.iter().enumerate() {
            x_minus.values_mut()[i * cols..(i + 1) * cols].copy_from_slice(out.x_minus.row(r));
            x0_minus.values_mut()[i * cols..(i + 1) * cols].copy_from_slice(out.x0.row(r));
        }
        perturbations.push(out.perturbation);
    }
    Ok(NegativeBatch {
        x_minus,
        x0_minus,
        perturbations,
        groups,
    })
}
