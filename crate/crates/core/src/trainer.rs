//! The MPDR training loop.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffcore::{Adam, AdamConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::manifold::{sample_sigma, ManifoldEnsemble, SigmaRange};
use crate::metrics::{auroc, ScoredSamples};
use crate::nets::{
    check_dim, sphere_project_rows, Autoencoder, AutoencoderSpec, Energy, EnergyKind, EnergyModel, QuadraticEnergy,
};
use crate::recovery::{RecoveryConfig, Space};
use crate::sampler::{two_stage_sample, ChainSpec, SamplerConfig};
use crate::{seeded_rng, Rng};

/// Energy-magnitude penalty added to the contrastive loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regularization {
    None,
    /// `E(x)^2 + E(x-)^2`
    Scalar,
    /// `E(x-)^2`
    Reconstruction,
}

impl Regularization {
    pub fn for_energy(kind: EnergyKind) -> Self {
        match kind {
            EnergyKind::Scalar => Regularization::Scalar,
            EnergyKind::Reconstruction => Regularization::Reconstruction,
        }
    }

    /// Penalty for one pair of batch-mean squared energies.
    pub fn value(self, pos_sq_mean: f64, neg_sq_mean: f64) -> f64 {
        match self {
            Regularization::None => 0.0,
            Regularization::Scalar => pos_sq_mean + neg_sq_mean,
            Regularization::Reconstruction => neg_sq_mean,
        }
    }
}

pub const DEFAULT_REG_COEF: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MpdrTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub regularization: Regularization,
    pub reg_coef: f64,
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl MpdrTrainConfig {
    pub fn validate(&self, ensemble_size: usize) -> Result<()> {
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!("train.lr must be > 0, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size must be positive"));
        }
        if self.batch_size < ensemble_size {
            return Err(Error::config(format!(
                "train.batch_size {} is smaller than the ensemble size {ensemble_size}",
                self.batch_size
            )));
        }
        if !(self.reg_coef >= 0.0) || !self.reg_coef.is_finite() {
            return Err(Error::config(format!(
                "train.reg_coef must be >= 0, got {}",
                self.reg_coef
            )));
        }
        self.sampler.validate()
    }
}

/// Source of negative samples for a batch of positives.
pub trait NegativeSampler<E: Energy + ?Sized> {
    fn negatives(&mut self, model: &E, x: &Tensor, rng: &mut Rng) -> Result<Tensor>;
}

/// Draws one noise magnitude per sample and runs the two-stage sampler
/// over a frozen ensemble.
pub struct MpdrSampler<'a> {
    pub ensemble: &'a ManifoldEnsemble,
    pub config: SamplerConfig,
}

impl<E: Energy + ?Sized> NegativeSampler<E> for MpdrSampler<'_> {
    fn negatives(&mut self, model: &E, x: &Tensor, rng: &mut Rng) -> Result<Tensor> {
        let sigma = sample_sigma(self.ensemble.sigma_range, rng, x.rows())?;
        Ok(two_stage_sample(model, self.ensemble, x, &sigma, &self.config, rng)?.x_minus)
    }
}

/// Loss components of one update.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub loss: f64,
    pub pos_energy: f64,
    pub neg_energy: f64,
    pub reg: f64,
}

/// `mean E(x) - mean E(x-) + reg_coef * L_reg` and its gradient with respect
/// to every model parameter.
pub fn loss_gradient<E: Energy + ?Sized>(
    model: &E,
    x: &Tensor,
    x_minus: &Tensor,
    regularization: Regularization,
    reg_coef: f64,
) -> Result<(StepOutcome, Vec<Tensor>)> {
    check_dim("positive batch", x, model.input_dim())?;
    check_dim("negative batch", x_minus, model.input_dim())?;
    let mut tape = Tape::new();
    let params = model.bind(&mut tape, true);
    let xp = tape.constant(x.clone());
    let xn = tape.constant(x_minus.clone());
    let ep = model.energy_on_tape(&mut tape, xp, &params)?;
    let en = model.energy_on_tape(&mut tape, xn, &params)?;
    let mp = tape.mean(ep)?;
    let mn = tape.mean(en)?;
    let mut loss = tape.sub(mp, mn)?;
    let mut reg = 0.0;
    if reg_coef != 0.0 && regularization != Regularization::None {
        let sq_n = tape.mul(en, en)?;
        let mut reg_var = tape.mean(sq_n)?;
        if regularization == Regularization::Scalar {
            let sq_p = tape.mul(ep, ep)?;
            let msq_p = tape.mean(sq_p)?;
            reg_var = tape.add(msq_p, reg_var)?;
        }
        reg = tape.value(reg_var).item()?;
        let scaled = tape.scale(reg_var, reg_coef)?;
        loss = tape.add(loss, scaled)?;
    }
    let grads = tape.gradient(loss, &params)?;
    let outcome = StepOutcome {
        loss: tape.value(loss).item()?,
        pos_energy: tape.value(mp).item()?,
        neg_energy: tape.value(mn).item()?,
        reg,
    };
    Ok((outcome, grads))
}

/// One update: negatives from `sampler`, then one Adam step on the loss.
pub fn mpdr_step<E, S>(
    model: &mut E,
    sampler: &mut S,
    batch: &Tensor,
    cfg: &MpdrTrainConfig,
    opt: &mut Adam,
    rng: &mut Rng,
) -> Result<StepOutcome>
where
    E: Energy + ?Sized,
    S: NegativeSampler<E> + ?Sized,
{
    let x_minus = sampler.negatives(model, batch, rng)?;
    let (outcome, grads) = loss_gradient(model, batch, &x_minus, cfg.regularization, cfg.reg_coef)?;
    if !outcome.loss.is_finite() || grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numeric {
            location: "mpdr step".into(),
            detail: format!(
                "loss {} (positive energy {}, negative energy {})",
                outcome.loss, outcome.pos_energy, outcome.neg_energy
            ),
        });
    }
    opt.step(&mut model.params_mut(), &grads)?;
    Ok(outcome)
}

/// Per-epoch means over the batches of that epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub pos_energy: f64,
    pub neg_energy: f64,
    pub loss: f64,
    pub val_auroc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Held-out inliers and synthetic or real outliers scored after every epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Validation {
    pub inliers: Tensor,
    pub outliers: Tensor,
}

impl Validation {
    pub fn auroc<E: Energy + ?Sized>(&self, model: &E) -> Result<f64> {
        let s = ScoredSamples::new(model.energy(&self.inliers)?, model.energy(&self.outliers)?)?;
        Ok(auroc(&s))
    }
}

/// Trains `model` against a frozen manifold ensemble.
pub fn train<E: Energy + ?Sized>(
    model: &mut E,
    ensemble: &ManifoldEnsemble,
    data: &Tensor,
    cfg: &MpdrTrainConfig,
    validation: Option<&Validation>,
) -> Result<TrainHistory> {
    cfg.validate(ensemble.len())?;
    if model.input_dim() != ensemble.input_dim() {
        return Err(Error::config(format!(
            "energy takes {} dims, ensemble {}",
            model.input_dim(),
            ensemble.input_dim()
        )));
    }
    let mut sampler = MpdrSampler {
        ensemble,
        config: cfg.sampler,
    };
    train_with_sampler(model, &mut sampler, data, cfg, validation)
}

/// The training loop with an arbitrary negative sampler.
pub fn train_with_sampler<E, S>(
    model: &mut E,
    sampler: &mut S,
    data: &Tensor,
    cfg: &MpdrTrainConfig,
    validation: Option<&Validation>,
) -> Result<TrainHistory>
where
    E: Energy + ?Sized,
    S: NegativeSampler<E> + ?Sized,
{
    if data.rows() == 0 {
        return Err(Error::config("training set is empty"));
    }
    if !(cfg.lr >= 0.0) || cfg.batch_size == 0 {
        return Err(Error::config("train.lr must be >= 0 and train.batch_size positive"));
    }
    check_dim("training data", data, model.input_dim())?;
    let mut rng = seeded_rng(cfg.seed);
    let mut opt = Adam::new(AdamConfig::with_lr(cfg.lr), &model.params());
    let mut order: Vec<usize> = (0..data.rows()).collect();
    let mut history = TrainHistory::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut pos, mut neg, mut loss) = (0.0, 0.0, 0.0);
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = data.select_rows(chunk);
            let out = mpdr_step(model, sampler, &batch, cfg, &mut opt, &mut rng)?;
            pos += out.pos_energy;
            neg += out.neg_energy;
            loss += out.loss;
            batches += 1;
        }
        let n = batches as f64;
        let val_auroc = validation.map(|v| v.auroc(model)).transpose()?;
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            pos_energy: pos / n,
            neg_energy: neg / n,
            loss: loss / n,
            val_auroc,
        });
    }
    Ok(history)
}

/// Points spread uniformly over the decoder manifold, used as synthetic
/// outliers for validation. Spherical latents are drawn uniformly on the
/// sphere; other latents uniformly in the bounding box of `reference` encoded.
pub fn manifold_uniform_samples(ae: &Autoencoder, reference: &Tensor, n: usize, rng: &mut Rng) -> Result<Tensor> {
    if n == 0 {
        return Err(Error::config("need at least one manifold sample"));
    }
    let d = ae.latent_dim();
    let z = if ae.is_spherical() {
        let g: Vec<f64> = (0..n * d).map(|_| rng.sample(StandardNormal)).collect();
        sphere_project_rows(&Tensor::new(n, d, g)?)?
    } else {
        let zr = ae.encode(reference)?;
        let (mut lo, mut hi) = (vec![f64::INFINITY; d], vec![f64::NEG_INFINITY; d]);
        for r in 0..zr.rows() {
            for (j, &v) in zr.row(r).iter().enumerate() {
                lo[j] = lo[j].min(v);
                hi[j] = hi[j].max(v);
            }
        }
        let mut v = Vec::with_capacity(n * d);
        for _ in 0..n {
            for j in 0..d {
                v.push(if hi[j] > lo[j] {
                    rng.random_range(lo[j]..hi[j])
                } else {
                    lo[j]
                });
            }
        }
        Tensor::new(n, d, v)?
    };
    ae.decode(&z)
}

/// A reconstruction energy initialized as a copy of the first ensemble
/// member, when that member has the requested architecture.
pub fn reconstruction_energy_from_ensemble(
    ensemble: &ManifoldEnsemble,
    spec: &AutoencoderSpec,
) -> Result<Option<EnergyModel>> {
    let first = &ensemble.autoencoders()[0];
    let same = first.encoder().spec() == &spec.encoder_spec()? && first.decoder().spec() == &spec.decoder_spec()?;
    Ok(same.then(|| EnergyModel::Reconstruction(first.clone())))
}

/// Recovering the mean of a unit-variance Gaussian with a quadratic energy
/// and an identity manifold.
#[derive(Clone, Debug, PartialEq)]
pub struct ConsistencyConfig {
    pub mu_star: f64,
    pub n_samples: usize,
    pub init_mean: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub visible: ChainSpec,
    pub sigma_range: SigmaRange,
    pub gamma: f64,
    pub seed: u64,
}

impl Default for ConsistencyConfig {
    fn default() -> Self {
        ConsistencyConfig {
            mu_star: 0.0,
            n_samples: 10_000,
            init_mean: 1.0,
            epochs: 20,
            batch_size: 128,
            lr: 0.01,
            visible: ChainSpec {
                steps: 20,
                step_size: 0.1,
                noise_scale: 0.2f64.sqrt(),
                space: Space::Visible,
                constraint: Default::default(),
            },
            sigma_range: SigmaRange::default(),
            gamma: 1e-4,
            seed: 0,
        }
    }
}

/// Trains the learnable mean and returns its final value.
pub fn consistency_smoke(cfg: &ConsistencyConfig) -> Result<f64> {
    let mut rng = seeded_rng(cfg.seed ^ 0xc0_5157);
    let data: Vec<f64> = (0..cfg.n_samples)
        .map(|_| cfg.mu_star + rng.sample::<f64, _>(StandardNormal))
        .collect();
    let data = Tensor::new(cfg.n_samples, 1, data)?;
    let ensemble = ManifoldEnsemble::new(vec![Autoencoder::identity(1)], cfg.sigma_range)?;
    let mut model = QuadraticEnergy::new(&[cfg.init_mean]);
    let train_cfg = MpdrTrainConfig {
        epochs: cfg.epochs,
        batch_size: cfg.batch_size,
        lr: cfg.lr,
        regularization: Regularization::None,
        reg_coef: 0.0,
        sampler: SamplerConfig {
            latent: ChainSpec::disabled(Space::Latent),
            visible: cfg.visible,
            recovery: RecoveryConfig::new(cfg.gamma, cfg.gamma)?,
            reproject_latent: false,
        },
        seed: cfg.seed,
    };
    let mut sampler = MpdrSampler {
        ensemble: &ensemble,
        config: train_cfg.sampler,
    };
    train_with_sampler(&mut model, &mut sampler, &data, &train_cfg, None)?;
    Ok(model.mean()[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    struct Rigged;

    impl<E: Energy + ?Sized> NegativeSampler<E> for Rigged {
        fn negatives(&mut self, _: &E, x: &Tensor, _: &mut Rng) -> Result<Tensor> {
            Ok(x.clone())
        }
    }

    fn cfg(reg: Regularization, reg_coef: f64) -> MpdrTrainConfig {
        MpdrTrainConfig {
            epochs: 2,
            batch_size: 4,
            lr: 0.1,
            regularization: reg,
            reg_coef,
            sampler: SamplerConfig::default(),
            seed: 1,
        }
    }

    #[test]
    fn regularization_forms() {
        assert_eq!(Regularization::Scalar.value(4.0, 9.0), 13.0);
        assert_eq!(Regularization::Reconstruction.value(4.0, 9.0), 9.0);
        assert_eq!(Regularization::None.value(4.0, 9.0), 0.0);
    }

    #[test]
    fn regularization_on_tape() {
        // E(x) = x^2/2 with mean 0: E(2) = 2, E(sqrt 6) = 3.
        let model = QuadraticEnergy::new(&[0.0]);
        let x = Tensor::scalar(2.0);
        let xm = Tensor::scalar(6f64.sqrt());
        let (o, _) = loss_gradient(&model, &x, &xm, Regularization::Scalar, 1.0).unwrap();
        assert!((o.reg - 13.0).abs() < 1e-12);
        let (o, _) = loss_gradient(&model, &x, &xm, Regularization::Reconstruction, 1.0).unwrap();
        assert!((o.reg - 9.0).abs() < 1e-12);
        assert!((o.loss - (2.0 - 3.0 + 9.0)).abs() < 1e-12);
    }

    #[test]
    fn rigged_sampler_leaves_parameters() {
        let mut model = QuadraticEnergy::new(&[0.3, -0.2]);
        let data = Tensor::new(6, 2, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0, 1.1, 1.2]).unwrap();
        let h = train_with_sampler(&mut model, &mut Rigged, &data, &cfg(Regularization::Scalar, 0.0), None).unwrap();
        assert_eq!(model.mean(), &[0.3, -0.2]);
        assert!(h.epochs.iter().all(|r| r.loss == 0.0));
    }

    #[test]
    fn zero_epochs_leave_model() {
        let mut model = QuadraticEnergy::new(&[0.3]);
        let mut c = cfg(Regularization::None, 0.0);
        c.epochs = 0;
        let h = train_with_sampler(&mut model, &mut Rigged, &Tensor::scalar(1.0), &c, None).unwrap();
        assert!(h.epochs.is_empty());
        assert_eq!(model.mean(), &[0.3]);
    }

    #[test]
    fn batch_smaller_than_ensemble_rejected() {
        let ens = ManifoldEnsemble::new(vec![Autoencoder::identity(1); 5], SigmaRange::default()).unwrap();
        let mut model = QuadraticEnergy::new(&[0.0]);
        let err = train(
            &mut model,
            &ens,
            &Tensor::scalar(1.0),
            &cfg(Regularization::None, 0.0),
            None,
        );
        assert!(matches!(err, Err(Error::Config(_))));
    }

    #[test]
    fn zero_learning_rate_keeps_initialization() {
        let c = ConsistencyConfig {
            lr: 0.0,
            n_samples: 200,
            epochs: 1,
            init_mean: 0.7,
            ..Default::default()
        };
        assert_eq!(consistency_smoke(&c).unwrap(), 0.7);
    }

    #[test]
    fn manifold_samples_have_input_shape() {
        let ae = Autoencoder::identity(3);
        let s = manifold_uniform_samples(&ae, &Tensor::row_vector(&[0.0, 1.0, 2.0]), 5, &mut seeded_rng(0)).unwrap();
        assert_eq!(s.shape(), [5, 3]);
    }
}
