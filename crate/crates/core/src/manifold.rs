//! Autoencoder manifolds: pretraining, the projection-diffusion perturbation
//! and the noise-magnitude / manifold ensembles.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffcore::{Adam, AdamConfig, Tape, Tensor};
use crate::error::{Error, Result};
use crate::nets::{check_dim, sphere_project_rows, Autoencoder, AutoencoderSpec};
use crate::{seeded_rng, Rng};

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Coefficient of the squared l2 norm of the encoder weights.
    pub weight_decay_enc: f64,
    pub seed: u64,
}

#[derive(Clone, Debug)]
pub struct PretrainReport {
    pub autoencoder: Autoencoder,
    /// Mean reconstruction loss of the untrained model on the full data.
    pub initial_loss: f64,
    /// Mean reconstruction loss on the full data after each epoch.
    pub epoch_losses: Vec<f64>,
}

impl PretrainReport {
    pub fn final_loss(&self) -> f64 {
        self.epoch_losses.last().copied().unwrap_or(self.initial_loss)
    }
}

/// Initializes an autoencoder from `spec` and fits it to `data`.
pub fn pretrain_autoencoder(data: &Tensor, spec: &AutoencoderSpec, cfg: &PretrainConfig) -> Result<PretrainReport> {
    let ae = Autoencoder::init(spec, cfg.seed)?;
    fit_autoencoder(ae, data, cfg)
}

/// Minimizes mean reconstruction error plus the encoder weight penalty for a
/// fixed number of epochs. Batches are reshuffled every epoch and the last
/// partial batch is kept.
pub fn fit_autoencoder(mut ae: Autoencoder, data: &Tensor, cfg: &PretrainConfig) -> Result<PretrainReport> {
    check_dim("pretraining data", data, ae.input_dim())?;
    if cfg.batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    if !(cfg.lr >= 0.0) || !(cfg.weight_decay_enc >= 0.0) {
        return Err(Error::config("learning rate and weight decay must be non-negative"));
    }
    let mut rng = seeded_rng(cfg.seed ^ 0x5eed_ae00);
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr), &ae.params());
    let n = data.rows();
    let mut order: Vec<usize> = (0..n).collect();
    let initial_loss = crate::nets::reconstruction_loss(&ae, data)?;
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for idx in order.chunks(cfg.batch_size) {
            let batch = data.select_rows(idx);
            let grads = {
                let mut tape = Tape::new();
                let x = tape.constant(batch);
                let vars = ae.bind(&mut tape, true);
                let err = ae.reconstruction_error_on_tape(&mut tape, x, &vars)?;
                let mut loss = tape.mean(err)?;
                if cfg.weight_decay_enc > 0.0 {
                    for w in vars.encoder.iter().step_by(2) {
                        let sq = tape.mul(*w, *w)?;
                        let s = tape.sum(sq)?;
                        let s = tape.scale(s, cfg.weight_decay_enc)?;
                        loss = tape.add(loss, s)?;
                    }
                }
                let all: Vec<_> = vars.encoder.iter().chain(&vars.decoder).copied().collect();
                tape.gradient(loss, &all)?
            };
            adam.step(&mut ae.params_mut(), &grads)?;
        }
        epoch_losses.push(crate::nets::reconstruction_loss(&ae, data)?);
    }
    Ok(PretrainReport {
        autoencoder: ae,
        initial_loss,
        epoch_losses,
    })
}

/// Interval `[min, max]` from which per-sample noise magnitudes are drawn.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SigmaRange {
    pub min: f64,
    pub max: f64,
}

impl SigmaRange {
    pub fn new(min: f64, max: f64) -> Result<Self> {
        let r = SigmaRange { min, max };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.min > 0.0) || !(self.max >= self.min) || !self.max.is_finite() {
            return Err(Error::config(format!(
                "sigma range needs 0 < min <= max, got [{}, {}]",
                self.min, self.max
            )));
        }
        Ok(())
    }
}

impl Default for SigmaRange {
    fn default() -> Self {
        SigmaRange { min: 0.05, max: 0.3 }
    }
}

/// Independent uniform draws from `range`, one per sample.
pub fn sample_sigma(range: SigmaRange, rng: &mut Rng, n: usize) -> Result<Vec<f64>> {
    range.validate()?;
    if range.min == range.max {
        return Ok(vec![range.min; n]);
    }
    Ok((0..n).map(|_| rng.random_range(range.min..=range.max)).collect())
}

/// Assigns sample `i` to group `i mod k`; group sizes differ by at most one.
pub fn split_batch(n: usize, k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::config("ensemble size must be at least 1"));
    }
    if k > n {
        return Err(Error::config(format!("cannot split a batch of {n} into {k} groups")));
    }
    let mut groups = vec![Vec::with_capacity(n / k + 1); k];
    for i in 0..n {
        groups[i % k].push(i);
    }
    Ok(groups)
}

/// Frozen autoencoders sharing an input space, plus the noise-magnitude range.
#[derive(Clone, Debug)]
pub struct ManifoldEnsemble {
    autoencoders: Vec<Autoencoder>,
    pub sigma_range: SigmaRange,
}

impl ManifoldEnsemble {
    pub fn new(autoencoders: Vec<Autoencoder>, sigma_range: SigmaRange) -> Result<Self> {
        let Some(first) = autoencoders.first() else {
            return Err(Error::config("manifold ensemble needs at least one autoencoder"));
        };
        if let Some((i, ae)) = autoencoders
            .iter()
            .enumerate()
            .find(|(_, ae)| ae.input_dim() != first.input_dim())
        {
            return Err(Error::config(format!(
                "autoencoder {i} has input dim {}, autoencoder 0 has {}",
                ae.input_dim(),
                first.input_dim()
            )));
        }
        sigma_range.validate()?;
        Ok(ManifoldEnsemble {
            autoencoders,
            sigma_range,
        })
    }

    pub fn autoencoders(&self) -> &[Autoencoder] {
        &self.autoencoders
    }

    pub fn len(&self) -> usize {
        self.autoencoders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.autoencoders.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.autoencoders[0].input_dim()
    }

    pub fn checksums(&self) -> Vec<u64> {
        self.autoencoders.iter().map(Autoencoder::checksum).collect()
    }
}

/// One group of perturbed samples: `x -> z = f_e(x) -> z~ = z + sigma eps -> x~ = f_d(z~)`.
#[derive(Clone, Debug, PartialEq)]
pub struct PerturbationBatch {
    pub x: Tensor,
    pub z: Tensor,
    pub z_tilde: Tensor,
    pub x_tilde: Tensor,
    pub sigma: Vec<f64>,
    pub manifold_index: usize,
}

/// Projects `x` onto the manifold, diffuses in latent space and decodes.
///
/// With a spherical encoder and `reproject` set, the noisy latent is projected
/// back onto the sphere before decoding.
pub fn mpd_perturb(
    ae: &Autoencoder,
    x: &Tensor,
    sigma: &[f64],
    reproject: bool,
    rng: &mut Rng,
) -> Result<PerturbationBatch> {
    check_dim("perturbation input", x, ae.input_dim())?;
    check_sigma(sigma, x.rows())?;
    let z = ae.encode(x)?;
    let mut z_tilde = z.clone();
    let cols = z.cols();
    for (row, s) in z_tilde.values_mut().chunks_mut(cols).zip(sigma) {
        for v in row {
            let e: f64 = rng.sample(StandardNormal);
            *v += s * e;
        }
    }
    if reproject && ae.is_spherical() {
        z_tilde = sphere_project_rows(&z_tilde)?;
    }
    let x_tilde = ae.decode(&z_tilde)?;
    Ok(PerturbationBatch {
        x: x.clone(),
        z,
        z_tilde,
        x_tilde,
        sigma: sigma.to_vec(),
        manifold_index: 0,
    })
}

pub(crate) fn check_sigma(sigma: &[f64], rows: usize) -> Result<()> {
    if sigma.len() != rows {
        return Err(Error::config(format!(
            "{} noise magnitudes for {rows} samples",
            sigma.len()
        )));
    }
    if let Some(s) = sigma.iter().find(|s| !(**s > 0.0) || !s.is_finite()) {
        return Err(Error::config(format!("sigma must be positive, got {s}")));
    }
    Ok(())
}
