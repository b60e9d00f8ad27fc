//! Recovery energy `E(x) + gamma / (2 sigma^2) ||z~ - f_e(x)||^2` and its
//! pullback through the decoder.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::manifold::check_sigma;
use crate::nets::{check_dim, Autoencoder, AutoencoderVars, Energy};

/// Scale factors on the perturbation term, one per chain.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecoveryConfig {
    pub gamma_visible: f64,
    pub gamma_latent: f64,
}

pub const DEFAULT_GAMMA: f64 = 1e-4;

impl RecoveryConfig {
    pub fn new(gamma_visible: f64, gamma_latent: f64) -> Result<Self> {
        let cfg = RecoveryConfig {
            gamma_visible,
            gamma_latent,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Image-like data: the perturbation gradient is dropped from the visible chain.
    pub fn image_like() -> Self {
        RecoveryConfig {
            gamma_visible: 0.0,
            gamma_latent: DEFAULT_GAMMA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, g) in [
            ("gamma_visible", self.gamma_visible),
            ("gamma_latent", self.gamma_latent),
        ] {
            if !(g >= 0.0) || !g.is_finite() {
                return Err(Error::config(format!("{name} must be finite and >= 0, got {g}")));
            }
        }
        Ok(())
    }
}

impl Default for RecoveryConfig {
    fn default() -> Self {
        RecoveryConfig {
            gamma_visible: DEFAULT_GAMMA,
            gamma_latent: DEFAULT_GAMMA,
        }
    }
}

/// Which variable a chain moves.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Space {
    Latent,
    Visible,
}

/// Appends the recovery energy of the row batch `x` to `tape`.
///
/// With `gamma == 0` this is exactly `model.energy_on_tape`.
#[allow(clippy::too_many_arguments)]
pub fn recovery_energy_on_tape<E: Energy + ?Sized>(
    tape: &mut Tape,
    model: &E,
    model_vars: &[Var],
    ae: &Autoencoder,
    ae_vars: &AutoencoderVars,
    x: Var,
    z_tilde: &Tensor,
    sigma: &[f64],
    gamma: f64,
) -> Result<Var> {
    let energy = model.energy_on_tape(tape, x, model_vars)?;
    if gamma == 0.0 {
        return Ok(energy);
    }
    let z = ae.encode_on_tape(tape, x, ae_vars)?;
    let zt = tape.constant(z_tilde.clone());
    let diff = tape.sub(zt, z)?;
    let sq = tape.row_sq_norm(diff)?;
    let coef: Vec<f64> = sigma.iter().map(|s| gamma / (2.0 * s * s)).collect();
    let coef = tape.constant(Tensor::column(&coef));
    let term = tape.mul(sq, coef)?;
    tape.add(energy, term)
}

/// Appends the latent pullback `H~(z) = E~(f_d(z) | z~)` to `tape`.
#[allow(clippy::too_many_arguments)]
pub fn latent_energy_on_tape<E: Energy + ?Sized>(
    tape: &mut Tape,
    model: &E,
    model_vars: &[Var],
    ae: &Autoencoder,
    ae_vars: &AutoencoderVars,
    z: Var,
    z_tilde: &Tensor,
    sigma: &[f64],
    gamma: f64,
) -> Result<Var> {
    let x = ae.decode_on_tape(tape, z, ae_vars)?;
    recovery_energy_on_tape(tape, model, model_vars, ae, ae_vars, x, z_tilde, sigma, gamma)
}

fn check_inputs<E: Energy + ?Sized>(
    model: &E,
    ae: &Autoencoder,
    point: &Tensor,
    z_tilde: &Tensor,
    sigma: &[f64],
    gamma: f64,
    space: Space,
) -> Result<()> {
    if model.input_dim() != ae.input_dim() {
        return Err(Error::config(format!(
            "energy takes {} dims, autoencoder {}",
            model.input_dim(),
            ae.input_dim()
        )));
    }
    match space {
        Space::Visible => check_dim("recovery point", point, ae.input_dim())?,
        Space::Latent => check_dim("latent point", point, ae.latent_dim())?,
    }
    check_dim("z_tilde", z_tilde, ae.latent_dim())?;
    if z_tilde.rows() != point.rows() {
        return Err(Error::config(format!(
            "{} points but {} latent targets",
            point.rows(),
            z_tilde.rows()
        )));
    }
    check_sigma(sigma, point.rows())?;
    if !(gamma >= 0.0) {
        return Err(Error::config(format!("gamma must be >= 0, got {gamma}")));
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn evaluate<E: Energy + ?Sized>(
    model: &E,
    ae: &Autoencoder,
    point: &Tensor,
    z_tilde: &Tensor,
    sigma: &[f64],
    gamma: f64,
    space: Space,
    with_grad: bool,
) -> Result<(Vec<f64>, Option<Tensor>)> {
    check_inputs(model, ae, point, z_tilde, sigma, gamma, space)?;
    let mut tape = Tape::new();
    let p = if with_grad {
        tape.input(point.clone())
    } else {
        tape.constant(point.clone())
    };
    let mv = model.bind(&mut tape, false);
    let av = ae.bind(&mut tape, false);
    let e = match space {
        Space::Visible => recovery_energy_on_tape(&mut tape, model, &mv, ae, &av, p, z_tilde, sigma, gamma)?,
        Space::Latent => latent_energy_on_tape(&mut tape, model, &mv, ae, &av, p, z_tilde, sigma, gamma)?,
    };
    let values = tape.value(e).to_vec();
    if !with_grad {
        return Ok((values, None));
    }
    let total = tape.sum(e)?;
    let g = tape.gradient(total, &[p])?.remove(0);
    Ok((values, Some(g)))
}

/// Per-sample recovery energy of `x` given latent targets `z_tilde`.
pub fn recovery_energy<E: Energy + ?Sized>(
    model: &E,
    ae: &Autoencoder,
    x: &Tensor,
    z_tilde: &Tensor,
    sigma: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    Ok(evaluate(model, ae, x, z_tilde, sigma, gamma, Space::Visible, false)?.0)
}

/// Per-sample latent pullback energy at latent points `z`.
pub fn latent_energy<E: Energy + ?Sized>(
    model: &E,
    ae: &Autoencoder,
    z: &Tensor,
    z_tilde: &Tensor,
    sigma: &[f64],
    gamma: f64,
) -> Result<Vec<f64>> {
    Ok(evaluate(model, ae, z, z_tilde, sigma, gamma, Space::Latent, false)?.0)
}

/// Energies and their gradient with respect to `point`, which lives in the
/// latent space or the input space according to `space`.
pub fn grad_recovery<E: Energy + ?Sized>(
    model: &E,
    ae: &Autoencoder,
    point: &Tensor,
    z_tilde: &Tensor,
    sigma: &[f64],
    gamma: f64,
    space: Space,
) -> Result<(Vec<f64>, Tensor)> {
    let (values, g) = evaluate(model, ae, point, z_tilde, sigma, gamma, space, true)?;
    Ok((values, g.expect("gradient requested")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nets::QuadraticEnergy;

    #[test]
    fn gamma_zero_is_plain_energy() {
        let model = QuadraticEnergy::new(&[0.5, -1.0]);
        let ae = Autoencoder::identity(2);
        let x = Tensor::new(2, 2, vec![1.0, 2.0, -0.3, 0.4]).unwrap();
        let zt = Tensor::new(2, 2, vec![5.0, 5.0, 5.0, 5.0]).unwrap();
        let r = recovery_energy(&model, &ae, &x, &zt, &[0.1, 0.2], 0.0).unwrap();
        assert_eq!(r, model.energy(&x).unwrap());
    }

    #[test]
    fn arithmetic_example() {
        // E(x) = 1.0 and ||z~ - f_e(x)||^2 = 0.04 with an identity encoder.
        let model = QuadraticEnergy::new(&[0.0]);
        let ae = Autoencoder::identity(1);
        let x = Tensor::scalar(2f64.sqrt());
        let zt = Tensor::scalar(2f64.sqrt() + 0.2);
        let r = recovery_energy(&model, &ae, &x, &zt, &[0.1], 1e-4).unwrap()[0];
        assert!((r - 1.0002).abs() < 1e-12, "{r}");
    }

    #[test]
    fn zero_residual_is_plain_energy() {
        let model = QuadraticEnergy::new(&[0.5, -1.0]);
        let ae = Autoencoder::identity(2);
        let x = Tensor::new(1, 2, vec![1.0, 2.0]).unwrap();
        let r = recovery_energy(&model, &ae, &x, &x, &[0.1], 0.7).unwrap();
        assert_eq!(r, model.energy(&x).unwrap());
    }

    #[test]
    fn nonpositive_sigma_rejected() {
        let model = QuadraticEnergy::new(&[0.0]);
        let ae = Autoencoder::identity(1);
        let x = Tensor::scalar(1.0);
        assert!(matches!(
            recovery_energy(&model, &ae, &x, &x, &[0.0], 1e-4),
            Err(Error::Config(_))
        ));
        assert!(recovery_energy(&model, &ae, &x, &x, &[-0.1], 0.0).is_err());
    }

    #[test]
    fn quadratic_term_gradient_matches_analytic_form() {
        // E = 0 model part is removed by subtracting the plain energy gradient.
        let model = QuadraticEnergy::new(&[0.0, 0.0]);
        let ae = Autoencoder::identity(2);
        let x = Tensor::new(1, 2, vec![0.3, -0.8]).unwrap();
        let zt = Tensor::new(1, 2, vec![0.1, 0.4]).unwrap();
        let (gamma, sigma) = (0.5, 0.2);
        let (_, g) = grad_recovery(&model, &ae, &x, &zt, &[sigma], gamma, Space::Visible).unwrap();
        let (_, g0) = model.energy_and_input_grad(&x).unwrap();
        for j in 0..2 {
            let analytic = -(gamma / (sigma * sigma)) * (zt.get(0, j) - x.get(0, j));
            assert!((g.get(0, j) - g0.get(0, j) - analytic).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_vanishes_at_minimum_with_zero_gamma() {
        let model = QuadraticEnergy::new(&[0.25, 0.75]);
        let ae = Autoencoder::identity(2);
        let x = Tensor::row_vector(&[0.25, 0.75]);
        let zt = Tensor::row_vector(&[3.0, 3.0]);
        let (_, g) = grad_recovery(&model, &ae, &x, &zt, &[0.1], 0.0, Space::Visible).unwrap();
        assert!(g.values().iter().all(|&v| v == 0.0));
    }
}
