//! Multilayer perceptrons, autoencoders and the two energy designs.
//!
//! Parameters of an [`Mlp`] are stored flat as `[w0, b0, w1, b1, ...]` with
//! `w_l` of shape `[fan_in, fan_out]` and `b_l` of shape `[1, fan_out]`, so a
//! layer computes `x w + b` on a row batch.

use rand::Rng as _;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffcore::{Activation, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::seeded_rng;

/// Transform applied after the last linear layer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputTransform {
    None,
    Sphere,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MlpSpec {
    /// Layer widths including the input: `[d_in, h1, ..., d_out]`.
    pub widths: Vec<usize>,
    pub hidden: Activation,
    pub output: OutputTransform,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, hidden: Activation, output: OutputTransform) -> Result<Self> {
        let spec = MlpSpec { widths, hidden, output };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::config(format!(
                "mlp needs at least one layer, widths {:?}",
                self.widths
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::config(format!(
                "mlp widths must be positive, got {:?}",
                self.widths
            )));
        }
        if self.hidden == Activation::Sigmoid {
            return Err(Error::config("hidden activation must be relu, leaky_relu or tanh"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Shapes of the flat parameter list.
    pub fn param_shapes(&self) -> Vec<[usize; 2]> {
        self.widths.windows(2).flat_map(|w| [[w[0], w[1]], [1, w[1]]]).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Fan-in uniform initialization: weights in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`,
    /// biases zero.
    pub fn init(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = seeded_rng(seed);
        let params = spec
            .param_shapes()
            .into_iter()
            .enumerate()
            .map(|(i, [r, c])| {
                if i % 2 == 1 {
                    return Tensor::zeros(r, c);
                }
                let bound = 1.0 / (r as f64).sqrt();
                let values = (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(r, c, values).expect("shape")
            })
            .collect();
        Ok(Mlp { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: Vec<Tensor>) -> Result<Self> {
        spec.validate()?;
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::config(format!(
                "mlp expects {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if *s != p.shape() {
                return Err(Error::config(format!(
                    "mlp parameter {i}: expected shape {s:?}, got {:?}",
                    p.shape()
                )));
            }
        }
        Ok(Mlp { spec, params })
    }

    /// Single linear layer with identity weights and no output transform.
    pub fn identity(dim: usize) -> Self {
        let spec = MlpSpec {
            widths: vec![dim, dim],
            hidden: Activation::LeakyRelu,
            output: OutputTransform::None,
        };
        Mlp {
            spec,
            params: vec![Tensor::identity(dim), Tensor::zeros(1, dim)],
        }
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim()
    }

    pub fn output_dim(&self) -> usize {
        self.spec.output_dim()
    }

    /// Puts the parameters on `tape`, tracked or as constants.
    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> Vec<Var> {
        bind_all(tape, self.params.iter(), tracked)
    }

    pub fn forward_on_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::config(format!(
                "mlp bound with {} tensors, expected {}",
                params.len(),
                self.params.len()
            )));
        }
        let n = self.spec.num_layers();
        let mut h = x;
        for (l, wb) in params.chunks(2).enumerate() {
            h = tape.matmul(h, wb[0])?;
            h = tape.add(h, wb[1])?;
            if l + 1 < n {
                h = tape.activation(h, self.spec.hidden)?;
            }
        }
        match self.spec.output {
            OutputTransform::None => Ok(h),
            OutputTransform::Sphere => tape.sphere_project(h),
            OutputTransform::Sigmoid => tape.activation(h, Activation::Sigmoid),
        }
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        check_dim("mlp input", x, self.input_dim())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = self.bind(&mut tape, false);
        let out = self.forward_on_tape(&mut tape, xv, &p)?;
        Ok(tape.value(out).clone())
    }
}

/// Divides `v` by its norm. Errors below [`crate::diffcore::SPHERE_EPS`].
pub fn sphere_project(v: &[f64]) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm >= crate::diffcore::SPHERE_EPS) {
        return Err(Error::DegenerateInput(format!(
            "cannot project vector of norm {norm:e} onto the sphere"
        )));
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Row-wise [`sphere_project`] of a batch.
pub fn sphere_project_rows(t: &Tensor) -> Result<Tensor> {
    let mut out = t.clone();
    let cols = t.cols();
    for (i, row) in out.values_mut().chunks_mut(cols).enumerate() {
        let p = sphere_project(row).map_err(|e| Error::DegenerateInput(format!("row {i}: {e}")))?;
        row.copy_from_slice(&p);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AutoencoderSpec {
    pub input_dim: usize,
    pub latent_dim: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub spherical: bool,
}

impl AutoencoderSpec {
    pub fn encoder_spec(&self) -> Result<MlpSpec> {
        let widths = std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.latent_dim))
            .collect();
        let output = if self.spherical {
            OutputTransform::Sphere
        } else {
            OutputTransform::None
        };
        MlpSpec::new(widths, self.activation, output)
    }

    pub fn decoder_spec(&self) -> Result<MlpSpec> {
        let widths = std::iter::once(self.latent_dim)
            .chain(self.hidden.iter().rev().copied())
            .chain(std::iter::once(self.input_dim))
            .collect();
        MlpSpec::new(widths, self.activation, OutputTransform::None)
    }
}

/// Encoder/decoder pair. When spherical, the encoder ends with a projection
/// onto the unit sphere of the latent space.
#[derive(Clone, Debug, PartialEq)]
pub struct Autoencoder {
    encoder: Mlp,
    decoder: Mlp,
}

/// Tape handles for the parameters of an [`Autoencoder`].
#[derive(Clone, Debug)]
pub struct AutoencoderVars {
    pub encoder: Vec<Var>,
    pub decoder: Vec<Var>,
}

impl Autoencoder {
    pub fn new(encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.output_dim() != decoder.input_dim() {
            return Err(Error::config(format!(
                "encoder emits {} latent dims but decoder takes {}",
                encoder.output_dim(),
                decoder.input_dim()
            )));
        }
        if encoder.input_dim() != decoder.output_dim() {
            return Err(Error::config(format!(
                "encoder takes {} dims but decoder emits {}",
                encoder.input_dim(),
                decoder.output_dim()
            )));
        }
        Ok(Autoencoder { encoder, decoder })
    }

    /// Encoder and decoder seeded from `seed` and `seed + 1`.
    pub fn init(spec: &AutoencoderSpec, seed: u64) -> Result<Self> {
        Autoencoder::new(
            Mlp::init(spec.encoder_spec()?, seed)?,
            Mlp::init(spec.decoder_spec()?, seed.wrapping_add(1))?,
        )
    }

    /// Identity encoder and decoder on a flat latent space.
    pub fn identity(dim: usize) -> Self {
        Autoencoder {
            encoder: Mlp::identity(dim),
            decoder: Mlp::identity(dim),
        }
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn decoder(&self) -> &Mlp {
        &self.decoder
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.input_dim()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.output_dim()
    }

    pub fn is_spherical(&self) -> bool {
        self.encoder.spec().output == OutputTransform::Sphere
    }

    pub fn params(&self) -> Vec<&Tensor> {
        self.encoder.params().iter().chain(self.decoder.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .params
            .iter_mut()
            .chain(self.decoder.params.iter_mut())
            .collect()
    }

    pub fn bind(&self, tape: &mut Tape, tracked: bool) -> AutoencoderVars {
        AutoencoderVars {
            encoder: self.encoder.bind(tape, tracked),
            decoder: self.decoder.bind(tape, tracked),
        }
    }

    pub fn encode_on_tape(&self, tape: &mut Tape, x: Var, vars: &AutoencoderVars) -> Result<Var> {
        self.encoder.forward_on_tape(tape, x, &vars.encoder)
    }

    pub fn decode_on_tape(&self, tape: &mut Tape, z: Var, vars: &AutoencoderVars) -> Result<Var> {
        self.decoder.forward_on_tape(tape, z, &vars.decoder)
    }

    /// Per-sample `||x - f_d(f_e(x))||^2` as an `n x 1` column.
    pub fn reconstruction_error_on_tape(&self, tape: &mut Tape, x: Var, vars: &AutoencoderVars) -> Result<Var> {
        let z = self.encode_on_tape(tape, x, vars)?;
        let xr = self.decode_on_tape(tape, z, vars)?;
        let r = tape.sub(x, xr)?;
        tape.row_sq_norm(r)
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        self.decoder.forward(z)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decode(&self.encode(x)?)
    }

    /// Per-sample squared reconstruction error.
    pub fn reconstruction_errors(&self, x: &Tensor) -> Result<Vec<f64>> {
        check_dim("autoencoder input", x, self.input_dim())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let vars = self.bind(&mut tape, false);
        let e = self.reconstruction_error_on_tape(&mut tape, xv, &vars)?;
        Ok(tape.value(e).to_vec())
    }

    pub fn checksum(&self) -> u64 {
        params_checksum(&self.params())
    }
}

/// Mean over the batch of `||x - f_d(f_e(x))||^2`.
pub fn reconstruction_loss(ae: &Autoencoder, x: &Tensor) -> Result<f64> {
    let errs = ae.reconstruction_errors(x)?;
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// A scalar energy `E(x)` differentiable on a [`Tape`].
pub trait Energy: Sync {
    fn input_dim(&self) -> usize;

    fn params(&self) -> Vec<&Tensor>;

    fn params_mut(&mut self) -> Vec<&mut Tensor>;

    /// Per-sample energies of the row batch `x` as an `n x 1` column.
    fn energy_on_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var>;

    fn bind(&self, tape: &mut Tape, tracked: bool) -> Vec<Var> {
        bind_all(tape, self.params().into_iter(), tracked)
    }

    fn energy(&self, x: &Tensor) -> Result<Vec<f64>> {
        check_dim("energy input", x, self.input_dim())?;
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let p = self.bind(&mut tape, false);
        let e = self.energy_on_tape(&mut tape, xv, &p)?;
        Ok(tape.value(e).to_vec())
    }

    /// Per-sample energies and `d E / d x` for every row.
    fn energy_and_input_grad(&self, x: &Tensor) -> Result<(Vec<f64>, Tensor)> {
        check_dim("energy input", x, self.input_dim())?;
        let mut tape = Tape::new();
        let xv = tape.input(x.clone());
        let p = self.bind(&mut tape, false);
        let e = self.energy_on_tape(&mut tape, xv, &p)?;
        let total = tape.sum(e)?;
        let g = tape.gradient(total, &[xv])?.remove(0);
        Ok((tape.value(e).to_vec(), g))
    }

    fn checksum(&self) -> u64 {
        params_checksum(&self.params())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EnergyKind {
    Scalar,
    Reconstruction,
}

/// The two energy designs: a network with a scalar head, or the squared
/// reconstruction error of a separate autoencoder.
#[derive(Clone, Debug, PartialEq)]
pub enum EnergyModel {
    Scalar(Mlp),
    Reconstruction(Autoencoder),
}

impl EnergyModel {
    pub fn scalar(mlp: Mlp) -> Result<Self> {
        if mlp.output_dim() != 1 || mlp.spec().output == OutputTransform::Sphere {
            return Err(Error::config(format!(
                "scalar energy needs a single unprojected output, got {} dims",
                mlp.output_dim()
            )));
        }
        Ok(EnergyModel::Scalar(mlp))
    }

    pub fn kind(&self) -> EnergyKind {
        match self {
            EnergyModel::Scalar(_) => EnergyKind::Scalar,
            EnergyModel::Reconstruction(_) => EnergyKind::Reconstruction,
        }
    }
}

impl Energy for EnergyModel {
    fn input_dim(&self) -> usize {
        match self {
            EnergyModel::Scalar(m) => m.input_dim(),
            EnergyModel::Reconstruction(ae) => ae.input_dim(),
        }
    }

    fn params(&self) -> Vec<&Tensor> {
        match self {
            EnergyModel::Scalar(m) => m.params().iter().collect(),
            EnergyModel::Reconstruction(ae) => ae.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            EnergyModel::Scalar(m) => m.params_mut().iter_mut().collect(),
            EnergyModel::Reconstruction(ae) => ae.params_mut(),
        }
    }

    fn energy_on_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        match self {
            EnergyModel::Scalar(m) => m.forward_on_tape(tape, x, params),
            EnergyModel::Reconstruction(ae) => {
                let split = ae.encoder().params().len();
                if params.len() != split + ae.decoder().params().len() {
                    return Err(Error::config("reconstruction energy bound with wrong arity"));
                }
                let vars = AutoencoderVars {
                    encoder: params[..split].to_vec(),
                    decoder: params[split..].to_vec(),
                };
                ae.reconstruction_error_on_tape(tape, x, &vars)
            }
        }
    }
}

/// `E(x) = ||x - mean||^2 / 2` with a learnable mean: a minimal correctly
/// specified model for a unit-variance Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticEnergy {
    mean: Tensor,
}

impl QuadraticEnergy {
    pub fn new(mean: &[f64]) -> Self {
        QuadraticEnergy {
            mean: Tensor::row_vector(mean),
        }
    }

    pub fn mean(&self) -> &[f64] {
        self.mean.values()
    }
}

impl Energy for QuadraticEnergy {
    fn input_dim(&self) -> usize {
        self.mean.cols()
    }

    fn params(&self) -> Vec<&Tensor> {
        vec![&self.mean]
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.mean]
    }

    fn energy_on_tape(&self, tape: &mut Tape, x: Var, params: &[Var]) -> Result<Var> {
        let d = tape.sub(x, params[0])?;
        let sq = tape.row_sq_norm(d)?;
        tape.scale(sq, 0.5)
    }
}

/// Stable 64-bit digest of parameter bit patterns.
pub fn params_checksum(params: &[&Tensor]) -> u64 {
    let mut h = Sha256::new();
    for p in params {
        for s in p.shape() {
            h.update((s as u64).to_le_bytes());
        }
        for v in p.values() {
            h.update(v.to_le_bytes());
        }
    }
    let digest = h.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn bind_all<'a>(tape: &mut Tape, params: impl Iterator<Item = &'a Tensor>, tracked: bool) -> Vec<Var> {
    params
        .map(|p| {
            if tracked {
                tape.input(p.clone())
            } else {
                tape.constant(p.clone())
            }
        })
        .collect()
}

pub(crate) fn check_dim(what: &str, x: &Tensor, expected: usize) -> Result<()> {
    if x.cols() != expected {
        return Err(Error::config(format!(
            "{what}: expected {expected} columns, found {}",
            x.cols()
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(widths: Vec<usize>) -> MlpSpec {
        MlpSpec::new(widths, Activation::LeakyRelu, OutputTransform::None).unwrap()
    }

    #[test]
    fn init_is_reproducible_and_seed_sensitive() {
        let a = Mlp::init(spec(vec![3, 5, 2]), 11).unwrap();
        let b = Mlp::init(spec(vec![3, 5, 2]), 11).unwrap();
        let c = Mlp::init(spec(vec![3, 5, 2]), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert!(a.params()[1].values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn init_respects_fan_in_bound() {
        let m = Mlp::init(spec(vec![4, 1]), 3).unwrap();
        assert!(m.params()[0].values().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn spec_validation() {
        assert!(MlpSpec::new(vec![3], Activation::Relu, OutputTransform::None).is_err());
        assert!(MlpSpec::new(vec![3, 0, 1], Activation::Relu, OutputTransform::None).is_err());
        assert!(MlpSpec::new(vec![3, 1], Activation::Sigmoid, OutputTransform::None).is_err());
    }

    #[test]
    fn sphere_projection_cases() {
        let p = sphere_project(&[3.0, 4.0]).unwrap();
        assert!((p[0] - 0.6).abs() < 1e-15 && (p[1] - 0.8).abs() < 1e-15);
        let u = [0.0, 1.0, 0.0];
        assert_eq!(sphere_project(&u).unwrap(), u.to_vec());
        assert!(matches!(sphere_project(&[0.0, 0.0]), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn identity_reconstruction_energy_is_zero() {
        let e = EnergyModel::Reconstruction(Autoencoder::identity(3));
        let x = Tensor::new(2, 3, vec![1.0, -2.0, 0.5, 3.0, 0.0, 7.0]).unwrap();
        assert_eq!(e.energy(&x).unwrap(), vec![0.0, 0.0]);
        let ae = Autoencoder::identity(3);
        assert_eq!(reconstruction_loss(&ae, &x).unwrap(), 0.0);
    }

    #[test]
    fn zero_scalar_network_has_zero_energy() {
        let s = spec(vec![2, 4, 1]);
        let zeros = s.param_shapes().into_iter().map(|[r, c]| Tensor::zeros(r, c)).collect();
        let e = EnergyModel::scalar(Mlp::from_params(s, zeros).unwrap()).unwrap();
        let x = Tensor::new(2, 2, vec![1.0, -5.0, 3.0, 2.0]).unwrap();
        assert_eq!(e.energy(&x).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn reconstruction_energy_matches_direct_loop() {
        let aes = AutoencoderSpec {
            input_dim: 3,
            latent_dim: 2,
            hidden: vec![5],
            activation: Activation::Tanh,
            spherical: true,
        };
        let ae = Autoencoder::init(&aes, 5).unwrap();
        let x = Tensor::new(2, 3, vec![0.1, -0.4, 0.9, 1.5, 0.2, -0.7]).unwrap();
        let xr = ae.reconstruct(&x).unwrap();
        let energy = EnergyModel::Reconstruction(ae.clone()).energy(&x).unwrap();
        for (i, e) in energy.iter().enumerate() {
            let mut direct = 0.0;
            for j in 0..3 {
                let d = x.get(i, j) - xr.get(i, j);
                direct += d * d;
            }
            assert!((e - direct).abs() < 1e-12);
        }
        // batch of one equals its per-sample error
        let one = x.select_rows(&[1]);
        assert!((reconstruction_loss(&ae, &one).unwrap() - energy[1]).abs() < 1e-12);
    }

    #[test]
    fn spherical_encoder_outputs_unit_norm() {
        let aes = AutoencoderSpec {
            input_dim: 4,
            latent_dim: 3,
            hidden: vec![8, 8],
            activation: Activation::LeakyRelu,
            spherical: true,
        };
        let ae = Autoencoder::init(&aes, 9).unwrap();
        let x = Tensor::new(3, 4, (0..12).map(|i| i as f64 * 0.3 - 1.0).collect()).unwrap();
        for n in ae.encode(&x).unwrap().row_norms() {
            assert!((n - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dimension_mismatch_is_config_error() {
        let e = EnergyModel::Reconstruction(Autoencoder::identity(3));
        assert!(matches!(e.energy(&Tensor::zeros(1, 2)), Err(Error::Config(_))));
        assert!(Autoencoder::new(Mlp::identity(2), Mlp::identity(3)).is_err());
    }
}
