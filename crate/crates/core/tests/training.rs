use mpdr::diffcore::{Adam, AdamConfig, Tensor};
use mpdr::nets::QuadraticEnergy;
use mpdr::sampler::SamplerConfig;
use mpdr::trainer::{mpdr_step, MpdrTrainConfig, NegativeSampler, Regularization};
use mpdr::{seeded_rng, Rng};

/// Always returns the same negatives.
struct Fixed(Tensor);

impl NegativeSampler<QuadraticEnergy> for Fixed {
    fn negatives(&mut self, _: &QuadraticEnergy, _: &Tensor, _: &mut Rng) -> mpdr::Result<Tensor> {
        Ok(self.0.clone())
    }
}

fn rows(v: &[[f64; 2]]) -> Tensor {
    Tensor::from_rows(&v.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

/// The loss gradient for `E = ||x - mu||^2 / 2`, written out by hand.
fn hand_gradient(mu: [f64; 2], x: &[[f64; 2]], xn: &[[f64; 2]], reg: Regularization, coef: f64) -> [f64; 2] {
    let e = |r: &[f64; 2]| 0.5 * ((r[0] - mu[0]).powi(2) + (r[1] - mu[1]).powi(2));
    let mut g = [0.0; 2];
    for j in 0..2 {
        // d E(r) / d mu_j = mu_j - r_j
        let dp: f64 = x.iter().map(|r| mu[j] - r[j]).sum::<f64>() / x.len() as f64;
        let dn: f64 = xn.iter().map(|r| mu[j] - r[j]).sum::<f64>() / xn.len() as f64;
        g[j] = dp - dn;
        let sq_n: f64 = xn.iter().map(|r| 2.0 * e(r) * (mu[j] - r[j])).sum::<f64>() / xn.len() as f64;
        let sq_p: f64 = x.iter().map(|r| 2.0 * e(r) * (mu[j] - r[j])).sum::<f64>() / x.len() as f64;
        g[j] += coef
            * match reg {
                Regularization::None => 0.0,
                Regularization::Reconstruction => sq_n,
                Regularization::Scalar => sq_n + sq_p,
            };
    }
    g
}

fn check_adam(reg: Regularization, coef: f64) {
    let x = [[0.3, -0.2], [1.1, 0.4], [-0.5, 0.9]];
    let xn = [[2.0, 1.0], [-1.5, 0.5], [0.7, -2.2], [0.1, 0.1]];
    let (lr, b1, b2, eps) = (0.05, 0.9, 0.999, 1e-8);
    let cfg = MpdrTrainConfig {
        epochs: 1,
        batch_size: 3,
        lr,
        regularization: reg,
        reg_coef: coef,
        sampler: SamplerConfig::default(),
        seed: 0,
    };
    let mut model = QuadraticEnergy::new(&[0.2, -0.4]);
    let mut opt = Adam::new(
        AdamConfig {
            lr,
            beta1: b1,
            beta2: b2,
            eps,
        },
        &[&Tensor::zeros(1, 2)],
    );
    let mut sampler = Fixed(rows(&xn));
    let batch = rows(&x);
    let mut rng = seeded_rng(0);

    let mut mu = [0.2, -0.4];
    let (mut m, mut v) = ([0.0; 2], [0.0; 2]);
    for t in 1..=5 {
        let g = hand_gradient(mu, &x, &xn, reg, coef);
        for j in 0..2 {
            m[j] = b1 * m[j] + (1.0 - b1) * g[j];
            v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
            let mh = m[j] / (1.0 - b1.powi(t));
            let vh = v[j] / (1.0 - b2.powi(t));
            mu[j] -= lr * mh / (vh.sqrt() + eps);
        }
        mpdr_step(&mut model, &mut sampler, &batch, &cfg, &mut opt, &mut rng).unwrap();
        for j in 0..2 {
            assert!(
                (model.mean()[j] - mu[j]).abs() < 1e-10,
                "step {t} ({reg:?}): {:?} vs {mu:?}",
                model.mean()
            );
        }
    }
}

#[test]
fn adam_matches_hand_assembled_updates_without_regularization() {
    check_adam(Regularization::None, 0.0);
}

#[test]
fn adam_matches_hand_assembled_updates_with_negative_regularization() {
    check_adam(Regularization::Reconstruction, 0.3);
}

#[test]
fn adam_matches_hand_assembled_updates_with_both_sided_regularization() {
    check_adam(Regularization::Scalar, 0.3);
}

/// The reconstruction-energy run of `configs/density2d.toml`, validated
/// against points drawn uniformly over the plotting domain.
#[test]
fn density_run_raises_validation_auroc() {
    use mpdr::data::make_eight_gaussians;
    use mpdr::diffcore::Activation;
    use mpdr::manifold::{pretrain_autoencoder, ManifoldEnsemble, PretrainConfig, SigmaRange};
    use mpdr::nets::{AutoencoderSpec, EnergyModel};
    use mpdr::recovery::{RecoveryConfig, Space};
    use mpdr::sampler::ChainSpec;
    use mpdr::trainer::{train, Validation};
    use rand::Rng as _;

    let data = make_eight_gaussians(4000, 2.0, 0.25, 1).unwrap().into_rows();
    let ae = |hidden: Vec<usize>, spherical| AutoencoderSpec {
        input_dim: 2,
        latent_dim: 2,
        hidden,
        activation: Activation::LeakyRelu,
        spherical,
    };
    let pcfg = |epochs| PretrainConfig {
        epochs,
        batch_size: 128,
        lr: 1e-3,
        weight_decay_enc: 0.0,
        seed: 3,
    };
    let mpd = pretrain_autoencoder(&data, &ae(vec![128, 128], true), &pcfg(40))
        .unwrap()
        .autoencoder;
    let ensemble = ManifoldEnsemble::new(vec![mpd], SigmaRange::default()).unwrap();
    let mut model = EnergyModel::Reconstruction(
        pretrain_autoencoder(&data, &ae(vec![64, 64, 64], false), &pcfg(20))
            .unwrap()
            .autoencoder,
    );

    let mut rng = seeded_rng(99);
    let uniform: Vec<f64> = (0..1024).map(|_| rng.random_range(-4.0..4.0)).collect();
    let validation = Validation {
        inliers: data.select_rows(&(0..512).collect::<Vec<_>>()),
        outliers: Tensor::new(512, 2, uniform).unwrap(),
    };
    let cfg = MpdrTrainConfig {
        epochs: 30,
        batch_size: 128,
        lr: 1e-3,
        regularization: Regularization::Reconstruction,
        reg_coef: 0.05,
        sampler: SamplerConfig {
            latent: ChainSpec::new(Space::Latent, 5, 0.1, 0.02).unwrap(),
            visible: ChainSpec::new(Space::Visible, 40, 0.02, 0.2).unwrap(),
            recovery: RecoveryConfig::default(),
            reproject_latent: true,
        },
        seed: 11,
    };
    let history = train(&mut model, &ensemble, &data, &cfg, Some(&validation)).unwrap();
    let first = history.epochs[0].val_auroc.unwrap();
    let last = history.epochs.last().unwrap().val_auroc.unwrap();
    println!("validation auroc {first:.4} -> {last:.4}");
    assert!(last > first, "validation auroc fell from {first} to {last}");
}
