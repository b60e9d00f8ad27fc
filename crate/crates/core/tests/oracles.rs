//! Statistical and arithmetic checks against independently computed values.

use std::f64::consts::PI;

use mpdr::data::{
    make_eight_gaussians, make_manifold_benchmark, preprocess, true_density_eight_gaussians, Dataset, ManifoldKind,
    PreprocessOp,
};
use mpdr::diffcore::{Activation, Tensor};
use mpdr::manifold::{pretrain_autoencoder, sample_sigma, ManifoldEnsemble, PretrainConfig, SigmaRange};
use mpdr::metrics::{density_l1_from_energies, DensityGrid};
use mpdr::nets::{Autoencoder, AutoencoderSpec, Energy, QuadraticEnergy};
use mpdr::recovery::{recovery_energy, RecoveryConfig, Space};
use mpdr::sampler::{latent_chain, two_stage_sample, visible_chain, ChainSpec, SamplerConfig};
use mpdr::seeded_rng;
use proptest::prelude::*;

fn mixture_density(x: f64, y: f64, radius: f64, std: f64) -> f64 {
    let mut total = 0.0;
    for k in 0..8 {
        let a = k as f64 * PI / 4.0;
        let (dx, dy) = (x - radius * a.cos(), y - radius * a.sin());
        total += (-(dx * dx + dy * dy) / (2.0 * std * std)).exp() / (2.0 * PI * std * std);
    }
    total / 8.0
}

fn mean_and_var(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count() as f64;
    let mean = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var)
}

#[test]
fn eight_gaussians_are_centred() {
    let n = 100_000;
    let (radius, std) = (2.0, 0.1);
    let ds = make_eight_gaussians(n, radius, std, 21).unwrap();
    for j in 0..2 {
        let (mean, _) = mean_and_var((0..n).map(|i| ds.rows().get(i, j)));
        // each coordinate has variance radius^2 / 2 + std^2 over the eight means
        let se = ((radius * radius / 2.0 + std * std) / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se, "column {j}: mean {mean}, se {se}");
    }
}

#[test]
fn mixture_density_matches_a_direct_sum() {
    let (radius, std) = (2.0, 0.5);
    let pts = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 0.0], vec![-1.2, 1.7], vec![3.5, -3.5]]).unwrap();
    let got = true_density_eight_gaussians(&pts, radius, std).unwrap();
    for (i, g) in got.iter().enumerate() {
        let want = mixture_density(pts.get(i, 0), pts.get(i, 1), radius, std);
        assert!((g - want).abs() < 1e-12, "point {i}: {g} vs {want}");
    }
    // at a mean the own component dominates; the two neighbours add about 2%
    let own = 1.0 / 8.0 / (2.0 * PI * std * std);
    assert!((got[0] - own).abs() / own < 0.05);
}

#[test]
fn mixture_density_integrates_to_one() {
    let grid = DensityGrid::new(-6.0, 6.0, 600).unwrap();
    let d = true_density_eight_gaussians(&grid.points(), 2.0, 0.25).unwrap();
    let mass = d.iter().sum::<f64>() * grid.cell_area();
    assert!((mass - 1.0).abs() < 1e-3, "mass {mass}");
}

#[test]
fn constant_energy_error_is_total_variation_to_the_mixture() {
    let grid = DensityGrid::default();
    let pts = grid.points();
    let truth = true_density_eight_gaussians(&pts, 2.0, 0.25).unwrap();
    let got = density_l1_from_energies(&vec![3.7; grid.len()], &truth, grid.cell_area()).unwrap();

    let step = (grid.hi - grid.lo) / grid.resolution as f64;
    let centre = |i: usize| grid.lo + (i as f64 + 0.5) * step;
    let mut p = Vec::new();
    for ix in 0..grid.resolution {
        for iy in 0..grid.resolution {
            p.push(mixture_density(centre(ix), centre(iy), 2.0, 0.25));
        }
    }
    let area = step * step;
    let z: f64 = p.iter().sum::<f64>() * area;
    let uniform = 1.0 / (grid.len() as f64 * area);
    let want: f64 = p.iter().map(|v| (uniform - v / z).abs() * area).sum();
    assert!((got - want).abs() < 1e-12, "{got} vs {want}");
}

#[test]
fn sigma_draws_have_the_uniform_mean() {
    let n = 100_000;
    let s = sample_sigma(SigmaRange::new(0.05, 0.3).unwrap(), &mut seeded_rng(5), n).unwrap();
    let (mean, _) = mean_and_var(s.iter().copied());
    let se = 0.25 / 12f64.sqrt() / (n as f64).sqrt();
    assert!((mean - 0.175).abs() < 4.0 * se, "mean {mean}, se {se}");
}

#[test]
fn circle_inliers_sit_near_the_unit_circle() {
    for dim in [2, 16] {
        let ds = make_manifold_benchmark(ManifoldKind::Circle, dim, 2000, 0, 3).unwrap();
        let mean_gap = ds.rows().row_norms().iter().map(|r| (r - 1.0).abs()).sum::<f64>() / 2000.0;
        assert!(mean_gap < 0.05, "dim {dim}: {mean_gap}");
    }
}

#[test]
fn added_noise_has_the_requested_variance() {
    let n = 100_000;
    let ds = Dataset::new(Tensor::zeros(n, 2), None, "zeros").unwrap();
    let (out, _) = preprocess(&ds, &[PreprocessOp::AddGaussianNoise(0.01)], 8).unwrap();
    for j in 0..2 {
        let (_, var) = mean_and_var((0..n).map(|i| out.rows().get(i, j)));
        assert!((var - 1e-4).abs() < 0.05 * 1e-4, "column {j}: {var}");
    }
}

#[test]
fn pretraining_on_eight_gaussians_lowers_the_loss() {
    let x = make_eight_gaussians(512, 2.0, 0.25, 2).unwrap().into_rows();
    let spec = AutoencoderSpec {
        input_dim: 2,
        latent_dim: 2,
        hidden: vec![32],
        activation: Activation::LeakyRelu,
        spherical: true,
    };
    let cfg = PretrainConfig {
        epochs: 200,
        batch_size: 128,
        lr: 1e-4,
        weight_decay_enc: 0.0,
        seed: 6,
    };
    let rep = pretrain_autoencoder(&x, &spec, &cfg).unwrap();
    assert_eq!(rep.epoch_losses.len(), 200);
    assert!(
        rep.final_loss() < rep.initial_loss,
        "{} -> {}",
        rep.initial_loss,
        rep.final_loss()
    );
}

#[test]
fn identity_manifold_without_latent_chain_is_gaussian_recovery() {
    let ens = ManifoldEnsemble::new(vec![Autoencoder::identity(3)], SigmaRange::default()).unwrap();
    let model = QuadraticEnergy::new(&[0.2, -0.1, 0.4]);
    let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3], vec![-1.0, 0.5, 2.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let sigma = [0.1, 0.2, 0.3];
    let cfg = SamplerConfig {
        latent: ChainSpec::disabled(Space::Latent),
        visible: ChainSpec::disabled(Space::Visible),
        recovery: RecoveryConfig::new(1e-4, 1e-4).unwrap(),
        reproject_latent: true,
    };
    let out = two_stage_sample(&model, &ens, &x, &sigma, &cfg, &mut seeded_rng(3)).unwrap();
    let p = &out.perturbations[0];
    assert_eq!(p.z, x);
    assert_eq!(out.x0_minus, p.z_tilde);
    assert_eq!(out.x_minus, p.z_tilde);

    // the recovery energy is then E(x) + gamma / (2 sigma^2) ||x - x~||^2
    let y = Tensor::from_rows(&[vec![0.3, 0.3, 0.3], vec![1.0, -1.0, 0.0], vec![2.0, 0.5, -0.5]]).unwrap();
    let got = recovery_energy(&model, &ens.autoencoders()[0], &y, &p.z_tilde, &sigma, 1e-4).unwrap();
    let plain = model.energy(&y).unwrap();
    for i in 0..3 {
        let d2: f64 = (0..3).map(|j| (y.get(i, j) - p.z_tilde.get(i, j)).powi(2)).sum();
        let want = plain[i] + 1e-4 / (2.0 * sigma[i] * sigma[i]) * d2;
        assert!((got[i] - want).abs() < 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn noiseless_latent_chain_descends_the_pullback(seed in 0u64..1000, steps in 1usize..20, step in 0.005f64..0.2) {
        let ae = Autoencoder::identity(2);
        let model = QuadraticEnergy::new(&[1.0, -0.5]);
        let zt = Tensor::new(4, 2, (0..8).map(|i| ((seed + i) % 7) as f64 - 3.0).collect()).unwrap();
        let spec = ChainSpec::new(Space::Latent, steps, step, 0.0).unwrap();
        let cfg = RecoveryConfig::new(1e-4, 1e-4).unwrap();
        let out = latent_chain(&model, &ae, &zt, &spec, &cfg, &[0.1; 4], &mut seeded_rng(seed)).unwrap();
        for (s, e) in out.energy_start.iter().zip(&out.energy_end) {
            prop_assert!(e <= s);
        }
    }

    #[test]
    fn noiseless_visible_chain_descends(seed in 0u64..1000, steps in 1usize..20, step in 0.005f64..0.5) {
        let ae = Autoencoder::identity(2);
        let model = QuadraticEnergy::new(&[0.0, 2.0]);
        let x0 = Tensor::new(3, 2, (0..6).map(|i| ((seed * 3 + i) % 11) as f64 / 2.0 - 2.5).collect()).unwrap();
        let zt = x0.map(|v| v + 0.1);
        let spec = ChainSpec::new(Space::Visible, steps, step, 0.0).unwrap();
        let cfg = RecoveryConfig::new(1e-4, 1e-4).unwrap();
        let out = visible_chain(&model, &ae, &x0, &zt, &spec, &cfg, &[0.2; 3], &mut seeded_rng(seed)).unwrap();
        for (s, e) in out.energy_start.iter().zip(&out.energy_end) {
            prop_assert!(e <= s);
        }
    }
}
