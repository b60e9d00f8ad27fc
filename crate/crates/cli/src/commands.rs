//! The five commands. Each returns the records it printed, in order.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mpdr::checkpoint::Checkpoint;
use mpdr::data::{
    load_csv, make_eight_gaussians, make_manifold_benchmark, preprocess, true_density_eight_gaussians, write_csv,
    Dataset, LabelColumn, Preprocessing, EIGHT_GAUSSIANS_RADIUS, EIGHT_GAUSSIANS_STD,
};
use mpdr::diffcore::Tensor;
use mpdr::manifold::{pretrain_autoencoder, sample_sigma, ManifoldEnsemble, PretrainConfig};
use mpdr::metrics::{aupr, auroc, density_l1_from_energies, normalized_density, pauroc, ScoredSamples};
use mpdr::nets::{Energy, EnergyKind, EnergyModel, Mlp, MlpSpec, OutputTransform};
use mpdr::sampler::two_stage_sample;
use mpdr::seeded_rng;
use mpdr::trainer::{manifold_uniform_samples, reconstruction_energy_from_ensemble, train, Validation};

use crate::config::{self, sub_seed, LoadedConfig, SourceKind, Stream};
use crate::record::{format_f64, Record};
use crate::CliError;

pub const HISTORY_FILE: &str = "history.txt";
pub const ENERGY_FILE: &str = "energy.ckpt";
pub const PRETRAIN_LOG: &str = "pretrain.log";
pub const EVAL_FILE: &str = "eval.txt";
pub const GRID_FILE: &str = "grid.csv";
pub const DENSITY_FILE: &str = "density.txt";
pub const NEGATIVES_FILE: &str = "negatives.csv";
pub const SAMPLE_FILE: &str = "sample.txt";

pub fn autoencoder_file(i: usize) -> String {
    format!("ae_{i}.ckpt")
}

/// Flags shared by all commands.
#[derive(Clone, Debug, Default)]
pub struct Options {
    pub config: PathBuf,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub label_col: Option<LabelColumn>,
    /// Energy checkpoint for eval, density-grid and sample.
    pub model: Option<PathBuf>,
    pub inliers: Option<PathBuf>,
    pub outliers: Option<PathBuf>,
    pub no_latent_reproject: bool,
}

struct Context {
    loaded: LoadedConfig,
    out: PathBuf,
    label_col: Option<LabelColumn>,
}

impl Context {
    fn new(opts: &Options) -> Result<Self, CliError> {
        let loaded = config::load(
            &opts.config,
            config::Overrides {
                seed: opts.seed,
                label_col: opts.label_col,
                no_latent_reproject: opts.no_latent_reproject,
            },
        )?;
        let out = match &opts.out {
            Some(p) => p.clone(),
            None => resolve(&loaded.base_dir, &loaded.config.output.dir),
        };
        Ok(Context {
            loaded,
            out,
            label_col: opts.label_col,
        })
    }

    fn cfg(&self) -> &config::ExperimentConfig {
        &self.loaded.config
    }

    fn hash(&self) -> &str {
        &self.loaded.hash
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn ensure_out(&self) -> Result<(), CliError> {
        std::fs::create_dir_all(&self.out)
            .map_err(|e| CliError::new("E_IO", format!("cannot create {}: {e}", self.out.display())))
    }

    fn label_col(&self) -> LabelColumn {
        self.label_col.or(self.cfg().data.label_col).unwrap_or_default()
    }

    fn load_ensemble(&self, dim: usize) -> Result<ManifoldEnsemble, CliError> {
        let mut aes = Vec::with_capacity(self.cfg().autoencoder.len());
        for i in 0..self.cfg().autoencoder.len() {
            let ae = Checkpoint::load(self.out_file(&autoencoder_file(i)))?.autoencoder()?;
            check_dims(&format!("autoencoder {i}"), dim, ae.input_dim())?;
            aes.push(ae);
        }
        Ok(ManifoldEnsemble::new(aes, self.cfg().sigma_range()?)?)
    }

    fn energy_checkpoint(&self, model: &Option<PathBuf>) -> Result<Checkpoint, CliError> {
        let path = model.clone().unwrap_or_else(|| self.out_file(ENERGY_FILE));
        Ok(Checkpoint::load(path)?)
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_relative() {
        base.join(p)
    } else {
        p.to_path_buf()
    }
}

fn check_dims(what: &str, expected: usize, found: usize) -> Result<(), CliError> {
    if expected != found {
        return Err(CliError::new(
            "E_DIM",
            format!("dimension mismatch for {what}: expected {expected}, found {found}"),
        ));
    }
    Ok(())
}

fn write_text(path: &Path, records: &[Record]) -> Result<(), CliError> {
    let mut s = String::new();
    for r in records {
        writeln!(s, "{r}").expect("string write");
    }
    std::fs::write(path, s).map_err(|e| CliError::new("E_IO", format!("cannot write {}: {e}", path.display())))
}

struct Splits {
    train: Dataset,
    test_inliers: Option<Dataset>,
    test_outliers: Option<Dataset>,
    /// Mixture parameters when the true density is known.
    truth: Option<(f64, f64)>,
}

fn load_data(ctx: &Context) -> Result<Splits, CliError> {
    let d = &ctx.cfg().data;
    let seed = ctx.cfg().data_seed();
    match d.source {
        SourceKind::EightGaussians => {
            let radius = d.radius.unwrap_or(EIGHT_GAUSSIANS_RADIUS);
            let std = d.std.unwrap_or(EIGHT_GAUSSIANS_STD);
            let train = make_eight_gaussians(d.n.unwrap_or_default(), radius, std, seed)?;
            let test_inliers = match d.n_test {
                Some(n) if n > 0 => Some(make_eight_gaussians(n, radius, std, seed.wrapping_add(1))?),
                _ => None,
            };
            Ok(Splits {
                train,
                test_inliers,
                test_outliers: None,
                truth: Some((radius, std)),
            })
        }
        SourceKind::ManifoldBenchmark => {
            let n_train = d.n_train.unwrap_or_default();
            let n_test = d.n_test.unwrap_or(0);
            let n_out = d.n_outliers.unwrap_or(0);
            let kind = d.manifold.expect("validated");
            let ds = make_manifold_benchmark(kind, d.dim.unwrap_or_default(), n_train + n_test, n_out, seed)?;
            let idx: Vec<usize> = (0..ds.len()).collect();
            let part = |range: std::ops::Range<usize>, name: &str| -> Result<Option<Dataset>, CliError> {
                if range.is_empty() {
                    return Ok(None);
                }
                Ok(Some(ds.select(&idx[range], format!("{} {name}", ds.meta))?))
            };
            Ok(Splits {
                train: part(0..n_train, "train")?.expect("n_train > 0"),
                test_inliers: part(n_train..n_train + n_test, "test inliers")?,
                test_outliers: part(n_train + n_test..ds.len(), "test outliers")?,
                truth: None,
            })
        }
        SourceKind::Csv => {
            let base = &ctx.loaded.base_dir;
            let label_col = ctx.label_col();
            let load = |p: &Option<PathBuf>| -> Result<Option<Dataset>, CliError> {
                p.as_ref()
                    .map(|p| load_csv(resolve(base, p), label_col).map_err(CliError::from))
                    .transpose()
            };
            Ok(Splits {
                train: load(&d.train)?.expect("validated"),
                test_inliers: load(&d.test_inliers)?,
                test_outliers: load(&d.test_outliers)?,
                truth: None,
            })
        }
    }
}

fn prepared_train(ctx: &Context, splits: &Splits) -> Result<(Tensor, Preprocessing), CliError> {
    let (ds, fitted) = preprocess(&splits.train, &ctx.cfg().data.preprocess, ctx.cfg().data_seed())?;
    Ok((ds.into_rows(), fitted))
}

pub fn pretrain_ae(opts: &Options) -> Result<Vec<Record>, CliError> {
    let ctx = Context::new(opts)?;
    let splits = load_data(&ctx)?;
    let (train_x, fitted) = prepared_train(&ctx, &splits)?;
    ctx.ensure_out()?;
    let mut records = Vec::new();
    for (i, sec) in ctx.cfg().autoencoder.iter().enumerate() {
        let spec = sec.spec(train_x.cols());
        let report = pretrain_autoencoder(&train_x, &spec, &sec.pretrain(ctx.cfg().autoencoder_seed(i)))?;
        records.push(
            Record::new("pretrain")
                .count("ae", i)
                .count("epoch", 0)
                .num("loss", report.initial_loss),
        );
        for (e, loss) in report.epoch_losses.iter().enumerate() {
            records.push(
                Record::new("pretrain")
                    .count("ae", i)
                    .count("epoch", e + 1)
                    .num("loss", *loss),
            );
        }
        let ckpt = Checkpoint::from_autoencoder(&report.autoencoder, fitted.clone(), ctx.hash());
        let file = autoencoder_file(i);
        ckpt.save(ctx.out_file(&file))?;
        records.push(
            Record::new("checkpoint")
                .text("file", &file)
                .count("parameters", ckpt.parameters().len())
                .text("config_hash", ctx.hash()),
        );
    }
    write_text(&ctx.out_file(PRETRAIN_LOG), &records)?;
    Ok(records)
}

fn build_energy(
    ctx: &Context,
    ensemble: &ManifoldEnsemble,
    train_x: &Tensor,
) -> Result<(EnergyModel, &'static str), CliError> {
    let e = &ctx.cfg().energy;
    let dim = train_x.cols();
    match e.kind {
        EnergyKind::Scalar => {
            let mut widths = vec![dim];
            widths.extend(&e.hidden);
            widths.push(1);
            let spec = MlpSpec::new(widths, e.activation, OutputTransform::None)?;
            Ok((EnergyModel::scalar(Mlp::init(spec, ctx.cfg().energy_seed())?)?, "init"))
        }
        EnergyKind::Reconstruction => {
            let spec = mpdr::nets::AutoencoderSpec {
                input_dim: dim,
                latent_dim: e.latent_dim.unwrap_or(ctx.cfg().autoencoder[0].latent_dim),
                hidden: e.hidden.clone(),
                activation: e.activation,
                spherical: e.spherical,
            };
            if let Some(m) = reconstruction_energy_from_ensemble(ensemble, &spec)? {
                return Ok((m, "copy"));
            }
            let pcfg = PretrainConfig {
                epochs: e.pretrain_epochs,
                batch_size: ctx.cfg().train.batch_size,
                lr: e.pretrain_lr,
                weight_decay_enc: 0.0,
                seed: ctx.cfg().energy_seed(),
            };
            let report = pretrain_autoencoder(train_x, &spec, &pcfg)?;
            Ok((EnergyModel::Reconstruction(report.autoencoder), "pretrained"))
        }
    }
}

pub fn train_cmd(opts: &Options) -> Result<Vec<Record>, CliError> {
    let ctx = Context::new(opts)?;
    let splits = load_data(&ctx)?;
    let (train_x, fitted) = prepared_train(&ctx, &splits)?;
    let ensemble = ctx.load_ensemble(train_x.cols())?;
    let (mut model, init) = build_energy(&ctx, &ensemble, &train_x)?;
    let tcfg = ctx.cfg().train_config(model.kind())?;
    let v = ctx.cfg().train.validation;
    let validation = if v > 0 {
        let mut rng = seeded_rng(sub_seed(ctx.cfg().seed, Stream::Validation));
        let idx: Vec<usize> = (0..v.min(train_x.rows())).collect();
        Some(Validation {
            inliers: train_x.select_rows(&idx),
            outliers: manifold_uniform_samples(&ensemble.autoencoders()[0], &train_x, v, &mut rng)?,
        })
    } else {
        None
    };
    let checksums = ensemble.checksums();
    let history = train(&mut model, &ensemble, &train_x, &tcfg, validation.as_ref())?;
    if ensemble.checksums() != checksums {
        return Err(CliError::new(
            "E_CONTRACT",
            "ensemble parameters changed during training",
        ));
    }
    ctx.ensure_out()?;
    let mut lines = Vec::with_capacity(history.epochs.len());
    for r in &history.epochs {
        let mut rec = Record::new("epoch")
            .count("epoch", r.epoch)
            .num("loss", r.loss)
            .num("pos_energy", r.pos_energy)
            .num("neg_energy", r.neg_energy);
        if let Some(a) = r.val_auroc {
            rec = rec.num("val_auroc", a);
        }
        lines.push(rec);
    }
    write_text(&ctx.out_file(HISTORY_FILE), &lines)?;
    let ckpt = Checkpoint::from_energy(&model, fitted, ctx.hash());
    ckpt.save(ctx.out_file(ENERGY_FILE))?;
    lines.push(
        Record::new("checkpoint")
            .text("file", ENERGY_FILE)
            .text("init", init)
            .count("parameters", ckpt.parameters().len())
            .text("config_hash", ctx.hash()),
    );
    Ok(lines)
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn eval(opts: &Options) -> Result<Vec<Record>, CliError> {
    let ctx = Context::new(opts)?;
    let ckpt = ctx.energy_checkpoint(&opts.model)?;
    let model = ckpt.energy_model()?;
    let need_split = opts.inliers.is_none() || opts.outliers.is_none();
    let mut splits = if need_split { Some(load_data(&ctx)?) } else { None };
    let mut pick = |file: &Option<PathBuf>, which: &str| -> Result<Dataset, CliError> {
        if let Some(p) = file {
            return Ok(load_csv(p, ctx.label_col())?);
        }
        let s = splits.as_mut().expect("split loaded");
        let ds = if which == "inliers" {
            s.test_inliers.take()
        } else {
            s.test_outliers.take()
        };
        ds.ok_or_else(|| CliError::config(format!("no test {which}: pass --{which} or configure a test split")))
    };
    let inliers = pick(&opts.inliers, "inliers")?;
    let outliers = pick(&opts.outliers, "outliers")?;
    check_dims("inliers", ckpt.input_dim(), inliers.dim())?;
    check_dims("outliers", ckpt.input_dim(), outliers.dim())?;
    let inliers = ckpt.preprocessing.apply(&inliers)?;
    let outliers = ckpt.preprocessing.apply(&outliers)?;
    let scores = ScoredSamples::new(model.energy(inliers.rows())?, model.energy(outliers.rows())?)?;
    let m = &ctx.cfg().metrics;
    let mut rec = Record::new("eval")
        .count("n_inliers", inliers.len())
        .count("n_outliers", outliers.len());
    if m.auroc {
        rec = rec.num("auroc", auroc(&scores));
    }
    for &p in &m.pauroc {
        rec = rec.num(&format!("pauroc@{p}"), pauroc(&scores, p)?);
    }
    if m.aupr {
        rec = rec.num("aupr", aupr(&scores));
    }
    rec = rec
        .num("mean_energy_inliers", mean(scores.normal()))
        .num("mean_energy_outliers", mean(scores.anomalous()))
        .text("config_hash", &ckpt.config_hash);
    ctx.ensure_out()?;
    let records = vec![rec];
    write_text(&ctx.out_file(EVAL_FILE), &records)?;
    Ok(records)
}

pub fn density_grid(opts: &Options) -> Result<Vec<Record>, CliError> {
    let ctx = Context::new(opts)?;
    let ckpt = ctx.energy_checkpoint(&opts.model)?;
    if ckpt.input_dim() != 2 {
        return Err(CliError::new(
            "E_DIM",
            format!(
                "density-grid needs a 2-dimensional model, checkpoint has {} dims",
                ckpt.input_dim()
            ),
        ));
    }
    let model = ckpt.energy_model()?;
    let grid = ctx.cfg().metrics.grid;
    let points = grid.points();
    let eval_points = ckpt
        .preprocessing
        .apply(&Dataset::new(points.clone(), None, "grid")?)?
        .into_rows();
    let energies = model.energy(&eval_points)?;
    let area = grid.cell_area();
    let density = normalized_density(&energies, area)?;
    let mut csv = String::from("x,y,energy,density\n");
    for (i, (e, p)) in energies.iter().zip(&density).enumerate() {
        let row = points.row(i);
        writeln!(
            csv,
            "{},{},{},{}",
            format_f64(row[0]),
            format_f64(row[1]),
            format_f64(*e),
            format_f64(*p)
        )
        .expect("string write");
    }
    ctx.ensure_out()?;
    let path = ctx.out_file(GRID_FILE);
    std::fs::write(&path, csv).map_err(|e| CliError::new("E_IO", format!("cannot write {}: {e}", path.display())))?;
    let mut rec = Record::new("density-grid")
        .count("points", grid.len())
        .num("cell_area", area)
        .num("mass", density.iter().sum::<f64>() * area);
    if let Some((radius, std)) = load_data(&ctx)?.truth {
        let truth = true_density_eight_gaussians(&points, radius, std)?;
        rec = rec.num("l1", density_l1_from_energies(&energies, &truth, area)?);
    }
    let records = vec![rec.text("config_hash", &ckpt.config_hash)];
    write_text(&ctx.out_file(DENSITY_FILE), &records)?;
    Ok(records)
}

pub fn sample(opts: &Options) -> Result<Vec<Record>, CliError> {
    let ctx = Context::new(opts)?;
    let ckpt = ctx.energy_checkpoint(&opts.model)?;
    let model = ckpt.energy_model()?;
    let splits = load_data(&ctx)?;
    let (train_x, _) = prepared_train(&ctx, &splits)?;
    check_dims("energy checkpoint", train_x.cols(), ckpt.input_dim())?;
    let ensemble = ctx.load_ensemble(train_x.cols())?;
    let n = ctx.cfg().sample.n.min(train_x.rows());
    let idx: Vec<usize> = (0..n).collect();
    let x = train_x.select_rows(&idx);
    let mut rng = seeded_rng(sub_seed(ctx.cfg().seed, Stream::Sample));
    let sigmas = sample_sigma(ensemble.sigma_range, &mut rng, n)?;
    let batch = two_stage_sample(&model, &ensemble, &x, &sigmas, &ctx.cfg().sampler()?, &mut rng)?;
    let mut group = vec![0i64; n];
    for (k, rows) in batch.groups.iter().enumerate() {
        for &r in rows {
            group[r] = k as i64;
        }
    }
    ctx.ensure_out()?;
    write_csv(
        &Dataset::new(batch.x_minus.clone(), Some(group), "negatives")?,
        ctx.out_file(NEGATIVES_FILE),
    )?;
    let rec = Record::new("sample")
        .count("n", n)
        .count("groups", batch.groups.len())
        .num("mean_energy_data", mean(&model.energy(&x)?))
        .num("mean_energy_start", mean(&model.energy(&batch.x0_minus)?))
        .num("mean_energy_negative", mean(&model.energy(&batch.x_minus)?))
        .text("config_hash", &ckpt.config_hash);
    let records = vec![rec];
    write_text(&ctx.out_file(SAMPLE_FILE), &records)?;
    Ok(records)
}
