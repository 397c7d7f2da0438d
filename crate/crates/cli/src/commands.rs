use std::fs;
use std::path::{Path, PathBuf};

use tcinn::ablation::{ablation_table, run_ablation};
use tcinn::data::phantom::manifest_path;
use tcinn::data::{as_single_plane, generate_phantom_dataset, read_tensor_file, write_tensor_file, DatasetManifest};
use tcinn::data::{PhantomConfig, ScaleRecord};
use tcinn::metrics::{evaluate_pairs, EvalOptions, MetricsReport, Predictions, SsimMode, SuvParams, VoiMask};
use tcinn::model::{augment_channels, collapse_channels, ModelConfig};
use tcinn::train::{checkpoint_dtype, train_from, Checkpoint, LossCurve, TrainConfig};
use tcinn::{DType, Error, Real, Result};

use crate::args::{AblateArgs, Direction, EvalArgs, InferArgs, ModelArgs, PhantomArgs, Precision, SsimArg, TrainArgs};

pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const LOSS_FILE: &str = "loss.csv";
pub const REPORT_FILE: &str = "report.csv";
pub const ABLATION_FILE: &str = "ablation.csv";

fn dtype(p: Precision) -> DType {
    match p {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    }
}

fn ssim_mode(s: SsimArg) -> SsimMode {
    match s {
        SsimArg::Windowed => SsimMode::Windowed,
        SsimArg::Global => SsimMode::Global,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

pub fn phantom(a: PhantomArgs) -> Result<()> {
    let cfg = PhantomConfig {
        seed: a.seed,
        size: a.size as usize,
        pairs: a.pairs as usize,
        min_blobs: a.min_blobs,
        max_blobs: a.max_blobs,
        background: a.background,
        dtype: dtype(a.precision),
    };
    generate_phantom_dataset(&cfg, &a.out)?;
    println!("{}", manifest_path(&a.out).display());
    Ok(())
}

fn train_config(m: &ModelArgs, channels: usize, dry_run: bool) -> TrainConfig {
    let mut model = ModelConfig::new(channels);
    model.blocks = m.blocks;
    model.dense_layers = m.dense_layers;
    model.growth = m.growth;
    model.clamp = m.clamp;
    model.actnorm = m.actnorm;
    TrainConfig {
        epochs: m.epochs,
        initial_lr: m.lr,
        halving_period: m.halving_period,
        lambda: m.lambda,
        batch_size: m.batch_size,
        seed: m.seed,
        model,
        clip_norm: m.clip_norm,
        dry_run,
        ..Default::default()
    }
}

fn batch_log(r: &tcinn::train::BatchReport) {
    log::debug!(
        "epoch {} batch {} loss {:.6e} (forward {:.6e}, inverse {:.6e})",
        r.epoch + 1,
        r.batch,
        r.loss.total,
        r.loss.forward,
        r.loss.inverse
    );
}

pub fn train(a: TrainArgs) -> Result<()> {
    match dtype(a.model.precision) {
        DType::F32 => train_as::<f32>(a),
        DType::F64 => train_as::<f64>(a),
    }
}

fn train_as<T: Real>(a: TrainArgs) -> Result<()> {
    let cfg = train_config(&a.model, a.channels, a.dry_run);
    cfg.validate()?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    let resume = a.resume.as_ref().map(Checkpoint::<T>::load).transpose()?;
    create_dir(&a.out)?;
    let loss_path = a.out.join(LOSS_FILE);
    // a resumed run keeps the earlier rows of its own loss file
    let mut curve = LossCurve::new();
    if let Some(ck) = &resume {
        if loss_path.exists() {
            for r in LossCurve::read_csv(&loss_path)?.records() {
                if r.epoch <= ck.epoch {
                    curve.push(*r)?;
                }
            }
        }
    }
    let (ckpt, new) = train_from::<T>(&manifest, &cfg, resume, batch_log)?;
    for r in new.records() {
        curve.push(*r)?;
    }
    let ckpt_path = a.out.join(CHECKPOINT_FILE);
    ckpt.save(&ckpt_path)?;
    curve.write_csv(&loss_path)?;
    println!("{}", ckpt_path.display());
    println!("{}", loss_path.display());
    Ok(())
}

/// Sidecar of `input` copied to `out`, when present.
fn copy_scale(input: &Path, out: &Path) -> Result<()> {
    if ScaleRecord::sidecar_path(input).exists() {
        ScaleRecord::read_sidecar(input)?.write_sidecar(out)?;
    }
    Ok(())
}

pub fn infer(a: InferArgs) -> Result<()> {
    match checkpoint_dtype(&a.ckpt)? {
        DType::F32 => infer_as::<f32>(a),
        DType::F64 => infer_as::<f64>(a),
    }
}

fn infer_as<T: Real>(a: InferArgs) -> Result<()> {
    let ckpt = Checkpoint::<T>::load(&a.ckpt)?;
    let model = ckpt.model()?;
    let img = as_single_plane(read_tensor_file(&a.input)?.into_real::<T>(), &a.input)?;
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let x = augment_channels(&img.reshape(vec![1, 1, h, w])?, model.config().channels)?;
    let y = match a.direction {
        Direction::Forward => model.forward(&x)?,
        Direction::Inverse => model.inverse(&x)?,
    };
    let out = collapse_channels(&y)?.reshape(vec![1, h, w])?;
    if !out.all_finite() {
        return Err(Error::NonFinite(format!("model output for {}", a.input.display())));
    }
    write_tensor_file(&out, &a.out)?;
    copy_scale(&a.input, &a.out)?;
    println!("{}", a.out.display());
    Ok(())
}

fn eval_options(a: &EvalArgs) -> Result<EvalOptions> {
    let suv = match (a.suv_id, a.suv_weight) {
        (Some(id), Some(w)) => Some(SuvParams::new(id, w)?),
        _ => None,
    };
    let voi = match &a.voi {
        Some(p) => Some(VoiMask::from_tensor(
            &as_single_plane(read_tensor_file(p)?.into_real::<f64>(), p)?,
            a.voxel_volume,
        )?),
        None => None,
    };
    if suv.is_some() && a.voi.is_none() {
        log::info!("no --voi mask given; SUV columns use per-pair manifest masks where present");
    }
    Ok(EvalOptions {
        max_val: a.max_val,
        mae_eps: a.mae_eps,
        ssim_mode: ssim_mode(a.ssim),
        suv,
        voi,
    })
}

fn finish_report(report: &MetricsReport, path: &Path) -> Result<()> {
    report.write_csv(path)?;
    for f in &report.failures {
        eprintln!("pair {} failed: {}", f.pair_id, f.message);
    }
    if report.pairs.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "no pair could be scored; see {}",
            path.display()
        )));
    }
    if let Some(s) = report.summary() {
        let psnr = s.psnr.map(|c| format!("{:.3}", c.mean)).unwrap_or_else(|| "inf".into());
        println!(
            "pairs {} psnr {psnr} ssim {:.4} rmse% {:.3} mae% {:.3}",
            report.pairs.len(),
            s.ssim.mean,
            s.rmse_pct.mean,
            s.mae_pct.mean
        );
    }
    println!("{}", path.display());
    Ok(())
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let manifest = DatasetManifest::read(&a.manifest)?;
    let opts = eval_options(&a)?;
    let report = match (&a.ckpt, &a.pred_dir) {
        (Some(ck), _) => match checkpoint_dtype(ck)? {
            DType::F32 => {
                let model = Checkpoint::<f32>::load(ck)?.model()?;
                evaluate_pairs(&manifest, Predictions::Model(&model), &opts)?
            }
            DType::F64 => {
                let model = Checkpoint::<f64>::load(ck)?.model()?;
                evaluate_pairs(&manifest, Predictions::Model(&model), &opts)?
            }
        },
        (None, Some(dir)) => evaluate_pairs(&manifest, Predictions::<f64>::Dir(dir), &opts)?,
        (None, None) => return Err(Error::InvalidArgument("one of --ckpt or --pred-dir is required".into())),
    };
    finish_report(&report, &a.report)
}

pub fn ablate(a: AblateArgs) -> Result<()> {
    match dtype(a.model.precision) {
        DType::F32 => ablate_as::<f32>(a),
        DType::F64 => ablate_as::<f64>(a),
    }
}

fn ablate_as<T: Real>(a: AblateArgs) -> Result<()> {
    if a.channels.is_empty() {
        return Err(Error::InvalidArgument("--channels lists no channel count".into()));
    }
    let base = train_config(&a.model, a.channels[0], false);
    for &c in &a.channels {
        train_config(&a.model, c, false).validate()?;
    }
    let train_set = DatasetManifest::read(&a.manifest)?;
    let heldout = DatasetManifest::read(&a.heldout)?;
    let opts = EvalOptions {
        ssim_mode: ssim_mode(a.ssim),
        ..Default::default()
    };
    create_dir(&a.out)?;
    let runs = run_ablation::<T>(&train_set, &heldout, &base, &a.channels, &opts, |_, r| batch_log(r))?;
    for run in &runs {
        let dir: PathBuf = a.out.join(format!("c{}", run.row.channels));
        create_dir(&dir)?;
        run.checkpoint.save(dir.join(CHECKPOINT_FILE))?;
        run.curve.write_csv(dir.join(LOSS_FILE))?;
        run.report.write_csv(dir.join(REPORT_FILE))?;
    }
    let table = ablation_table(&runs.iter().map(|r| r.row.clone()).collect::<Vec<_>>());
    let path = a.out.join(ABLATION_FILE);
    fs::write(&path, &table).map_err(|e| Error::Io {
        path: path.clone(),
        source: e,
    })?;
    print!("{table}");
    Ok(())
}
