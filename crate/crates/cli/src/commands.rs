use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use bayesphys::dataset::{load_dataset, write_dataset, Dataset, DatasetRecord};
use bayesphys::network::{build_network, stack_clips, NetConfig};
use bayesphys::par::with_threads;
use bayesphys::signal::{estimate_hr, BandSpec};
use bayesphys::synth::{generate_dataset, Split, SynthDatasetConfig, SynthSpec};
use bayesphys::trainer::{Checkpoint, TrainSample, Trainer};
use bayesphys::uncertainty::{mc_predict, run_uncertainty_benchmark, BenchmarkConfig, EvalClip};

use crate::config::{write_effective, RunConfig};
use crate::error::CliError;
use crate::{EvalArgs, PredictArgs, SplitArg, SynthArgs, TrainArgs};

pub fn synth(a: &SynthArgs) -> Result<(), CliError> {
    let cfg = SynthDatasetConfig {
        clips: a.clips as usize,
        hr_range: a.hr_range,
        train_fraction: a.train_fraction,
        base: SynthSpec {
            frames: a.frames as usize,
            height: a.size.0,
            width: a.size.1,
            ..Default::default()
        },
        seed: a.seed,
        ..Default::default()
    };
    let records = generate_dataset(&cfg)?;
    write_dataset(&a.out, &records)?;
    write_effective(&a.out, &cfg)?;
    let train = records.iter().filter(|r| r.split == Split::Train).count();
    println!(
        "wrote {} records ({train} train, {} test) to {}",
        records.len(),
        records.len() - train,
        a.out.display()
    );
    Ok(())
}

fn uniform_shape(records: &[&DatasetRecord]) -> Result<([usize; 4], f64), CliError> {
    let first = records.first().ok_or_else(|| CliError::Input("no records in the requested split".into()))?;
    for r in records {
        if r.header.shape != first.header.shape || r.header.fs != first.header.fs {
            return Err(CliError::Input(format!(
                "record {} has shape {:?} at {} Hz, {} has {:?} at {} Hz",
                r.id, r.header.shape, r.header.fs, first.id, first.header.shape, first.header.fs
            )));
        }
    }
    Ok((first.header.shape, first.header.fs))
}

fn open(data: &Path) -> Result<Dataset, CliError> {
    Ok(load_dataset(data)?)
}

fn metrics_path(ckpt: &Path) -> PathBuf {
    let stem = ckpt.file_stem().map_or_else(|| "model".into(), |s| s.to_string_lossy().into_owned());
    ckpt.with_file_name(format!("{stem}.metrics.csv"))
}

fn output_dir(path: &Path) -> PathBuf {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
        _ => PathBuf::from("."),
    }
}

pub fn train(a: &TrainArgs) -> Result<(), CliError> {
    let run = RunConfig::load_or_default(a.config.as_deref())?;
    let ds = open(&a.data)?;
    let records = ds.split(Split::Train);
    let (shape, _) = uniform_shape(&records)?;
    let data: Vec<TrainSample> = records
        .iter()
        .map(|r| {
            Ok(TrainSample {
                clip: r.load_clip()?,
                bvp: r.load_bvp()?.samples.iter().map(|&v| v as f32).collect(),
            })
        })
        .collect::<bayesphys::Result<_>>()?;

    let resume = a.from.as_deref().map(Checkpoint::load).transpose()?;
    let mut tcfg = match (&resume, &a.config) {
        (Some(ck), None) => {
            let mut t = ck.meta.train.clone();
            t.loss = ck.meta.loss;
            t
        }
        _ => run.train.clone(),
    };
    if let Some(e) = a.epochs {
        tcfg.epochs = e as usize;
    }
    if let Some(s) = a.seed {
        tcfg.seed = s;
    }
    let mut trainer = match &resume {
        Some(ck) => Trainer::from_checkpoint(ck, Some(tcfg))?,
        None => {
            let net_cfg = NetConfig {
                input_shape: shape,
                ..run.net.clone()
            };
            Trainer::new(build_network(&net_cfg)?, tcfg)?
        }
    };
    if trainer.net.config().input_shape != shape {
        return Err(CliError::Input(format!(
            "checkpoint expects clips of shape {:?}, dataset has {shape:?}",
            trainer.net.config().input_shape
        )));
    }

    let metrics = metrics_path(&a.out);
    if resume.is_none() && metrics.exists() {
        fs::remove_file(&metrics).map_err(|e| CliError::io(&metrics, e))?;
    }
    let echo = RunConfig {
        net: trainer.net.config().clone(),
        train: trainer.cfg.clone(),
        loss: trainer.cfg.loss,
        eval: run.eval.clone(),
    };
    write_effective(&output_dir(&a.out), &echo)?;
    let start = trainer.epoch;
    with_threads(a.threads as usize, || trainer.run(&data, Some(&a.out), Some(&metrics)))?;
    if trainer.epoch == start {
        trainer.checkpoint().save(&a.out)?;
        println!("already trained for {} epochs; checkpoint rewritten", trainer.epoch);
        return Ok(());
    }
    let m = trainer.history.last().expect("at least one epoch ran");
    println!(
        "epoch {}/{} step {}: loss {:.6} pearson {:.6} snr {:.4} kl {:.6}",
        m.epoch, trainer.cfg.epochs, m.step, m.loss, m.pearson_term, m.snr_term, m.kl_term
    );
    println!("checkpoint {} metrics {}", a.out.display(), metrics.display());
    Ok(())
}

fn true_hr(r: &DatasetRecord, band: &BandSpec) -> Result<f64, CliError> {
    match r.hr_bpm {
        Some(h) => Ok(h),
        None => Ok(estimate_hr(&r.load_bvp()?, band)?),
    }
}

#[derive(Serialize)]
struct EvalEcho<'a> {
    data: &'a Path,
    checkpoint: &'a Path,
    net: &'a NetConfig,
    eval: &'a BenchmarkConfig,
}

pub fn eval(a: &EvalArgs) -> Result<(), CliError> {
    let run = RunConfig::load_or_default(a.config.as_deref())?;
    let mut cfg = run.eval;
    if let Some(n) = &a.noise {
        cfg.noise_levels = n.clone();
    }
    if let Some(m) = a.mc {
        cfg.t_mc = m as usize;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(c) = a.confidence {
        cfg.confidence = c;
    }
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let net = ckpt.network()?;
    let ds = open(&a.data)?;
    let records = ds.split(Split::Test);
    let (_, fs) = uniform_shape(&records)?;
    cfg.fs = fs;
    let clips: Vec<EvalClip> = records
        .iter()
        .map(|r| {
            Ok(EvalClip {
                id: r.id.clone(),
                clip: r.load_clip()?,
                true_hr: true_hr(r, &cfg.band)?,
            })
        })
        .collect::<Result<_, CliError>>()?;
    let out = with_threads(a.threads as usize, || run_uncertainty_benchmark(&net, &clips, &cfg))?;
    out.write(&a.out)?;
    write_effective(
        &a.out,
        &EvalEcho {
            data: &a.data,
            checkpoint: &a.ckpt,
            net: net.config(),
            eval: &cfg,
        },
    )?;
    print!("{}", out.report.to_text());
    Ok(())
}

pub fn predict(a: &PredictArgs) -> Result<(), CliError> {
    let ckpt = Checkpoint::load(&a.ckpt)?;
    let net = ckpt.network()?;
    let ds = open(&a.data)?;
    let records: Vec<&DatasetRecord> = match a.split {
        SplitArg::Train => ds.split(Split::Train),
        SplitArg::Test => ds.split(Split::Test),
        SplitArg::All => ds.records.iter().collect(),
    };
    let (_, fs) = uniform_shape(&records)?;
    let band = BandSpec::default();
    let mut csv = String::from("id,split,hr_mean,hr_std,true_hr\n");
    for r in &records {
        let clip = r.load_clip()?;
        let batch = stack_clips(&[&clip])?;
        let p = with_threads(a.threads as usize, || mc_predict(&net, &batch, a.mc as usize, a.seed, fs, &band))?;
        let split = match r.split {
            Split::Train => "train",
            Split::Test => "test",
        };
        let truth = r.hr_bpm.map_or_else(String::new, |h| h.to_string());
        let _ = writeln!(csv, "{},{split},{},{},{truth}", r.id, p[0].hr_mean, p[0].hr_variance.sqrt());
    }
    match &a.out {
        Some(path) => fs::write(path, csv).map_err(|e| CliError::io(path, e))?,
        None => print!("{csv}"),
    }
    Ok(())
}
