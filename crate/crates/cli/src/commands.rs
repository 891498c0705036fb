//! The four subcommands: generate, train, eval, verify.

use std::io::Write;
use std::path::{Path, PathBuf};

use equidyn::dynamics::{
    build_dataset, corpus_hash, fnv1a64, generate_trajectory, generate_vector_trajectory,
    make_transformed_testset, read_trajectory, write_trajectory, CorpusConfig, Dataset,
    Trajectory, TransformKind,
};
use equidyn::groups::{ChannelRepKind, Field};
use equidyn::layers::Symmetry;
use equidyn::metrics::{
    energy_spectrum, equivariance_error, rmse_pair, thermal_energy_loss, write_metrics_csv,
    MetricRow,
};
use equidyn::models::{
    build, evaluate_rollout, load_checkpoint, save_checkpoint, Model, TrainConfig, Trainer,
};
use equidyn::tensor::Tensor;

use crate::config::RunConfig;
use crate::CliError;

fn ensure_absent(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Config(format!(
            "{} already exists (use --force to overwrite)",
            path.display()
        )));
    }
    Ok(())
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf, CliError> {
    let dir = cfg.path("out")?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| CliError::Config(format!("cannot create {}: {}", dir.display(), e)))?;
    Ok(dir)
}

fn corpus_config(cfg: &RunConfig) -> Result<(CorpusConfig, bool), CliError> {
    let vector = match cfg.get("field").unwrap_or("scalar") {
        "scalar" => false,
        "vector" => true,
        other => return Err(CliError::Config(format!("bad field kind '{}'", other))),
    };
    let corpus = CorpusConfig {
        n_traj: cfg.require_num("n_traj")?,
        grid: cfg.parse_num("grid", 32)?,
        frames: cfg.parse_num("frames", 59)?,
        substeps: cfg.parse_num("substeps", 4)?,
        alpha_min: cfg.parse_num("alpha_min", 1.0)?,
        alpha_max: cfg.parse_num("alpha_max", 4.0)?,
        init: cfg.init_family()?,
        boundary: cfg.boundary()?,
        seed: cfg.seed()?,
    };
    if corpus.n_traj == 0 {
        return Err(CliError::Config("n_traj must be positive".into()));
    }
    if corpus.alpha_max < corpus.alpha_min || corpus.alpha_min <= 0.0 {
        return Err(CliError::Config("need 0 < alpha_min <= alpha_max".into()));
    }
    Ok((corpus, vector))
}

pub fn cmd_generate(cfg: &RunConfig, force: bool, threads: usize) -> Result<(), CliError> {
    let (corpus_cfg, vector) = corpus_config(cfg)?;
    let dir = out_dir(cfg)?;
    let kind = if vector { "vector" } else { "scalar" };
    let config_hash = fnv1a64(corpus_cfg.canonical_text(kind).as_bytes());

    let provenance = dir.join("provenance.json");
    ensure_absent(&provenance, force)?;
    let traj_path = |i: usize| dir.join(format!("traj_{:04}.eqdy", i));
    for i in 0..corpus_cfg.n_traj {
        ensure_absent(&traj_path(i), force)?;
    }

    // embarrassingly parallel across trajectories; per-trajectory seeding
    // keeps the output independent of the worker count
    let threads = threads.max(1).min(corpus_cfg.n_traj);
    let mut trajs: Vec<Option<Trajectory>> = (0..corpus_cfg.n_traj).map(|_| None).collect();
    std::thread::scope(|scope| -> Result<(), CliError> {
        let mut handles = Vec::new();
        for (worker, chunk) in trajs.chunks_mut(corpus_cfg.n_traj.div_ceil(threads)).enumerate() {
            let cc = &corpus_cfg;
            let start = worker * corpus_cfg.n_traj.div_ceil(threads);
            handles.push(scope.spawn(move || -> Result<(), CliError> {
                for (off, slot) in chunk.iter_mut().enumerate() {
                    let idx = start + off;
                    let traj = if vector {
                        generate_vector_trajectory(cc, idx)?
                    } else {
                        generate_trajectory(cc, idx)?
                    };
                    *slot = Some(traj);
                }
                Ok(())
            }));
        }
        for h in handles {
            h.join().expect("generation worker panicked")?;
        }
        Ok(())
    })?;
    let trajs: Vec<Trajectory> = trajs.into_iter().map(|t| t.expect("all slots filled")).collect();

    for (i, traj) in trajs.iter().enumerate() {
        write_trajectory(&traj_path(i), traj, config_hash)?;
    }
    let data_hash = corpus_hash(&trajs);
    let mut f = std::fs::File::create(&provenance).map_err(equidyn::tensor::TensorError::from)?;
    writeln!(
        f,
        "{{\n  \"kind\": \"{}\",\n  \"n_traj\": {},\n  \"grid\": {},\n  \"frames\": {},\n  \
         \"substeps\": {},\n  \"alpha_min\": {:.12e},\n  \"alpha_max\": {:.12e},\n  \
         \"init\": \"{}\",\n  \"boundary\": \"{}\",\n  \"seed\": {},\n  \
         \"config_hash\": \"{:#018x}\",\n  \"corpus_hash\": \"{:#018x}\"\n}}",
        kind,
        corpus_cfg.n_traj,
        corpus_cfg.grid,
        corpus_cfg.frames,
        corpus_cfg.substeps,
        corpus_cfg.alpha_min,
        corpus_cfg.alpha_max,
        corpus_cfg.init.name(),
        corpus_cfg.boundary.name(),
        corpus_cfg.seed,
        config_hash,
        data_hash
    )
    .map_err(equidyn::tensor::TensorError::from)?;
    println!(
        "generated {} {} trajectories ({}x{}, {} frames) into {}",
        corpus_cfg.n_traj,
        kind,
        corpus_cfg.grid,
        corpus_cfg.grid,
        corpus_cfg.frames + 1,
        dir.display()
    );
    Ok(())
}

fn load_corpus(dir: &Path) -> Result<(Vec<Trajectory>, u64), CliError> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| CliError::Config(format!("cannot read {}: {}", dir.display(), e)))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|e| e == "eqdy").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::Config(format!("no .eqdy files in {}", dir.display())));
    }
    let mut trajs = Vec::with_capacity(paths.len());
    let mut hash = 0;
    for p in paths {
        let (t, h) = read_trajectory(&p)?;
        trajs.push(t);
        hash = h;
    }
    Ok((trajs, hash))
}

fn dataset_from_config(cfg: &RunConfig, l: usize) -> Result<Dataset, CliError> {
    let (trajs, provenance) = load_corpus(&cfg.path("data")?)?;
    let horizon: usize = cfg.parse_num("horizon", 3)?;
    let stride: usize = cfg.parse_num("stride", 1)?;
    Ok(build_dataset(&trajs, l, horizon, stride, provenance)?)
}

pub fn cmd_train(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let spec = cfg.model_spec()?;
    let dir = out_dir(cfg)?;
    let ckpt_path = dir.join("checkpoint.eqdm");
    let loss_path = dir.join("loss.csv");
    ensure_absent(&ckpt_path, force)?;
    ensure_absent(&loss_path, force)?;

    let dataset = dataset_from_config(cfg, spec.input_frames)?;
    if dataset.meta.channels != spec.channels {
        return Err(CliError::Config(format!(
            "model wants {} channels, data has {}",
            spec.channels, dataset.meta.channels
        )));
    }
    if dataset.meta.grid != spec.grid {
        return Err(CliError::Config(format!(
            "model wants grid {}, data has {}",
            spec.grid, dataset.meta.grid
        )));
    }

    let train_cfg = TrainConfig {
        lr: cfg.parse_num("lr", 1e-3)?,
        k_accum: cfg.parse_num("k_accum", 3)?,
        epochs: cfg.parse_num("epochs", 10)?,
        batch: cfg.parse_num("batch", 8)?,
        seed: cfg.seed()?,
    };

    let mut trainer = match cfg.get("resume") {
        Some(path) => {
            let tr = load_checkpoint(Path::new(path))?;
            if tr.model.spec != spec {
                return Err(CliError::Config(
                    "resume checkpoint does not match the configured model spec".into(),
                ));
            }
            tr
        }
        None => Trainer::new(build(&spec, cfg.seed()?)?),
    };

    let stats = trainer.train(dataset.train(), dataset.val(), &train_cfg)?;

    let mut f = std::fs::File::create(&loss_path).map_err(equidyn::tensor::TensorError::from)?;
    writeln!(f, "epoch,train_loss,val_loss").map_err(equidyn::tensor::TensorError::from)?;
    for s in &stats {
        writeln!(f, "{},{:.12e},{:.12e}", s.epoch, s.train_loss, s.val_loss)
            .map_err(equidyn::tensor::TensorError::from)?;
    }
    save_checkpoint(&ckpt_path, &trainer)?;
    if let Some(last) = stats.last() {
        println!(
            "trained {} epochs: train {:.6e}, val {:.6e} -> {}",
            stats.len(),
            last.train_loss,
            last.val_loss,
            ckpt_path.display()
        );
    } else {
        println!("0 epochs requested: wrote initialization to {}", ckpt_path.display());
    }
    Ok(())
}

fn model_forward_closure(model: &Model) -> impl Fn(&Tensor) -> equidyn::tensor::Result<Tensor> + '_ {
    move |window: &Tensor| {
        let sh = window.shape().to_vec();
        let batched = window.reshaped(&[1, sh[0], sh[1], sh[2]])?;
        let out = model.forward(&batched)?;
        let osh = out.shape().to_vec();
        out.reshaped(&[osh[1], osh[2], osh[3]])
    }
}

pub fn cmd_eval(cfg: &RunConfig, force: bool) -> Result<(), CliError> {
    let trainer = load_checkpoint(&cfg.path("checkpoint")?)?;
    let model = trainer.model;
    let dir = out_dir(cfg)?;
    let metrics_path = dir.join("metrics.csv");
    ensure_absent(&metrics_path, force)?;

    let dataset = dataset_from_config(cfg, model.spec.input_frames)?;
    let horizon: usize = cfg.parse_num("horizon", 3)?;
    if dataset.test().iter().any(|s| s.targets.len() < horizon) {
        return Err(CliError::Config("dataset horizon shorter than eval horizon".into()));
    }
    let seed = cfg.seed()?;

    let transforms: Vec<&str> = cfg.get("transforms").unwrap_or("orig").split(',').collect();
    let mut rows = Vec::new();
    for name in &transforms {
        let name = name.trim();
        let testset = if name == "orig" {
            None
        } else {
            let kind = TransformKind::parse(name)
                .ok_or_else(|| CliError::Config(format!("unknown transform '{}'", name)))?;
            Some(make_transformed_testset(&dataset, kind, seed)?)
        };
        let samples = match &testset {
            None => dataset.test(),
            Some(ds) => ds.test(),
        };

        let mut per_step = vec![0.0f64; horizon];
        let mut ese_sum = 0.0;
        let mut ese_count = 0usize;
        let mut thermal = 0.0f64;
        let scalar = dataset.meta.rep == ChannelRepKind::Scalar;
        for s in samples {
            let batched = {
                let sh = s.window.shape().to_vec();
                s.window.reshaped(&[1, sh[0], sh[1], sh[2]])?
            };
            let targets: Vec<Tensor> = s.targets[..horizon]
                .iter()
                .map(|t| {
                    let sh = t.shape().to_vec();
                    t.reshaped(&[1, sh[0], sh[1], sh[2]])
                })
                .collect::<equidyn::tensor::Result<_>>()?;
            let result = evaluate_rollout(&model, &batched, &targets)?;
            for (i, r) in result.per_step_rmse.iter().enumerate() {
                per_step[i] += r / samples.len() as f64;
            }
            let squeeze = |t: &Tensor| {
                let sh = t.shape().to_vec();
                t.reshaped(&[sh[1], sh[2], sh[3]])
            };
            let preds: Vec<Tensor> =
                result.predictions.iter().map(&squeeze).collect::<equidyn::tensor::Result<_>>()?;
            let truths: Vec<Tensor> =
                targets.iter().map(&squeeze).collect::<equidyn::tensor::Result<_>>()?;
            if horizon >= 2 {
                let sp = energy_spectrum(&preds)?;
                let st = energy_spectrum(&truths)?;
                let n = sp.log_energy.len();
                let sum: f64 = sp
                    .log_energy
                    .iter()
                    .zip(&st.log_energy)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                ese_sum += (sum / n as f64).sqrt();
                ese_count += 1;
            }
            if scalar {
                thermal += thermal_energy_loss(&preds, &truths)? / samples.len() as f64;
            }
        }

        for (i, v) in per_step.iter().enumerate() {
            rows.push(MetricRow {
                metric: "rmse".into(),
                split: "test".into(),
                transform: name.to_string(),
                step: i + 1,
                value: *v,
                seed,
            });
        }
        if ese_count > 0 {
            rows.push(MetricRow {
                metric: "ese".into(),
                split: "test".into(),
                transform: name.to_string(),
                step: horizon,
                value: ese_sum / ese_count as f64,
                seed,
            });
        }
        if scalar {
            rows.push(MetricRow {
                metric: "thermal_energy_l1".into(),
                split: "test".into(),
                transform: name.to_string(),
                step: horizon,
                value: thermal,
                seed,
            });
        }
    }
    write_metrics_csv(&metrics_path, &rows)?;
    println!("wrote {} metric rows to {}", rows.len(), metrics_path.display());
    Ok(())
}

pub fn cmd_verify(cfg: &RunConfig) -> Result<(), CliError> {
    let model = match cfg.get("checkpoint") {
        Some(path) => load_checkpoint(Path::new(path))?.model,
        None => build(&cfg.model_spec()?, cfg.seed()?)?,
    };
    let n_samples: usize = cfg.require_num("n_samples")?;
    if n_samples == 0 {
        return Err(CliError::Config("n_samples must be positive".into()));
    }
    let tolerance: f64 = cfg.require_num("tolerance")?;
    let kind = match cfg.get("transforms") {
        Some(t) => TransformKind::parse(t.trim())
            .ok_or_else(|| CliError::Config(format!("unknown transform '{}'", t)))?,
        None => match model.spec.symmetry {
            Symmetry::UniformMotion => TransformKind::UniformMotion,
            Symmetry::Magnitude => TransformKind::Magnitude,
            Symmetry::Rotation => TransformKind::Rotation,
            Symmetry::Scale => TransformKind::Scale,
            Symmetry::None => {
                return Err(CliError::Config(
                    "a plain model has no symmetry to verify; pass transforms=...".into(),
                ))
            }
        },
    };
    let rep = if model.spec.channels == 2 { ChannelRepKind::Vector2 } else { ChannelRepKind::Scalar };
    if kind == TransformKind::UniformMotion && rep != ChannelRepKind::Vector2 {
        return Err(CliError::Config("uniform motion applies to vector models only".into()));
    }

    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(cfg.seed()?);
    let forward = model_forward_closure(&model);
    let mut max_ee = 0.0f64;
    for _ in 0..n_samples {
        let window = Tensor::uniform(
            &[model.spec.window_channels(), model.spec.grid, model.spec.grid],
            -1.0,
            1.0,
            &mut rng,
        );
        let g = kind.sample(&mut rng);
        let x = Field::new(window, rep, 1.0, 1.0)?;
        let mut ee = equivariance_error(&forward, &g, &x, rep)?;
        // magnitude errors scale with lambda; report them relative
        if let equidyn::groups::GroupElement::Magnitude { lambda } = g {
            let fx = forward(&x.data)?;
            let norm = rmse_pair(&fx, &fx.map(|_| 0.0))?.max(1e-12);
            ee /= lambda * norm;
        }
        max_ee = max_ee.max(ee);
    }
    println!(
        "verify {}: {} samples, max equivariance error {:.3e} (tolerance {:.3e})",
        kind.name(),
        n_samples,
        max_ee,
        tolerance
    );
    if max_ee > tolerance {
        return Err(CliError::Verification(format!(
            "max equivariance error {:.3e} exceeds tolerance {:.3e}",
            max_ee, tolerance
        )));
    }
    println!("PASS");
    Ok(())
}
