use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;
use sir_core::inference::Regressor;
use sir_core::io::{self, NdjsonWriter};
use sir_core::metrics::{evaluate, subset_51_of_68, EvalConfig, EvalReport, Normalization};
use sir_core::networks::{LanSpec, Network, NetworkSpec, StackSpec};
use sir_core::patches::{NormalizeConfig, PatchConfig};
use sir_core::sampling::{Branch, SampleStream, SamplingConfig};
use sir_core::shape::{shape_to_params, ShapeModel};
use sir_core::synth::{generate_dataset, SyntheticSpec};
use sir_core::tensor::AdadeltaConfig;
use sir_core::train::{train_cr_baseline, train_sir, TrainConfig, TrainLogRecord};

use crate::args::*;
use crate::experiment::{self, NormalizedSet, MODEL_FILE};
use crate::usage;

pub fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::FitModel(a) => fit_model(a),
        Command::TrainSir(a) => train_sir_cmd(a),
        Command::TrainCr(a) => train_cr_cmd(a),
        Command::Detect(a) => detect(a),
        Command::Eval(a) => eval(a),
        Command::SampleDump(a) => sample_dump(a),
        Command::CedExport(a) => ced_export(a),
        Command::SweepSigma(a) => sweep_sigma(a),
        Command::SweepIters(a) => sweep_iters(a),
        Command::Replay(_) => unreachable!("replay is resolved before dispatch"),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn normalize_config(face_size: usize) -> Result<NormalizeConfig> {
    if face_size == 0 {
        return Err(usage("--face-size must be positive"));
    }
    Ok(NormalizeConfig {
        face_size,
        ..NormalizeConfig::default()
    })
}

fn load_set(manifest: &Path, face_size: usize) -> Result<NormalizedSet> {
    NormalizedSet::from_raw(io::load_raw(manifest)?, &normalize_config(face_size)?)
}

fn synth(a: &SynthArgs) -> Result<()> {
    let spec = SyntheticSpec {
        landmark_count: a.landmarks,
        image_size: a.image_size,
        shape_components: a.components,
        appearance_seed: a.appearance_seed,
        seed: a.seed,
        count: a.count,
        noise: a.noise,
        ..SyntheticSpec::default()
    };
    spec.validate().map_err(|e| usage(e.to_string()))?;
    let data = generate_dataset(&spec)?;
    let manifest = io::write_synthetic(&data, &a.out)?;
    println!("wrote {} faces, manifest {}", data.faces.len(), manifest.display());
    Ok(())
}

#[derive(Serialize)]
struct ModelSummary<'a> {
    landmark_count: usize,
    components: usize,
    component_std: &'a [f64],
    param_scales: &'a [f64],
    face_size: usize,
}

fn fit_model(a: &FitModelArgs) -> Result<()> {
    if !(a.variance > 0.0 && a.variance <= 1.0) {
        return Err(usage(format!("--variance must lie in (0, 1], got {}", a.variance)));
    }
    let set = load_set(&a.data, a.face_size)?;
    let model = experiment::fit_model(&set, a.variance)?;
    experiment::save_model(&model, &a.out.join(MODEL_FILE))?;
    write_json(
        &a.out.join("model.json"),
        &ModelSummary {
            landmark_count: model.landmark_count(),
            components: model.components(),
            component_std: model.component_std(),
            param_scales: model.param_scales(),
            face_size: a.face_size,
        },
    )?;
    println!("{} landmarks, {} shape components", model.landmark_count(), model.components());
    Ok(())
}

fn train_config(a: &TrainArgs) -> Result<TrainConfig> {
    let cfg = TrainConfig {
        batch_size: a.batch,
        max_steps: a.steps,
        optimizer: AdadeltaConfig {
            learning_rate: a.lr,
            weight_decay: a.weight_decay,
            ..AdadeltaConfig::default()
        },
        sampling: SamplingConfig {
            sigma: a.sigma,
            mixture_weight: a.mixture_weight,
            seed: a.seed,
            ..SamplingConfig::default()
        },
        checkpoint_every: a.checkpoint_every,
        seed: a.seed,
        deterministic: a.deterministic,
        validation_fraction: a.validation_fraction,
        validate_every: a.validate_every,
        ..TrainConfig::default()
    };
    cfg.validate().map_err(|e| usage(e.to_string()))?;
    Ok(cfg)
}

pub fn network_spec(a: &TrainArgs, landmark_count: usize, channels: usize) -> Result<NetworkSpec> {
    if a.patch_size % 2 == 0 || a.patch_size < 3 {
        return Err(usage(format!("--patch-size must be odd and at least 3, got {}", a.patch_size)));
    }
    let lan = LanSpec {
        hidden_dim: a.hidden,
        feature_dim: a.feature_dim,
        ..LanSpec::new(landmark_count, a.patch_size, channels)
    };
    Ok(match a.network {
        NetworkKind::Lan => NetworkSpec::Lan(lan),
        NetworkKind::Stack => NetworkSpec::Stack(StackSpec::matched_to(&lan)),
    })
}

struct Prepared {
    model: ShapeModel,
    faces: Vec<sir_core::sampling::Face>,
    spec: NetworkSpec,
    cfg: TrainConfig,
}

fn prepare(a: &TrainArgs) -> Result<Prepared> {
    let cfg = train_config(a)?;
    let model = experiment::load_model(&a.model)?;
    let data = io::load_dataset(&a.data, &model, &normalize_config(a.face_size)?)?;
    let Some(first) = data.faces.first() else {
        bail!("{}: no annotated faces to train on", a.data.display());
    };
    let spec = network_spec(a, model.landmark_count(), first.image.channels())?;
    Ok(Prepared {
        model,
        faces: data.faces,
        spec,
        cfg,
    })
}

#[derive(Serialize)]
struct TrainSummary {
    network: NetworkSpec,
    parameter_count: usize,
    stages: usize,
    steps: usize,
    initial_validation_loss: Vec<Option<f64>>,
    final_validation_loss: Vec<Option<f64>>,
}

fn train_sir_cmd(a: &TrainArgs) -> Result<()> {
    let p = prepare(a)?;
    let outcome = train_sir(&p.faces, &p.model, p.spec, &p.cfg, Some(&a.out))?;
    let summary = TrainSummary {
        network: p.spec,
        parameter_count: outcome.network.parameter_count(),
        stages: 1,
        steps: a.steps,
        initial_validation_loss: vec![outcome.initial_validation_loss()],
        final_validation_loss: vec![outcome.final_validation_loss()],
    };
    write_json(&a.out.join("summary.json"), &summary)?;
    report_losses(&summary);
    Ok(())
}

fn train_cr_cmd(a: &TrainCrArgs) -> Result<()> {
    if a.stages == 0 {
        return Err(usage("--stages must be at least 1"));
    }
    let p = prepare(&a.train)?;
    let outcome = train_cr_baseline(&p.faces, &p.model, p.spec, a.stages, &p.cfg, Some(&a.train.out))?;
    let first = |log: &[TrainLogRecord]| log.iter().find_map(|r| r.validation_loss);
    let last = |log: &[TrainLogRecord]| log.iter().rev().find_map(|r| r.validation_loss);
    let summary = TrainSummary {
        network: p.spec,
        parameter_count: outcome.stages.iter().map(Network::parameter_count).sum(),
        stages: a.stages,
        steps: a.train.steps,
        initial_validation_loss: outcome.logs.iter().map(|l| first(l)).collect(),
        final_validation_loss: outcome.logs.iter().map(|l| last(l)).collect(),
    };
    write_json(&a.train.out.join("summary.json"), &summary)?;
    report_losses(&summary);
    Ok(())
}

fn report_losses(s: &TrainSummary) {
    for (k, (i, f)) in s.initial_validation_loss.iter().zip(&s.final_validation_loss).enumerate() {
        match (i, f) {
            (Some(i), Some(f)) => println!("stage {}: validation loss {i:.6} -> {f:.6}", k + 1),
            _ => println!("stage {}: no validation split", k + 1),
        }
    }
    println!("{} parameters", s.parameter_count);
}

fn check_networks(nets: &[Network], model: &ShapeModel, set: &NormalizedSet) -> Result<()> {
    for net in nets {
        if net.spec().landmark_count() != model.landmark_count() {
            bail!(
                "network expects {} landmarks but the shape model has {}",
                net.spec().landmark_count(),
                model.landmark_count()
            );
        }
        if let Some(img) = set.images.first() {
            if img.channels() != net.spec().channels() {
                bail!("network expects {} channels, images have {}", net.spec().channels(), img.channels());
            }
        }
    }
    Ok(())
}

fn regressor(nets: &[Network], iterations: usize) -> Regressor<'_> {
    if nets.len() == 1 {
        Regressor::SelfIterative {
            net: &nets[0],
            iterations,
        }
    } else {
        Regressor::Cascade(nets)
    }
}

#[derive(Serialize)]
struct TraceRecord<'a> {
    id: &'a str,
    increment_norms: &'a [f64],
}

fn detect(a: &DetectArgs) -> Result<()> {
    let model = experiment::load_model(&a.model)?;
    let nets = experiment::load_networks(&a.net)?;
    let set = load_set(&a.data, a.face_size)?;
    check_networks(&nets, &model, &set)?;
    let traces = set.detect(regressor(&nets, a.iterations), &model)?;
    let k = traces.first().map_or(0, |t| t.iterations());
    let shapes = set.raw_shapes(&traces, k);
    let predictions: Vec<(String, _)> = set.ids.iter().cloned().zip(shapes).collect();
    io::write_predictions(&a.out, &predictions)?;
    let records: Vec<TraceRecord> = set
        .ids
        .iter()
        .zip(&traces)
        .map(|(id, t)| TraceRecord {
            id,
            increment_norms: &t.increment_norms,
        })
        .collect();
    write_json(&a.out.join("traces.json"), &records)?;
    println!("wrote {} predictions to {}", predictions.len(), a.out.display());
    Ok(())
}

pub fn eval_config(m: &MetricArgs, landmark_count: usize) -> Result<EvalConfig> {
    let eyes = || -> Result<(usize, usize)> {
        match m.eyes[..] {
            [l, r] if l != r && l.max(r) < landmark_count => Ok((l, r)),
            _ => Err(usage(format!("--eyes needs two distinct indices below {landmark_count}"))),
        }
    };
    let normalization = match m.normalization {
        NormalizationKind::Auto if landmark_count == 68 => Normalization::inter_ocular_68(),
        NormalizationKind::Auto | NormalizationKind::EyePoints => {
            let (l, r) = eyes()?;
            Normalization::eye_points(l, r)
        }
        NormalizationKind::InterPupil | NormalizationKind::InterOcular if landmark_count != 68 => {
            return Err(usage("inter-pupil and inter-ocular normalization need 68-point annotations"));
        }
        NormalizationKind::InterPupil => Normalization::inter_pupil_68(),
        NormalizationKind::InterOcular => Normalization::inter_ocular_68(),
    };
    if m.subset51 && landmark_count != 68 {
        return Err(usage("--subset51 needs 68-point annotations"));
    }
    if !(m.threshold > 0.0) || m.bins < 2 {
        return Err(usage("--threshold must be positive and --bins at least 2"));
    }
    Ok(EvalConfig {
        normalization,
        threshold: m.threshold,
        bins: m.bins,
        subset: m.subset51.then(subset_51_of_68),
    })
}

fn print_report(r: &EvalReport) {
    println!(
        "images {}  mean NME {:.6}  AUC@{} {:.6}  FR@{} {:.6}  ({})",
        r.per_image_nme.len(),
        r.mean_nme,
        r.threshold,
        r.auc,
        r.threshold,
        r.failure_rate,
        r.normalization
    );
}

fn eval(a: &EvalArgs) -> Result<()> {
    let raw = io::load_raw(&a.data)?;
    let ids: Vec<String> = raw.iter().map(|r| r.id.clone()).collect();
    let gt = raw
        .into_iter()
        .map(|r| r.landmarks.with_context(|| format!("{} has no annotation", r.id)))
        .collect::<Result<Vec<_>>>()?;
    let Some(first) = gt.first() else {
        bail!("{}: nothing to evaluate", a.data.display());
    };
    let cfg = eval_config(&a.metric, first.len())?;
    let pred = io::read_predictions(&a.pred, &ids)?;
    let report = evaluate(&pred, &gt, &cfg)?;
    write_json(&a.out.join("report.json"), &report)?;
    print_report(&report);
    Ok(())
}

#[derive(Serialize)]
struct SampleRecord<'a> {
    index: usize,
    face: &'a str,
    branch: Branch,
    params: Vec<f64>,
    theta: Vec<f64>,
    target: Vec<f64>,
}

fn sample_dump(a: &SampleDumpArgs) -> Result<()> {
    let model = experiment::load_model(&a.model)?;
    let data = io::load_dataset(&a.data, &model, &normalize_config(a.face_size)?)?;
    let Some(first) = data.faces.first() else {
        bail!("{}: no annotated faces", a.data.display());
    };
    if a.patch_size % 2 == 0 {
        return Err(usage("--patch-size must be odd"));
    }
    let cfg = SamplingConfig {
        sigma: a.sigma,
        mixture_weight: a.mixture_weight,
        seed: a.seed,
        ..SamplingConfig::default()
    };
    cfg.validate().map_err(usage)?;
    let patch_cfg = PatchConfig::new(a.patch_size, first.image.channels());
    let stream = SampleStream::new(&data.faces, &model, cfg, patch_cfg);
    let mut w = NdjsonWriter::create(&a.out.join("samples.ndjson"))?;
    for (i, ex) in stream.batch(0, a.count).into_iter().enumerate() {
        w.write(&SampleRecord {
            index: i,
            face: &data.faces[ex.source].id,
            branch: ex.branch,
            params: shape_to_params(&ex.sampled, &model)?.to_vector(),
            theta: ex.sampled.to_flat(),
            target: ex.target,
        })?;
    }
    w.finish()?;
    println!("wrote {} samples", a.count);
    Ok(())
}

fn ced_export(a: &CedExportArgs) -> Result<()> {
    let text = fs::read_to_string(&a.report).with_context(|| format!("reading {}", a.report.display()))?;
    let report: EvalReport = serde_json::from_str(&text).with_context(|| format!("parsing {}", a.report.display()))?;
    let mut csv = String::from("error,fraction\n");
    for (x, y) in &report.ced_samples {
        writeln!(csv, "{x},{y}")?;
    }
    let path = a.out.join("ced.csv");
    fs::write(&path, csv).with_context(|| format!("writing {}", path.display()))?;
    println!("AUC@{} {:.6}  FR@{} {:.6}", report.threshold, report.auc, report.threshold, report.failure_rate);
    Ok(())
}

fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let mut text = format!("{header}\n");
    for r in rows {
        text.push_str(r);
        text.push('\n');
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn sweep_sigma(a: &SweepSigmaArgs) -> Result<()> {
    if a.sigmas.is_empty() || a.sigmas.iter().any(|s| !(*s > 0.0)) {
        return Err(usage("--sigmas needs positive values"));
    }
    let p = prepare(&a.train)?;
    let test = load_set(&a.test, a.train.face_size)?;
    let eval_cfg = eval_config(&a.metric, p.model.landmark_count())?;
    let mut rows = Vec::new();
    for &sigma in &a.sigmas {
        let cfg = TrainConfig {
            sampling: SamplingConfig { sigma, ..p.cfg.sampling },
            ..p.cfg
        };
        let dir = a.train.out.join(format!("sigma_{sigma}"));
        fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        let outcome = train_sir(&p.faces, &p.model, p.spec, &cfg, Some(&dir))?;
        let traces = test.detect(regressor(std::slice::from_ref(&outcome.network), a.iterations), &p.model)?;
        let r = test.evaluate_iteration(&traces, a.iterations, &eval_cfg)?;
        println!("sigma {sigma}: NME {:.6}", r.mean_nme);
        rows.push(format!("{sigma},{},{},{}", r.mean_nme, r.auc, r.failure_rate));
    }
    write_csv(&a.train.out.join("sweep_sigma.csv"), "sigma,nme,auc,failure_rate", &rows)
}

fn sweep_iters(a: &SweepItersArgs) -> Result<()> {
    let model = experiment::load_model(&a.model)?;
    let nets = experiment::load_networks(&a.net)?;
    let set = load_set(&a.data, a.face_size)?;
    check_networks(&nets, &model, &set)?;
    if nets.len() > 1 && a.max_k > nets.len() {
        return Err(usage(format!("--max-k {} exceeds the {} cascade stages", a.max_k, nets.len())));
    }
    let cfg = eval_config(&a.metric, model.landmark_count())?;
    let traces = set.detect(regressor(&nets, a.max_k), &model)?;
    let rows = (0..=a.max_k)
        .map(|k| {
            let r = set.evaluate_iteration(&traces, k, &cfg)?;
            println!("K={k}: NME {:.6}", r.mean_nme);
            Ok(format!("{k},{},{},{}", r.mean_nme, r.auc, r.failure_rate))
        })
        .collect::<Result<Vec<_>>>()?;
    write_csv(&a.out.join("sweep_iters.csv"), "k,nme,auc,failure_rate", &rows)
}
