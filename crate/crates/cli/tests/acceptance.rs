//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion.
//!
//! `SIR_ACCEPTANCE_ONLY=1,4,9` runs a subset. Failures are reported but do
//! not fail the process unless `SIR_ACCEPTANCE_STRICT` is set.

use std::cell::OnceCell;
use std::f64::consts::PI;
use std::path::Path;
use std::time::Instant;

use anyhow::{ensure, Context, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sir_cli::experiment::{Benchmark, BenchmarkSpec};
use sir_core::inference::Regressor;
use sir_core::metrics::{ced_auc_fr, nme, Normalization};
use sir_core::networks::{LanSpec, Network, NetworkSpec, StackSpec};
use sir_core::sampling::{mean_center, sample_params, Branch, SamplingConfig};
use sir_core::shape::{fit_pca, params_to_shape, rotation, shape_to_params, LandmarkSet, PoseShapeParams, ShapeModel};
use sir_core::tensor::gradcheck::{check_layers, check_network};
use sir_core::tensor::{LayerSpec, Padding, ParamStore, Sequential, Tensor};
use sir_core::train::{train_cr_baseline, train_sir, TrainConfig};

const DESK_STEPS: usize = 5000;
const DESK_BATCH: usize = 16;
const DESK_LR: f64 = 1.0;
const ITERATIONS: usize = 4;
const SIGMAS: [f64; 4] = [0.05, 0.1, 0.2, 0.4];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Result<Verdict> {
    Ok(Verdict {
        pass,
        detail: detail.into(),
    })
}

/// Benchmark data and trained regressors shared by the training criteria.
#[derive(Default)]
struct Desk {
    bench: OnceCell<Benchmark>,
    lan: OnceCell<Network>,
    lan_nme: OnceCell<Vec<f64>>,
}

impl Desk {
    fn bench(&self) -> Result<&Benchmark> {
        if let Some(b) = self.bench.get() {
            return Ok(b);
        }
        let b = Benchmark::synthetic(&BenchmarkSpec::default())?;
        Ok(self.bench.get_or_init(|| b))
    }

    fn config(&self, sigma: f64) -> TrainConfig {
        let mut cfg = TrainConfig {
            batch_size: DESK_BATCH,
            max_steps: DESK_STEPS,
            checkpoint_every: 0,
            ..TrainConfig::default()
        };
        cfg.sampling.sigma = sigma;
        cfg.optimizer.learning_rate = DESK_LR;
        cfg
    }

    fn lan_spec(&self) -> Result<LanSpec> {
        let b = self.bench()?;
        Ok(LanSpec::new(b.model.landmark_count(), 17, b.train[0].image.channels()))
    }

    fn train(&self, spec: NetworkSpec, sigma: f64) -> Result<Network> {
        let b = self.bench()?;
        let t = Instant::now();
        let out = train_sir(&b.train, &b.model, spec, &self.config(sigma), None)?;
        eprintln!("  trained {} params at sigma {sigma} in {:.0?}", out.network.parameter_count(), t.elapsed());
        Ok(out.network)
    }

    fn nme_by_iteration(&self, regressor: Regressor<'_>) -> Result<Vec<f64>> {
        let b = self.bench()?;
        let traces = b.test.detect(regressor, &b.model)?;
        b.test.nme_by_iteration(&traces, &b.eval_config())
    }

    fn lan(&self) -> Result<&Network> {
        if let Some(n) = self.lan.get() {
            return Ok(n);
        }
        let n = self.train(NetworkSpec::Lan(self.lan_spec()?), SamplingConfig::default().sigma)?;
        Ok(self.lan.get_or_init(|| n))
    }

    /// Held-out mean NME of the default-σ LAN after `0..=ITERATIONS` steps.
    fn lan_nme(&self) -> Result<&[f64]> {
        if let Some(v) = self.lan_nme.get() {
            return Ok(v);
        }
        let v = self.nme_by_iteration(Regressor::SelfIterative {
            net: self.lan()?,
            iterations: ITERATIONS,
        })?;
        Ok(self.lan_nme.get_or_init(|| v))
    }
}

fn fmt_list(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.4}")).collect();
    format!("[{}]", parts.join(", "))
}

fn architecture() -> Result<Verdict> {
    let layers = LanSpec::new(68, 57, 3).subnet_layers();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut x = Tensor::new(vec![57, 57, 3], (0..57 * 57 * 3).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let mut seen = Vec::new();
    // one layer at a time so every intermediate activation is observed
    for spec in &layers {
        let mut store = ParamStore::new();
        let seq = Sequential::build(std::slice::from_ref(spec), &mut store, "l");
        store.init_uniform(&mut rng);
        x = seq.forward(&store, &x, None)?;
        if !matches!(spec, LayerSpec::Relu) {
            seen.push(x.shape().to_vec());
        }
    }
    let expected: Vec<Vec<usize>> = vec![
        vec![57, 57, 16],
        vec![29, 29, 16],
        vec![29, 29, 32],
        vec![15, 15, 32],
        vec![15, 15, 64],
        vec![8, 8, 64],
        vec![10],
    ];
    verdict(seen == expected, format!("shapes {seen:?}"))
}

fn conv_count(kh: usize, kw: usize, cin: usize, cout: usize) -> usize {
    kh * kw * cin * cout + cout
}

fn parameter_count() -> Result<Verdict> {
    let spec = LanSpec::new(68, 57, 3);
    // 3×3×3→16, 2×2×16→32, 2×2×32→64, fc 8·8·64→10
    let subnet = conv_count(3, 3, 3, 16) + conv_count(2, 2, 16, 32) + conv_count(2, 2, 32, 64) + (8 * 8 * 64 * 10 + 10);
    let head = (68 * 10 * 256 + 256) + (256 * 136 + 136);
    let oracle = 68 * subnet + head;
    let net = Network::new(NetworkSpec::Lan(spec))?;
    let count = net.parameter_count();
    let bytes = net.to_container().to_bytes().len();
    let payload = 8 * count;
    let reported = 3.72e6;
    let rel = (count as f64 - reported).abs() / reported;
    let overhead = bytes as f64 / payload as f64 - 1.0;
    let pass = subnet == 51_754
        && spec.subnet_parameter_count() == subnet
        && count == oracle
        && count == 3_728_560
        && rel < 0.005
        && (0.0..0.01).contains(&overhead);
    verdict(
        pass,
        format!(
            "total {count} ({:.2}% from 3.72M), sub-network {}, checkpoint {bytes} bytes vs 8×count {payload}",
            100.0 * rel,
            spec.subnet_parameter_count()
        ),
    )
}

fn gradients() -> Result<Verdict> {
    const TOL: f64 = 1e-4;
    const CONFIGS: usize = 20;
    const PROBES: usize = 60;
    let mut worst = (0.0f64, String::new());
    let mut note = |e: f64, what: String| {
        if !(e <= worst.0) {
            worst = (e, what);
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut convs = 0;
    while convs < CONFIGS {
        let (kh, kw) = (rng.gen_range(1..=3usize), rng.gen_range(1..=3usize));
        let stride = rng.gen_range(1..=2usize);
        let padding = Padding {
            top: rng.gen_range(0..=1),
            bottom: rng.gen_range(0..=1),
            left: rng.gen_range(0..=1),
            right: rng.gen_range(0..=1),
        };
        let (oh, ow) = (rng.gen_range(1..=4usize), rng.gen_range(1..=4usize));
        let h = ((oh - 1) * stride + kh).checked_sub(padding.top + padding.bottom);
        let w = ((ow - 1) * stride + kw).checked_sub(padding.left + padding.right);
        let (Some(h), Some(w)) = (h.filter(|&h| h > 0), w.filter(|&w| w > 0)) else {
            continue;
        };
        let cin = rng.gen_range(1..=3);
        let spec = LayerSpec::Conv2d {
            kh,
            kw,
            cin,
            cout: rng.gen_range(1..=4),
            padding,
            stride,
        };
        let r = check_layers(&[spec], &[h, w, cin], rng.gen(), PROBES)?;
        note(r.max_rel_err, format!("conv {}", r.worst));
        convs += 1;
    }
    for _ in 0..CONFIGS {
        let window = rng.gen_range(2..=3);
        let shape = [rng.gen_range(window..=9), rng.gen_range(window..=9), rng.gen_range(1..=3)];
        let spec = LayerSpec::Maxpool2d {
            window,
            stride: rng.gen_range(1..=window),
        };
        let r = check_layers(&[spec], &shape, rng.gen(), PROBES)?;
        note(r.max_rel_err, format!("pool {}", r.worst));

        let (inputs, outputs) = (rng.gen_range(1..=40), rng.gen_range(1..=12));
        let r = check_layers(&[LayerSpec::FullyConnected { inputs, outputs }], &[inputs], rng.gen(), PROBES)?;
        note(r.max_rel_err, format!("fc {}", r.worst));

        let shape = [rng.gen_range(1..=6), rng.gen_range(1..=6), rng.gen_range(1..=4)];
        let r = check_layers(&[LayerSpec::Relu], &shape, rng.gen(), PROBES)?;
        note(r.max_rel_err, format!("relu {}", r.worst));

        let toy = LanSpec {
            hidden_dim: 12,
            ..LanSpec::new(3, 9, 1)
        };
        let r = check_network(NetworkSpec::Lan(toy), rng.gen(), 40)?;
        note(r.max_rel_err, format!("toy LAN {}", r.worst));
    }
    verdict(worst.0 < TOL, format!("worst relative error {:.2e} ({})", worst.0, worst.1))
}

/// Shapes from a known 3-component generator under random similarity pose.
fn generated_shapes(rng: &mut ChaCha8Rng, count: usize) -> Vec<LandmarkSet> {
    let m = 7;
    let base: Vec<[f64; 2]> = (0..m)
        .map(|i| {
            let a = 2.0 * PI * i as f64 / m as f64;
            [a.cos() * (1.0 + 0.2 * (i % 2) as f64), a.sin()]
        })
        .collect();
    let dirs: Vec<Vec<f64>> = (0..3).map(|_| (0..2 * m).map(|_| rng.sample::<f64, _>(StandardNormal) * 0.05).collect()).collect();
    (0..count)
        .map(|_| {
            let w: Vec<f64> = (0..3).map(|k| rng.sample::<f64, _>(StandardNormal) / (k + 1) as f64).collect();
            let r = rotation(rng.gen_range(-0.3..0.3));
            let f = rng.gen_range(30.0..60.0);
            let t = [rng.gen_range(50.0..150.0), rng.gen_range(50.0..150.0)];
            LandmarkSet::new(
                base.iter()
                    .enumerate()
                    .map(|(i, p)| {
                        let x = p[0] + (0..3).map(|k| w[k] * dirs[k][2 * i]).sum::<f64>();
                        let y = p[1] + (0..3).map(|k| w[k] * dirs[k][2 * i + 1]).sum::<f64>();
                        [f * (r[0][0] * x + r[0][1] * y) + t[0], f * (r[1][0] * x + r[1][1] * y) + t[1]]
                    })
                    .collect(),
            )
        })
        .collect()
}

fn random_params(rng: &mut ChaCha8Rng, model: &ShapeModel) -> PoseShapeParams {
    PoseShapeParams {
        alpha: model.component_std().iter().map(|s| s * rng.sample::<f64, _>(StandardNormal)).collect(),
        t2d: [rng.gen_range(-50.0..50.0), rng.gen_range(-50.0..50.0)],
        beta: rng.gen_range(-3.0..3.0),
        f: rng.gen_range(0.5..3.0),
    }
}

fn shape_model() -> Result<Verdict> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let model = fit_pca(&generated_shapes(&mut rng, 60), 0.999)?;
    let b = model.basis();
    let ortho = (b.transpose() * b - nalgebra::DMatrix::identity(b.ncols(), b.ncols())).abs().max();

    let mut round_trip = 0.0f64;
    let mut equivariance = 0.0f64;
    for _ in 0..200 {
        let s = random_params(&mut rng, &model);
        let theta = params_to_shape(&s, &model)?;
        let back = shape_to_params(&theta, &model)?;
        let diff = s.to_vector().iter().zip(back.to_vector()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        round_trip = round_trip.max(diff);

        let (dx, dy) = (rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0));
        let shifted = params_to_shape(&PoseShapeParams { t2d: [s.t2d[0] + dx, s.t2d[1] + dy], ..s.clone() }, &model)?;
        for (p, q) in theta.points().iter().zip(shifted.points()) {
            equivariance = equivariance.max((q[0] - p[0] - dx).abs()).max((q[1] - p[1] - dy).abs());
        }

        let c = rng.gen_range(0.2..5.0);
        let scaled = params_to_shape(&PoseShapeParams { f: s.f * c, ..s.clone() }, &model)?;
        for (p, q) in theta.points().iter().zip(scaled.points()) {
            for d in 0..2 {
                equivariance = equivariance.max(((q[d] - s.t2d[d]) - c * (p[d] - s.t2d[d])).abs());
            }
        }

        let g = rng.gen_range(-1.0..1.0);
        let rotated = params_to_shape(&PoseShapeParams { beta: s.beta + g, ..s.clone() }, &model)?;
        let r = rotation(g);
        for (p, q) in theta.points().iter().zip(rotated.points()) {
            let (x, y) = (p[0] - s.t2d[0], p[1] - s.t2d[1]);
            equivariance = equivariance
                .max((q[0] - s.t2d[0] - (r[0][0] * x + r[0][1] * y)).abs())
                .max((q[1] - s.t2d[1] - (r[1][0] * x + r[1][1] * y)).abs());
        }
    }
    let pass = ortho < 1e-10 && round_trip < 1e-9 && equivariance < 1e-9;
    verdict(
        pass,
        format!("P={} orthonormality {ortho:.1e}, round trip {round_trip:.1e}, equivariance {equivariance:.1e}", model.components()),
    )
}

fn sampling(desk: &Desk) -> Result<Verdict> {
    const DRAWS: usize = 10_000;
    let b = desk.bench()?;
    let model = &b.model;
    let face = &b.train[0];
    let center = mean_center(model, &face.image.face_box());
    let cfg = SamplingConfig::default();
    let scales = model.param_scales();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mean_branch = 0usize;
    let mut sq = vec![0.0; scales.len()];
    for _ in 0..DRAWS {
        let (s, branch) = sample_params(&face.params, &center, model, &cfg, &mut rng);
        let c = match branch {
            Branch::MeanShape => {
                mean_branch += 1;
                &center
            }
            Branch::GroundTruth => &face.params,
        };
        let p = model.components();
        for (d, (x, m)) in s.to_vector().iter().zip(c.to_vector()).enumerate() {
            let mut dev = x - m;
            if d == p + 2 {
                dev = sir_core::shape::wrap_angle(dev);
            }
            sq[d] += dev * dev;
        }
    }
    let freq = mean_branch as f64 / DRAWS as f64;
    let band = 3.0 * (cfg.mixture_weight * (1.0 - cfg.mixture_weight) / DRAWS as f64).sqrt();
    let ratios: Vec<f64> = sq.iter().zip(scales).map(|(s, sc)| (s / DRAWS as f64).sqrt() / (cfg.sigma * sc)).collect();
    let worst = ratios.iter().map(|r| (r - 1.0).abs()).fold(0.0, f64::max);
    let pass = (freq - cfg.mixture_weight).abs() <= band && worst <= 0.05;
    verdict(
        pass,
        format!("mean-shape branch {freq:.4} (0.5 ± {band:.4}), std / σ·scale {}", fmt_list(&ratios)),
    )
}

fn convergence(desk: &Desk) -> Result<Verdict> {
    let v = desk.lan_nme()?;
    let ratio = v[ITERATIONS] / v[0];
    let inversions: Vec<f64> = v.windows(2).filter(|w| w[1] > w[0]).map(|w| w[1] / w[0] - 1.0).collect();
    let monotone = inversions.len() <= 1 && inversions.iter().all(|&r| r <= 0.05);
    verdict(ratio < 0.3 && monotone, format!("NME by K {}, K=4/K=0 = {ratio:.3}, inversions {}", fmt_list(v), inversions.len()))
}

fn sir_vs_cr(desk: &Desk) -> Result<Verdict> {
    let b = desk.bench()?;
    let spec = NetworkSpec::Lan(desk.lan_spec()?);
    let t = Instant::now();
    let cascade = train_cr_baseline(&b.train, &b.model, spec, ITERATIONS, &desk.config(SamplingConfig::default().sigma), None)?;
    eprintln!("  trained {ITERATIONS}-stage cascade in {:.0?}", t.elapsed());
    let cr_params: usize = cascade.stages.iter().map(Network::parameter_count).sum();
    let sir = desk.lan()?;
    let cr_nme = *desk.nme_by_iteration(Regressor::Cascade(&cascade.stages))?.last().context("empty trace")?;
    let sir_nme = desk.lan_nme()?[ITERATIONS];
    let pass = cr_params == ITERATIONS * sir.parameter_count() && sir_nme <= 1.2 * cr_nme;
    verdict(
        pass,
        format!("CR stores {cr_params} = {}×{}, NME SIR {sir_nme:.4} vs CR {cr_nme:.4}", cr_params / sir.parameter_count(), sir.parameter_count()),
    )
}

fn lan_vs_stack(desk: &Desk) -> Result<Verdict> {
    let lan_spec = desk.lan_spec()?;
    let stack_spec = StackSpec::matched_to(&lan_spec);
    let (lp, sp) = (lan_spec.parameter_count(), stack_spec.parameter_count());
    let gap = (sp as f64 - lp as f64).abs() / lp as f64;
    let stack = desk.train(NetworkSpec::Stack(stack_spec), SamplingConfig::default().sigma)?;
    let stack_nme = desk.nme_by_iteration(Regressor::SelfIterative {
        net: &stack,
        iterations: ITERATIONS,
    })?[ITERATIONS];
    let lan_nme = desk.lan_nme()?[ITERATIONS];
    verdict(
        gap < 0.01 && lan_nme <= stack_nme,
        format!("params LAN {lp} vs Stack {sp} ({:.2}%), NME LAN {lan_nme:.4} vs Stack {stack_nme:.4}", 100.0 * gap),
    )
}

fn metrics() -> Result<Verdict> {
    let mut failures = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let norm = Normalization::eye_points(0, 1);
    let random_set = |rng: &mut ChaCha8Rng, m: usize| LandmarkSet::new((0..m).map(|_| [rng.gen_range(0.0..100.0), rng.gen_range(0.0..100.0)]).collect());

    let gt = random_set(&mut rng, 5);
    if nme(&gt, &gt, &norm)? != 0.0 {
        failures.push("pred = gt");
    }
    let d = 0.75;
    let shifted = gt.map(|p| [p[0] + d * 0.6, p[1] - d * 0.8]);
    let dist = {
        let (a, b) = (gt.points()[0], gt.points()[1]);
        ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
    };
    if (nme(&shifted, &gt, &norm)? - d / dist).abs() > 1e-12 {
        failures.push("uniform offset");
    }
    for _ in 0..20 {
        let (pred, gt) = (random_set(&mut rng, 5), random_set(&mut rng, 5));
        let (a, b) = (gt.points()[0], gt.points()[1]);
        let dd = ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
        let mut total = 0.0;
        for i in 0..5 {
            let (p, q) = (pred.points()[i], gt.points()[i]);
            total += ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt();
        }
        if (nme(&pred, &gt, &norm)? - total / 5.0 / dd).abs() > 1e-12 {
            failures.push("brute-force nme");
            break;
        }
    }

    let thr = 0.08;
    let zeros = ced_auc_fr(&[0.0; 6], thr, 81)?;
    if zeros.auc != 1.0 || zeros.failure_rate != 0.0 {
        failures.push("all-zero errors");
    }
    let doubled = ced_auc_fr(&[2.0 * thr; 6], thr, 81)?;
    if doubled.auc != 0.0 || doubled.failure_rate != 1.0 {
        failures.push("all errors at twice the threshold");
    }
    let errs = [0.02, 0.04, 0.06, 0.10];
    let s = ced_auc_fr(&errs, thr, 81)?;
    // step CDF: 1/4 on [0.02, 0.04), 2/4 on [0.04, 0.06), 3/4 on [0.06, 0.08]
    let hand = (0.25 * 0.02 + 0.5 * 0.02 + 0.75 * 0.02) / thr;
    if s.failure_rate != 0.25 || (s.auc - hand).abs() > 1e-12 {
        failures.push("four-error example");
    }
    for _ in 0..20 {
        let errs: Vec<f64> = (0..rng.gen_range(1..30)).map(|_| rng.gen_range(0.0..0.15)).collect();
        let grid = 100_000;
        let brute = (0..grid)
            .map(|i| {
                let e = (i as f64 + 0.5) / grid as f64 * thr;
                errs.iter().filter(|&&x| x <= e).count() as f64 / errs.len() as f64
            })
            .sum::<f64>()
            / grid as f64;
        let s = ced_auc_fr(&errs, thr, 81)?;
        let fr = errs.iter().filter(|&&x| x > thr).count() as f64 / errs.len() as f64;
        if (s.auc - brute).abs() > 1e-4 || s.failure_rate != fr {
            failures.push("brute-force ced integral");
            break;
        }
    }

    let mut monotone = 0;
    for _ in 0..100 {
        let a: Vec<f64> = (0..rng.gen_range(1..40)).map(|_| rng.gen_range(0.0..0.15)).collect();
        let b: Vec<f64> = a.iter().map(|x| x + rng.gen_range(0.0..0.03)).collect();
        if ced_auc_fr(&a, thr, 81)?.auc >= ced_auc_fr(&b, thr, 81)?.auc {
            monotone += 1;
        }
    }
    if monotone != 100 {
        failures.push("auc monotonicity");
    }
    let detail = if failures.is_empty() {
        format!("examples and oracles match, auc monotone on {monotone}/100 pairs, four-error auc {:.4}", s.auc)
    } else {
        format!("mismatch: {}", failures.join(", "))
    };
    verdict(failures.is_empty(), detail)
}

fn sigma_sweep(desk: &Desk) -> Result<Verdict> {
    let spec = NetworkSpec::Lan(desk.lan_spec()?);
    let default_sigma = SamplingConfig::default().sigma;
    let mut nmes = Vec::new();
    for sigma in SIGMAS {
        let v = if sigma == default_sigma {
            desk.lan_nme()?[ITERATIONS]
        } else {
            let net = desk.train(spec, sigma)?;
            desk.nme_by_iteration(Regressor::SelfIterative { net: &net, iterations: ITERATIONS })?[ITERATIONS]
        };
        nmes.push(v);
    }
    let best = (0..nmes.len()).min_by(|&a, &b| nmes[a].total_cmp(&nmes[b])).unwrap();
    let interior = best > 0 && best + 1 < nmes.len();
    let rows: Vec<String> = SIGMAS.iter().zip(&nmes).map(|(s, n)| format!("σ={s}: {n:.4}")).collect();
    verdict(interior, format!("K=4 NME {}, minimum at σ={}", rows.join(", "), SIGMAS[best]))
}

fn cli(args: &[&str]) -> Result<()> {
    let mut argv = vec!["sir"];
    argv.extend_from_slice(args);
    let code = sir_cli::run(argv);
    ensure!(code == 0, "`sir {}` exited with {code}", args.join(" "));
    Ok(())
}

fn pipeline(root: &Path) -> Result<()> {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    cli(&["synth", "--out", &p("train"), "--count", "40", "--seed", "3"])?;
    cli(&["synth", "--out", &p("test"), "--count", "12", "--seed", "4"])?;
    cli(&["fit-model", "--data", &p("train/manifest.json"), "--out", &p("model")])?;
    let common = [
        "--data",
        &p("train/manifest.json"),
        "--model",
        &p("model/model.bin"),
        "--steps",
        "60",
        "--batch",
        "8",
        "--hidden",
        "32",
        "--checkpoint-every",
        "20",
        "--validate-every",
        "20",
        "--deterministic",
        "--seed",
        "5",
    ];
    let mut sir_args = vec!["train-sir", "--out"];
    let sir_out = p("sir");
    sir_args.push(&sir_out);
    sir_args.extend_from_slice(&common);
    cli(&sir_args)?;
    let mut cr_args = vec!["train-cr", "--stages", "2", "--out"];
    let cr_out = p("cr");
    cr_args.push(&cr_out);
    cr_args.extend_from_slice(&common);
    cli(&cr_args)?;
    for (net, out) in [("sir", "pred_sir"), ("cr", "pred_cr")] {
        cli(&["detect", "--data", &p("test/manifest.json"), "--model", &p("model/model.bin"), "--net", &p(net), "--out", &p(out)])?;
        let report = format!("report_{net}");
        cli(&["eval", "--data", &p("test/manifest.json"), "--pred", &p(out), "--out", &p(&report)])?;
    }
    Ok(())
}

/// Every deterministic artifact under `root`, keyed by relative path.
/// Logs and snapshots are excluded: logs carry wall-clock times and
/// snapshots carry absolute paths.
fn artifacts(root: &Path) -> Result<Vec<(String, Vec<u8>)>> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
                continue;
            }
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            if name == "log.ndjson" || name == "config.json" {
                continue;
            }
            let rel = path.strip_prefix(root)?.to_string_lossy().into_owned();
            out.push((rel, std::fs::read(&path)?));
        }
    }
    out.sort();
    Ok(out)
}

fn determinism() -> Result<Verdict> {
    let tmp = tempfile::tempdir()?;
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    pipeline(&a)?;
    pipeline(&b)?;
    let (fa, fb) = (artifacts(&a)?, artifacts(&b)?);
    let mut differing: Vec<&str> = fa.iter().zip(&fb).filter(|(x, y)| x != y).map(|(x, _)| x.0.as_str()).collect();
    if fa.len() != fb.len() {
        differing.push("<file set>");
    }

    // replaying a recorded snapshot into a fresh directory
    let replayed = tmp.path().join("replayed");
    let config = a.join("sir").join("config.json");
    cli(&["replay", "--config", &config.to_string_lossy(), "--out", &replayed.to_string_lossy()])?;
    let replay_same = std::fs::read(a.join("sir/checkpoint.bin"))? == std::fs::read(replayed.join("checkpoint.bin"))?;
    if !replay_same {
        differing.push("replayed checkpoint");
    }
    let kinds = ["checkpoint.bin", ".pts", "report.json", "traces.json"];
    let covered = kinds.iter().all(|k| fa.iter().any(|(n, _)| n.ends_with(k)));
    verdict(
        differing.is_empty() && covered,
        format!("{} artifacts compared, {} differ {:?}", fa.len(), differing.len(), differing),
    )
}

fn main() {
    let only: Option<Vec<u32>> = std::env::var("SIR_ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let strict = std::env::var_os("SIR_ACCEPTANCE_STRICT").is_some();
    let desk = Desk::default();
    type Check<'a> = Box<dyn Fn() -> Result<Verdict> + 'a>;
    let criteria: Vec<(u32, &str, Check)> = vec![
        (1, "architecture shapes", Box::new(architecture)),
        (2, "parameter count", Box::new(parameter_count)),
        (3, "gradient correctness", Box::new(gradients)),
        (4, "shape model", Box::new(shape_model)),
        (5, "sampling distribution", Box::new(|| sampling(&desk))),
        (6, "desk-scale convergence", Box::new(|| convergence(&desk))),
        (7, "SIR vs cascaded regression", Box::new(|| sir_vs_cr(&desk))),
        (8, "LAN vs stacked network", Box::new(|| lan_vs_stack(&desk))),
        (9, "metric oracles", Box::new(metrics)),
        (10, "sigma sweep", Box::new(|| sigma_sweep(&desk))),
        (11, "deterministic replay", Box::new(determinism)),
    ];
    let mut failed = 0;
    for (id, name, check) in &criteria {
        if only.as_ref().is_some_and(|o| !o.contains(id)) {
            continue;
        }
        let t = Instant::now();
        let v = check().unwrap_or_else(|e| Verdict {
            pass: false,
            detail: format!("error: {e:#}"),
        });
        if !v.pass {
            failed += 1;
        }
        println!("{} AC{id} {name}: {} [{:.1?}]", if v.pass { "PASS" } else { "FAIL" }, v.detail, t.elapsed());
    }
    println!("acceptance: {failed} failing");
    if strict && failed > 0 {
        std::process::exit(1);
    }
}
