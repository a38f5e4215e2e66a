//! Mini-batch training of the self-iterative regressor and of the cascaded
//! baseline on the online sampled stream.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{refine, InferenceError};
use crate::networks::{Network, NetworkError, NetworkSpec};
use crate::patches::PatchConfig;
use crate::sampling::{derive_seed, example_at, Branch, Face, SampleStream, SamplingConfig};
use crate::shape::ShapeModel;
use crate::tensor::{Adadelta, AdadeltaConfig, Tensor, TensorError};

const INIT_TAG: u64 = 0x494e_4954;
const VALID_TAG: u64 = 0x5641_4c49;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("no usable training faces")]
    EmptyDataset,
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error("training diverged at step {step}: {reason}")]
    Diverged {
        step: usize,
        reason: String,
        last_good: Box<Network>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TrainError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_steps: usize,
    pub optimizer: AdadeltaConfig,
    pub sampling: SamplingConfig,
    /// Steps between checkpoints; 0 disables periodic checkpoints.
    pub checkpoint_every: usize,
    /// Seeds parameter initialisation.
    pub seed: u64,
    /// Run on a single thread.
    pub deterministic: bool,
    /// Trailing fraction of the faces held out for validation.
    pub validation_fraction: f64,
    /// Sampling periods drawn once over the validation faces.
    pub validation_periods: usize,
    /// Steps between validation evaluations; 0 evaluates only at the ends.
    pub validate_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_steps: 5000,
            optimizer: AdadeltaConfig::default(),
            sampling: SamplingConfig::default(),
            checkpoint_every: 1000,
            seed: 0,
            deterministic: false,
            validation_fraction: 0.1,
            validation_periods: 4,
            validate_every: 500,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.sampling.validate().map_err(TrainError::Config)?;
        if self.batch_size == 0 || self.max_steps == 0 {
            return Err(TrainError::Config("batch size and step count must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.validation_fraction) {
            return Err(TrainError::Config(format!("validation fraction {} outside [0, 1)", self.validation_fraction)));
        }
        let o = &self.optimizer;
        if !(o.learning_rate > 0.0 && o.weight_decay >= 0.0 && o.rho > 0.0 && o.rho < 1.0 && o.epsilon > 0.0) {
            return Err(TrainError::Config(format!("invalid optimizer settings {o:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchCounts {
    pub mean_shape: usize,
    pub ground_truth: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub mean_batch_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub validation_loss: Option<f64>,
    /// Seconds since the start of the run.
    pub wall_time: f64,
    pub branch_counts: BranchCounts,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub network: Network,
    pub log: Vec<TrainLogRecord>,
}

impl TrainOutcome {
    pub fn initial_validation_loss(&self) -> Option<f64> {
        self.log.iter().find_map(|r| r.validation_loss)
    }

    pub fn final_validation_loss(&self) -> Option<f64> {
        self.log.iter().rev().find_map(|r| r.validation_loss)
    }
}

#[derive(Debug, Clone)]
pub struct CascadeOutcome {
    pub stages: Vec<Network>,
    pub logs: Vec<Vec<TrainLogRecord>>,
}

/// Splits off the trailing `fraction` of faces (at least one when the
/// fraction is positive and two or more faces exist).
pub fn split_validation(faces: &[Face], fraction: f64) -> (&[Face], &[Face]) {
    let n = faces.len();
    if fraction <= 0.0 || n < 2 {
        return (faces, &[]);
    }
    let held = ((n as f64 * fraction).ceil() as usize).clamp(1, n - 1);
    faces.split_at(n - held)
}

/// Patches and targets, owned.
struct Example {
    patches: Vec<Tensor>,
    target: Vec<f64>,
    branch: Branch,
}

/// Generates examples from a stream, first moving every sampled shape
/// through the given earlier cascade stages.
struct ExampleSource<'a> {
    faces: &'a [Face],
    stream: SampleStream<'a>,
    earlier: &'a [Network],
    patch_cfg: PatchConfig,
}

impl ExampleSource<'_> {
    fn batch(&self, start: u64, count: usize) -> Result<Vec<Example>> {
        self.stream
            .shapes(start, count)
            .into_par_iter()
            .map(|s| {
                let face = &self.faces[s.source];
                let mut theta = s.theta;
                for net in self.earlier {
                    theta = refine(&face.image, net, &theta)?.0;
                }
                let (patches, target) = example_at(&face.image, &face.landmarks, theta, &self.patch_cfg);
                Ok(Example {
                    patches,
                    target,
                    branch: s.branch,
                })
            })
            .collect()
    }
}

fn as_batch(examples: &[Example]) -> Vec<(&[Tensor], &[f64])> {
    examples.iter().map(|e| (e.patches.as_slice(), e.target.as_slice())).collect()
}

/// Mean squared increment error of `net` on fixed examples.
fn mean_loss(net: &Network, examples: &[Example]) -> Result<f64> {
    let losses: Vec<f64> = examples
        .par_iter()
        .map(|e| {
            let pred = net.forward(&e.patches)?;
            Ok(pred.iter().zip(&e.target).map(|(p, t)| (p - t) * (p - t)).sum())
        })
        .collect::<Result<_>>()?;
    Ok(losses.iter().sum::<f64>() / losses.len().max(1) as f64)
}

fn count_branches(examples: &[Example]) -> BranchCounts {
    let mean_shape = examples.iter().filter(|e| e.branch == Branch::MeanShape).count();
    BranchCounts {
        mean_shape,
        ground_truth: examples.len() - mean_shape,
    }
}

fn in_pool<T: Send>(deterministic: bool, f: impl FnOnce() -> T + Send) -> T {
    if deterministic {
        rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .expect("single-thread pool")
            .install(f)
    } else {
        f()
    }
}

struct Stage<'a> {
    faces: &'a [Face],
    model: &'a ShapeModel,
    spec: NetworkSpec,
    cfg: TrainConfig,
    earlier: &'a [Network],
    /// Index of this stage; 0 for the self-iterative regressor.
    index: usize,
    out: Option<PathBuf>,
}

impl Stage<'_> {
    fn run(&self) -> Result<TrainOutcome> {
        let cfg = &self.cfg;
        cfg.validate()?;
        let patch_cfg = PatchConfig::new(self.spec.patch_size(), self.spec.channels());
        let (train, valid) = split_validation(self.faces, cfg.validation_fraction);
        let stream = SampleStream::new(train, self.model, cfg.sampling, patch_cfg);
        if stream.faces_per_period() == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let source = ExampleSource {
            faces: train,
            stream,
            earlier: self.earlier,
            patch_cfg,
        };
        let validation = if valid.is_empty() {
            Vec::new()
        } else {
            let vcfg = SamplingConfig {
                seed: derive_seed(cfg.sampling.seed, VALID_TAG, 0),
                ..cfg.sampling
            };
            let vsource = ExampleSource {
                faces: valid,
                stream: SampleStream::new(valid, self.model, vcfg, patch_cfg),
                earlier: self.earlier,
                patch_cfg,
            };
            let n = vsource.stream.faces_per_period() * cfg.validation_periods.max(1);
            vsource.batch(0, n)?
        };

        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, INIT_TAG, self.index as u64));
        let mut net = Network::initialized(self.spec, &mut rng)?;
        let mut opt = Adadelta::new(cfg.optimizer, net.store());

        let mut log_file = None;
        if let Some(dir) = &self.out {
            std::fs::create_dir_all(dir)?;
            log_file = Some(BufWriter::new(File::create(dir.join("log.ndjson"))?));
        }
        let checkpoint = |net: &Network| -> Result<()> {
            if let Some(dir) = &self.out {
                net.save(&dir.join("checkpoint.bin"))?;
            }
            Ok(())
        };

        let start = Instant::now();
        let mut log = Vec::with_capacity(cfg.max_steps + 1);
        let b = cfg.batch_size;
        for step in 0..=cfg.max_steps {
            let examples = source.batch((step * b) as u64, b)?;
            let validate = step == 0 || step == cfg.max_steps || (cfg.validate_every > 0 && step % cfg.validate_every == 0);
            let validation_loss = if validate && !validation.is_empty() {
                Some(mean_loss(&net, &validation)?)
            } else {
                None
            };
            let diverged = |reason: String, net: &Network| -> TrainError {
                let _ = checkpoint(net);
                TrainError::Diverged {
                    step,
                    reason,
                    last_good: Box::new(net.clone()),
                }
            };
            // the final position only reports; no update follows it
            let (loss, grads) = if step < cfg.max_steps {
                let (l, g) = net.loss_and_gradients(&as_batch(&examples))?;
                (l, Some(g))
            } else {
                (mean_loss(&net, &examples)?, None)
            };
            if !loss.is_finite() || validation_loss.is_some_and(|v| !v.is_finite()) {
                return Err(diverged(format!("loss is {loss}"), &net));
            }
            let record = TrainLogRecord {
                step,
                mean_batch_loss: loss,
                validation_loss,
                wall_time: start.elapsed().as_secs_f64(),
                branch_counts: count_branches(&examples),
            };
            if let Some(w) = log_file.as_mut() {
                serde_json::to_writer(&mut *w, &record).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
            if let Some(v) = validation_loss {
                log::info!("stage {} step {step}: batch loss {loss:.6e}, validation loss {v:.6e}", self.index + 1);
            }
            log.push(record);
            if let Some(grads) = grads {
                match opt.step(net.store_mut(), &grads) {
                    Ok(()) => {}
                    Err(TensorError::NonFiniteGradient { param }) => {
                        return Err(diverged(format!("non-finite gradient in `{param}`"), &net));
                    }
                    Err(e) => return Err(NetworkError::from(e).into()),
                }
                if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                    checkpoint(&net)?;
                }
            }
        }
        if let Some(w) = log_file.as_mut() {
            w.flush()?;
        }
        checkpoint(&net)?;
        Ok(TrainOutcome { network: net, log })
    }
}

/// Trains one regressor on the mixture stream. With `out`, writes
/// `log.ndjson` and `checkpoint.bin` (the latest finite weights) there.
pub fn train_sir(faces: &[Face], model: &ShapeModel, spec: NetworkSpec, cfg: &TrainConfig, out: Option<&Path>) -> Result<TrainOutcome> {
    let stage = Stage {
        faces,
        model,
        spec,
        cfg: *cfg,
        earlier: &[],
        index: 0,
        out: out.map(Path::to_path_buf),
    };
    in_pool(cfg.deterministic, || stage.run())
}

/// Trains `stages` regressors in sequence. Every stage draws from the
/// mean-shape branch only with the same stream seed; stage `k` then moves
/// each draw through stages `1..k` before extracting its patches. With
/// `out`, stage `k` writes into `out/stage{k}`.
pub fn train_cr_baseline(
    faces: &[Face],
    model: &ShapeModel,
    spec: NetworkSpec,
    stages: usize,
    cfg: &TrainConfig,
    out: Option<&Path>,
) -> Result<CascadeOutcome> {
    if stages == 0 {
        return Err(TrainError::Config("a cascade needs at least one stage".into()));
    }
    let stage_cfg = TrainConfig {
        sampling: SamplingConfig {
            mixture_weight: 1.0,
            ..cfg.sampling
        },
        ..*cfg
    };
    in_pool(cfg.deterministic, || {
        let mut nets: Vec<Network> = Vec::with_capacity(stages);
        let mut logs = Vec::with_capacity(stages);
        for k in 0..stages {
            let outcome = Stage {
                faces,
                model,
                spec,
                cfg: stage_cfg,
                earlier: &nets,
                index: k,
                out: out.map(|d| d.join(format!("stage{}", k + 1))),
            }
            .run()?;
            nets.push(outcome.network);
            logs.push(outcome.log);
        }
        Ok(CascadeOutcome { stages: nets, logs })
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::LanSpec;
    use crate::patches::{FaceBox, Image, SimilarityMap};
    use crate::shape::{params_to_shape, PoseShapeParams};
    use nalgebra::DMatrix;
    use rand::Rng;

    fn model() -> ShapeModel {
        let mean = vec![-6.0, -3.0, 6.0, -3.0, 0.0, 6.0];
        ShapeModel::new(mean, DMatrix::zeros(6, 0), vec![], vec![1.0, 1.0, 0.05, 0.05]).unwrap()
    }

    fn faces(n: usize, seed: u64) -> Vec<Face> {
        let m = model();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let px = (0..32 * 32).map(|_| rng.gen::<f64>()).collect();
                let img = Image::new(32, 32, 1, px, FaceBox::new(0.0, 0.0, 32.0, 32.0)).unwrap();
                let s = PoseShapeParams {
                    alpha: vec![],
                    t2d: [16.0 + rng.gen_range(-1.0..1.0), 16.0 + rng.gen_range(-1.0..1.0)],
                    beta: rng.gen_range(-0.05..0.05),
                    f: 2.0,
                };
                Face::new(format!("{i}"), img, params_to_shape(&s, &m).unwrap(), SimilarityMap::IDENTITY, &m).unwrap()
            })
            .collect()
    }

    fn spec() -> NetworkSpec {
        NetworkSpec::Lan(LanSpec { hidden_dim: 16, ..LanSpec::new(3, 9, 1) })
    }

    fn cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            max_steps: steps,
            checkpoint_every: 0,
            validate_every: 0,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn validation_split_takes_the_tail() {
        let f = faces(20, 1);
        let (t, v) = split_validation(&f, 0.1);
        assert_eq!((t.len(), v.len()), (18, 2));
        assert_eq!(v[0].id, "18");
        assert_eq!(split_validation(&f[..1], 0.1).1.len(), 0);
    }

    #[test]
    fn memorizes_a_single_example() {
        let f = faces(1, 2);
        let c = TrainConfig {
            batch_size: 1,
            validation_fraction: 0.0,
            sampling: SamplingConfig {
                sigma: 1e-300,
                mixture_weight: 0.0,
                ..SamplingConfig::default()
            },
            ..cfg(500)
        };
        // shift the ground truth away from the sampled location
        let mut f = f;
        f[0].landmarks = f[0].landmarks.translated(1.5, -1.0);
        let out = train_sir(&f, &model(), spec(), &c, None).unwrap();
        let first = out.log[0].mean_batch_loss;
        let last = out.log.last().unwrap().mean_batch_loss;
        assert!(first > 0.0);
        assert!(last < 0.01 * first, "{first} -> {last}");
    }

    #[test]
    fn deterministic_runs_are_bit_identical() {
        let f = faces(6, 3);
        let c = TrainConfig {
            deterministic: true,
            ..cfg(5)
        };
        let a = train_sir(&f, &model(), spec(), &c, None).unwrap();
        let b = train_sir(&f, &model(), spec(), &c, None).unwrap();
        assert_eq!(a.network, b.network);
        let la: Vec<u64> = a.log.iter().map(|r| r.mean_batch_loss.to_bits()).collect();
        let lb: Vec<u64> = b.log.iter().map(|r| r.mean_batch_loss.to_bits()).collect();
        assert_eq!(la, lb);
    }

    #[test]
    fn single_stage_cascade_equals_mean_branch_training() {
        let f = faces(6, 4);
        let c = cfg(4);
        let cr = train_cr_baseline(&f, &model(), spec(), 1, &c, None).unwrap();
        let sir_cfg = TrainConfig {
            sampling: SamplingConfig {
                mixture_weight: 1.0,
                ..c.sampling
            },
            ..c
        };
        let sir = train_sir(&f, &model(), spec(), &sir_cfg, None).unwrap();
        assert_eq!(cr.stages[0], sir.network);
        let a: Vec<f64> = cr.logs[0].iter().map(|r| r.mean_batch_loss).collect();
        let b: Vec<f64> = sir.log.iter().map(|r| r.mean_batch_loss).collect();
        assert_eq!(a, b);
    }

    #[test]
    fn cascade_payload_scales_with_stage_count() {
        let f = faces(6, 5);
        let cr = train_cr_baseline(&f, &model(), spec(), 3, &cfg(2), None).unwrap();
        let single = spec().parameter_count();
        assert_eq!(cr.stages.iter().map(Network::parameter_count).sum::<usize>(), 3 * single);
    }

    #[test]
    fn biases_are_not_decayed() {
        let f = faces(4, 6);
        let with = |weight_decay| {
            let c = TrainConfig {
                optimizer: AdadeltaConfig {
                    weight_decay,
                    ..AdadeltaConfig::default()
                },
                ..cfg(1)
            };
            train_sir(&f, &model(), spec(), &c, None).unwrap().network
        };
        let (decayed, plain) = (with(0.5), with(0.0));
        for (a, b) in decayed.store().params().iter().zip(plain.store().params()) {
            match a.role {
                crate::tensor::ParamRole::Bias => assert_eq!(a.value, b.value, "{}", a.name),
                crate::tensor::ParamRole::Weight => {}
            }
        }
        assert_ne!(decayed, plain);
    }

    #[test]
    fn writes_log_and_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let f = faces(6, 7);
        let c = TrainConfig {
            checkpoint_every: 2,
            ..cfg(3)
        };
        let out = train_sir(&f, &model(), spec(), &c, Some(dir.path())).unwrap();
        let text = std::fs::read_to_string(dir.path().join("log.ndjson")).unwrap();
        let records: Vec<TrainLogRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(records.len(), 4);
        assert!(records.iter().all(|r| r.mean_batch_loss.is_finite() && r.mean_batch_loss >= 0.0));
        assert!(records[0].validation_loss.is_some() && records[3].validation_loss.is_some());
        assert_eq!(Network::load(&dir.path().join("checkpoint.bin")).unwrap(), out.network);
    }

    #[test]
    fn nan_data_aborts_with_last_good_weights() {
        let mut f = faces(4, 8);
        for face in &mut f {
            let img = &face.image;
            let px = vec![f64::NAN; img.pixels().len()];
            face.image = Image::new(img.width(), img.height(), 1, px, img.face_box()).unwrap();
        }
        let c = TrainConfig {
            validation_fraction: 0.0,
            ..cfg(3)
        };
        match train_sir(&f, &model(), spec(), &c, None) {
            Err(TrainError::Diverged { step, last_good, .. }) => {
                assert_eq!(step, 0);
                assert!(last_good.store().params().iter().all(|p| p.value.is_finite()));
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
