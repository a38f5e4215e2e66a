//! Pieces shared by the subcommands and the acceptance suite: model files,
//! normalised evaluation sets and per-iteration scoring.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use sir_core::inference::{detect_all, IterationTrace, Regressor};
use sir_core::io::RawEntry;
use sir_core::metrics::{evaluate, EvalConfig, EvalReport, Normalization};
use sir_core::networks::Network;
use sir_core::patches::{normalize_face, Image, NormalizeConfig, SimilarityMap};
use sir_core::sampling::Face;
use sir_core::shape::{fit_pca, LandmarkSet, ShapeModel};
use sir_core::synth::{generate_dataset, SyntheticSpec};
use sir_core::tensor::container::Container;

pub const MODEL_FILE: &str = "model.bin";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";

pub fn save_model(model: &ShapeModel, path: &Path) -> Result<()> {
    model
        .to_container()
        .save(path)
        .with_context(|| format!("writing {}", path.display()))
}

pub fn load_model(path: &Path) -> Result<ShapeModel> {
    let c = Container::load(path).with_context(|| format!("reading {}", path.display()))?;
    ShapeModel::from_container(&c).with_context(|| format!("decoding {}", path.display()))
}

/// Expands `--net` arguments: files load as is, directories contribute their
/// checkpoint or, for cascades, `stage1..K`.
pub fn resolve_networks(paths: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in paths {
        if !p.is_dir() {
            out.push(p.clone());
            continue;
        }
        let direct = p.join(CHECKPOINT_FILE);
        if direct.is_file() {
            out.push(direct);
            continue;
        }
        let mut k = 1;
        while p.join(format!("stage{k}")).join(CHECKPOINT_FILE).is_file() {
            out.push(p.join(format!("stage{k}")).join(CHECKPOINT_FILE));
            k += 1;
        }
        if k == 1 {
            bail!("{}: no {CHECKPOINT_FILE} or stage directories found", p.display());
        }
    }
    Ok(out)
}

pub fn load_networks(paths: &[PathBuf]) -> Result<Vec<Network>> {
    resolve_networks(paths)?
        .iter()
        .map(|p| Network::load(p).with_context(|| format!("loading {}", p.display())))
        .collect()
}

pub fn default_normalization(landmark_count: usize) -> Normalization {
    if landmark_count == 68 {
        Normalization::inter_ocular_68()
    } else {
        Normalization::eye_points(0, 1)
    }
}

/// Images resampled to the network's frame plus the maps back to raw pixels.
#[derive(Debug, Clone)]
pub struct NormalizedSet {
    pub ids: Vec<String>,
    pub images: Vec<Image>,
    pub maps: Vec<SimilarityMap>,
    /// Raw-frame annotations, where present.
    pub ground_truth: Vec<Option<LandmarkSet>>,
}

impl NormalizedSet {
    pub fn from_raw(raw: Vec<RawEntry>, norm: &NormalizeConfig) -> Result<Self> {
        let mut set = NormalizedSet {
            ids: Vec::with_capacity(raw.len()),
            images: Vec::with_capacity(raw.len()),
            maps: Vec::with_capacity(raw.len()),
            ground_truth: Vec::with_capacity(raw.len()),
        };
        for r in raw {
            let n = normalize_face(&r.image, norm).with_context(|| format!("normalising {}", r.id))?;
            set.ids.push(r.id);
            set.images.push(n.image);
            set.maps.push(n.map);
            set.ground_truth.push(r.landmarks);
        }
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn annotations(&self) -> Result<Vec<LandmarkSet>> {
        self.ground_truth
            .iter()
            .zip(&self.ids)
            .map(|(g, id)| g.clone().with_context(|| format!("{id} has no annotation")))
            .collect()
    }

    pub fn detect(&self, regressor: Regressor<'_>, model: &ShapeModel) -> Result<Vec<IterationTrace>> {
        let refs: Vec<&Image> = self.images.iter().collect();
        Ok(detect_all(&refs, regressor, model)?)
    }

    /// Iterate `k` of every trace, in raw image coordinates.
    pub fn raw_shapes(&self, traces: &[IterationTrace], k: usize) -> Vec<LandmarkSet> {
        traces
            .iter()
            .zip(&self.maps)
            .map(|(t, m)| m.landmarks_to_raw(&t.thetas[k.min(t.iterations())]))
            .collect()
    }

    pub fn evaluate_iteration(&self, traces: &[IterationTrace], k: usize, cfg: &EvalConfig) -> Result<EvalReport> {
        Ok(evaluate(&self.raw_shapes(traces, k), &self.annotations()?, cfg)?)
    }

    /// Mean NME after `0..=K` iterations.
    pub fn nme_by_iteration(&self, traces: &[IterationTrace], cfg: &EvalConfig) -> Result<Vec<f64>> {
        let k_max = traces.iter().map(IterationTrace::iterations).max().unwrap_or(0);
        (0..=k_max)
            .map(|k| Ok(self.evaluate_iteration(traces, k, cfg)?.mean_nme))
            .collect()
    }
}

/// An in-memory synthetic train/test pair with a shape model fitted to the
/// training annotations.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub model: ShapeModel,
    pub train: Vec<Face>,
    pub test: NormalizedSet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkSpec {
    pub train: SyntheticSpec,
    pub test: SyntheticSpec,
    pub face_size: usize,
    pub variance: f64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        let train = SyntheticSpec::default();
        Self {
            train,
            test: SyntheticSpec {
                seed: 1001,
                count: 100,
                ..train
            },
            face_size: train.image_size,
            variance: 0.98,
        }
    }
}

fn synthetic_entries(spec: &SyntheticSpec) -> Result<Vec<RawEntry>> {
    let d = generate_dataset(spec)?;
    Ok(d.faces
        .into_iter()
        .enumerate()
        .map(|(i, f)| RawEntry {
            id: format!("face_{i:04}"),
            image: f.image,
            landmarks: Some(f.landmarks),
        })
        .collect())
}

/// Normalises and fits annotated faces; the model is fitted in the
/// normalised frame.
pub fn training_faces(set: &NormalizedSet, model: &ShapeModel) -> Result<Vec<Face>> {
    set.ids
        .iter()
        .zip(&set.images)
        .zip(&set.maps)
        .zip(set.annotations()?)
        .map(|(((id, img), map), gt)| {
            let local = map.landmarks_to_normalized(&gt);
            Face::new(id.clone(), img.clone(), local, *map, model).with_context(|| format!("fitting {id}"))
        })
        .collect()
}

/// Fits the shape model to annotations mapped into the normalised frame.
pub fn fit_model(set: &NormalizedSet, variance: f64) -> Result<ShapeModel> {
    let shapes: Vec<LandmarkSet> = set
        .annotations()?
        .iter()
        .zip(&set.maps)
        .map(|(g, m)| m.landmarks_to_normalized(g))
        .collect();
    Ok(fit_pca(&shapes, variance)?)
}

impl Benchmark {
    pub fn synthetic(spec: &BenchmarkSpec) -> Result<Self> {
        let norm = NormalizeConfig {
            face_size: spec.face_size,
            ..NormalizeConfig::default()
        };
        let train_set = NormalizedSet::from_raw(synthetic_entries(&spec.train)?, &norm)?;
        let model = fit_model(&train_set, spec.variance)?;
        let train = training_faces(&train_set, &model)?;
        let test = NormalizedSet::from_raw(synthetic_entries(&spec.test)?, &norm)?;
        Ok(Self { model, train, test })
    }

    pub fn eval_config(&self) -> EvalConfig {
        EvalConfig::new(default_normalization(self.model.landmark_count()))
    }
}
