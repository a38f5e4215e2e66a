//! Iterative refinement: start from the mean shape placed in the face box
//! and repeatedly add the regressor's predicted increment.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::networks::{Network, NetworkError};
use crate::patches::{extract_patch_set, Image, PatchConfig};
use crate::sampling::mean_center;
use crate::shape::{params_to_shape, LandmarkSet, ShapeError, ShapeModel};

/// Default number of refinement iterations.
pub const DEFAULT_ITERATIONS: usize = 4;

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error("invalid face box {0:?}")]
    InvalidBox(crate::patches::FaceBox),
    #[error("image has {image} channels but the network expects {network}")]
    Channels { image: usize, network: usize },
    #[error("a cascade needs at least one stage")]
    EmptyCascade,
}

pub type Result<T, E = InferenceError> = std::result::Result<T, E>;

/// Every intermediate shape, starting with the initial one. `increment_norms[k]`
/// is the norm of the normalised increment that produced `thetas[k]` (zero
/// for the initial shape).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationTrace {
    pub thetas: Vec<LandmarkSet>,
    pub increment_norms: Vec<f64>,
}

impl IterationTrace {
    pub fn iterations(&self) -> usize {
        self.thetas.len() - 1
    }

    pub fn last(&self) -> &LandmarkSet {
        self.thetas.last().expect("trace holds the initial shape")
    }
}

/// Mean shape at the coarse sampling centre of the image's face box.
pub fn initial_location(image: &Image, model: &ShapeModel) -> Result<LandmarkSet> {
    let b = image.face_box();
    if !b.is_valid() {
        return Err(InferenceError::InvalidBox(b));
    }
    Ok(params_to_shape(&mean_center(model, &b), model)?)
}

fn patch_config(image: &Image, net: &Network) -> Result<PatchConfig> {
    let spec = net.spec();
    if image.channels() != spec.channels() {
        return Err(InferenceError::Channels {
            image: image.channels(),
            network: spec.channels(),
        });
    }
    Ok(PatchConfig::new(spec.patch_size(), spec.channels()))
}

/// One update `θ + side · R(P(θ))`; returns the new shape and the norm of
/// the normalised increment.
pub fn refine(image: &Image, net: &Network, theta: &LandmarkSet) -> Result<(LandmarkSet, f64)> {
    let cfg = patch_config(image, net)?;
    let side = image.face_box().side();
    let inc = net.forward(&extract_patch_set(image, theta, &cfg))?;
    let norm = inc.iter().map(|v| v * v).sum::<f64>().sqrt();
    let scaled: Vec<f64> = inc.iter().map(|v| v * side).collect();
    Ok((theta.offset_by(&scaled), norm))
}

fn iterate<'a>(image: &Image, theta0: LandmarkSet, stages: impl Iterator<Item = &'a Network>) -> Result<IterationTrace> {
    let mut trace = IterationTrace {
        thetas: vec![theta0],
        increment_norms: vec![0.0],
    };
    for net in stages {
        let (next, norm) = refine(image, net, trace.last())?;
        trace.thetas.push(next);
        trace.increment_norms.push(norm);
    }
    Ok(trace)
}

/// Applies the same regressor `iterations` times from `theta0`.
pub fn self_iterate_from(image: &Image, net: &Network, theta0: LandmarkSet, iterations: usize) -> Result<IterationTrace> {
    iterate(image, theta0, std::iter::repeat(net).take(iterations))
}

pub fn self_iterate(image: &Image, net: &Network, model: &ShapeModel, iterations: usize) -> Result<IterationTrace> {
    self_iterate_from(image, net, initial_location(image, model)?, iterations)
}

/// Applies stage `k` at iteration `k`.
pub fn cascade_iterate(image: &Image, stages: &[Network], model: &ShapeModel) -> Result<IterationTrace> {
    if stages.is_empty() {
        return Err(InferenceError::EmptyCascade);
    }
    iterate(image, initial_location(image, model)?, stages.iter())
}

/// Which regressor(s) drive the refinement.
#[derive(Debug, Clone, Copy)]
pub enum Regressor<'a> {
    SelfIterative { net: &'a Network, iterations: usize },
    Cascade(&'a [Network]),
}

/// Runs refinement on every image in parallel; output order follows input.
pub fn detect_all(images: &[&Image], regressor: Regressor<'_>, model: &ShapeModel) -> Result<Vec<IterationTrace>> {
    images
        .par_iter()
        .map(|img| match regressor {
            Regressor::SelfIterative { net, iterations } => self_iterate(img, net, model, iterations),
            Regressor::Cascade(stages) => cascade_iterate(img, stages, model),
        })
        .collect()
}
