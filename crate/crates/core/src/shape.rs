//! Statistical landmark model: a PCA shape basis in a canonical frame plus a
//! similarity pose,
//!
//! ```text
//! θ(S) = f · R(β) · (S₀ + A·α) + t
//! ```
//!
//! Shapes are Procrustes-aligned before PCA so that the basis carries no pose:
//! every basis column is orthogonal to the mean shape, to its 90° rotation,
//! and to both translations. That makes [`shape_to_params`] an exact inverse
//! of [`params_to_shape`] on the model's span.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::container::{Container, EntryRole};
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShapeError {
    #[error("need at least {needed} shapes, found {found}")]
    InsufficientData { needed: usize, found: usize },
    #[error("landmark count mismatch: expected {expected}, found {found}")]
    LandmarkCount { expected: usize, found: usize },
    #[error("shape coefficient count mismatch: expected {expected}, found {found}")]
    CoefficientCount { expected: usize, found: usize },
    #[error("degenerate shape: {0}")]
    SingularFit(String),
    #[error("invalid model: {0}")]
    InvalidModel(String),
}

pub type Result<T, E = ShapeError> = std::result::Result<T, E>;

/// Ordered landmark positions in pixels; equivalent to the flat vector
/// `(x1, y1, ..., xM, yM)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandmarkSet {
    points: Vec<[f64; 2]>,
}

impl LandmarkSet {
    pub fn new(points: Vec<[f64; 2]>) -> Self {
        Self { points }
    }

    pub fn from_flat(flat: &[f64]) -> Self {
        assert!(flat.len() % 2 == 0, "flat landmark vector must have even length");
        Self {
            points: flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect(),
        }
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p[0], p[1]]).collect()
    }

    pub fn points(&self) -> &[[f64; 2]] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> [f64; 2] {
        centroid(&self.to_flat())
    }

    pub fn translated(&self, dx: f64, dy: f64) -> Self {
        Self {
            points: self.points.iter().map(|p| [p[0] + dx, p[1] + dy]).collect(),
        }
    }

    pub fn map(&self, f: impl Fn([f64; 2]) -> [f64; 2]) -> Self {
        Self {
            points: self.points.iter().map(|&p| f(p)).collect(),
        }
    }

    /// Adds a flat `2M` increment.
    pub fn offset_by(&self, delta: &[f64]) -> Self {
        assert_eq!(delta.len(), 2 * self.points.len());
        Self {
            points: self
                .points
                .iter()
                .zip(delta.chunks_exact(2))
                .map(|(p, d)| [p[0] + d[0], p[1] + d[1]])
                .collect(),
        }
    }

    /// Bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> [f64; 4] {
        let mut b = [f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY];
        for p in &self.points {
            b[0] = b[0].min(p[0]);
            b[1] = b[1].min(p[1]);
            b[2] = b[2].max(p[0]);
            b[3] = b[3].max(p[1]);
        }
        b
    }
}

/// Shape coefficients plus similarity pose, `S = [α, t, β, f]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseShapeParams {
    pub alpha: Vec<f64>,
    pub t2d: [f64; 2],
    pub beta: f64,
    pub f: f64,
}

impl PoseShapeParams {
    pub fn identity(components: usize) -> Self {
        Self {
            alpha: vec![0.0; components],
            t2d: [0.0, 0.0],
            beta: 0.0,
            f: 1.0,
        }
    }

    /// Flat layout `[α..., tx, ty, β, f]`.
    pub fn to_vector(&self) -> Vec<f64> {
        let mut v = self.alpha.clone();
        v.extend_from_slice(&[self.t2d[0], self.t2d[1], self.beta, self.f]);
        v
    }

    pub fn from_vector(v: &[f64]) -> Self {
        assert!(v.len() >= 4, "parameter vector needs at least the four pose entries");
        let p = v.len() - 4;
        Self {
            alpha: v[..p].to_vec(),
            t2d: [v[p], v[p + 1]],
            beta: wrap_angle(v[p + 2]),
            f: v[p + 3],
        }
    }
}

/// Wraps an angle to `(-π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    use std::f64::consts::PI;
    let mut r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r -= 2.0 * PI;
    }
    r
}

pub fn rotation(beta: f64) -> [[f64; 2]; 2] {
    let (s, c) = beta.sin_cos();
    [[c, -s], [s, c]]
}

fn centroid(flat: &[f64]) -> [f64; 2] {
    let m = (flat.len() / 2).max(1) as f64;
    let (sx, sy) = flat.chunks_exact(2).fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
    [sx / m, sy / m]
}

fn centered(flat: &[f64]) -> Vec<f64> {
    let c = centroid(flat);
    flat.chunks_exact(2).flat_map(|p| [p[0] - c[0], p[1] - c[1]]).collect()
}

fn norm_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Complex least-squares factor `c` minimising `|z - c·m|²` with shapes read
/// as complex vectors; returns `(Re c, Im c)`.
fn similarity_fit(m: &[f64], z: &[f64]) -> (f64, f64) {
    let mm = norm_sq(m);
    let (mut dot, mut cross) = (0.0, 0.0);
    for (a, b) in m.chunks_exact(2).zip(z.chunks_exact(2)) {
        dot += a[0] * b[0] + a[1] * b[1];
        cross += a[0] * b[1] - a[1] * b[0];
    }
    (dot / mm, cross / mm)
}

/// `z / c` for complex scalar `c = a + ib` applied pointwise.
fn complex_divide(z: &[f64], a: f64, b: f64) -> Vec<f64> {
    let d = a * a + b * b;
    z.chunks_exact(2)
        .flat_map(|p| [(p[0] * a + p[1] * b) / d, (p[1] * a - p[0] * b) / d])
        .collect()
}

fn rotate_flat(z: &[f64], angle: f64) -> Vec<f64> {
    let (s, c) = angle.sin_cos();
    z.chunks_exact(2).flat_map(|p| [c * p[0] - s * p[1], s * p[0] + c * p[1]]).collect()
}

/// Generative landmark model.
#[derive(Debug, Clone, PartialEq)]
pub struct ShapeModel {
    mean: Vec<f64>,
    basis: DMatrix<f64>,
    component_std: Vec<f64>,
    param_scales: Vec<f64>,
}

impl ShapeModel {
    pub fn new(mean: Vec<f64>, basis: DMatrix<f64>, component_std: Vec<f64>, param_scales: Vec<f64>) -> Result<Self> {
        let p = basis.ncols();
        if mean.len() % 2 != 0 || mean.is_empty() || basis.nrows() != mean.len() {
            return Err(ShapeError::InvalidModel(format!(
                "mean has {} entries but basis has {} rows",
                mean.len(),
                basis.nrows()
            )));
        }
        if component_std.len() != p || param_scales.len() != p + 4 {
            return Err(ShapeError::InvalidModel(format!(
                "{p} components need {p} stds and {} parameter scales",
                p + 4
            )));
        }
        let c = centroid(&mean);
        let size = norm_sq(&mean).sqrt().max(1.0);
        if c[0].abs() > 1e-9 * size || c[1].abs() > 1e-9 * size {
            return Err(ShapeError::InvalidModel(format!("mean shape centroid {c:?} is not at the origin")));
        }
        let gram = basis.transpose() * &basis;
        if (gram - DMatrix::identity(p, p)).amax() > 1e-10 {
            return Err(ShapeError::InvalidModel("basis columns are not orthonormal".into()));
        }
        Ok(Self {
            mean,
            basis,
            component_std,
            param_scales,
        })
    }

    pub fn landmark_count(&self) -> usize {
        self.mean.len() / 2
    }

    pub fn components(&self) -> usize {
        self.basis.ncols()
    }

    pub fn mean_shape(&self) -> LandmarkSet {
        LandmarkSet::from_flat(&self.mean)
    }

    pub fn mean_flat(&self) -> &[f64] {
        &self.mean
    }

    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn component_std(&self) -> &[f64] {
        &self.component_std
    }

    /// Per-dimension sampling scales in `[α..., tx, ty, β, f]` order.
    pub fn param_scales(&self) -> &[f64] {
        &self.param_scales
    }

    pub fn to_container(&self) -> Container {
        let header = serde_json::json!({
            "landmarks": self.landmark_count(),
            "components": self.components(),
        });
        let mut c = Container::new("shape-model", header.to_string());
        let m = self.mean.len();
        c.push("mean", EntryRole::Data, Tensor::from_vec(self.mean.clone()));
        // row-major 2M × P
        let mut basis = Vec::with_capacity(m * self.components());
        for r in 0..m {
            for k in 0..self.components() {
                basis.push(self.basis[(r, k)]);
            }
        }
        if self.components() > 0 {
            c.push(
                "basis",
                EntryRole::Data,
                Tensor::new(vec![m, self.components()], basis).expect("basis shape"),
            );
            c.push("component_std", EntryRole::Data, Tensor::from_vec(self.component_std.clone()));
        }
        c.push("param_scales", EntryRole::Data, Tensor::from_vec(self.param_scales.clone()));
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        if c.kind != "shape-model" {
            return Err(ShapeError::InvalidModel(format!("container kind is `{}`", c.kind)));
        }
        let get = |name: &str| {
            c.get(name)
                .ok_or_else(|| ShapeError::InvalidModel(format!("missing entry `{name}`")))
        };
        let mean = get("mean")?.data().to_vec();
        let scales = get("param_scales")?.data().to_vec();
        let p = scales.len().saturating_sub(4);
        let (basis, std) = if p == 0 {
            (DMatrix::zeros(mean.len(), 0), Vec::new())
        } else {
            let b = get("basis")?;
            if b.shape() != [mean.len(), p] {
                return Err(ShapeError::InvalidModel(format!("basis shape {:?}", b.shape())));
            }
            (
                DMatrix::from_row_slice(mean.len(), p, b.data()),
                get("component_std")?.data().to_vec(),
            )
        };
        Self::new(mean, basis, std, scales)
    }
}

/// Fits the PCA+pose model. Shapes are aligned with generalised Procrustes
/// analysis (full similarity), then the smallest number of components whose
/// cumulative variance reaches `variance_keep` is retained.
pub fn fit_pca(shapes: &[LandmarkSet], variance_keep: f64) -> Result<ShapeModel> {
    if shapes.len() < 2 {
        return Err(ShapeError::InsufficientData {
            needed: 2,
            found: shapes.len(),
        });
    }
    let m = shapes[0].len();
    if m < 2 {
        return Err(ShapeError::SingularFit("a shape needs at least two landmarks".into()));
    }
    let mut data = Vec::with_capacity(shapes.len());
    for s in shapes {
        if s.len() != m {
            return Err(ShapeError::LandmarkCount {
                expected: m,
                found: s.len(),
            });
        }
        let c = centered(&s.to_flat());
        if norm_sq(&c) <= f64::MIN_POSITIVE {
            return Err(ShapeError::SingularFit("all landmarks coincide".into()));
        }
        data.push(c);
    }
    let reference = data[0].clone();
    let target_size = data.iter().map(|c| norm_sq(c).sqrt()).sum::<f64>() / data.len() as f64;

    let align_all = |mean: &[f64]| -> Vec<Vec<f64>> {
        data.iter()
            .map(|z| {
                let (a, b) = similarity_fit(mean, z);
                complex_divide(z, a, b)
            })
            .collect()
    };

    let mut mean = reference.clone();
    for _ in 0..500 {
        let aligned = align_all(&mean);
        let mut next = vec![0.0; 2 * m];
        for a in &aligned {
            for (n, v) in next.iter_mut().zip(a) {
                *n += v;
            }
        }
        // fix the gauge: orientation of the first shape, average size
        let (a, b) = similarity_fit(&next, &reference);
        next = rotate_flat(&next, b.atan2(a));
        let s = target_size / norm_sq(&next).sqrt();
        next.iter_mut().for_each(|v| *v *= s);
        let change: f64 = next.iter().zip(&mean).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        mean = next;
        if change <= 1e-15 * target_size {
            break;
        }
    }

    let mean_rot: Vec<f64> = mean.chunks_exact(2).flat_map(|p| [-p[1], p[0]]).collect();
    let mm = norm_sq(&mean);
    let deviations: Vec<Vec<f64>> = align_all(&mean)
        .into_iter()
        .map(|a| {
            let mut d: Vec<f64> = a.iter().zip(&mean).map(|(x, y)| x - y).collect();
            for dir in [&mean, &mean_rot] {
                let proj = d.iter().zip(dir.iter()).map(|(x, y)| x * y).sum::<f64>() / mm;
                d.iter_mut().zip(dir.iter()).for_each(|(x, y)| *x -= proj * y);
            }
            d
        })
        .collect();

    let n = deviations.len();
    let dim = 2 * m;
    let dmat = DMatrix::from_fn(dim, n, |r, c| deviations[c][r]);
    let cov = (&dmat * dmat.transpose()) / (n as f64 - 1.0);
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..dim).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values: Vec<f64> = order.iter().map(|&i| eig.eigenvalues[i].max(0.0)).collect();
    let total: f64 = values.iter().sum();
    let keep = variance_keep.clamp(0.0, 1.0);
    let mut p = 0;
    if total > 1e-24 * target_size * target_size {
        let mut cum = 0.0;
        for v in &values {
            if cum / total >= keep - 1e-12 {
                break;
            }
            cum += v;
            p += 1;
        }
    }
    let mut basis = DMatrix::zeros(dim, p);
    for (k, &i) in order.iter().take(p).enumerate() {
        let mut col: DVector<f64> = eig.eigenvectors.column(i).into_owned();
        let pivot = col.iter().copied().fold(0.0f64, |best, v| if v.abs() > best.abs() { v } else { best });
        if pivot < 0.0 {
            col.neg_mut();
        }
        basis.set_column(k, &col);
    }
    let component_std: Vec<f64> = values[..p].iter().map(|v| v.sqrt()).collect();

    let mut scales = component_std.clone();
    scales.extend_from_slice(&[0.0; 4]);
    let mut model = ShapeModel::new(mean, basis, component_std, scales)?;
    let poses = shapes
        .iter()
        .map(|s| shape_to_params(s, &model))
        .collect::<Result<Vec<_>>>()?;
    let pose_vals: [Vec<f64>; 4] = [
        poses.iter().map(|q| q.t2d[0]).collect(),
        poses.iter().map(|q| q.t2d[1]).collect(),
        poses.iter().map(|q| q.beta).collect(),
        poses.iter().map(|q| q.f).collect(),
    ];
    for (i, vals) in pose_vals.iter().enumerate() {
        model.param_scales[p + i] = sample_std(vals);
    }
    Ok(model)
}

fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (v.len() as f64 - 1.0)).sqrt()
}

/// Synthesises landmarks from model parameters.
pub fn params_to_shape(s: &PoseShapeParams, model: &ShapeModel) -> Result<LandmarkSet> {
    if s.alpha.len() != model.components() {
        return Err(ShapeError::CoefficientCount {
            expected: model.components(),
            found: s.alpha.len(),
        });
    }
    let mut canonical = model.mean.clone();
    for (k, &a) in s.alpha.iter().enumerate() {
        if a != 0.0 {
            for (c, b) in canonical.iter_mut().zip(model.basis.column(k).iter()) {
                *c += a * b;
            }
        }
    }
    let r = rotation(s.beta);
    Ok(LandmarkSet::new(
        canonical
            .chunks_exact(2)
            .map(|p| {
                [
                    s.f * (r[0][0] * p[0] + r[0][1] * p[1]) + s.t2d[0],
                    s.f * (r[1][0] * p[0] + r[1][1] * p[1]) + s.t2d[1],
                ]
            })
            .collect(),
    ))
}

/// Recovers pose by similarity Procrustes against the mean shape and shape
/// coefficients by projecting the canonical residual onto the basis.
pub fn shape_to_params(theta: &LandmarkSet, model: &ShapeModel) -> Result<PoseShapeParams> {
    if theta.len() != model.landmark_count() {
        return Err(ShapeError::LandmarkCount {
            expected: model.landmark_count(),
            found: theta.len(),
        });
    }
    let flat = theta.to_flat();
    let t = centroid(&flat);
    let z = centered(&flat);
    if norm_sq(&z) <= f64::MIN_POSITIVE {
        return Err(ShapeError::SingularFit("all landmarks coincide".into()));
    }
    let (a, b) = similarity_fit(&model.mean, &z);
    if a * a + b * b <= f64::MIN_POSITIVE {
        return Err(ShapeError::SingularFit("shape is orthogonal to the mean shape".into()));
    }
    let canonical = complex_divide(&z, a, b);
    let residual = DVector::from_iterator(
        canonical.len(),
        canonical.iter().zip(&model.mean).map(|(c, m)| c - m),
    );
    let alpha = (model.basis.transpose() * residual).iter().copied().collect();
    Ok(PoseShapeParams {
        alpha,
        t2d: t,
        beta: wrap_angle(b.atan2(a)),
        f: (a * a + b * b).sqrt(),
    })
}

/// Distance between `theta` and its reconstruction through the model.
pub fn reconstruction_error(theta: &LandmarkSet, model: &ShapeModel) -> Result<f64> {
    let s = shape_to_params(theta, model)?;
    let back = params_to_shape(&s, model)?;
    Ok(theta
        .to_flat()
        .iter()
        .zip(back.to_flat())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn base_shape() -> Vec<f64> {
        vec![-3.0, -2.0, 3.0, -2.0, 0.0, 0.5, -2.0, 3.0, 2.0, 3.5, 0.5, -4.0]
    }

    /// Orthonormal directions orthogonal to translations, `mean` and its
    /// rotation, built by Gram-Schmidt from random vectors.
    fn free_directions(mean: &[f64], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
        let n = mean.len();
        let mut fixed: Vec<Vec<f64>> = vec![
            (0..n).map(|i| if i % 2 == 0 { 1.0 } else { 0.0 }).collect(),
            (0..n).map(|i| if i % 2 == 1 { 1.0 } else { 0.0 }).collect(),
            mean.to_vec(),
            mean.chunks_exact(2).flat_map(|p| [-p[1], p[0]]).collect(),
        ];
        let mut out = Vec::new();
        while out.len() < k {
            let mut v: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
            for u in &fixed {
                let uu: f64 = u.iter().map(|x| x * x).sum();
                let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() / uu;
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= nv);
            fixed.push(v.clone());
            out.push(v);
        }
        out
    }

    fn pose(flat: &[f64], f: f64, beta: f64, t: [f64; 2]) -> LandmarkSet {
        let r = rotation(beta);
        LandmarkSet::new(
            flat.chunks_exact(2)
                .map(|p| {
                    [
                        f * (r[0][0] * p[0] + r[0][1] * p[1]) + t[0],
                        f * (r[1][0] * p[0] + r[1][1] * p[1]) + t[1],
                    ]
                })
                .collect(),
        )
    }

    fn random_model(seed: u64, k: usize) -> ShapeModel {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mean = centered(&base_shape());
        let dirs = free_directions(&mean, k, &mut rng);
        let shapes: Vec<LandmarkSet> = (0..30)
            .map(|_| {
                let mut s = mean.clone();
                for (j, d) in dirs.iter().enumerate() {
                    let c: f64 = rng.sample::<f64, _>(StandardNormal) * (0.8 - 0.2 * j as f64);
                    s.iter_mut().zip(d).for_each(|(a, b)| *a += c * b);
                }
                pose(&s, rng.gen_range(0.5..2.0), rng.gen_range(-1.0..1.0), [rng.gen_range(-5.0..5.0), 3.0])
            })
            .collect();
        fit_pca(&shapes, 0.9999).unwrap()
    }

    fn assert_orthonormal(model: &ShapeModel) {
        let g = model.basis().transpose() * model.basis();
        for i in 0..g.nrows() {
            for j in 0..g.ncols() {
                let e = if i == j { 1.0 } else { 0.0 };
                assert!((g[(i, j)] - e).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn identical_shapes_give_zero_components() {
        let s = LandmarkSet::from_flat(&base_shape()).translated(10.0, -4.0);
        let model = fit_pca(&[s.clone(), s.clone(), s.clone()], 0.98).unwrap();
        assert_eq!(model.components(), 0);
        let expected = centered(&s.to_flat());
        for (a, b) in model.mean_flat().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
        let c = model.mean_shape().centroid();
        assert!(c[0].abs() < 1e-12 && c[1].abs() < 1e-12);
    }

    #[test]
    fn rank_one_variation_recovers_offset_direction() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mean = centered(&base_shape());
        let dir = free_directions(&mean, 1, &mut rng).remove(0);
        let shapes: Vec<LandmarkSet> = [-1.0, 1.0]
            .iter()
            .map(|s| LandmarkSet::from_flat(&mean.iter().zip(&dir).map(|(m, d)| m + s * 0.7 * d).collect::<Vec<_>>()))
            .collect();
        let model = fit_pca(&shapes, 0.98).unwrap();
        assert_eq!(model.components(), 1);
        let dot: f64 = model.basis().column(0).iter().zip(&dir).map(|(a, b)| a * b).sum();
        assert!((dot.abs() - 1.0).abs() < 1e-9, "cosine {dot}");
    }

    #[test]
    fn recovers_generator_subspace() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mean = centered(&base_shape());
        let dirs = free_directions(&mean, 3, &mut rng);
        // zero-mean coefficients make the generator mean the exact
        // Procrustes fixed point
        let mut coeffs: Vec<[f64; 3]> = (0..50)
            .map(|_| {
                let mut c = [0.0; 3];
                for (j, v) in c.iter_mut().enumerate() {
                    *v = rng.sample::<f64, _>(StandardNormal) * [1.0, 0.7, 0.5][j];
                }
                c
            })
            .collect();
        for j in 0..3 {
            let m = coeffs.iter().map(|c| c[j]).sum::<f64>() / 50.0;
            coeffs.iter_mut().for_each(|c| c[j] -= m);
        }
        let shapes: Vec<LandmarkSet> = coeffs
            .iter()
            .map(|c| {
                let mut s = mean.clone();
                for (j, d) in dirs.iter().enumerate() {
                    s.iter_mut().zip(d).for_each(|(a, b)| *a += c[j] * b);
                }
                pose(&s, rng.gen_range(0.8..1.2), rng.gen_range(-0.3..0.3), [rng.gen_range(-5.0..5.0), 1.0])
            })
            .collect();
        let model = fit_pca(&shapes, 0.999999).unwrap();
        assert_eq!(model.components(), 3);
        assert_orthonormal(&model);
        // The generator subspace is expressed in the generator's canonical
        // frame; the fitted mean differs from it by a similarity, so rotate
        // the generator directions into the fitted frame first.
        let (a, b) = similarity_fit(&mean, model.mean_flat());
        let angle = b.atan2(a);
        let gen = DMatrix::from_fn(mean.len(), 3, |r, c| rotate_flat(&dirs[c], angle)[r]);
        let cross = model.basis().transpose() * gen;
        let sv = cross.singular_values();
        for s in sv.iter() {
            // cos(θ) ≥ cos(1e-6)
            assert!(s.min(1.0).acos() < 1e-6, "principal angle {}", s.min(1.0).acos());
        }
    }

    #[test]
    fn insufficient_and_degenerate_inputs() {
        let s = LandmarkSet::from_flat(&base_shape());
        assert!(matches!(fit_pca(&[s.clone()], 0.98), Err(ShapeError::InsufficientData { .. })));
        let flat = LandmarkSet::new(vec![[1.0, 1.0]; 6]);
        assert!(matches!(fit_pca(&[flat.clone(), flat.clone()], 0.98), Err(ShapeError::SingularFit(_))));
        let model = random_model(1, 2);
        assert!(matches!(shape_to_params(&flat, &model), Err(ShapeError::SingularFit(_))));
    }

    #[test]
    fn identity_params_return_mean() {
        let model = random_model(2, 2);
        let s = PoseShapeParams::identity(model.components());
        assert_eq!(params_to_shape(&s, &model).unwrap(), model.mean_shape());
        let back = shape_to_params(&model.mean_shape(), &model).unwrap();
        assert!(back.alpha.iter().all(|a| a.abs() < 1e-12));
        assert!((back.f - 1.0).abs() < 1e-12 && back.beta.abs() < 1e-12);
        assert!(back.t2d[0].abs() < 1e-12 && back.t2d[1].abs() < 1e-12);
    }

    #[test]
    fn quarter_rotation_maps_x_y_to_minus_y_x() {
        let model = random_model(3, 1);
        let mut s = PoseShapeParams::identity(model.components());
        s.beta = std::f64::consts::FRAC_PI_2;
        let out = params_to_shape(&s, &model).unwrap();
        for (p, q) in model.mean_shape().points().iter().zip(out.points()) {
            assert!((q[0] + p[1]).abs() < 1e-12 && (q[1] - p[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn matches_per_point_affine_oracle() {
        let model = random_model(5, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let s = PoseShapeParams {
            alpha: vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)],
            t2d: [rng.gen_range(-9.0..9.0), rng.gen_range(-9.0..9.0)],
            beta: rng.gen_range(-3.0..3.0),
            f: rng.gen_range(0.2..3.0),
        };
        let out = params_to_shape(&s, &model).unwrap();
        let (sn, cs) = s.beta.sin_cos();
        for i in 0..model.landmark_count() {
            let mut x = model.mean_flat()[2 * i];
            let mut y = model.mean_flat()[2 * i + 1];
            for k in 0..2 {
                x += model.basis()[(2 * i, k)] * s.alpha[k];
                y += model.basis()[(2 * i + 1, k)] * s.alpha[k];
            }
            let ex = s.f * (cs * x - sn * y) + s.t2d[0];
            let ey = s.f * (sn * x + cs * y) + s.t2d[1];
            assert!((out.points()[i][0] - ex).abs() < 1e-12);
            assert!((out.points()[i][1] - ey).abs() < 1e-12);
        }
    }

    #[test]
    fn orthogonal_complement_has_zero_alpha() {
        let model = random_model(6, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(66);
        // direction orthogonal to pose directions and to the basis column
        let b: Vec<f64> = model.basis().column(0).iter().copied().collect();
        let mut v = free_directions(model.mean_flat(), 1, &mut rng).pop().unwrap();
        let p: f64 = v.iter().zip(&b).map(|(x, y)| x * y).sum();
        v.iter_mut().zip(&b).for_each(|(x, y)| *x -= p * y);
        let scale = 0.3 / v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x *= scale);
        let theta = LandmarkSet::from_flat(&model.mean_flat().iter().zip(&v).map(|(a, b)| a + b).collect::<Vec<_>>());
        let s = shape_to_params(&theta, &model).unwrap();
        assert!(s.alpha[0].abs() < 1e-12);
        assert!((reconstruction_error(&theta, &model).unwrap() - 0.3).abs() < 1e-12);
    }

    #[test]
    fn model_container_round_trip() {
        let model = random_model(8, 2);
        let back = ShapeModel::from_container(&Container::from_bytes(&model.to_container().to_bytes()).unwrap()).unwrap();
        assert_eq!(back, model);
    }

    proptest! {
        #[test]
        fn round_trip_in_span(a0 in -2.0..2.0f64, a1 in -2.0..2.0f64, tx in -50.0..50.0f64, ty in -50.0..50.0f64,
                              beta in -3.1..3.1f64, f in 0.1..5.0f64) {
            let model = random_model(10, 2);
            let s = PoseShapeParams { alpha: vec![a0, a1], t2d: [tx, ty], beta, f };
            let theta = params_to_shape(&s, &model).unwrap();
            let back = shape_to_params(&theta, &model).unwrap();
            for (x, y) in back.to_vector().iter().zip(s.to_vector()) {
                prop_assert!((x - y).abs() < 1e-9, "{x} vs {y}");
            }
        }

        #[test]
        fn rotation_is_orthogonal(beta in -10.0..10.0f64) {
            let r = rotation(beta);
            let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
            prop_assert!((det - 1.0).abs() < 1e-12);
            let rtr00 = r[0][0] * r[0][0] + r[1][0] * r[1][0];
            let rtr01 = r[0][0] * r[0][1] + r[1][0] * r[1][1];
            prop_assert!((rtr00 - 1.0).abs() < 1e-12 && rtr01.abs() < 1e-12);
        }

        #[test]
        fn translation_and_scale_equivariance(dx in -20.0..20.0f64, dy in -20.0..20.0f64, c in 0.1..4.0f64) {
            let model = random_model(11, 2);
            let s = PoseShapeParams { alpha: vec![0.3, -0.2], t2d: [4.0, -1.0], beta: 0.4, f: 1.3 };
            let base = params_to_shape(&s, &model).unwrap();
            let mut moved = s.clone();
            moved.t2d = [s.t2d[0] + dx, s.t2d[1] + dy];
            let shifted = params_to_shape(&moved, &model).unwrap();
            for (p, q) in base.points().iter().zip(shifted.points()) {
                prop_assert!((q[0] - p[0] - dx).abs() < 1e-12 && (q[1] - p[1] - dy).abs() < 1e-12);
            }
            let mut scaled = s.clone();
            scaled.f *= c;
            let big = params_to_shape(&scaled, &model).unwrap();
            for (p, q) in base.points().iter().zip(big.points()) {
                prop_assert!(((q[0] - s.t2d[0]) - c * (p[0] - s.t2d[0])).abs() < 1e-10);
                prop_assert!(((q[1] - s.t2d[1]) - c * (p[1] - s.t2d[1])).abs() < 1e-10);
            }
        }
    }
}
