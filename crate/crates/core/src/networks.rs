//! Landmark regressors: the per-landmark attention network (one independent
//! feature sub-network per patch plus a shared two-layer head) and the
//! channel-stacked ablation that runs a single conv stack over all patches.

use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::container::{Container, EntryRole};
use crate::tensor::{Gradients, LayerSpec, Padding, ParamRole, ParamStore, Sequential, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("expected {expected} patches, got {found}")]
    PatchCount { expected: usize, found: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

/// Spatial sizes above this are halved by a pooling layer.
pub const POOL_ABOVE: usize = 8;

const CONV_WIDTHS: [usize; 3] = [16, 32, 64];
const STACK_WIDTHS: [usize; 3] = [32, 64, 96];

/// Examples per gradient chunk. Fixed so the reduction order never depends
/// on the thread count.
const GRAD_CHUNK: usize = 4;

/// Three conv blocks (3×3 same, then two 2×2 with bottom/right padding), each
/// followed by ReLU and a ceil-mode 2×2 pool while the map is larger than
/// [`POOL_ABOVE`]. Returns the layers and the flattened output size.
fn conv_trunk(patch_size: usize, cin: usize, widths: [usize; 3]) -> (Vec<LayerSpec>, usize) {
    let mut layers = Vec::new();
    let mut side = patch_size;
    let mut c = cin;
    for (i, &w) in widths.iter().enumerate() {
        let (k, padding) = if i == 0 { (3, Padding::uniform(1)) } else { (2, Padding::same(2, 2)) };
        layers.push(LayerSpec::Conv2d {
            kh: k,
            kw: k,
            cin: c,
            cout: w,
            padding,
            stride: 1,
        });
        layers.push(LayerSpec::Relu);
        if side > POOL_ABOVE {
            layers.push(LayerSpec::Maxpool2d { window: 2, stride: 2 });
            side = side.div_ceil(2);
        }
        c = w;
    }
    (layers, side * side * c)
}

fn head_layers(inputs: usize, hidden: usize, outputs: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::FullyConnected { inputs, outputs: hidden },
        LayerSpec::Relu,
        LayerSpec::FullyConnected { inputs: hidden, outputs },
    ]
}

fn count(layers: &[LayerSpec]) -> usize {
    layers.iter().map(LayerSpec::param_count).sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LanSpec {
    pub landmark_count: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub feature_dim: usize,
    pub hidden_dim: usize,
}

impl LanSpec {
    pub fn new(landmark_count: usize, patch_size: usize, channels: usize) -> Self {
        Self {
            landmark_count,
            patch_size,
            channels,
            feature_dim: 10,
            hidden_dim: 256,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.landmark_count
    }

    /// Feature sub-network applied to each landmark patch. The final fully
    /// connected layer is linear.
    pub fn subnet_layers(&self) -> Vec<LayerSpec> {
        let (mut layers, flat) = conv_trunk(self.patch_size, self.channels, CONV_WIDTHS);
        layers.push(LayerSpec::FullyConnected {
            inputs: flat,
            outputs: self.feature_dim,
        });
        layers
    }

    pub fn head_layers(&self) -> Vec<LayerSpec> {
        head_layers(self.landmark_count * self.feature_dim, self.hidden_dim, self.output_dim())
    }

    pub fn subnet_parameter_count(&self) -> usize {
        count(&self.subnet_layers())
    }

    pub fn parameter_count(&self) -> usize {
        self.landmark_count * self.subnet_parameter_count() + count(&self.head_layers())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StackSpec {
    pub landmark_count: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Width of the fully connected layer after the conv stack.
    pub feature_dim: usize,
    pub hidden_dim: usize,
}

impl StackSpec {
    /// Picks `feature_dim` (and, if needed, `hidden_dim`) so the parameter
    /// count lands as close as possible to the given LAN.
    pub fn matched_to(lan: &LanSpec) -> Self {
        let target = lan.parameter_count() as f64;
        let base = Self {
            landmark_count: lan.landmark_count,
            patch_size: lan.patch_size,
            channels: lan.channels,
            feature_dim: 1,
            hidden_dim: lan.hidden_dim,
        };
        let rel = |s: &StackSpec| (s.parameter_count() as f64 - target).abs() / target;
        let best_width = |hidden: usize| {
            (1..=8192)
                .map(|f| StackSpec { feature_dim: f, hidden_dim: hidden, ..base })
                .min_by(|a, b| rel(a).total_cmp(&rel(b)))
                .unwrap()
        };
        let first = best_width(lan.hidden_dim);
        if rel(&first) <= 0.01 {
            return first;
        }
        (1..=1024)
            .map(best_width)
            .min_by(|a, b| rel(a).total_cmp(&rel(b)))
            .unwrap()
    }

    pub fn output_dim(&self) -> usize {
        2 * self.landmark_count
    }

    pub fn input_channels(&self) -> usize {
        self.channels * self.landmark_count
    }

    pub fn trunk_layers(&self) -> Vec<LayerSpec> {
        let (mut layers, flat) = conv_trunk(self.patch_size, self.input_channels(), STACK_WIDTHS);
        layers.push(LayerSpec::FullyConnected {
            inputs: flat,
            outputs: self.feature_dim,
        });
        layers
    }

    pub fn head_layers(&self) -> Vec<LayerSpec> {
        head_layers(self.feature_dim, self.hidden_dim, self.output_dim())
    }

    pub fn parameter_count(&self) -> usize {
        count(&self.trunk_layers()) + count(&self.head_layers())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "network", rename_all = "kebab-case")]
pub enum NetworkSpec {
    Lan(LanSpec),
    Stack(StackSpec),
}

impl NetworkSpec {
    pub fn landmark_count(&self) -> usize {
        match self {
            NetworkSpec::Lan(s) => s.landmark_count,
            NetworkSpec::Stack(s) => s.landmark_count,
        }
    }

    pub fn patch_size(&self) -> usize {
        match self {
            NetworkSpec::Lan(s) => s.patch_size,
            NetworkSpec::Stack(s) => s.patch_size,
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            NetworkSpec::Lan(s) => s.channels,
            NetworkSpec::Stack(s) => s.channels,
        }
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            NetworkSpec::Lan(s) => s.parameter_count(),
            NetworkSpec::Stack(s) => s.parameter_count(),
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            NetworkSpec::Lan(_) => "lan",
            NetworkSpec::Stack(_) => "stack",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Body {
    Lan(Vec<Sequential>),
    Stack(Sequential),
}

/// A regressor mapping `M` landmark patches to a `2M` increment.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    spec: NetworkSpec,
    store: ParamStore,
    body: Body,
    head: Sequential,
}

/// Activations from one forward pass.
#[derive(Debug, Clone, Default)]
pub struct ForwardRecord {
    body: Vec<Tape>,
    head: Tape,
}

impl Network {
    /// Builds the network with every parameter set to zero.
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        let mut store = ParamStore::new();
        let (body, head) = match spec {
            NetworkSpec::Lan(s) => {
                let layers = s.subnet_layers();
                let p = s.patch_size;
                let shapes = crate::tensor::Sequential::build(&layers, &mut ParamStore::new(), "probe").shapes(&[p, p, s.channels])?;
                if shapes.last().map(|v| v.as_slice()) != Some(&[s.feature_dim][..]) {
                    return Err(TensorError::InvalidLayer {
                        op: "lan",
                        reason: format!("sub-network output {:?} differs from feature dim {}", shapes.last(), s.feature_dim),
                    }
                    .into());
                }
                let subnets = (0..s.landmark_count)
                    .map(|j| Sequential::build(&layers, &mut store, &format!("landmark{j}")))
                    .collect();
                (Body::Lan(subnets), Sequential::build(&s.head_layers(), &mut store, "head"))
            }
            NetworkSpec::Stack(s) => {
                let trunk = Sequential::build(&s.trunk_layers(), &mut store, "trunk");
                trunk.shapes(&[s.patch_size, s.patch_size, s.input_channels()])?;
                (Body::Stack(trunk), Sequential::build(&s.head_layers(), &mut store, "head"))
            }
        };
        Ok(Self { spec, store, body, head })
    }

    /// Uniform fan-in initialisation; the output layer starts at zero so the
    /// untrained network predicts a zero increment.
    pub fn initialized<R: Rng + ?Sized>(spec: NetworkSpec, rng: &mut R) -> Result<Self> {
        let mut net = Self::new(spec)?;
        net.store.init_uniform(rng);
        let out = net.head.layers().last().expect("head has layers");
        for id in [out.weight.unwrap(), out.bias.unwrap()] {
            net.store.get_mut(id).data_mut().fill(0.0);
        }
        Ok(net)
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn parameter_count(&self) -> usize {
        self.store.scalar_count()
    }

    /// Per-landmark sub-networks (empty for the stacked network).
    pub fn subnets(&self) -> &[Sequential] {
        match &self.body {
            Body::Lan(s) => s,
            Body::Stack(_) => &[],
        }
    }

    pub fn head(&self) -> &Sequential {
        &self.head
    }

    fn check_patches(&self, patches: &[Tensor]) -> Result<()> {
        let m = self.spec.landmark_count();
        if patches.len() != m {
            return Err(NetworkError::PatchCount {
                expected: m,
                found: patches.len(),
            });
        }
        let p = self.spec.patch_size();
        let want = [p, p, self.spec.channels()];
        for t in patches {
            if t.shape() != want {
                return Err(TensorError::ShapeMismatch {
                    op: "network input",
                    expected: want.to_vec(),
                    found: t.shape().to_vec(),
                }
                .into());
            }
        }
        Ok(())
    }

    /// Concatenated per-landmark features (LAN) or trunk output (stack).
    pub fn features(&self, patches: &[Tensor]) -> Result<Vec<f64>> {
        self.check_patches(patches)?;
        self.features_inner(patches, None)
    }

    fn features_inner(&self, patches: &[Tensor], mut rec: Option<&mut ForwardRecord>) -> Result<Vec<f64>> {
        match &self.body {
            Body::Lan(subnets) => {
                if let Some(r) = rec.as_deref_mut() {
                    r.body = vec![Tape::new(); subnets.len()];
                }
                let mut feats = Vec::with_capacity(subnets.len() * 10);
                for (j, (net, patch)) in subnets.iter().zip(patches).enumerate() {
                    let tape = rec.as_deref_mut().map(|r| &mut r.body[j]);
                    feats.extend_from_slice(net.forward(&self.store, patch, tape)?.data());
                }
                Ok(feats)
            }
            Body::Stack(trunk) => {
                let stacked = Tensor::concat_channels(patches)?;
                if let Some(r) = rec.as_deref_mut() {
                    r.body = vec![Tape::new()];
                }
                let tape = rec.map(|r| &mut r.body[0]);
                Ok(trunk.forward(&self.store, &stacked, tape)?.into_data())
            }
        }
    }

    pub fn forward(&self, patches: &[Tensor]) -> Result<Vec<f64>> {
        self.check_patches(patches)?;
        let feats = self.features_inner(patches, None)?;
        Ok(self.head.forward(&self.store, &Tensor::from_vec(feats), None)?.into_data())
    }

    pub fn forward_recorded(&self, patches: &[Tensor], rec: &mut ForwardRecord) -> Result<Vec<f64>> {
        self.check_patches(patches)?;
        let feats = self.features_inner(patches, Some(rec))?;
        Ok(self
            .head
            .forward(&self.store, &Tensor::from_vec(feats), Some(&mut rec.head))?
            .into_data())
    }

    /// Accumulates `d loss / d params` given `d loss / d output`.
    pub fn backward(&self, rec: &ForwardRecord, grad_out: &[f64], grads: &mut Gradients) -> Result<()> {
        let g_feat = self
            .head
            .backward(&self.store, &rec.head, Tensor::from_vec(grad_out.to_vec()), grads, true)?
            .expect("input gradient requested");
        match &self.body {
            Body::Lan(subnets) => {
                if rec.body.len() != subnets.len() {
                    return Err(TensorError::NoForwardRecord.into());
                }
                let d = g_feat.len() / subnets.len();
                for (j, net) in subnets.iter().enumerate() {
                    let g = Tensor::from_vec(g_feat.data()[j * d..(j + 1) * d].to_vec());
                    net.backward(&self.store, &rec.body[j], g, grads, false)?;
                }
            }
            Body::Stack(trunk) => {
                let tape = rec.body.first().ok_or(TensorError::NoForwardRecord)?;
                trunk.backward(&self.store, tape, g_feat, grads, false)?;
            }
        }
        Ok(())
    }

    /// Mean over the batch of `‖pred − target‖²` and its parameter gradient.
    /// Chunks of the batch may run in parallel; partial sums are combined in
    /// batch order, so the result does not depend on the thread count.
    pub fn loss_and_gradients(&self, batch: &[(&[Tensor], &[f64])]) -> Result<(f64, Gradients)> {
        let n = batch.len().max(1) as f64;
        let partials: Vec<Result<(f64, Gradients)>> = batch
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut grads = self.store.zero_grads();
                let mut loss = 0.0;
                let mut rec = ForwardRecord::default();
                for (patches, target) in chunk {
                    let pred = self.forward_recorded(patches, &mut rec)?;
                    let mut g = Vec::with_capacity(pred.len());
                    for (p, t) in pred.iter().zip(target.iter()) {
                        let d = p - t;
                        loss += d * d;
                        g.push(2.0 * d / n);
                    }
                    self.backward(&rec, &g, &mut grads)?;
                }
                Ok((loss, grads))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = self.store.zero_grads();
        for part in partials {
            let (l, g) = part?;
            total += l;
            grads.add_assign(&g);
        }
        Ok((total / n, grads))
    }

    pub fn to_container(&self) -> Container {
        let header = serde_json::to_string(&self.spec).expect("spec serializes");
        let mut c = Container::new(self.spec.kind(), header);
        for p in self.store.params() {
            c.push(p.name.clone(), EntryRole::Param(p.role), p.value.clone());
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let spec: NetworkSpec = serde_json::from_str(&c.header).map_err(|e| NetworkError::Checkpoint(format!("bad header: {e}")))?;
        if spec.kind() != c.kind {
            return Err(NetworkError::Checkpoint(format!("kind `{}` does not match header `{}`", c.kind, spec.kind())));
        }
        let mut net = Self::new(spec)?;
        for (p, e) in net.store.params().iter().zip(&c.entries) {
            let role_ok = matches!((p.role, e.role), (ParamRole::Weight, EntryRole::Param(ParamRole::Weight)) | (ParamRole::Bias, EntryRole::Param(ParamRole::Bias)));
            if !role_ok {
                return Err(NetworkError::Checkpoint(format!("entry `{}` has the wrong role", e.name)));
            }
        }
        net.store
            .load_values(c.entries.iter().map(|e| (e.name.clone(), e.tensor.clone())).collect())?;
        Ok(net)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(self.to_container().save(path)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?)
    }
}
