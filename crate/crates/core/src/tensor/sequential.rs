use serde::{Deserialize, Serialize};

use super::ops::{
    conv2d_backward, conv2d_forward, conv_output_len, fc_backward, fc_forward, maxpool2d_backward,
    maxpool2d_forward, pool_output_len, relu_backward, relu_forward, Padding,
};
use super::{Gradients, ParamId, ParamRole, ParamStore, Result, Tensor, TensorError};

/// Static description of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Conv2d {
        kh: usize,
        kw: usize,
        cin: usize,
        cout: usize,
        padding: Padding,
        stride: usize,
    },
    Maxpool2d {
        window: usize,
        stride: usize,
    },
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
    Relu,
}

impl LayerSpec {
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                kh,
                kw,
                cin,
                cout,
                padding,
                stride,
            } => {
                let [h, w, c] = input[..] else {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d",
                        expected: vec![0, 0, cin],
                        found: input.to_vec(),
                    });
                };
                if c != cin {
                    return Err(TensorError::ShapeMismatch {
                        op: "conv2d",
                        expected: vec![h, w, cin],
                        found: input.to_vec(),
                    });
                }
                Ok(vec![
                    conv_output_len(h, padding.top + padding.bottom, kh, stride)?,
                    conv_output_len(w, padding.left + padding.right, kw, stride)?,
                    cout,
                ])
            }
            LayerSpec::Maxpool2d { window, stride } => {
                let [h, w, c] = input[..] else {
                    return Err(TensorError::InvalidShape {
                        shape: input.to_vec(),
                        len: input.iter().product(),
                    });
                };
                Ok(vec![pool_output_len(h, window, stride), pool_output_len(w, window, stride), c])
            }
            LayerSpec::FullyConnected { inputs, outputs } => {
                let n: usize = input.iter().product();
                if n != inputs {
                    return Err(TensorError::ShapeMismatch {
                        op: "fully-connected",
                        expected: vec![inputs],
                        found: input.to_vec(),
                    });
                }
                Ok(vec![outputs])
            }
            LayerSpec::Relu => Ok(input.to_vec()),
        }
    }

    /// Weights plus biases.
    pub fn param_count(&self) -> usize {
        match *self {
            LayerSpec::Conv2d { kh, kw, cin, cout, .. } => kh * kw * cin * cout + cout,
            LayerSpec::FullyConnected { inputs, outputs } => inputs * outputs + outputs,
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub spec: LayerSpec,
    pub weight: Option<ParamId>,
    pub bias: Option<ParamId>,
}

#[derive(Debug, Clone)]
enum Record {
    Input(Tensor),
    Pool { input_shape: Vec<usize>, argmax: Vec<usize> },
    Output(Tensor),
    None,
}

/// Activations recorded during a forward pass, consumed by backward.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    records: Vec<Record>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}

/// A chain of layers whose parameters live in a shared [`ParamStore`].
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    layers: Vec<Layer>,
}

impl Sequential {
    /// Registers the parameters of every layer under `prefix`.
    pub fn build(specs: &[LayerSpec], store: &mut ParamStore, prefix: &str) -> Self {
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let (weight, bias) = match *spec {
                LayerSpec::Conv2d { kh, kw, cin, cout, .. } => (
                    Some(store.add(format!("{prefix}.{i}.weight"), ParamRole::Weight, kh * kw * cin, &[kh, kw, cin, cout])),
                    Some(store.add(format!("{prefix}.{i}.bias"), ParamRole::Bias, kh * kw * cin, &[cout])),
                ),
                LayerSpec::FullyConnected { inputs, outputs } => (
                    Some(store.add(format!("{prefix}.{i}.weight"), ParamRole::Weight, inputs, &[inputs, outputs])),
                    Some(store.add(format!("{prefix}.{i}.bias"), ParamRole::Bias, inputs, &[outputs])),
                ),
                _ => (None, None),
            };
            layers.push(Layer {
                spec: *spec,
                weight,
                bias,
            });
        }
        Self { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    /// Shape after every layer, starting from `input`.
    pub fn shapes(&self, input: &[usize]) -> Result<Vec<Vec<usize>>> {
        shape_trace(self.layers.iter().map(|l| &l.spec), input)
    }

    pub fn forward(&self, store: &ParamStore, input: &Tensor, mut tape: Option<&mut Tape>) -> Result<Tensor> {
        if let Some(t) = tape.as_deref_mut() {
            t.records.clear();
        }
        let mut x = input.clone();
        for layer in &self.layers {
            let (y, rec) = match layer.spec {
                LayerSpec::Conv2d { padding, stride, .. } => {
                    let y = conv2d_forward(&x, store.get(layer.weight.unwrap()), store.get(layer.bias.unwrap()), padding, stride)?;
                    (y, Record::Input(x))
                }
                LayerSpec::Maxpool2d { window, stride } => {
                    let p = maxpool2d_forward(&x, window, stride)?;
                    (
                        p.output,
                        Record::Pool {
                            input_shape: x.shape().to_vec(),
                            argmax: p.argmax,
                        },
                    )
                }
                LayerSpec::FullyConnected { .. } => {
                    let y = fc_forward(&x, store.get(layer.weight.unwrap()), store.get(layer.bias.unwrap()))?;
                    (y, Record::Input(x))
                }
                LayerSpec::Relu => {
                    let y = relu_forward(&x);
                    let rec = if tape.is_some() { Record::Output(y.clone()) } else { Record::None };
                    (y, rec)
                }
            };
            if let Some(t) = tape.as_deref_mut() {
                t.records.push(rec);
            }
            x = y;
        }
        Ok(x)
    }

    /// Accumulates parameter gradients into `grads` and returns the gradient
    /// with respect to the input when `need_input_grad` is set.
    pub fn backward(
        &self,
        store: &ParamStore,
        tape: &Tape,
        grad_out: Tensor,
        grads: &mut Gradients,
        need_input_grad: bool,
    ) -> Result<Option<Tensor>> {
        if tape.records.len() != self.layers.len() || self.layers.is_empty() {
            return Err(TensorError::NoForwardRecord);
        }
        let mut g = grad_out;
        for (i, (layer, rec)) in self.layers.iter().zip(&tape.records).enumerate().rev() {
            let want_input = need_input_grad || i > 0;
            g = match (layer.spec, rec) {
                (LayerSpec::Conv2d { padding, stride, .. }, Record::Input(x)) => {
                    let cg = conv2d_backward(x, store.get(layer.weight.unwrap()), &g, padding, stride, want_input)?;
                    grads.accumulate(layer.weight.unwrap(), &cg.kernel);
                    grads.accumulate(layer.bias.unwrap(), &cg.bias);
                    match cg.input {
                        Some(gx) => gx,
                        None => return Ok(None),
                    }
                }
                (LayerSpec::FullyConnected { .. }, Record::Input(x)) => {
                    let fg = fc_backward(x, store.get(layer.weight.unwrap()), &g)?;
                    grads.accumulate(layer.weight.unwrap(), &fg.weights);
                    grads.accumulate(layer.bias.unwrap(), &fg.bias);
                    fg.input
                }
                (LayerSpec::Maxpool2d { .. }, Record::Pool { input_shape, argmax }) => {
                    maxpool2d_backward(input_shape, argmax, &g)?
                }
                (LayerSpec::Relu, Record::Output(y)) => relu_backward(y, &g)?,
                _ => return Err(TensorError::NoForwardRecord),
            };
        }
        Ok(if need_input_grad { Some(g) } else { None })
    }
}

pub(crate) fn shape_trace<'a>(specs: impl Iterator<Item = &'a LayerSpec>, input: &[usize]) -> Result<Vec<Vec<usize>>> {
    let mut shapes = Vec::new();
    let mut cur = input.to_vec();
    for spec in specs {
        cur = spec.output_shape(&cur)?;
        shapes.push(cur.clone());
    }
    Ok(shapes)
}
