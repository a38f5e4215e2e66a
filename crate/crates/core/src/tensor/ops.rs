use super::{Result, Tensor, TensorError};

/// Zero padding applied on each side of the spatial axes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub const NONE: Padding = Padding {
        top: 0,
        bottom: 0,
        left: 0,
        right: 0,
    };

    pub fn uniform(p: usize) -> Self {
        Self {
            top: p,
            bottom: p,
            left: p,
            right: p,
        }
    }

    /// Stride-1 "same" padding. Even kernels put the extra row/column on the
    /// bottom/right side.
    pub fn same(kh: usize, kw: usize) -> Self {
        Self {
            top: (kh - 1) / 2,
            bottom: kh / 2,
            left: (kw - 1) / 2,
            right: kw / 2,
        }
    }
}

pub fn conv_output_len(input: usize, pad_total: usize, kernel: usize, stride: usize) -> Result<usize> {
    let padded = input + pad_total;
    if stride == 0 || kernel == 0 || padded < kernel || (padded - kernel) % stride != 0 {
        return Err(TensorError::InvalidLayer {
            op: "conv2d",
            reason: format!(
                "input {input} with padding {pad_total}, kernel {kernel}, stride {stride} gives a fractional output size"
            ),
        });
    }
    Ok((padded - kernel) / stride + 1)
}

/// Ceil-mode output length: the last window may hang over the edge but must
/// start inside the input.
pub fn pool_output_len(input: usize, window: usize, stride: usize) -> usize {
    if input <= window {
        1
    } else {
        (input - window).div_ceil(stride) + 1
    }
}

fn check_kernel(input: &Tensor, kernel: &Tensor, bias: &Tensor) -> Result<(usize, usize, usize, usize)> {
    let (_, _, cin) = input.dims3()?;
    let [kh, kw, kcin, cout] = kernel.shape()[..] else {
        return Err(TensorError::InvalidShape {
            shape: kernel.shape().to_vec(),
            len: kernel.len(),
        });
    };
    if kcin != cin {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d",
            expected: vec![kh, kw, cin, cout],
            found: kernel.shape().to_vec(),
        });
    }
    if bias.len() != cout {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d bias",
            expected: vec![cout],
            found: bias.shape().to_vec(),
        });
    }
    Ok((kh, kw, cin, cout))
}

/// Cross-correlation of an `H×W×Cin` volume with a `kh×kw×Cin×Cout` kernel.
pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    bias: &Tensor,
    padding: Padding,
    stride: usize,
) -> Result<Tensor> {
    let (h, w, _) = input.dims3()?;
    let (kh, kw, cin, cout) = check_kernel(input, kernel, bias)?;
    let oh = conv_output_len(h, padding.top + padding.bottom, kh, stride)?;
    let ow = conv_output_len(w, padding.left + padding.right, kw, stride)?;
    let x = input.data();
    let k = kernel.data();
    let mut out = vec![0.0; oh * ow * cout];
    for oy in 0..oh {
        for ox in 0..ow {
            let o = &mut out[(oy * ow + ox) * cout..][..cout];
            o.copy_from_slice(bias.data());
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding.top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding.left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let px = &x[(iy as usize * w + ix as usize) * cin..][..cin];
                    let kbase = (ky * kw + kx) * cin * cout;
                    for (ci, &v) in px.iter().enumerate() {
                        if v == 0.0 {
                            continue;
                        }
                        let krow = &k[kbase + ci * cout..][..cout];
                        for (acc, &kv) in o.iter_mut().zip(krow) {
                            *acc += v * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, cout], out)
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    padding: Padding,
    stride: usize,
    need_input_grad: bool,
) -> Result<ConvGrads> {
    let (h, w, _) = input.dims3()?;
    let [kh, kw, cin, cout] = kernel.shape()[..] else {
        return Err(TensorError::InvalidShape {
            shape: kernel.shape().to_vec(),
            len: kernel.len(),
        });
    };
    let oh = conv_output_len(h, padding.top + padding.bottom, kh, stride)?;
    let ow = conv_output_len(w, padding.left + padding.right, kw, stride)?;
    if grad_out.shape() != [oh, ow, cout] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d backward",
            expected: vec![oh, ow, cout],
            found: grad_out.shape().to_vec(),
        });
    }
    let x = input.data();
    let k = kernel.data();
    let g = grad_out.data();
    let mut gk = vec![0.0; k.len()];
    let mut gb = vec![0.0; cout];
    let mut gx = if need_input_grad {
        vec![0.0; x.len()]
    } else {
        Vec::new()
    };
    for oy in 0..oh {
        for ox in 0..ow {
            let go = &g[(oy * ow + ox) * cout..][..cout];
            for (b, &v) in gb.iter_mut().zip(go) {
                *b += v;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - padding.top as isize;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - padding.left as isize;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let pix = (iy as usize * w + ix as usize) * cin;
                    let kbase = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let v = x[pix + ci];
                        let off = kbase + ci * cout;
                        let gkrow = &mut gk[off..off + cout];
                        if v != 0.0 {
                            for (gkv, &gov) in gkrow.iter_mut().zip(go) {
                                *gkv += v * gov;
                            }
                        }
                        if need_input_grad {
                            let krow = &k[off..off + cout];
                            let dot: f64 = krow.iter().zip(go).map(|(a, b)| a * b).sum();
                            gx[pix + ci] += dot;
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads {
        input: if need_input_grad {
            Some(Tensor::new(input.shape().to_vec(), gx)?)
        } else {
            None
        },
        kernel: Tensor::new(kernel.shape().to_vec(), gk)?,
        bias: Tensor::new(vec![cout], gb)?,
    })
}

#[derive(Debug, Clone)]
pub struct PoolOutput {
    pub output: Tensor,
    /// Flat input index of the selected maximum for every output element.
    pub argmax: Vec<usize>,
}

/// Max pooling with edge-truncated (ceil-mode) windows.
pub fn maxpool2d_forward(input: &Tensor, window: usize, stride: usize) -> Result<PoolOutput> {
    let (h, w, c) = input.dims3()?;
    if window == 0 || stride == 0 {
        return Err(TensorError::InvalidLayer {
            op: "maxpool2d",
            reason: "window and stride must be positive".into(),
        });
    }
    let oh = pool_output_len(h, window, stride);
    let ow = pool_output_len(w, window, stride);
    let x = input.data();
    let mut out = vec![f64::NEG_INFINITY; oh * ow * c];
    let mut argmax = vec![0usize; oh * ow * c];
    for oy in 0..oh {
        let y0 = oy * stride;
        let y1 = (y0 + window).min(h);
        for ox in 0..ow {
            let x0 = ox * stride;
            let x1 = (x0 + window).min(w);
            let obase = (oy * ow + ox) * c;
            for iy in y0..y1 {
                for ix in x0..x1 {
                    let ibase = (iy * w + ix) * c;
                    for ch in 0..c {
                        let v = x[ibase + ch];
                        if v > out[obase + ch] {
                            out[obase + ch] = v;
                            argmax[obase + ch] = ibase + ch;
                        }
                    }
                }
            }
        }
    }
    Ok(PoolOutput {
        output: Tensor::new(vec![oh, ow, c], out)?,
        argmax,
    })
}

pub fn maxpool2d_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    if grad_out.len() != argmax.len() {
        return Err(TensorError::ShapeMismatch {
            op: "maxpool2d backward",
            expected: vec![argmax.len()],
            found: grad_out.shape().to_vec(),
        });
    }
    let mut gx = Tensor::zeros(input_shape);
    let gxd = gx.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        gxd[idx] += g;
    }
    Ok(gx)
}

/// Affine map `input · weights + bias`; `input` may have any shape with `n`
/// elements.
pub fn fc_forward(input: &Tensor, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let [n, m] = weights.shape()[..] else {
        return Err(TensorError::InvalidShape {
            shape: weights.shape().to_vec(),
            len: weights.len(),
        });
    };
    if input.len() != n || bias.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "fully-connected",
            expected: vec![n, m],
            found: vec![input.len(), bias.len()],
        });
    }
    let wd = weights.data();
    let mut out = bias.data().to_vec();
    for (i, &v) in input.data().iter().enumerate() {
        if v == 0.0 {
            continue;
        }
        let row = &wd[i * m..(i + 1) * m];
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += v * wv;
        }
    }
    Tensor::new(vec![m], out)
}

#[derive(Debug, Clone)]
pub struct FcGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

pub fn fc_backward(input: &Tensor, weights: &Tensor, grad_out: &Tensor) -> Result<FcGrads> {
    let [n, m] = weights.shape()[..] else {
        return Err(TensorError::InvalidShape {
            shape: weights.shape().to_vec(),
            len: weights.len(),
        });
    };
    if input.len() != n || grad_out.len() != m {
        return Err(TensorError::ShapeMismatch {
            op: "fully-connected backward",
            expected: vec![n, m],
            found: vec![input.len(), grad_out.len()],
        });
    }
    let wd = weights.data();
    let g = grad_out.data();
    let mut gw = vec![0.0; n * m];
    let mut gx = vec![0.0; n];
    for (i, &v) in input.data().iter().enumerate() {
        let row = &wd[i * m..(i + 1) * m];
        gx[i] = row.iter().zip(g).map(|(a, b)| a * b).sum();
        if v != 0.0 {
            for (gwv, &gv) in gw[i * m..(i + 1) * m].iter_mut().zip(g) {
                *gwv += v * gv;
            }
        }
    }
    Ok(FcGrads {
        input: Tensor::new(input.shape().to_vec(), gx)?,
        weights: Tensor::new(vec![n, m], gw)?,
        bias: Tensor::new(vec![m], g.to_vec())?,
    })
}

pub fn relu_forward(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor {
        shape: input.shape().to_vec(),
        data,
    }
}

/// Gradient through ReLU given the forward output.
pub fn relu_backward(output: &Tensor, grad_out: &Tensor) -> Result<Tensor> {
    if output.shape() != grad_out.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "relu backward",
            expected: output.shape().to_vec(),
            found: grad_out.shape().to_vec(),
        });
    }
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}
