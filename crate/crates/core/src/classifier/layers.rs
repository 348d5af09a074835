//! Layer kernels over channel-major (C, H, W) tensors.

use serde::{Deserialize, Serialize};

use super::scalar::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    /// Stride 1, zero "same" padding; `kernel` must be odd.
    Convolution {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
    },
    Relu,
    Tanh,
    AvgPool {
        size: usize,
    },
    MaxPool {
        size: usize,
    },
    Dense {
        inputs: usize,
        outputs: usize,
    },
    /// Terminal marker: the preceding layer's outputs are the class logits.
    SoftmaxReadout,
}

impl LayerSpec {
    pub fn has_params(&self) -> bool {
        matches!(self, LayerSpec::Convolution { .. } | LayerSpec::Dense { .. })
    }

    /// (weight count, bias count, fan-in) for parametric layers.
    pub(crate) fn param_shape(&self) -> Option<(usize, usize, usize)> {
        match *self {
            LayerSpec::Convolution {
                in_channels,
                out_channels,
                kernel,
            } => Some((
                out_channels * in_channels * kernel * kernel,
                out_channels,
                in_channels * kernel * kernel,
            )),
            LayerSpec::Dense { inputs, outputs } => Some((inputs * outputs, outputs, inputs)),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Propagates `input` through `spec`, returning the input shape of every
/// layer plus the final output shape. Fails unless the spec composes and ends
/// in a softmax readout over 10 logits.
pub fn infer_shapes(spec: &[LayerSpec], input: Shape, n_classes: usize) -> Result<Vec<Shape>> {
    let mut shapes = vec![input];
    let mut cur = input;
    for (i, layer) in spec.iter().enumerate() {
        let bad = |msg: String| Error::ShapeMismatch(format!("layer {i} ({layer:?}): {msg}"));
        cur = match *layer {
            LayerSpec::Convolution {
                in_channels,
                out_channels,
                kernel,
            } => {
                if in_channels != cur.c {
                    return Err(bad(format!("expects {in_channels} channels, got {}", cur.c)));
                }
                if kernel % 2 == 0 || kernel == 0 || out_channels == 0 {
                    return Err(bad("kernel must be odd and channels positive".into()));
                }
                Shape {
                    c: out_channels,
                    ..cur
                }
            }
            LayerSpec::Relu | LayerSpec::Tanh => cur,
            LayerSpec::AvgPool { size } | LayerSpec::MaxPool { size } => {
                if size == 0 || !cur.h.is_multiple_of(size) || !cur.w.is_multiple_of(size) {
                    return Err(bad(format!("pool {size} does not tile {}x{}", cur.h, cur.w)));
                }
                Shape {
                    c: cur.c,
                    h: cur.h / size,
                    w: cur.w / size,
                }
            }
            LayerSpec::Dense { inputs, outputs } => {
                if inputs != cur.len() || outputs == 0 {
                    return Err(bad(format!("expects {inputs} inputs, got {}", cur.len())));
                }
                Shape {
                    c: outputs,
                    h: 1,
                    w: 1,
                }
            }
            LayerSpec::SoftmaxReadout => {
                if i + 1 != spec.len() {
                    return Err(bad("softmax readout must be the last layer".into()));
                }
                if cur.len() != n_classes {
                    return Err(bad(format!("readout needs {n_classes} logits, got {}", cur.len())));
                }
                cur
            }
        };
        shapes.push(cur);
    }
    if spec.last() != Some(&LayerSpec::SoftmaxReadout) {
        return Err(Error::ShapeMismatch("spec must end with a softmax readout".into()));
    }
    Ok(shapes)
}

/// Weights and biases of one parametric layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerTensors<T = f64> {
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> LayerTensors<T> {
    pub fn zeros(n_weights: usize, n_bias: usize) -> Self {
        LayerTensors {
            weights: vec![T::default(); n_weights],
            bias: vec![T::default(); n_bias],
        }
    }

    pub fn len(&self) -> usize {
        self.weights.len() + self.bias.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Per-layer bookkeeping the backward pass needs beyond the activations.
pub(crate) enum Aux {
    None,
    ArgMax(Vec<usize>),
}

pub(crate) fn conv_forward<T: Scalar>(
    x: &[T],
    s: Shape,
    out_c: usize,
    k: usize,
    p: &LayerTensors<T>,
) -> Vec<T> {
    let (h, w) = (s.h, s.w);
    let pad = k / 2;
    let mut out = vec![T::default(); out_c * h * w];
    for o in 0..out_c {
        let plane = &mut out[o * h * w..(o + 1) * h * w];
        let b = p.bias[o];
        plane.iter_mut().for_each(|v| *v = b);
        for i in 0..s.c {
            let xin = &x[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let wv = p.weights[((o * s.c + i) * k + ky) * k + kx];
                    let dy = ky as isize - pad as isize;
                    let dx = kx as isize - pad as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize) as usize;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut plane[y * w + x0..y * w + x1];
                        let irow = &xin[sy * w + (x0 as isize + dx) as usize..sy * w + (x1 as isize + dx) as usize];
                        for (ov, iv) in orow.iter_mut().zip(irow) {
                            *ov += wv * *iv;
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns the input gradient; accumulates parameter gradients into `grad`
/// when given.
pub(crate) fn conv_backward<T: Scalar>(
    x: &[T],
    s: Shape,
    out_c: usize,
    k: usize,
    p: &LayerTensors<T>,
    dout: &[T],
    mut grad: Option<&mut LayerTensors<T>>,
) -> Vec<T> {
    let (h, w) = (s.h, s.w);
    let pad = k / 2;
    let mut dx_all = vec![T::default(); x.len()];
    for o in 0..out_c {
        let dplane = &dout[o * h * w..(o + 1) * h * w];
        if let Some(g) = grad.as_deref_mut() {
            let mut acc = T::default();
            for &d in dplane {
                acc += d;
            }
            g.bias[o] += acc;
        }
        for i in 0..s.c {
            let xin = &x[i * h * w..(i + 1) * h * w];
            let dxin = &mut dx_all[i * h * w..(i + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let widx = ((o * s.c + i) * k + ky) * k + kx;
                    let wv = p.weights[widx];
                    let dy = ky as isize - pad as isize;
                    let dxo = kx as isize - pad as isize;
                    let y0 = (-dy).max(0) as usize;
                    let y1 = (h as isize - dy).min(h as isize) as usize;
                    let x0 = (-dxo).max(0) as usize;
                    let x1 = (w as isize - dxo).min(w as isize) as usize;
                    let mut gw = T::default();
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let drow = &dplane[y * w + x0..y * w + x1];
                        let lo = sy * w + (x0 as isize + dxo) as usize;
                        let hi = sy * w + (x1 as isize + dxo) as usize;
                        for (dv, iv) in drow.iter().zip(&xin[lo..hi]) {
                            gw += *dv * *iv;
                        }
                        for (dv, gi) in drow.iter().zip(&mut dxin[lo..hi]) {
                            *gi += wv * *dv;
                        }
                    }
                    if let Some(g) = grad.as_deref_mut() {
                        g.weights[widx] += gw;
                    }
                }
            }
        }
    }
    dx_all
}

pub(crate) fn dense_forward<T: Scalar>(x: &[T], outputs: usize, p: &LayerTensors<T>) -> Vec<T> {
    let n = x.len();
    (0..outputs)
        .map(|j| {
            let row = &p.weights[j * n..(j + 1) * n];
            let mut acc = p.bias[j];
            for (wv, xv) in row.iter().zip(x) {
                acc += *wv * *xv;
            }
            acc
        })
        .collect()
}

pub(crate) fn dense_backward<T: Scalar>(
    x: &[T],
    outputs: usize,
    p: &LayerTensors<T>,
    dout: &[T],
    mut grad: Option<&mut LayerTensors<T>>,
) -> Vec<T> {
    let n = x.len();
    let mut dx = vec![T::default(); n];
    for j in 0..outputs {
        let d = dout[j];
        let row = &p.weights[j * n..(j + 1) * n];
        for (g, wv) in dx.iter_mut().zip(row) {
            *g += *wv * d;
        }
        if let Some(g) = grad.as_deref_mut() {
            g.bias[j] += d;
            for (gw, xv) in g.weights[j * n..(j + 1) * n].iter_mut().zip(x) {
                *gw += d * *xv;
            }
        }
    }
    dx
}

pub(crate) fn pool_forward<T: Scalar>(x: &[T], s: Shape, size: usize, max: bool) -> (Vec<T>, Aux) {
    let (oh, ow) = (s.h / size, s.w / size);
    let mut out = Vec::with_capacity(s.c * oh * ow);
    let mut arg = Vec::new();
    let inv = 1.0 / (size * size) as f64;
    for c in 0..s.c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = usize::MAX;
                let mut acc = T::default();
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = (c * s.h + oy * size + dy) * s.w + ox * size + dx;
                        if max {
                            if best == usize::MAX || x[idx].re() > x[best].re() {
                                best = idx;
                            }
                        } else {
                            acc += x[idx];
                        }
                    }
                }
                if max {
                    out.push(x[best]);
                    arg.push(best);
                } else {
                    out.push(acc.scale(inv));
                }
            }
        }
    }
    (out, if max { Aux::ArgMax(arg) } else { Aux::None })
}

pub(crate) fn pool_backward<T: Scalar>(s: Shape, size: usize, aux: &Aux, dout: &[T]) -> Vec<T> {
    let mut dx = vec![T::default(); s.len()];
    match aux {
        Aux::ArgMax(arg) => {
            for (d, &idx) in dout.iter().zip(arg) {
                dx[idx] += *d;
            }
        }
        Aux::None => {
            let (oh, ow) = (s.h / size, s.w / size);
            let inv = 1.0 / (size * size) as f64;
            for c in 0..s.c {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let d = dout[(c * oh + oy) * ow + ox].scale(inv);
                        for dy in 0..size {
                            for dxx in 0..size {
                                dx[(c * s.h + oy * size + dy) * s.w + ox * size + dxx] += d;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}
