//! Forward and backward passes for the sequential layer stack.
//!
//! Convolutions are computed as im2col + matrix product; the column matrix
//! is kept in the forward cache and reused for the weight gradient.

use ndarray::Array2;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::{same_out_len, same_pad_begin, Activation, LayerParams, LayerSpec, ModelParams};

/// Per-layer state captured during the forward pass.
enum LayerState {
    Dense {
        input: Tensor,
    },
    Conv {
        col: Array2<f64>,
        in_shape: Vec<usize>,
        geometry: ConvGeometry,
    },
    MaxPool1d {
        argmax: Vec<usize>,
        in_shape: Vec<usize>,
    },
    Dropout {
        mask: Option<Vec<f64>>,
    },
    Flatten {
        in_shape: Vec<usize>,
    },
    Relu {
        input: Tensor,
    },
    LeakyRelu {
        input: Tensor,
        slope: f64,
    },
    Softmax {
        output: Tensor,
    },
}

/// Spatial bookkeeping shared by conv forward and backward.
struct ConvGeometry {
    dims: Vec<(usize, usize, usize, usize)>, // (in_len, kernel, stride, pad_begin) per spatial axis
    in_ch: usize,
    out_spatial: Vec<usize>,
}

/// Activations and auxiliary state needed to run a backward pass.
pub struct ForwardCache {
    states: Vec<LayerState>,
    batch: usize,
}

/// Parameter gradients aligned with `ModelParams::layers`.
pub struct Gradients {
    pub layers: Vec<LayerParams>,
}

/// Reshape a batch to the architecture's input, tolerating dropped trailing
/// unit dimensions (e.g. `(n, 561)` feeding a `(561, 1)` input).
fn conform_batch(batch: &Tensor, input_shape: &[usize]) -> Result<Tensor> {
    let b = batch.batch();
    if batch.shape().len() >= 2 && &batch.shape()[1..] == input_shape {
        return Ok(batch.clone());
    }
    let per_sample: usize = input_shape.iter().product();
    if batch.row_len() == per_sample && b > 0 {
        let mut shape = vec![b];
        shape.extend_from_slice(input_shape);
        return batch.clone().reshape(shape);
    }
    Err(Error::Shape(format!(
        "batch shape {:?} does not match model input {:?}",
        batch.shape(),
        input_shape
    )))
}

/// Run the model on a batch. Returns the logits and the cache needed for
/// [`backward`]. The RNG is consumed only by dropout layers when
/// `training` is true; in eval mode the pass is a pure function of
/// `(params, batch)`.
pub fn forward(
    params: &ModelParams,
    batch: &Tensor,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor, ForwardCache)> {
    if !batch.all_finite() {
        return Err(Error::NonFinite("forward input contains NaN or Inf".into()));
    }
    let mut cur = conform_batch(batch, params.architecture().input_shape())?;
    let bsz = cur.batch();
    if bsz == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let mut states = Vec::with_capacity(params.architecture().layers().len());
    let mut param_idx = 0;
    for layer in params.architecture().layers() {
        match layer {
            LayerSpec::Dense { units } => {
                let lp = &params.layers()[param_idx];
                param_idx += 1;
                let fin = cur.row_len();
                let x = cur.view_2d(bsz, fin)?;
                let w = lp.weights.view_2d(fin, *units)?;
                let mut y = x.dot(&w);
                let bias = lp.biases.data();
                for mut row in y.rows_mut() {
                    for (v, b) in row.iter_mut().zip(bias) {
                        *v += *b;
                    }
                }
                let out = Tensor::new(vec![bsz, *units], y.into_raw_vec_and_offset().0)?;
                states.push(LayerState::Dense { input: cur });
                cur = out;
            }
            LayerSpec::Conv2d { filters, kernel, stride } => {
                let lp = &params.layers()[param_idx];
                param_idx += 1;
                let (h, w_in, c) = (cur.shape()[1], cur.shape()[2], cur.shape()[3]);
                let geometry = ConvGeometry {
                    dims: vec![
                        (h, kernel.0, stride.0, same_pad_begin(h, kernel.0, stride.0)),
                        (w_in, kernel.1, stride.1, same_pad_begin(w_in, kernel.1, stride.1)),
                    ],
                    in_ch: c,
                    out_spatial: vec![same_out_len(h, stride.0), same_out_len(w_in, stride.1)],
                };
                let col = im2col(&cur, &geometry);
                let out = conv_apply(&col, lp, bsz, &geometry.out_spatial, *filters)?;
                states.push(LayerState::Conv {
                    col,
                    in_shape: cur.shape().to_vec(),
                    geometry,
                });
                cur = out;
            }
            LayerSpec::Conv1d { filters, kernel, stride } => {
                let lp = &params.layers()[param_idx];
                param_idx += 1;
                let (l, c) = (cur.shape()[1], cur.shape()[2]);
                let geometry = ConvGeometry {
                    dims: vec![(l, *kernel, *stride, same_pad_begin(l, *kernel, *stride))],
                    in_ch: c,
                    out_spatial: vec![same_out_len(l, *stride)],
                };
                let col = im2col(&cur, &geometry);
                let out = conv_apply(&col, lp, bsz, &geometry.out_spatial, *filters)?;
                states.push(LayerState::Conv {
                    col,
                    in_shape: cur.shape().to_vec(),
                    geometry,
                });
                cur = out;
            }
            LayerSpec::MaxPool1d { pool, stride } => {
                let (l, c) = (cur.shape()[1], cur.shape()[2]);
                let lo = same_out_len(l, *stride);
                let pad = same_pad_begin(l, *pool, *stride);
                let x = cur.data();
                let mut out = vec![0.0; bsz * lo * c];
                let mut argmax = vec![0usize; bsz * lo * c];
                for b in 0..bsz {
                    for o in 0..lo {
                        let start = (o * stride) as isize - pad as isize;
                        for ch in 0..c {
                            let mut best = f64::NEG_INFINITY;
                            let mut best_idx = usize::MAX;
                            for k in 0..*pool {
                                let i = start + k as isize;
                                if i < 0 || i as usize >= l {
                                    continue;
                                }
                                let idx = (b * l + i as usize) * c + ch;
                                if x[idx] > best {
                                    best = x[idx];
                                    best_idx = idx;
                                }
                            }
                            if best_idx == usize::MAX {
                                return Err(Error::Shape(
                                    "maxpool1d window fell entirely outside the input".into(),
                                ));
                            }
                            let oi = (b * lo + o) * c + ch;
                            out[oi] = best;
                            argmax[oi] = best_idx;
                        }
                    }
                }
                states.push(LayerState::MaxPool1d {
                    argmax,
                    in_shape: cur.shape().to_vec(),
                });
                cur = Tensor::new(vec![bsz, lo, c], out)?;
            }
            LayerSpec::Dropout { rate } => {
                if training {
                    let scale = 1.0 / (1.0 - rate);
                    let mask: Vec<f64> = (0..cur.len())
                        .map(|_| if rng.gen::<f64>() < *rate { 0.0 } else { scale })
                        .collect();
                    for (v, m) in cur.data_mut().iter_mut().zip(&mask) {
                        *v *= m;
                    }
                    states.push(LayerState::Dropout { mask: Some(mask) });
                } else {
                    states.push(LayerState::Dropout { mask: None });
                }
            }
            LayerSpec::Flatten => {
                let in_shape = cur.shape().to_vec();
                let flat = cur.row_len();
                cur = cur.reshape(vec![bsz, flat])?;
                states.push(LayerState::Flatten { in_shape });
            }
            LayerSpec::Activation(act) => match act {
                Activation::Relu => {
                    let input = cur.clone();
                    for v in cur.data_mut() {
                        if *v < 0.0 {
                            *v = 0.0;
                        }
                    }
                    states.push(LayerState::Relu { input });
                }
                Activation::LeakyRelu(slope) => {
                    let input = cur.clone();
                    for v in cur.data_mut() {
                        if *v < 0.0 {
                            *v *= slope;
                        }
                    }
                    states.push(LayerState::LeakyRelu {
                        input,
                        slope: *slope,
                    });
                }
                Activation::Softmax => {
                    let cols = *cur.shape().last().unwrap();
                    let rows = cur.len() / cols;
                    softmax_rows(cur.data_mut(), rows, cols);
                    states.push(LayerState::Softmax { output: cur.clone() });
                }
            },
        }
    }
    if !cur.all_finite() {
        return Err(Error::NonFinite("forward pass produced NaN or Inf".into()));
    }
    Ok((cur, ForwardCache { states, batch: bsz }))
}

/// Eval-mode forward pass: deterministic, dropout is identity.
pub fn forward_eval(params: &ModelParams, batch: &Tensor) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward(params, batch, false, &mut rng).map(|(logits, _)| logits)
}

/// Backpropagate `dlogits` through the cached pass. Returns the parameter
/// gradients and the gradient with respect to the batch input.
pub fn backward(
    params: &ModelParams,
    cache: &ForwardCache,
    dlogits: &Tensor,
) -> Result<(Gradients, Tensor)> {
    let bsz = cache.batch;
    let mut grad = dlogits.clone();
    let mut grads: Vec<Option<LayerParams>> = vec![None; params.layers().len()];
    let mut param_idx = params.layers().len();
    for (layer, state) in params
        .architecture()
        .layers()
        .iter()
        .zip(&cache.states)
        .rev()
    {
        match (layer, state) {
            (LayerSpec::Dense { units }, LayerState::Dense { input }) => {
                param_idx -= 1;
                let lp = &params.layers()[param_idx];
                let fin = input.row_len();
                let x = input.view_2d(bsz, fin)?;
                let dy = grad.view_2d(bsz, *units)?;
                let dw = x.t().dot(&dy);
                let mut db = vec![0.0; *units];
                for row in dy.rows() {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += *v;
                    }
                }
                let w = lp.weights.view_2d(fin, *units)?;
                let dx = dy.dot(&w.t());
                grads[param_idx] = Some(LayerParams {
                    weights: Tensor::new(lp.weights.shape().to_vec(), dw.into_raw_vec_and_offset().0)?,
                    biases: Tensor::new(lp.biases.shape().to_vec(), db)?,
                });
                grad = Tensor::new(input.shape().to_vec(), dx.into_raw_vec_and_offset().0)?;
            }
            (
                LayerSpec::Conv2d { filters, .. } | LayerSpec::Conv1d { filters, .. },
                LayerState::Conv {
                    col,
                    in_shape,
                    geometry,
                },
            ) => {
                param_idx -= 1;
                let lp = &params.layers()[param_idx];
                let rows = col.nrows();
                let dy = grad.view_2d(rows, *filters)?;
                let dw = col.t().dot(&dy);
                let mut db = vec![0.0; *filters];
                for row in dy.rows() {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += *v;
                    }
                }
                let patch = col.ncols();
                let w = lp.weights.view_2d(patch, *filters)?;
                let dcol = dy.dot(&w.t());
                let dx = col2im(&dcol, in_shape, geometry);
                grads[param_idx] = Some(LayerParams {
                    weights: Tensor::new(lp.weights.shape().to_vec(), dw.into_raw_vec_and_offset().0)?,
                    biases: Tensor::new(lp.biases.shape().to_vec(), db)?,
                });
                grad = Tensor::new(in_shape.clone(), dx)?;
            }
            (LayerSpec::MaxPool1d { .. }, LayerState::MaxPool1d { argmax, in_shape }) => {
                let mut dx = vec![0.0; in_shape.iter().product()];
                for (g, &src) in grad.data().iter().zip(argmax) {
                    dx[src] += *g;
                }
                grad = Tensor::new(in_shape.clone(), dx)?;
            }
            (LayerSpec::Dropout { .. }, LayerState::Dropout { mask }) => {
                if let Some(mask) = mask {
                    for (g, m) in grad.data_mut().iter_mut().zip(mask) {
                        *g *= m;
                    }
                }
            }
            (LayerSpec::Flatten, LayerState::Flatten { in_shape }) => {
                grad = grad.reshape(in_shape.clone())?;
            }
            (LayerSpec::Activation(Activation::Relu), LayerState::Relu { input }) => {
                for (g, x) in grad.data_mut().iter_mut().zip(input.data()) {
                    if *x <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            (
                LayerSpec::Activation(Activation::LeakyRelu(_)),
                LayerState::LeakyRelu { input, slope },
            ) => {
                for (g, x) in grad.data_mut().iter_mut().zip(input.data()) {
                    if *x <= 0.0 {
                        *g *= slope;
                    }
                }
            }
            (LayerSpec::Activation(Activation::Softmax), LayerState::Softmax { output }) => {
                let cols = *output.shape().last().unwrap();
                let rows = output.len() / cols;
                let y = output.data();
                let g = grad.data_mut();
                for r in 0..rows {
                    let row = r * cols;
                    let dot: f64 = (0..cols).map(|j| g[row + j] * y[row + j]).sum();
                    for j in 0..cols {
                        g[row + j] = y[row + j] * (g[row + j] - dot);
                    }
                }
            }
            _ => {
                return Err(Error::Shape(
                    "forward cache does not match the architecture".into(),
                ))
            }
        }
    }
    let layers: Vec<LayerParams> = grads
        .into_iter()
        .map(|g| g.expect("every parameterized layer produced a gradient"))
        .collect();
    Ok((Gradients { layers }, grad))
}

fn conv_apply(
    col: &Array2<f64>,
    lp: &LayerParams,
    bsz: usize,
    out_spatial: &[usize],
    filters: usize,
) -> Result<Tensor> {
    let patch = col.ncols();
    let w = lp.weights.view_2d(patch, filters)?;
    let mut y = col.dot(&w);
    let bias = lp.biases.data();
    for mut row in y.rows_mut() {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
    let mut shape = vec![bsz];
    shape.extend_from_slice(out_spatial);
    shape.push(filters);
    Tensor::new(shape, y.into_raw_vec_and_offset().0)
}

/// Unfold padded convolution windows into a row-per-output-position matrix.
/// Rows are ordered batch-major, columns are (kernel position, channel).
fn im2col(input: &Tensor, geo: &ConvGeometry) -> Array2<f64> {
    let bsz = input.batch();
    let c = geo.in_ch;
    let x = input.data();
    match geo.dims.len() {
        1 => {
            let (l, k, s, pad) = geo.dims[0];
            let lo = geo.out_spatial[0];
            let mut col = Array2::<f64>::zeros((bsz * lo, k * c));
            {
                let buf = col.as_slice_mut().expect("freshly allocated is contiguous");
                for b in 0..bsz {
                    for o in 0..lo {
                        let row = (b * lo + o) * (k * c);
                        let start = (o * s) as isize - pad as isize;
                        for kk in 0..k {
                            let i = start + kk as isize;
                            if i < 0 || i as usize >= l {
                                continue;
                            }
                            let src = (b * l + i as usize) * c;
                            let dst = row + kk * c;
                            buf[dst..dst + c].copy_from_slice(&x[src..src + c]);
                        }
                    }
                }
            }
            col
        }
        2 => {
            let (h, kh, sh, pad_h) = geo.dims[0];
            let (w, kw, sw, pad_w) = geo.dims[1];
            let (ho, wo) = (geo.out_spatial[0], geo.out_spatial[1]);
            let mut col = Array2::<f64>::zeros((bsz * ho * wo, kh * kw * c));
            {
                let buf = col.as_slice_mut().expect("freshly allocated is contiguous");
                let cols = kh * kw * c;
                for b in 0..bsz {
                    for oh in 0..ho {
                        let ih0 = (oh * sh) as isize - pad_h as isize;
                        for ow in 0..wo {
                            let iw0 = (ow * sw) as isize - pad_w as isize;
                            let row = ((b * ho + oh) * wo + ow) * cols;
                            for r in 0..kh {
                                let ih = ih0 + r as isize;
                                if ih < 0 || ih as usize >= h {
                                    continue;
                                }
                                for q in 0..kw {
                                    let iw = iw0 + q as isize;
                                    if iw < 0 || iw as usize >= w {
                                        continue;
                                    }
                                    let src = ((b * h + ih as usize) * w + iw as usize) * c;
                                    let dst = row + (r * kw + q) * c;
                                    buf[dst..dst + c].copy_from_slice(&x[src..src + c]);
                                }
                            }
                        }
                    }
                }
            }
            col
        }
        _ => unreachable!("convolutions are 1-d or 2-d"),
    }
}

/// Scatter-add the column-matrix gradient back onto the input layout;
/// exact adjoint of [`im2col`].
fn col2im(dcol: &Array2<f64>, in_shape: &[usize], geo: &ConvGeometry) -> Vec<f64> {
    let bsz = in_shape[0];
    let c = geo.in_ch;
    let mut dx = vec![0.0; in_shape.iter().product()];
    let flat = dcol.as_slice().expect("dot output is contiguous");
    match geo.dims.len() {
        1 => {
            let (l, k, s, pad) = geo.dims[0];
            let lo = geo.out_spatial[0];
            for b in 0..bsz {
                for o in 0..lo {
                    let row = (b * lo + o) * (k * c);
                    let start = (o * s) as isize - pad as isize;
                    for kk in 0..k {
                        let i = start + kk as isize;
                        if i < 0 || i as usize >= l {
                            continue;
                        }
                        let dst = (b * l + i as usize) * c;
                        let src = row + kk * c;
                        for ch in 0..c {
                            dx[dst + ch] += flat[src + ch];
                        }
                    }
                }
            }
        }
        2 => {
            let (h, kh, sh, pad_h) = geo.dims[0];
            let (w, kw, sw, pad_w) = geo.dims[1];
            let (ho, wo) = (geo.out_spatial[0], geo.out_spatial[1]);
            let cols = kh * kw * c;
            for b in 0..bsz {
                for oh in 0..ho {
                    let ih0 = (oh * sh) as isize - pad_h as isize;
                    for ow in 0..wo {
                        let iw0 = (ow * sw) as isize - pad_w as isize;
                        let row = ((b * ho + oh) * wo + ow) * cols;
                        for r in 0..kh {
                            let ih = ih0 + r as isize;
                            if ih < 0 || ih as usize >= h {
                                continue;
                            }
                            for q in 0..kw {
                                let iw = iw0 + q as isize;
                                if iw < 0 || iw as usize >= w {
                                    continue;
                                }
                                let dst = ((b * h + ih as usize) * w + iw as usize) * c;
                                let src = row + (r * kw + q) * c;
                                for ch in 0..c {
                                    dx[dst + ch] += flat[src + ch];
                                }
                            }
                        }
                    }
                }
            }
        }
        _ => unreachable!(),
    }
    dx
}

pub(crate) fn softmax_rows(data: &mut [f64], rows: usize, cols: usize) {
    for r in 0..rows {
        let row = &mut data[r * cols..(r + 1) * cols];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
}

/// Apply one SGD step in place: `p -= lr * g`.
pub(crate) fn sgd_apply(params: &mut ModelParams, grads: &Gradients, lr: f64) {
    for (p, g) in params.layers_mut().iter_mut().zip(&grads.layers) {
        for (pv, gv) in p.weights.data_mut().iter_mut().zip(g.weights.data()) {
            *pv -= lr * gv;
        }
        for (pv, gv) in p.biases.data_mut().iter_mut().zip(g.biases.data()) {
            *pv -= lr * gv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::super::{architectures, build_model, Architecture};
    use super::*;

    fn dense_only(inputs: usize, outputs: usize) -> Architecture {
        Architecture::new(
            "dense_only",
            vec![inputs],
            vec![LayerSpec::Dense { units: outputs }],
        )
        .unwrap()
    }

    #[test]
    fn zero_weights_give_zero_logits_and_uniform_softmax() {
        let arch = dense_only(4, 10);
        let mut params = build_model(&arch, 1).unwrap();
        for l in params.layers_mut() {
            l.weights.data_mut().fill(0.0);
            l.biases.data_mut().fill(0.0);
        }
        let batch = Tensor::new(vec![3, 4], vec![0.5; 12]).unwrap();
        let logits = forward_eval(&params, &batch).unwrap();
        assert!(logits.data().iter().all(|&v| v == 0.0));
        let mut probs = logits.clone();
        softmax_rows(probs.data_mut(), 3, 10);
        assert!(probs.data().iter().all(|&p| (p - 0.1).abs() < 1e-15));
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let arch = architectures::har_student();
        let params = build_model(&arch, 7).unwrap();
        let batch = Tensor::new(vec![2, 561, 1], (0..1122).map(|i| (i % 17) as f64 / 17.0).collect()).unwrap();
        let a = forward_eval(&params, &batch).unwrap();
        let b = forward_eval(&params, &batch).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[2, 6]);
    }

    #[test]
    fn student_logit_shape_on_batch_of_64() {
        let arch = architectures::mnist_student();
        let params = build_model(&arch, 3).unwrap();
        let batch = Tensor::new(vec![64, 28, 28, 1], vec![0.25; 64 * 784]).unwrap();
        let logits = forward_eval(&params, &batch).unwrap();
        assert_eq!(logits.shape(), &[64, 10]);
    }

    #[test]
    fn non_finite_input_rejected() {
        let arch = dense_only(2, 2);
        let params = build_model(&arch, 0).unwrap();
        let batch = Tensor::new(vec![1, 2], vec![f64::NAN, 0.0]).unwrap();
        assert!(forward_eval(&params, &batch).is_err());
    }

    #[test]
    fn trailing_channel_dim_is_conformed() {
        let arch = architectures::har_student();
        let params = build_model(&arch, 4).unwrap();
        let flat = Tensor::new(vec![2, 561], vec![0.1; 1122]).unwrap();
        let logits = forward_eval(&params, &flat).unwrap();
        assert_eq!(logits.shape(), &[2, 6]);
    }
}
