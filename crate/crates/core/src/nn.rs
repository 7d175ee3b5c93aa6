//! Layer primitives and exact reverse-mode gradients for the fixed
//! conv / ReLU / max-pool / flatten / dense topology.
//!
//! There is no general autodiff graph: the [`ForwardTrace`] captures every
//! intermediate activation of one forward pass and the backward sweep walks
//! the layer list in reverse. The gradient of the ReLU at 0 is defined as 0,
//! and max-pool gradients flow only through the routed (argmax) cell of each
//! patch, first occurrence in row-major order on ties.

use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model};
use crate::tensor::Tensor;

/// Bank of `out_channels` filters of shape `in_channels x kernel x kernel`.
#[derive(Debug, Clone)]
pub struct ConvFilterBank {
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
    pub padding: usize,
    /// Flat `out_channels * in_channels * kernel * kernel`, row-major.
    pub weights: Vec<f64>,
    /// Standard deviation used at initialization.
    pub init_tau: f64,
}

impl ConvFilterBank {
    pub fn zeros(out_channels: usize, in_channels: usize, kernel: usize, padding: usize) -> Self {
        ConvFilterBank {
            out_channels,
            in_channels,
            kernel,
            padding,
            weights: vec![0.0; out_channels * in_channels * kernel * kernel],
            init_tau: 0.0,
        }
    }

    #[inline]
    pub fn weight(&self, v: usize, c: usize, p: usize, q: usize) -> f64 {
        self.weights[((v * self.in_channels + c) * self.kernel + p) * self.kernel + q]
    }

    #[inline]
    pub fn weight_mut(&mut self, v: usize, c: usize, p: usize, q: usize) -> &mut f64 {
        &mut self.weights[((v * self.in_channels + c) * self.kernel + p) * self.kernel + q]
    }
}

/// Per-patch argmax of a max-pool application: for every output cell the
/// flat index (within its `window x window` patch, row-major) of the selected
/// maximum. Exactly one index per patch.
#[derive(Debug, Clone)]
pub struct PoolRouting {
    pub channels: usize,
    pub out_rows: usize,
    pub out_cols: usize,
    pub window: usize,
    pub selected: Vec<u32>,
}

impl PoolRouting {
    #[inline]
    pub fn at(&self, c: usize, i: usize, j: usize) -> usize {
        self.selected[(c * self.out_rows + i) * self.out_cols + j] as usize
    }
}

/// Fully-connected layer `rows x cols`, optionally with a trainability mask.
/// Masked entries (`mask[i] == false`) are permanently zero.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    /// Flat `rows * cols`, row-major.
    pub weights: Vec<f64>,
    pub mask: Option<Vec<bool>>,
}

impl DenseLayer {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseLayer { rows, cols, weights: vec![0.0; rows * cols], mask: None }
    }

    /// Force masked entries to exact zero.
    pub fn apply_mask(&mut self) {
        if let Some(mask) = &self.mask {
            for (w, &keep) in self.weights.iter_mut().zip(mask) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }

    pub fn masked_entries_are_zero(&self) -> bool {
        match &self.mask {
            None => true,
            Some(mask) => self
                .weights
                .iter()
                .zip(mask)
                .all(|(&w, &keep)| keep || w.to_bits() == 0.0f64.to_bits()),
        }
    }
}

/// Valid/padded 2-D convolution: `out[v,i,j] = sum_{c,p,q} in[c,i+p-pad,j+q-pad] * w[v,c,p,q]`.
/// Output shape `(V, H - k + 1 + 2*pad, W - k + 1 + 2*pad)`; padding value 0.
pub fn conv2d(input: &Tensor, bank: &ConvFilterBank) -> Result<Tensor> {
    let [c_in, rows, cols]: [usize; 3] = match input.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::Shape {
                expected: "rank-3 (channels, rows, cols)".into(),
                found: format!("{other:?}"),
            })
        }
    };
    if c_in != bank.in_channels {
        return Err(Error::Shape {
            expected: format!("{} input channels", bank.in_channels),
            found: format!("{c_in}"),
        });
    }
    let k = bank.kernel;
    let pad = bank.padding;
    if rows + 2 * pad < k || cols + 2 * pad < k {
        return Err(Error::Shape {
            expected: format!("spatial extents >= {}", k.saturating_sub(2 * pad)),
            found: format!("({rows}, {cols})"),
        });
    }
    let out_rows = rows + 2 * pad - k + 1;
    let out_cols = cols + 2 * pad - k + 1;
    let mut out = Tensor::zeros(&[bank.out_channels, out_rows, out_cols]);

    let in_data = input.data();
    let out_data = out.data_mut();
    for v in 0..bank.out_channels {
        let out_plane = &mut out_data[v * out_rows * out_cols..(v + 1) * out_rows * out_cols];
        for c in 0..c_in {
            let in_plane = &in_data[c * rows * cols..(c + 1) * rows * cols];
            for p in 0..k {
                for q in 0..k {
                    let w = bank.weight(v, c, p, q);
                    if w == 0.0 {
                        continue;
                    }
                    // out[i][j] += w * in[i + p - pad][j + q - pad], in-range only.
                    for i in 0..out_rows {
                        let ii = i + p;
                        if ii < pad || ii - pad >= rows {
                            continue;
                        }
                        let ii = ii - pad;
                        let j_lo = pad.saturating_sub(q);
                        let j_hi = (cols + pad - q).min(out_cols);
                        if j_lo >= j_hi {
                            continue;
                        }
                        let src = &in_plane[ii * cols + (j_lo + q - pad)..];
                        let dst = &mut out_plane[i * out_cols + j_lo..i * out_cols + j_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += w * s;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Elementwise `max(0, x)`.
pub fn relu(t: &Tensor) -> Tensor {
    t.map(|x| if x > 0.0 { x } else { 0.0 })
}

pub fn relu_vec(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

/// Non-overlapping `window x window` max pooling. `window` must divide both
/// spatial extents. Returns the pooled map and the argmax routing.
pub fn maxpool(input: &Tensor, window: usize) -> Result<(Tensor, PoolRouting)> {
    let [channels, rows, cols]: [usize; 3] = match input.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::Shape {
                expected: "rank-3 (channels, rows, cols)".into(),
                found: format!("{other:?}"),
            })
        }
    };
    if window == 0 || rows % window != 0 || cols % window != 0 {
        return Err(Error::Config(format!(
            "pool window {window} must divide spatial extents ({rows}, {cols})"
        )));
    }
    let out_rows = rows / window;
    let out_cols = cols / window;
    let mut out = Tensor::zeros(&[channels, out_rows, out_cols]);
    let mut routing = PoolRouting {
        channels,
        out_rows,
        out_cols,
        window,
        selected: vec![0; channels * out_rows * out_cols],
    };
    for c in 0..channels {
        for i in 0..out_rows {
            for j in 0..out_cols {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = 0u32;
                for p in 0..window {
                    for q in 0..window {
                        let v = input.at3(c, i * window + p, j * window + q);
                        // Strict comparison keeps the first occurrence on ties.
                        if v > best {
                            best = v;
                            best_idx = (p * window + q) as u32;
                        }
                    }
                }
                out.set3(c, i, j, best);
                routing.selected[(c * out_rows + i) * out_cols + j] = best_idx;
            }
        }
    }
    Ok((out, routing))
}

/// Matrix-vector product `W x`, optionally rectified. Masked entries are
/// stored as exact zeros, so they contribute exactly nothing.
pub fn dense_forward(x: &[f64], layer: &DenseLayer, rectify: bool) -> Result<Vec<f64>> {
    if x.len() != layer.cols {
        return Err(Error::Shape {
            expected: format!("input of length {}", layer.cols),
            found: format!("{}", x.len()),
        });
    }
    let mut out = vec![0.0; layer.rows];
    for (r, o) in out.iter_mut().enumerate() {
        let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
        let mut acc = 0.0;
        for (w, v) in row.iter().zip(x) {
            acc += w * v;
        }
        *o = if rectify && acc <= 0.0 { 0.0 } else { acc };
    }
    Ok(out)
}

/// One recorded layer output.
#[derive(Debug, Clone)]
pub enum Activation {
    /// Conv or spatial-ReLU output.
    Map(Tensor),
    /// Max-pool output plus its argmax routing.
    Pooled(Tensor, PoolRouting),
    /// Flatten, dense pre-activation, or vector-ReLU output.
    Vector(Vec<f64>),
}

impl Activation {
    fn as_map(&self) -> Option<&Tensor> {
        match self {
            Activation::Map(t) | Activation::Pooled(t, _) => Some(t),
            Activation::Vector(_) => None,
        }
    }

    fn as_vector(&self) -> Option<&[f64]> {
        match self {
            Activation::Vector(v) => Some(v),
            _ => None,
        }
    }
}

/// All intermediate activations of one forward pass. Consumed by the
/// gradient sweep and by every CAM computation.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    pub input: Tensor,
    /// One entry per spec layer, in order.
    pub activations: Vec<Activation>,
    /// Index of the layer whose output is the rectified activation map `B`
    /// consumed by the dense head (the last spatial ReLU).
    pub split: usize,
    /// Output logits.
    pub output: Vec<f64>,
}

impl ForwardTrace {
    /// The rectified activation maps `B` (channels x rows x cols).
    pub fn rectified_maps(&self) -> &Tensor {
        self.activations[self.split]
            .as_map()
            .expect("split layer output is spatial")
    }

    pub fn logits(&self) -> &[f64] {
        &self.output
    }

    /// Argmax logit, first index on ties.
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.output.iter().enumerate() {
            if v > self.output[best] {
                best = i;
            }
        }
        best
    }
}

/// Run the model on `image`, recording every intermediate activation.
pub fn forward(model: &Model, image: &Tensor) -> Result<ForwardTrace> {
    let spec = &model.spec;
    if image.shape() != spec.input_shape() {
        return Err(Error::Shape {
            expected: format!("{:?}", spec.input_shape()),
            found: format!("{:?}", image.shape()),
        });
    }
    let mut activations: Vec<Activation> = Vec::with_capacity(spec.layers.len());
    let mut conv_idx = 0;
    let mut dense_idx = 0;
    for layer in &spec.layers {
        let prev: Option<&Activation> = activations.last();
        let next = match layer {
            LayerSpec::Conv { .. } => {
                let input = prev.map(|a| a.as_map().expect("conv input is spatial")).unwrap_or(image);
                let out = conv2d(input, &model.convs[conv_idx])?;
                conv_idx += 1;
                Activation::Map(out)
            }
            LayerSpec::Relu => match prev.expect("relu has a predecessor") {
                Activation::Map(t) | Activation::Pooled(t, _) => Activation::Map(relu(t)),
                Activation::Vector(v) => Activation::Vector(relu_vec(v)),
            },
            LayerSpec::MaxPool { size } => {
                let input = prev.map(|a| a.as_map().expect("pool input is spatial")).unwrap_or(image);
                let (out, routing) = maxpool(input, *size)?;
                Activation::Pooled(out, routing)
            }
            LayerSpec::Flatten => {
                let input = prev
                    .and_then(|a| a.as_map())
                    .ok_or_else(|| Error::Config("flatten requires a spatial input".into()))?;
                Activation::Vector(input.data().to_vec())
            }
            LayerSpec::Dense { .. } => {
                let input = prev
                    .and_then(|a| a.as_vector())
                    .ok_or_else(|| Error::Config("dense requires a vector input".into()))?;
                let out = dense_forward(input, &model.denses[dense_idx], false)?;
                dense_idx += 1;
                Activation::Vector(out)
            }
        };
        activations.push(next);
    }
    let output = activations
        .last()
        .and_then(|a| a.as_vector())
        .ok_or_else(|| Error::Config("model must end with a dense layer".into()))?
        .to_vec();
    Ok(ForwardTrace { input: image.clone(), activations, split: spec.split_index()?, output })
}

/// Evaluate only the dense head `f` on a (possibly modified) rectified map.
pub fn forward_from_rectified(model: &Model, b: &Tensor) -> Result<Vec<f64>> {
    let spec = &model.spec;
    let split = spec.split_index()?;
    let mut map: Option<Tensor> = Some(b.clone());
    let mut vec: Option<Vec<f64>> = None;
    let mut dense_idx = spec
        .layers
        .iter()
        .take(split + 1)
        .filter(|l| matches!(l, LayerSpec::Dense { .. }))
        .count();
    for layer in &spec.layers[split + 1..] {
        match layer {
            LayerSpec::MaxPool { size } => {
                let (out, _) = maxpool(map.as_ref().expect("pool input"), *size)?;
                map = Some(out);
            }
            LayerSpec::Flatten => {
                vec = Some(map.take().expect("flatten input").into_data());
            }
            LayerSpec::Dense { .. } => {
                let out = dense_forward(vec.as_ref().expect("dense input"), &model.denses[dense_idx], false)?;
                dense_idx += 1;
                vec = Some(out);
            }
            LayerSpec::Relu => {
                vec = Some(relu_vec(vec.as_ref().expect("relu input")));
            }
            LayerSpec::Conv { .. } => {
                return Err(Error::UnsupportedArchitecture(
                    "convolution after the split point".into(),
                ))
            }
        }
    }
    vec.ok_or_else(|| Error::Config("model must end with a dense layer".into()))
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BackwardOptions {
    /// Record the gradient with respect to the rectified maps `B`.
    pub wrt_rectified: bool,
    /// Accumulate parameter gradients.
    pub params: bool,
    /// Propagate all the way to the input image.
    pub input: bool,
}

/// Gradients produced by one backward sweep. Parameter gradients follow the
/// declaration order of the model's banks and dense layers.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub conv_weights: Vec<Vec<f64>>,
    pub dense_weights: Vec<Vec<f64>>,
    pub wrt_rectified: Option<Tensor>,
    pub input: Option<Tensor>,
}

enum Delta {
    Map(Tensor),
    Vector(Vec<f64>),
}

/// Reverse-mode sweep from `output_grad` (length = logit count) back through
/// the trace. Masked dense entries receive gradient exactly 0.
pub fn backward(
    model: &Model,
    trace: &ForwardTrace,
    output_grad: &[f64],
    opts: BackwardOptions,
) -> Result<Gradients> {
    let spec = &model.spec;
    if trace.activations.len() != spec.layers.len() {
        return Err(Error::Shape {
            expected: format!("trace with {} layers", spec.layers.len()),
            found: format!("{}", trace.activations.len()),
        });
    }
    if output_grad.len() != trace.output.len() {
        return Err(Error::Shape {
            expected: format!("output gradient of length {}", trace.output.len()),
            found: format!("{}", output_grad.len()),
        });
    }

    let mut grads = Gradients {
        conv_weights: model.convs.iter().map(|b| vec![0.0; b.weights.len()]).collect(),
        dense_weights: model.denses.iter().map(|d| vec![0.0; d.weights.len()]).collect(),
        wrt_rectified: None,
        input: None,
    };

    let conv_for_layer = spec.conv_index_by_layer();
    let dense_for_layer = spec.dense_index_by_layer();

    let mut delta = Delta::Vector(output_grad.to_vec());
    for idx in (0..spec.layers.len()).rev() {
        if idx == trace.split && opts.wrt_rectified {
            match &delta {
                Delta::Map(t) => grads.wrt_rectified = Some(t.clone()),
                Delta::Vector(_) => {
                    return Err(Error::Config("split layer gradient is not spatial".into()))
                }
            }
            if !opts.params && !opts.input {
                return Ok(grads);
            }
        }

        // Input of layer `idx`: previous activation, or the image itself.
        let layer_input: &Activation;
        let image_holder;
        if idx == 0 {
            image_holder = Activation::Map(trace.input.clone());
            layer_input = &image_holder;
        } else {
            layer_input = &trace.activations[idx - 1];
        }

        delta = match &spec.layers[idx] {
            LayerSpec::Dense { .. } => {
                let d = match delta {
                    Delta::Vector(v) => v,
                    Delta::Map(_) => unreachable!("dense delta is a vector"),
                };
                let dense_idx = dense_for_layer[idx];
                let layer = &model.denses[dense_idx];
                let x = layer_input.as_vector().expect("dense input is a vector");
                if opts.params {
                    let gw = &mut grads.dense_weights[dense_idx];
                    for r in 0..layer.rows {
                        let dr = d[r];
                        if dr == 0.0 {
                            continue;
                        }
                        let row = &mut gw[r * layer.cols..(r + 1) * layer.cols];
                        for (g, v) in row.iter_mut().zip(x) {
                            *g += dr * v;
                        }
                    }
                    if let Some(mask) = &layer.mask {
                        for (g, &keep) in gw.iter_mut().zip(mask) {
                            if !keep {
                                *g = 0.0;
                            }
                        }
                    }
                }
                let mut next = vec![0.0; layer.cols];
                for r in 0..layer.rows {
                    let dr = d[r];
                    if dr == 0.0 {
                        continue;
                    }
                    let row = &layer.weights[r * layer.cols..(r + 1) * layer.cols];
                    for (n, w) in next.iter_mut().zip(row) {
                        *n += dr * w;
                    }
                }
                Delta::Vector(next)
            }
            LayerSpec::Relu => match (&delta, layer_input) {
                (Delta::Vector(d), Activation::Vector(pre)) => {
                    let gated = d
                        .iter()
                        .zip(pre)
                        .map(|(&g, &a)| if a > 0.0 { g } else { 0.0 })
                        .collect();
                    Delta::Vector(gated)
                }
                (Delta::Map(d), _) => {
                    let pre = layer_input.as_map().expect("spatial relu input");
                    let mut gated = d.clone();
                    for (g, &a) in gated.data_mut().iter_mut().zip(pre.data()) {
                        if a <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    Delta::Map(gated)
                }
                _ => unreachable!("relu delta/input ranks agree"),
            },
            LayerSpec::Flatten => {
                let d = match delta {
                    Delta::Vector(v) => v,
                    Delta::Map(_) => unreachable!("flatten delta is a vector"),
                };
                let shape = layer_input.as_map().expect("flatten input is spatial").shape();
                Delta::Map(Tensor::from_vec(shape, d)?)
            }
            LayerSpec::MaxPool { .. } => {
                let d = match &delta {
                    Delta::Map(t) => t,
                    Delta::Vector(_) => unreachable!("pool delta is spatial"),
                };
                let routing = match &trace.activations[idx] {
                    Activation::Pooled(_, r) => r,
                    _ => {
                        return Err(Error::Config("trace does not match model: pool".into()));
                    }
                };
                let pre = layer_input.as_map().expect("pool input is spatial");
                let mut next = Tensor::zeros(pre.shape());
                let w = routing.window;
                for c in 0..routing.channels {
                    for i in 0..routing.out_rows {
                        for j in 0..routing.out_cols {
                            let sel = routing.at(c, i, j);
                            next.set3(c, i * w + sel / w, j * w + sel % w, d.at3(c, i, j));
                        }
                    }
                }
                Delta::Map(next)
            }
            LayerSpec::Conv { .. } => {
                let d = match &delta {
                    Delta::Map(t) => t,
                    Delta::Vector(_) => unreachable!("conv delta is spatial"),
                };
                let conv_idx = conv_for_layer[idx];
                let bank = &model.convs[conv_idx];
                let input = layer_input.as_map().expect("conv input is spatial");
                let [_, rows, cols] = [input.shape()[0], input.shape()[1], input.shape()[2]];
                let out_rows = d.shape()[1];
                let out_cols = d.shape()[2];
                let k = bank.kernel;
                let pad = bank.padding;
                if opts.params {
                    let gw = &mut grads.conv_weights[conv_idx];
                    for v in 0..bank.out_channels {
                        for c in 0..bank.in_channels {
                            let in_plane = &input.data()[c * rows * cols..(c + 1) * rows * cols];
                            let d_plane = &d.data()[v * out_rows * out_cols..(v + 1) * out_rows * out_cols];
                            for p in 0..k {
                                for q in 0..k {
                                    let mut acc = 0.0;
                                    for i in 0..out_rows {
                                        let ii = i + p;
                                        if ii < pad || ii - pad >= rows {
                                            continue;
                                        }
                                        let ii = ii - pad;
                                        let j_lo = pad.saturating_sub(q);
                                        let j_hi = (cols + pad - q).min(out_cols);
                                        if j_lo >= j_hi {
                                            continue;
                                        }
                                        let src = &in_plane[ii * cols + (j_lo + q - pad)..ii * cols + (j_hi + q - pad)];
                                        let dd = &d_plane[i * out_cols + j_lo..i * out_cols + j_hi];
                                        for (s, g) in src.iter().zip(dd) {
                                            acc += s * g;
                                        }
                                    }
                                    gw[((v * bank.in_channels + c) * k + p) * k + q] += acc;
                                }
                            }
                        }
                    }
                }
                let need_input_grad = idx > 0 || opts.input;
                if need_input_grad {
                    let mut next = Tensor::zeros(input.shape());
                    let next_data = next.data_mut();
                    for v in 0..bank.out_channels {
                        let d_plane = &d.data()[v * out_rows * out_cols..(v + 1) * out_rows * out_cols];
                        for c in 0..bank.in_channels {
                            let next_plane = &mut next_data[c * rows * cols..(c + 1) * rows * cols];
                            for p in 0..k {
                                for q in 0..k {
                                    let w = bank.weight(v, c, p, q);
                                    if w == 0.0 {
                                        continue;
                                    }
                                    for i in 0..out_rows {
                                        let ii = i + p;
                                        if ii < pad || ii - pad >= rows {
                                            continue;
                                        }
                                        let ii = ii - pad;
                                        let j_lo = pad.saturating_sub(q);
                                        let j_hi = (cols + pad - q).min(out_cols);
                                        if j_lo >= j_hi {
                                            continue;
                                        }
                                        let dst = &mut next_plane[ii * cols + (j_lo + q - pad)..ii * cols + (j_hi + q - pad)];
                                        let dd = &d_plane[i * out_cols + j_lo..i * out_cols + j_hi];
                                        for (t, g) in dst.iter_mut().zip(dd) {
                                            *t += w * g;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    Delta::Map(next)
                } else {
                    break;
                }
            }
        };

        if idx == 0 {
            if opts.input {
                grads.input = Some(match delta {
                    Delta::Map(t) => t,
                    Delta::Vector(_) => {
                        return Err(Error::Config("input gradient is not spatial".into()))
                    }
                });
            }
            break;
        }
    }
    Ok(grads)
}

/// Exact gradient of the logit `class` with respect to the rectified maps
/// `B`, routed only through pool-selected cells.
pub fn grad_output_wrt_rectified(model: &Model, trace: &ForwardTrace, class: usize) -> Result<Tensor> {
    if class >= trace.output.len() {
        return Err(Error::Config(format!(
            "class {class} out of range for {} logits",
            trace.output.len()
        )));
    }
    let mut seed = vec![0.0; trace.output.len()];
    seed[class] = 1.0;
    let grads = backward(
        model,
        trace,
        &seed,
        BackwardOptions { wrt_rectified: true, ..Default::default() },
    )?;
    grads
        .wrt_rectified
        .ok_or_else(|| Error::Config("split gradient was not produced".into()))
}

/// Gradients of `sum_c output_grad[c] * y_c` for every trainable parameter.
/// Masked entries receive gradient exactly 0.
pub fn grad_params(model: &Model, trace: &ForwardTrace, output_grad: &[f64]) -> Result<Gradients> {
    backward(model, trace, output_grad, BackwardOptions { params: true, ..Default::default() })
}

/// Gradient of the logit `class` with respect to the input image.
pub fn grad_input(model: &Model, trace: &ForwardTrace, class: usize) -> Result<Tensor> {
    if class >= trace.output.len() {
        return Err(Error::Config(format!(
            "class {class} out of range for {} logits",
            trace.output.len()
        )));
    }
    let mut seed = vec![0.0; trace.output.len()];
    seed[class] = 1.0;
    let grads = backward(
        model,
        trace,
        &seed,
        BackwardOptions { input: true, ..Default::default() },
    )?;
    grads.input.ok_or_else(|| Error::Config("input gradient was not produced".into()))
}
