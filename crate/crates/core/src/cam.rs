//! CAM-based explanation methods over a [`ForwardTrace`], the closed-form
//! path-sum route to the GradCAM coefficients, and saliency post-processing
//! (bilinear upsampling, min-max normalization).
//!
//! All methods explain a single logit; callers usually pass the predicted
//! class. Every raw map is a ReLU'd combination of the rectified activation
//! maps `B`, so it is elementwise nonnegative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LayerSpec, Model};
use crate::nn::{self, ForwardTrace, PoolRouting};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CamMethod {
    GradCam,
    XGradCam,
    GradCamPP,
    HiResCam,
    ScoreCam,
    OptiCam,
    AblationCam,
    EigenCam,
}

impl CamMethod {
    pub const ALL: [CamMethod; 8] = [
        CamMethod::GradCam,
        CamMethod::XGradCam,
        CamMethod::GradCamPP,
        CamMethod::HiResCam,
        CamMethod::ScoreCam,
        CamMethod::OptiCam,
        CamMethod::AblationCam,
        CamMethod::EigenCam,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CamMethod::GradCam => "gradcam",
            CamMethod::XGradCam => "xgradcam",
            CamMethod::GradCamPP => "gradcampp",
            CamMethod::HiResCam => "hirescam",
            CamMethod::ScoreCam => "scorecam",
            CamMethod::OptiCam => "opticam",
            CamMethod::AblationCam => "ablationcam",
            CamMethod::EigenCam => "eigencam",
        }
    }

    pub fn from_name(name: &str) -> Option<CamMethod> {
        Self::ALL.iter().copied().find(|m| m.name() == name)
    }
}

impl std::fmt::Display for CamMethod {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Per-method heat map at feature resolution plus its input-resolution forms.
#[derive(Debug, Clone)]
pub struct SaliencyMap {
    pub method: CamMethod,
    /// Nonnegative map at feature resolution (rows x cols of `B`).
    pub raw: Tensor,
    /// Bilinear upsampling of `raw` to input resolution, same scale.
    pub upsampled: Tensor,
    /// `upsampled` min-max normalized to [0, 1]; constant maps become zero.
    pub normalized: Tensor,
}

/// Bilinear upsampling with half-pixel centers (source position of output
/// row `y` is `(y + 0.5) * h / H - 0.5`, indices clamped). Identity when the
/// sizes match.
pub fn bilinear_upsample(src: &Tensor, out_rows: usize, out_cols: usize) -> Tensor {
    let (h, w) = (src.shape()[0], src.shape()[1]);
    let mut out = Tensor::zeros(&[out_rows, out_cols]);
    for y in 0..out_rows {
        let py = (y as f64 + 0.5) * h as f64 / out_rows as f64 - 0.5;
        let y0 = py.floor();
        let ty = py - y0;
        let r0 = (y0.max(0.0) as usize).min(h - 1);
        let r1 = ((y0 + 1.0).max(0.0) as usize).min(h - 1);
        for x in 0..out_cols {
            let px = (x as f64 + 0.5) * w as f64 / out_cols as f64 - 0.5;
            let x0 = px.floor();
            let tx = px - x0;
            let c0 = (x0.max(0.0) as usize).min(w - 1);
            let c1 = ((x0 + 1.0).max(0.0) as usize).min(w - 1);
            let v = (1.0 - ty) * ((1.0 - tx) * src.at2(r0, c0) + tx * src.at2(r0, c1))
                + ty * ((1.0 - tx) * src.at2(r1, c0) + tx * src.at2(r1, c1));
            out.set2(y, x, v);
        }
    }
    out
}

/// Adjoint of [`bilinear_upsample`]: scatter an output-resolution gradient
/// back to the source grid with the same weights.
pub fn bilinear_upsample_adjoint(grad: &Tensor, src_rows: usize, src_cols: usize) -> Tensor {
    let (out_rows, out_cols) = (grad.shape()[0], grad.shape()[1]);
    let mut out = Tensor::zeros(&[src_rows, src_cols]);
    for y in 0..out_rows {
        let py = (y as f64 + 0.5) * src_rows as f64 / out_rows as f64 - 0.5;
        let y0 = py.floor();
        let ty = py - y0;
        let r0 = (y0.max(0.0) as usize).min(src_rows - 1);
        let r1 = ((y0 + 1.0).max(0.0) as usize).min(src_rows - 1);
        for x in 0..out_cols {
            let px = (x as f64 + 0.5) * src_cols as f64 / out_cols as f64 - 0.5;
            let x0 = px.floor();
            let tx = px - x0;
            let c0 = (x0.max(0.0) as usize).min(src_cols - 1);
            let c1 = ((x0 + 1.0).max(0.0) as usize).min(src_cols - 1);
            let g = grad.at2(y, x);
            *out_at(&mut out, r0, c0) += (1.0 - ty) * (1.0 - tx) * g;
            *out_at(&mut out, r0, c1) += (1.0 - ty) * tx * g;
            *out_at(&mut out, r1, c0) += ty * (1.0 - tx) * g;
            *out_at(&mut out, r1, c1) += ty * tx * g;
        }
    }
    out
}

fn out_at(t: &mut Tensor, i: usize, j: usize) -> &mut f64 {
    let cols = t.shape()[1];
    &mut t.data_mut()[i * cols + j]
}

/// Min-max map to [0, 1]; a constant map becomes all zeros.
pub fn minmax_normalize(t: &Tensor) -> Tensor {
    let lo = t.min();
    let hi = t.max();
    let range = hi - lo;
    if range <= 0.0 {
        return Tensor::zeros(t.shape());
    }
    t.map(|x| (x - lo) / range)
}

/// Upsample a raw feature-resolution map to `rows x cols` and normalize.
pub fn upsample_normalize(
    method: CamMethod,
    raw: Tensor,
    rows: usize,
    cols: usize,
) -> Result<SaliencyMap> {
    let (h, w) = (raw.shape()[0], raw.shape()[1]);
    if rows < h || cols < w {
        return Err(Error::Config(format!(
            "target ({rows}, {cols}) smaller than source ({h}, {w})"
        )));
    }
    let upsampled = bilinear_upsample(&raw, rows, cols);
    let normalized = minmax_normalize(&upsampled);
    Ok(SaliencyMap { method, raw, upsampled, normalized })
}

fn input_extent(trace: &ForwardTrace) -> (usize, usize) {
    (trace.input.shape()[1], trace.input.shape()[2])
}

/// `relu(sum_v alpha_v * B_v)` at feature resolution.
fn combine_channels(b: &Tensor, alpha: &[f64]) -> Tensor {
    let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
    debug_assert_eq!(channels, alpha.len());
    let mut out = Tensor::zeros(&[h, w]);
    for (v, &a) in alpha.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        let plane = b.channel(v);
        for (o, &x) in out.data_mut().iter_mut().zip(plane) {
            *o += a * x;
        }
    }
    for o in out.data_mut() {
        if *o < 0.0 {
            *o = 0.0;
        }
    }
    out
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// GradCAM: `alpha_v = GAP(grad of the logit wrt B_v)`,
/// map `= relu(sum_v alpha_v B_v)`.
pub fn gradcam(model: &Model, trace: &ForwardTrace, class: usize) -> Result<SaliencyMap> {
    let grad = nn::grad_output_wrt_rectified(model, trace, class)?;
    let b = trace.rectified_maps();
    let alpha: Vec<f64> = (0..b.shape()[0]).map(|v| mean(grad.channel(v))).collect();
    let raw = combine_channels(b, &alpha);
    let (rows, cols) = input_extent(trace);
    upsample_normalize(CamMethod::GradCam, raw, rows, cols)
}

/// XGradCAM: channel weights are the gradient rescaled by the L1-normalized
/// activation, summed over the map; channels with `||B_v||_1 = 0` get
/// weight 0. For a constant positive channel the weight reduces to GradCAM's.
pub fn xgradcam(model: &Model, trace: &ForwardTrace, class: usize) -> Result<SaliencyMap> {
    let grad = nn::grad_output_wrt_rectified(model, trace, class)?;
    let b = trace.rectified_maps();
    let channels = b.shape()[0];
    let mut alpha = vec![0.0; channels];
    for (v, a) in alpha.iter_mut().enumerate() {
        let plane = b.channel(v);
        let l1: f64 = plane.iter().sum(); // B >= 0
        if l1 > 0.0 {
            *a = plane
                .iter()
                .zip(grad.channel(v))
                .map(|(&x, &g)| (x / l1) * g)
                .sum();
        }
    }
    let raw = combine_channels(b, &alpha);
    let (rows, cols) = input_extent(trace);
    upsample_normalize(CamMethod::XGradCam, raw, rows, cols)
}

/// GradCAM++ with the usual surrogate for higher derivatives of a
/// piecewise-linear network (exponential-of-score trick): elementwise
/// second and third derivatives become `g^2` and `g^3`, and 0/0 cells
/// contribute nothing.
pub fn gradcampp(model: &Model, trace: &ForwardTrace, class: usize) -> Result<SaliencyMap> {
    let grad = nn::grad_output_wrt_rectified(model, trace, class)?;
    let b = trace.rectified_maps();
    let channels = b.shape()[0];
    let hw = (b.shape()[1] * b.shape()[2]) as f64;
    let mut alpha = vec![0.0; channels];
    for (v, a) in alpha.iter_mut().enumerate() {
        let plane = b.channel(v);
        let l1: f64 = plane.iter().sum();
        let mut acc = 0.0;
        for &g in grad.channel(v) {
            let g2 = g * g;
            let denom = 2.0 * g2 + l1 * g2 * g;
            if denom != 0.0 && g > 0.0 {
                acc += (g2 / denom) * g;
            }
        }
        *a = acc / hw;
    }
    let raw = combine_channels(b, &alpha);
    let (rows, cols) = input_extent(trace);
    upsample_normalize(CamMethod::GradCamPP, raw, rows, cols)
}

/// HiResCAM: elementwise product of gradient and activation, per channel,
/// summed and rectified. No global coefficient, so masked gradient rows
/// zero the map rows exactly.
pub fn hirescam(model: &Model, trace: &ForwardTrace, class: usize) -> Result<SaliencyMap> {
    let grad = nn::grad_output_wrt_rectified(model, trace, class)?;
    let b = trace.rectified_maps();
    let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
    let mut raw = Tensor::zeros(&[h, w]);
    for v in 0..channels {
        for ((o, &x), &g) in raw.data_mut().iter_mut().zip(b.channel(v)).zip(grad.channel(v)) {
            *o += g * x;
        }
    }
    for o in raw.data_mut() {
        if *o < 0.0 {
            *o = 0.0;
        }
    }
    let (rows, cols) = input_extent(trace);
    upsample_normalize(CamMethod::HiResCam, raw, rows, cols)
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|&x| (x - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Mask every input channel by an H x W map in [0, 1].
fn mask_image(image: &Tensor, mask: &Tensor) -> Tensor {
    let [c, h, w] = [image.shape()[0], image.shape()[1], image.shape()[2]];
    let mut out = image.clone();
    for ch in 0..c {
        let base = ch * h * w;
        for (i, m) in mask.data().iter().enumerate() {
            out.data_mut()[base + i] *= m;
        }
    }
    out
}

/// ScoreCAM with the identity baseline: each channel weight is the logit
/// drop when the input is masked by that channel's normalized upsampled
/// activation; weights pass through a softmax.
pub fn scorecam(model: &Model, trace: &ForwardTrace, class: usize) -> Result<SaliencyMap> {
    let b = trace.rectified_maps();
    let channels = b.shape()[0];
    let (rows, cols) = input_extent(trace);
    let baseline = trace.output[class];
    let mut beta = vec![0.0; channels];
    for (v, out) in beta.iter_mut().enumerate() {
        let plane = Tensor::from_vec(&[b.shape()[1], b.shape()[2]], b.channel(v).to_vec())?;
        let mask = minmax_normalize(&bilinear_upsample(&plane, rows, cols));
        let masked = mask_image(&trace.input, &mask);
        let logits = nn::forward(model, &masked)?.output;
        *out = logits[class] - baseline;
    }
    let alpha = softmax(&beta);
    let raw = combine_channels(b, &alpha);
    upsample_normalize(CamMethod::ScoreCam, raw, rows, cols)
}

#[derive(Debug, Clone, Copy)]
pub struct OptiCamOptions {
    pub steps: usize,
    pub lr: f64,
}

impl Default for OptiCamOptions {
    fn default() -> Self {
        OptiCamOptions { steps: 50, lr: 0.05 }
    }
}

/// Objective and gradient of `logit_class(image * s(Up(sum_v softmax(beta)_v B_v)))`
/// with respect to `beta`. The min-max normalization is differentiated
/// through its arg-min/arg-max picks, matching autodiff behavior.
fn opticam_objective(
    model: &Model,
    trace: &ForwardTrace,
    class: usize,
    beta: &[f64],
    with_grad: bool,
) -> Result<(f64, Option<Vec<f64>>)> {
    let b = trace.rectified_maps();
    let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
    let (rows, cols) = input_extent(trace);
    let weights = softmax(beta);

    // P = sum_v softmax(beta)_v B_v at feature resolution.
    let mut p = Tensor::zeros(&[h, w]);
    for v in 0..channels {
        let wv = weights[v];
        for (o, &x) in p.data_mut().iter_mut().zip(b.channel(v)) {
            *o += wv * x;
        }
    }
    let up = bilinear_upsample(&p, rows, cols);
    let lo = up.min();
    let hi = up.max();
    let range = hi - lo;
    let mask = if range > 0.0 { up.map(|x| (x - lo) / range) } else { Tensor::zeros(&[rows, cols]) };
    let masked = mask_image(&trace.input, &mask);
    let masked_trace = nn::forward(model, &masked)?;
    let objective = masked_trace.output[class];
    if !objective.is_finite() {
        return Err(Error::NonFinite("opti-cam objective".into()));
    }
    if !with_grad {
        return Ok((objective, None));
    }

    // d objective / d masked input, then chain to the mask.
    let g_input = nn::grad_input(model, &masked_trace, class)?;
    let [c_in, _, _] = [g_input.shape()[0], g_input.shape()[1], g_input.shape()[2]];
    let mut g_mask = Tensor::zeros(&[rows, cols]);
    for ch in 0..c_in {
        let gi = g_input.channel(ch);
        let xi = trace.input.channel(ch);
        for ((o, &g), &x) in g_mask.data_mut().iter_mut().zip(gi).zip(xi) {
            *o += g * x;
        }
    }

    // Through the min-max normalization.
    let mut g_up = Tensor::zeros(&[rows, cols]);
    if range > 0.0 {
        let argmin = up
            .data()
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let argmax = up
            .data()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap();
        let gsum: f64 = g_mask.data().iter().sum();
        let gdot: f64 = g_mask
            .data()
            .iter()
            .zip(up.data())
            .map(|(&g, &u)| g * (u - lo))
            .sum::<f64>()
            / (range * range);
        for (o, &g) in g_up.data_mut().iter_mut().zip(g_mask.data()) {
            *o = g / range;
        }
        g_up.data_mut()[argmin] -= gsum / range;
        g_up.data_mut()[argmax] -= gdot;
        g_up.data_mut()[argmin] += gdot;
    }

    // Down to feature resolution, then through the softmax.
    let g_p = bilinear_upsample_adjoint(&g_up, h, w);
    let t: Vec<f64> = (0..channels)
        .map(|v| g_p.data().iter().zip(b.channel(v)).map(|(&g, &x)| g * x).sum())
        .collect();
    let dot: f64 = weights.iter().zip(&t).map(|(&s, &x)| s * x).sum();
    let g_beta: Vec<f64> = weights.iter().zip(&t).map(|(&s, &x)| s * (x - dot)).collect();
    Ok((objective, Some(g_beta)))
}

/// Gradient ascent on the channel-weight logits `beta`, keeping the
/// objective non-decreasing (rejected steps halve the step size). Returns
/// the final `beta` together with the initial and final objectives.
pub fn opticam_beta(
    model: &Model,
    trace: &ForwardTrace,
    class: usize,
    opts: OptiCamOptions,
) -> Result<(Vec<f64>, f64, f64)> {
    if opts.steps == 0 {
        return Err(Error::Config("opti-cam needs at least one step".into()));
    }
    let channels = trace.rectified_maps().shape()[0];
    let mut beta = vec![0.0; channels];
    let (initial, _) = opticam_objective(model, trace, class, &beta, false)?;
    let mut current = initial;
    let mut lr = opts.lr;
    for _ in 0..opts.steps {
        let (_, grad) = opticam_objective(model, trace, class, &beta, true)?;
        let grad = grad.expect("gradient requested");
        let candidate: Vec<f64> = beta.iter().zip(&grad).map(|(&x, &g)| x + lr * g).collect();
        if candidate.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("opti-cam step".into()));
        }
        let (objective, _) = opticam_objective(model, trace, class, &candidate, false)?;
        if objective >= current {
            beta = candidate;
            current = objective;
        } else {
            lr *= 0.5;
        }
    }
    Ok((beta, initial, current))
}

/// Opti-CAM: softmax channel weights optimized to maximize the masked-input
/// logit.
pub fn opticam(
    model: &Model,
    trace: &ForwardTrace,
    class: usize,
    opts: OptiCamOptions,
) -> Result<SaliencyMap> {
    let (beta, _, _) = opticam_beta(model, trace, class, opts)?;
    let alpha = softmax(&beta);
    let raw = combine_channels(trace.rectified_maps(), &alpha);
    let (rows, cols) = input_extent(trace);
    upsample_normalize(CamMethod::OptiCam, raw, rows, cols)
}

const ABLATION_GUARD: f64 = 1e-12;

/// AblationCAM: weight `(y - y_v) / y` where `y_v` re-evaluates the dense
/// head with channel `v` of `B` zeroed out.
pub fn ablationcam(model: &Model, trace: &ForwardTrace, class: usize) -> Result<SaliencyMap> {
    let y = trace.output[class];
    if y.abs() < ABLATION_GUARD {
        return Err(Error::DivisionGuard { value: y, threshold: ABLATION_GUARD });
    }
    let b = trace.rectified_maps();
    let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
    let mut alpha = vec![0.0; channels];
    for (v, a) in alpha.iter_mut().enumerate() {
        let mut ablated = b.clone();
        ablated.data_mut()[v * h * w..(v + 1) * h * w].fill(0.0);
        let y_v = nn::forward_from_rectified(model, &ablated)?[class];
        *a = (y - y_v) / y;
    }
    let raw = combine_channels(b, &alpha);
    let (rows, cols) = input_extent(trace);
    upsample_normalize(CamMethod::AblationCam, raw, rows, cols)
}

/// EigenCAM: projection of the (pixels x channels) activation matrix onto
/// its first right singular direction, computed by power iteration on the
/// channel Gram matrix. Sign fixed so the map sum is nonnegative, then ReLU.
pub fn eigencam(trace: &ForwardTrace) -> Result<SaliencyMap> {
    let b = trace.rectified_maps();
    let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
    let (rows, cols) = input_extent(trace);

    let mut gram = vec![0.0; channels * channels];
    for u in 0..channels {
        for v in u..channels {
            let dot: f64 = b.channel(u).iter().zip(b.channel(v)).map(|(&a, &c)| a * c).sum();
            gram[u * channels + v] = dot;
            gram[v * channels + u] = dot;
        }
    }
    if gram.iter().all(|&x| x == 0.0) {
        return upsample_normalize(CamMethod::EigenCam, Tensor::zeros(&[h, w]), rows, cols);
    }

    // Power iteration; Gram is PSD so this converges to the top eigenvector.
    let start = (0..channels)
        .max_by(|&a, &c| {
            gram[a * channels + a]
                .partial_cmp(&gram[c * channels + c])
                .unwrap()
        })
        .unwrap();
    let mut x = vec![0.0; channels];
    x[start] = 1.0;
    for _ in 0..1000 {
        let mut y = vec![0.0; channels];
        for u in 0..channels {
            let row = &gram[u * channels..(u + 1) * channels];
            y[u] = row.iter().zip(&x).map(|(&g, &xv)| g * xv).sum();
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        for v in y.iter_mut() {
            *v /= norm;
        }
        let delta = y.iter().zip(&x).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
        x = y;
        if delta < 1e-14 {
            break;
        }
    }

    let mut raw = Tensor::zeros(&[h, w]);
    for v in 0..channels {
        let xv = x[v];
        if xv == 0.0 {
            continue;
        }
        for (o, &a) in raw.data_mut().iter_mut().zip(b.channel(v)) {
            *o += xv * a;
        }
    }
    if raw.sum() < 0.0 {
        for o in raw.data_mut() {
            *o = -*o;
        }
    }
    for o in raw.data_mut() {
        if *o < 0.0 {
            *o = 0.0;
        }
    }
    upsample_normalize(CamMethod::EigenCam, raw, rows, cols)
}

/// Dispatch a method by id.
pub fn compute(
    method: CamMethod,
    model: &Model,
    trace: &ForwardTrace,
    class: usize,
    opti: OptiCamOptions,
) -> Result<SaliencyMap> {
    match method {
        CamMethod::GradCam => gradcam(model, trace, class),
        CamMethod::XGradCam => xgradcam(model, trace, class),
        CamMethod::GradCamPP => gradcampp(model, trace, class),
        CamMethod::HiResCam => hirescam(model, trace, class),
        CamMethod::ScoreCam => scorecam(model, trace, class),
        CamMethod::OptiCam => opticam(model, trace, class, opti),
        CamMethod::AblationCam => ablationcam(model, trace, class),
        CamMethod::EigenCam => eigencam(trace),
    }
}

/// Gradient-routing state for the closed-form coefficient computation:
/// per-patch argmax blocks, hidden-unit activity indicators, and the
/// per-pooled-cell path sums.
pub struct BackpropWorkspace<'a> {
    pub routing: &'a PoolRouting,
    /// `indicators[l][i] = 1{a^(l+1)_i > 0}` for the hidden dense layers.
    pub indicators: Vec<Vec<bool>>,
    /// One path sum per flattened pooled cell.
    pub path_sums: Vec<f64>,
}

fn require_model_m(model: &Model) -> Result<()> {
    let l = &model.spec.layers;
    let head_ok = matches!(l.first(), Some(LayerSpec::Conv { .. }))
        && matches!(l.get(1), Some(LayerSpec::Relu))
        && matches!(l.get(2), Some(LayerSpec::MaxPool { .. }))
        && matches!(l.get(3), Some(LayerSpec::Flatten));
    let tail_ok = l.len() >= 5
        && (l.len() - 5).is_multiple_of(2)
        && l[4..].iter().enumerate().all(|(i, layer)| {
            if i % 2 == 0 {
                matches!(layer, LayerSpec::Dense { .. })
            } else {
                matches!(layer, LayerSpec::Relu)
            }
        });
    if head_ok && tail_ok {
        Ok(())
    } else {
        Err(Error::UnsupportedArchitecture(
            "closed-form coefficients need conv/relu/pool/flatten + dense stack".into(),
        ))
    }
}

/// Sum over hidden-index paths of activity-gated weight products, starting
/// from column `col` of the first dense layer and ending at output `class`.
fn path_sum(model: &Model, indicators: &[Vec<bool>], class: usize, col: usize) -> f64 {
    fn recurse(model: &Model, indicators: &[Vec<bool>], class: usize, level: usize, col: usize) -> f64 {
        let dense = &model.denses[level];
        if level == model.denses.len() - 1 {
            return dense.weights[class * dense.cols + col];
        }
        let mut acc = 0.0;
        for i in 0..dense.rows {
            if indicators[level][i] {
                acc += dense.weights[i * dense.cols + col]
                    * recurse(model, indicators, class, level + 1, i);
            }
        }
        acc
    }
    recurse(model, indicators, class, 0, col)
}

/// Build the routing blocks, activity indicators, and path sums for one
/// trace of a simple conv/pool/dense model.
pub fn backprop_workspace<'a>(
    model: &Model,
    trace: &'a ForwardTrace,
    class: usize,
) -> Result<BackpropWorkspace<'a>> {
    require_model_m(model)?;
    if class >= model.spec.class_count() {
        return Err(Error::Config(format!("class {class} out of range")));
    }
    let routing = match &trace.activations[2] {
        crate::nn::Activation::Pooled(_, r) => r,
        _ => return Err(Error::Config("trace does not match model: pool".into())),
    };
    // Hidden pre-activations live at layers 4, 6, ... (dense outputs).
    let depth = model.denses.len();
    let mut indicators = Vec::with_capacity(depth.saturating_sub(1));
    for l in 0..depth.saturating_sub(1) {
        let pre = match &trace.activations[4 + 2 * l] {
            crate::nn::Activation::Vector(v) => v,
            _ => return Err(Error::Config("trace does not match model: dense".into())),
        };
        indicators.push(pre.iter().map(|&a| a > 0.0).collect());
    }
    let d0 = model.denses[0].cols;
    let path_sums = (0..d0)
        .map(|col| path_sum(model, &indicators, class, col))
        .collect();
    Ok(BackpropWorkspace { routing, indicators, path_sums })
}

/// Closed-form GradCAM coefficients: the explicit path-sum formula over
/// hidden indices with activity indicators. No reverse-mode pass.
/// `alpha_v = (1 / (h * w)) * sum over pooled cells of channel v of rho`.
pub fn closed_form_gradcam_weights(
    model: &Model,
    trace: &ForwardTrace,
    class: usize,
) -> Result<Vec<f64>> {
    let ws = backprop_workspace(model, trace, class)?;
    let b = trace.rectified_maps();
    let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
    let (ph, pw) = (ws.routing.out_rows, ws.routing.out_cols);
    let hw = (h * w) as f64;
    let mut alpha = vec![0.0; channels];
    for (v, a) in alpha.iter_mut().enumerate() {
        let base = v * ph * pw;
        *a = ws.path_sums[base..base + ph * pw].iter().sum::<f64>() / hw;
    }
    Ok(alpha)
}

/// Closed-form gradient with respect to `B`: each pooled cell's path sum
/// scattered through its routing block (the selected cell of each patch).
pub fn closed_form_grad_wrt_rectified(
    model: &Model,
    trace: &ForwardTrace,
    class: usize,
) -> Result<Tensor> {
    let ws = backprop_workspace(model, trace, class)?;
    let b = trace.rectified_maps();
    let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
    let window = ws.routing.window;
    let (ph, pw) = (ws.routing.out_rows, ws.routing.out_cols);
    let mut out = Tensor::zeros(&[channels, h, w]);
    for v in 0..channels {
        for i in 0..ph {
            for j in 0..pw {
                let rho = ws.path_sums[(v * ph + i) * pw + j];
                let sel = ws.routing.at(v, i, j);
                out.set3(v, i * window + sel / window, j * window + sel % window, rho);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_mini_masked_vgg, build_model_m, MiniVggConfig, ModelMConfig};
    use crate::rng::Rng;
    use crate::testkit::{fd_safe_instance, jacobi_top_eigenvector, random_image, rel_err};

    fn simple_model(filters: usize, widths: Vec<usize>, mask: Option<usize>, seed: u64) -> (Model, Tensor, ForwardTrace) {
        let model = build_model_m(&ModelMConfig {
            height: 10,
            width: 10,
            kernel: 3,
            filters,
            pool: 2,
            dense_widths: widths,
            mask_band_rows: mask,
            seed,
            tau: 1.0,
        })
        .unwrap();
        let mut rng = Rng::from_seed_stream(seed, 7);
        let image = random_image(&[1, 10, 10], &mut rng);
        let trace = nn::forward(&model, &image).unwrap();
        (model, image, trace)
    }

    #[test]
    fn upsample_identity_when_sizes_match() {
        let mut rng = Rng::new(1);
        let src = random_image(&[4, 4], &mut rng);
        let up = bilinear_upsample(&src, 4, 4);
        for (a, b) in up.data().iter().zip(src.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn upsample_2x2_to_4x4_hand_values() {
        let src = Tensor::from_vec(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = bilinear_upsample(&src, 4, 4);
        // Row weights per output row: [r0], [.75 r0 + .25 r1], [.25 r0 + .75 r1], [r1];
        // column weights likewise.
        let expected = [
            1.0, 1.25, 1.75, 2.0,
            1.5, 1.75, 2.25, 2.5,
            2.5, 2.75, 3.25, 3.5,
            3.0, 3.25, 3.75, 4.0,
        ];
        for (a, b) in up.data().iter().zip(expected.iter()) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn normalize_constant_map_is_zero() {
        let constant = Tensor::from_vec(&[3, 3], vec![0.7; 9]).unwrap();
        assert!(minmax_normalize(&constant).data().iter().all(|&x| x == 0.0));
        let sal = upsample_normalize(CamMethod::GradCam, constant, 6, 6).unwrap();
        assert!(sal.normalized.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn upsample_normalize_rejects_downscaling() {
        let raw = Tensor::zeros(&[4, 4]);
        assert!(upsample_normalize(CamMethod::GradCam, raw, 2, 2).is_err());
    }

    #[test]
    fn gradcam_zero_image_is_zero_map() {
        let model = build_model_m(&ModelMConfig {
            height: 10, width: 10, kernel: 3, filters: 2, pool: 2,
            dense_widths: vec![1], mask_band_rows: None, seed: 5, tau: 1.0,
        })
        .unwrap();
        let trace = nn::forward(&model, &Tensor::zeros(&[1, 10, 10])).unwrap();
        let map = gradcam(&model, &trace, 0).unwrap();
        assert!(map.raw.data().iter().all(|&x| x == 0.0));
        assert!(map.normalized.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradcam_single_channel_map_proportional_to_activation() {
        let (model, _, trace) = simple_model(1, vec![1], None, 11);
        let grad = nn::grad_output_wrt_rectified(&model, &trace, 0).unwrap();
        let alpha: f64 = grad.data().iter().sum::<f64>() / grad.len() as f64;
        let map = gradcam(&model, &trace, 0).unwrap();
        let b = trace.rectified_maps();
        for (m, &x) in map.raw.data().iter().zip(b.channel(0)) {
            let expected = (alpha * x).max(0.0);
            assert!((m - expected).abs() <= 1e-12);
        }
    }

    #[test]
    fn closed_form_alpha_l1_is_scaled_row_sum() {
        let (model, _, trace) = simple_model(3, vec![1], None, 13);
        let alpha = closed_form_gradcam_weights(&model, &trace, 0).unwrap();
        let b = trace.rectified_maps();
        let hw = (b.shape()[1] * b.shape()[2]) as f64;
        let dense = &model.denses[0];
        let cells = dense.cols / 3;
        for (v, &a) in alpha.iter().enumerate() {
            let row_sum: f64 = dense.weights[v * cells..(v + 1) * cells].iter().sum();
            assert!((a - row_sum / hw).abs() <= 1e-12);
        }
    }

    #[test]
    fn closed_form_alpha_matches_reverse_mode_gap() {
        for (seed, widths, filters) in [
            (21u64, vec![1], 3),
            (22, vec![5, 1], 3),
            (23, vec![4, 4, 1], 2),
            (24, vec![6, 2], 4),
        ] {
            let (model, _, trace) = simple_model(filters, widths, None, seed);
            let classes = model.spec.class_count();
            for class in 0..classes {
                let alpha = closed_form_gradcam_weights(&model, &trace, class).unwrap();
                let grad = nn::grad_output_wrt_rectified(&model, &trace, class).unwrap();
                for (v, &a) in alpha.iter().enumerate() {
                    let gap: f64 =
                        grad.channel(v).iter().sum::<f64>() / grad.channel(v).len() as f64;
                    assert!(
                        rel_err(a, gap) <= 1e-10,
                        "seed {seed} class {class} channel {v}: {a} vs {gap}"
                    );
                }
            }
        }
    }

    #[test]
    fn closed_form_alpha_dead_indicators_give_zero() {
        // Make every hidden pre-activation negative: negate the first dense
        // layer so a^(1) = -|W| C' < 0 for a nonnegative input.
        let (mut model, image, _) = simple_model(2, vec![4, 1], None, 25);
        for w in model.denses[0].weights.iter_mut() {
            *w = -w.abs() - 0.01;
        }
        let trace = nn::forward(&model, &image).unwrap();
        let alpha = closed_form_gradcam_weights(&model, &trace, 0).unwrap();
        assert!(alpha.iter().all(|&a| a == 0.0));
    }

    #[test]
    fn closed_form_rejects_other_architectures() {
        let model = build_mini_masked_vgg(&MiniVggConfig::default()).unwrap();
        let trace = nn::forward(&model, &Tensor::zeros(&[1, 56, 56])).unwrap();
        assert!(matches!(
            closed_form_gradcam_weights(&model, &trace, 0),
            Err(Error::UnsupportedArchitecture(_))
        ));
    }

    #[test]
    fn closed_form_gradient_matches_reverse_mode() {
        let (model, _, trace) = simple_model(3, vec![5, 1], None, 27);
        let closed = closed_form_grad_wrt_rectified(&model, &trace, 0).unwrap();
        let reverse = nn::grad_output_wrt_rectified(&model, &trace, 0).unwrap();
        for (a, b) in closed.data().iter().zip(reverse.data()) {
            assert!(rel_err(*a, *b) <= 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn xgradcam_zero_image_and_constant_channel() {
        let model = build_model_m(&ModelMConfig {
            height: 6, width: 6, kernel: 1, filters: 2, pool: 2,
            dense_widths: vec![1], mask_band_rows: None, seed: 31, tau: 1.0,
        })
        .unwrap();
        let zero_trace = nn::forward(&model, &Tensor::zeros(&[1, 6, 6])).unwrap();
        let map = xgradcam(&model, &zero_trace, 0).unwrap();
        assert!(map.raw.data().iter().all(|&x| x == 0.0));

        // Constant image + 1x1 kernels make every channel constant, where the
        // normalized-activation weighting reduces to the plain gradient mean.
        let constant = Tensor::from_vec(&[1, 6, 6], vec![0.7; 36]).unwrap();
        let trace = nn::forward(&model, &constant).unwrap();
        let grad = nn::grad_output_wrt_rectified(&model, &trace, 0).unwrap();
        let map_x = xgradcam(&model, &trace, 0).unwrap();
        let map_g = gradcam(&model, &trace, 0).unwrap();
        // Channel with positive constant activation contributes the GradCAM
        // weight; compare the full raw maps.
        let b = trace.rectified_maps();
        for v in 0..2 {
            if b.channel(v).iter().all(|&x| x > 0.0) {
                let gap: f64 = grad.channel(v).iter().sum::<f64>() / grad.channel(v).len() as f64;
                let xg: f64 = b
                    .channel(v)
                    .iter()
                    .zip(grad.channel(v))
                    .map(|(&x, &g)| x / b.channel(v).iter().sum::<f64>() * g)
                    .sum();
                assert!(rel_err(gap, xg) <= 1e-10);
            }
        }
        let _ = (map_x, map_g);
    }

    #[test]
    fn xgradcam_matches_formula_oracle() {
        let (model, _, trace) = simple_model(4, vec![5, 1], None, 33);
        let map = xgradcam(&model, &trace, 0).unwrap();
        let grad = nn::grad_output_wrt_rectified(&model, &trace, 0).unwrap();
        let b = trace.rectified_maps();
        let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
        let mut expected = vec![0.0; h * w];
        for v in 0..channels {
            let l1: f64 = b.channel(v).iter().map(|x| x.abs()).sum();
            if l1 == 0.0 {
                continue;
            }
            let alpha: f64 = b
                .channel(v)
                .iter()
                .zip(grad.channel(v))
                .map(|(&x, &g)| x / l1 * g)
                .sum();
            for (e, &x) in expected.iter_mut().zip(b.channel(v)) {
                *e += alpha * x;
            }
        }
        for (m, e) in map.raw.data().iter().zip(&expected) {
            assert!(rel_err(*m, e.max(0.0)) <= 1e-12);
        }
    }

    #[test]
    fn gradcampp_zero_gradient_is_zero_map() {
        let (mut model, image, _) = simple_model(2, vec![3, 1], None, 35);
        // Zero the output row: gradient of the logit vanishes everywhere.
        for w in model.denses.last_mut().unwrap().weights.iter_mut() {
            *w = 0.0;
        }
        let trace = nn::forward(&model, &image).unwrap();
        let map = gradcampp(&model, &trace, 0).unwrap();
        assert!(map.raw.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn gradcampp_single_active_cell_hand_value() {
        // L = 1, V = 1, dense row with exactly one nonzero weight: the
        // gradient has a single positive cell g at the routed position, so
        // alpha = g / (2 + l1 * g) / (h * w).
        let mut model = build_model_m(&ModelMConfig {
            height: 10, width: 10, kernel: 3, filters: 1, pool: 2,
            dense_widths: vec![1], mask_band_rows: None, seed: 37, tau: 1.0,
        })
        .unwrap();
        let g = 0.8;
        model.denses[0].weights.iter_mut().for_each(|w| *w = 0.0);
        model.denses[0].weights[5] = g;
        let mut rng = Rng::new(38);
        let image = random_image(&[1, 10, 10], &mut rng);
        let trace = nn::forward(&model, &image).unwrap();
        let b = trace.rectified_maps();
        let l1: f64 = b.channel(0).iter().sum();
        let hw = (b.shape()[1] * b.shape()[2]) as f64;
        let expected_alpha = (g / (2.0 + l1 * g)) / hw;
        let map = gradcampp(&model, &trace, 0).unwrap();
        for (m, &x) in map.raw.data().iter().zip(b.channel(0)) {
            assert!(rel_err(*m, (expected_alpha * x).max(0.0)) <= 1e-10);
        }
    }

    #[test]
    fn gradcampp_nonnegative_and_finite_on_random_traces() {
        for seed in 0..100 {
            let (model, _, trace) = simple_model(3, vec![4, 1], None, 200 + seed);
            let map = gradcampp(&model, &trace, 0).unwrap();
            assert!(map.raw.data().iter().all(|&x| x >= 0.0 && x.is_finite()));
        }
    }

    #[test]
    fn hirescam_masked_rows_are_zero() {
        let (model, _, trace) = simple_model(3, vec![1], Some(2), 41);
        let map = hirescam(&model, &trace, 0).unwrap();
        // Pool 2 and band 2 of 4 pooled rows: map rows >= 4 structurally zero.
        let (h, w) = (map.raw.shape()[0], map.raw.shape()[1]);
        for i in 4..h {
            for j in 0..w {
                assert_eq!(map.raw.at2(i, j), 0.0);
            }
        }
        assert!(map.raw.data().iter().any(|&x| x > 0.0));
    }

    #[test]
    fn hirescam_linear_single_channel_is_weight_product() {
        let model = build_model_m(&ModelMConfig {
            height: 6, width: 6, kernel: 3, filters: 1, pool: 1,
            dense_widths: vec![1], mask_band_rows: None, seed: 43, tau: 1.0,
        })
        .unwrap();
        let mut rng = Rng::new(44);
        let image = random_image(&[1, 6, 6], &mut rng);
        let trace = nn::forward(&model, &image).unwrap();
        let map = hirescam(&model, &trace, 0).unwrap();
        let b = trace.rectified_maps();
        for ((m, &x), &w) in map.raw.data().iter().zip(b.channel(0)).zip(&model.denses[0].weights)
        {
            assert!(rel_err(*m, (w * x).max(0.0)) <= 1e-12);
        }
    }

    #[test]
    fn hirescam_matches_formula_oracle() {
        let (model, _, trace) = simple_model(4, vec![6, 1], None, 45);
        let map = hirescam(&model, &trace, 0).unwrap();
        let grad = nn::grad_output_wrt_rectified(&model, &trace, 0).unwrap();
        let b = trace.rectified_maps();
        let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for v in 0..channels {
                    acc += grad.at3(v, i, j) * b.at3(v, i, j);
                }
                assert!(rel_err(map.raw.at2(i, j), acc.max(0.0)) <= 1e-12);
            }
        }
    }

    #[test]
    fn scorecam_symmetries() {
        // Identical filters for every channel: identical activations, so the
        // softmax weights are uniform.
        let mut model = build_model_m(&ModelMConfig {
            height: 10, width: 10, kernel: 3, filters: 3, pool: 2,
            dense_widths: vec![1], mask_band_rows: None, seed: 47, tau: 1.0,
        })
        .unwrap();
        let first: Vec<f64> = model.convs[0].weights[..9].to_vec();
        for v in 1..3 {
            model.convs[0].weights[v * 9..(v + 1) * 9].copy_from_slice(&first);
        }
        let mut rng = Rng::new(48);
        let image = random_image(&[1, 10, 10], &mut rng);
        let trace = nn::forward(&model, &image).unwrap();
        let b = trace.rectified_maps();
        let map = scorecam(&model, &trace, 0).unwrap();
        // Uniform weights 1/3 over identical channels: map equals one channel.
        for (m, &x) in map.raw.data().iter().zip(b.channel(0)) {
            assert!(rel_err(*m, x) <= 1e-12);
        }

        // Single channel: softmax of a singleton is 1 and the map is B.
        let (model1, _, trace1) = simple_model(1, vec![1], None, 49);
        let map1 = scorecam(&model1, &trace1, 0).unwrap();
        for (m, &x) in map1.raw.data().iter().zip(trace1.rectified_maps().channel(0)) {
            assert_eq!(m.to_bits(), x.to_bits());
        }
    }

    #[test]
    fn scorecam_matches_reforward_oracle() {
        let (model, image, trace) = simple_model(4, vec![5, 1], None, 51);
        let map = scorecam(&model, &trace, 0).unwrap();
        let b = trace.rectified_maps();
        let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
        let baseline = trace.output[0];
        let mut beta = Vec::new();
        for v in 0..channels {
            let plane = Tensor::from_vec(&[h, w], b.channel(v).to_vec()).unwrap();
            let up = bilinear_upsample(&plane, 10, 10);
            let lo = up.min();
            let hi = up.max();
            let mask = if hi > lo { up.map(|x| (x - lo) / (hi - lo)) } else { Tensor::zeros(&[10, 10]) };
            let mut masked = image.clone();
            for (m, s) in masked.data_mut().iter_mut().zip(mask.data()) {
                *m *= s;
            }
            beta.push(nn::forward(&model, &masked).unwrap().output[0] - baseline);
        }
        let mx = beta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = beta.iter().map(|&x| (x - mx).exp()).collect();
        let total: f64 = exps.iter().sum();
        let mut expected = vec![0.0; h * w];
        for v in 0..channels {
            let a = exps[v] / total;
            for (e, &x) in expected.iter_mut().zip(b.channel(v)) {
                *e += a * x;
            }
        }
        for (m, e) in map.raw.data().iter().zip(&expected) {
            assert!(rel_err(*m, e.max(0.0)) <= 1e-12);
        }
    }

    #[test]
    fn scorecam_opticam_relu_redundant() {
        let (model, _, trace) = simple_model(3, vec![4, 1], None, 53);
        for map in [
            scorecam(&model, &trace, 0).unwrap(),
            opticam(&model, &trace, 0, OptiCamOptions { steps: 5, lr: 0.05 }).unwrap(),
        ] {
            assert!(map.raw.data().iter().all(|&x| x >= 0.0));
            let relued = map.raw.map(|x| x.max(0.0));
            assert_eq!(relued.data(), map.raw.data());
        }
    }

    #[test]
    fn opticam_beta_gradient_matches_finite_differences() {
        let (model, _, trace) = fd_safe_instance(55, vec![4, 1], 3, None);
        let beta: Vec<f64> = (0..3).map(|v| 0.1 * v as f64 - 0.1).collect();
        let (_, grad) = opticam_objective(&model, &trace, 0, &beta, true).unwrap();
        let grad = grad.unwrap();
        for v in 0..3 {
            let h = 1e-5;
            let mut plus = beta.clone();
            plus[v] += h;
            let mut minus = beta.clone();
            minus[v] -= h;
            let (fp, _) = opticam_objective(&model, &trace, 0, &plus, false).unwrap();
            let (fm, _) = opticam_objective(&model, &trace, 0, &minus, false).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            assert!(
                rel_err(grad[v], fd) <= 1e-4,
                "beta[{v}]: analytic {} vs fd {fd}",
                grad[v]
            );
        }
    }

    #[test]
    fn opticam_single_channel_and_simplex() {
        let (model, _, trace) = simple_model(1, vec![1], None, 57);
        let map = opticam(&model, &trace, 0, OptiCamOptions { steps: 3, lr: 0.1 }).unwrap();
        for (m, &x) in map.raw.data().iter().zip(trace.rectified_maps().channel(0)) {
            assert_eq!(m.to_bits(), x.to_bits(), "softmax of a singleton is 1");
        }

        let (model3, _, trace3) = simple_model(3, vec![4, 1], None, 58);
        let (beta, initial, fin) =
            opticam_beta(&model3, &trace3, 0, OptiCamOptions { steps: 10, lr: 0.05 }).unwrap();
        assert!(fin >= initial, "ascent must not lose objective: {initial} -> {fin}");
        let weights = softmax(&beta);
        assert!((weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        assert!(weights.iter().all(|&w| w >= 0.0));
    }

    #[test]
    fn opticam_ascends_on_random_instances() {
        for seed in 0..20 {
            let (model, _, trace) = simple_model(3, vec![4, 1], None, 300 + seed);
            let (_, initial, fin) =
                opticam_beta(&model, &trace, 0, OptiCamOptions { steps: 15, lr: 0.05 }).unwrap();
            assert!(fin >= initial, "seed {seed}: {initial} -> {fin}");
        }
    }

    #[test]
    fn ablationcam_weights_and_guard() {
        let (model, _, trace) = simple_model(3, vec![4, 1], None, 61);
        let y = trace.output[0];
        assert!(y.abs() > 1e-9, "test instance needs a nonzero logit");
        let map = ablationcam(&model, &trace, 0).unwrap();

        // Independent oracle: zero filter v at the conv layer and re-run the
        // whole network; rectified channel v vanishes identically.
        let b = trace.rectified_maps();
        let mut expected_alpha = Vec::new();
        for v in 0..3 {
            let mut ablated_model = model.clone();
            ablated_model.convs[0].weights[v * 9..(v + 1) * 9].fill(0.0);
            let y_v = nn::forward(&ablated_model, &trace.input).unwrap().output[0];
            expected_alpha.push((y - y_v) / y);
        }
        let [_, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
        for i in 0..h {
            for j in 0..w {
                let mut acc = 0.0;
                for v in 0..3 {
                    acc += expected_alpha[v] * b.at3(v, i, j);
                }
                assert!(rel_err(map.raw.at2(i, j), acc.max(0.0)) <= 1e-10);
            }
        }

        // All-zero channel ablates to a no-op: weight exactly 0.
        let mut dead_channel_model = model.clone();
        dead_channel_model.convs[0].weights[0..9].fill(0.0);
        let trace2 = nn::forward(&dead_channel_model, &trace.input).unwrap();
        let y2 = trace2.output[0];
        let mut ablated = trace2.rectified_maps().clone();
        ablated.data_mut()[0..h * w].fill(0.0);
        let y_v = nn::forward_from_rectified(&dead_channel_model, &ablated).unwrap()[0];
        assert_eq!((y2 - y_v) / y2, 0.0);

        // Division guard.
        let mut zero_model = model.clone();
        for dense in zero_model.denses.iter_mut() {
            dense.weights.iter_mut().for_each(|w| *w = 0.0);
        }
        let zero_trace = nn::forward(&zero_model, &trace.input).unwrap();
        assert!(matches!(
            ablationcam(&zero_model, &zero_trace, 0),
            Err(Error::DivisionGuard { .. })
        ));
    }

    #[test]
    fn eigencam_single_and_duplicated_channels() {
        let (model, image, trace) = simple_model(1, vec![1], None, 63);
        let map1 = eigencam(&trace).unwrap();
        let b = trace.rectified_maps();
        // Proportional to the single channel (scale-free after normalization).
        let scale = map1.raw.max() / b.channel(0).iter().copied().fold(0.0, f64::max);
        for (m, &x) in map1.raw.data().iter().zip(b.channel(0)) {
            assert!((m - scale * x).abs() <= 1e-10);
        }

        // Duplicate the channel: same normalized map as the single channel.
        let mut dup = build_model_m(&ModelMConfig {
            height: 10, width: 10, kernel: 3, filters: 2, pool: 2,
            dense_widths: vec![1], mask_band_rows: None, seed: 63, tau: 1.0,
        })
        .unwrap();
        let first: Vec<f64> = model.convs[0].weights.clone();
        dup.convs[0].weights[..9].copy_from_slice(&first);
        dup.convs[0].weights[9..].copy_from_slice(&first);
        let dup_trace = nn::forward(&dup, &image).unwrap();
        let map2 = eigencam(&dup_trace).unwrap();
        for (a, b) in map1.normalized.data().iter().zip(map2.normalized.data()) {
            assert!((a - b).abs() <= 1e-10);
        }
    }

    #[test]
    fn eigencam_matches_jacobi_oracle() {
        let (_, _, trace) = simple_model(5, vec![1], None, 65);
        let b = trace.rectified_maps();
        let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
        let mut gram = vec![0.0; channels * channels];
        for u in 0..channels {
            for v in 0..channels {
                gram[u * channels + v] =
                    b.channel(u).iter().zip(b.channel(v)).map(|(&a, &c)| a * c).sum();
            }
        }
        let top = jacobi_top_eigenvector(&gram, channels);
        let mut oracle = vec![0.0; h * w];
        for v in 0..channels {
            for (o, &x) in oracle.iter_mut().zip(b.channel(v)) {
                *o += top[v] * x;
            }
        }
        if oracle.iter().sum::<f64>() < 0.0 {
            oracle.iter_mut().for_each(|x| *x = -*x);
        }
        let map = eigencam(&trace).unwrap();
        let dot: f64 = map.raw.data().iter().zip(&oracle).map(|(a, b)| a * b.max(0.0)).sum();
        let na = map.raw.l2_norm();
        let nb = oracle.iter().map(|x| x.max(0.0)).map(|x| x * x).sum::<f64>().sqrt();
        let cosine = dot / (na * nb);
        assert!(cosine >= 1.0 - 1e-8, "cosine {cosine}");
    }

    #[test]
    fn eigencam_zero_activation_is_zero_map() {
        let model = build_model_m(&ModelMConfig {
            height: 10, width: 10, kernel: 3, filters: 2, pool: 2,
            dense_widths: vec![1], mask_band_rows: None, seed: 67, tau: 1.0,
        })
        .unwrap();
        let trace = nn::forward(&model, &Tensor::zeros(&[1, 10, 10])).unwrap();
        let map = eigencam(&trace).unwrap();
        assert!(map.raw.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn positive_scaling_equivariance() {
        let (model, image, trace) = simple_model(3, vec![5, 1], None, 69);
        let c = 3.7;
        let mut scaled = model.clone();
        for w in scaled.denses.last_mut().unwrap().weights.iter_mut() {
            *w *= c;
        }
        let scaled_trace = nn::forward(&scaled, &image).unwrap();
        for method in [CamMethod::GradCam, CamMethod::HiResCam, CamMethod::XGradCam] {
            let base = compute(method, &model, &trace, 0, OptiCamOptions::default()).unwrap();
            let big = compute(method, &scaled, &scaled_trace, 0, OptiCamOptions::default()).unwrap();
            for (a, b) in base.raw.data().iter().zip(big.raw.data()) {
                assert!(rel_err(c * a, *b) <= 1e-10, "{method}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn methods_are_deterministic() {
        let (model, _, trace) = simple_model(3, vec![4, 1], None, 71);
        for method in CamMethod::ALL {
            let a = compute(method, &model, &trace, 0, OptiCamOptions { steps: 5, lr: 0.05 }).unwrap();
            let b = compute(method, &model, &trace, 0, OptiCamOptions { steps: 5, lr: 0.05 }).unwrap();
            assert_eq!(a.raw.data().len(), b.raw.data().len());
            for (x, y) in a.raw.data().iter().zip(b.raw.data()) {
                assert_eq!(x.to_bits(), y.to_bits(), "{method} must be deterministic");
            }
            for (x, y) in a.normalized.data().iter().zip(b.normalized.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn gradcam_highlights_dead_zone_at_initialization() {
        // 500 random initializations of a bottom-half masked model on a
        // digit: nearly every seed puts strictly positive mass in rows the
        // model cannot see.
        let mut digit_rng = Rng::new(1234);
        let image = crate::data::render_digit(3, &mut digit_rng);
        let mut positive = 0;
        let n = 500;
        for seed in 0..n {
            let model = build_model_m(&ModelMConfig {
                height: 28, width: 28, kernel: 5, filters: 16, pool: 2,
                dense_widths: vec![1], mask_band_rows: Some(6), seed: 9000 + seed, tau: 1.0,
            })
            .unwrap();
            let dz = crate::model::compute_dead_zone(&model.spec).unwrap();
            let trace = nn::forward(&model, &image).unwrap();
            let map = gradcam(&model, &trace, 0).unwrap();
            let cols = map.upsampled.shape()[1];
            let mass: f64 = map.upsampled.data()[dz.first_dead_row * cols..].iter().sum();
            if mass > 0.0 {
                positive += 1;
            }
        }
        let fraction = positive as f64 / n as f64;
        assert!(fraction >= 0.9, "dead-zone activity fraction {fraction}");
    }
}
