//! Architecture descriptions, masked-model construction, dead-zone
//! computation by receptive-field interval arithmetic, and checkpoint I/O.
//!
//! A model is a fixed sequence of conv / ReLU / max-pool layers, one
//! flatten, and a dense head. Masking zeroes the dense columns fed by the
//! bottom `band_rows` rows of the feature grid, permanently: those weights
//! are exact zeros at initialization and receive zero gradient forever, so
//! the corresponding input region (the dead zone) provably cannot influence
//! the logits.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, ConvFilterBank, DenseLayer};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Bottom-band mask over the feature grid feeding a dense layer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpec {
    /// Number of bottom feature rows whose connections are zeroed.
    pub band_rows: usize,
    /// (channels, rows, cols) of the grid the mask applies to.
    pub grid: [usize; 3],
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv { out_channels: usize, kernel: usize, padding: usize },
    Relu,
    MaxPool { size: usize },
    Flatten,
    Dense { units: usize, mask: Option<MaskSpec> },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    /// Input extents (channels, rows, cols).
    pub input: [usize; 3],
    pub layers: Vec<LayerSpec>,
}

/// Inferred output shape of each layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Shape {
    Spatial([usize; 3]),
    Vector(usize),
}

impl ModelSpec {
    pub fn input_shape(&self) -> &[usize] {
        &self.input
    }

    pub fn input_rows(&self) -> usize {
        self.input[1]
    }

    /// Number of logits (units of the final dense layer).
    pub fn class_count(&self) -> usize {
        match self.layers.last() {
            Some(LayerSpec::Dense { units, .. }) => *units,
            _ => 0,
        }
    }

    /// Output shape of every layer, checking that shapes chain.
    pub fn shape_chain(&self) -> Result<Vec<Shape>> {
        let mut shapes = Vec::with_capacity(self.layers.len());
        let mut cur = Shape::Spatial(self.input);
        for (idx, layer) in self.layers.iter().enumerate() {
            cur = match (layer, &cur) {
                (LayerSpec::Conv { out_channels, kernel, padding }, Shape::Spatial([_, h, w])) => {
                    if h + 2 * padding < *kernel || w + 2 * padding < *kernel {
                        return Err(Error::Shape {
                            expected: format!("spatial extents >= {} at layer {idx}", kernel),
                            found: format!("({h}, {w})"),
                        });
                    }
                    Shape::Spatial([
                        *out_channels,
                        h + 2 * padding - kernel + 1,
                        w + 2 * padding - kernel + 1,
                    ])
                }
                (LayerSpec::Relu, s) => s.clone(),
                (LayerSpec::MaxPool { size }, Shape::Spatial([c, h, w])) => {
                    if *size == 0 || h % size != 0 || w % size != 0 {
                        return Err(Error::Config(format!(
                            "pool window {size} must divide ({h}, {w}) at layer {idx}"
                        )));
                    }
                    Shape::Spatial([*c, h / size, w / size])
                }
                (LayerSpec::Flatten, Shape::Spatial([c, h, w])) => Shape::Vector(c * h * w),
                (LayerSpec::Dense { units, .. }, Shape::Vector(_)) => Shape::Vector(*units),
                (layer, cur) => {
                    return Err(Error::Config(format!(
                        "layer {idx} ({layer:?}) cannot follow {cur:?}"
                    )))
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    /// (channels, rows, cols) immediately before the flatten.
    pub fn feature_grid(&self) -> Result<[usize; 3]> {
        let shapes = self.shape_chain()?;
        let flatten = self
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Flatten))
            .ok_or_else(|| Error::Config("model has no flatten layer".into()))?;
        if flatten == 0 {
            return Err(Error::Config("flatten cannot be the first layer".into()));
        }
        match &shapes[flatten - 1] {
            Shape::Spatial(s) => Ok(*s),
            Shape::Vector(_) => Err(Error::Config("flatten input is not spatial".into())),
        }
    }

    /// Index of the layer whose output is the rectified map `B` consumed by
    /// the dense head: the last ReLU before the flatten.
    pub fn split_index(&self) -> Result<usize> {
        let flatten = self
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Flatten))
            .ok_or_else(|| Error::Config("model has no flatten layer".into()))?;
        self.layers[..flatten]
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Relu))
            .ok_or_else(|| Error::Config("no rectified map before flatten".into()))
    }

    /// Masked dense layer, if any: (ordinal among dense layers, mask).
    pub fn masked_dense(&self) -> Option<(usize, &MaskSpec)> {
        self.layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { mask, .. } => Some(mask.as_ref()),
                _ => None,
            })
            .enumerate()
            .find_map(|(i, m)| m.map(|m| (i, m)))
    }

    /// Map layer index -> ordinal among conv layers.
    pub(crate) fn conv_index_by_layer(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.layers.len()];
        let mut n = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, LayerSpec::Conv { .. }) {
                out[i] = n;
                n += 1;
            }
        }
        out
    }

    /// Map layer index -> ordinal among dense layers.
    pub(crate) fn dense_index_by_layer(&self) -> Vec<usize> {
        let mut out = vec![usize::MAX; self.layers.len()];
        let mut n = 0;
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, LayerSpec::Dense { .. }) {
                out[i] = n;
                n += 1;
            }
        }
        out
    }

    /// Grammar, shape chain, and mask constraints.
    pub fn validate(&self) -> Result<()> {
        if !matches!(self.layers.first(), Some(LayerSpec::Conv { .. })) {
            return Err(Error::Config("model must start with a convolution".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            let ok = match layer {
                LayerSpec::Conv { out_channels, kernel, .. } => *out_channels >= 1 && *kernel >= 1,
                LayerSpec::MaxPool { size } => *size >= 1,
                LayerSpec::Dense { units, .. } => *units >= 1,
                LayerSpec::Relu | LayerSpec::Flatten => true,
            };
            if !ok {
                return Err(Error::Config(format!("layer {i} ({layer:?}) has a zero extent")));
            }
        }
        if !matches!(self.layers.last(), Some(LayerSpec::Dense { .. })) {
            return Err(Error::Config("model must end with a dense layer".into()));
        }
        let flatten_count = self.layers.iter().filter(|l| matches!(l, LayerSpec::Flatten)).count();
        if flatten_count != 1 {
            return Err(Error::Config(format!("model needs exactly one flatten, found {flatten_count}")));
        }
        let flatten = self.layers.iter().position(|l| matches!(l, LayerSpec::Flatten)).unwrap();
        for (i, l) in self.layers.iter().enumerate() {
            let before = i < flatten;
            let ok = match l {
                LayerSpec::Conv { .. } | LayerSpec::MaxPool { .. } => before,
                LayerSpec::Dense { .. } => !before,
                LayerSpec::Relu | LayerSpec::Flatten => true,
            };
            if !ok {
                return Err(Error::Config(format!("layer {i} ({l:?}) on the wrong side of flatten")));
            }
        }
        // Every conv is immediately rectified.
        for (i, l) in self.layers.iter().enumerate() {
            if matches!(l, LayerSpec::Conv { .. })
                && !matches!(self.layers.get(i + 1), Some(LayerSpec::Relu))
            {
                return Err(Error::Config(format!("convolution at layer {i} must be followed by relu")));
            }
        }
        self.shape_chain()?;
        self.split_index()?;
        // At most one masked dense layer, and it must be the first one.
        let masked: Vec<usize> = self
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Dense { mask, .. } => Some(mask.is_some()),
                _ => None,
            })
            .enumerate()
            .filter_map(|(i, m)| m.then_some(i))
            .collect();
        if masked.len() > 1 {
            return Err(Error::Config("more than one masked dense layer".into()));
        }
        if let Some(&i) = masked.first() {
            if i != 0 {
                return Err(Error::Config("only the first dense layer may be masked".into()));
            }
        }
        if let Some((_, mask)) = self.masked_dense() {
            let grid = self.feature_grid()?;
            if mask.grid != grid {
                return Err(Error::Config(format!(
                    "mask grid {:?} does not match feature grid {:?}",
                    mask.grid, grid
                )));
            }
            if mask.band_rows > grid[1] {
                return Err(Error::Config(format!(
                    "mask band {} taller than feature grid rows {}",
                    mask.band_rows, grid[1]
                )));
            }
        }
        Ok(())
    }
}

/// Architecture plus parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub spec: ModelSpec,
    pub convs: Vec<ConvFilterBank>,
    pub denses: Vec<DenseLayer>,
}

/// Boolean mask (true = trainable) for a dense layer from a band mask:
/// columns fed by the bottom `band_rows` rows of the grid are frozen at zero,
/// for every output unit. Flattening is row-major (channel, row, col).
fn dense_mask_from_band(mask: &MaskSpec, rows: usize, cols: usize) -> Vec<bool> {
    let [gc, gr, gw] = mask.grid;
    debug_assert_eq!(cols, gc * gr * gw);
    let first_masked_row = gr - mask.band_rows;
    let mut keep_col = vec![true; cols];
    for c in 0..gc {
        for r in first_masked_row..gr {
            let base = (c * gr + r) * gw;
            keep_col[base..base + gw].fill(false);
        }
    }
    let mut out = Vec::with_capacity(rows * cols);
    for _ in 0..rows {
        out.extend_from_slice(&keep_col);
    }
    out
}

/// Weight initialization family. Both are Gaussian; they differ in how the
/// per-layer standard deviation is chosen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Every layer i.i.d. `N(0, tau^2)` (the analysis setting).
    Gaussian { tau: f64 },
    /// Per-layer `N(0, 2/fan_in)`; keeps activations O(1) at any depth.
    HeGaussian,
}

impl Model {
    /// Initialize all weights i.i.d. Gaussian `N(0, tau^2)`; masked entries
    /// are exact zeros. Deterministic given `seed`; each parameter layer
    /// draws from its own stream.
    pub fn init(spec: ModelSpec, seed: u64, tau: f64) -> Result<Model> {
        Model::init_with(spec, seed, InitScheme::Gaussian { tau })
    }

    pub fn init_with(spec: ModelSpec, seed: u64, scheme: InitScheme) -> Result<Model> {
        if let InitScheme::Gaussian { tau } = scheme {
            if tau <= 0.0 {
                return Err(Error::Config(format!("tau must be positive, got {tau}")));
            }
        }
        let mut model = Model::zeroed(spec)?;
        let conv_count = model.convs.len();
        for (i, bank) in model.convs.iter_mut().enumerate() {
            let sigma = match scheme {
                InitScheme::Gaussian { tau } => tau,
                InitScheme::HeGaussian => {
                    (2.0 / (bank.in_channels * bank.kernel * bank.kernel) as f64).sqrt()
                }
            };
            bank.init_tau = sigma;
            let mut rng = Rng::from_seed_stream(seed, i as u64);
            for w in bank.weights.iter_mut() {
                *w = rng.next_gaussian(0.0, sigma);
            }
        }
        for (i, dense) in model.denses.iter_mut().enumerate() {
            let sigma = match scheme {
                InitScheme::Gaussian { tau } => tau,
                InitScheme::HeGaussian => (2.0 / dense.cols as f64).sqrt(),
            };
            let mut rng = Rng::from_seed_stream(seed, (conv_count + i) as u64);
            for w in dense.weights.iter_mut() {
                *w = rng.next_gaussian(0.0, sigma);
            }
            dense.apply_mask();
        }
        Ok(model)
    }

    /// Skeleton with zero weights and the masks in place.
    pub fn zeroed(spec: ModelSpec) -> Result<Model> {
        spec.validate()?;
        let shapes = spec.shape_chain()?;
        let mut convs = Vec::new();
        let mut denses = Vec::new();
        let mut in_shape = Shape::Spatial(spec.input);
        for (i, layer) in spec.layers.iter().enumerate() {
            match (layer, &in_shape) {
                (LayerSpec::Conv { out_channels, kernel, padding }, Shape::Spatial([c, ..])) => {
                    convs.push(ConvFilterBank::zeros(*out_channels, *c, *kernel, *padding));
                }
                (LayerSpec::Dense { units, mask }, Shape::Vector(cols)) => {
                    let mut layer = DenseLayer::zeros(*units, *cols);
                    if let Some(m) = mask {
                        layer.mask = Some(dense_mask_from_band(m, *units, *cols));
                    }
                    denses.push(layer);
                }
                _ => {}
            }
            in_shape = shapes[i].clone();
        }
        Ok(Model { spec, convs, denses })
    }

    /// Total trainable-parameter count (masked entries included in storage).
    pub fn param_count(&self) -> usize {
        self.convs.iter().map(|b| b.weights.len()).sum::<usize>()
            + self.denses.iter().map(|d| d.weights.len()).sum::<usize>()
    }

    pub fn masked_entries_are_zero(&self) -> bool {
        self.denses.iter().all(|d| d.masked_entries_are_zero())
    }
}

/// Input rows that provably cannot influence the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadZone {
    /// First input row (0-based) from which all lower rows are unseen.
    pub first_dead_row: usize,
    pub input_rows: usize,
    pub height: usize,
    /// `height / input_rows`.
    pub fraction: f64,
}

impl DeadZone {
    fn new(first_dead_row: usize, input_rows: usize) -> DeadZone {
        let height = input_rows - first_dead_row;
        DeadZone {
            first_dead_row,
            input_rows,
            height,
            fraction: height as f64 / input_rows as f64,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.height == 0
    }
}

/// Trace the receptive field of the *seen* feature rows back to input rows.
/// Row interval arithmetic only: masking is by rows.
pub fn compute_dead_zone(spec: &ModelSpec) -> Result<DeadZone> {
    spec.validate()?;
    let (_, mask) = spec.masked_dense().ok_or(Error::NoDeadZone)?;
    let grid_rows = mask.grid[1];
    let seen_rows = grid_rows - mask.band_rows;
    if seen_rows == 0 {
        // Fully blind: every input row is dead.
        return Ok(DeadZone::new(0, spec.input_rows()));
    }

    // Row counts at the input of each spatial layer.
    let flatten = spec.layers.iter().position(|l| matches!(l, LayerSpec::Flatten)).unwrap();
    let shapes = spec.shape_chain()?;
    let input_rows_of = |idx: usize| -> usize {
        if idx == 0 {
            spec.input[1]
        } else {
            match &shapes[idx - 1] {
                Shape::Spatial([_, h, _]) => *h,
                Shape::Vector(_) => unreachable!("spatial layer after flatten"),
            }
        }
    };

    // Interval of rows (inclusive) the seen feature rows depend on.
    let mut lo: isize = 0;
    let mut hi: isize = seen_rows as isize - 1;
    for idx in (0..flatten).rev() {
        let rows_in = input_rows_of(idx) as isize;
        match &spec.layers[idx] {
            LayerSpec::MaxPool { size } => {
                let s = *size as isize;
                lo *= s;
                hi = hi * s + s - 1;
            }
            LayerSpec::Conv { kernel, padding, .. } => {
                let k = *kernel as isize;
                let p = *padding as isize;
                lo -= p;
                hi += k - 1 - p;
            }
            LayerSpec::Relu => {}
            _ => unreachable!("only spatial layers before flatten"),
        }
        lo = lo.max(0);
        hi = hi.min(rows_in - 1);
    }
    let first_dead_row = (hi + 1) as usize;
    Ok(DeadZone::new(first_dead_row.min(spec.input_rows()), spec.input_rows()))
}

/// Outcome of the random dead-zone perturbation check.
#[derive(Debug, Clone, Serialize)]
pub struct BlindnessReport {
    pub trials: usize,
    pub from_row: usize,
    pub mismatches: usize,
    /// Trial index of the first logit mismatch, if any.
    pub first_counterexample: Option<usize>,
}

impl BlindnessReport {
    pub fn all_identical(&self) -> bool {
        self.mismatches == 0
    }
}

fn logits_bit_identical(a: &[f64], b: &[f64]) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
}

/// Forward a random image, randomly rewrite all pixels in rows
/// `>= from_row`, forward again, and compare logits bit-exactly.
pub fn perturbation_changes_output(
    model: &Model,
    from_row: usize,
    n_trials: usize,
    seed: u64,
) -> Result<BlindnessReport> {
    let [c, h, w] = model.spec.input;
    let mut mismatches = 0;
    let mut first = None;
    for trial in 0..n_trials {
        let mut rng = Rng::from_seed_stream(seed, trial as u64);
        let mut base = Tensor::zeros(&[c, h, w]);
        for v in base.data_mut() {
            *v = rng.next_f64();
        }
        let mut perturbed = base.clone();
        for ch in 0..c {
            for i in from_row..h {
                for j in 0..w {
                    perturbed.set3(ch, i, j, rng.next_f64());
                }
            }
        }
        let a = nn::forward(model, &base)?;
        let b = nn::forward(model, &perturbed)?;
        if !logits_bit_identical(&a.output, &b.output) {
            mismatches += 1;
            first.get_or_insert(trial);
        }
    }
    Ok(BlindnessReport { trials: n_trials, from_row, mismatches, first_counterexample: first })
}

/// Check that `n_trials` random dead-zone-only perturbations leave all
/// logits bit-identical.
pub fn verify_blindness(model: &Model, n_trials: usize, seed: u64) -> Result<BlindnessReport> {
    let dz = compute_dead_zone(&model.spec)?;
    if dz.is_empty() {
        return Err(Error::Config("dead zone is empty; nothing to verify".into()));
    }
    perturbation_changes_output(model, dz.first_dead_row, n_trials, seed)
}

/// Minimal row `r` such that perturbing rows `>= r` never changes the logits
/// (over `trials_per_row` random probes). Independent oracle for
/// [`compute_dead_zone`].
pub fn perturbation_scan_boundary(model: &Model, trials_per_row: usize, seed: u64) -> Result<usize> {
    let h = model.spec.input[1];
    let mut boundary = h;
    for row in (0..h).rev() {
        let report = perturbation_changes_output(model, row, trials_per_row, seed ^ row as u64)?;
        if report.mismatches > 0 {
            return Ok(row + 1);
        }
        boundary = row;
    }
    Ok(boundary)
}

/// Paper-scale masked VGG16 variant: 224x224x3 input, thirteen 3x3 pad-1
/// convolutions in five blocks, 2x2 pooling after the first four blocks
/// (none after the fifth), dense head 4096-4096-1000 with the bottom 9 of 14
/// feature rows masked in the first dense layer. Spec only; never
/// instantiated with parameters here.
pub fn masked_vgg16_spec() -> ModelSpec {
    let mut layers = Vec::new();
    let blocks: [(usize, usize); 5] = [(2, 64), (2, 128), (3, 256), (3, 512), (3, 512)];
    for (block, &(convs, channels)) in blocks.iter().enumerate() {
        for _ in 0..convs {
            layers.push(LayerSpec::Conv { out_channels: channels, kernel: 3, padding: 1 });
            layers.push(LayerSpec::Relu);
        }
        if block < 4 {
            layers.push(LayerSpec::MaxPool { size: 2 });
        }
    }
    layers.push(LayerSpec::Flatten);
    layers.push(LayerSpec::Dense {
        units: 4096,
        mask: Some(MaskSpec { band_rows: 9, grid: [512, 14, 14] }),
    });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense { units: 4096, mask: None });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense { units: 1000, mask: None });
    ModelSpec { input: [3, 224, 224], layers }
}

/// Configuration of the simple conv / pool / dense model used for the
/// closed-form and Monte-Carlo analyses.
#[derive(Debug, Clone)]
pub struct ModelMConfig {
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub filters: usize,
    pub pool: usize,
    pub dense_widths: Vec<usize>,
    /// Bottom band of pooled-grid rows to mask in the first dense layer.
    pub mask_band_rows: Option<usize>,
    pub seed: u64,
    pub tau: f64,
}

/// Build and initialize the simple model: one conv + ReLU + max-pool,
/// flatten, then the given dense widths with ReLU between them.
pub fn build_model_m(cfg: &ModelMConfig) -> Result<Model> {
    if cfg.height + 1 < cfg.kernel || cfg.width + 1 < cfg.kernel {
        return Err(Error::Config(format!(
            "kernel {} too large for input ({}, {})",
            cfg.kernel, cfg.height, cfg.width
        )));
    }
    let h = cfg.height - cfg.kernel + 1;
    let w = cfg.width - cfg.kernel + 1;
    if cfg.pool == 0 || !h.is_multiple_of(cfg.pool) || !w.is_multiple_of(cfg.pool) {
        return Err(Error::Config(format!(
            "pool window {} must divide the conv output ({h}, {w})",
            cfg.pool
        )));
    }
    let (ph, pw) = (h / cfg.pool, w / cfg.pool);
    if cfg.dense_widths.is_empty() {
        return Err(Error::Config("at least one dense layer is required".into()));
    }
    if let Some(band) = cfg.mask_band_rows {
        if band > ph {
            return Err(Error::Config(format!("mask band {band} taller than pooled rows {ph}")));
        }
    }
    let mut layers = vec![
        LayerSpec::Conv { out_channels: cfg.filters, kernel: cfg.kernel, padding: 0 },
        LayerSpec::Relu,
        LayerSpec::MaxPool { size: cfg.pool },
        LayerSpec::Flatten,
    ];
    for (i, &units) in cfg.dense_widths.iter().enumerate() {
        let mask = (i == 0)
            .then(|| {
                cfg.mask_band_rows
                    .map(|band_rows| MaskSpec { band_rows, grid: [cfg.filters, ph, pw] })
            })
            .flatten();
        layers.push(LayerSpec::Dense { units, mask });
        if i + 1 < cfg.dense_widths.len() {
            layers.push(LayerSpec::Relu);
        }
    }
    Model::init(ModelSpec { input: [1, cfg.height, cfg.width], layers }, cfg.seed, cfg.tau)
}

/// Desk-scale masked VGG-style model configuration.
#[derive(Debug, Clone)]
pub struct MiniVggConfig {
    pub input_rows: usize,
    pub input_cols: usize,
    pub channels: [usize; 3],
    pub hidden_units: usize,
    pub classes: usize,
    pub band_rows: usize,
    pub seed: u64,
    pub init: InitScheme,
}

impl Default for MiniVggConfig {
    fn default() -> Self {
        MiniVggConfig {
            input_rows: 56,
            input_cols: 56,
            channels: [8, 16, 32],
            hidden_units: 64,
            classes: 10,
            band_rows: 6,
            seed: 0,
            // A fixed tau starves six rectified layers; fan-in scaling keeps
            // the forward signal alive for training.
            init: InitScheme::HeGaussian,
        }
    }
}

/// 56x56x1 -> [conv3x3 pad1 x2, pool2] x2 -> [conv3x3 pad1 x2] -> flatten ->
/// masked dense -> ReLU -> dense(classes). Feature grid 32x14x14 by default,
/// with the bottom `band_rows` of the 14 feature rows masked.
pub fn build_mini_masked_vgg(cfg: &MiniVggConfig) -> Result<Model> {
    if !cfg.input_rows.is_multiple_of(4) || !cfg.input_cols.is_multiple_of(4) {
        return Err(Error::Config("input extents must be divisible by 4".into()));
    }
    let grid = [cfg.channels[2], cfg.input_rows / 4, cfg.input_cols / 4];
    if cfg.band_rows > grid[1] {
        return Err(Error::Config(format!(
            "band {} taller than feature rows {}",
            cfg.band_rows, grid[1]
        )));
    }
    let mut layers = Vec::new();
    for (block, &ch) in cfg.channels.iter().enumerate() {
        for _ in 0..2 {
            layers.push(LayerSpec::Conv { out_channels: ch, kernel: 3, padding: 1 });
            layers.push(LayerSpec::Relu);
        }
        if block < 2 {
            layers.push(LayerSpec::MaxPool { size: 2 });
        }
    }
    layers.push(LayerSpec::Flatten);
    let mask = (cfg.band_rows > 0).then_some(MaskSpec { band_rows: cfg.band_rows, grid });
    layers.push(LayerSpec::Dense { units: cfg.hidden_units, mask });
    layers.push(LayerSpec::Relu);
    layers.push(LayerSpec::Dense { units: cfg.classes, mask: None });
    Model::init_with(ModelSpec { input: [1, cfg.input_rows, cfg.input_cols], layers }, cfg.seed, cfg.init)
}

const CHECKPOINT_MAGIC: &[u8] = b"CAMAUDIT-CKPT-1\n";

/// Checkpoint layout: magic, u64-LE spec-JSON length, canonical spec JSON,
/// u64-LE parameter count, parameters as little-endian f64 in declaration
/// order (convolution banks, then dense layers).
pub fn checkpoint_bytes(model: &Model) -> Result<Vec<u8>> {
    let spec_json = crate::report::canonical_json(&model.spec)?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&(spec_json.len() as u64).to_le_bytes());
    out.extend_from_slice(spec_json.as_bytes());
    let count: usize = model.param_count();
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for bank in &model.convs {
        for w in &bank.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    for dense in &model.denses {
        for w in &dense.weights {
            out.extend_from_slice(&w.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(model)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    let mut file = std::fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    parse_checkpoint(&bytes)
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut cursor = 0usize;
    let take = |cursor: &mut usize, n: usize| -> Result<&[u8]> {
        if *cursor + n > bytes.len() {
            return Err(Error::Truncated { expected: *cursor + n, actual: bytes.len() });
        }
        let s = &bytes[*cursor..*cursor + n];
        *cursor += n;
        Ok(s)
    };
    let magic = take(&mut cursor, CHECKPOINT_MAGIC.len())?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format("checkpoint magic mismatch".into()));
    }
    let json_len = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;
    let spec: ModelSpec = serde_json::from_slice(take(&mut cursor, json_len)?)?;
    spec.validate()?;
    let count = u64::from_le_bytes(take(&mut cursor, 8)?.try_into().unwrap()) as usize;

    // Zero-initialized skeleton with the right geometry, then fill weights.
    let mut model = Model::zeroed(spec)?;
    if model.param_count() != count {
        return Err(Error::Format(format!(
            "checkpoint declares {count} parameters, spec needs {}",
            model.param_count()
        )));
    }
    let read_f64 = |cursor: &mut usize| -> Result<f64> {
        Ok(f64::from_le_bytes(take(cursor, 8)?.try_into().unwrap()))
    };
    for bank in &mut model.convs {
        for w in bank.weights.iter_mut() {
            *w = read_f64(&mut cursor)?;
        }
    }
    for dense in &mut model.denses {
        for w in dense.weights.iter_mut() {
            *w = read_f64(&mut cursor)?;
        }
        if !dense.masked_entries_are_zero() {
            return Err(Error::Format("checkpoint has nonzero weights under the mask".into()));
        }
    }
    Ok(model)
}
