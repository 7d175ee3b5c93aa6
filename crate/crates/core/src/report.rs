//! Dead-zone leakage metric, per-method audit aggregation, and heatmap
//! overlay rendering.

use std::path::Path;

use serde::Serialize;

use crate::cam::{self, CamMethod, OptiCamOptions};
use crate::data::{self, LabeledDataset};
use crate::error::{Error, Result};
use crate::model::{self, DeadZone, LayerSpec, Model, ModelSpec};
use crate::nn;
use crate::parallel;
use crate::tensor::Tensor;

/// JSON with sorted keys, for byte-stable artifacts.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let value = serde_json::to_value(value)?;
    Ok(serde_json::to_string_pretty(&value)?)
}

/// Leakage metric: L2 mass of the dead-zone rows over the whole map's L2
/// mass, on the raw upsampled saliency map. An all-zero map scores 0.
pub fn mu(upsampled: &Tensor, dead_zone: &DeadZone) -> f64 {
    let (rows, cols) = (upsampled.shape()[0], upsampled.shape()[1]);
    debug_assert_eq!(rows, dead_zone.input_rows);
    let total: f64 = upsampled.data().iter().map(|x| x * x).sum();
    if total <= 0.0 {
        return 0.0;
    }
    let start = dead_zone.first_dead_row.min(rows);
    let dead: f64 = upsampled.data()[start * cols..].iter().map(|x| x * x).sum();
    (dead / total).sqrt()
}

/// One method applied to one image.
#[derive(Debug, Clone, Serialize)]
pub struct LeakageScore {
    pub method: CamMethod,
    pub image: usize,
    pub mu: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: CamMethod,
    pub images: usize,
    pub failures: usize,
    pub mean_mu_x100: f64,
    pub std_mu_x100: f64,
    /// Fraction of scored images with strictly positive leakage.
    pub positive_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub dead_zone: DeadZone,
    pub rows: Vec<LeakageScore>,
    pub summaries: Vec<MethodSummary>,
}

impl AuditReport {
    pub fn to_json(&self) -> Result<String> {
        canonical_json(self)
    }

    /// Table-shaped CSV: one row per method.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method,mean_mu_x100,std_mu_x100,images,positive_fraction\n");
        for s in &self.summaries {
            out.push_str(&format!(
                "{},{:.4},{:.4},{},{:.4}\n",
                s.method, s.mean_mu_x100, s.std_mu_x100, s.images, s.positive_fraction
            ));
        }
        out
    }

    pub fn summary_for(&self, method: CamMethod) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }
}

#[derive(Debug, Clone)]
pub struct AuditOptions {
    pub methods: Vec<CamMethod>,
    pub opti: OptiCamOptions,
    pub threads: usize,
}

impl Default for AuditOptions {
    fn default() -> Self {
        AuditOptions {
            methods: CamMethod::ALL.to_vec(),
            opti: OptiCamOptions::default(),
            threads: 1,
        }
    }
}

fn summarize(method: CamMethod, rows: &[LeakageScore]) -> MethodSummary {
    let scores: Vec<f64> = rows
        .iter()
        .filter(|r| r.method == method)
        .filter_map(|r| r.mu)
        .collect();
    let failures = rows.iter().filter(|r| r.method == method && r.mu.is_none()).count();
    let n = scores.len();
    let (mean, std) = if n == 0 {
        (0.0, 0.0)
    } else {
        let mean = scores.iter().sum::<f64>() / n as f64;
        let var = scores.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        (mean, var.sqrt())
    };
    let positive = scores.iter().filter(|&&x| x > 0.0).count();
    MethodSummary {
        method,
        images: n,
        failures,
        mean_mu_x100: mean * 100.0,
        std_mu_x100: std * 100.0,
        positive_fraction: if n == 0 { 0.0 } else { positive as f64 / n as f64 },
    }
}

/// Explain every image with every requested method (at the predicted class)
/// and score the dead-zone leakage. Method failures are recorded per row.
pub fn run_audit(model: &Model, ds: &LabeledDataset, opts: &AuditOptions) -> Result<AuditReport> {
    let dead_zone = model::compute_dead_zone(&model.spec)?;
    if ds.is_empty() {
        return Err(Error::Config("audit needs a nonempty dataset".into()));
    }
    ds.validate()?;

    let per_image: Vec<Result<Vec<LeakageScore>>> = parallel::map_indexed(ds.len(), opts.threads, |i| {
        let trace = nn::forward(model, &ds.images[i])?;
        let class = trace.predicted_class();
        let mut rows = Vec::with_capacity(opts.methods.len());
        for &method in &opts.methods {
            match cam::compute(method, model, &trace, class, opts.opti) {
                Ok(map) => rows.push(LeakageScore {
                    method,
                    image: i,
                    mu: Some(mu(&map.upsampled, &dead_zone)),
                    error: None,
                }),
                Err(err) => rows.push(LeakageScore {
                    method,
                    image: i,
                    mu: None,
                    error: Some(err.to_string()),
                }),
            }
        }
        Ok(rows)
    });

    let mut rows = Vec::with_capacity(ds.len() * opts.methods.len());
    for r in per_image {
        rows.extend(r?);
    }
    let summaries = opts.methods.iter().map(|&m| summarize(m, &rows)).collect();
    Ok(AuditReport { dead_zone, rows, summaries })
}

/// Fraction of input rows where an elementwise gradient-weighted map is
/// structurally zero: the masked feature rows, widened through any pooling
/// between the rectified map and the flatten, then through the bilinear
/// upsampling support. Exact integer arithmetic.
pub fn hirescam_overzero_fraction(spec: &ModelSpec) -> Result<f64> {
    spec.validate()?;
    let (_, mask) = spec.masked_dense().ok_or(Error::NoDeadZone)?;
    if mask.band_rows == 0 {
        return Ok(0.0);
    }
    let grid_rows = mask.grid[1];
    let split = spec.split_index()?;
    let flatten = spec.layers.iter().position(|l| matches!(l, LayerSpec::Flatten)).unwrap();
    // Only pooling can sit between the rectified map and the flatten.
    let pool_factor: usize = spec.layers[split + 1..flatten]
        .iter()
        .map(|l| match l {
            LayerSpec::MaxPool { size } => *size,
            _ => 1,
        })
        .product();
    let map_rows = grid_rows * pool_factor;
    let first_zero_map_row = (grid_rows - mask.band_rows) * pool_factor;
    let input_rows = spec.input_rows();

    // Smallest input row y with (y + 0.5) * map_rows / input_rows - 0.5 >= m,
    // i.e. (2y + 1) * map_rows >= (2m + 1) * input_rows.
    let m = first_zero_map_row;
    let numer = (2 * m + 1) * input_rows;
    let denom = 2 * map_rows;
    let first_zero_input_row = if numer <= map_rows {
        0
    } else {
        (numer - map_rows).div_ceil(denom)
    };
    let zero_rows = input_rows.saturating_sub(first_zero_input_row);
    Ok(zero_rows as f64 / input_rows as f64)
}

/// 256-entry jet-style colormap, fixed at compile time for byte-exact
/// renders.
const JET: [[u8; 3]; 256] = build_jet();

const fn jet_channel(x: f64) -> u8 {
    // clamp(1.5 - |x|, 0, 1) quantized to u8
    let a = if x < 0.0 { -x } else { x };
    let v = 1.5 - a;
    let v = if v < 0.0 { 0.0 } else if v > 1.0 { 1.0 } else { v };
    (v * 255.0 + 0.5) as u8
}

const fn build_jet() -> [[u8; 3]; 256] {
    let mut table = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let t = i as f64 / 255.0;
        table[i] = [
            jet_channel(4.0 * t - 3.0),
            jet_channel(4.0 * t - 2.0),
            jet_channel(4.0 * t - 1.0),
        ];
        i += 1;
    }
    table
}

/// Blend a grayscale image 50/50 with the jet colormap of a normalized
/// saliency map, and frame the dead zone in red. Returns interleaved RGB.
pub fn render_overlay_rgb(
    image: &Tensor,
    map_normalized: &Tensor,
    dead_zone: &DeadZone,
) -> Result<(Vec<u8>, usize, usize)> {
    let (rows, cols) = match image.shape() {
        [1, h, w] => (*h, *w),
        [h, w] => (*h, *w),
        other => {
            return Err(Error::Shape {
                expected: "grayscale image".into(),
                found: format!("{other:?}"),
            })
        }
    };
    if map_normalized.shape() != [rows, cols] {
        return Err(Error::Shape {
            expected: format!("[{rows}, {cols}]"),
            found: format!("{:?}", map_normalized.shape()),
        });
    }
    let mut rgb = vec![0u8; rows * cols * 3];
    for y in 0..rows {
        for x in 0..cols {
            let gray = image.data()[y * cols + x].clamp(0.0, 1.0);
            let heat = map_normalized.at2(y, x).clamp(0.0, 1.0);
            let jet = JET[(heat * 255.0).round() as usize];
            let px = &mut rgb[(y * cols + x) * 3..(y * cols + x) * 3 + 3];
            for c in 0..3 {
                px[c] = ((0.5 * gray * 255.0) + 0.5 * jet[c] as f64).round() as u8;
            }
        }
    }
    // Red frame around the dead zone.
    if dead_zone.first_dead_row < rows {
        let top = dead_zone.first_dead_row;
        let mut paint = |y: usize, x: usize| {
            let px = &mut rgb[(y * cols + x) * 3..(y * cols + x) * 3 + 3];
            px.copy_from_slice(&[255, 0, 0]);
        };
        for x in 0..cols {
            paint(top, x);
            paint(rows - 1, x);
        }
        for y in top..rows {
            paint(y, 0);
            paint(y, cols - 1);
        }
    }
    Ok((rgb, rows, cols))
}

/// Render and write the overlay as a P6 PPM. Deterministic bytes.
pub fn render_overlay(
    image: &Tensor,
    map_normalized: &Tensor,
    dead_zone: &DeadZone,
    path: &Path,
) -> Result<()> {
    let (rgb, rows, cols) = render_overlay_rgb(image, map_normalized, dead_zone)?;
    data::write_ppm(path, &rgb, rows, cols)
}
