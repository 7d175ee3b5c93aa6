//! Monte-Carlo verification of the expected GradCAM lower bound and the
//! rectified-Gaussian moment formulas, at initialization of a masked model.
//!
//! The verification samples filter banks and masked dense weights i.i.d.
//! Gaussian, evaluates the GradCAM map through the closed-form coefficient
//! route, and compares per-pixel estimates against the closed-form bound
//! `((V - 20) / sqrt(V)) * sqrt(h' w' / (16 pi)) * (tau^2 / (h w)) * ||m||_2`.

use serde::Serialize;

use crate::cam;
use crate::error::{Error, Result};
use crate::model::{self, DeadZone, Model, ModelMConfig};
use crate::nn;
use crate::parallel;
use crate::rng::Rng;
use crate::tensor::Tensor;

const SQRT_PI: f64 = 1.772453850905516;
const INV_SQRT_2PI: f64 = 0.3989422804014327;

/// Error function, absolute accuracy well under 1e-13 over the real line.
/// Maclaurin series below 2, Lentz continued fraction for the tail.
pub fn erf(x: f64) -> f64 {
    if x < 0.0 {
        return -erf(-x);
    }
    if x < 2.0 {
        erf_series(x)
    } else {
        1.0 - erfc_cf(x)
    }
}

/// Complementary error function.
pub fn erfc(x: f64) -> f64 {
    if x < 0.0 {
        return 2.0 - erfc(-x);
    }
    if x < 2.0 {
        1.0 - erf_series(x)
    } else {
        erfc_cf(x)
    }
}

fn erf_series(x: f64) -> f64 {
    // 2/sqrt(pi) * sum (-1)^n x^(2n+1) / (n! (2n+1))
    let x2 = x * x;
    let mut term = x;
    let mut sum = x;
    let mut n = 1.0;
    loop {
        term *= -x2 / n;
        let contribution = term / (2.0 * n + 1.0);
        sum += contribution;
        if contribution.abs() < 1e-18 * sum.abs().max(1e-300) {
            break;
        }
        n += 1.0;
        if n > 200.0 {
            break;
        }
    }
    2.0 / SQRT_PI * sum
}

fn erfc_cf(x: f64) -> f64 {
    // erfc(x) = exp(-x^2)/sqrt(pi) * 1/(x + (1/2)/(x + 1/(x + (3/2)/(x + ...)))),
    // evaluated bottom-up with numerators k/2.
    let mut tail = 0.0;
    for k in (1..=120).rev() {
        tail = (k as f64 / 2.0) / (x + tail);
    }
    (-x * x).exp() / SQRT_PI / (x + tail)
}

/// Standard normal density.
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

/// Standard normal CDF via the complementary error function.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x / std::f64::consts::SQRT_2)
}

/// Closed-form moments of the rectified Gaussian `relu(N(mu, tau^2))`.
///
/// `mean_plus = mu Phi(mu/tau) + tau phi(mu/tau)`; the square and fourth
/// moments follow the partial-moment recursion
/// `m_k = mu m_(k-1) + (k-1) tau^2 m_(k-2)`.
#[derive(Debug, Clone, Serialize)]
pub struct RectifiedGaussianMoments {
    pub mu: f64,
    pub tau: f64,
    /// E[X+]
    pub mean_plus: f64,
    /// E[(X+)^2]
    pub msq_plus: f64,
    /// Var[(X+)^2]
    pub var_sq_plus: f64,
}

impl RectifiedGaussianMoments {
    pub fn new(mu: f64, tau: f64) -> Result<Self> {
        if tau <= 0.0 {
            return Err(Error::Config(format!("tau must be positive, got {tau}")));
        }
        let z = mu / tau;
        let cdf = normal_cdf(z);
        let pdf = normal_pdf(z);
        let m0 = cdf;
        let m1 = mu * cdf + tau * pdf;
        let m2 = mu * m1 + tau * tau * m0;
        let m3 = mu * m2 + 2.0 * tau * tau * m1;
        let m4 = mu * m3 + 3.0 * tau * tau * m2;
        Ok(RectifiedGaussianMoments {
            mu,
            tau,
            mean_plus: m1,
            msq_plus: m2,
            var_sq_plus: m4 - m2 * m2,
        })
    }
}

/// Expectation of the rectified Gaussian: `mu Phi(mu/tau) + tau phi(-mu/tau)`.
pub fn rectified_gaussian_mean(mu: f64, tau: f64) -> Result<f64> {
    Ok(RectifiedGaussianMoments::new(mu, tau)?.mean_plus)
}

/// Sample mean with its standard error. One-sided 99% lower confidence
/// bound is `mean - 2.326 * std_err`.
#[derive(Debug, Clone, Serialize)]
pub struct McEstimate {
    pub n: usize,
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub fn from_sums(n: usize, sum: f64, sumsq: f64) -> McEstimate {
        assert!(n >= 2, "estimate needs at least two samples");
        let mean = sum / n as f64;
        let var = ((sumsq - sum * sum / n as f64) / (n as f64 - 1.0)).max(0.0);
        McEstimate { n, mean, std_err: (var / n as f64).sqrt() }
    }

    pub fn from_samples(xs: &[f64]) -> McEstimate {
        let sum: f64 = xs.iter().sum();
        let sumsq: f64 = xs.iter().map(|x| x * x).sum();
        McEstimate::from_sums(xs.len(), sum, sumsq)
    }

    pub fn one_sided_lcb99(&self) -> f64 {
        self.mean - 2.326 * self.std_err
    }
}

/// One formula-vs-Monte-Carlo comparison at the 3-standard-error level.
#[derive(Debug, Clone, Serialize)]
pub struct McCheck {
    pub label: String,
    pub expected: f64,
    pub estimate: f64,
    pub std_err: f64,
    pub within_3se: bool,
}

impl McCheck {
    fn new(label: &str, expected: f64, estimate: f64, std_err: f64) -> McCheck {
        McCheck {
            label: label.to_string(),
            expected,
            estimate,
            std_err,
            within_3se: (estimate - expected).abs() <= 3.0 * std_err,
        }
    }
}

/// Standard error of a sample variance via the plug-in fourth central moment.
fn variance_std_err(xs: &[f64], mean: f64, var: f64) -> f64 {
    let n = xs.len() as f64;
    let m4 = xs.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n;
    ((m4 - var * var).max(0.0) / n).sqrt()
}

/// Monte-Carlo check of the rectified-Gaussian mean formula.
pub fn rectified_mean_mc_check(mu: f64, tau: f64, n: usize, seed: u64) -> Result<McCheck> {
    let expected = rectified_gaussian_mean(mu, tau)?;
    let mut rng = Rng::from_seed_stream(seed, 0);
    let samples: Vec<f64> = (0..n).map(|_| rng.next_gaussian(mu, tau).max(0.0)).collect();
    let est = McEstimate::from_samples(&samples);
    Ok(McCheck::new("rectified_gaussian_mean", expected, est.mean, est.std_err))
}

/// Monte-Carlo checks of the squared rectified-Gaussian moments (centered
/// case): `E[(X+)^2] = tau^2/2` and `Var[(X+)^2] = 5 tau^4 / 4`.
pub fn squared_rectified_mc_check(tau: f64, n: usize, seed: u64) -> Result<[McCheck; 2]> {
    let moments = RectifiedGaussianMoments::new(0.0, tau)?;
    let mut rng = Rng::from_seed_stream(seed, 1);
    let squares: Vec<f64> = (0..n)
        .map(|_| {
            let x = rng.next_gaussian(0.0, tau).max(0.0);
            x * x
        })
        .collect();
    let est = McEstimate::from_samples(&squares);
    let mean_check = McCheck::new("squared_rectified_mean", moments.msq_plus, est.mean, est.std_err);
    let var: f64 = squares.iter().map(|x| (x - est.mean) * (x - est.mean)).sum::<f64>()
        / (n as f64 - 1.0);
    let var_se = variance_std_err(&squares, est.mean, var);
    let var_check = McCheck::new("squared_rectified_var", moments.var_sq_plus, var, var_se);
    Ok([mean_check, var_check])
}

/// Law of the convolution of a Gaussian filter with a fixed patch:
/// mean 0 and variance `(tau ||m||_2)^2`, checked by sampling.
pub fn conv_gaussian_law_check(patch: &Tensor, tau: f64, n: usize, seed: u64) -> Result<[McCheck; 2]> {
    if n < 2 {
        return Err(Error::Config("law check needs at least two samples".into()));
    }
    let mut rng = Rng::from_seed_stream(seed, 2);
    let samples: Vec<f64> = (0..n)
        .map(|_| {
            patch
                .data()
                .iter()
                .map(|&m| rng.next_gaussian(0.0, tau) * m)
                .sum()
        })
        .collect();
    let est = McEstimate::from_samples(&samples);
    let norm2 = patch.data().iter().map(|x| x * x).sum::<f64>();
    let expected_var = tau * tau * norm2;
    let mean_check = McCheck::new("conv_law_mean", 0.0, est.mean, est.std_err.max(f64::MIN_POSITIVE));
    let var: f64 = samples.iter().map(|x| (x - est.mean) * (x - est.mean)).sum::<f64>()
        / (n as f64 - 1.0);
    let var_se = variance_std_err(&samples, est.mean, var);
    let var_check = McCheck::new("conv_law_var", expected_var, var, var_se.max(f64::MIN_POSITIVE));
    Ok([mean_check, var_check])
}

/// Geometry and inputs of one bound evaluation.
#[derive(Debug, Clone, Serialize)]
pub struct BoundInstance {
    pub filters: usize,
    pub pooled_rows: usize,
    pub pooled_cols: usize,
    pub feature_rows: usize,
    pub feature_cols: usize,
    pub tau: f64,
    pub patch_norm: f64,
}

/// Closed-form right-hand side of the expected GradCAM lower bound.
/// Negative for `filters < 20`; the caller decides whether to judge those.
pub fn expected_score_lower_bound(inst: &BoundInstance) -> Result<f64> {
    if !inst.pooled_rows.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "pooled rows must be even, got {}",
            inst.pooled_rows
        )));
    }
    if inst.filters == 0 {
        return Err(Error::Config("at least one filter required".into()));
    }
    let v = inst.filters as f64;
    let hw = (inst.feature_rows * inst.feature_cols) as f64;
    let phw = (inst.pooled_rows * inst.pooled_cols) as f64;
    Ok((v - 20.0) / v.sqrt() * (phw / (16.0 * std::f64::consts::PI)).sqrt()
        * inst.tau * inst.tau / hw
        * inst.patch_norm)
}

/// L2 norm of the k x k patch of `image` anchored at `(i, j)` (single channel).
pub fn patch_norm(image: &Tensor, i: usize, j: usize, k: usize) -> f64 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    debug_assert!(i + k <= h && j + k <= w);
    let mut acc = 0.0;
    for p in 0..k {
        for q in 0..k {
            let x = image.at3(0, i + p, j + q);
            acc += x * x;
        }
    }
    acc.sqrt()
}

#[derive(Debug, Clone)]
pub struct McGradcamConfig {
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub tau: f64,
    pub n_seeds: usize,
    pub base_seed: u64,
    pub threads: usize,
}

impl Default for McGradcamConfig {
    fn default() -> Self {
        McGradcamConfig {
            filters: 64,
            kernel: 5,
            pool: 2,
            tau: 1.0,
            n_seeds: 2000,
            base_seed: 0,
            threads: 1,
        }
    }
}

/// Verdict for one feature-map pixel.
#[derive(Debug, Clone, Serialize)]
pub struct PixelVerdict {
    pub row: usize,
    pub col: usize,
    pub estimate: f64,
    pub std_err: f64,
    pub lcb99: f64,
    pub bound: f64,
    /// Judged only when the patch is nonzero and the filter count exceeds 20.
    pub judged: bool,
    pub pass: bool,
}

/// Full verification report for one image.
#[derive(Debug, Clone, Serialize)]
pub struct BoundReport {
    pub filters: usize,
    pub kernel: usize,
    pub pool: usize,
    pub tau: f64,
    pub n_seeds: usize,
    pub feature_rows: usize,
    pub feature_cols: usize,
    pub dead_zone: DeadZone,
    pub pixels: Vec<PixelVerdict>,
    /// Fraction of seeds with strictly positive upsampled mass inside the
    /// dead zone.
    pub dead_zone_positive_fraction: f64,
    pub judged_pixels: usize,
    pub all_pass: bool,
}

fn model_for_seed(image_rows: usize, image_cols: usize, cfg: &McGradcamConfig, seed: usize) -> Result<(Model, usize)> {
    let h = image_rows - cfg.kernel + 1;
    let pooled_rows = h / cfg.pool;
    let model_seed = Rng::from_seed_stream(cfg.base_seed, seed as u64).next_u64();
    let model = model::build_model_m(&ModelMConfig {
        height: image_rows,
        width: image_cols,
        kernel: cfg.kernel,
        filters: cfg.filters,
        pool: cfg.pool,
        dense_widths: vec![1],
        mask_band_rows: Some(pooled_rows / 2),
        seed: model_seed,
        tau: cfg.tau,
    })?;
    Ok((model, pooled_rows))
}

/// Estimate `E[GradCAM_(i,j)]` over random initializations of a bottom-half
/// masked single-dense model, and compare every nonzero-patch pixel against
/// the closed-form bound. The GradCAM map is evaluated through the
/// closed-form coefficient route.
pub fn mc_expected_gradcam(image: &Tensor, cfg: &McGradcamConfig) -> Result<BoundReport> {
    let [channels, image_rows, image_cols] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        other => {
            return Err(Error::Shape {
                expected: "rank-3 image".into(),
                found: format!("{other:?}"),
            })
        }
    };
    if channels != 1 {
        return Err(Error::Config("theory verification expects a single-channel image".into()));
    }
    if cfg.n_seeds < 2 {
        return Err(Error::Config("need at least two seeds".into()));
    }
    if image_rows < cfg.kernel || image_cols < cfg.kernel {
        return Err(Error::Shape {
            expected: format!("image at least {0}x{0}", cfg.kernel),
            found: format!("{image_rows}x{image_cols}"),
        });
    }
    let h = image_rows - cfg.kernel + 1;
    let w = image_cols - cfg.kernel + 1;
    if cfg.pool == 0 || !h.is_multiple_of(cfg.pool) || !w.is_multiple_of(cfg.pool) {
        return Err(Error::Config(format!("pool {} must divide ({h}, {w})", cfg.pool)));
    }
    let pooled_rows = h / cfg.pool;
    if !pooled_rows.is_multiple_of(2) {
        return Err(Error::Config(format!("pooled rows must be even, got {pooled_rows}")));
    }

    // Dead zone of the masked geometry (identical for every seed).
    let (probe, _) = model_for_seed(image_rows, image_cols, cfg, 0)?;
    let dead_zone = model::compute_dead_zone(&probe.spec)?;

    struct Partial {
        sum: Vec<f64>,
        sumsq: Vec<f64>,
        positive: usize,
    }

    let cells = h * w;
    let chunk = 64usize;
    let n_chunks = cfg.n_seeds.div_ceil(chunk);
    let partials: Vec<Result<Partial>> = parallel::map_indexed(n_chunks, cfg.threads, |ci| {
        let lo = ci * chunk;
        let hi = ((ci + 1) * chunk).min(cfg.n_seeds);
        let mut part = Partial { sum: vec![0.0; cells], sumsq: vec![0.0; cells], positive: 0 };
        for seed in lo..hi {
            let (model, _) = model_for_seed(image_rows, image_cols, cfg, seed)?;
            let trace = nn::forward(&model, image)?;
            let alpha = cam::closed_form_gradcam_weights(&model, &trace, 0)?;
            let b = trace.rectified_maps();
            let mut map = Tensor::zeros(&[h, w]);
            for (v, &a) in alpha.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &x) in map.data_mut().iter_mut().zip(b.channel(v)) {
                    *o += a * x;
                }
            }
            for o in map.data_mut() {
                if *o < 0.0 {
                    *o = 0.0;
                }
            }
            for (i, &x) in map.data().iter().enumerate() {
                part.sum[i] += x;
                part.sumsq[i] += x * x;
            }
            let up = cam::bilinear_upsample(&map, image_rows, image_cols);
            let mass: f64 = (dead_zone.first_dead_row..image_rows)
                .map(|y| up.data()[y * image_cols..(y + 1) * image_cols].iter().sum::<f64>())
                .sum();
            if mass > 0.0 {
                part.positive += 1;
            }
        }
        Ok(part)
    });

    let mut sum = vec![0.0; cells];
    let mut sumsq = vec![0.0; cells];
    let mut positive = 0usize;
    for part in partials {
        let part = part?;
        for i in 0..cells {
            sum[i] += part.sum[i];
            sumsq[i] += part.sumsq[i];
        }
        positive += part.positive;
    }

    let judged_allowed = cfg.filters > 20;
    let mut pixels = Vec::with_capacity(cells);
    let mut all_pass = true;
    let mut judged_pixels = 0;
    for i in 0..h {
        for j in 0..w {
            let idx = i * w + j;
            let est = McEstimate::from_sums(cfg.n_seeds, sum[idx], sumsq[idx]);
            let norm = patch_norm(image, i, j, cfg.kernel);
            let bound = expected_score_lower_bound(&BoundInstance {
                filters: cfg.filters,
                pooled_rows,
                pooled_cols: w / cfg.pool,
                feature_rows: h,
                feature_cols: w,
                tau: cfg.tau,
                patch_norm: norm,
            })?;
            let judged = judged_allowed && norm > 0.0;
            let lcb = est.one_sided_lcb99();
            let pass = !judged || lcb >= bound;
            if judged {
                judged_pixels += 1;
            }
            all_pass &= pass;
            pixels.push(PixelVerdict {
                row: i,
                col: j,
                estimate: est.mean,
                std_err: est.std_err,
                lcb99: lcb,
                bound,
                judged,
                pass,
            });
        }
    }

    Ok(BoundReport {
        filters: cfg.filters,
        kernel: cfg.kernel,
        pool: cfg.pool,
        tau: cfg.tau,
        n_seeds: cfg.n_seeds,
        feature_rows: h,
        feature_cols: w,
        dead_zone,
        pixels,
        dead_zone_positive_fraction: positive as f64 / cfg.n_seeds as f64,
        judged_pixels,
        all_pass,
    })
}

/// Check the conditional-variance identity behind the bound: with the
/// filters (hence `B`) held fixed and the masked dense row resampled,
/// `Var[sum_q alpha_q B_(i,j)^(q)] = sum_q B_(i,j)^(q)^2 (tau/(hw))^2 h'w'/2`.
pub fn conditional_variance_check(
    image: &Tensor,
    cfg: &McGradcamConfig,
    pixel: (usize, usize),
    n_resamples: usize,
    seed: u64,
) -> Result<McCheck> {
    let [_, image_rows, image_cols] = match image.shape() {
        [c, h, w] => [*c, *h, *w],
        _ => return Err(Error::Config("rank-3 image required".into())),
    };
    let (model, pooled_rows) = model_for_seed(image_rows, image_cols, cfg, 0)?;
    let trace = nn::forward(&model, image)?;
    let b = trace.rectified_maps();
    let [channels, h, w] = [b.shape()[0], b.shape()[1], b.shape()[2]];
    let pooled_cols = w / cfg.pool;
    let seen_cells = (pooled_rows / 2) * pooled_cols;
    let hw = (h * w) as f64;
    let (pi, pj) = pixel;
    if pi >= h || pj >= w {
        return Err(Error::Config(format!("pixel ({pi}, {pj}) outside {h}x{w} map")));
    }

    let b_at: Vec<f64> = (0..channels).map(|v| b.at3(v, pi, pj)).collect();
    let expected: f64 = b_at.iter().map(|x| x * x).sum::<f64>()
        * (cfg.tau / hw) * (cfg.tau / hw)
        * (pooled_rows * pooled_cols) as f64
        / 2.0;

    let mut rng = Rng::from_seed_stream(seed, 3);
    let samples: Vec<f64> = (0..n_resamples)
        .map(|_| {
            let mut x = 0.0;
            for &bq in &b_at {
                // alpha_q = (1/hw) * sum over the seen pooled cells of W.
                let mut alpha = 0.0;
                for _ in 0..seen_cells {
                    alpha += rng.next_gaussian(0.0, cfg.tau);
                }
                x += alpha / hw * bq;
            }
            x
        })
        .collect();
    let est = McEstimate::from_samples(&samples);
    let var: f64 = samples.iter().map(|x| (x - est.mean) * (x - est.mean)).sum::<f64>()
        / (n_resamples as f64 - 1.0);
    let var_se = variance_std_err(&samples, est.mean, var);
    Ok(McCheck::new("conditional_variance", expected, var, var_se))
}
