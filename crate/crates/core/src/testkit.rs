//! Support for the oracle-style tests: finite-difference-safe instance
//! search, independent eigenvector and quadrature oracles. Not part of the
//! audit API; it lives in the library so the integration suites can reuse it.

use crate::model::{build_model_m, Model, ModelMConfig};
use crate::nn::{self, Activation, ForwardTrace};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub fn random_image(shape: &[usize], rng: &mut Rng) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.next_f64();
    }
    t
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs());
    if denom < 1e-9 {
        0.0
    } else {
        (a - b).abs() / denom
    }
}

/// Smallest magnitude of any nonzero activation in the trace. Central
/// differences need every ReLU pre-activation away from its kink.
pub fn kink_margin(trace: &ForwardTrace) -> f64 {
    let mut margin = f64::INFINITY;
    for act in &trace.activations {
        let values: &[f64] = match act {
            Activation::Map(t) | Activation::Pooled(t, _) => t.data(),
            Activation::Vector(v) => v,
        };
        for &x in values {
            if x != 0.0 {
                margin = margin.min(x.abs());
            }
        }
    }
    margin
}

/// Smallest best-vs-runner-up gap over pool patches that carry any signal.
/// All-zero patches are skipped: they are flat, not fragile, for parameter
/// and input perturbations.
pub fn pool_margin(trace: &ForwardTrace) -> f64 {
    let mut margin = f64::INFINITY;
    for (idx, act) in trace.activations.iter().enumerate() {
        if let Activation::Pooled(out, routing) = act {
            let input = match &trace.activations[idx - 1] {
                Activation::Map(t) => t,
                _ => unreachable!("pool input is spatial"),
            };
            let w = routing.window;
            if w == 1 {
                continue;
            }
            for c in 0..routing.channels {
                for i in 0..routing.out_rows {
                    for j in 0..routing.out_cols {
                        let best = out.at3(c, i, j);
                        let sel = routing.at(c, i, j);
                        let mut second = f64::NEG_INFINITY;
                        for p in 0..w {
                            for q in 0..w {
                                if p * w + q == sel {
                                    continue;
                                }
                                second = second.max(input.at3(c, i * w + p, j * w + q));
                            }
                        }
                        if best == 0.0 && second <= 0.0 {
                            continue;
                        }
                        margin = margin.min(best - second);
                    }
                }
            }
        }
    }
    margin
}

/// Whether a central difference of step `h` at one cell of the rectified map
/// stays on one side of its patch's pool decision.
pub fn rectified_cell_fd_valid(trace: &ForwardTrace, cell: usize, h: f64) -> bool {
    let b = trace.rectified_maps();
    let [_, rows, cols] = [b.shape()[0], b.shape()[1], b.shape()[2]];
    let (pool_idx, out, routing) = match trace.activations[trace.split + 1..]
        .iter()
        .enumerate()
        .find_map(|(off, act)| match act {
            Activation::Pooled(out, routing) => Some((trace.split + 1 + off, out, routing)),
            _ => None,
        }) {
        Some(found) => found,
        None => return true, // no pooling after the split: no patch kink in f
    };
    let _ = pool_idx;
    let w = routing.window;
    let c = cell / (rows * cols);
    let i = (cell / cols) % rows;
    let j = cell % cols;
    let (pi, pj) = (i / w, j / w);
    let best = out.at3(c, pi, pj);
    let sel = routing.at(c, pi, pj);
    let here = b.at3(c, i, j);
    if (i % w) * w + (j % w) == sel {
        // Routed cell: runner-up must stay strictly below after -h.
        let mut second = f64::NEG_INFINITY;
        for p in 0..w {
            for q in 0..w {
                if p * w + q == sel {
                    continue;
                }
                second = second.max(b.at3(c, pi * w + p, pj * w + q));
            }
        }
        best - second > 10.0 * h
    } else {
        // Non-routed cell: must stay strictly below the max after +h.
        best - here > 10.0 * h
    }
}

/// Deterministically search seeds for a small conv/pool/dense instance whose
/// trace keeps ReLU pre-activations and signal-bearing pool decisions at a
/// safe distance from the finite-difference step.
pub fn fd_safe_instance(
    base_seed: u64,
    dense_widths: Vec<usize>,
    filters: usize,
    mask_band_rows: Option<usize>,
) -> (Model, Tensor, ForwardTrace) {
    for attempt in 0..500u64 {
        let seed = base_seed.wrapping_add(attempt.wrapping_mul(0x9e3779b9));
        let model = build_model_m(&ModelMConfig {
            height: 10,
            width: 10,
            kernel: 3,
            filters,
            pool: 2,
            dense_widths: dense_widths.clone(),
            mask_band_rows,
            seed,
            tau: 1.0,
        })
        .expect("valid test geometry");
        let mut rng = Rng::from_seed_stream(seed, 999);
        let image = random_image(&[1, 10, 10], &mut rng);
        let trace = nn::forward(&model, &image).expect("forward");
        if kink_margin(&trace) > 5e-3 && pool_margin(&trace) > 5e-3 {
            return (model, image, trace);
        }
    }
    panic!("no FD-safe instance found near seed {base_seed}");
}

/// Top eigenvector of a symmetric matrix by cyclic Jacobi rotations.
/// Independent oracle for the power-iteration route.
pub fn jacobi_top_eigenvector(matrix: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(matrix.len(), n * n);
    let mut a = matrix.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for p in 0..n {
            for q in p + 1..n {
                off += a[p * n + q] * a[p * n + q];
            }
        }
        if off < 1e-24 {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let top = (0..n)
        .max_by(|&i, &j| a[i * n + i].partial_cmp(&a[j * n + j]).unwrap())
        .unwrap();
    (0..n).map(|k| v[k * n + top]).collect()
}

/// Adaptive Simpson quadrature, used as an independent oracle for the error
/// function.
pub fn simpson_integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn simpson(f: &dyn Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), m, fm)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        m: f64,
        fm: f64,
        tol: f64,
        depth: usize,
    ) -> f64 {
        let (left, lm, flm) = simpson(f, a, fa, m, fm);
        let (right, rm, frm) = simpson(f, m, fm, b, fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, lm, flm, tol / 2.0, depth - 1)
                + recurse(f, m, fm, b, fb, right, rm, frm, tol / 2.0, depth - 1)
        }
    }
    let (fa, fb) = (f(a), f(b));
    let (whole, m, fm) = simpson(f, a, fa, b, fb);
    recurse(f, a, fa, b, fb, whole, m, fm, tol, 40)
}
