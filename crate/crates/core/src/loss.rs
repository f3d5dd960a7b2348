//! Photometric and depth losses with analytic gradients.
//!
//! The photometric loss mixes mean absolute error with the structural
//! dissimilarity `(1 - SSIM) / 2` using an 11x11 Gaussian window
//! (sigma 1.5, constants 0.01^2 and 0.03^2 on the unit range, windows fully
//! inside the frame). The depth loss is one minus the Pearson correlation
//! between rendered inverse depth and the mono depth over the valid pixels,
//! which makes it invariant to positive affine maps of either argument.

use thiserror::Error;

use crate::grid::{BinaryMask, ColorImage, ScalarMap};

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("image dimensions disagree: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW} for the structural term")]
    TooSmallForSsim,
    #[error("need at least 2 valid depth pixels, got {0}")]
    TooFewValidPixels(usize),
}

/// Mixing weights of the optimization objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossWeights {
    /// Structural-dissimilarity share of the photometric loss.
    pub lambda: f64,
    /// Depth-consistency weight.
    pub lambda_d: f64,
    /// Novel-view supervision weight.
    pub lambda_pseudo: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            lambda_d: 0.5,
            lambda_pseudo: 0.3,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RgbLoss {
    pub value: f64,
    /// Gradient with respect to the rendered image.
    pub gradient: Vec<[f64; 3]>,
}

#[derive(Debug, Clone)]
pub struct DepthLoss {
    pub value: f64,
    /// Gradient with respect to the rendered depth map (zero at invalid
    /// pixels).
    pub gradient: Vec<f64>,
    /// Set when one of the arguments had no variance; the loss is then the
    /// uncorrelated value 1 with a zero gradient.
    pub degenerate: bool,
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c) * (i as f64 - c)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// `(1 - lambda) * L1 + lambda * (1 - SSIM) / 2`, with the gradient with
/// respect to the rendered image.
pub fn loss_rgb(rendered: &ColorImage, target: &ColorImage, lambda: f64) -> Result<RgbLoss, LossError> {
    if !rendered.same_shape(target) {
        return Err(LossError::DimensionMismatch(
            rendered.width(),
            rendered.height(),
            target.width(),
            target.height(),
        ));
    }
    let (w, h) = (rendered.width(), rendered.height());
    let n = (w * h * 3) as f64;
    let mut gradient = vec![[0.0f64; 3]; w * h];

    // Mean absolute error part.
    let mut l1 = 0.0;
    for (i, (a, b)) in rendered.pixels().iter().zip(target.pixels()).enumerate() {
        for c in 0..3 {
            let diff = a[c] - b[c];
            l1 += diff.abs();
            // Subgradient zero at ties.
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            gradient[i][c] = (1.0 - lambda) * sign / n;
        }
    }
    l1 /= n;

    if lambda == 0.0 {
        return Ok(RgbLoss {
            value: (1.0 - lambda) * l1,
            gradient,
        });
    }
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        return Err(LossError::TooSmallForSsim);
    }

    let (ssim_mean, ssim_grad) = ssim_with_gradient(rendered, target);
    let value = (1.0 - lambda) * l1 + lambda * (1.0 - ssim_mean) / 2.0;
    let scale = -lambda / 2.0;
    for (g, sg) in gradient.iter_mut().zip(&ssim_grad) {
        for c in 0..3 {
            g[c] += scale * sg[c];
        }
    }
    Ok(RgbLoss { value, gradient })
}

/// Mean SSIM over fully-interior windows, averaged across channels.
pub(crate) fn ssim_mean(a: &ColorImage, b: &ColorImage) -> Result<f64, LossError> {
    if !a.same_shape(b) {
        return Err(LossError::DimensionMismatch(
            a.width(),
            a.height(),
            b.width(),
            b.height(),
        ));
    }
    if a.width() < SSIM_WINDOW || a.height() < SSIM_WINDOW {
        return Err(LossError::TooSmallForSsim);
    }
    Ok(ssim_with_gradient(a, b).0)
}

/// Window-statistics SSIM and its gradient with respect to `a`.
fn ssim_with_gradient(a: &ColorImage, b: &ColorImage) -> (f64, Vec<[f64; 3]>) {
    let (w, h) = (a.width(), a.height());
    let win = gaussian_window();
    let nx = w - SSIM_WINDOW + 1;
    let ny = h - SSIM_WINDOW + 1;
    let n_windows = (nx * ny * 3) as f64;

    let mut total = 0.0;
    let mut gradient = vec![[0.0f64; 3]; w * h];

    for wy in 0..ny {
        for wx in 0..nx {
            for ch in 0..3 {
                // Window statistics.
                let mut mu_a = 0.0;
                let mut mu_b = 0.0;
                let mut m_aa = 0.0;
                let mut m_bb = 0.0;
                let mut m_ab = 0.0;
                for j in 0..SSIM_WINDOW {
                    for i in 0..SSIM_WINDOW {
                        let g = win[i] * win[j];
                        let av = a.at(wx + i, wy + j)[ch];
                        let bv = b.at(wx + i, wy + j)[ch];
                        mu_a += g * av;
                        mu_b += g * bv;
                        m_aa += g * av * av;
                        m_bb += g * bv * bv;
                        m_ab += g * av * bv;
                    }
                }
                let sigma_a = m_aa - mu_a * mu_a;
                let sigma_b = m_bb - mu_b * mu_b;
                let sigma_ab = m_ab - mu_a * mu_b;
                let n1 = 2.0 * mu_a * mu_b + SSIM_C1;
                let n2 = 2.0 * sigma_ab + SSIM_C2;
                let d1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1;
                let d2 = sigma_a + sigma_b + SSIM_C2;
                let s = (n1 * n2) / (d1 * d2);
                total += s;

                // Partials of S with respect to the raw window moments.
                let inv = 1.0 / (d1 * d2);
                let ds_dn1 = n2 * inv;
                let ds_dn2 = n1 * inv;
                let ds_dd1 = -s / d1;
                let ds_dd2 = -s / d2;
                let ds_dmu_a =
                    ds_dn1 * 2.0 * mu_b + ds_dd1 * 2.0 * mu_a - ds_dn2 * 2.0 * mu_b
                        - ds_dd2 * 2.0 * mu_a;
                let ds_dm_aa = ds_dd2;
                let ds_dm_ab = ds_dn2 * 2.0;

                // Scatter back through the window weights.
                for j in 0..SSIM_WINDOW {
                    for i in 0..SSIM_WINDOW {
                        let g = win[i] * win[j];
                        let av = a.at(wx + i, wy + j)[ch];
                        let bv = b.at(wx + i, wy + j)[ch];
                        gradient[(wy + j) * w + wx + i][ch] +=
                            g * (ds_dmu_a + ds_dm_aa * 2.0 * av + ds_dm_ab * bv) / n_windows;
                    }
                }
            }
        }
    }
    (total / n_windows, gradient)
}

/// One minus the Pearson correlation between the rendered inverse depth and
/// the mono depth over the valid pixels, with the gradient with respect to
/// the rendered depth.
pub fn loss_depth(
    rendered_depth: &ScalarMap,
    mono: &ScalarMap,
    valid: &BinaryMask,
) -> Result<DepthLoss, LossError> {
    if !rendered_depth.same_shape(mono)
        || valid.width() != mono.width()
        || valid.height() != mono.height()
    {
        return Err(LossError::DimensionMismatch(
            rendered_depth.width(),
            rendered_depth.height(),
            mono.width(),
            mono.height(),
        ));
    }
    let total = rendered_depth.len();
    let mut idx = Vec::new();
    for i in 0..total {
        let d = rendered_depth.values()[i];
        let m = mono.values()[i];
        if valid.values()[i] && d.is_finite() && d > 0.0 && m.is_finite() {
            idx.push(i);
        }
    }
    if idx.len() < 2 {
        return Err(LossError::TooFewValidPixels(idx.len()));
    }

    let inv_depth: Vec<f64> = idx.iter().map(|&i| 1.0 / rendered_depth.values()[i]).collect();
    let mono_v: Vec<f64> = idx.iter().map(|&i| mono.values()[i]).collect();
    let n = idx.len() as f64;
    let mean_x = inv_depth.iter().sum::<f64>() / n;
    let mean_y = mono_v.iter().sum::<f64>() / n;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    let mut sxy = 0.0;
    for k in 0..idx.len() {
        let dx = inv_depth[k] - mean_x;
        let dy = mono_v[k] - mean_y;
        sxx += dx * dx;
        syy += dy * dy;
        sxy += dx * dy;
    }
    let mut gradient = vec![0.0; total];
    // Scale-aware variance floor: constant inputs differ from their mean only
    // by accumulation rounding.
    let sxx_floor = n * (1e-12 * (mean_x.abs() + 1.0)).powi(2);
    let syy_floor = n * (1e-12 * (mean_y.abs() + 1.0)).powi(2);
    if sxx <= sxx_floor || syy <= syy_floor {
        log::warn!("depth loss degenerate: zero variance over {} valid pixels", idx.len());
        return Ok(DepthLoss {
            value: 1.0,
            gradient,
            degenerate: true,
        });
    }
    let denom = (sxx * syy).sqrt();
    let rho = sxy / denom;

    for k in 0..idx.len() {
        let dx = inv_depth[k] - mean_x;
        let dy = mono_v[k] - mean_y;
        // d rho / d x_k, then chained through x = 1/D.
        let drho = dy / denom - rho * dx / sxx;
        let depth = rendered_depth.values()[idx[k]];
        gradient[idx[k]] = drho / (depth * depth);
    }
    Ok(DepthLoss {
        value: 1.0 - rho,
        gradient,
        degenerate: false,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> ColorImage {
        ColorImage::from_fn(w, h, |_, _| {
            [
                rng.gen_range(0.02..0.98),
                rng.gen_range(0.02..0.98),
                rng.gen_range(0.02..0.98),
            ]
        })
    }

    /// Literal two-pass reference: build every statistics map separately,
    /// then combine with the textbook formula.
    fn reference_loss(a: &ColorImage, b: &ColorImage, lambda: f64) -> f64 {
        let (w, h) = (a.width(), a.height());
        let mut l1 = 0.0;
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    l1 += (a.at(x, y)[c] - b.at(x, y)[c]).abs();
                }
            }
        }
        l1 /= (w * h * 3) as f64;

        let win = gaussian_window();
        let mut ssim_sum = 0.0;
        let mut count = 0.0;
        for ch in 0..3 {
            let stat = |img: &ColorImage, f: &dyn Fn(f64, f64) -> f64, other: &ColorImage| {
                let mut out = vec![0.0; (w - 10) * (h - 10)];
                for wy in 0..h - 10 {
                    for wx in 0..w - 10 {
                        let mut acc = 0.0;
                        for j in 0..11 {
                            for i in 0..11 {
                                acc += win[i]
                                    * win[j]
                                    * f(img.at(wx + i, wy + j)[ch], other.at(wx + i, wy + j)[ch]);
                            }
                        }
                        out[wy * (w - 10) + wx] = acc;
                    }
                }
                out
            };
            let mu_a = stat(a, &|x, _| x, b);
            let mu_b = stat(b, &|x, _| x, a);
            let e_aa = stat(a, &|x, _| x * x, b);
            let e_bb = stat(b, &|x, _| x * x, a);
            let e_ab = stat(a, &|x, y| x * y, b);
            for k in 0..mu_a.len() {
                let va = e_aa[k] - mu_a[k] * mu_a[k];
                let vb = e_bb[k] - mu_b[k] * mu_b[k];
                let vab = e_ab[k] - mu_a[k] * mu_b[k];
                let s = ((2.0 * mu_a[k] * mu_b[k] + SSIM_C1) * (2.0 * vab + SSIM_C2))
                    / ((mu_a[k] * mu_a[k] + mu_b[k] * mu_b[k] + SSIM_C1) * (va + vb + SSIM_C2));
                ssim_sum += s;
                count += 1.0;
            }
        }
        (1.0 - lambda) * l1 + lambda * (1.0 - ssim_sum / count) / 2.0
    }

    #[test]
    fn identical_images_have_zero_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let img = random_image(&mut rng, 16, 16);
        let loss = loss_rgb(&img, &img, 0.2).unwrap();
        assert_eq!(loss.value, 0.0);
        // The structural term cancels only to rounding, not bitwise.
        assert!(loss
            .gradient
            .iter()
            .all(|g| g.iter().all(|v| v.abs() < 1e-12)));
    }

    #[test]
    fn black_vs_white_pure_l1_is_one() {
        let black = ColorImage::constant(8, 8, [0.0; 3]);
        let white = ColorImage::constant(8, 8, [1.0; 3]);
        let loss = loss_rgb(&black, &white, 0.0).unwrap();
        assert!((loss.value - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matches_literal_reference_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..3 {
            let a = random_image(&mut rng, 18, 14);
            let b = random_image(&mut rng, 18, 14);
            let lambda = 0.1;
            let fast = loss_rgb(&a, &b, lambda).unwrap().value;
            let reference = reference_loss(&a, &b, lambda);
            assert!(
                (fast - reference).abs() < 1e-8,
                "{fast} vs reference {reference}"
            );
        }
    }

    #[test]
    fn rgb_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let a = random_image(&mut rng, 16, 16);
        let b = random_image(&mut rng, 16, 16);
        let lambda = 0.35;
        let loss = loss_rgb(&a, &b, lambda).unwrap();
        let h = 1e-5;
        for y in (0..16).step_by(3) {
            for x in (0..16).step_by(3) {
                for c in 0..3 {
                    let mut plus = a.clone();
                    let mut px = plus.at(x, y);
                    px[c] += h;
                    plus.set(x, y, px);
                    let mut minus = a.clone();
                    let mut mx = minus.at(x, y);
                    mx[c] -= h;
                    minus.set(x, y, mx);
                    let fd = (loss_rgb(&plus, &b, lambda).unwrap().value
                        - loss_rgb(&minus, &b, lambda).unwrap().value)
                        / (2.0 * h);
                    let an = loss.gradient[y * 16 + x][c];
                    assert!(
                        (fd - an).abs() <= 1e-3 * fd.abs().max(an.abs()).max(1e-6),
                        "pixel ({x},{y},{c}): analytic {an:.6e} vs fd {fd:.6e}"
                    );
                }
            }
        }
    }

    #[test]
    fn nonnegative_and_zero_only_at_equality() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..5 {
            let a = random_image(&mut rng, 12, 12);
            let b = random_image(&mut rng, 12, 12);
            let v = loss_rgb(&a, &b, 0.0).unwrap().value;
            assert!(v > 0.0);
        }
    }

    fn depth_pair(w: usize, h: usize) -> (ScalarMap, ScalarMap, BinaryMask) {
        let depth = ScalarMap::from_fn(w, h, |x, y| 2.0 + 0.05 * x as f64 + 0.03 * y as f64);
        let mono = depth.map(|d| 1.0 / d);
        (depth, mono, BinaryMask::filled(w, h, true))
    }

    #[test]
    fn perfectly_correlated_depth_has_zero_loss() {
        let (depth, mono, valid) = depth_pair(12, 10);
        let loss = loss_depth(&depth, &mono, &valid).unwrap();
        assert!(loss.value.abs() < 1e-12);
    }

    #[test]
    fn affine_invariance_of_depth_loss() {
        let (depth, mono, valid) = depth_pair(12, 10);
        let base = loss_depth(&depth, &mono, &valid).unwrap().value;
        let transformed = mono.map(|m| 3.7 * m + 0.9);
        let moved = loss_depth(&depth, &transformed, &valid).unwrap().value;
        assert!((base - moved).abs() < 1e-10);
    }

    #[test]
    fn anticorrelated_depth_scores_two() {
        let (depth, mono, valid) = depth_pair(12, 10);
        let negated = mono.map(|m| -m);
        let loss = loss_depth(&depth, &negated, &valid).unwrap();
        assert!((loss.value - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_mono_is_degenerate_with_zero_gradient() {
        let (depth, _, valid) = depth_pair(8, 8);
        let mono = ScalarMap::constant(8, 8, 0.4);
        let loss = loss_depth(&depth, &mono, &valid).unwrap();
        assert!(loss.degenerate);
        assert_eq!(loss.value, 1.0);
        assert!(loss.gradient.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn depth_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(45);
        let depth = ScalarMap::from_fn(9, 7, |_, _| rng.gen_range(1.0..6.0));
        let mono = ScalarMap::from_fn(9, 7, |_, _| rng.gen_range(0.1..1.0));
        let valid = BinaryMask::from_fn(9, 7, |x, y| (x + y) % 4 != 0);
        let loss = loss_depth(&depth, &mono, &valid).unwrap();
        let h = 1e-6;
        for i in 0..depth.len() {
            let (x, y) = (i % 9, i / 9);
            let mut plus = depth.clone();
            plus.set(x, y, depth.at(x, y) + h);
            let mut minus = depth.clone();
            minus.set(x, y, depth.at(x, y) - h);
            let fd = (loss_depth(&plus, &mono, &valid).unwrap().value
                - loss_depth(&minus, &mono, &valid).unwrap().value)
                / (2.0 * h);
            let an = loss.gradient[i];
            if !valid.at(x, y) {
                assert_eq!(an, 0.0);
                continue;
            }
            assert!(
                (fd - an).abs() <= 1e-4 * fd.abs().max(an.abs()).max(1e-6),
                "pixel {i}: analytic {an:.6e} vs fd {fd:.6e}"
            );
        }
    }

    #[test]
    fn value_stays_in_zero_two_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(46);
        for _ in 0..20 {
            let depth = ScalarMap::from_fn(8, 8, |_, _| rng.gen_range(0.5..5.0));
            let mono = ScalarMap::from_fn(8, 8, |_, _| rng.gen_range(-1.0..1.0));
            let valid = BinaryMask::filled(8, 8, true);
            let v = loss_depth(&depth, &mono, &valid).unwrap().value;
            assert!((0.0..=2.0).contains(&v));
        }
    }
}
