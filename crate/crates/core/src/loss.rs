//! Training losses with analytic per-pixel gradients.
//!
//! The photometric loss is `0.8 * L1 + 0.2 * D-SSIM` with an 11x11 Gaussian
//! window (sigma 1.5) and the usual k1=0.01, k2=0.03 constants at dynamic
//! range 1. SSIM is evaluated over the valid region (full windows only) so
//! borders carry no padding bias. The normal-consistency loss compares the
//! rendered normal map against normals finite-differenced from back-projected
//! depth; the monocular loss compares against an externally supplied map.

use crate::camera::CameraModel;
use crate::imageio::Image;
use crate::math::{vec3, Vec3};
use crate::CoreError;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, wi) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *wi = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *wi;
    }
    for wi in &mut w {
        *wi /= sum;
    }
    w
}

/// Separable valid convolution of one channel: output is
/// (w - 10) x (h - 10), window applied along both axes.
fn conv_valid(input: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    // horizontal pass
    let mut tmp = vec![0.0; vw * h];
    for y in 0..h {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * input[y * w + x + k];
            }
            tmp[y * vw + x] = acc;
        }
    }
    // vertical pass
    let mut out = vec![0.0; vw * vh];
    for y in 0..vh {
        for x in 0..vw {
            let mut acc = 0.0;
            for (k, wk) in win.iter().enumerate() {
                acc += wk * tmp[(y + k) * vw + x];
            }
            out[y * vw + x] = acc;
        }
    }
    out
}

/// Scatter a valid-region field back onto the full image through the window
/// (the adjoint of [`conv_valid`]; the window is symmetric).
fn conv_valid_adjoint(field: &[f64], w: usize, h: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    // vertical adjoint: spread rows
    let mut tmp = vec![0.0; vw * h];
    for y in 0..vh {
        for x in 0..vw {
            let f = field[y * vw + x];
            if f == 0.0 {
                continue;
            }
            for (k, wk) in win.iter().enumerate() {
                tmp[(y + k) * vw + x] += wk * f;
            }
        }
    }
    // horizontal adjoint
    let mut out = vec![0.0; w * h];
    for y in 0..h {
        for x in 0..vw {
            let f = tmp[y * vw + x];
            if f == 0.0 {
                continue;
            }
            for (k, wk) in win.iter().enumerate() {
                out[y * w + x + k] += wk * f;
            }
        }
    }
    out
}

/// Mean SSIM over the valid region of two images plus its gradient with
/// respect to the first image. Images must be at least the window size.
pub fn ssim_with_grad(render: &Image, gt: &Image) -> Result<(f64, Image), CoreError> {
    if !render.same_shape(gt) {
        return Err(CoreError::DimensionMismatch(
            render.width,
            render.height,
            gt.width,
            gt.height,
        ));
    }
    if render.width < SSIM_WINDOW || render.height < SSIM_WINDOW {
        return Err(CoreError::Invalid(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {}x{}",
            render.width, render.height
        )));
    }
    let win = gaussian_window();
    let (w, h, ch) = (render.width, render.height, render.channels);
    let vw = w - SSIM_WINDOW + 1;
    let vh = h - SSIM_WINDOW + 1;
    let n_valid = vw * vh * ch;
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;

    let mut mean_ssim = 0.0;
    let mut grad = Image::zeros(w, h, ch);
    for c in 0..ch {
        let x: Vec<f64> = (0..w * h).map(|i| render.data[i * ch + c]).collect();
        let y: Vec<f64> = (0..w * h).map(|i| gt.data[i * ch + c]).collect();
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(y.iter()).map(|(a, b)| a * b).collect();
        let mu_x = conv_valid(&x, w, h, &win);
        let mu_y = conv_valid(&y, w, h, &win);
        let sxx = conv_valid(&xx, w, h, &win);
        let syy = conv_valid(&yy, w, h, &win);
        let sxy = conv_valid(&xy, w, h, &win);

        // fields of dS/d(mu_x), dS/d(sxx), dS/d(sxy) at each valid pixel
        let mut f_mu = vec![0.0; vw * vh];
        let mut f_sxx = vec![0.0; vw * vh];
        let mut f_sxy = vec![0.0; vw * vh];
        for i in 0..vw * vh {
            let (m, my) = (mu_x[i], mu_y[i]);
            let var_x = sxx[i] - m * m;
            let var_y = syy[i] - my * my;
            let cov = sxy[i] - m * my;
            let a1 = 2.0 * m * my + c1;
            let a2 = 2.0 * cov + c2;
            let b1 = m * m + my * my + c1;
            let b2 = var_x + var_y + c2;
            let s = (a1 * a2) / (b1 * b2);
            mean_ssim += s;
            // independent variables are (m, sxx, sxy)
            f_mu[i] = (2.0 * my * (a2 - a1)) / (b1 * b2) - 2.0 * m * s * (1.0 / b1 - 1.0 / b2);
            f_sxx[i] = -s / b2;
            f_sxy[i] = 2.0 * a1 / (b1 * b2);
        }
        let g_mu = conv_valid_adjoint(&f_mu, w, h, &win);
        let g_sxx = conv_valid_adjoint(&f_sxx, w, h, &win);
        let g_sxy = conv_valid_adjoint(&f_sxy, w, h, &win);
        for i in 0..w * h {
            grad.data[i * ch + c] =
                (g_mu[i] + 2.0 * x[i] * g_sxx[i] + y[i] * g_sxy[i]) / n_valid as f64;
        }
    }
    Ok((mean_ssim / n_valid as f64, grad))
}

/// Mean SSIM only (no gradient).
pub fn ssim_mean(a: &Image, b: &Image) -> Result<f64, CoreError> {
    ssim_with_grad(a, b).map(|(s, _)| s)
}

/// Photometric loss split into its components, plus the per-pixel gradient
/// with respect to the render.
#[derive(Clone, Debug)]
pub struct RgbLoss {
    pub total: f64,
    pub l1: f64,
    pub dssim: f64,
    pub grad: Image,
}

/// `w_l1 * mean|render - gt| + w_dssim * (1 - SSIM) / 2`.
pub fn loss_rgb(render: &Image, gt: &Image, w_l1: f64, w_dssim: f64) -> Result<RgbLoss, CoreError> {
    if !render.same_shape(gt) {
        return Err(CoreError::DimensionMismatch(
            render.width,
            render.height,
            gt.width,
            gt.height,
        ));
    }
    let n = render.data.len() as f64;
    let mut l1 = 0.0;
    let mut grad = Image::zeros(render.width, render.height, render.channels);
    for (i, ((r, g), gd)) in render
        .data
        .iter()
        .zip(gt.data.iter())
        .zip(grad.data.iter_mut())
        .enumerate()
    {
        let _ = i;
        let d = r - g;
        l1 += d.abs();
        // signum(0.0) is 1.0 in Rust; an exact tie carries no L1 gradient
        let sign = if d > 0.0 {
            1.0
        } else if d < 0.0 {
            -1.0
        } else {
            0.0
        };
        *gd = w_l1 * sign / n;
    }
    l1 /= n;
    let (ssim, ssim_grad) = ssim_with_grad(render, gt)?;
    let dssim = (1.0 - ssim) / 2.0;
    for (gd, sg) in grad.data.iter_mut().zip(ssim_grad.data.iter()) {
        *gd += w_dssim * (-0.5) * sg;
    }
    Ok(RgbLoss {
        total: w_l1 * l1 + w_dssim * dssim,
        l1,
        dssim,
        grad,
    })
}

/// Output of the two normal losses.
#[derive(Clone, Debug)]
pub struct NormalLoss {
    pub loss: f64,
    /// dL/d(unit normal map).
    pub d_normal: Vec<Vec3>,
    /// dL/d(depth map); zero for the monocular loss.
    pub d_depth: Vec<f64>,
    /// Number of pixels that entered the mean.
    pub count: usize,
}

/// Normal consistency: `mean(1 - n . N_d)` where `N_d` is the normalized
/// cross product of central differences of back-projected depth. `valid`
/// marks pixels with enough coverage; a pixel contributes when it and its
/// four neighbors are valid and off the border. `N_d` is oriented camera-
/// facing so agreement means loss zero.
pub fn loss_normal_consistency(
    normal_map: &[Vec3],
    depth_map: &[f64],
    valid: &[bool],
    camera: &CameraModel,
) -> NormalLoss {
    let w = camera.width;
    let h = camera.height;
    debug_assert_eq!(normal_map.len(), w * h);
    let rays = camera.rays();
    let origin = camera.center();
    let point = |i: usize| origin + rays[i].dir * depth_map[i];

    // first pass: count contributing pixels
    let mut terms: Vec<usize> = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let i = y * w + x;
            if valid[i] && valid[i - 1] && valid[i + 1] && valid[i - w] && valid[i + w] {
                terms.push(i);
            }
        }
    }
    let count = terms.len();
    let mut out = NormalLoss {
        loss: 0.0,
        d_normal: vec![Vec3::ZERO; w * h],
        d_depth: vec![0.0; w * h],
        count,
    };
    if count == 0 {
        return out;
    }
    let inv_count = 1.0 / count as f64;
    for &i in &terms {
        let du = point(i + 1) - point(i - 1);
        let dv = point(i + w) - point(i - w);
        let c = du.cross(dv);
        let len = c.norm();
        if len < 1e-12 {
            continue;
        }
        let c_hat = c / len;
        let flip = if c_hat.dot(rays[i].dir) > 0.0 { -1.0 } else { 1.0 };
        let n_d = c_hat * flip;
        let n = normal_map[i];
        out.loss += (1.0 - n.dot(n_d)) * inv_count;

        out.d_normal[i] += n_d * (-inv_count);
        // back through orientation, normalization, cross product, points
        let d_chat = n * (-inv_count * flip);
        let d_c = (d_chat - c_hat * c_hat.dot(d_chat)) / len;
        let d_du = dv.cross(d_c);
        let d_dv = d_c.cross(du);
        out.d_depth[i + 1] += d_du.dot(rays[i + 1].dir);
        out.d_depth[i - 1] -= d_du.dot(rays[i - 1].dir);
        out.d_depth[i + w] += d_dv.dot(rays[i + w].dir);
        out.d_depth[i - w] -= d_dv.dot(rays[i - w].dir);
    }
    out
}

/// Monocular supervision: `mean(1 - n . N_m)` over pixels that are valid and
/// carry a meaningful monocular normal (|N_m| > 0.5).
pub fn loss_mono_normal(normal_map: &[Vec3], mono_map: &[Vec3], valid: &[bool]) -> NormalLoss {
    debug_assert_eq!(normal_map.len(), mono_map.len());
    let mut terms: Vec<usize> = Vec::new();
    for i in 0..normal_map.len() {
        if valid[i] && mono_map[i].norm() > 0.5 {
            terms.push(i);
        }
    }
    let count = terms.len();
    let mut out = NormalLoss {
        loss: 0.0,
        d_normal: vec![Vec3::ZERO; normal_map.len()],
        d_depth: vec![0.0; normal_map.len()],
        count,
    };
    if count == 0 {
        return out;
    }
    let inv_count = 1.0 / count as f64;
    for &i in &terms {
        out.loss += (1.0 - normal_map[i].dot(mono_map[i])) * inv_count;
        out.d_normal[i] += mono_map[i] * (-inv_count);
    }
    out
}
