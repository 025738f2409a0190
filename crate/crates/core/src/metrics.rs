//! Perceptually uniform HDR quality metrics.
//!
//! Linear radiance is display-referred by scaling both images so the
//! reference's peak luminance maps to `peak_luminance` cd/m^2 (default 1000),
//! clamped to [0.005, 10000], then passed through the PU21 transform
//! (banding-glare calibration). PSNR, SSIM, and VSI are computed on the
//! encoded values, so SDR-era metrics operate in a range where equal steps
//! are roughly equally visible.

use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::imgio::RadianceImage;

#[derive(Debug, thiserror::Error)]
pub enum MetricError {
    #[error("images are {a:?} and {b:?}, expected equal dimensions")]
    DimensionMismatch {
        a: (usize, usize),
        b: (usize, usize),
    },
    #[error("image {0}x{1} is smaller than the {2}x{2} analysis window")]
    ImageTooSmall(usize, usize, usize),
    #[error("peak luminance {0} must be positive")]
    BadPeak(f64),
}

/// Lower clamp of the PU21 domain, cd/m^2.
pub const PU21_MIN_LUMINANCE: f64 = 0.005;
/// Upper clamp of the PU21 domain, cd/m^2.
pub const PU21_MAX_LUMINANCE: f64 = 10000.0;
/// pu-PSNR reported for identical images (keeps CSV output finite).
pub const PSNR_CAP_DB: f64 = 100.0;

// Banding-glare fit of the PU21 transform.
const PU21_P: [f64; 7] = [
    0.353487901,
    0.3734658629,
    8.277049286e-05,
    0.9062562627,
    0.09150303166,
    0.9099517204,
    596.3148142,
];

/// Encode absolute luminance (cd/m^2) into perceptually uniform units.
///
/// Inputs are clamped to [0.005, 10000]; the output is ~0 at the lower clamp
/// and ~256 at 100 cd/m^2, so SDR metric constants keep their meaning.
pub fn pu21_encode(y: f64) -> f64 {
    let y = y.clamp(PU21_MIN_LUMINANCE, PU21_MAX_LUMINANCE);
    let yp = y.powf(PU21_P[3]);
    let v = PU21_P[6]
        * (((PU21_P[0] + PU21_P[1] * yp) / (1.0 + PU21_P[2] * yp)).powf(PU21_P[4]) - PU21_P[5]);
    v.max(0.0)
}

/// Invert [`pu21_encode`] by bisection (the transform is strictly increasing
/// on the clamped domain). Used to construct calibrated distortions.
pub fn pu21_decode(v: f64) -> f64 {
    let (mut lo, mut hi) = (PU21_MIN_LUMINANCE, PU21_MAX_LUMINANCE);
    if v <= pu21_encode(lo) {
        return lo;
    }
    if v >= pu21_encode(hi) {
        return hi;
    }
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if pu21_encode(mid) < v {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Usable PU range for a display peak: `V(peak) - V(0.005)`.
pub fn pu21_range(peak_luminance: f64) -> f64 {
    pu21_encode(peak_luminance) - pu21_encode(PU21_MIN_LUMINANCE)
}

/// One metric evaluation with everything needed to reproduce it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub pu_psnr: f64,
    pub pu_ssim: f64,
    pub pu_vsi: f64,
    pub pixel_count: usize,
    /// Fraction of reference pixels within 1% of the display peak.
    pub saturated_fraction: f64,
    /// Display mapping used: reference max luminance -> this many cd/m^2.
    pub peak_luminance: f64,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str = "scene_id,exposure_class,pu_psnr,pu_ssim,pu_vsi";

    pub fn csv_row(&self, scene_id: &str, exposure_class: &str) -> String {
        format!(
            "{scene_id},{exposure_class},{:.6},{:.6},{:.6}",
            self.pu_psnr, self.pu_ssim, self.pu_vsi
        )
    }
}

fn check_pair(test: &RadianceImage, reference: &RadianceImage) -> Result<(), MetricError> {
    if (test.width, test.height) != (reference.width, reference.height) {
        return Err(MetricError::DimensionMismatch {
            a: (test.width, test.height),
            b: (reference.width, reference.height),
        });
    }
    Ok(())
}

/// Scale factor mapping the reference's max luminance to the display peak.
fn display_scale(reference: &RadianceImage, peak_luminance: f64) -> Result<f64, MetricError> {
    if !(peak_luminance > 0.0) {
        return Err(MetricError::BadPeak(peak_luminance));
    }
    let max_y = reference
        .luminance()
        .into_iter()
        .fold(0.0f32, f32::max) as f64;
    if max_y <= 0.0 {
        // All-black reference: any positive scale gives the same clamped codes.
        return Ok(1.0);
    }
    Ok(peak_luminance / max_y)
}

fn encode_channels(img: &RadianceImage, scale: f64) -> Vec<f64> {
    img.data
        .iter()
        .map(|v| pu21_encode(*v as f64 * scale))
        .collect()
}

fn encode_luminance(img: &RadianceImage, scale: f64) -> Vec<f64> {
    img.luminance()
        .into_iter()
        .map(|y| pu21_encode(y as f64 * scale))
        .collect()
}

/// Peak signal-to-noise ratio over PU-encoded RGB channels, in dB.
/// Identical images return the 100 dB cap.
pub fn pu_psnr(
    test: &RadianceImage,
    reference: &RadianceImage,
    peak_luminance: f64,
) -> Result<f64, MetricError> {
    check_pair(test, reference)?;
    let scale = display_scale(reference, peak_luminance)?;
    let a = encode_channels(test, scale);
    let b = encode_channels(reference, scale);
    let mse = a
        .iter()
        .zip(&b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.len() as f64;
    if mse <= 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    let peak = pu21_range(peak_luminance);
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (x as f64 - c).powi(2) + (y as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Structural similarity on PU-encoded luminance: 11x11 Gaussian window
/// (sigma 1.5), K1 = 0.01, K2 = 0.03, dynamic range = the PU range of the
/// display peak; mean over all fully-inside windows.
pub fn pu_ssim(
    test: &RadianceImage,
    reference: &RadianceImage,
    peak_luminance: f64,
) -> Result<f64, MetricError> {
    check_pair(test, reference)?;
    let (width, height) = (test.width, test.height);
    if width < SSIM_WINDOW || height < SSIM_WINDOW {
        return Err(MetricError::ImageTooSmall(width, height, SSIM_WINDOW));
    }
    let scale = display_scale(reference, peak_luminance)?;
    let a = encode_luminance(test, scale);
    let b = encode_luminance(reference, scale);

    let l = pu21_range(peak_luminance);
    let c1 = (SSIM_K1 * l).powi(2);
    let c2 = (SSIM_K2 * l).powi(2);
    let window = gaussian_window();

    let mut total = 0.0;
    let mut count = 0usize;
    for wy in 0..=height - SSIM_WINDOW {
        for wx in 0..=width - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            let mut aa = 0.0;
            let mut bb = 0.0;
            let mut ab = 0.0;
            for ky in 0..SSIM_WINDOW {
                for kx in 0..SSIM_WINDOW {
                    let w = window[ky * SSIM_WINDOW + kx];
                    let va = a[(wy + ky) * width + wx + kx];
                    let vb = b[(wy + ky) * width + wx + kx];
                    mu_a += w * va;
                    mu_b += w * vb;
                    aa += w * va * va;
                    bb += w * vb * vb;
                    ab += w * va * vb;
                }
            }
            let var_a = (aa - mu_a * mu_a).max(0.0);
            let var_b = (bb - mu_b * mu_b).max(0.0);
            let cov = ab - mu_a * mu_b;
            let s = ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            total += s;
            count += 1;
        }
    }
    Ok((total / count as f64).clamp(0.0, 1.0))
}

// ---------------------------------------------------------------------------
// VSI: saliency-weighted gradient and chrominance similarity
// ---------------------------------------------------------------------------

const VSI_C1: f64 = 1.27; // visual saliency term
const VSI_C2: f64 = 386.0; // gradient term
const VSI_C3: f64 = 130.0; // chrominance term
const VSI_ALPHA: f64 = 0.40;
const VSI_LAMBDA: f64 = 0.020;
const SDSP_SIGMA_F: f64 = 1.34;
const SDSP_OMEGA0: f64 = 0.0210;
const SDSP_SIGMA_D: f64 = 145.0;
const SDSP_SIGMA_C: f64 = 0.001;
const SDSP_SIZE: usize = 256;

struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    fn new(width: usize, height: usize) -> Self {
        Plane {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }
}

/// Visual saliency index on PU-encoded channels.
///
/// Saliency comes from the simple-priors detector (log-Gabor frequency
/// prior, center location prior, warm-color prior); structure from Scharr
/// gradient magnitude; color from two opponent chrominance channels; the
/// similarity map is pooled weighted by the max of the two saliency maps.
pub fn pu_vsi(
    test: &RadianceImage,
    reference: &RadianceImage,
    peak_luminance: f64,
) -> Result<f64, MetricError> {
    check_pair(test, reference)?;
    let scale = display_scale(reference, peak_luminance)?;
    // Rescale PU output to the SDR-like range the metric constants assume.
    let to_sdr = 255.0 / pu21_range(peak_luminance).max(1e-9);
    let encode = |img: &RadianceImage| -> Vec<f64> {
        img.data
            .iter()
            .map(|v| pu21_encode(*v as f64 * scale) * to_sdr)
            .collect()
    };
    let rgb1 = encode(test);
    let rgb2 = encode(reference);
    let (width, height) = (test.width, test.height);

    let saliency1 = sdsp_saliency(&rgb1, width, height);
    let saliency2 = sdsp_saliency(&rgb2, width, height);

    // Opponent color space: luminance L and chrominance M, N.
    let lmn = |rgb: &[f64]| -> (Plane, Plane, Plane) {
        let mut l = Plane::new(width, height);
        let mut m = Plane::new(width, height);
        let mut n = Plane::new(width, height);
        for (i, px) in rgb.chunks_exact(3).enumerate() {
            l.data[i] = 0.06 * px[0] + 0.63 * px[1] + 0.27 * px[2];
            m.data[i] = 0.30 * px[0] + 0.04 * px[1] - 0.35 * px[2];
            n.data[i] = 0.34 * px[0] - 0.60 * px[1] + 0.17 * px[2];
        }
        (l, m, n)
    };
    let (l1, m1, n1) = lmn(&rgb1);
    let (l2, m2, n2) = lmn(&rgb2);

    let f = ((width.min(height) as f64 / 256.0).round() as usize).max(1);
    let l1 = downsample(&l1, f);
    let l2 = downsample(&l2, f);
    let m1 = downsample(&m1, f);
    let m2 = downsample(&m2, f);
    let n1 = downsample(&n1, f);
    let n2 = downsample(&n2, f);
    let vs1 = downsample(&saliency1, f);
    let vs2 = downsample(&saliency2, f);

    let g1 = scharr_magnitude(&l1);
    let g2 = scharr_magnitude(&l2);

    let mut num = 0.0;
    let mut den = 0.0;
    let mut plain_sum = 0.0;
    for i in 0..l1.data.len() {
        let s_vs = (2.0 * vs1.data[i] * vs2.data[i] + VSI_C1)
            / (vs1.data[i] * vs1.data[i] + vs2.data[i] * vs2.data[i] + VSI_C1);
        let s_g = (2.0 * g1.data[i] * g2.data[i] + VSI_C2)
            / (g1.data[i] * g1.data[i] + g2.data[i] * g2.data[i] + VSI_C2);
        let s_m = (2.0 * m1.data[i] * m2.data[i] + VSI_C3)
            / (m1.data[i] * m1.data[i] + m2.data[i] * m2.data[i] + VSI_C3);
        let s_n = (2.0 * n1.data[i] * n2.data[i] + VSI_C3)
            / (n1.data[i] * n1.data[i] + n2.data[i] * n2.data[i] + VSI_C3);
        let s_c = s_m * s_n;
        // Principal-branch real part of s_c^lambda for negative bases.
        let s_c_pow = if s_c >= 0.0 {
            s_c.powf(VSI_LAMBDA)
        } else {
            (-s_c).powf(VSI_LAMBDA) * (VSI_LAMBDA * std::f64::consts::PI).cos()
        };
        let sim = s_g.powf(VSI_ALPHA) * s_vs * s_c_pow;
        let w = vs1.data[i].max(vs2.data[i]);
        num += sim * w;
        den += w;
        plain_sum += sim;
    }
    let vsi = if den > 1e-12 {
        num / den
    } else {
        // Degenerate saliency (e.g. constant frames): unweighted pooling.
        plain_sum / l1.data.len() as f64
    };
    Ok(vsi.clamp(0.0, 1.0))
}

/// Block-average downsample by factor `f` (both images see the same grid).
fn downsample(p: &Plane, f: usize) -> Plane {
    if f <= 1 {
        return Plane {
            width: p.width,
            height: p.height,
            data: p.data.clone(),
        };
    }
    let ow = p.width.div_ceil(f);
    let oh = p.height.div_ceil(f);
    let mut out = Plane::new(ow, oh);
    for oy in 0..oh {
        for ox in 0..ow {
            let mut sum = 0.0;
            let mut n = 0usize;
            for y in oy * f..((oy + 1) * f).min(p.height) {
                for x in ox * f..((ox + 1) * f).min(p.width) {
                    sum += p.data[y * p.width + x];
                    n += 1;
                }
            }
            out.data[oy * ow + ox] = sum / n as f64;
        }
    }
    out
}

fn scharr_magnitude(p: &Plane) -> Plane {
    const KX: [f64; 9] = [3.0, 0.0, -3.0, 10.0, 0.0, -10.0, 3.0, 0.0, -3.0];
    const KY: [f64; 9] = [3.0, 10.0, 3.0, 0.0, 0.0, 0.0, -3.0, -10.0, -3.0];
    let mut out = Plane::new(p.width, p.height);
    let get = |x: isize, y: isize| -> f64 {
        let x = x.clamp(0, p.width as isize - 1) as usize;
        let y = y.clamp(0, p.height as isize - 1) as usize;
        p.data[y * p.width + x]
    };
    for y in 0..p.height as isize {
        for x in 0..p.width as isize {
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ky in -1..=1isize {
                for kx in -1..=1isize {
                    let k = ((ky + 1) * 3 + kx + 1) as usize;
                    let v = get(x + kx, y + ky);
                    gx += KX[k] * v;
                    gy += KY[k] * v;
                }
            }
            gx /= 16.0;
            gy /= 16.0;
            out.data[(y as usize) * p.width + x as usize] = (gx * gx + gy * gy).sqrt();
        }
    }
    out
}

/// Simple-priors saliency on a 256x256 working grid, resized back and
/// normalized to [0,1].
fn sdsp_saliency(rgb: &[f64], width: usize, height: usize) -> Plane {
    let small = resize_rgb(rgb, width, height, SDSP_SIZE, SDSP_SIZE);
    let (l, a, b) = rgb_to_lab(&small, SDSP_SIZE, SDSP_SIZE);

    // Frequency prior: band-pass each Lab channel with a log-Gabor filter.
    let lg = log_gabor(SDSP_SIZE, SDSP_SIZE);
    let fl = bandpass(&l, &lg);
    let fa = bandpass(&a, &lg);
    let fb = bandpass(&b, &lg);
    let mut sf = Plane::new(SDSP_SIZE, SDSP_SIZE);
    for i in 0..sf.data.len() {
        sf.data[i] = (fl[i] * fl[i] + fa[i] * fa[i] + fb[i] * fb[i]).sqrt();
    }

    // Location prior: Gaussian falloff from the center.
    let cx = (SDSP_SIZE as f64 / 2.0).round();
    let cy = (SDSP_SIZE as f64 / 2.0).round();
    // Color prior: warm (high a/b) regions draw attention.
    let (min_a, max_a) = min_max(&a);
    let (min_b, max_b) = min_max(&b);
    let span_a = (max_a - min_a).max(1e-12);
    let span_b = (max_b - min_b).max(1e-12);

    let mut vs = Plane::new(SDSP_SIZE, SDSP_SIZE);
    for y in 0..SDSP_SIZE {
        for x in 0..SDSP_SIZE {
            let i = y * SDSP_SIZE + x;
            let d2 = ((x + 1) as f64 - cx).powi(2) + ((y + 1) as f64 - cy).powi(2);
            let sd = (-d2 / (SDSP_SIGMA_D * SDSP_SIGMA_D)).exp();
            let na = (a[i] - min_a) / span_a;
            let nb = (b[i] - min_b) / span_b;
            let sc = 1.0 - (-(na * na + nb * nb) / (SDSP_SIGMA_C * SDSP_SIGMA_C)).exp();
            vs.data[i] = sf.data[i] * sd * sc;
        }
    }

    let full = resize_plane(&vs, width, height);
    let (lo, hi) = min_max(&full.data);
    let span = hi - lo;
    let mut out = full;
    if span > 1e-12 {
        for v in &mut out.data {
            *v = (*v - lo) / span;
        }
    } else {
        for v in &mut out.data {
            *v = 0.0;
        }
    }
    out
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |acc, x| {
        (acc.0.min(*x), acc.1.max(*x))
    })
}

fn resize_rgb(
    rgb: &[f64],
    width: usize,
    height: usize,
    ow: usize,
    oh: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; ow * oh * 3];
    for y in 0..oh {
        for x in 0..ow {
            let sx = (x as f64 + 0.5) * width as f64 / ow as f64 - 0.5;
            let sy = (y as f64 + 0.5) * height as f64 / oh as f64 - 0.5;
            let x0 = sx.floor().clamp(0.0, (width - 1) as f64) as usize;
            let y0 = sy.floor().clamp(0.0, (height - 1) as f64) as usize;
            let x1 = (x0 + 1).min(width - 1);
            let y1 = (y0 + 1).min(height - 1);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            let fy = (sy - y0 as f64).clamp(0.0, 1.0);
            for ch in 0..3 {
                let at = |xx: usize, yy: usize| rgb[(yy * width + xx) * 3 + ch];
                let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                out[(y * ow + x) * 3 + ch] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    out
}

fn resize_plane(p: &Plane, ow: usize, oh: usize) -> Plane {
    let mut out = Plane::new(ow, oh);
    for y in 0..oh {
        for x in 0..ow {
            let sx = (x as f64 + 0.5) * p.width as f64 / ow as f64 - 0.5;
            let sy = (y as f64 + 0.5) * p.height as f64 / oh as f64 - 0.5;
            let x0 = sx.floor().clamp(0.0, (p.width - 1) as f64) as usize;
            let y0 = sy.floor().clamp(0.0, (p.height - 1) as f64) as usize;
            let x1 = (x0 + 1).min(p.width - 1);
            let y1 = (y0 + 1).min(p.height - 1);
            let fx = (sx - x0 as f64).clamp(0.0, 1.0);
            let fy = (sy - y0 as f64).clamp(0.0, 1.0);
            let at = |xx: usize, yy: usize| p.data[yy * p.width + xx];
            let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
            let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
            out.data[y * ow + x] = top * (1.0 - fy) + bot * fy;
        }
    }
    out
}

/// sRGB-style conversion of [0,255]-ranged channels to CIELAB (D65).
fn rgb_to_lab(rgb: &[f64], width: usize, height: usize) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let n = width * height;
    let mut l = vec![0.0; n];
    let mut a = vec![0.0; n];
    let mut b = vec![0.0; n];
    let linearize = |c: f64| -> f64 {
        let c = (c / 255.0).max(0.0);
        if c <= 0.03928 {
            c / 12.92
        } else {
            ((c + 0.055) / 1.055).powf(2.4)
        }
    };
    let f = |t: f64| -> f64 {
        if t > 0.008856 {
            t.cbrt()
        } else {
            7.787 * t + 16.0 / 116.0
        }
    };
    for (i, px) in rgb.chunks_exact(3).enumerate() {
        let (r, g, bb) = (linearize(px[0]), linearize(px[1]), linearize(px[2]));
        let x = (0.412453 * r + 0.357580 * g + 0.180423 * bb) / 0.950456;
        let y = 0.212671 * r + 0.715160 * g + 0.072169 * bb;
        let z = (0.019334 * r + 0.119193 * g + 0.950227 * bb) / 1.088754;
        let (fx, fy, fz) = (f(x), f(y), f(z));
        l[i] = if y > 0.008856 {
            116.0 * y.cbrt() - 16.0
        } else {
            903.3 * y
        };
        a[i] = 500.0 * (fx - fy);
        b[i] = 200.0 * (fy - fz);
    }
    (l, a, b)
}

/// Zero-phase log-Gabor transfer function in FFT index layout.
fn log_gabor(width: usize, height: usize) -> Vec<f64> {
    let mut lg = vec![0.0; width * height];
    let denom = 2.0 * SDSP_SIGMA_F.ln().powi(2);
    for ky in 0..height {
        for kx in 0..width {
            let fx = if kx <= width / 2 {
                kx as f64
            } else {
                kx as f64 - width as f64
            } / width as f64;
            let fy = if ky <= height / 2 {
                ky as f64
            } else {
                ky as f64 - height as f64
            } / height as f64;
            let r = (fx * fx + fy * fy).sqrt();
            lg[ky * width + kx] = if r <= 0.0 {
                0.0
            } else {
                (-((r / SDSP_OMEGA0).ln().powi(2)) / denom).exp()
            };
        }
    }
    lg
}

/// real(ifft2(fft2(plane) .* transfer)) with a zero-phase transfer function.
fn bandpass(plane: &[f64], transfer: &[f64]) -> Vec<f64> {
    let size = SDSP_SIZE;
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(size);
    let inv = planner.plan_fft_inverse(size);

    let mut buf: Vec<Complex64> = plane.iter().map(|v| Complex64::new(*v, 0.0)).collect();
    // Rows.
    for row in buf.chunks_exact_mut(size) {
        fwd.process(row);
    }
    // Columns.
    let mut col = vec![Complex64::default(); size];
    for x in 0..size {
        for y in 0..size {
            col[y] = buf[y * size + x];
        }
        fwd.process(&mut col);
        for y in 0..size {
            buf[y * size + x] = col[y];
        }
    }
    for (v, t) in buf.iter_mut().zip(transfer) {
        *v *= *t;
    }
    for row in buf.chunks_exact_mut(size) {
        inv.process(row);
    }
    for x in 0..size {
        for y in 0..size {
            col[y] = buf[y * size + x];
        }
        inv.process(&mut col);
        for y in 0..size {
            buf[y * size + x] = col[y];
        }
    }
    let norm = 1.0 / (size * size) as f64;
    buf.iter().map(|c| c.re * norm).collect()
}

/// Full report: all three metrics plus bookkeeping fields.
pub fn evaluate(
    test: &RadianceImage,
    reference: &RadianceImage,
    peak_luminance: f64,
) -> Result<MetricReport, MetricError> {
    let pu_psnr = pu_psnr(test, reference, peak_luminance)?;
    let pu_ssim = pu_ssim(test, reference, peak_luminance)?;
    let pu_vsi = pu_vsi(test, reference, peak_luminance)?;
    let scale = display_scale(reference, peak_luminance)?;
    let lum = reference.luminance();
    let saturated = lum
        .iter()
        .filter(|y| **y as f64 * scale >= 0.99 * peak_luminance)
        .count();
    Ok(MetricReport {
        pu_psnr,
        pu_ssim,
        pu_vsi,
        pixel_count: lum.len(),
        saturated_fraction: saturated as f64 / lum.len() as f64,
        peak_luminance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Frozen oracle values computed from the published banding-glare
    /// coefficients before the build.
    const PU21_ORACLE: [(f64, f64); 5] = [
        (0.005, 0.0000000005),
        (1.0, 36.5439111394),
        (10.0, 123.6474835538),
        (100.0, 256.3838973127),
        (1000.0, 420.0969213492),
    ];

    #[test]
    fn pu21_matches_reference_oracle() {
        for (y, want) in PU21_ORACLE {
            let got = pu21_encode(y);
            let tol = (want * 0.005).max(0.5);
            assert!((got - want).abs() <= tol, "V({y}) = {got}, want {want}");
        }
        assert!(pu21_encode(0.005).abs() < 0.5);
        assert!((pu21_encode(100.0) - 256.0).abs() < 1.0);
    }

    #[test]
    fn pu21_monotone_and_clamped() {
        assert!(pu21_encode(1.0) < pu21_encode(10.0));
        assert!(pu21_encode(10.0) < pu21_encode(100.0));
        assert_eq!(pu21_encode(1e-9), pu21_encode(0.005));
        assert_eq!(pu21_encode(1e9), pu21_encode(10000.0));
    }

    #[test]
    fn pu21_decode_inverts() {
        for y in [0.01f64, 0.5, 3.0, 80.0, 900.0] {
            let back = pu21_decode(pu21_encode(y));
            assert!((back - y).abs() / y < 1e-6, "{y} -> {back}");
        }
    }

    fn test_image(width: usize, height: usize, seed: u64) -> RadianceImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..width * height * 3)
            .map(|_| 0.01 + rng.gen::<f32>().powi(2) * 4.0)
            .collect();
        RadianceImage::new(width, height, data).unwrap()
    }

    #[test]
    fn identity_metrics() {
        let img = test_image(24, 24, 1);
        assert_eq!(pu_psnr(&img, &img, 1000.0).unwrap(), PSNR_CAP_DB);
        assert!((pu_ssim(&img, &img, 1000.0).unwrap() - 1.0).abs() < 1e-12);
        assert!((pu_vsi(&img, &img, 1000.0).unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn psnr_constant_pu_offset_is_40db() {
        // Distort in PU space by 1% of the range, decode back to radiance.
        let img = test_image(16, 16, 2);
        let peak = 1000.0;
        let scale = display_scale(&img, peak).unwrap();
        let offset = 0.01 * pu21_range(peak);
        let distorted_data: Vec<f32> = img
            .data
            .iter()
            .map(|v| {
                let pu = pu21_encode(*v as f64 * scale) + offset;
                (pu21_decode(pu) / scale) as f32
            })
            .collect();
        let distorted = RadianceImage::new(16, 16, distorted_data).unwrap();
        let psnr = pu_psnr(&distorted, &img, peak).unwrap();
        assert!((psnr - 40.0).abs() < 0.1, "psnr {psnr}");
    }

    #[test]
    fn metrics_invariant_to_shared_prescale() {
        // Powers of two scale f32 samples exactly; the shared normalization
        // must then reproduce identical encoded values.
        let a = test_image(20, 20, 3);
        let mut b = test_image(20, 20, 4);
        for (x, y) in b.data.iter_mut().zip(&a.data) {
            *x = 0.7 * *x + 0.3 * *y;
        }
        for k in [4.0f32, 0.25] {
            let ak = RadianceImage::new(20, 20, a.data.iter().map(|v| v * k).collect()).unwrap();
            let bk = RadianceImage::new(20, 20, b.data.iter().map(|v| v * k).collect()).unwrap();
            let d_psnr = (pu_psnr(&b, &a, 1000.0).unwrap() - pu_psnr(&bk, &ak, 1000.0).unwrap()).abs();
            let d_ssim = (pu_ssim(&b, &a, 1000.0).unwrap() - pu_ssim(&bk, &ak, 1000.0).unwrap()).abs();
            let d_vsi = (pu_vsi(&b, &a, 1000.0).unwrap() - pu_vsi(&bk, &ak, 1000.0).unwrap()).abs();
            assert!(d_psnr < 1e-6 && d_ssim < 1e-6 && d_vsi < 1e-6,
                "k={k}: d_psnr={d_psnr} d_ssim={d_ssim} d_vsi={d_vsi}");
        }
    }

    /// Direct (non-separable, unweighted-window-free) SSIM used as an
    /// independent check of the production implementation.
    fn reference_ssim(a: &[f64], b: &[f64], width: usize, height: usize, l: f64) -> f64 {
        let c1 = (0.01 * l).powi(2);
        let c2 = (0.03 * l).powi(2);
        let mut w = vec![0.0; 121];
        let mut sum = 0.0;
        for y in 0..11 {
            for x in 0..11 {
                let d2 = (x as f64 - 5.0).powi(2) + (y as f64 - 5.0).powi(2);
                w[y * 11 + x] = (-d2 / 4.5).exp();
                sum += w[y * 11 + x];
            }
        }
        for v in &mut w {
            *v /= sum;
        }
        let mut total = 0.0;
        let mut count = 0;
        for wy in 0..=height - 11 {
            for wx in 0..=width - 11 {
                let (mut ma, mut mb) = (0.0, 0.0);
                for ky in 0..11 {
                    for kx in 0..11 {
                        ma += w[ky * 11 + kx] * a[(wy + ky) * width + wx + kx];
                        mb += w[ky * 11 + kx] * b[(wy + ky) * width + wx + kx];
                    }
                }
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for ky in 0..11 {
                    for kx in 0..11 {
                        let da = a[(wy + ky) * width + wx + kx] - ma;
                        let db = b[(wy + ky) * width + wx + kx] - mb;
                        va += w[ky * 11 + kx] * da * da;
                        vb += w[ky * 11 + kx] * db * db;
                        cov += w[ky * 11 + kx] * da * db;
                    }
                }
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                    / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
        total / count as f64
    }

    #[test]
    fn ssim_matches_independent_implementation() {
        // Correlated pair, the realistic regime where SSIM is positive and
        // the [0,1] output clamp never engages.
        let a = test_image(20, 18, 5);
        let noise = test_image(20, 18, 6);
        let b = RadianceImage::new(
            20,
            18,
            a.data
                .iter()
                .zip(&noise.data)
                .map(|(x, n)| 0.8 * x + 0.2 * n)
                .collect(),
        )
        .unwrap();
        let peak = 1000.0;
        let scale = display_scale(&a, peak).unwrap();
        let got = pu_ssim(&b, &a, peak).unwrap();
        // Same preprocessing, independent SSIM core (centered moments).
        let ea = encode_luminance(&b, scale);
        let eb = encode_luminance(&a, scale);
        let want = reference_ssim(&ea, &eb, 20, 18, pu21_range(peak));
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_inverted_binary_image_scores_low() {
        let mut data = vec![0.0f32; 16 * 16 * 3];
        for (i, v) in data.iter_mut().enumerate() {
            if ((i / 3) % 16 / 4 + (i / 3) / 16 / 4) % 2 == 0 {
                *v = 1.0;
            }
        }
        let img = RadianceImage::new(16, 16, data.clone()).unwrap();
        let inv =
            RadianceImage::new(16, 16, data.iter().map(|v| 1.0 - v).collect()).unwrap();
        let s = pu_ssim(&inv, &img, 1000.0).unwrap();
        assert!(s < 0.1, "inverted ssim {s}");
    }

    #[test]
    fn ssim_constant_images_match_luminance_term() {
        let a = RadianceImage::new(12, 12, vec![0.4; 432]).unwrap();
        let b = RadianceImage::new(12, 12, vec![1.0; 432]).unwrap();
        let peak = 1000.0;
        // Shared normalization maps the reference (b) max to peak.
        let scale = display_scale(&b, peak).unwrap();
        let mu1 = pu21_encode(0.4 * scale);
        let mu2 = pu21_encode(scale);
        let c1 = (0.01 * pu21_range(peak)).powi(2);
        let want = (2.0 * mu1 * mu2 + c1) / (mu1 * mu1 + mu2 * mu2 + c1);
        let got = pu_ssim(&a, &b, peak).unwrap();
        assert!((got - want).abs() < 1e-9, "{got} vs {want}");
    }

    #[test]
    fn ssim_too_small_image_errors() {
        let img = test_image(8, 8, 7);
        assert!(matches!(
            pu_ssim(&img, &img, 1000.0),
            Err(MetricError::ImageTooSmall(8, 8, 11))
        ));
    }

    #[test]
    fn vsi_symmetric() {
        let a = test_image(32, 32, 8);
        let b = test_image(32, 32, 9);
        let ab = pu_vsi(&a, &b, 1000.0).unwrap();
        let ba = pu_vsi(&b, &a, 1000.0).unwrap();
        // The shared normalization uses the reference max; feed images with
        // equal maxima so both calls see the same scale.
        let scale_a = display_scale(&a, 1000.0).unwrap();
        let scale_b = display_scale(&b, 1000.0).unwrap();
        if (scale_a - scale_b).abs() < 1e-12 {
            assert!((ab - ba).abs() < 1e-6);
        } else {
            // Rescale b to share a's max, then symmetry must hold exactly.
            let k = (scale_b / scale_a) as f32;
            let b2 =
                RadianceImage::new(32, 32, b.data.iter().map(|v| v * k).collect()).unwrap();
            let ab = pu_vsi(&a, &b2, 1000.0).unwrap();
            let ba = pu_vsi(&b2, &a, 1000.0).unwrap();
            assert!((ab - ba).abs() < 1e-6, "{ab} vs {ba}");
        }
    }

    fn add_noise(img: &RadianceImage, sigma_pu_frac: f64, peak: f64, seed: u64) -> RadianceImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = display_scale(img, peak).unwrap();
        let sigma = sigma_pu_frac * pu21_range(peak);
        let data: Vec<f32> = img
            .data
            .iter()
            .map(|v| {
                let g: f64 = rng.gen::<f64>() + rng.gen::<f64>() + rng.gen::<f64>()
                    - 1.5; // cheap approx normal, var 0.25
                let pu = pu21_encode(*v as f64 * scale) + 2.0 * g * sigma;
                (pu21_decode(pu.max(0.0)) / scale) as f32
            })
            .collect();
        RadianceImage::new(img.width, img.height, data).unwrap()
    }

    #[test]
    fn noise_degrades_metrics_monotonically() {
        let img = test_image(32, 32, 10);
        let peak = 1000.0;
        let mut last_psnr = f64::INFINITY;
        for (i, sigma) in [0.005, 0.01, 0.02, 0.04, 0.08].iter().enumerate() {
            let noisy = add_noise(&img, *sigma, peak, 100 + i as u64);
            let psnr = pu_psnr(&noisy, &img, peak).unwrap();
            assert!(psnr <= last_psnr + 1e-9, "sigma {sigma}: {psnr} > {last_psnr}");
            last_psnr = psnr;
        }
        let mild = add_noise(&img, 0.01, peak, 200);
        let harsh = add_noise(&img, 0.05, peak, 201);
        let v_mild = pu_vsi(&mild, &img, peak).unwrap();
        let v_harsh = pu_vsi(&harsh, &img, peak).unwrap();
        assert!(v_harsh < v_mild, "vsi {v_harsh} !< {v_mild}");
    }

    #[test]
    fn bounded_outputs() {
        let a = test_image(24, 24, 11);
        let b = add_noise(&a, 0.2, 1000.0, 12);
        let ssim = pu_ssim(&b, &a, 1000.0).unwrap();
        let vsi = pu_vsi(&b, &a, 1000.0).unwrap();
        assert!((0.0..=1.0).contains(&ssim));
        assert!((0.0..=1.0).contains(&vsi));
        let psnr = pu_psnr(&b, &a, 1000.0).unwrap();
        assert!(psnr >= 0.0 && psnr <= PSNR_CAP_DB);
    }

    #[test]
    fn report_row_format() {
        let img = test_image(16, 16, 13);
        let report = evaluate(&img, &img, 1000.0).unwrap();
        assert_eq!(report.pixel_count, 256);
        let row = report.csv_row("scene_0001", "well");
        assert!(row.starts_with("scene_0001,well,100.000000,1.000000,"));
    }
}
