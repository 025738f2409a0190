//! Camera response recovery, multi-exposure merging, and bracket simulation.
//!
//! The response curve `g` maps an 8-bit code to log exposure, one curve per
//! color channel, anchored by `g[128] == 0` (the absolute scale of a response
//! recovered from brackets is unobservable, so a gauge must be fixed).
//!
//! The inverse camera model and the merge both work in the normalized gauge
//! `g[z] - g[255]`, i.e. relative exposure `X = E * dt = 1` maps to code 255.
//! With that convention simulate -> merge is an exact identity on unclipped
//! pixels regardless of how the curve is anchored.

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::imgio::{RadianceImage, SdrImage};

/// Errors raised by response fitting and merging.
#[derive(Debug, thiserror::Error)]
pub enum HdrError {
    #[error("bracket needs at least 2 frames, got {0}")]
    TooFewFrames(usize),
    #[error("exposure times must be strictly increasing ({prev} then {next})")]
    NonIncreasingExposures { prev: f64, next: f64 },
    #[error("frame {index} is {got:?}, expected {expected:?}")]
    DimensionMismatch {
        index: usize,
        got: (usize, usize),
        expected: (usize, usize),
    },
    #[error("rank-deficient response system (no usable exposure variation)")]
    RankDeficient,
    #[error("need at least {need} sample pixels for an overdetermined fit, got {got}")]
    InsufficientSamples { need: usize, got: usize },
    #[error("crf has {got} curves, expected 3")]
    BadCurveCount { got: usize },
    #[error("invalid response curve: {0}")]
    InvalidCurve(String),
}

/// Triangle ("hat") weight over 8-bit codes: full confidence mid-range,
/// zero at the clipped endpoints. Symmetric: `w(z) == w(255 - z)`.
pub fn hat_weight(z: u8) -> u32 {
    if z <= 127 {
        z as u32
    } else {
        255 - z as u32
    }
}

/// Recovered camera response: log exposure per code, one curve per channel.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Crf {
    /// `g[channel][code]` = ln exposure producing `code`; non-decreasing,
    /// `g[channel][128] == 0`.
    pub g: Vec<Vec<f64>>,
    /// Smoothness weight the curves were fit with.
    pub lambda: f64,
}

impl Crf {
    pub fn from_curves(g: Vec<Vec<f64>>, lambda: f64) -> Result<Self, HdrError> {
        if g.len() != 3 {
            return Err(HdrError::BadCurveCount { got: g.len() });
        }
        for curve in &g {
            if curve.len() != 256 {
                return Err(HdrError::InvalidCurve(format!(
                    "curve has {} entries, expected 256",
                    curve.len()
                )));
            }
            if curve.iter().any(|v| !v.is_finite()) {
                return Err(HdrError::InvalidCurve("non-finite entry".into()));
            }
            if curve.windows(2).any(|w| w[1] < w[0]) {
                return Err(HdrError::InvalidCurve("curve not non-decreasing".into()));
            }
            if curve[128].abs() > 1e-9 {
                return Err(HdrError::InvalidCurve(format!(
                    "anchor g[128] = {} != 0",
                    curve[128]
                )));
            }
        }
        Ok(Crf { g, lambda })
    }

    /// Analytic curve `g[z] = (1/gamma) * ln(z/255)`, shifted to the anchor.
    /// `gamma = 1` is the linear response `code = 255 * exposure`.
    pub fn gamma(gamma: f64) -> Self {
        let curve: Vec<f64> = (0..256)
            .map(|z| {
                // Half-code floor keeps g[0] finite.
                let z = (z as f64).max(0.5);
                (z / 255.0).ln() / gamma
            })
            .collect();
        let anchor = curve[128];
        let g = curve.iter().map(|v| v - anchor).collect::<Vec<_>>();
        Crf {
            g: vec![g.clone(), g.clone(), g],
            lambda: 0.0,
        }
    }

    pub fn linear() -> Self {
        Self::gamma(1.0)
    }

    /// Fractional code for log-relative-exposure `t` on channel `ch`, in the
    /// normalized gauge (t = 0 maps to code 255). Clamped to [0, 255].
    fn code_for(&self, ch: usize, t: f64) -> f64 {
        let g = &self.g[ch];
        let target = t + g[255];
        if target <= g[0] {
            return 0.0;
        }
        if target >= g[255] {
            return 255.0;
        }
        // First index with g[i] > target; target lies in [g[i-1], g[i]].
        let i = g.partition_point(|v| *v <= target);
        let (lo, hi) = (g[i - 1], g[i]);
        if hi - lo < 1e-15 {
            (i - 1) as f64
        } else {
            (i - 1) as f64 + (target - lo) / (hi - lo)
        }
    }
}

/// Ordered multi-exposure stack of one scene.
#[derive(Debug, Clone)]
pub struct Bracket {
    frames: Vec<SdrImage>,
}

impl Bracket {
    /// Validates: >= 2 frames, strictly increasing exposure times, shared
    /// dimensions.
    pub fn new(frames: Vec<SdrImage>) -> Result<Self, HdrError> {
        if frames.len() < 2 {
            return Err(HdrError::TooFewFrames(frames.len()));
        }
        let (w, h) = (frames[0].width, frames[0].height);
        for (i, f) in frames.iter().enumerate() {
            if (f.width, f.height) != (w, h) {
                return Err(HdrError::DimensionMismatch {
                    index: i,
                    got: (f.width, f.height),
                    expected: (w, h),
                });
            }
        }
        for pair in frames.windows(2) {
            if pair[1].exposure_time <= pair[0].exposure_time {
                return Err(HdrError::NonIncreasingExposures {
                    prev: pair[0].exposure_time,
                    next: pair[1].exposure_time,
                });
            }
        }
        Ok(Bracket { frames })
    }

    pub fn frames(&self) -> &[SdrImage] {
        &self.frames
    }

    pub fn width(&self) -> usize {
        self.frames[0].width
    }

    pub fn height(&self) -> usize {
        self.frames[0].height
    }
}

/// Merged radiance plus the mask of pixels that had zero total weight in
/// every channel sample (fully clipped; filled by the fallback rule).
#[derive(Debug, Clone)]
pub struct MergedHdr {
    pub image: RadianceImage,
    pub saturation_mask: Vec<bool>,
}

/// Recover the per-channel response from a bracket by weighted least squares
/// with a second-difference smoothness term and the `g[128] = 0` anchor row.
///
/// `n_samples` pixels are chosen by stratified luminance quantiles over the
/// middle frame. The fitted curves are projected to be non-decreasing and
/// re-anchored.
pub fn recover_crf(bracket: &Bracket, lambda: f64, n_samples: usize) -> Result<Crf, HdrError> {
    let frames = bracket.frames();
    let need = (255 + frames.len()).div_ceil(frames.len() - 1);
    if n_samples < need {
        return Err(HdrError::InsufficientSamples {
            need,
            got: n_samples,
        });
    }
    let sample_idx = stratified_samples(&frames[frames.len() / 2], n_samples);
    let n = sample_idx.len();

    let mut curves = Vec::with_capacity(3);
    for ch in 0..3 {
        // Unknowns: g[0..256] then ln E for each sample.
        let dim = 256 + n;
        let mut ata = DMatrix::<f64>::zeros(dim, dim);
        let mut atb = DVector::<f64>::zeros(dim);
        let mut add_row = |cols: &[(usize, f64)], rhs: f64| {
            for &(i, ci) in cols {
                for &(j, cj) in cols {
                    ata[(i, j)] += ci * cj;
                }
                atb[i] += ci * rhs;
            }
        };

        // Each sample with k unclipped frames pins k-1 exposure differences;
        // the fit needs at least 255 of those to cover the code axis.
        let mut constraints = 0usize;
        for (s, &pix) in sample_idx.iter().enumerate() {
            let mut usable_frames = 0usize;
            for frame in frames {
                let z = frame.data[pix * 3 + ch];
                let w = hat_weight(z) as f64;
                if w == 0.0 {
                    continue;
                }
                usable_frames += 1;
                // w * (g[z] - lnE_s) = w * ln dt
                add_row(
                    &[(z as usize, w), (256 + s, -w)],
                    w * frame.exposure_time.ln(),
                );
            }
            constraints += usable_frames.saturating_sub(1);
        }
        if constraints < 255 {
            return Err(HdrError::RankDeficient);
        }
        for z in 1..255usize {
            let w = lambda * hat_weight(z as u8) as f64;
            if w == 0.0 {
                continue;
            }
            add_row(&[(z - 1, w), (z, -2.0 * w), (z + 1, w)], 0.0);
        }
        // Anchor the gauge.
        add_row(&[(128, 1.0)], 0.0);
        // Tiny ridge keeps unobserved codes solvable without moving the fit.
        for i in 0..dim {
            ata[(i, i)] += 1e-9;
        }

        let chol = Cholesky::new(ata).ok_or(HdrError::RankDeficient)?;
        let x = chol.solve(&atb);
        let mut g: Vec<f64> = x.as_slice()[..256].to_vec();
        isotonic_non_decreasing(&mut g);
        let anchor = g[128];
        for v in &mut g {
            *v -= anchor;
        }
        curves.push(g);
    }
    Crf::from_curves(curves, lambda)
}

/// Stratified sample of pixel indices by luminance quantiles.
fn stratified_samples(frame: &SdrImage, n_samples: usize) -> Vec<usize> {
    let n_pixels = frame.width * frame.height;
    let mut order: Vec<usize> = (0..n_pixels).collect();
    let luma = |i: usize| {
        let p = &frame.data[i * 3..i * 3 + 3];
        0.2126 * p[0] as f32 + 0.7152 * p[1] as f32 + 0.0722 * p[2] as f32
    };
    order.sort_by(|a, b| luma(*a).total_cmp(&luma(*b)).then(a.cmp(b)));
    let n = n_samples.min(n_pixels);
    (0..n)
        .map(|k| order[((k as f64 + 0.5) / n as f64 * n_pixels as f64) as usize])
        .collect()
}

/// Pool-adjacent-violators projection onto non-decreasing sequences.
fn isotonic_non_decreasing(values: &mut [f64]) {
    // (mean, count) blocks.
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(values.len());
    for &v in values.iter() {
        blocks.push((v, 1));
        while blocks.len() > 1 {
            let last = blocks[blocks.len() - 1];
            let prev = blocks[blocks.len() - 2];
            if prev.0 <= last.0 {
                break;
            }
            let count = prev.1 + last.1;
            let mean = (prev.0 * prev.1 as f64 + last.0 * last.1 as f64) / count as f64;
            blocks.pop();
            *blocks.last_mut().unwrap() = (mean, count);
        }
    }
    let mut at = 0;
    for (mean, count) in blocks {
        for v in &mut values[at..at + count] {
            *v = mean;
        }
        at += count;
    }
}

/// Weighted Debevec merge in the normalized gauge (code 255 = exposure 1):
/// `ln E = sum_j w(z_j) ((g[z_j] - g[255]) - ln dt_j) / sum_j w(z_j)`.
///
/// Pixels where a channel has zero total weight take the estimate from the
/// frame whose code is nearest 128 (ties prefer the shorter exposure for
/// bright codes, the longer for dark ones) and are flagged in the mask.
pub fn merge_brackets(bracket: &Bracket, crf: &Crf) -> Result<MergedHdr, HdrError> {
    if crf.g.len() != 3 {
        return Err(HdrError::BadCurveCount { got: crf.g.len() });
    }
    let frames = bracket.frames();
    let n_pixels = bracket.width() * bracket.height();
    let ln_dt: Vec<f64> = frames.iter().map(|f| f.exposure_time.ln()).collect();

    let mut data = vec![0.0f32; n_pixels * 3];
    let mut mask = vec![false; n_pixels];

    use rayon::prelude::*;
    data.par_chunks_mut(3)
        .zip(mask.par_iter_mut())
        .enumerate()
        .for_each(|(pix, (out, saturated))| {
            for ch in 0..3 {
                let g = &crf.g[ch];
                let top = g[255];
                let mut num = 0.0f64;
                let mut den = 0.0f64;
                for (j, frame) in frames.iter().enumerate() {
                    let z = frame.data[pix * 3 + ch];
                    let w = hat_weight(z) as f64;
                    num += w * (g[z as usize] - top - ln_dt[j]);
                    den += w;
                }
                let ln_e = if den > 0.0 {
                    num / den
                } else {
                    *saturated = true;
                    let mut best = 0usize;
                    let mut best_dist = i32::MAX;
                    for (j, frame) in frames.iter().enumerate() {
                        let z = frame.data[pix * 3 + ch];
                        let dist = (z as i32 - 128).abs();
                        let better = dist < best_dist
                            || (dist == best_dist && z < 128);
                        if better {
                            best = j;
                            best_dist = dist;
                        }
                    }
                    let z = frames[best].data[pix * 3 + ch] as usize;
                    g[z] - top - ln_dt[best]
                };
                out[ch] = (ln_e.exp() as f32).clamp(0.0, f32::MAX);
            }
        });

    Ok(MergedHdr {
        image: RadianceImage::new(bracket.width(), bracket.height(), data)
            .expect("merge produces finite non-negative samples"),
        saturation_mask: mask,
    })
}

/// Apply the inverse camera model: `z = clamp(round(f(E * dt) + noise))`
/// where `f` maps relative exposure onto codes with `f(1) = 255`.
///
/// Noise is Gaussian in code units; `noise_sigma = 0` is exactly
/// deterministic and does not consume randomness.
pub fn simulate_bracket<R: Rng>(
    scene: &RadianceImage,
    crf: &Crf,
    exposure_times: &[f64],
    noise_sigma: f64,
    rng: &mut R,
) -> Result<Bracket, HdrError> {
    if exposure_times.len() < 2 {
        return Err(HdrError::TooFewFrames(exposure_times.len()));
    }
    for pair in exposure_times.windows(2) {
        if pair[1] <= pair[0] {
            return Err(HdrError::NonIncreasingExposures {
                prev: pair[0],
                next: pair[1],
            });
        }
    }
    let noise = if noise_sigma > 0.0 {
        Some(Normal::new(0.0, noise_sigma).expect("sigma validated"))
    } else {
        None
    };
    let mut frames = Vec::with_capacity(exposure_times.len());
    for &dt in exposure_times {
        let mut data = vec![0u8; scene.data.len()];
        for (i, &e) in scene.data.iter().enumerate() {
            let x = e as f64 * dt;
            let code = if x <= 0.0 {
                0.0
            } else {
                crf.code_for(i % 3, x.ln())
            };
            let jitter = noise.as_ref().map_or(0.0, |n| n.sample(rng));
            data[i] = (code + jitter).round().clamp(0.0, 255.0) as u8;
        }
        frames.push(
            SdrImage::new(scene.width, scene.height, data, dt)
                .expect("dimensions come from the scene"),
        );
    }
    Bracket::new(frames)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn constant_scene(width: usize, height: usize, value: f32) -> RadianceImage {
        RadianceImage::new(width, height, vec![value; width * height * 3]).unwrap()
    }

    fn random_scene(width: usize, height: usize, seed: u64, lo: f32, hi: f32) -> RadianceImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ratio = (hi / lo).ln();
        let data = (0..width * height * 3)
            .map(|_| lo * (rng.gen::<f32>() * ratio).exp())
            .collect();
        RadianceImage::new(width, height, data).unwrap()
    }

    #[test]
    fn hat_weight_endpoints_and_midpoint() {
        assert_eq!(hat_weight(0), 0);
        assert_eq!(hat_weight(255), 0);
        assert_eq!(hat_weight(127), 127);
    }

    #[test]
    fn hat_weight_symmetry() {
        for z in 0..=255u8 {
            assert_eq!(hat_weight(z), hat_weight(255 - z), "z = {z}");
        }
    }

    #[test]
    fn linear_crf_saturates_at_unit_exposure() {
        let crf = Crf::linear();
        let scene = constant_scene(2, 2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bracket = simulate_bracket(&scene, &crf, &[0.5, 1.0], 0.0, &mut rng).unwrap();
        assert!(bracket.frames()[1].data.iter().all(|z| *z == 255));
    }

    #[test]
    fn black_scene_simulates_to_zero_codes() {
        let crf = Crf::gamma(2.2);
        let scene = constant_scene(3, 3, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bracket = simulate_bracket(&scene, &crf, &[1.0, 2.0], 0.0, &mut rng).unwrap();
        for frame in bracket.frames() {
            assert!(frame.data.iter().all(|z| *z == 0));
        }
    }

    #[test]
    fn linear_crf_codes_match_closed_form() {
        // The normalized linear response is code = 255 * E * dt.
        let crf = Crf::linear();
        let scene = constant_scene(1, 1, 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bracket = simulate_bracket(&scene, &crf, &[0.5, 1.0, 2.0], 0.0, &mut rng).unwrap();
        let got: Vec<u8> = bracket.frames().iter().map(|f| f.data[0]).collect();
        assert_eq!(got, vec![38, 77, 153]); // round(255 * 0.3 * dt)
    }

    #[test]
    fn merge_constant_scene_recovers_value() {
        let crf = Crf::linear();
        let scene = constant_scene(8, 8, 0.5);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let bracket =
            simulate_bracket(&scene, &crf, &[0.25, 1.0, 4.0], 0.0, &mut rng).unwrap();
        let merged = merge_brackets(&bracket, &crf).unwrap();
        for (i, v) in merged.image.data.iter().enumerate() {
            if !merged.saturation_mask[i / 3] {
                assert!((v - 0.5).abs() / 0.5 < 0.02, "sample {v}");
            }
        }
    }

    #[test]
    fn merge_round_trip_random_scenes() {
        // Radiance recovered within 5% wherever some frame has a mid-range code.
        for seed in 0..5u64 {
            let crf = if seed % 2 == 0 { Crf::linear() } else { Crf::gamma(2.2) };
            let scene = random_scene(16, 16, seed, 1e-3, 2.0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let bracket =
                simulate_bracket(&scene, &crf, &[0.125, 1.0, 8.0], 0.0, &mut rng).unwrap();
            let merged = merge_brackets(&bracket, &crf).unwrap();
            for i in 0..scene.data.len() {
                let mid = bracket.frames().iter().any(|f| {
                    let z = f.data[i];
                    (20..=235).contains(&z)
                });
                if !mid {
                    continue;
                }
                let (want, got) = (scene.data[i] as f64, merged.image.data[i] as f64);
                let rel = (want - got).abs() / want.max(1e-9);
                assert!(rel < 0.05, "seed {seed} sample {i}: {want} vs {got}");
            }
        }
    }

    #[test]
    fn merge_exposure_invariance() {
        let crf = Crf::linear();
        let scene = random_scene(8, 8, 3, 1e-2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let times = [0.25, 1.0, 4.0];
        let b1 = simulate_bracket(&scene, &crf, &times, 0.0, &mut rng).unwrap();
        let m1 = merge_brackets(&b1, &crf).unwrap();
        // Same codes, exposure axis scaled by k: merged radiance scales by 1/k.
        let k = 3.0;
        let frames2: Vec<SdrImage> = b1
            .frames()
            .iter()
            .map(|f| {
                SdrImage::new(f.width, f.height, f.data.clone(), f.exposure_time * k).unwrap()
            })
            .collect();
        let m2 = merge_brackets(&Bracket::new(frames2).unwrap(), &crf).unwrap();
        for (a, b) in m1.image.data.iter().zip(&m2.image.data) {
            let rel = (*a as f64 / k - *b as f64).abs() / (*a as f64 / k).max(1e-12);
            assert!(rel < 1e-6, "{a} vs {b}");
        }
    }

    #[test]
    fn fully_saturated_pixel_uses_shortest_exposure_fallback() {
        let crf = Crf::linear();
        let scene = constant_scene(2, 2, 100.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bracket = simulate_bracket(&scene, &crf, &[1.0, 2.0, 4.0], 0.0, &mut rng).unwrap();
        for f in bracket.frames() {
            assert!(f.data.iter().all(|z| *z == 255));
        }
        let merged = merge_brackets(&bracket, &crf).unwrap();
        assert!(merged.saturation_mask.iter().all(|m| *m));
        // g[255] - g[255] - ln(1.0) = 0 -> radiance 1.0 from the shortest frame.
        for v in &merged.image.data {
            assert!((v - 1.0).abs() < 1e-5, "fallback sample {v}");
        }
    }

    #[test]
    fn saturation_mask_matches_weights() {
        let crf = Crf::linear();
        let scene = random_scene(12, 12, 9, 1e-4, 50.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let bracket = simulate_bracket(&scene, &crf, &[0.5, 1.0], 0.0, &mut rng).unwrap();
        let merged = merge_brackets(&bracket, &crf).unwrap();
        for pix in 0..scene.width * scene.height {
            let mut zero_weight = false;
            for ch in 0..3 {
                let total: u32 = bracket
                    .frames()
                    .iter()
                    .map(|f| hat_weight(f.data[pix * 3 + ch]))
                    .sum();
                zero_weight |= total == 0;
            }
            assert_eq!(merged.saturation_mask[pix], zero_weight, "pixel {pix}");
        }
    }

    fn crf_rmse(got: &[f64], want: impl Fn(usize) -> f64, range: std::ops::Range<usize>) -> f64 {
        let mut sum = 0.0;
        let mut n = 0usize;
        for z in range {
            let d = got[z] - want(z);
            sum += d * d;
            n += 1;
        }
        (sum / n as f64).sqrt()
    }

    #[test]
    fn recover_linear_crf() {
        let scene = random_scene(32, 32, 11, 2e-3, 3.0);
        let crf = Crf::linear();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bracket =
            simulate_bracket(&scene, &crf, &[0.25, 1.0, 4.0], 0.0, &mut rng).unwrap();
        let fit = recover_crf(&bracket, 50.0, 300).unwrap();
        let anchor = (128.0f64 / 255.0).ln();
        for ch in 0..3 {
            let rmse = crf_rmse(&fit.g[ch], |z| (z as f64 / 255.0).ln() - anchor, 20..236);
            assert!(rmse < 0.05, "channel {ch} rmse {rmse}");
        }
    }

    #[test]
    fn recover_gamma_crf() {
        // The gamma curve crushes shadows, so the usable exposure window per
        // frame is narrow; closer exposure spacing keeps samples usable in
        // two or more frames.
        let scene = random_scene(32, 32, 13, 2e-2, 2.0);
        let crf = Crf::gamma(2.2);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let bracket =
            simulate_bracket(&scene, &crf, &[0.5, 1.0, 2.0], 0.0, &mut rng).unwrap();
        let fit = recover_crf(&bracket, 50.0, 400).unwrap();
        let anchor = (128.0f64 / 255.0).ln() / 2.2;
        for ch in 0..3 {
            let rmse = crf_rmse(
                &fit.g[ch],
                |z| (z as f64 / 255.0).ln() / 2.2 - anchor,
                20..236,
            );
            assert!(rmse < 0.05, "channel {ch} rmse {rmse}");
        }
    }

    #[test]
    fn recovered_curves_are_monotone() {
        let scene = random_scene(32, 32, 17, 2e-2, 2.0);
        let crf = Crf::gamma(2.2);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let bracket =
            simulate_bracket(&scene, &crf, &[0.5, 1.0, 2.0], 2.0, &mut rng).unwrap();
        let fit = recover_crf(&bracket, 50.0, 400).unwrap();
        for curve in &fit.g {
            assert!(curve.windows(2).all(|w| w[1] >= w[0]));
        }
    }

    #[test]
    fn equal_exposures_rejected() {
        let f = SdrImage::new(2, 2, vec![7; 12], 1.0).unwrap();
        match Bracket::new(vec![f.clone(), f]) {
            Err(HdrError::NonIncreasingExposures { .. }) => {}
            other => panic!("expected exposure error, got {other:?}"),
        }
    }

    #[test]
    fn all_clipped_bracket_is_rank_deficient() {
        let lo = SdrImage::new(4, 4, vec![0; 48], 0.5).unwrap();
        let hi = SdrImage::new(4, 4, vec![255; 48], 1.0).unwrap();
        let bracket = Bracket::new(vec![lo, hi]).unwrap();
        match recover_crf(&bracket, 50.0, 257) {
            Err(HdrError::RankDeficient) => {}
            other => panic!("expected rank deficiency, got {other:?}"),
        }
    }

    #[test]
    fn simulate_then_recover_then_merge() {
        let scene = random_scene(32, 32, 19, 2e-2, 2.0);
        let crf = Crf::gamma(2.2);
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let bracket =
            simulate_bracket(&scene, &crf, &[0.5, 1.0, 2.0], 0.0, &mut rng).unwrap();
        let fit = recover_crf(&bracket, 50.0, 400).unwrap();
        let merged = merge_brackets(&bracket, &fit).unwrap();
        let mut worst = 0.0f64;
        for i in 0..scene.data.len() {
            let mid = bracket
                .frames()
                .iter()
                .any(|f| (20..=235).contains(&f.data[i]));
            if !mid {
                continue;
            }
            let (want, got) = (scene.data[i] as f64, merged.image.data[i] as f64);
            worst = worst.max((want - got).abs() / want.max(1e-9));
        }
        assert!(worst < 0.05, "worst relative error {worst}");
    }

    #[test]
    fn crf_json_round_trip() {
        let crf = Crf::gamma(2.2);
        let text = serde_json::to_string(&crf).unwrap();
        let back: Crf = serde_json::from_str(&text).unwrap();
        let back = Crf::from_curves(back.g, back.lambda).unwrap();
        assert_eq!(crf.g, back.g);
    }
}
