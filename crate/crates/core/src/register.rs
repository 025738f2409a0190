//! Homography registration of thermal frames onto the RGB frame.
//!
//! Correspondences are read from JSON (`{"pairs": [[sx,sy,tx,ty], ...]}`),
//! the homography is estimated with the normalized DLT (Hartley
//! normalization: translate to centroid, scale to mean distance sqrt(2)),
//! the source image is warped by inverse mapping with bilinear sampling,
//! and the shared overlap is cut to the largest axis-aligned rectangle of
//! valid pixels.

use nalgebra::{DMatrix, Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::imgio::IrImage;

#[derive(Debug, thiserror::Error)]
pub enum RegisterError {
    #[error("need at least 4 correspondence pairs, got {0}")]
    TooFewPairs(usize),
    #[error("degenerate configuration: {0}")]
    Degenerate(String),
    #[error("homography is singular")]
    Singular,
    #[error("images are {got:?} and {other:?}, expected equal dimensions")]
    DimensionMismatch {
        got: (usize, usize),
        other: (usize, usize),
    },
    #[error("validity mask contains no usable rectangle")]
    EmptyOverlap,
    #[error("invalid correspondence file: {0}")]
    BadFile(String),
}

/// A 3x3 projective map, normalized so `m[(2,2)] == 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Homography {
    pub m: Matrix3<f64>,
}

impl Homography {
    pub fn new(m: Matrix3<f64>) -> Result<Self, RegisterError> {
        if m[(2, 2)].abs() < 1e-12 || m.determinant().abs() < 1e-12 {
            return Err(RegisterError::Singular);
        }
        Ok(Homography { m: m / m[(2, 2)] })
    }

    pub fn identity() -> Self {
        Homography {
            m: Matrix3::identity(),
        }
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Homography {
            m: Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0),
        }
    }

    pub fn inverse(&self) -> Result<Homography, RegisterError> {
        self.m
            .try_inverse()
            .ok_or(RegisterError::Singular)
            .and_then(Homography::new)
    }

    /// Apply to a point.
    pub fn map(&self, x: f64, y: f64) -> (f64, f64) {
        let p = self.m * Vector3::new(x, y, 1.0);
        (p.x / p.z, p.y / p.z)
    }

    /// Row-major 9 floats, the on-disk JSON layout.
    pub fn to_row_major(&self) -> [f64; 9] {
        let mut out = [0.0; 9];
        for r in 0..3 {
            for c in 0..3 {
                out[r * 3 + c] = self.m[(r, c)];
            }
        }
        out
    }

    pub fn from_row_major(v: &[f64]) -> Result<Self, RegisterError> {
        if v.len() != 9 {
            return Err(RegisterError::BadFile(format!(
                "homography needs 9 floats, got {}",
                v.len()
            )));
        }
        Homography::new(Matrix3::from_row_slice(v))
    }
}

/// Matched source/target point pairs in pixel units.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CorrespondenceSet {
    /// `[sx, sy, tx, ty]` per pair.
    pub pairs: Vec<[f64; 4]>,
}

impl CorrespondenceSet {
    pub fn validate(&self) -> Result<(), RegisterError> {
        if self.pairs.len() < 4 {
            return Err(RegisterError::TooFewPairs(self.pairs.len()));
        }
        if self.pairs.len() == 4 {
            // With a minimal set, any 3 collinear source points are degenerate.
            for skip in 0..4 {
                let pts: Vec<(f64, f64)> = (0..4)
                    .filter(|i| *i != skip)
                    .map(|i| (self.pairs[i][0], self.pairs[i][1]))
                    .collect();
                let area = (pts[1].0 - pts[0].0) * (pts[2].1 - pts[0].1)
                    - (pts[1].1 - pts[0].1) * (pts[2].0 - pts[0].0);
                if area.abs() < 1e-9 {
                    return Err(RegisterError::Degenerate(
                        "3 collinear source points in a minimal set".into(),
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, RegisterError> {
        let set: CorrespondenceSet =
            serde_json::from_str(text).map_err(|e| RegisterError::BadFile(e.to_string()))?;
        set.validate()?;
        Ok(set)
    }
}

/// Homography plus the reprojection quality of the fit.
#[derive(Debug, Clone)]
pub struct HomographyEstimate {
    pub h: Homography,
    /// Root-mean-square distance between mapped sources and targets, pixels.
    pub rmse: f64,
}

/// Normalized DLT over all pairs (least squares when overdetermined).
pub fn estimate_homography(c: &CorrespondenceSet) -> Result<HomographyEstimate, RegisterError> {
    c.validate()?;
    let src: Vec<(f64, f64)> = c.pairs.iter().map(|p| (p[0], p[1])).collect();
    let dst: Vec<(f64, f64)> = c.pairs.iter().map(|p| (p[2], p[3])).collect();
    let (src_n, t_src) = hartley_normalize(&src)?;
    let (dst_n, t_dst) = hartley_normalize(&dst)?;

    let n = src_n.len();
    let mut a = DMatrix::<f64>::zeros(2 * n, 9);
    for i in 0..n {
        let (x, y) = src_n[i];
        let (u, v) = dst_n[i];
        a[(2 * i, 0)] = -x;
        a[(2 * i, 1)] = -y;
        a[(2 * i, 2)] = -1.0;
        a[(2 * i, 6)] = u * x;
        a[(2 * i, 7)] = u * y;
        a[(2 * i, 8)] = u;
        a[(2 * i + 1, 3)] = -x;
        a[(2 * i + 1, 4)] = -y;
        a[(2 * i + 1, 5)] = -1.0;
        a[(2 * i + 1, 6)] = v * x;
        a[(2 * i + 1, 7)] = v * y;
        a[(2 * i + 1, 8)] = v;
    }
    // Null vector of A: right singular vector of the smallest singular value.
    // Thin SVD of an m x 9 matrix only carries min(m, 9) right vectors, so a
    // minimal 4-pair system (8 rows) must be padded to expose the null space.
    if a.nrows() < a.ncols() {
        let (rows, cols) = (a.nrows(), a.ncols());
        let mut padded = DMatrix::<f64>::zeros(cols, cols);
        padded.view_mut((0, 0), (rows, cols)).copy_from(&a);
        a = padded;
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t.as_ref().ok_or(RegisterError::Singular)?;
    let mut min_idx = 0;
    for (i, s) in svd.singular_values.iter().enumerate() {
        if *s < svd.singular_values[min_idx] {
            min_idx = i;
        }
    }
    let h_vec = v_t.row(min_idx);
    let h_norm = Matrix3::from_row_slice(h_vec.transpose().as_slice());

    let t_dst_inv = t_dst.try_inverse().ok_or(RegisterError::Singular)?;
    let h = Homography::new(t_dst_inv * h_norm * t_src)
        .map_err(|_| RegisterError::Degenerate("estimated map is singular".into()))?;

    let mut sq = 0.0;
    for p in &c.pairs {
        let (u, v) = h.map(p[0], p[1]);
        sq += (u - p[2]).powi(2) + (v - p[3]).powi(2);
    }
    let rmse = (sq / c.pairs.len() as f64).sqrt();
    Ok(HomographyEstimate { h, rmse })
}

/// Translate to the centroid and scale so the mean distance is sqrt(2).
fn hartley_normalize(
    pts: &[(f64, f64)],
) -> Result<(Vec<(f64, f64)>, Matrix3<f64>), RegisterError> {
    let n = pts.len() as f64;
    let (cx, cy) = pts
        .iter()
        .fold((0.0, 0.0), |acc, p| (acc.0 + p.0, acc.1 + p.1));
    let (cx, cy) = (cx / n, cy / n);
    let mean_dist = pts
        .iter()
        .map(|p| ((p.0 - cx).powi(2) + (p.1 - cy).powi(2)).sqrt())
        .sum::<f64>()
        / n;
    if mean_dist < 1e-12 {
        return Err(RegisterError::Degenerate("coincident points".into()));
    }
    let s = std::f64::consts::SQRT_2 / mean_dist;
    let t = Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0);
    let out = pts.iter().map(|p| (s * (p.0 - cx), s * (p.1 - cy))).collect();
    Ok((out, t))
}

/// A warped plane stack: channel-interleaved samples plus a per-pixel
/// validity mask (false where the inverse map fell outside the source).
#[derive(Debug, Clone)]
pub struct Warped {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub validity: Vec<bool>,
}

/// Inverse-map warp with bilinear sampling. `output(x) = input(H^-1 x)`;
/// out-of-source samples are zero and flagged invalid.
pub fn warp_image(
    data: &[f32],
    width: usize,
    height: usize,
    channels: usize,
    h: &Homography,
    out_width: usize,
    out_height: usize,
) -> Result<Warped, RegisterError> {
    assert_eq!(data.len(), width * height * channels);
    let inv = h.inverse()?;
    let mut out = vec![0.0f32; out_width * out_height * channels];
    let mut validity = vec![false; out_width * out_height];

    use rayon::prelude::*;
    out.par_chunks_mut(out_width * channels)
        .zip(validity.par_chunks_mut(out_width))
        .enumerate()
        .for_each(|(y, (row, valid_row))| {
            for x in 0..out_width {
                let (sx, sy) = inv.map(x as f64, y as f64);
                if sx < 0.0 || sy < 0.0 || sx > (width - 1) as f64 || sy > (height - 1) as f64 {
                    continue;
                }
                valid_row[x] = true;
                let x0 = sx.floor() as usize;
                let y0 = sy.floor() as usize;
                let x1 = (x0 + 1).min(width - 1);
                let y1 = (y0 + 1).min(height - 1);
                let fx = (sx - x0 as f64) as f32;
                let fy = (sy - y0 as f64) as f32;
                for ch in 0..channels {
                    let at = |xx: usize, yy: usize| data[(yy * width + xx) * channels + ch];
                    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
                    let bot = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
                    row[x * channels + ch] = top * (1.0 - fy) + bot * fy;
                }
            }
        });

    Ok(Warped {
        width: out_width,
        height: out_height,
        channels,
        data: out,
        validity,
    })
}

/// Warp a thermal frame onto a target grid, keeping its calibration.
pub fn warp_ir(
    ir: &IrImage,
    h: &Homography,
    out_width: usize,
    out_height: usize,
) -> Result<(IrImage, Vec<bool>), RegisterError> {
    let warped = warp_image(&ir.data, ir.width, ir.height, 1, h, out_width, out_height)?;
    let mut data = warped.data;
    // Invalid pixels carry the calibration floor rather than 0 degC.
    for (v, ok) in data.iter_mut().zip(&warped.validity) {
        if !ok {
            *v = ir.calib_min;
        }
    }
    let img = IrImage::new(out_width, out_height, data, ir.calib_min, ir.calib_max)
        .expect("warp preserves finiteness");
    Ok((img, warped.validity))
}

/// Axis-aligned crop rectangle (x, y are the top-left corner).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropRect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl CropRect {
    pub fn area(&self) -> usize {
        self.width * self.height
    }

    /// Extract the rectangle from a channel-interleaved buffer.
    pub fn apply(&self, data: &[f32], width: usize, channels: usize) -> Vec<f32> {
        let mut out = Vec::with_capacity(self.width * self.height * channels);
        for y in self.y..self.y + self.height {
            let start = (y * width + self.x) * channels;
            out.extend_from_slice(&data[start..start + self.width * channels]);
        }
        out
    }

    pub fn apply_u8(&self, data: &[u8], width: usize, channels: usize) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.width * self.height * channels);
        for y in self.y..self.y + self.height {
            let start = (y * width + self.x) * channels;
            out.extend_from_slice(&data[start..start + self.width * channels]);
        }
        out
    }
}

/// Largest axis-aligned rectangle of `true` cells, by the histogram-stack
/// dynamic program over rows. Errors when the mask holds no valid pixel.
pub fn max_valid_rect(
    mask: &[bool],
    width: usize,
    height: usize,
) -> Result<CropRect, RegisterError> {
    assert_eq!(mask.len(), width * height);
    let mut heights = vec![0usize; width];
    let mut best: Option<CropRect> = None;
    for y in 0..height {
        for x in 0..width {
            heights[x] = if mask[y * width + x] {
                heights[x] + 1
            } else {
                0
            };
        }
        // Largest rectangle in histogram via a monotonic stack.
        let mut stack: Vec<usize> = Vec::new();
        for x in 0..=width {
            let cur = if x < width { heights[x] } else { 0 };
            while let Some(&top) = stack.last() {
                if heights[top] <= cur {
                    break;
                }
                stack.pop();
                let h = heights[top];
                let left = stack.last().map_or(0, |i| i + 1);
                let w = x - left;
                if best.as_ref().map_or(true, |b| w * h > b.area()) {
                    best = Some(CropRect {
                        x: left,
                        y: y + 1 - h,
                        width: w,
                        height: h,
                    });
                }
            }
            stack.push(x);
        }
    }
    best.ok_or(RegisterError::EmptyOverlap)
}

/// Cut both images of a registered pair to the largest rectangle fully
/// inside the validity mask. Returns the rectangle so callers can crop
/// further planes (e.g. the HDR ground truth) identically.
pub fn overlap_crop(
    rgb: (&[f32], usize, usize, usize),
    ir_warped: &IrImage,
    ir_validity: &[bool],
) -> Result<(Vec<f32>, IrImage, CropRect), RegisterError> {
    let (rgb_data, width, height, channels) = rgb;
    if (ir_warped.width, ir_warped.height) != (width, height) {
        return Err(RegisterError::DimensionMismatch {
            got: (width, height),
            other: (ir_warped.width, ir_warped.height),
        });
    }
    let rect = max_valid_rect(ir_validity, width, height)?;
    let rgb_crop = rect.apply(rgb_data, width, channels);
    let ir_crop = IrImage::new(
        rect.width,
        rect.height,
        rect.apply(&ir_warped.data, width, 1),
        ir_warped.calib_min,
        ir_warped.calib_max,
    )
    .expect("crop preserves invariants");
    Ok((rgb_crop, ir_crop, rect))
}
