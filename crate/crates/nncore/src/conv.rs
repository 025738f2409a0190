//! Convolution kernels: im2col lowering onto the GEMM in [`Scalar`].

use crate::scalar::Scalar;

/// Geometry of one convolution: image side `h x w` with `c` channels,
/// kernel `kh x kw`, stride and zero padding.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn rows(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfold one image (c x h x w) into the patch matrix (c*kh*kw x oh*ow).
pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, col: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    debug_assert_eq!(col.len(), g.rows() * g.cols());
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * g.cols();
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let in_y = iy >= 0 && (iy as usize) < g.h;
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        col[row + oy * ow + ox] = if in_y && ix >= 0 && (ix as usize) < g.w {
                            img[(c * g.h + iy as usize) * g.w + ix as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add the patch matrix back into an image.
pub(crate) fn col2im<T: Scalar>(col: &[T], g: &ConvGeom, img: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    debug_assert_eq!(img.len(), g.c * g.h * g.w);
    for c in 0..g.c {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = ((c * g.kh + ky) * g.kw + kx) * g.cols();
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix as usize >= g.w {
                            continue;
                        }
                        let at = (c * g.h + iy as usize) * g.w + ix as usize;
                        img[at] = img[at] + col[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

/// y[n,co,oh,ow] = W[co,ci,kh,kw] (*) x[n,ci,h,w] + b
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    weight: &[T],
    co: usize,
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let img_len = g.c * g.h * g.w;
    let out_len = co * cols;
    let mut col = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); n * out_len];
    for i in 0..n {
        im2col(&x[i * img_len..(i + 1) * img_len], g, &mut col);
        T::gemm(
            co,
            rows,
            cols,
            T::one(),
            weight,
            &col,
            T::zero(),
            &mut out[i * out_len..(i + 1) * out_len],
        );
        if let Some(b) = bias {
            let chunk = &mut out[i * out_len..(i + 1) * out_len];
            for (ch, bc) in b.iter().enumerate() {
                for v in &mut chunk[ch * cols..(ch + 1) * cols] {
                    *v = *v + *bc;
                }
            }
        }
    }
    out
}

/// Gradients of [`conv2d_forward`] w.r.t. input, weight, and bias.
pub(crate) fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    weight: &[T],
    co: usize,
    dy: &[T],
    g: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (rows, cols) = (g.rows(), g.cols());
    let img_len = g.c * g.h * g.w;
    let out_len = co * cols;
    let mut col = vec![T::zero(); rows * cols];
    let mut dcol = vec![T::zero(); rows * cols];
    let mut dx = vec![T::zero(); n * img_len];
    let mut dw = vec![T::zero(); co * rows];
    let mut db = vec![T::zero(); co];
    // W^T in row-major form, reused across the batch.
    let mut wt = vec![T::zero(); rows * co];
    for r in 0..co {
        for c in 0..rows {
            wt[c * co + r] = weight[r * rows + c];
        }
    }
    for i in 0..n {
        let dy_i = &dy[i * out_len..(i + 1) * out_len];
        im2col(&x[i * img_len..(i + 1) * img_len], g, &mut col);
        // dW += dY * col^T : (co x cols) * (cols x rows)
        let mut colt = vec![T::zero(); cols * rows];
        for r in 0..rows {
            for c in 0..cols {
                colt[c * rows + r] = col[r * cols + c];
            }
        }
        T::gemm(co, cols, rows, T::one(), dy_i, &colt, T::one(), &mut dw);
        // dcol = W^T * dY : (rows x co) * (co x cols)
        T::gemm(rows, co, cols, T::one(), &wt, dy_i, T::zero(), &mut dcol);
        col2im(&dcol, g, &mut dx[i * img_len..(i + 1) * img_len]);
        for ch in 0..co {
            let mut s = T::zero();
            for v in &dy_i[ch * cols..(ch + 1) * cols] {
                s = s + *v;
            }
            db[ch] = db[ch] + s;
        }
    }
    (dx, dw, db)
}

/// Transposed convolution: the adjoint of a stride-`s` convolution with the
/// same kernel. `x[n,a,h,w]`, `weight[a,b,kh,kw]` -> `y[n,b,H,W]` with
/// `H = (h-1)s + kh - 2p`.
pub(crate) fn convt2d_forward<T: Scalar>(
    x: &[T],
    n: usize,
    a: usize,
    weight: &[T],
    b_ch: usize,
    bias: Option<&[T]>,
    g_out: &ConvGeom, // geometry of the *output* image as conv input
) -> Vec<T> {
    let (rows, cols) = (g_out.rows(), g_out.cols());
    debug_assert_eq!(g_out.c, b_ch);
    let in_len = a * cols; // x spatial dims equal conv output dims
    let out_len = b_ch * g_out.h * g_out.w;
    // W^T: (rows x a) from weight (a x rows)
    let mut wt = vec![T::zero(); rows * a];
    for r in 0..a {
        for c in 0..rows {
            wt[c * a + r] = weight[r * rows + c];
        }
    }
    let mut colbuf = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); n * out_len];
    for i in 0..n {
        let x_i = &x[i * in_len..(i + 1) * in_len];
        T::gemm(rows, a, cols, T::one(), &wt, x_i, T::zero(), &mut colbuf);
        let out_i = &mut out[i * out_len..(i + 1) * out_len];
        col2im(&colbuf, g_out, out_i);
        if let Some(b) = bias {
            for (ch, bc) in b.iter().enumerate() {
                for v in &mut out_i[ch * g_out.h * g_out.w..(ch + 1) * g_out.h * g_out.w] {
                    *v = *v + *bc;
                }
            }
        }
    }
    out
}

/// Gradients of [`convt2d_forward`].
pub(crate) fn convt2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    a: usize,
    weight: &[T],
    dy: &[T],
    g_out: &ConvGeom,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (rows, cols) = (g_out.rows(), g_out.cols());
    let b_ch = g_out.c;
    let in_len = a * cols;
    let out_len = b_ch * g_out.h * g_out.w;
    let mut dx = vec![T::zero(); n * in_len];
    let mut dw = vec![T::zero(); a * rows];
    let mut db = vec![T::zero(); b_ch];
    let mut col = vec![T::zero(); rows * cols];
    for i in 0..n {
        let dy_i = &dy[i * out_len..(i + 1) * out_len];
        im2col(dy_i, g_out, &mut col);
        // dx = W * im2col(dY) : (a x rows) * (rows x cols)
        T::gemm(
            a,
            rows,
            cols,
            T::one(),
            weight,
            &col,
            T::zero(),
            &mut dx[i * in_len..(i + 1) * in_len],
        );
        // dW += x * im2col(dY)^T : (a x cols) * (cols x rows)
        let mut colt = vec![T::zero(); cols * rows];
        for r in 0..rows {
            for c in 0..cols {
                colt[c * rows + r] = col[r * cols + c];
            }
        }
        T::gemm(
            a,
            cols,
            rows,
            T::one(),
            &x[i * in_len..(i + 1) * in_len],
            &colt,
            T::one(),
            &mut dw,
        );
        for ch in 0..b_ch {
            let mut s = T::zero();
            for v in &dy_i[ch * g_out.h * g_out.w..(ch + 1) * g_out.h * g_out.w] {
                s = s + *v;
            }
            db[ch] = db[ch] + s;
        }
    }
    (dx, dw, db)
}
