//! Raw slice kernels behind the graph ops. Layout is NHWC throughout and
//! kernels are `[kh, kw, cin, cout]`, so a kernel is already the row-major
//! `[kh*kw*cin, cout]` matrix that multiplies an im2col buffer.

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub pad_h: usize,
    pub pad_w: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.batch * self.out_h * self.out_w
    }

    pub fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }

    /// A 1x1 same-padded conv reads its input directly as the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.pad_h == 0 && self.pad_w == 0
    }
}

pub(crate) fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let patch = g.patch();
    let mut cols = vec![0.0f32; g.rows() * patch];
    let mut row = 0;
    for b in 0..g.batch {
        let img = &x[b * g.in_h * g.in_w * g.cin..(b + 1) * g.in_h * g.in_w * g.cin];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let dst = &mut cols[row * patch..(row + 1) * patch];
                for dy in 0..g.kh {
                    let iy = (oy + dy) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for dx in 0..g.kw {
                        let ix = (ox + dx) as isize - g.pad_w as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let src = (iy as usize * g.in_w + ix as usize) * g.cin;
                        let off = (dy * g.kw + dx) * g.cin;
                        dst[off..off + g.cin].copy_from_slice(&img[src..src + g.cin]);
                    }
                }
                row += 1;
            }
        }
    }
    cols
}

pub(crate) fn col2im_add(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let patch = g.patch();
    let mut row = 0;
    for b in 0..g.batch {
        let img = &mut dx[b * g.in_h * g.in_w * g.cin..(b + 1) * g.in_h * g.in_w * g.cin];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let src = &cols[row * patch..(row + 1) * patch];
                for dy in 0..g.kh {
                    let iy = (oy + dy) as isize - g.pad_h as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for dxk in 0..g.kw {
                        let ix = (ox + dxk) as isize - g.pad_w as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        let dst = (iy as usize * g.in_w + ix as usize) * g.cin;
                        let off = (dy * g.kw + dxk) * g.cin;
                        for (d, s) in img[dst..dst + g.cin].iter_mut().zip(&src[off..off + g.cin]) {
                            *d += s;
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `c = op(a) * op(b) + beta * c` with row-major storage; `ta`/`tb` mean the
/// stored matrix is the transpose of the operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv_forward(x: &[f32], kernel: &[f32], bias: &[f32], g: &ConvGeom) -> Vec<f32> {
    let rows = g.rows();
    let mut out = vec![0.0f32; rows * g.cout];
    for r in 0..rows {
        out[r * g.cout..(r + 1) * g.cout].copy_from_slice(bias);
    }
    if g.is_pointwise() {
        gemm(
            rows,
            g.patch(),
            g.cout,
            x,
            false,
            kernel,
            false,
            1.0,
            &mut out,
        );
    } else {
        let cols = im2col(x, g);
        gemm(
            rows,
            g.patch(),
            g.cout,
            &cols,
            false,
            kernel,
            false,
            1.0,
            &mut out,
        );
    }
    out
}

pub(crate) struct ConvGrads {
    pub dx: Option<Vec<f32>>,
    pub dk: Option<Vec<f32>>,
    pub db: Option<Vec<f32>>,
}

pub(crate) fn conv_backward(
    x: &[f32],
    kernel: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    want: [bool; 3],
) -> ConvGrads {
    let rows = g.rows();
    let patch = g.patch();
    let cols_owned;
    let cols: &[f32] = if g.is_pointwise() {
        x
    } else if want[1] {
        cols_owned = im2col(x, g);
        &cols_owned
    } else {
        &[]
    };

    let dk = want[1].then(|| {
        let mut dk = vec![0.0f32; patch * g.cout];
        gemm(patch, rows, g.cout, cols, true, dout, false, 0.0, &mut dk);
        dk
    });
    let db = want[2].then(|| {
        let mut db = vec![0.0f32; g.cout];
        for r in dout.chunks_exact(g.cout) {
            for (d, v) in db.iter_mut().zip(r) {
                *d += v;
            }
        }
        db
    });
    let dx = want[0].then(|| {
        if g.is_pointwise() {
            let mut dx = vec![0.0f32; rows * patch];
            gemm(rows, g.cout, patch, dout, false, kernel, true, 0.0, &mut dx);
            dx
        } else {
            let mut dcols = vec![0.0f32; rows * patch];
            gemm(
                rows, g.cout, patch, dout, false, kernel, true, 0.0, &mut dcols,
            );
            let mut dx = vec![0.0f32; g.batch * g.in_h * g.in_w * g.cin];
            col2im_add(&dcols, g, &mut dx);
            dx
        }
    });
    ConvGrads { dx, dk, db }
}

/// Numerically stable softmax of one channel vector into `out`.
pub(crate) fn softmax_into(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o *= inv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn softmax_is_shift_invariant() {
        let mut a = [0.0; 3];
        let mut b = [0.0; 3];
        softmax_into(&[1.0, 2.0, 3.0], &mut a);
        softmax_into(&[1001.0, 1002.0, 1003.0], &mut b);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
