//! Raw loops behind the graph ops.

use super::Scalar;

#[allow(clippy::too_many_arguments)]
pub(crate) fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    a_len: usize,
    (rsa, csa): (isize, isize),
    b_len: usize,
    (rsb, csb): (isize, isize),
    c_len: usize,
) {
    assert!(rsa >= 0 && csa >= 0 && rsb >= 0 && csb >= 0, "negative strides");
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| {
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(last(m, k, rsa, csa) <= a_len, "gemm: lhs out of bounds");
    assert!(last(k, n, rsb, csb) <= b_len, "gemm: rhs out of bounds");
    assert!(m * n <= c_len, "gemm: output out of bounds");
}

/// Output extent of a 3x3 "same"-padded convolution.
pub(crate) fn conv_out(extent: usize, stride: usize) -> usize {
    (extent - 1) / stride + 1
}

/// Unfolds one image `[c, h, w]` into columns `[c*9, oh*ow]`.
pub(crate) fn im2col<T: Scalar>(img: &[T], c: usize, h: usize, w: usize, stride: usize, cols: &mut [T]) {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let p = oh * ow;
    for ch in 0..c {
        for di in 0..3 {
            for dj in 0..3 {
                let row = (ch * 9 + di * 3 + dj) * p;
                for i in 0..oh {
                    let y = (i * stride + di) as isize - 1;
                    for j in 0..ow {
                        let x = (j * stride + dj) as isize - 1;
                        cols[row + i * ow + j] = if y >= 0 && (y as usize) < h && x >= 0 && (x as usize) < w {
                            img[(ch * h + y as usize) * w + x as usize]
                        } else {
                            T::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back into an image.
pub(crate) fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, stride: usize, img: &mut [T]) {
    let (oh, ow) = (conv_out(h, stride), conv_out(w, stride));
    let p = oh * ow;
    for ch in 0..c {
        for di in 0..3 {
            for dj in 0..3 {
                let row = (ch * 9 + di * 3 + dj) * p;
                for i in 0..oh {
                    let y = (i * stride + di) as isize - 1;
                    if y < 0 || y as usize >= h {
                        continue;
                    }
                    for j in 0..ow {
                        let x = (j * stride + dj) as isize - 1;
                        if x < 0 || x as usize >= w {
                            continue;
                        }
                        img[(ch * h + y as usize) * w + x as usize] += cols[row + i * ow + j];
                    }
                }
            }
        }
    }
}

/// Index of the normalization group (feature or channel) for each element,
/// plus the number of groups and elements per group.
pub(crate) struct BnLayout {
    pub groups: usize,
    pub per_group: usize,
    pub n: usize,
    pub inner: usize,
}

impl BnLayout {
    pub fn from_shape(shape: &[usize]) -> Option<Self> {
        match shape {
            [n, d] => Some(Self {
                groups: *d,
                per_group: *n,
                n: *n,
                inner: 1,
            }),
            [n, c, h, w] => Some(Self {
                groups: *c,
                per_group: n * h * w,
                n: *n,
                inner: h * w,
            }),
            _ => None,
        }
    }

    /// Visits every flat index belonging to group `g`.
    #[inline]
    pub fn for_group(&self, g: usize, mut f: impl FnMut(usize)) {
        for b in 0..self.n {
            let base = (b * self.groups + g) * self.inner;
            for t in 0..self.inner {
                f(base + t);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), y> == <x, col2im(y)>
        let (c, h, w, s) = (2, 5, 4, 2);
        let x: Vec<f64> = (0..c * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let p = conv_out(h, s) * conv_out(w, s);
        let y: Vec<f64> = (0..c * 9 * p).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; c * 9 * p];
        im2col(&x, c, h, w, s, &mut cols);
        let mut back = vec![0.0; c * h * w];
        col2im(&y, c, h, w, s, &mut back);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
