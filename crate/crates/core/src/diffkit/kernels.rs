//! Raw numeric kernels behind the graph operations.

use crate::par::Exec;

/// Work (in multiply-adds) below which splitting a product is not worth it.
const PAR_GEMM_WORK: usize = 1 << 18;

/// Strided operand: element `(i, j)` lives at `i * rs + j * cs`.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rs: usize,
    pub cs: usize,
}

impl<'a> View<'a> {
    pub fn rows(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` block.
    pub fn transposed(data: &'a [f64], cols: usize) -> Self {
        View { data, rs: 1, cs: cols }
    }

    pub fn select(data: &'a [f64], cols: usize, transpose: bool) -> Self {
        if transpose {
            Self::transposed(data, cols)
        } else {
            Self::rows(data, cols)
        }
    }
}

/// `c (m x n, row-major) = a (m x k) * b (k x n)`, or `+=` when `accumulate`.
pub(crate) fn gemm(
    exec: Exec,
    m: usize,
    k: usize,
    n: usize,
    a: View,
    b: View,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c.fill(0.0);
        }
        return;
    }
    let beta = if accumulate { 1.0 } else { 0.0 };
    let threads = exec.threads();
    let run = |row0: usize, rows: usize, out: &mut [f64]| {
        let a_off = row0 * a.rs;
        // SAFETY: the views cover rows `row0..row0 + rows` of `a` and all of
        // `b`, `out` is a contiguous `rows x n` block, and the strides match
        // the row-major layouts the callers pass in.
        unsafe {
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a.data.as_ptr().add(a_off),
                a.rs as isize,
                a.cs as isize,
                b.data.as_ptr(),
                b.rs as isize,
                b.cs as isize,
                beta,
                out.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    };
    if threads > 1 && m * k * n >= PAR_GEMM_WORK && m >= 2 * threads {
        let rows_per = m.div_ceil(threads);
        exec.for_each_chunk_mut(c, rows_per * n, |ci, out| {
            run(ci * rows_per, out.len() / n, out)
        });
    } else {
        run(0, m, c);
    }
}

/// Reorders axes: output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = super::tensor::strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

pub(crate) fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn locs(&self) -> usize {
        self.ho * self.wo
    }
}

/// Unfolds `[B, C, H, W]` into rows `(b, oy, ox)` of length `C * kh * kw`.
pub(crate) fn im2col(exec: Exec, x: &[f64], g: ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let mut cols = vec![0.0; g.batch * g.locs() * plen];
    let chw = g.c_in * g.h * g.w;
    exec.for_each_chunk_mut(&mut cols, g.locs() * plen, |b, out| {
        let img = &x[b * chw..(b + 1) * chw];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &mut out[(oy * g.wo + ox) * plen..(oy * g.wo + ox + 1) * plen];
                let mut p = 0;
                for c in 0..g.c_in {
                    for ky in 0..g.kh {
                        let src = c * g.h * g.w + (oy * g.stride + ky) * g.w + ox * g.stride;
                        row[p..p + g.kw].copy_from_slice(&img[src..src + g.kw]);
                        p += g.kw;
                    }
                }
            }
        }
    });
    cols
}

/// Adjoint of [`im2col`]: scatters patch rows back onto the input grid.
pub(crate) fn col2im(exec: Exec, cols: &[f64], g: ConvGeom) -> Vec<f64> {
    let plen = g.patch_len();
    let chw = g.c_in * g.h * g.w;
    let mut x = vec![0.0; g.batch * chw];
    exec.for_each_chunk_mut(&mut x, chw, |b, img| {
        let src_rows = &cols[b * g.locs() * plen..(b + 1) * g.locs() * plen];
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &src_rows[(oy * g.wo + ox) * plen..(oy * g.wo + ox + 1) * plen];
                let mut p = 0;
                for c in 0..g.c_in {
                    for ky in 0..g.kh {
                        let dst = c * g.h * g.w + (oy * g.stride + ky) * g.w + ox * g.stride;
                        for (d, s) in img[dst..dst + g.kw].iter_mut().zip(&row[p..p + g.kw]) {
                            *d += s;
                        }
                        p += g.kw;
                    }
                }
            }
        }
    });
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes_match_loops() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(Exec::Sequential, m, k, n, View::rows(&a, k), View::rows(&b, n), &mut c, false);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|p| a[i * k + p] * b[p * n + j]).sum();
                assert!((c[i * n + j] - want).abs() < 1e-13);
            }
        }
        // a^T stored as k x m
        let at: Vec<f64> = (0..k * m).map(|idx| a[(idx % m) * k + idx / m]).collect();
        let mut c2 = vec![0.0; m * n];
        gemm(Exec::Sequential, m, k, n, View::transposed(&at, m), View::rows(&b, n), &mut c2, false);
        assert_eq!(c, c2);
    }

    #[test]
    fn parallel_gemm_is_bitwise_sequential() {
        let (m, k, n) = (300, 64, 40);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.013).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.7).cos()).collect();
        let mut c1 = vec![0.0; m * n];
        let mut c2 = vec![0.0; m * n];
        gemm(Exec::Sequential, m, k, n, View::rows(&a, k), View::rows(&b, n), &mut c1, false);
        gemm(Exec::Parallel, m, k, n, View::rows(&a, k), View::rows(&b, n), &mut c2, false);
        assert_eq!(c1, c2);
    }

    #[test]
    fn permute_roundtrip() {
        let shape = [2, 3, 4];
        let data: Vec<f64> = (0..24).map(f64::from).collect();
        let (p, ps) = permute(&data, &shape, &[2, 0, 1]);
        assert_eq!(ps, vec![4, 2, 3]);
        // out[c][a][b] = in[a][b][c]
        assert_eq!(p[1 * 6 + 0 * 3 + 2], data[0 * 12 + 2 * 4 + 1]);
        let (back, bs) = permute(&p, &ps, &inverse_perm(&[2, 0, 1]));
        assert_eq!(bs, shape.to_vec());
        assert_eq!(back, data);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            batch: 2,
            c_in: 2,
            h: 5,
            w: 6,
            kh: 3,
            kw: 2,
            stride: 2,
            ho: 2,
            wo: 3,
        };
        let x: Vec<f64> = (0..2 * 2 * 5 * 6).map(|i| (i as f64 * 0.3).sin()).collect();
        let y: Vec<f64> = (0..2 * 6 * 12).map(|i| (i as f64 * 0.17).cos()).collect();
        let ax = im2col(Exec::Sequential, &x, g);
        let aty = col2im(Exec::Sequential, &y, g);
        let lhs: f64 = ax.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&aty).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
