//! Dense inner loops shared by the differentiable primitives.

/// `c = op(a) · op(b) + beta · c` on row-major buffers, where `op(a)` is
/// `m×k` and `op(b)` is `k×n`. A transposed operand is stored in its
/// un-transposed layout (`k×m` resp. `n×k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    trans_a: bool,
    b: &[f32],
    trans_b: bool,
    c: &mut [f32],
    beta: f32,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the m·k, k·n and m·n
    // elements whose lengths are checked by the debug assertions and
    // by every caller constructing these buffers from shapes.
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

/// Geometry of one 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn col_rows(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `lo..hi` whose input column `ox·stride + k − pad` lies inside `0..w`.
fn valid_range(k: usize, g: &ConvGeom) -> (usize, usize) {
    let lo = g.pad.saturating_sub(k).div_ceil(g.stride).min(g.w_out);
    let hi = if g.w + g.pad <= k {
        0
    } else {
        ((g.w + g.pad - k - 1) / g.stride + 1).min(g.w_out)
    };
    (lo, hi.max(lo))
}

/// Unfolds one `C×H×W` sample into a `(C·kh·kw) × (h_out·w_out)` matrix.
pub fn im2col(x: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    im2col_strided(x, g, cols, g.col_cols());
}

/// [`im2col`] writing row `r` of the unfolded matrix at `cols[r·ld..]`.
pub fn im2col_strided(x: &[f32], g: &ConvGeom, cols: &mut [f32], ld: usize) {
    let hw_out = g.col_cols();
    let same = g.stride == 1 && g.h_out == g.h && g.w_out == g.w;
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld..row * ld + hw_out];
                if same {
                    shifted_plane(plane, g, ki, kj, dst);
                    continue;
                }
                let (lo, hi) = valid_range(kj, g);
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    out_row[..lo].fill(0.0);
                    out_row[hi..].fill(0.0);
                    if lo < hi {
                        let first = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            out_row[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                        } else {
                            for (o, s) in out_row[lo..hi].iter_mut().zip(src[first..].iter().step_by(g.stride)) {
                                *o = *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Stride-1 size-preserving tap `(ki, kj)`: the plane shifted by the tap
/// offset as one copy, then the wrapped-around columns cleared.
fn shifted_plane(plane: &[f32], g: &ConvGeom, ki: usize, kj: usize, dst: &mut [f32]) {
    let hw = g.h * g.w;
    let off = (ki as isize - g.pad as isize) * g.w as isize + kj as isize - g.pad as isize;
    let lo = (-off).clamp(0, hw as isize) as usize;
    let hi = (hw as isize - off).clamp(0, hw as isize) as usize;
    dst[..lo].fill(0.0);
    dst[hi.max(lo)..].fill(0.0);
    if lo < hi {
        let s = (lo as isize + off) as usize;
        dst[lo..hi].copy_from_slice(&plane[s..s + hi - lo]);
    }
    if kj < g.pad {
        let bad = (g.pad - kj).min(g.w);
        for row in dst.chunks_exact_mut(g.w) {
            row[..bad].fill(0.0);
        }
    } else if kj > g.pad {
        let bad = (kj - g.pad).min(g.w);
        for row in dst.chunks_exact_mut(g.w) {
            row[g.w - bad..].fill(0.0);
        }
    }
}

/// Adjoint of [`im2col`]: scatters-and-adds columns back into a sample.
pub fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    col2im_strided(cols, g, dx, g.col_cols());
}

/// Adjoint of [`im2col_strided`].
pub fn col2im_strided(cols: &[f32], g: &ConvGeom, dx: &mut [f32], ld: usize) {
    let hw_out = g.col_cols();
    for c in 0..g.c_in {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld..row * ld + hw_out];
                let (lo, hi) = valid_range(kj, g);
                if lo >= hi {
                    continue;
                }
                let first = lo * g.stride + kj - g.pad;
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * g.w_out + lo..oy * g.w_out + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[first..first + s.len()].iter_mut().zip(s) {
                            *d += *v;
                        }
                    } else {
                        for (d, v) in dst[first..].iter_mut().step_by(g.stride).zip(s) {
                            *d += *v;
                        }
                    }
                }
            }
        }
    }
}

pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
