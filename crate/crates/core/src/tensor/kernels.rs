//! Raw numeric kernels over flat row-major buffers.
//!
//! Nothing here knows about autodiff; the tensor ops compose these for both
//! their forward and backward rules.

/// `c[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        let arow = &a[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let dot: f64 = arow.iter().zip(brow).map(|(x, y)| x * y).sum();
            c[i * n + j] += dot;
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub(crate) fn gemm_tn(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            let crow = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// Sliding-window geometry shared by convolution and its adjoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Window {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Window {
    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        if pos >= 0 && (pos as usize) < extent {
            Some(pos as usize)
        } else {
            None
        }
    }
}

/// Unfolds one image `[C, H, W]` into `[C·kh·kw, out_h·out_w]`.
pub(crate) fn im2col(w: &Window, image: &[f64], col: &mut [f64]) {
    debug_assert_eq!(image.len(), w.channels * w.height * w.width);
    debug_assert_eq!(col.len(), w.col_rows() * w.col_cols());
    let cols = w.col_cols();
    for c in 0..w.channels {
        let plane = &image[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ki in 0..w.kh {
            for kj in 0..w.kw {
                let row = (c * w.kh + ki) * w.kw + kj;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oi in 0..w.out_h {
                    let src_i = w.source(oi, ki, w.height);
                    for oj in 0..w.out_w {
                        dst[oi * w.out_w + oj] = match (src_i, w.source(oj, kj, w.width)) {
                            (Some(si), Some(sj)) => plane[si * w.width + sj],
                            _ => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters `[C·kh·kw, out_h·out_w]` back into
/// `[C, H, W]`, accumulating overlapping windows.
pub(crate) fn col2im(w: &Window, col: &[f64], image: &mut [f64]) {
    debug_assert_eq!(image.len(), w.channels * w.height * w.width);
    debug_assert_eq!(col.len(), w.col_rows() * w.col_cols());
    let cols = w.col_cols();
    for c in 0..w.channels {
        let plane = &mut image[c * w.height * w.width..(c + 1) * w.height * w.width];
        for ki in 0..w.kh {
            for kj in 0..w.kw {
                let row = (c * w.kh + ki) * w.kw + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oi in 0..w.out_h {
                    let Some(si) = w.source(oi, ki, w.height) else {
                        continue;
                    };
                    for oj in 0..w.out_w {
                        if let Some(sj) = w.source(oj, kj, w.width) {
                            plane[si * w.width + sj] += src[oi * w.out_w + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Numpy-style broadcast of two shapes (trailing dimensions aligned, size-1
/// dimensions stretch). Returns `None` when incompatible.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for d in 0..nd {
        let da = if d + a.len() >= nd { a[d + a.len() - nd] } else { 1 };
        let db = if d + b.len() >= nd { b[d + b.len() - nd] } else { 1 };
        out[d] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// For every flat index of `big`, the flat index into `small` that
/// broadcasting reads from. `small` must broadcast to `big`.
pub(crate) fn broadcast_offsets(small: &[usize], big: &[usize]) -> Vec<usize> {
    let nd = big.len();
    let pad = nd - small.len();
    let mut strides = vec![0usize; nd];
    let mut acc = 1;
    for d in (0..nd).rev() {
        let sd = if d >= pad { small[d - pad] } else { 1 };
        strides[d] = if sd == 1 { 0 } else { acc };
        acc *= sd;
    }
    let total: usize = big.iter().product();
    let mut out = Vec::with_capacity(total);
    let mut idx = vec![0usize; nd];
    let mut off = 0usize;
    for _ in 0..total {
        out.push(off);
        for d in (0..nd).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < big[d] {
                break;
            }
            off -= strides[d] * big[d];
            idx[d] = 0;
        }
    }
    out
}
