// Raw slice kernels behind the tape operations. Every output element is
// accumulated in a fixed order, so results do not depend on scheduling.

use super::Element;

/// `c[m,n] += a[m,k] · b[k,n]`
pub(crate) fn gemm_nn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            let b_row = &b[t * n..(t + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m,n] += a[m,k] · b[n,k]ᵀ`
pub(crate) fn gemm_nt<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::zero();
            for (&av, &bv) in a_row.iter().zip(b_row) {
                acc += av * bv;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c[m,n] += a[k,m]ᵀ · b[k,n]`
pub(crate) fn gemm_tn<T: Element>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for t in 0..k {
        let b_row = &b[t * n..(t + 1) * n];
        for i in 0..m {
            let av = a[t * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }

    pub fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }

    /// Rows of the unfolded patch matrix.
    pub fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h() * self.out_w()
    }
}

/// Unfolds one `[c_in, h, w]` image into a `[c_in·kh·kw, oh·ow]` patch matrix.
pub(crate) fn im2col<T: Element>(input: &[T], g: ConvGeometry, cols: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    debug_assert_eq!(cols.len(), g.patch_len() * p);
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let src = &plane[(oy + dy) * g.w + dx..(oy + dy) * g.w + dx + ow];
                    dst[oy * ow..(oy + 1) * ow].copy_from_slice(src);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the image.
pub(crate) fn col2im_add<T: Element>(cols: &[T], g: ConvGeometry, input_grad: &mut [T]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.c_in {
        let plane = &mut input_grad[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for dy in 0..g.kh {
            for dx in 0..g.kw {
                let row = (ci * g.kh + dy) * g.kw + dx;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..oh {
                    let dst = &mut plane[(oy + dy) * g.w + dx..(oy + dy) * g.w + dx + ow];
                    for (d, &s) in dst.iter_mut().zip(&src[oy * ow..(oy + 1) * ow]) {
                        *d += s;
                    }
                }
            }
        }
    }
}
