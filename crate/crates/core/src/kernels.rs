//! Dense loops behind the tape operations. Every reduction runs in a fixed
//! sequential order.

use crate::scalar::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
}

/// `c[m×k] += a[m×n] · b[k×n]ᵀ`
pub fn matmul_acc_bt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (x, y) in arow.iter().zip(brow) {
                s += *x * *y;
            }
            c[i * k + p] += s;
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`
pub fn matmul_acc_at<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * *bv;
            }
        }
    }
}

pub fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
}

pub fn log_softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut s = T::zero();
    for &v in row.iter() {
        s += (v - max).exp();
    }
    let lse = max + s.ln();
    for v in row.iter_mut() {
        *v -= lse;
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub joints: usize,
    pub k: usize,
    pub stride: usize,
}

impl ConvGeometry {
    /// Input frame read by output frame `t` at tap `j`, if inside the signal.
    #[inline]
    fn source(&self, t: usize, j: usize) -> Option<usize> {
        let pad = (self.k - 1) / 2;
        let pos = (t * self.stride + j) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }
}

pub fn temporal_conv_forward<T: Scalar>(geo: &ConvGeometry, x: &[T], kernel: &[T], out: &mut [T]) {
    let v = geo.joints;
    for b in 0..geo.n {
        for o in 0..geo.c_out {
            for t in 0..geo.t_out {
                let orow = (((b * geo.c_out + o) * geo.t_out) + t) * v;
                for c in 0..geo.c_in {
                    for j in 0..geo.k {
                        let Some(src) = geo.source(t, j) else { continue };
                        let w = kernel[(o * geo.c_in + c) * geo.k + j];
                        let xrow = (((b * geo.c_in + c) * geo.t_in) + src) * v;
                        let (dst, srcs) = (&mut out[orow..orow + v], &x[xrow..xrow + v]);
                        for (d, s) in dst.iter_mut().zip(srcs) {
                            *d += w * *s;
                        }
                    }
                }
            }
        }
    }
}

pub fn temporal_conv_grad_input<T: Scalar>(geo: &ConvGeometry, g: &[T], kernel: &[T], dx: &mut [T]) {
    let v = geo.joints;
    for b in 0..geo.n {
        for o in 0..geo.c_out {
            for t in 0..geo.t_out {
                let grow = (((b * geo.c_out + o) * geo.t_out) + t) * v;
                for c in 0..geo.c_in {
                    for j in 0..geo.k {
                        let Some(src) = geo.source(t, j) else { continue };
                        let w = kernel[(o * geo.c_in + c) * geo.k + j];
                        let xrow = (((b * geo.c_in + c) * geo.t_in) + src) * v;
                        let (dst, gs) = (&mut dx[xrow..xrow + v], &g[grow..grow + v]);
                        for (d, s) in dst.iter_mut().zip(gs) {
                            *d += w * *s;
                        }
                    }
                }
            }
        }
    }
}

pub fn temporal_conv_grad_kernel<T: Scalar>(geo: &ConvGeometry, g: &[T], x: &[T], dk: &mut [T]) {
    let v = geo.joints;
    for b in 0..geo.n {
        for o in 0..geo.c_out {
            for t in 0..geo.t_out {
                let grow = (((b * geo.c_out + o) * geo.t_out) + t) * v;
                for c in 0..geo.c_in {
                    for j in 0..geo.k {
                        let Some(src) = geo.source(t, j) else { continue };
                        let xrow = (((b * geo.c_in + c) * geo.t_in) + src) * v;
                        let mut s = T::zero();
                        for (gv, xv) in g[grow..grow + v].iter().zip(&x[xrow..xrow + v]) {
                            s += *gv * *xv;
                        }
                        dk[(o * geo.c_in + c) * geo.k + j] += s;
                    }
                }
            }
        }
    }
}
