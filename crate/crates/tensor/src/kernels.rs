//! Dense compute kernels behind the tape ops.
//!
//! Every kernel has a sequential implementation; with the `parallel` feature
//! (default) the public entry points fan work out over rayon instead. Both
//! paths accumulate in the same nested-loop order, so results are bitwise
//! identical regardless of feature selection or thread count: parallelism is
//! only ever over disjoint output slots.

use crate::element::{elem_usize, Element};

/// Shape bundle for a stride-1 2D convolution.
#[derive(Debug, Clone, Copy)]
pub struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    /// One kernel set per batch sample (modulated convolution) instead of a
    /// single shared kernel.
    pub per_sample: bool,
}

impl ConvDims {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }

    pub fn out_len(&self) -> usize {
        self.batch * self.c_out * self.out_h() * self.out_w()
    }

    fn padded_h(&self) -> usize {
        self.h + 2 * self.pad
    }

    fn padded_w(&self) -> usize {
        self.w + 2 * self.pad
    }

    fn kernel_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn weight_base(&self, n: usize, o: usize) -> usize {
        if self.per_sample {
            (n * self.c_out + o) * self.kernel_len()
        } else {
            o * self.kernel_len()
        }
    }
}

#[cfg(feature = "parallel")]
fn for_each_chunk<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    use rayon::prelude::*;
    buf.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

#[cfg(not(feature = "parallel"))]
fn for_each_chunk<T, F>(buf: &mut [T], chunk: usize, f: F)
where
    T: Send,
    F: Fn(usize, &mut [T]) + Sync,
{
    buf.chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
}

fn pad_input<T: Element>(x: &[T], d: &ConvDims) -> Vec<T> {
    if d.pad == 0 {
        return x.to_vec();
    }
    let (hp, wp) = (d.padded_h(), d.padded_w());
    let mut out = vec![T::zero(); d.batch * d.c_in * hp * wp];
    for nc in 0..d.batch * d.c_in {
        let src = &x[nc * d.h * d.w..(nc + 1) * d.h * d.w];
        let dst = &mut out[nc * hp * wp..(nc + 1) * hp * wp];
        for y in 0..d.h {
            let drow = (y + d.pad) * wp + d.pad;
            dst[drow..drow + d.w].copy_from_slice(&src[y * d.w..(y + 1) * d.w]);
        }
    }
    out
}

fn axpy<T: Element>(a: T, x: &[T], y: &mut [T]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * *xi;
    }
}

fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(x, y)| *x * *y).sum()
}

fn conv_out_plane<T: Element>(xp_n: &[T], wgt_o: &[T], d: &ConvDims, out: &mut [T]) {
    let (hp, wp) = (d.padded_h(), d.padded_w());
    let (oh, ow) = (d.out_h(), d.out_w());
    for i in 0..d.c_in {
        let plane = &xp_n[i * hp * wp..(i + 1) * hp * wp];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let wv = wgt_o[(i * d.kh + ky) * d.kw + kx];
                if wv == T::zero() {
                    continue;
                }
                for y in 0..oh {
                    let src = (y + ky) * wp + kx;
                    axpy(wv, &plane[src..src + ow], &mut out[y * ow..(y + 1) * ow]);
                }
            }
        }
    }
}

/// out[n,o,y,x] = sum_{i,ky,kx} x[n,i,y+ky-p,x+kx-p] * w[(n,)o,i,ky,kx]
pub fn conv2d_seq<T: Element>(x: &[T], wgt: &[T], d: &ConvDims, out: &mut [T]) {
    let xp = pad_input(x, d);
    let (hp, wp) = (d.padded_h(), d.padded_w());
    let plane = d.out_h() * d.out_w();
    for no in 0..d.batch * d.c_out {
        let (n, o) = (no / d.c_out, no % d.c_out);
        let xp_n = &xp[n * d.c_in * hp * wp..(n + 1) * d.c_in * hp * wp];
        let wb = d.weight_base(n, o);
        conv_out_plane(
            xp_n,
            &wgt[wb..wb + d.kernel_len()],
            d,
            &mut out[no * plane..(no + 1) * plane],
        );
    }
}

pub fn conv2d<T: Element>(x: &[T], wgt: &[T], d: &ConvDims, out: &mut [T]) {
    let xp = pad_input(x, d);
    let (hp, wp) = (d.padded_h(), d.padded_w());
    let plane = d.out_h() * d.out_w();
    let dd = *d;
    for_each_chunk(out, plane, |no, out_plane| {
        let (n, o) = (no / dd.c_out, no % dd.c_out);
        let xp_n = &xp[n * dd.c_in * hp * wp..(n + 1) * dd.c_in * hp * wp];
        let wb = dd.weight_base(n, o);
        conv_out_plane(xp_n, &wgt[wb..wb + dd.kernel_len()], &dd, out_plane);
    });
}

fn grad_input_plane<T: Element>(gout_n: &[T], wgt: &[T], d: &ConvDims, n: usize, i: usize, gp: &mut [T]) {
    let wp = d.padded_w();
    let (oh, ow) = (d.out_h(), d.out_w());
    for o in 0..d.c_out {
        let gplane = &gout_n[o * oh * ow..(o + 1) * oh * ow];
        let wb = d.weight_base(n, o);
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let wv = wgt[wb + (i * d.kh + ky) * d.kw + kx];
                if wv == T::zero() {
                    continue;
                }
                for y in 0..oh {
                    let dst = (y + ky) * wp + kx;
                    axpy(wv, &gplane[y * ow..(y + 1) * ow], &mut gp[dst..dst + ow]);
                }
            }
        }
    }
}

fn crop_padded<T: Element>(gpad: &[T], d: &ConvDims, gin: &mut [T]) {
    let (hp, wp) = (d.padded_h(), d.padded_w());
    if d.pad == 0 {
        gin.copy_from_slice(gpad);
        return;
    }
    for nc in 0..d.batch * d.c_in {
        let src = &gpad[nc * hp * wp..(nc + 1) * hp * wp];
        let dst = &mut gin[nc * d.h * d.w..(nc + 1) * d.h * d.w];
        for y in 0..d.h {
            let s = (y + d.pad) * wp + d.pad;
            dst[y * d.w..(y + 1) * d.w].copy_from_slice(&src[s..s + d.w]);
        }
    }
}

/// Gradient of `conv2d` with respect to the input.
pub fn conv2d_grad_input<T: Element>(gout: &[T], wgt: &[T], d: &ConvDims, gin: &mut [T]) {
    let (hp, wp) = (d.padded_h(), d.padded_w());
    let mut gpad = vec![T::zero(); d.batch * d.c_in * hp * wp];
    let (oh, ow) = (d.out_h(), d.out_w());
    let dd = *d;
    for_each_chunk(&mut gpad, hp * wp, |ni, gp| {
        let (n, i) = (ni / dd.c_in, ni % dd.c_in);
        let gout_n = &gout[n * dd.c_out * oh * ow..(n + 1) * dd.c_out * oh * ow];
        grad_input_plane(gout_n, wgt, &dd, n, i, gp);
    });
    crop_padded(&gpad, d, gin);
}

pub fn conv2d_grad_input_seq<T: Element>(gout: &[T], wgt: &[T], d: &ConvDims, gin: &mut [T]) {
    let (hp, wp) = (d.padded_h(), d.padded_w());
    let mut gpad = vec![T::zero(); d.batch * d.c_in * hp * wp];
    let (oh, ow) = (d.out_h(), d.out_w());
    for ni in 0..d.batch * d.c_in {
        let (n, i) = (ni / d.c_in, ni % d.c_in);
        let gout_n = &gout[n * d.c_out * oh * ow..(n + 1) * d.c_out * oh * ow];
        grad_input_plane(gout_n, wgt, d, n, i, &mut gpad[ni * hp * wp..(ni + 1) * hp * wp]);
    }
    crop_padded(&gpad, d, gin);
}

fn grad_weight_block<T: Element>(xp: &[T], gout: &[T], d: &ConvDims, n0: usize, n1: usize, o: usize, gw: &mut [T]) {
    let (hp, wp) = (d.padded_h(), d.padded_w());
    let (oh, ow) = (d.out_h(), d.out_w());
    for i in 0..d.c_in {
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let mut acc = T::zero();
                for n in n0..n1 {
                    let gplane = &gout[(n * d.c_out + o) * oh * ow..(n * d.c_out + o + 1) * oh * ow];
                    let xplane = &xp[(n * d.c_in + i) * hp * wp..(n * d.c_in + i + 1) * hp * wp];
                    for y in 0..oh {
                        let src = (y + ky) * wp + kx;
                        acc += dot(&gplane[y * ow..(y + 1) * ow], &xplane[src..src + ow]);
                    }
                }
                gw[(i * d.kh + ky) * d.kw + kx] = acc;
            }
        }
    }
}

/// Gradient of `conv2d` with respect to the kernel tensor. `gw` has the same
/// layout as the forward weights ([n,]c_out,c_in,kh,kw).
pub fn conv2d_grad_weight<T: Element>(x: &[T], gout: &[T], d: &ConvDims, gw: &mut [T]) {
    let xp = pad_input(x, d);
    let klen = d.kernel_len();
    let dd = *d;
    for_each_chunk(gw, klen, |idx, block| {
        let (n0, n1, o) = if dd.per_sample {
            (idx / dd.c_out, idx / dd.c_out + 1, idx % dd.c_out)
        } else {
            (0, dd.batch, idx)
        };
        grad_weight_block(&xp, gout, &dd, n0, n1, o, block);
    });
}

pub fn conv2d_grad_weight_seq<T: Element>(x: &[T], gout: &[T], d: &ConvDims, gw: &mut [T]) {
    let xp = pad_input(x, d);
    let klen = d.kernel_len();
    let blocks = if d.per_sample { d.batch * d.c_out } else { d.c_out };
    for idx in 0..blocks {
        let (n0, n1, o) = if d.per_sample {
            (idx / d.c_out, idx / d.c_out + 1, idx % d.c_out)
        } else {
            (0, d.batch, idx)
        };
        grad_weight_block(&xp, gout, d, n0, n1, o, &mut gw[idx * klen..(idx + 1) * klen]);
    }
}

/// out = a @ b for row-major a [m,k], b [k,n].
pub fn matmul<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let _ = m;
    for_each_chunk(out, n, |row, out_row| {
        for kk in 0..k {
            let av = a[row * k + kk];
            if av != T::zero() {
                axpy(av, &b[kk * n..(kk + 1) * n], out_row);
            }
        }
    });
}

pub fn matmul_seq<T: Element>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    let _ = m;
    out.chunks_mut(n).enumerate().for_each(|(row, out_row)| {
        for kk in 0..k {
            let av = a[row * k + kk];
            if av != T::zero() {
                axpy(av, &b[kk * n..(kk + 1) * n], out_row);
            }
        }
    });
}

/// ga[m,k] = sum_n gout[m,n] * b[k,n]
pub fn matmul_grad_a<T: Element>(gout: &[T], b: &[T], m: usize, k: usize, n: usize, ga: &mut [T]) {
    let _ = m;
    for_each_chunk(ga, k, |row, ga_row| {
        let gr = &gout[row * n..(row + 1) * n];
        for (kk, slot) in ga_row.iter_mut().enumerate() {
            *slot = dot(gr, &b[kk * n..(kk + 1) * n]);
        }
    });
}

/// gb[k,n] = sum_m a[m,k] * gout[m,n]
pub fn matmul_grad_b<T: Element>(a: &[T], gout: &[T], m: usize, k: usize, n: usize, gb: &mut [T]) {
    for_each_chunk(gb, n, |kk, gb_row| {
        for mm in 0..m {
            let av = a[mm * k + kk];
            if av != T::zero() {
                axpy(av, &gout[mm * n..(mm + 1) * n], gb_row);
            }
        }
    });
}

/// Nearest-neighbour 2x upsampling of [planes, h, w].
pub fn upsample2x<T: Element>(x: &[T], planes: usize, h: usize, w: usize, out: &mut [T]) {
    let _ = planes;
    for_each_chunk(out, 4 * h * w, |p, op| {
        let ip = &x[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let v = ip[y * w + x_];
                let r0 = 2 * y * 2 * w + 2 * x_;
                op[r0] = v;
                op[r0 + 1] = v;
                op[r0 + 2 * w] = v;
                op[r0 + 2 * w + 1] = v;
            }
        }
    });
}

pub fn upsample2x_grad<T: Element>(gout: &[T], planes: usize, h: usize, w: usize, gin: &mut [T]) {
    let _ = planes;
    for_each_chunk(gin, h * w, |p, gp| {
        let op = &gout[p * 4 * h * w..(p + 1) * 4 * h * w];
        for y in 0..h {
            for x_ in 0..w {
                let r0 = 2 * y * 2 * w + 2 * x_;
                gp[y * w + x_] = op[r0] + op[r0 + 1] + op[r0 + 2 * w] + op[r0 + 2 * w + 1];
            }
        }
    });
}

fn pool_bin(i: usize, in_len: usize, out_len: usize) -> (usize, usize) {
    let start = i * in_len / out_len;
    let end = ((i + 1) * in_len).div_ceil(out_len);
    (start, end)
}

/// Adaptive average pooling of [planes, h, w] down to (oh, ow).
pub fn adaptive_avg_pool<T: Element>(x: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize, out: &mut [T]) {
    let _ = planes;
    for_each_chunk(out, oh * ow, |p, op| {
        let ip = &x[p * h * w..(p + 1) * h * w];
        for y in 0..oh {
            let (y0, y1) = pool_bin(y, h, oh);
            for x_ in 0..ow {
                let (x0, x1) = pool_bin(x_, w, ow);
                let mut acc = T::zero();
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        acc += ip[yy * w + xx];
                    }
                }
                op[y * ow + x_] = acc / elem_usize::<T>((y1 - y0) * (x1 - x0));
            }
        }
    });
}

pub fn adaptive_avg_pool_grad<T: Element>(gout: &[T], planes: usize, h: usize, w: usize, oh: usize, ow: usize, gin: &mut [T]) {
    let _ = planes;
    for_each_chunk(gin, h * w, |p, gp| {
        let op = &gout[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..oh {
            let (y0, y1) = pool_bin(y, h, oh);
            for x_ in 0..ow {
                let (x0, x1) = pool_bin(x_, w, ow);
                let g = op[y * ow + x_] / elem_usize::<T>((y1 - y0) * (x1 - x0));
                for yy in y0..y1 {
                    for xx in x0..x1 {
                        gp[yy * w + xx] += g;
                    }
                }
            }
        }
    });
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fill(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 37 % 101) as f32 - 50.0) * scale).collect()
    }

    /// Parallel and sequential paths accumulate in the same order, so they
    /// must agree bitwise.
    #[test]
    fn parallel_matches_sequential_bitwise() {
        let d = ConvDims {
            batch: 3,
            c_in: 5,
            h: 9,
            w: 9,
            c_out: 7,
            kh: 3,
            kw: 3,
            pad: 1,
            per_sample: false,
        };
        let x = fill(d.batch * d.c_in * d.h * d.w, 1e-2);
        let w = fill(d.c_out * d.c_in * 9, 3e-3);
        let mut a = vec![0.0f32; d.out_len()];
        let mut b = vec![0.0f32; d.out_len()];
        conv2d(&x, &w, &d, &mut a);
        conv2d_seq(&x, &w, &d, &mut b);
        assert_eq!(a, b);

        let gout = fill(d.out_len(), 5e-3);
        let mut ga = vec![0.0f32; x.len()];
        let mut gb = vec![0.0f32; x.len()];
        conv2d_grad_input(&gout, &w, &d, &mut ga);
        conv2d_grad_input_seq(&gout, &w, &d, &mut gb);
        assert_eq!(ga, gb);

        let mut wa = vec![0.0f32; w.len()];
        let mut wb = vec![0.0f32; w.len()];
        conv2d_grad_weight(&x, &gout, &d, &mut wa);
        conv2d_grad_weight_seq(&x, &gout, &d, &mut wb);
        assert_eq!(wa, wb);

        let (m, k, n) = (4, 6, 5);
        let ma = fill(m * k, 1e-2);
        let mb = fill(k * n, 1e-2);
        let mut oa = vec![0.0f32; m * n];
        let mut ob = vec![0.0f32; m * n];
        matmul(&ma, &mb, m, k, n, &mut oa);
        matmul_seq(&ma, &mb, m, k, n, &mut ob);
        assert_eq!(oa, ob);
    }

    #[test]
    fn per_sample_conv_uses_each_sample_kernel() {
        let d = ConvDims {
            batch: 2,
            c_in: 1,
            h: 2,
            w: 2,
            c_out: 1,
            kh: 1,
            kw: 1,
            pad: 0,
            per_sample: true,
        };
        let x = vec![1.0f32, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0];
        let w = vec![2.0f32, 10.0];
        let mut out = vec![0.0f32; d.out_len()];
        conv2d(&x, &w, &d, &mut out);
        assert_eq!(out, vec![2.0, 4.0, 6.0, 8.0, 10.0, 20.0, 30.0, 40.0]);
    }
}
