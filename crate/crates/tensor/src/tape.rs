//! A Wengert-list reverse-mode autodiff tape over dynamically shaped arrays.
//!
//! A [`Tape`] records one forward computation; [`Var`] handles index into it.
//! Parameter leaves are created with [`Tape::param`], constants with
//! [`Tape::constant`]. After building a scalar loss, [`Tape::backward`]
//! returns the gradients of every parameter leaf. Tapes are cheap and meant
//! to be rebuilt per training step.

use std::cell::RefCell;

use ndarray::{ArcArray, ArrayD, Axis, IxDyn, Slice};

use crate::element::{elem, elem_usize, Element};
use crate::kernels::{self, ConvDims};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

type BackFn<T> = Box<dyn Fn(&ArrayD<T>, &mut GradSink<T>)>;

struct Node<T: Element> {
    value: ArcArray<T, IxDyn>,
    needs_grad: bool,
    back: Option<BackFn<T>>,
}

pub struct GradSink<T: Element> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Element> GradSink<T> {
    pub fn add(&mut self, var: Var, grad: ArrayD<T>) {
        match &mut self.grads[var.0] {
            Some(g) => {
                debug_assert_eq!(g.shape(), grad.shape(), "gradient shape mismatch");
                *g += &grad;
            }
            slot => *slot = Some(grad),
        }
    }
}

/// Gradients of one backward pass, indexed by the forward [`Var`] handles.
pub struct Gradients<T: Element> {
    grads: Vec<Option<ArrayD<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&ArrayD<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient of a parameter leaf, zeros if the loss never touched it.
    pub fn get_or_zeros(&self, var: Var, shape: &[usize]) -> ArrayD<T> {
        match self.get(var) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

pub struct Tape<T: Element> {
    nodes: RefCell<Vec<Node<T>>>,
    grad_enabled: bool,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: true }
    }

    /// A tape that records values only; backward closures are dropped and
    /// `backward` must not be called. Used for inference paths.
    pub fn inference() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), grad_enabled: false }
    }

    fn push(&self, value: ArrayD<T>, needs_grad: bool, back: Option<BackFn<T>>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let needs_grad = needs_grad && self.grad_enabled;
        nodes.push(Node {
            value: value.into_shared(),
            needs_grad,
            back: if needs_grad { back } else { None },
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: ArrayD<T>) -> Var {
        self.push(value, false, None)
    }

    pub fn param(&self, value: ArrayD<T>) -> Var {
        self.push(value, true, None)
    }

    pub fn scalar(&self, value: T) -> Var {
        self.constant(ArrayD::from_elem(IxDyn(&[]), value))
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> ArcArray<T, IxDyn> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn scalar_value(&self, v: Var) -> T {
        let val = self.value(v);
        assert_eq!(val.len(), 1, "expected a scalar node");
        *val.iter().next().unwrap()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Reverse pass from a scalar loss node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert!(self.grad_enabled, "backward on an inference tape");
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "loss must be scalar");
        let mut sink = GradSink { grads: vec![None; nodes.len()] };
        sink.grads[loss.0] = Some(ArrayD::from_elem(nodes[loss.0].value.raw_dim(), T::one()));
        for id in (0..=loss.0).rev() {
            if sink.grads[id].is_none() {
                continue;
            }
            if let Some(back) = &nodes[id].back {
                let grad = sink.grads[id].take().expect("grad present");
                back(&grad, &mut sink);
                sink.grads[id] = Some(grad);
            }
        }
        Gradients { grads: sink.grads }
    }

    // ---- elementwise unary ----

    fn unary(
        &self,
        x: Var,
        f: impl Fn(T) -> T,
        df: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let xv = self.value(x);
        let out = xv.mapv(f);
        let needs = self.needs_grad(x);
        let back: Option<BackFn<T>> = if needs {
            let xv = xv.clone();
            Some(Box::new(move |gout, sink| {
                let mut g = gout.clone();
                g.zip_mut_with(&xv, |gi, &xi| *gi *= df(xi, T::zero()));
                sink.add(x, g);
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    pub fn neg(&self, x: Var) -> Var {
        self.unary(x, |v| -v, |_, _| -T::one())
    }

    pub fn abs(&self, x: Var) -> Var {
        self.unary(x, |v| v.abs(), |v, _| if v >= T::zero() { T::one() } else { -T::one() })
    }

    pub fn square(&self, x: Var) -> Var {
        let two = elem::<T>(2.0);
        self.unary(x, |v| v * v, move |v, _| two * v)
    }

    pub fn sqrt(&self, x: Var) -> Var {
        let half = elem::<T>(0.5);
        self.unary(x, |v| v.sqrt(), move |v, _| half / v.sqrt())
    }

    /// 1 / sqrt(x + eps)
    pub fn rsqrt_eps(&self, x: Var, eps: T) -> Var {
        let half = elem::<T>(0.5);
        self.unary(
            x,
            move |v| (v + eps).sqrt().recip(),
            move |v, _| {
                let r = (v + eps).sqrt().recip();
                -half * r * r * r
            },
        )
    }

    pub fn tanh(&self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), |v, _| T::one() - v.tanh() * v.tanh())
    }

    pub fn sin(&self, x: Var) -> Var {
        self.unary(x, |v| v.sin(), |v, _| v.cos())
    }

    pub fn cos(&self, x: Var) -> Var {
        self.unary(x, |v| v.cos(), |v, _| -v.sin())
    }

    pub fn leaky_relu(&self, x: Var, slope: T) -> Var {
        self.unary(
            x,
            move |v| if v >= T::zero() { v } else { v * slope },
            move |v, _| if v >= T::zero() { T::one() } else { slope },
        )
    }

    pub fn scale(&self, x: Var, c: T) -> Var {
        self.unary(x, move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, x: Var, c: T) -> Var {
        self.unary(x, move |v| v + c, |_, _| T::one())
    }

    // ---- broadcasting binary ----

    fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
        let nd = a.len().max(b.len());
        let mut out = vec![0; nd];
        for i in 0..nd {
            let da = if i < nd - a.len() { 1 } else { a[i - (nd - a.len())] };
            let db = if i < nd - b.len() { 1 } else { b[i - (nd - b.len())] };
            assert!(
                da == db || da == 1 || db == 1,
                "incompatible broadcast shapes {a:?} vs {b:?}"
            );
            out[i] = da.max(db);
        }
        out
    }

    /// Sum `grad` down to `shape` along broadcast axes.
    fn reduce_to(grad: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
        let mut g = grad.clone();
        while g.ndim() > shape.len() {
            g = g.sum_axis(Axis(0));
        }
        for (ax, (&gd, &sd)) in g.shape().to_vec().iter().zip(shape).enumerate() {
            if sd == 1 && gd != 1 {
                let mut summed = g.sum_axis(Axis(ax));
                summed.insert_axis_inplace(Axis(ax));
                g = summed;
            }
        }
        g
    }

    fn binary(
        &self,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        dfa: impl Fn(T, T) -> T + 'static,
        dfb: impl Fn(T, T) -> T + 'static,
    ) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let out_shape = Self::broadcast_shape(av.shape(), bv.shape());
        let ab = av.broadcast(IxDyn(&out_shape)).expect("broadcast a");
        let bb = bv.broadcast(IxDyn(&out_shape)).expect("broadcast b");
        let mut out = ArrayD::zeros(IxDyn(&out_shape));
        ndarray::Zip::from(&mut out).and(&ab).and(&bb).for_each(|o, &x, &y| *o = f(x, y));
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back: Option<BackFn<T>> = if na || nb {
            let (av, bv) = (av.clone(), bv.clone());
            let out_shape = out_shape.clone();
            Some(Box::new(move |gout, sink| {
                let ab = av.broadcast(IxDyn(&out_shape)).expect("broadcast a");
                let bb = bv.broadcast(IxDyn(&out_shape)).expect("broadcast b");
                if na {
                    let mut g = gout.clone();
                    ndarray::Zip::from(&mut g).and(&ab).and(&bb).for_each(|gi, &x, &y| *gi *= dfa(x, y));
                    sink.add(a, Self::reduce_to(&g, av.shape()));
                }
                if nb {
                    let mut g = gout.clone();
                    ndarray::Zip::from(&mut g).and(&ab).and(&bb).for_each(|gi, &x, &y| *gi *= dfb(x, y));
                    sink.add(b, Self::reduce_to(&g, bv.shape()));
                }
            }))
        } else {
            None
        };
        self.push(out, na || nb, back)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x + y, |_, _| T::one(), |_, _| T::one())
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x - y, |_, _| T::one(), |_, _| -T::one())
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x * y, |_, y| y, |x, _| x)
    }

    pub fn div(&self, a: Var, b: Var) -> Var {
        self.binary(a, b, |x, y| x / y, |_, y| y.recip(), |x, y| -x / (y * y))
    }

    /// Elementwise atan2(y, x); both arguments must share a shape.
    pub fn atan2(&self, y: Var, x: Var) -> Var {
        assert_eq!(self.shape(y), self.shape(x), "atan2 expects equal shapes");
        self.binary(
            y,
            x,
            |yy, xx| yy.atan2(xx),
            |yy, xx| xx / (xx * xx + yy * yy),
            |yy, xx| -yy / (xx * xx + yy * yy),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&self, x: Var) -> Var {
        let xv = self.value(x);
        let total: T = xv.iter().copied().sum();
        let needs = self.needs_grad(x);
        let shape = xv.shape().to_vec();
        let back: Option<BackFn<T>> = if needs {
            Some(Box::new(move |gout, sink| {
                let g = gout.iter().next().copied().unwrap();
                sink.add(x, ArrayD::from_elem(IxDyn(&shape), g));
            }))
        } else {
            None
        };
        self.push(ArrayD::from_elem(IxDyn(&[]), total), needs, back)
    }

    pub fn mean_all(&self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, elem_usize::<T>(n).recip())
    }

    /// Sum over the given axes, keeping them as length-1 dims.
    pub fn sum_axes_keepdim(&self, x: Var, axes: &[usize]) -> Var {
        let xv = self.value(x);
        let mut sorted: Vec<usize> = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        let mut out = xv.to_owned();
        for &ax in sorted.iter().rev() {
            let mut summed = out.sum_axis(Axis(ax));
            summed.insert_axis_inplace(Axis(ax));
            out = summed;
        }
        let needs = self.needs_grad(x);
        let in_shape = xv.shape().to_vec();
        let back: Option<BackFn<T>> = if needs {
            Some(Box::new(move |gout, sink| {
                let g = gout.broadcast(IxDyn(&in_shape)).expect("broadcast grad").to_owned();
                sink.add(x, g);
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    // ---- shape ----

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let xv = self.value(x);
        let in_shape = xv.shape().to_vec();
        assert_eq!(
            xv.len(),
            shape.iter().product::<usize>(),
            "reshape length mismatch {in_shape:?} -> {shape:?}"
        );
        let out = xv
            .to_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("reshape");
        let needs = self.needs_grad(x);
        let back: Option<BackFn<T>> = if needs {
            Some(Box::new(move |gout, sink| {
                let g = gout.clone().into_shape_with_order(IxDyn(&in_shape)).expect("reshape grad");
                sink.add(x, g);
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|&v| self.value(v)).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let out = ndarray::concatenate(Axis(axis), &views).expect("concat");
        let needs = parts.iter().any(|&v| self.needs_grad(v));
        let back: Option<BackFn<T>> = if needs {
            let parts = parts.to_vec();
            let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
            let flags: Vec<bool> = parts.iter().map(|&v| self.needs_grad(v)).collect();
            Some(Box::new(move |gout, sink| {
                let mut offset = 0isize;
                for ((&part, &len), &flag) in parts.iter().zip(&lens).zip(&flags) {
                    if flag {
                        let piece = gout
                            .slice_axis(Axis(axis), Slice::new(offset, Some(offset + len as isize), 1))
                            .to_owned();
                        sink.add(part, piece);
                    }
                    offset += len as isize;
                }
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    /// Stack scalar nodes into a 1-D vector.
    pub fn stack_scalars(&self, parts: &[Var]) -> Var {
        let reshaped: Vec<Var> = parts.iter().map(|&p| self.reshape(p, &[1])).collect();
        self.concat(&reshaped, 0)
    }

    /// Repeat the trailing 1x1 spatial dims of [..., 1, 1] out to [..., k, k].
    pub fn repeat_spatial(&self, x: Var, k: usize) -> Var {
        let xv = self.value(x);
        let nd = xv.ndim();
        assert!(nd >= 2 && xv.shape()[nd - 1] == 1 && xv.shape()[nd - 2] == 1, "expected trailing 1x1 dims");
        let mut out_shape = xv.shape().to_vec();
        out_shape[nd - 1] = k;
        out_shape[nd - 2] = k;
        let out = xv.broadcast(IxDyn(&out_shape)).expect("repeat broadcast").to_owned();
        let needs = self.needs_grad(x);
        let back: Option<BackFn<T>> = if needs {
            Some(Box::new(move |gout, sink| {
                let mut g = gout.sum_axis(Axis(nd - 1));
                g.insert_axis_inplace(Axis(nd - 1));
                let mut g = g.sum_axis(Axis(nd - 2));
                g.insert_axis_inplace(Axis(nd - 2));
                sink.add(x, g);
            }))
        } else {
            None
        };
        self.push(out, needs, back)
    }

    // ---- linear algebra / nn ----

    /// [m,k] @ [k,n] -> [m,n]
    pub fn matmul(&self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.ndim(), 2, "matmul lhs must be 2-d");
        assert_eq!(bv.ndim(), 2, "matmul rhs must be 2-d");
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (k2, n) = (bv.shape()[0], bv.shape()[1]);
        assert_eq!(k, k2, "matmul inner dims differ");
        let a_sl = av.as_standard_layout().into_owned();
        let b_sl = bv.as_standard_layout().into_owned();
        let mut out = vec![T::zero(); m * n];
        kernels::matmul(a_sl.as_slice().unwrap(), b_sl.as_slice().unwrap(), m, k, n, &mut out);
        let (na, nb) = (self.needs_grad(a), self.needs_grad(b));
        let back: Option<BackFn<T>> = if na || nb {
            Some(Box::new(move |gout, sink| {
                let g = gout.as_standard_layout();
                let gs = g.as_slice().unwrap();
                if na {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_grad_a(gs, b_sl.as_slice().unwrap(), m, k, n, &mut ga);
                    sink.add(a, ArrayD::from_shape_vec(IxDyn(&[m, k]), ga).unwrap());
                }
                if nb {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::matmul_grad_b(a_sl.as_slice().unwrap(), gs, m, k, n, &mut gb);
                    sink.add(b, ArrayD::from_shape_vec(IxDyn(&[k, n]), gb).unwrap());
                }
            }))
        } else {
            None
        };
        self.push(ArrayD::from_shape_vec(IxDyn(&[m, n]), out).unwrap(), na || nb, back)
    }

    /// Stride-1 2D convolution. `x` is [n, c_in, h, w]; `w` is
    /// [c_out, c_in, kh, kw], or [n, c_out, c_in, kh, kw] when `per_sample`.
    pub fn conv2d_general(&self, x: Var, w: Var, pad: usize, per_sample: bool) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        assert_eq!(xv.ndim(), 4, "conv input must be [n,c,h,w]");
        let ws = wv.shape();
        let d = if per_sample {
            assert_eq!(wv.ndim(), 5, "per-sample weights must be [n,co,ci,kh,kw]");
            assert_eq!(ws[0], xv.shape()[0], "weight batch mismatch");
            ConvDims {
                batch: xv.shape()[0],
                c_in: xv.shape()[1],
                h: xv.shape()[2],
                w: xv.shape()[3],
                c_out: ws[1],
                kh: ws[3],
                kw: ws[4],
                pad,
                per_sample: true,
            }
        } else {
            assert_eq!(wv.ndim(), 4, "weights must be [co,ci,kh,kw]");
            ConvDims {
                batch: xv.shape()[0],
                c_in: xv.shape()[1],
                h: xv.shape()[2],
                w: xv.shape()[3],
                c_out: ws[0],
                kh: ws[2],
                kw: ws[3],
                pad,
                per_sample: false,
            }
        };
        assert_eq!(d.c_in, if per_sample { ws[2] } else { ws[1] }, "channel mismatch");
        let x_sl = xv.as_standard_layout().into_owned();
        let w_sl = wv.as_standard_layout().into_owned();
        let mut out = vec![T::zero(); d.out_len()];
        kernels::conv2d(x_sl.as_slice().unwrap(), w_sl.as_slice().unwrap(), &d, &mut out);
        let out_shape = vec![d.batch, d.c_out, d.out_h(), d.out_w()];
        let (nx, nw) = (self.needs_grad(x), self.needs_grad(w));
        let back: Option<BackFn<T>> = if nx || nw {
            let w_shape = ws.to_vec();
            let x_shape = xv.shape().to_vec();
            Some(Box::new(move |gout, sink| {
                let g = gout.as_standard_layout();
                let gs = g.as_slice().unwrap();
                if nx {
                    let mut gin = vec![T::zero(); x_shape.iter().product()];
                    kernels::conv2d_grad_input(gs, w_sl.as_slice().unwrap(), &d, &mut gin);
                    sink.add(x, ArrayD::from_shape_vec(IxDyn(&x_shape), gin).unwrap());
                }
                if nw {
                    let mut gw = vec![T::zero(); w_shape.iter().product()];
                    kernels::conv2d_grad_weight(x_sl.as_slice().unwrap(), gs, &d, &mut gw);
                    sink.add(w, ArrayD::from_shape_vec(IxDyn(&w_shape), gw).unwrap());
                }
            }))
        } else {
            None
        };
        self.push(ArrayD::from_shape_vec(IxDyn(&out_shape), out).unwrap(), nx || nw, back)
    }

    pub fn conv2d(&self, x: Var, w: Var, pad: usize) -> Var {
        self.conv2d_general(x, w, pad, false)
    }

    pub fn conv2d_per_sample(&self, x: Var, w: Var, pad: usize) -> Var {
        self.conv2d_general(x, w, pad, true)
    }

    pub fn upsample2x(&self, x: Var) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4, "upsample input must be [n,c,h,w]");
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        let x_sl = xv.as_standard_layout().into_owned();
        let mut out = vec![T::zero(); n * c * 4 * h * w];
        kernels::upsample2x(x_sl.as_slice().unwrap(), n * c, h, w, &mut out);
        let needs = self.needs_grad(x);
        let back: Option<BackFn<T>> = if needs {
            Some(Box::new(move |gout, sink| {
                let g = gout.as_standard_layout();
                let mut gin = vec![T::zero(); n * c * h * w];
                kernels::upsample2x_grad(g.as_slice().unwrap(), n * c, h, w, &mut gin);
                sink.add(x, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gin).unwrap());
            }))
        } else {
            None
        };
        self.push(
            ArrayD::from_shape_vec(IxDyn(&[n, c, 2 * h, 2 * w]), out).unwrap(),
            needs,
            back,
        )
    }

    pub fn adaptive_avg_pool(&self, x: Var, oh: usize, ow: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.ndim(), 4, "pool input must be [n,c,h,w]");
        let (n, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
        assert!(h >= oh && w >= ow, "adaptive pool cannot upsample ({h}x{w} -> {oh}x{ow})");
        let x_sl = xv.as_standard_layout().into_owned();
        let mut out = vec![T::zero(); n * c * oh * ow];
        kernels::adaptive_avg_pool(x_sl.as_slice().unwrap(), n * c, h, w, oh, ow, &mut out);
        let needs = self.needs_grad(x);
        let back: Option<BackFn<T>> = if needs {
            Some(Box::new(move |gout, sink| {
                let g = gout.as_standard_layout();
                let mut gin = vec![T::zero(); n * c * h * w];
                kernels::adaptive_avg_pool_grad(g.as_slice().unwrap(), n * c, h, w, oh, ow, &mut gin);
                sink.add(x, ArrayD::from_shape_vec(IxDyn(&[n, c, h, w]), gin).unwrap());
            }))
        } else {
            None
        };
        self.push(ArrayD::from_shape_vec(IxDyn(&[n, c, oh, ow]), out).unwrap(), needs, back)
    }
}
