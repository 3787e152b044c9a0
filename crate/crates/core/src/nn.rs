//! Small tape-level building blocks shared by the model modules.

use ndarray::ArrayD;
use reenact_tensor::element::{elem, Element};
use reenact_tensor::{Tape, Var};

/// Registry of trainable leaves bound into a tape, in insertion order.
#[derive(Default)]
pub struct ParamReg {
    entries: Vec<(String, Var)>,
}

impl ParamReg {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, var: Var) {
        self.entries.push((name.into(), var));
    }

    pub fn entries(&self) -> &[(String, Var)] {
        &self.entries
    }
}

/// Binds a tensor into the tape: as a trainable leaf when a registry is
/// given, as a frozen constant otherwise.
pub fn bind<T: Element>(
    tape: &Tape<T>,
    reg: &mut Option<&mut ParamReg>,
    name: &str,
    value: &ArrayD<T>,
) -> Var {
    match reg {
        Some(r) => {
            let v = tape.param(value.clone());
            r.push(name, v);
            v
        }
        None => tape.constant(value.clone()),
    }
}

/// x [n, fin] @ w [fin, fout] + b [fout]
pub fn linear<T: Element>(t: &Tape<T>, x: Var, w: Var, b: Var) -> Var {
    t.add(t.matmul(x, w), b)
}

/// Adds a per-channel bias [c] onto [n, c, h, w].
pub fn bias_channels<T: Element>(t: &Tape<T>, x: Var, b: Var) -> Var {
    let c = t.shape(b)[0];
    t.add(x, t.reshape(b, &[c, 1, 1]))
}

/// Mean over each sample of [n, ...] -> [n].
pub fn mean_per_sample<T: Element>(t: &Tape<T>, x: Var) -> Var {
    let shape = t.shape(x);
    let n = shape[0];
    let rest: usize = shape[1..].iter().product();
    let flat = t.reshape(x, &[n, rest]);
    let s = t.sum_axes_keepdim(flat, &[1]);
    t.scale(t.reshape(s, &[n]), elem::<T>(1.0 / rest as f64))
}

/// L2-normalizes each row of [n, d].
pub fn l2_normalize_rows<T: Element>(t: &Tape<T>, x: Var, eps: f64) -> Var {
    let sq = t.sum_axes_keepdim(t.square(x), &[1]);
    t.mul(x, t.rsqrt_eps(sq, elem(eps)))
}

/// Per-sample standardization of [n, c, h, w] to zero mean, unit variance.
pub fn standardize<T: Element>(t: &Tape<T>, x: Var, eps: f64) -> Var {
    let shape = t.shape(x);
    let count: usize = shape[1..].iter().product();
    let inv = elem::<T>(1.0 / count as f64);
    let mean = t.scale(t.sum_axes_keepdim(x, &[1, 2, 3]), inv);
    let centered = t.sub(x, mean);
    let var = t.scale(t.sum_axes_keepdim(t.square(centered), &[1, 2, 3]), inv);
    t.mul(centered, t.rsqrt_eps(var, elem(eps)))
}

/// Cosine similarity of matching rows of two [n, d] matrices -> [n].
pub fn row_cosine<T: Element>(t: &Tape<T>, a: Var, b: Var) -> Var {
    let n = t.shape(a)[0];
    let prod = t.sum_axes_keepdim(t.mul(a, b), &[1]);
    let na = t.rsqrt_eps(t.sum_axes_keepdim(t.square(a), &[1]), elem(1e-12));
    let nb = t.rsqrt_eps(t.sum_axes_keepdim(t.square(b), &[1]), elem(1e-12));
    t.reshape(t.mul(t.mul(prod, na), nb), &[n])
}
