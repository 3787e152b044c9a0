//! Shared geometry between the procedural face renderer, the closed-form
//! pose estimator, and the landmark-based shape descriptor.
//!
//! The renderer encodes pose into image moments on purpose: the face blob
//! centroid carries yaw/pitch, its second-moment orientation carries roll,
//! expression coefficients are drawn into an opposing channel pair on a
//! fixed cosine basis, and the two eye dots (isolated by a channel
//! contrast) carry gaze. The estimator inverts those encodings with plain
//! differentiable arithmetic, so pose signals flow gradients back to
//! generated pixels while dataset frames keep exact oracle parameters.

use ndarray::{Array2, ArrayD, IxDyn};
use reenact_tensor::element::{elem, Element};
use reenact_tensor::{Tape, Var};

use crate::init;

/// Canvas shift per degree of yaw/pitch: +-90 deg maps to +-0.25 canvas.
pub const ANGLE_SHIFT: f64 = 0.25 / 90.0;
/// Canvas shift of the eye pair per radian of gaze.
pub const GAZE_SHIFT: f64 = 0.12;
/// Horizontal half-distance between the eyes, on the face center line.
pub const EYE_HALF_SPAN: f64 = 0.11;
pub const EYE_SIGMA: f64 = 0.035;
pub const EYE_AMP: f64 = 0.45;
/// Eye dot channel mix: +w0 on red, -w12 on each of green/blue. The mix is
/// luminance-dark and recoverable as c0 - (c1+c2)/2 = (w0 + w12) * dot.
pub const EYE_W0: f64 = 0.2;
pub const EYE_W12: f64 = 0.35;
pub const EYE_CONTRAST: f64 = EYE_W0 + EYE_W12;

pub const BG_LEVEL: f64 = 0.12;
pub const FACE_AMP: f64 = 0.55;
pub const TEX_AMP: f64 = 0.08;
pub const SIGMA_MAJOR: f64 = 0.26;
pub const SIGMA_MINOR: f64 = 0.18;

/// Expression pattern amplitude for `e_dims` coefficients.
pub fn expr_amp(e_dims: usize) -> f64 {
    0.35 / (e_dims.max(1) as f64).sqrt()
}

/// Pixel-center canvas coordinate.
pub fn canvas_coord(i: usize, res: usize) -> f64 {
    (i as f64 + 0.5) / res as f64
}

/// Windowed cosine basis for expression patterns: `e_dims` maps of
/// resolution `res`, flattened row-major, plus the pseudo-inverse of their
/// Gram matrix (for projection). Cached per (dims, resolution).
pub fn expression_basis(e_dims: usize, res: usize) -> std::sync::Arc<(Array2<f64>, Array2<f64>)> {
    use std::collections::BTreeMap;
    use std::sync::{Arc, Mutex, OnceLock};
    static CACHE: OnceLock<Mutex<BTreeMap<(usize, usize), Arc<(Array2<f64>, Array2<f64>)>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(|| Mutex::new(BTreeMap::new()));
    let mut guard = cache.lock().expect("basis cache lock");
    guard
        .entry((e_dims, res))
        .or_insert_with(|| Arc::new(expression_basis_uncached(e_dims, res)))
        .clone()
}

fn expression_basis_uncached(e_dims: usize, res: usize) -> (Array2<f64>, Array2<f64>) {
    let mut freqs = Vec::with_capacity(e_dims);
    'outer: for total in 1.. {
        for fx in 0..=total {
            let fy = total - fx;
            freqs.push((fx as f64, fy as f64));
            if freqs.len() == e_dims {
                break 'outer;
            }
        }
    }
    let mut basis = Array2::zeros((e_dims, res * res));
    for (j, &(fx, fy)) in freqs.iter().enumerate() {
        for y in 0..res {
            for x in 0..res {
                let u = canvas_coord(x, res);
                let v = canvas_coord(y, res);
                let r2 = (u - 0.5).powi(2) + (v - 0.5).powi(2);
                let window = (-r2 / (2.0 * 0.22f64.powi(2))).exp();
                basis[[j, y * res + x]] = window
                    * (std::f64::consts::PI * fx * u).cos()
                    * (std::f64::consts::PI * fy * v).cos();
            }
        }
    }
    let gram = basis.dot(&basis.t());
    let gram_na = nalgebra::DMatrix::from_fn(e_dims, e_dims, |r, c| gram[[r, c]]);
    let pinv = gram_na
        .svd(true, true)
        .pseudo_inverse(1e-10)
        .expect("gram pseudo-inverse");
    let mut gram_inv = Array2::zeros((e_dims, e_dims));
    for r in 0..e_dims {
        for c in 0..e_dims {
            gram_inv[[r, c]] = pinv[(r, c)];
        }
    }
    (basis, gram_inv)
}

/// Fixed landmark template: `k` points on a unit-ish ring plus the
/// expression-to-landmark mixing rows (each row sums to 1, so a uniform
/// expression shift moves every landmark coordinate by the same amount).
pub struct LandmarkModel {
    pub angles: Vec<f64>,
    pub radii: Vec<f64>,
    /// [k, e_dims] row-stochastic mix for the x displacement.
    pub mix_x: Array2<f64>,
    /// [k, e_dims] row-stochastic mix for the y displacement.
    pub mix_y: Array2<f64>,
}

impl LandmarkModel {
    pub fn new(k: usize, e_dims: usize) -> Self {
        let mut rng = init::rng_for(0x1a2b, "landmark-template");
        let angles = (0..k).map(|i| std::f64::consts::TAU * i as f64 / k as f64).collect();
        let radii = (0..k)
            .map(|_| 0.5 + 0.5 * (init::normal_f64(&mut rng).tanh() * 0.5 + 0.5))
            .collect();
        let mut mk = || {
            let mut m = Array2::zeros((k, e_dims));
            for r in 0..k {
                let mut row: Vec<f64> = (0..e_dims).map(|_| init::normal_f64(&mut rng).abs() + 0.05).collect();
                let s: f64 = row.iter().sum();
                for v in &mut row {
                    *v /= s;
                }
                for (c, v) in row.into_iter().enumerate() {
                    m[[r, c]] = v;
                }
            }
            m
        };
        let mix_x = mk();
        let mix_y = mk();
        LandmarkModel { angles, radii, mix_x, mix_y }
    }

    pub fn count(&self) -> usize {
        self.angles.len()
    }
}

/// Descriptor length: 3 Euler radians + expression + 2 coords per landmark.
pub fn descriptor_len(e_dims: usize, k: usize) -> usize {
    3 + e_dims + 2 * k
}

/// Differentiable shape descriptor from pose parameters:
/// [euler_rad(3) | expression(E) | landmarks(2K)].
///
/// `euler_deg` is [n, 3] (yaw, pitch, roll in degrees), `expr` is [n, E].
/// Landmarks ride on a ring rotated by roll, shifted by yaw/pitch, and
/// displaced by the row-stochastic expression mix.
pub fn shape_descriptor_var<T: Element>(
    t: &Tape<T>,
    model: &LandmarkModel,
    euler_deg: Var,
    expr: Var,
) -> Var {
    let n = t.shape(euler_deg)[0];
    let deg2rad = elem::<T>(std::f64::consts::PI / 180.0);
    let euler_rad = t.scale(euler_deg, deg2rad);

    let pick = |col: usize| -> Var {
        let mut sel = ArrayD::zeros(IxDyn(&[1, 3]));
        sel[[0, col]] = T::one();
        t.reshape(t.sum_axes_keepdim(t.mul(euler_rad, t.constant(sel)), &[1]), &[n, 1])
    };
    let yaw = pick(0);
    let pitch = pick(1);
    let roll = pick(2);

    let k = model.count();
    let angles = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, k]), model.angles.iter().map(|&a| elem(a)).collect()).unwrap());
    let radii = t.constant(ArrayD::from_shape_vec(IxDyn(&[1, k]), model.radii.iter().map(|&r| elem(r)).collect()).unwrap());
    let phases = t.add(roll, angles); // [n, k]
    let to_const = |m: &Array2<f64>| -> Var {
        t.constant(ArrayD::from_shape_fn(IxDyn(&[m.ncols(), m.nrows()]), |ix| elem(m[[ix[1], ix[0]]])))
    };
    // [n, E] @ [E, k]
    let dx = t.matmul(expr, to_const(&model.mix_x));
    let dy = t.matmul(expr, to_const(&model.mix_y));
    let lx = t.add(t.add(t.mul(t.cos(phases), radii), yaw), dx);
    let ly = t.add(t.add(t.mul(t.sin(phases), radii), pitch), dy);

    t.concat(&[euler_rad, expr, lx, ly], 1)
}

/// Shortest angular difference |a - b| in degrees with wraparound at 180.
pub fn angle_diff_deg(a: f64, b: f64) -> f64 {
    let mut d = (a - b) % 360.0;
    if d > 180.0 {
        d -= 360.0;
    }
    if d < -180.0 {
        d += 360.0;
    }
    d.abs()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn basis_projection_recovers_coefficients() {
        let pair = expression_basis(6, 32);
        let (basis, gram_inv) = (&pair.0, &pair.1);
        let coeffs = [0.3, -0.2, 0.1, 0.0, 0.25, -0.4];
        let mut img = vec![0.0f64; 32 * 32];
        for (j, &c) in coeffs.iter().enumerate() {
            for (px, b) in img.iter_mut().zip(basis.row(j)) {
                *px += c * b;
            }
        }
        let proj: Vec<f64> = (0..6)
            .map(|j| img.iter().zip(basis.row(j)).map(|(a, b)| a * b).sum())
            .collect();
        for r in 0..6 {
            let est: f64 = (0..6).map(|c| gram_inv[[r, c]] * proj[c]).sum();
            assert!((est - coeffs[r]).abs() < 1e-8, "coeff {r}: {est} vs {}", coeffs[r]);
        }
    }

    #[test]
    fn wraparound() {
        assert_eq!(angle_diff_deg(179.0, -179.0), 2.0);
        assert_eq!(angle_diff_deg(10.0, 25.0), 15.0);
        assert_eq!(angle_diff_deg(0.0, 0.0), 0.0);
    }

    #[test]
    fn landmark_mix_rows_sum_to_one() {
        let m = LandmarkModel::new(10, 50);
        for r in 0..10 {
            let sx: f64 = m.mix_x.row(r).sum();
            let sy: f64 = m.mix_y.row(r).sum();
            assert!((sx - 1.0).abs() < 1e-12);
            assert!((sy - 1.0).abs() < 1e-12);
        }
    }
}
