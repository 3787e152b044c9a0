//! Finite-difference verification of every tape op's backward pass.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reenact_tensor::fdcheck::max_grad_rel_err;
use reenact_tensor::{Tape, Var};

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> ArrayD<f64> {
    ArrayD::from_shape_fn(IxDyn(shape), |_| {
        let u1: f64 = rng.gen_range(1e-9..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    })
}

/// Runs `build` (a scalar-valued graph) and checks the tape gradient of each
/// input against central differences.
fn check(inputs: &[ArrayD<f64>], build: impl Fn(&Tape<f64>, &[Var]) -> Var, tol: f64) {
    for probe in 0..inputs.len() {
        let analytic = {
            let tape = Tape::new();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, x)| if i == probe { tape.param(x.clone()) } else { tape.constant(x.clone()) })
                .collect();
            let loss = build(&tape, &vars);
            let grads = tape.backward(loss);
            grads.get_or_zeros(vars[probe], inputs[probe].shape())
        };
        let mut f = |x: &ArrayD<f64>| {
            let tape = Tape::inference();
            let vars: Vec<Var> = inputs
                .iter()
                .enumerate()
                .map(|(i, v)| tape.constant(if i == probe { x.clone() } else { v.clone() }))
                .collect();
            tape.scalar_value(build(&tape, &vars))
        };
        let worst = max_grad_rel_err(&mut f, &inputs[probe], &analytic, 1e-6);
        assert!(worst < tol, "input {probe}: worst rel err {worst}");
    }
}

#[test]
fn unary_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = randn(&mut rng, &[3, 4]);
    check(&[x.clone()], |t, v| t.mean_all(t.square(v[0])), 1e-6);
    check(&[x.clone()], |t, v| t.sum_all(t.tanh(v[0])), 1e-6);
    check(&[x.clone()], |t, v| t.sum_all(t.leaky_relu(v[0], 0.01)), 1e-5);
    check(&[x.clone()], |t, v| t.sum_all(t.abs(v[0])), 1e-5);
    check(&[x.clone()], |t, v| t.sum_all(t.rsqrt_eps(t.square(v[0]), 1e-3)), 1e-5);
    check(&[x.clone()], |t, v| t.sum_all(t.scale(t.add_scalar(v[0], 0.7), -1.3)), 1e-6);
    check(&[x], |t, v| t.sum_all(t.neg(v[0])), 1e-6);
}

#[test]
fn binary_broadcast_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = randn(&mut rng, &[2, 3, 4]);
    let b = randn(&mut rng, &[3, 1]);
    let c = randn(&mut rng, &[2, 3, 4]);
    check(&[a.clone(), b.clone()], |t, v| t.sum_all(t.mul(v[0], v[1])), 1e-6);
    check(&[a.clone(), b.clone()], |t, v| t.sum_all(t.add(v[0], v[1])), 1e-6);
    check(&[a.clone(), b.clone()], |t, v| t.sum_all(t.sub(v[0], v[1])), 1e-6);
    let b_off = b.mapv(|v: f64| v + 4.0);
    check(&[a.clone(), b_off], |t, v| t.sum_all(t.div(v[0], v[1])), 1e-5);
    check(&[a, c], |t, v| t.sum_all(t.atan2(v[0], v[1])), 1e-5);
}

#[test]
fn reduction_and_shape_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x = randn(&mut rng, &[2, 3, 2, 2]);
    check(&[x.clone()], |t, v| {
        let s = t.sum_axes_keepdim(v[0], &[1, 3]);
        t.mean_all(t.square(s))
    }, 1e-6);
    check(&[x.clone()], |t, v| {
        let r = t.reshape(v[0], &[6, 4]);
        t.sum_all(t.square(r))
    }, 1e-6);
    let y = randn(&mut rng, &[2, 5, 2, 2]);
    check(&[x.clone(), y], |t, v| {
        let c = t.concat(&[v[0], v[1]], 1);
        t.mean_all(t.square(c))
    }, 1e-6);
    let z = randn(&mut rng, &[4, 3, 1, 1]);
    check(&[z], |t, v| t.sum_all(t.square(t.repeat_spatial(v[0], 3))), 1e-6);
}

#[test]
fn matmul_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = randn(&mut rng, &[3, 5]);
    let b = randn(&mut rng, &[5, 2]);
    check(&[a, b], |t, v| t.mean_all(t.square(t.matmul(v[0], v[1]))), 1e-6);
}

#[test]
fn conv_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = randn(&mut rng, &[2, 3, 5, 5]);
    let w = randn(&mut rng, &[4, 3, 3, 3]);
    for pad in [0usize, 1] {
        check(&[x.clone(), w.clone()], move |t, v| {
            t.mean_all(t.square(t.conv2d(v[0], v[1], pad)))
        }, 1e-5);
    }
    let wp = randn(&mut rng, &[2, 4, 3, 3, 3]);
    check(&[x.clone(), wp], |t, v| {
        t.mean_all(t.square(t.conv2d_per_sample(v[0], v[1], 1)))
    }, 1e-5);
    let w1 = randn(&mut rng, &[4, 3, 1, 1]);
    check(&[x, w1], |t, v| t.mean_all(t.square(t.conv2d(v[0], v[1], 0))), 1e-5);
}

#[test]
fn resample_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x = randn(&mut rng, &[2, 3, 4, 4]);
    check(&[x.clone()], |t, v| t.mean_all(t.square(t.upsample2x(v[0]))), 1e-6);
    let y = randn(&mut rng, &[2, 3, 7, 7]);
    check(&[y], |t, v| t.mean_all(t.square(t.adaptive_avg_pool(v[0], 3, 3))), 1e-6);
}

#[test]
fn grad_accumulates_over_reuse() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = randn(&mut rng, &[3, 3]);
    check(&[x], |t, v| {
        let a = t.mul(v[0], v[0]);
        let b = t.add(a, v[0]);
        t.sum_all(t.mul(b, v[0]))
    }, 1e-5);
}

#[test]
fn trig_ops() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = randn(&mut rng, &[2, 3]);
    check(&[x.clone()], |t, v| t.sum_all(t.sin(v[0])), 1e-6);
    check(&[x], |t, v| t.sum_all(t.cos(v[0])), 1e-6);
}
