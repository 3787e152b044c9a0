//! The Reenactment Module: projects pose features to the appearance channel
//! width and blends the two maps through learned per-branch modulation,
//! f_r = gamma_app * f_app + beta_app + gamma_p * f_p' + beta_p.
//!
//! Each branch's gamma/beta come from 1x1 convolutions of that branch's own
//! map; gamma convs carry a structural +1 so zero-initialized weights start
//! the fusion at the additive identity.

use ndarray::{ArrayD, IxDyn};
use reenact_tensor::element::Element;
use reenact_tensor::{Tape, Var};

use crate::encoders::{FeatureKind, FeatureMap, APPEARANCE_CHANNELS, FEATURE_GRID, POSE_CHANNELS};
use crate::error::{Error, Result};
use crate::init;
use crate::nn::{self, ParamReg};

#[derive(Debug, Clone)]
pub struct FusionParams<T: Element> {
    /// [512, 2048, 1, 1], no bias.
    pub pose_projection: ArrayD<T>,
    pub gamma_app_w: ArrayD<T>,
    pub gamma_app_b: ArrayD<T>,
    pub beta_app_w: ArrayD<T>,
    pub beta_app_b: ArrayD<T>,
    pub gamma_p_w: ArrayD<T>,
    pub gamma_p_b: ArrayD<T>,
    pub beta_p_w: ArrayD<T>,
    pub beta_p_b: ArrayD<T>,
}

const MOD_INIT_STD: f64 = 0.02;

impl<T: Element> FusionParams<T> {
    pub fn init(seed: u64) -> Self {
        let mut rng = init::rng_for(seed, "fusion");
        let c = APPEARANCE_CHANNELS;
        let mut modulation = |rng: &mut _| init::normal(rng, &[c, c, 1, 1], MOD_INIT_STD);
        FusionParams {
            pose_projection: init::kaiming_conv(&mut rng, c, POSE_CHANNELS, 1),
            gamma_app_w: modulation(&mut rng),
            gamma_app_b: init::zeros(&[c]),
            beta_app_w: modulation(&mut rng),
            beta_app_b: init::zeros(&[c]),
            gamma_p_w: modulation(&mut rng),
            gamma_p_b: init::zeros(&[c]),
            beta_p_w: modulation(&mut rng),
            beta_p_b: init::zeros(&[c]),
        }
    }

    /// Modulation weights forced to zero: gamma = 1, beta = 0 exactly.
    pub fn forced_identity(seed: u64) -> Self {
        let mut p = Self::init(seed);
        for w in [&mut p.gamma_app_w, &mut p.beta_app_w, &mut p.gamma_p_w, &mut p.beta_p_w] {
            w.fill(T::zero());
        }
        p
    }

    pub fn named_tensors(&self) -> Vec<(String, &ArrayD<T>)> {
        vec![
            ("fusion.pose_projection".into(), &self.pose_projection),
            ("fusion.gamma_app_w".into(), &self.gamma_app_w),
            ("fusion.gamma_app_b".into(), &self.gamma_app_b),
            ("fusion.beta_app_w".into(), &self.beta_app_w),
            ("fusion.beta_app_b".into(), &self.beta_app_b),
            ("fusion.gamma_p_w".into(), &self.gamma_p_w),
            ("fusion.gamma_p_b".into(), &self.gamma_p_b),
            ("fusion.beta_p_w".into(), &self.beta_p_w),
            ("fusion.beta_p_b".into(), &self.beta_p_b),
        ]
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut ArrayD<T>)> {
        vec![
            ("fusion.pose_projection".into(), &mut self.pose_projection),
            ("fusion.gamma_app_w".into(), &mut self.gamma_app_w),
            ("fusion.gamma_app_b".into(), &mut self.gamma_app_b),
            ("fusion.beta_app_w".into(), &mut self.beta_app_w),
            ("fusion.beta_app_b".into(), &mut self.beta_app_b),
            ("fusion.gamma_p_w".into(), &mut self.gamma_p_w),
            ("fusion.gamma_p_b".into(), &mut self.gamma_p_b),
            ("fusion.beta_p_w".into(), &mut self.beta_p_w),
            ("fusion.beta_p_b".into(), &mut self.beta_p_b),
        ]
    }

    pub fn bind(&self, t: &Tape<T>, mut reg: Option<&mut ParamReg>) -> FusionVars {
        FusionVars {
            pose_projection: nn::bind(t, &mut reg, "fusion.pose_projection", &self.pose_projection),
            gamma_app_w: nn::bind(t, &mut reg, "fusion.gamma_app_w", &self.gamma_app_w),
            gamma_app_b: nn::bind(t, &mut reg, "fusion.gamma_app_b", &self.gamma_app_b),
            beta_app_w: nn::bind(t, &mut reg, "fusion.beta_app_w", &self.beta_app_w),
            beta_app_b: nn::bind(t, &mut reg, "fusion.beta_app_b", &self.beta_app_b),
            gamma_p_w: nn::bind(t, &mut reg, "fusion.gamma_p_w", &self.gamma_p_w),
            gamma_p_b: nn::bind(t, &mut reg, "fusion.gamma_p_b", &self.gamma_p_b),
            beta_p_w: nn::bind(t, &mut reg, "fusion.beta_p_w", &self.beta_p_w),
            beta_p_b: nn::bind(t, &mut reg, "fusion.beta_p_b", &self.beta_p_b),
        }
    }
}

pub struct FusionVars {
    pub pose_projection: Var,
    pub gamma_app_w: Var,
    pub gamma_app_b: Var,
    pub beta_app_w: Var,
    pub beta_app_b: Var,
    pub gamma_p_w: Var,
    pub gamma_p_b: Var,
    pub beta_p_w: Var,
    pub beta_p_b: Var,
}

/// f_p [n, 2048, 7, 7] -> f_p' [n, 512, 7, 7]; linear, no bias.
pub fn project_pose_var<T: Element>(t: &Tape<T>, vars: &FusionVars, f_p: Var) -> Var {
    t.conv2d(f_p, vars.pose_projection, 0)
}

fn modulation<T: Element>(t: &Tape<T>, x: Var, w: Var, b: Var, plus_one: bool) -> Var {
    let out = nn::bias_channels(t, t.conv2d(x, w, 0), b);
    if plus_one {
        t.add_scalar(out, T::one())
    } else {
        out
    }
}

/// Blends appearance and (already projected) pose features.
pub fn fuse_var<T: Element>(t: &Tape<T>, vars: &FusionVars, f_app: Var, f_p_proj: Var) -> Var {
    let gamma_app = modulation(t, f_app, vars.gamma_app_w, vars.gamma_app_b, true);
    let beta_app = modulation(t, f_app, vars.beta_app_w, vars.beta_app_b, false);
    let gamma_p = modulation(t, f_p_proj, vars.gamma_p_w, vars.gamma_p_b, true);
    let beta_p = modulation(t, f_p_proj, vars.beta_p_w, vars.beta_p_b, false);
    let app_branch = t.add(t.mul(gamma_app, f_app), beta_app);
    let pose_branch = t.add(t.mul(gamma_p, f_p_proj), beta_p);
    t.add(app_branch, pose_branch)
}

fn check_kind<T: Element>(map: &FeatureMap<T>, kind: FeatureKind) -> Result<()> {
    if map.kind != kind {
        return Err(Error::InvalidConfig(format!("expected {kind:?} features, got {:?}", map.kind)));
    }
    Ok(())
}

impl<T: Element> FusionParams<T> {
    /// Spec operation: project a pose feature map to 512 channels.
    pub fn project_pose(&self, f_p: &FeatureMap<T>) -> Result<ArrayD<T>> {
        check_kind(f_p, FeatureKind::Pose)?;
        let t: Tape<T> = Tape::inference();
        let vars = self.bind(&t, None);
        let input = t.constant(
            f_p.data
                .clone()
                .into_shape_with_order(IxDyn(&[1, POSE_CHANNELS, FEATURE_GRID, FEATURE_GRID]))
                .unwrap(),
        );
        let out = project_pose_var(&t, &vars, input);
        Ok(t.value(out)
            .to_owned()
            .into_shape_with_order(IxDyn(&[APPEARANCE_CHANNELS, FEATURE_GRID, FEATURE_GRID]))
            .unwrap())
    }

    /// Spec operation: fuse appearance and pose features into f_r.
    pub fn fuse(&self, f_app: &FeatureMap<T>, f_p: &FeatureMap<T>) -> Result<FeatureMap<T>> {
        check_kind(f_app, FeatureKind::Appearance)?;
        check_kind(f_p, FeatureKind::Pose)?;
        let t: Tape<T> = Tape::inference();
        let vars = self.bind(&t, None);
        let app = t.constant(
            f_app
                .data
                .clone()
                .into_shape_with_order(IxDyn(&[1, APPEARANCE_CHANNELS, FEATURE_GRID, FEATURE_GRID]))
                .unwrap(),
        );
        let pose = t.constant(
            f_p.data
                .clone()
                .into_shape_with_order(IxDyn(&[1, POSE_CHANNELS, FEATURE_GRID, FEATURE_GRID]))
                .unwrap(),
        );
        let fused = fuse_var(&t, &vars, app, project_pose_var(&t, &vars, pose));
        FeatureMap::new(
            t.value(fused)
                .to_owned()
                .into_shape_with_order(IxDyn(&[APPEARANCE_CHANNELS, FEATURE_GRID, FEATURE_GRID]))
                .unwrap(),
            FeatureKind::Fused,
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use reenact_tensor::fdcheck;

    fn feature<T: Element>(seed: u64, kind: FeatureKind) -> FeatureMap<T> {
        let mut rng = init::rng_for(seed, "fusion-test");
        FeatureMap::new(
            init::normal(&mut rng, &[kind.channels(), FEATURE_GRID, FEATURE_GRID], 0.5),
            kind,
        )
        .unwrap()
    }

    #[test]
    fn projection_is_linear_and_shaped() {
        let params = FusionParams::<f64>::init(1);
        let f_p = feature::<f64>(2, FeatureKind::Pose);
        let out = params.project_pose(&f_p).unwrap();
        assert_eq!(out.shape(), &[512, 7, 7]);

        let zero = FeatureMap::new(ArrayD::zeros(IxDyn(&[2048, 7, 7])), FeatureKind::Pose).unwrap();
        let out_zero = params.project_pose(&zero).unwrap();
        assert!(out_zero.iter().all(|&v| v == 0.0));

        let scaled = FeatureMap::new(f_p.data.mapv(|v| v * 2.5), FeatureKind::Pose).unwrap();
        let out_scaled = params.project_pose(&scaled).unwrap();
        let direct = out.mapv(|v| v * 2.5);
        let max = (&out_scaled - &direct).iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(max < 1e-9, "homogeneity violated by {max}");
    }

    #[test]
    fn forced_identity_reduces_to_sum() {
        let params = FusionParams::<f64>::forced_identity(3);
        let f_app = feature::<f64>(4, FeatureKind::Appearance);
        let f_p = feature::<f64>(5, FeatureKind::Pose);
        let fused = params.fuse(&f_app, &f_p).unwrap();
        let expected = &f_app.data + &params.project_pose(&f_p).unwrap();
        assert_eq!(fused.data, expected);
        assert_eq!(fused.kind, FeatureKind::Fused);
    }

    #[test]
    fn zero_inputs_fuse_to_zero() {
        let params = FusionParams::<f64>::init(6);
        let f_app = FeatureMap::new(ArrayD::zeros(IxDyn(&[512, 7, 7])), FeatureKind::Appearance).unwrap();
        let f_p = FeatureMap::new(ArrayD::zeros(IxDyn(&[2048, 7, 7])), FeatureKind::Pose).unwrap();
        let fused = params.fuse(&f_app, &f_p).unwrap();
        assert!(fused.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fuse_is_deterministic() {
        let params = FusionParams::<f32>::init(7);
        let f_app = feature::<f32>(8, FeatureKind::Appearance);
        let f_p = feature::<f32>(9, FeatureKind::Pose);
        let a = params.fuse(&f_app, &f_p).unwrap();
        let b = params.fuse(&f_app, &f_p).unwrap();
        assert_eq!(a.data, b.data);
    }

    /// d||f_r||^2 / d f_app and d f_p: analytic vs central differences.
    #[test]
    fn gradient_reaches_both_inputs() {
        let params = FusionParams::<f64>::init(10);
        let mut rng = init::rng_for(11, "fusion-grad");
        // Small grids keep the finite-difference sweep fast; channel counts
        // stay at contract size.
        let app0 = init::normal::<f64>(&mut rng, &[1, 512, 2, 2], 0.5);
        let pose0 = init::normal::<f64>(&mut rng, &[1, 2048, 2, 2], 0.5);

        for probe in [0usize, 1] {
            let loss_of = |app: &ArrayD<f64>, pose: &ArrayD<f64>| -> f64 {
                let t: Tape<f64> = Tape::inference();
                let vars = params.bind(&t, None);
                let fused = fuse_var(&t, &vars, t.constant(app.clone()), project_pose_var(&t, &vars, t.constant(pose.clone())));
                t.scalar_value(t.sum_all(t.square(fused)))
            };
            let (analytic, target) = {
                let t: Tape<f64> = Tape::new();
                let vars = params.bind(&t, None);
                let app = t.param(app0.clone());
                let pose = t.param(pose0.clone());
                let fused = fuse_var(&t, &vars, app, project_pose_var(&t, &vars, pose));
                let loss = t.sum_all(t.square(fused));
                let grads = t.backward(loss);
                let var = if probe == 0 { app } else { pose };
                (grads.get(var).unwrap().clone(), var)
            };
            let _ = target;
            let norm: f64 = analytic.iter().map(|v| v * v).sum::<f64>();
            assert!(norm > 0.0, "gradient vanished for input {probe}");
            // Check a deterministic subset of coordinates.
            let mut f = |x: &ArrayD<f64>| {
                if probe == 0 {
                    loss_of(x, &pose0)
                } else {
                    loss_of(&app0, x)
                }
            };
            let x0 = if probe == 0 { &app0 } else { &pose0 };
            let slice = x0.as_slice().unwrap();
            let ga = analytic.as_slice().unwrap();
            for idx in (0..slice.len()).step_by(slice.len() / 17) {
                let fd = fdcheck::central_diff(&mut f, x0, idx, 1e-5);
                let err = fdcheck::rel_err(ga[idx], fd);
                assert!(err < 1e-3, "input {probe} coord {idx}: rel err {err}");
            }
        }
    }
}
