//! Pluggable encoder interfaces with deterministic desk-scale stand-ins.
//!
//! The feature encoders are fixed-seed convolution stacks that always emit
//! 7x7 grids (adaptive pooling at the head), the identity encoder emits a
//! unit-norm embedding, the inverter emits W+ codes, and pose parameters
//! come from a lookup oracle on dataset frames or a closed-form moment
//! estimator on arbitrary images (see `facegeom`). Every stand-in is a pure
//! function of (image, seed); a registry maps plug-in names to manifests so
//! pretrained replacements can slot in behind the same interface.

use std::collections::BTreeMap;
use std::marker::PhantomData;

use ndarray::{Array2, ArrayD, IxDyn};
use reenact_tensor::element::{elem, Element};
use reenact_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::arch::STYLE_DIM;
use crate::error::{Error, Result};
use crate::facegeom::{self, LandmarkModel};
use crate::generator::LatentCode;
use crate::init;
use crate::nn;

pub const APPEARANCE_CHANNELS: usize = 512;
pub const POSE_CHANNELS: usize = 2048;
pub const FEATURE_GRID: usize = 7;

const MASS_EPS: f64 = 1e-3;
const ROLL_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureKind {
    Appearance,
    Pose,
    Fused,
}

impl FeatureKind {
    pub fn channels(self) -> usize {
        match self {
            FeatureKind::Appearance | FeatureKind::Fused => APPEARANCE_CHANNELS,
            FeatureKind::Pose => POSE_CHANNELS,
        }
    }
}

/// A [C, 7, 7] spatial feature grid.
#[derive(Debug, Clone)]
pub struct FeatureMap<T: Element> {
    pub data: ArrayD<T>,
    pub kind: FeatureKind,
}

impl<T: Element> FeatureMap<T> {
    pub fn new(data: ArrayD<T>, kind: FeatureKind) -> Result<Self> {
        let expected = [kind.channels(), FEATURE_GRID, FEATURE_GRID];
        if data.shape() != expected {
            return Err(Error::shape(format!("{kind:?} feature map"), &expected, data.shape()));
        }
        if !data.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidConfig(format!("{kind:?} feature map has non-finite values")));
        }
        Ok(FeatureMap { data, kind })
    }
}

/// Euler angles (degrees), expression coefficients, per-identity 3D shape
/// descriptor, and gaze direction (radians).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub euler: [f64; 3],
    pub expression: Vec<f64>,
    pub shape3d: Vec<f64>,
    pub gaze: [f64; 2],
}

impl PoseParams {
    pub fn validate(&self) -> Result<()> {
        let finite = self.euler.iter().chain(&self.gaze).chain(&self.expression).chain(&self.shape3d).all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidConfig("pose params contain non-finite values".into()));
        }
        if self.euler.iter().any(|&a| !(-180.0..=180.0).contains(&a)) {
            return Err(Error::InvalidConfig("euler angles out of (-180, 180]".into()));
        }
        Ok(())
    }
}

/// Unit-L2 identity embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct IdentityEmbedding {
    pub vector: Vec<f64>,
}

impl IdentityEmbedding {
    pub fn new(vector: Vec<f64>) -> Result<Self> {
        let norm: f64 = vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::InvalidConfig(format!("identity embedding norm {norm} != 1")));
        }
        Ok(IdentityEmbedding { vector })
    }

    pub fn cosine(&self, other: &IdentityEmbedding) -> f64 {
        self.vector.iter().zip(&other.vector).map(|(a, b)| a * b).sum()
    }
}

pub fn validate_image_shape<T: Element>(image: &ArrayD<T>) -> Result<usize> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 || s[1] != s[2] || s[1] < FEATURE_GRID {
        return Err(Error::shape("image", &[3, 0, 0], s));
    }
    if !image.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidConfig("image has non-finite values".into()));
    }
    Ok(s[1])
}

fn batch_of_one<T: Element>(image: &ArrayD<T>) -> ArrayD<T> {
    let mut shape = vec![1usize];
    shape.extend_from_slice(image.shape());
    image.clone().into_shape_with_order(IxDyn(&shape)).unwrap()
}

pub struct EncoderForward {
    /// Post-activation stem outputs, coarse to fine; the perceptual-loss
    /// levels.
    pub levels: Vec<Var>,
    /// [n, out_channels, 7, 7]
    pub out: Var,
}

/// Fixed-seed convolution stack emitting a [out_channels, 7, 7] grid for any
/// square input of at least 7 pixels.
#[derive(Debug, Clone)]
pub struct ConvStackEncoder<T: Element> {
    stem: Vec<(ArrayD<T>, ArrayD<T>)>,
    head_w: ArrayD<T>,
    head_b: ArrayD<T>,
    pub normalize_input: bool,
    pub out_channels: usize,
}

const STEM_CHANNELS: [usize; 3] = [16, 32, 64];

impl<T: Element> ConvStackEncoder<T> {
    pub fn new(seed: u64, stream: &str, out_channels: usize, normalize_input: bool) -> Self {
        let mut rng = init::rng_for(seed, stream);
        let mut stem = Vec::new();
        let mut prev = 3;
        for ch in STEM_CHANNELS {
            stem.push((init::kaiming_conv(&mut rng, ch, prev, 3), init::zeros(&[ch])));
            prev = ch;
        }
        ConvStackEncoder {
            stem,
            head_w: init::kaiming_conv(&mut rng, out_channels, prev, 1),
            head_b: init::zeros(&[out_channels]),
            normalize_input,
            out_channels,
        }
    }

    /// `images` is [n, 3, r, r] in [-1, 1].
    pub fn forward(&self, t: &Tape<T>, images: Var) -> EncoderForward {
        let r = t.shape(images)[2];
        let mut x = images;
        if self.normalize_input {
            x = nn::standardize(t, x, 1e-6);
        }
        let mut levels = Vec::new();
        let mut size = r;
        for (w, b) in &self.stem {
            let h = t.conv2d(x, t.constant(w.clone()), 1);
            let h = t.leaky_relu(nn::bias_channels(t, h, t.constant(b.clone())), elem(0.2));
            levels.push(h);
            let next = (size / 2).max(FEATURE_GRID).min(size);
            x = t.adaptive_avg_pool(h, next, next);
            size = next;
        }
        let x = t.adaptive_avg_pool(x, FEATURE_GRID, FEATURE_GRID);
        let out = nn::bias_channels(t, t.conv2d(x, t.constant(self.head_w.clone()), 0), t.constant(self.head_b.clone()));
        EncoderForward { levels, out }
    }
}

/// Conv stack head pooled into a unit-norm embedding.
#[derive(Debug, Clone)]
pub struct IdentityEncoderStandin<T: Element> {
    conv1: (ArrayD<T>, ArrayD<T>),
    conv2: (ArrayD<T>, ArrayD<T>),
    proj_w: ArrayD<T>,
    proj_b: ArrayD<T>,
    pub dim: usize,
}

impl<T: Element> IdentityEncoderStandin<T> {
    pub fn new(seed: u64, dim: usize) -> Self {
        let mut rng = init::rng_for(seed, "identity-encoder");
        IdentityEncoderStandin {
            conv1: (init::kaiming_conv(&mut rng, 16, 3, 3), init::zeros(&[16])),
            conv2: (init::kaiming_conv(&mut rng, 32, 16, 3), init::zeros(&[32])),
            proj_w: init::kaiming_fc(&mut rng, 32 * 16, dim),
            proj_b: init::zeros(&[dim]),
            dim,
        }
    }

    /// [n, 3, r, r] -> unit-norm [n, dim]
    pub fn forward(&self, t: &Tape<T>, images: Var) -> Var {
        let n = t.shape(images)[0];
        let r = t.shape(images)[2];
        let h = t.conv2d(images, t.constant(self.conv1.0.clone()), 1);
        let h = t.leaky_relu(nn::bias_channels(t, h, t.constant(self.conv1.1.clone())), elem(0.2));
        let h = t.adaptive_avg_pool(h, (r / 2).clamp(4, 8), (r / 2).clamp(4, 8));
        let h = t.conv2d(h, t.constant(self.conv2.0.clone()), 1);
        let h = t.leaky_relu(nn::bias_channels(t, h, t.constant(self.conv2.1.clone())), elem(0.2));
        let h = t.adaptive_avg_pool(h, 4, 4);
        let flat = t.reshape(h, &[n, 32 * 16]);
        let emb = nn::linear(t, flat, t.constant(self.proj_w.clone()), t.constant(self.proj_b.clone()));
        nn::l2_normalize_rows(t, emb, 1e-12)
    }
}

/// Differentiable pose quantities of a batch of images.
pub struct PoseVars {
    /// [n, 3] yaw/pitch/roll in degrees
    pub euler_deg: Var,
    /// [n, e_dims]
    pub expression: Var,
    /// [n, 2] gaze (pitch, yaw) in radians
    pub gaze: Var,
}

/// Closed-form moment estimator matched to the synthetic renderer's
/// encodings. Works on any image; exact parameters for dataset frames come
/// from the oracle path instead.
#[derive(Debug, Clone)]
pub struct PoseEstimator<T: Element> {
    pub e_dims: usize,
    pub shape_dims: usize,
    _marker: PhantomData<T>,
}

impl<T: Element> PoseEstimator<T> {
    pub fn new(e_dims: usize, shape_dims: usize) -> Self {
        PoseEstimator { e_dims, shape_dims, _marker: PhantomData }
    }

    fn channel(&self, t: &Tape<T>, images01: Var, c: usize) -> Var {
        let shape = t.shape(images01);
        let (n, r) = (shape[0], shape[2]);
        let mut sel = ArrayD::zeros(IxDyn(&[1, 3, 1, 1]));
        sel[[0, c, 0, 0]] = T::one();
        let picked = t.sum_axes_keepdim(t.mul(images01, t.constant(sel)), &[1]);
        t.reshape(picked, &[n, r * r])
    }

    /// `images` is [n, 3, r, r] in [-1, 1].
    pub fn estimate_vars(&self, t: &Tape<T>, images: Var) -> PoseVars {
        let shape = t.shape(images);
        let (n, r) = (shape[0], shape[2]);
        let half = elem::<T>(0.5);
        let images01 = t.scale(t.add_scalar(images, T::one()), half);

        let c0 = self.channel(t, images01, 0);
        let c1 = self.channel(t, images01, 1);
        let c2 = self.channel(t, images01, 2);

        let u = t.constant(ArrayD::from_shape_fn(IxDyn(&[1, r * r]), |ix| {
            elem(facegeom::canvas_coord(ix[1] % r, r))
        }));
        let v = t.constant(ArrayD::from_shape_fn(IxDyn(&[1, r * r]), |ix| {
            elem(facegeom::canvas_coord(ix[1] / r, r))
        }));

        // Head pose from moments of the squared background-subtracted
        // luminance: squaring keeps the face-blob center and orientation,
        // kills the uniform background term, and stays smooth and
        // nonnegative on arbitrary generated images.
        let lum = t.scale(t.add(t.add(c0, c1), c2), elem(1.0 / 3.0));
        let w = t.square(t.add_scalar(lum, elem(-facegeom::BG_LEVEL)));
        let mass = t.add_scalar(t.sum_axes_keepdim(w, &[1]), elem(MASS_EPS));
        let mx = t.div(t.sum_axes_keepdim(t.mul(w, u), &[1]), mass);
        let my = t.div(t.sum_axes_keepdim(t.mul(w, v), &[1]), mass);
        let du = t.sub(u, mx);
        let dv = t.sub(v, my);
        let m20 = t.div(t.sum_axes_keepdim(t.mul(w, t.square(du)), &[1]), mass);
        let m02 = t.div(t.sum_axes_keepdim(t.mul(w, t.square(dv)), &[1]), mass);
        let m11 = t.div(t.sum_axes_keepdim(t.mul(w, t.mul(du, dv)), &[1]), mass);

        let yaw = t.scale(t.add_scalar(mx, elem(-0.5)), elem(1.0 / facegeom::ANGLE_SHIFT));
        let pitch = t.scale(t.neg(t.add_scalar(my, elem(-0.5))), elem(1.0 / facegeom::ANGLE_SHIFT));
        let roll_rad = t.scale(
            t.atan2(t.scale(m11, elem(2.0)), t.add_scalar(t.sub(m20, m02), elem(ROLL_EPS))),
            half,
        );
        let roll = t.scale(roll_rad, elem(180.0 / std::f64::consts::PI));
        let euler_deg = t.reshape(t.concat(&[yaw, pitch, roll], 1), &[n, 3]);

        // Expression from the opposing channel pair projected on the basis.
        let basis_pair = facegeom::expression_basis(self.e_dims, r);
        let (basis, gram_inv) = (&basis_pair.0, &basis_pair.1);
        let basis_t = t.constant(ArrayD::from_shape_fn(IxDyn(&[r * r, self.e_dims]), |ix| {
            elem(basis[[ix[1], ix[0]]])
        }));
        let ginv = t.constant(to_dyn(t, &gram_inv));
        let expmap = t.scale(t.sub(c1, c2), half);
        let proj = t.matmul(expmap, basis_t);
        let expression = t.scale(t.matmul(proj, ginv), elem(1.0 / facegeom::expr_amp(self.e_dims)));

        // Gaze from the eye-dot channel contrast.
        let eyesig = t.sub(c0, t.scale(t.add(c1, c2), half));
        let w_eye = t.square(t.scale(eyesig, elem(1.0 / facegeom::EYE_CONTRAST)));
        let gm = t.add_scalar(t.sum_axes_keepdim(w_eye, &[1]), elem(MASS_EPS));
        let ex = t.div(t.sum_axes_keepdim(t.mul(w_eye, u), &[1]), gm);
        let ey = t.div(t.sum_axes_keepdim(t.mul(w_eye, v), &[1]), gm);
        let g_yaw = t.scale(t.sub(ex, mx), elem(1.0 / facegeom::GAZE_SHIFT));
        let g_pitch = t.scale(t.sub(my, ey), elem(1.0 / facegeom::GAZE_SHIFT));
        let gaze = t.reshape(t.concat(&[g_pitch, g_yaw], 1), &[n, 2]);

        PoseVars { euler_deg, expression, gaze }
    }

    /// Concrete estimation for one image, including moment-derived shape
    /// statistics in `shape3d`.
    pub fn estimate(&self, image: &ArrayD<T>) -> Result<PoseParams> {
        validate_image_shape(image)?;
        let t: Tape<T> = Tape::inference();
        let images = t.constant(batch_of_one(image));
        let vars = self.estimate_vars(&t, images);
        let euler = t.value(vars.euler_deg);
        let expr = t.value(vars.expression);
        let gaze = t.value(vars.gaze);

        // Shape statistics: spread and tilt of the luminance mass.
        let images01 = t.scale(t.add_scalar(images, T::one()), elem(0.5));
        let lum = t.scale(t.sum_axes_keepdim(images01, &[1]), elem(1.0 / 3.0));
        let mean = t.mean_all(lum);
        let mut shape3d = vec![t.scalar_value(mean).as_f64()];
        shape3d.resize(self.shape_dims, 0.0);

        let params = PoseParams {
            euler: [
                euler[[0, 0]].as_f64(),
                euler[[0, 1]].as_f64(),
                euler[[0, 2]].as_f64(),
            ],
            expression: expr.iter().map(|v| v.as_f64()).collect(),
            shape3d,
            gaze: [gaze[[0, 0]].as_f64(), gaze[[0, 1]].as_f64()],
        };
        params.validate()?;
        Ok(params)
    }
}

fn to_dyn<T: Element>(_t: &Tape<T>, m: &Array2<f64>) -> ArrayD<T> {
    ArrayD::from_shape_fn(IxDyn(&[m.nrows(), m.ncols()]), |ix| elem(m[[ix[0], ix[1]]]))
}

/// Deterministic W+ inversion stand-in: pooled conv features through a fixed
/// linear map, soft-clamped.
#[derive(Debug, Clone)]
pub struct InverterStandin<T: Element> {
    conv1: (ArrayD<T>, ArrayD<T>),
    conv2: (ArrayD<T>, ArrayD<T>),
    proj_w: ArrayD<T>,
    proj_b: ArrayD<T>,
    pub rows: usize,
    pub clamp: f64,
}

impl<T: Element> InverterStandin<T> {
    pub fn new(seed: u64, rows: usize, clamp: f64) -> Self {
        let mut rng = init::rng_for(seed, "inverter");
        InverterStandin {
            conv1: (init::kaiming_conv(&mut rng, 16, 3, 3), init::zeros(&[16])),
            conv2: (init::kaiming_conv(&mut rng, 32, 16, 3), init::zeros(&[32])),
            proj_w: init::kaiming_fc(&mut rng, 32 * 16, rows * STYLE_DIM),
            proj_b: init::zeros(&[rows * STYLE_DIM]),
            rows,
            clamp,
        }
    }

    /// [n, 3, r, r] -> [n, rows, 512]
    pub fn forward(&self, t: &Tape<T>, images: Var) -> Var {
        let n = t.shape(images)[0];
        let r = t.shape(images)[2];
        let h = t.conv2d(images, t.constant(self.conv1.0.clone()), 1);
        let h = t.leaky_relu(nn::bias_channels(t, h, t.constant(self.conv1.1.clone())), elem(0.2));
        let h = t.adaptive_avg_pool(h, (r / 2).clamp(4, 8), (r / 2).clamp(4, 8));
        let h = t.conv2d(h, t.constant(self.conv2.0.clone()), 1);
        let h = t.leaky_relu(nn::bias_channels(t, h, t.constant(self.conv2.1.clone())), elem(0.2));
        let h = t.adaptive_avg_pool(h, 4, 4);
        let flat = t.reshape(h, &[n, 32 * 16]);
        let raw = nn::linear(t, flat, t.constant(self.proj_w.clone()), t.constant(self.proj_b.clone()));
        let c = elem::<T>(self.clamp);
        let clamped = t.scale(t.tanh(t.scale(raw, c.recip())), c);
        t.reshape(clamped, &[n, self.rows, STYLE_DIM])
    }
}

/// Plug-in manifest: what an encoder slot expects and produces.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EncoderManifest {
    pub name: String,
    /// None = any square resolution >= 7.
    pub input_resolution: Option<usize>,
    pub output_contract: String,
}

/// Registry of known encoder plug-ins. The stand-ins are registered under
/// `standin-*` names; pretrained replacements register here behind the same
/// forward contracts.
#[derive(Debug, Clone)]
pub struct EncoderRegistry {
    manifests: BTreeMap<String, EncoderManifest>,
}

impl EncoderRegistry {
    pub fn builtin() -> Self {
        let mut manifests = BTreeMap::new();
        let mut add = |name: &str, contract: &str| {
            manifests.insert(
                name.to_string(),
                EncoderManifest {
                    name: name.to_string(),
                    input_resolution: None,
                    output_contract: contract.to_string(),
                },
            );
        };
        add("standin-appearance", "feature map 512x7x7");
        add("standin-pose", "feature map 2048x7x7");
        add("standin-identity", "unit-norm embedding");
        add("standin-pose-params", "euler degrees, expression, gaze; oracle on dataset frames");
        add("standin-inverter", "W+ code, one 512-d row per style slot");
        EncoderRegistry { manifests }
    }

    pub fn manifest(&self, name: &str) -> Result<&EncoderManifest> {
        self.manifests.get(name).ok_or_else(|| Error::UnknownPlugin(name.to_string()))
    }

    pub fn manifests(&self) -> impl Iterator<Item = &EncoderManifest> {
        self.manifests.values()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub appearance: String,
    pub pose: String,
    pub identity: String,
    pub pose_params: String,
    pub inverter: String,
    pub appearance_seed: u64,
    pub pose_seed: u64,
    pub identity_seed: u64,
    pub inverter_seed: u64,
    pub expression_dims: usize,
    pub shape_dims: usize,
    pub landmark_count: usize,
    pub identity_dim: usize,
    pub normalize_pose_input: bool,
    pub inverter_clamp: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            appearance: "standin-appearance".into(),
            pose: "standin-pose".into(),
            identity: "standin-identity".into(),
            pose_params: "standin-pose-params".into(),
            inverter: "standin-inverter".into(),
            appearance_seed: 101,
            pose_seed: 102,
            identity_seed: 103,
            inverter_seed: 104,
            expression_dims: 50,
            shape_dims: 8,
            landmark_count: 10,
            identity_dim: 512,
            normalize_pose_input: true,
            inverter_clamp: 3.0,
        }
    }
}

/// The full encoder suite used by the pipeline.
pub struct EncoderSet<T: Element> {
    pub config: EncoderConfig,
    pub appearance: ConvStackEncoder<T>,
    pub pose: ConvStackEncoder<T>,
    pub identity: IdentityEncoderStandin<T>,
    pub estimator: PoseEstimator<T>,
    pub inverter: InverterStandin<T>,
    pub landmarks: LandmarkModel,
}

impl<T: Element> EncoderSet<T> {
    pub fn from_config(config: &EncoderConfig, style_rows: usize) -> Result<Self> {
        let registry = EncoderRegistry::builtin();
        for name in [&config.appearance, &config.pose, &config.identity, &config.pose_params, &config.inverter] {
            registry.manifest(name)?;
        }
        if config.expression_dims == 0 || config.landmark_count == 0 || config.identity_dim == 0 {
            return Err(Error::InvalidConfig("encoder dims must be positive".into()));
        }
        Ok(EncoderSet {
            appearance: ConvStackEncoder::new(config.appearance_seed, "appearance", APPEARANCE_CHANNELS, false),
            pose: ConvStackEncoder::new(config.pose_seed, "pose", POSE_CHANNELS, config.normalize_pose_input),
            identity: IdentityEncoderStandin::new(config.identity_seed, config.identity_dim),
            estimator: PoseEstimator::new(config.expression_dims, config.shape_dims),
            inverter: InverterStandin::new(config.inverter_seed, style_rows, config.inverter_clamp),
            landmarks: LandmarkModel::new(config.landmark_count, config.expression_dims),
            config: config.clone(),
        })
    }

    pub fn encode_appearance(&self, image: &ArrayD<T>) -> Result<FeatureMap<T>> {
        validate_image_shape(image)?;
        let t: Tape<T> = Tape::inference();
        let fwd = self.appearance.forward(&t, t.constant(batch_of_one(image)));
        let data = t.value(fwd.out).to_owned();
        FeatureMap::new(
            data.into_shape_with_order(IxDyn(&[APPEARANCE_CHANNELS, FEATURE_GRID, FEATURE_GRID])).unwrap(),
            FeatureKind::Appearance,
        )
    }

    pub fn encode_pose(&self, image: &ArrayD<T>) -> Result<FeatureMap<T>> {
        validate_image_shape(image)?;
        let t: Tape<T> = Tape::inference();
        let fwd = self.pose.forward(&t, t.constant(batch_of_one(image)));
        let data = t.value(fwd.out).to_owned();
        FeatureMap::new(
            data.into_shape_with_order(IxDyn(&[POSE_CHANNELS, FEATURE_GRID, FEATURE_GRID])).unwrap(),
            FeatureKind::Pose,
        )
    }

    pub fn identity_embedding(&self, image: &ArrayD<T>) -> Result<IdentityEmbedding> {
        validate_image_shape(image)?;
        let t: Tape<T> = Tape::inference();
        let emb = self.identity.forward(&t, t.constant(batch_of_one(image)));
        IdentityEmbedding::new(t.value(emb).iter().map(|v| v.as_f64()).collect())
    }

    /// Oracle mode when ground-truth params ride with the image; estimation
    /// otherwise.
    pub fn extract_pose_params(&self, image: &ArrayD<T>, provenance: Option<&PoseParams>) -> Result<PoseParams> {
        match provenance {
            Some(p) => Ok(p.clone()),
            None => self.estimator.estimate(image),
        }
    }

    pub fn estimate_gaze(&self, image: &ArrayD<T>, provenance: Option<&PoseParams>) -> Result<[f64; 2]> {
        Ok(self.extract_pose_params(image, provenance)?.gaze)
    }

    pub fn invert(&self, image: &ArrayD<T>) -> Result<LatentCode<T>> {
        validate_image_shape(image)?;
        let t: Tape<T> = Tape::inference();
        let w = self.inverter.forward(&t, t.constant(batch_of_one(image)));
        let styles = t
            .value(w)
            .to_owned()
            .into_shape_with_order(IxDyn(&[self.inverter.rows, STYLE_DIM]))
            .unwrap();
        Ok(LatentCode { styles })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::canonical_arch;

    fn test_image(seed: u64, r: usize) -> ArrayD<f32> {
        let mut rng = init::rng_for(seed, "test-image");
        init::normal::<f32>(&mut rng, &[3, r, r], 0.3).mapv(|v| v.clamp(-1.0, 1.0))
    }

    fn set() -> EncoderSet<f32> {
        EncoderSet::from_config(&EncoderConfig::default(), canonical_arch().style_rows()).unwrap()
    }

    #[test]
    fn feature_shapes_and_determinism() {
        let enc = set();
        for r in [16usize, 32] {
            let img = test_image(1, r);
            let app = enc.encode_appearance(&img).unwrap();
            assert_eq!(app.data.shape(), &[512, 7, 7]);
            let pose = enc.encode_pose(&img).unwrap();
            assert_eq!(pose.data.shape(), &[2048, 7, 7]);
            let app2 = enc.encode_appearance(&img).unwrap();
            assert_eq!(app.data, app2.data);
        }
    }

    #[test]
    fn rejects_wrong_image_shape() {
        let enc = set();
        let bad = ArrayD::<f32>::zeros(IxDyn(&[1, 16, 16]));
        assert!(enc.encode_appearance(&bad).is_err());
        let bad2 = ArrayD::<f32>::zeros(IxDyn(&[3, 16, 8]));
        assert!(enc.encode_pose(&bad2).is_err());
    }

    #[test]
    fn distinct_images_give_distinct_features() {
        let enc = set();
        let a = enc.encode_appearance(&test_image(1, 32)).unwrap();
        let b = enc.encode_appearance(&test_image(2, 32)).unwrap();
        let d2: f32 = (&a.data - &b.data).iter().map(|v| v * v).sum();
        assert!(d2.sqrt() > 0.0);
    }

    #[test]
    fn pose_encoder_brightness_invariance_under_normalization() {
        let enc = set();
        let img = test_image(3, 32).mapv(|v| v * 0.5);
        let shifted = img.mapv(|v| v + 0.1);
        let a = enc.encode_pose(&img).unwrap();
        let b = enc.encode_pose(&shifted).unwrap();
        let max_diff = (&a.data - &b.data).iter().fold(0.0f32, |m, v| m.max(v.abs()));
        assert!(max_diff < 1e-3, "max diff {max_diff}");
    }

    #[test]
    fn identity_embedding_contracts() {
        let enc = set();
        let img = test_image(4, 32);
        let e = enc.identity_embedding(&img).unwrap();
        let norm: f64 = e.vector.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-5);
        let e2 = enc.identity_embedding(&img).unwrap();
        assert_eq!(e.vector, e2.vector);
        assert!((e.cosine(&e2) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn inverter_contracts() {
        let enc = set();
        let img = test_image(5, 32);
        let code = enc.invert(&img).unwrap();
        assert_eq!(code.styles.shape(), &[14, STYLE_DIM]);
        let code2 = enc.invert(&img).unwrap();
        assert_eq!(code.styles, code2.styles);
        let clamp = enc.config.inverter_clamp as f32;
        assert!(code.styles.iter().all(|v| v.is_finite() && v.abs() <= clamp));
    }

    #[test]
    fn oracle_mode_returns_provenance_exactly() {
        let enc = set();
        let img = test_image(6, 32);
        let truth = PoseParams {
            euler: [10.0, -5.0, 0.0],
            expression: vec![0.0; enc.config.expression_dims],
            shape3d: vec![0.0; enc.config.shape_dims],
            gaze: [0.1, -0.2],
        };
        let got = enc.extract_pose_params(&img, Some(&truth)).unwrap();
        assert_eq!(got, truth);
        assert_eq!(enc.estimate_gaze(&img, Some(&truth)).unwrap(), [0.1, -0.2]);
    }

    #[test]
    fn registry_rejects_unknown_plugins() {
        let cfg = EncoderConfig { appearance: "resnet-booster".into(), ..Default::default() };
        assert!(EncoderSet::<f32>::from_config(&cfg, 14).is_err());
    }

    #[test]
    fn expression_vector_length_follows_config() {
        let enc = set();
        let img = test_image(7, 32);
        let p = enc.extract_pose_params(&img, None).unwrap();
        assert_eq!(p.expression.len(), 50);
        let p2 = enc.extract_pose_params(&img, None).unwrap();
        assert_eq!(p, p2);
    }
}
