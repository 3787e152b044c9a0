//! The five loss terms and the per-phase weighted objectives, including
//! cross-subject masking: cross-tagged samples keep only the identity term
//! (against the source) and the shape term (against the target); the
//! pixel/perceptual/gaze terms are masked out.

use ndarray::{ArrayD, IxDyn};
use reenact_tensor::element::{elem, Element};
use reenact_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderSet, PoseParams};
use crate::error::{Error, Result};
use crate::facegeom;
use crate::nn;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Inversion,
    SelfReenact,
    Cross,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Phase::Inversion => write!(f, "inversion"),
            Phase::SelfReenact => write!(f, "self"),
            Phase::Cross => write!(f, "cross"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub lambda_pix: f64,
    pub lambda_lpips: f64,
    pub lambda_id: f64,
    pub lambda_sh: f64,
    pub lambda_g: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_pix: 10.0,
            lambda_lpips: 5.0,
            lambda_id: 10.0,
            lambda_sh: 0.5,
            lambda_g: 2.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_pix, self.lambda_lpips, self.lambda_id, self.lambda_sh, self.lambda_g];
        if all.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return Err(Error::InvalidConfig("loss weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossOptions {
    /// The cross-subject masking of the training objective leaves the gaze
    /// term ambiguous; it is excluded by default and can be switched on.
    pub cross_includes_gaze: bool,
}

#[allow(clippy::derivable_impls)]
impl Default for LossOptions {
    fn default() -> Self {
        LossOptions { cross_includes_gaze: false }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct TermValues {
    pub pix: f64,
    pub lpips: f64,
    pub id: f64,
    pub shape: f64,
    pub gaze: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub phase: Phase,
    pub raw: TermValues,
    pub weighted: TermValues,
    pub total: f64,
}

/// Which terms a task includes and what the identity term compares against.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TermMask {
    pub pix: bool,
    pub lpips: bool,
    pub id: bool,
    pub shape: bool,
    pub gaze: bool,
    /// Identity reference: source image for cross samples, target otherwise.
    pub id_vs_source: bool,
}

impl TermMask {
    pub fn for_task(task: Phase, opts: &LossOptions) -> TermMask {
        match task {
            Phase::Inversion => TermMask { pix: true, lpips: true, id: true, shape: false, gaze: true, id_vs_source: false },
            Phase::SelfReenact => TermMask { pix: true, lpips: true, id: true, shape: true, gaze: true, id_vs_source: false },
            Phase::Cross => TermMask {
                pix: false,
                lpips: false,
                id: true,
                shape: true,
                gaze: opts.cross_includes_gaze,
                id_vs_source: true,
            },
        }
    }
}

/// Weighted combination of raw term values for one sample.
pub fn combine(phase: Phase, raw: TermValues, weights: &LossWeights, opts: &LossOptions) -> LossReport {
    let mask = TermMask::for_task(phase, opts);
    let weighted = TermValues {
        pix: if mask.pix { weights.lambda_pix * raw.pix } else { 0.0 },
        lpips: if mask.lpips { weights.lambda_lpips * raw.lpips } else { 0.0 },
        id: if mask.id { weights.lambda_id * raw.id } else { 0.0 },
        shape: if mask.shape { weights.lambda_sh * raw.shape } else { 0.0 },
        gaze: if mask.gaze { weights.lambda_g * raw.gaze } else { 0.0 },
    };
    LossReport {
        phase,
        raw,
        weighted,
        total: weighted.pix + weighted.lpips + weighted.id + weighted.shape + weighted.gaze,
    }
}

const GAZE_SMOOTH_EPS: f64 = 1e-8;

/// Mean absolute difference per sample: [n, ...] x2 -> [n].
pub fn pix_per_sample<T: Element>(t: &Tape<T>, a: Var, b: Var) -> Var {
    nn::mean_per_sample(t, t.abs(t.sub(a, b)))
}

/// Per-level unit-normalized squared feature distance, averaged over levels.
pub fn lpips_per_sample<T: Element>(t: &Tape<T>, levels_a: &[Var], levels_b: &[Var]) -> Var {
    assert!(!levels_a.is_empty() && levels_a.len() == levels_b.len());
    let normalize = |x: Var| {
        let ssq = t.sum_axes_keepdim(t.square(x), &[1]);
        t.mul(x, t.rsqrt_eps(ssq, elem(1e-10)))
    };
    let mut acc: Option<Var> = None;
    for (&la, &lb) in levels_a.iter().zip(levels_b) {
        let d = nn::mean_per_sample(t, t.square(t.sub(normalize(la), normalize(lb))));
        acc = Some(match acc {
            Some(prev) => t.add(prev, d),
            None => d,
        });
    }
    t.scale(acc.unwrap(), elem(1.0 / levels_a.len() as f64))
}

/// 1 - cosine of unit embeddings: [n, d] x2 -> [n].
pub fn id_per_sample<T: Element>(t: &Tape<T>, emb_a: Var, emb_b: Var) -> Var {
    let cos = nn::row_cosine(t, emb_a, emb_b);
    t.add_scalar(t.neg(cos), T::one())
}

/// Mean absolute difference of shape descriptors: [n, d] x2 -> [n].
pub fn shape_per_sample<T: Element>(t: &Tape<T>, desc_a: Var, desc_b: Var) -> Var {
    nn::mean_per_sample(t, t.abs(t.sub(desc_a, desc_b)))
}

/// Smoothed Euclidean distance of gaze vectors: [n, 2] x2 -> [n].
pub fn gaze_per_sample<T: Element>(t: &Tape<T>, gaze_a: Var, gaze_b: Var) -> Var {
    let n = t.shape(gaze_a)[0];
    let d2 = t.sum_axes_keepdim(t.square(t.sub(gaze_a, gaze_b)), &[1]);
    let eps2 = GAZE_SMOOTH_EPS * GAZE_SMOOTH_EPS;
    let dist = t.add_scalar(t.sqrt(t.add_scalar(d2, elem(eps2))), elem(-GAZE_SMOOTH_EPS));
    t.reshape(dist, &[n])
}

/// One (source, target, reenacted) training sample plus oracle metadata.
pub struct Sample<'a, T: Element> {
    pub source: &'a ArrayD<T>,
    pub target: &'a ArrayD<T>,
    pub reenacted: &'a ArrayD<T>,
    pub target_params: Option<&'a PoseParams>,
    pub task: Phase,
}

/// Batched inputs for the tape objective. Images are [3, r, r] each.
pub struct BatchInputs<'a, T: Element> {
    pub sources: Vec<&'a ArrayD<T>>,
    pub targets: Vec<&'a ArrayD<T>>,
    pub target_params: Vec<Option<&'a PoseParams>>,
    pub tasks: Vec<Phase>,
}

pub struct BatchObjective {
    /// Scalar: mean over samples of the masked weighted term sum.
    pub total: Var,
    /// [n] per-sample totals.
    pub per_sample: Var,
    /// [n] raw term values.
    pub terms: RawTermVars,
    pub masks: Vec<TermMask>,
}

pub struct RawTermVars {
    pub pix: Var,
    pub lpips: Var,
    pub id: Var,
    pub shape: Var,
    pub gaze: Var,
}

fn stack_images<T: Element>(t: &Tape<T>, images: &[&ArrayD<T>]) -> Var {
    let r = images[0].shape()[1];
    let mut data = Vec::with_capacity(images.len() * 3 * r * r);
    for img in images {
        assert_eq!(img.shape(), &[3, r, r], "batch images must share shape");
        data.extend(img.as_slice().expect("standard layout").iter().copied());
    }
    t.constant(ArrayD::from_shape_vec(IxDyn(&[images.len(), 3, r, r]), data).unwrap())
}

/// Reference pose quantities: oracle values where provided, otherwise the
/// estimator applied to the (constant) reference images.
fn reference_pose<T: Element>(
    t: &Tape<T>,
    enc: &EncoderSet<T>,
    targets: Var,
    params: &[Option<&PoseParams>],
) -> (Var, Var, Var) {
    let needs_estimate = params.iter().any(|p| p.is_none());
    let estimated = if needs_estimate {
        let vars = enc.estimator.estimate_vars(t, targets);
        Some((t.value(vars.euler_deg), t.value(vars.expression), t.value(vars.gaze)))
    } else {
        None
    };
    let n = params.len();
    let e_dims = enc.config.expression_dims;
    let mut euler = ArrayD::zeros(IxDyn(&[n, 3]));
    let mut expr = ArrayD::zeros(IxDyn(&[n, e_dims]));
    let mut gaze = ArrayD::zeros(IxDyn(&[n, 2]));
    for (i, p) in params.iter().enumerate() {
        match p {
            Some(p) => {
                for j in 0..3 {
                    euler[[i, j]] = elem(p.euler[j]);
                }
                for j in 0..e_dims {
                    expr[[i, j]] = elem(p.expression[j]);
                }
                for j in 0..2 {
                    gaze[[i, j]] = elem(p.gaze[j]);
                }
            }
            None => {
                let (ee, xx, gg) = estimated.as_ref().expect("estimated refs");
                for j in 0..3 {
                    euler[[i, j]] = ee[[i, j]];
                }
                for j in 0..e_dims {
                    expr[[i, j]] = xx[[i, j]];
                }
                for j in 0..2 {
                    gaze[[i, j]] = gg[[i, j]];
                }
            }
        }
    }
    (t.constant(euler), t.constant(expr), t.constant(gaze))
}

/// Builds the masked batch objective over a generated image batch var.
pub fn batch_objective<T: Element>(
    t: &Tape<T>,
    enc: &EncoderSet<T>,
    inputs: &BatchInputs<T>,
    generated: Var,
    weights: &LossWeights,
    opts: &LossOptions,
) -> Result<BatchObjective> {
    weights.validate()?;
    let n = inputs.tasks.len();
    if inputs.sources.len() != n || inputs.targets.len() != n || inputs.target_params.len() != n {
        return Err(Error::InvalidConfig("batch input lengths disagree".into()));
    }
    let gen_shape = t.shape(generated);
    if gen_shape[0] != n {
        return Err(Error::shape("generated batch", &[n], &[gen_shape[0]]));
    }

    let targets = stack_images(t, &inputs.targets);
    let masks: Vec<TermMask> = inputs.tasks.iter().map(|&task| TermMask::for_task(task, opts)).collect();
    // Identity reference: source image for cross samples, target otherwise.
    let id_refs: Vec<&ArrayD<T>> = masks
        .iter()
        .zip(inputs.sources.iter().zip(&inputs.targets))
        .map(|(m, (s, tg))| if m.id_vs_source { *s } else { *tg })
        .collect();
    let id_ref_stack = stack_images(t, &id_refs);

    let pix = pix_per_sample(t, targets, generated);

    let gen_levels = enc.appearance.forward(t, generated);
    let ref_levels = enc.appearance.forward(t, targets);
    let lpips = lpips_per_sample(t, &ref_levels.levels, &gen_levels.levels);

    let emb_ref = enc.identity.forward(t, id_ref_stack);
    let emb_gen = enc.identity.forward(t, generated);
    let id = id_per_sample(t, emb_ref, emb_gen);

    let (ref_euler, ref_expr, ref_gaze) = reference_pose(t, enc, targets, &inputs.target_params);
    let ref_desc = facegeom::shape_descriptor_var(t, &enc.landmarks, ref_euler, ref_expr);
    let gen_pose = enc.estimator.estimate_vars(t, generated);
    let gen_desc = facegeom::shape_descriptor_var(t, &enc.landmarks, gen_pose.euler_deg, gen_pose.expression);
    let shape = shape_per_sample(t, ref_desc, gen_desc);

    let gaze = gaze_per_sample(t, ref_gaze, gen_pose.gaze);

    let mask_vec = |f: &dyn Fn(&TermMask) -> bool, lambda: f64| -> Var {
        t.constant(ArrayD::from_shape_vec(
            IxDyn(&[n]),
            masks.iter().map(|m| if f(m) { elem(lambda) } else { T::zero() }).collect(),
        )
        .unwrap())
    };
    let mut per_sample = t.mul(pix, mask_vec(&|m| m.pix, weights.lambda_pix));
    per_sample = t.add(per_sample, t.mul(lpips, mask_vec(&|m| m.lpips, weights.lambda_lpips)));
    per_sample = t.add(per_sample, t.mul(id, mask_vec(&|m| m.id, weights.lambda_id)));
    per_sample = t.add(per_sample, t.mul(shape, mask_vec(&|m| m.shape, weights.lambda_sh)));
    per_sample = t.add(per_sample, t.mul(gaze, mask_vec(&|m| m.gaze, weights.lambda_g)));
    let total = t.mean_all(per_sample);

    Ok(BatchObjective {
        total,
        per_sample,
        terms: RawTermVars { pix, lpips, id, shape, gaze },
        masks,
    })
}

/// Aggregates a batch's term values into a report: raw values average over
/// the samples where a term is active; weighted values average over the
/// whole batch so that total = sum of weighted terms.
pub fn batch_report<T: Element>(
    t: &Tape<T>,
    phase: Phase,
    obj: &BatchObjective,
    weights: &LossWeights,
) -> LossReport {
    let n = obj.masks.len() as f64;
    let term = |v: Var, include: &dyn Fn(&TermMask) -> bool, lambda: f64| -> (f64, f64) {
        let vals = t.value(v);
        let mut raw_sum = 0.0;
        let mut raw_n = 0.0;
        let mut weighted_sum = 0.0;
        for (i, m) in obj.masks.iter().enumerate() {
            let val = vals[[i]].as_f64();
            if include(m) {
                raw_sum += val;
                raw_n += 1.0;
                weighted_sum += lambda * val;
            }
        }
        (if raw_n > 0.0 { raw_sum / raw_n } else { 0.0 }, weighted_sum / n)
    };
    let (pix_r, pix_w) = term(obj.terms.pix, &|m| m.pix, weights.lambda_pix);
    let (lp_r, lp_w) = term(obj.terms.lpips, &|m| m.lpips, weights.lambda_lpips);
    let (id_r, id_w) = term(obj.terms.id, &|m| m.id, weights.lambda_id);
    let (sh_r, sh_w) = term(obj.terms.shape, &|m| m.shape, weights.lambda_sh);
    let (g_r, g_w) = term(obj.terms.gaze, &|m| m.gaze, weights.lambda_g);
    LossReport {
        phase,
        raw: TermValues { pix: pix_r, lpips: lp_r, id: id_r, shape: sh_r, gaze: g_r },
        weighted: TermValues { pix: pix_w, lpips: lp_w, id: id_w, shape: sh_w, gaze: g_w },
        total: pix_w + lp_w + id_w + sh_w + g_w,
    }
}

/// Spec operation: the weighted objective of one sample under its task tag.
pub fn phase_objective<T: Element>(
    sample: &Sample<'_, T>,
    weights: &LossWeights,
    enc: &EncoderSet<T>,
    opts: &LossOptions,
) -> Result<LossReport> {
    let t: Tape<T> = Tape::inference();
    let inputs = BatchInputs {
        sources: vec![sample.source],
        targets: vec![sample.target],
        target_params: vec![sample.target_params],
        tasks: vec![sample.task],
    };
    let generated = stack_images(&t, &[sample.reenacted]);
    let obj = batch_objective(&t, enc, &inputs, generated, weights, opts)?;
    let report = batch_report(&t, sample.task, &obj, weights);
    if !report.total.is_finite() {
        return Err(Error::NonFiniteLoss { step: 0, term: "total".into(), indices: vec![0] });
    }
    Ok(report)
}

// Single-pair spec operations.

pub fn l_pix<T: Element>(a: &ArrayD<T>, b: &ArrayD<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l_pix", a.shape(), b.shape()));
    }
    let t: Tape<T> = Tape::inference();
    let v = pix_per_sample(&t, stack_images(&t, &[a]), stack_images(&t, &[b]));
    Ok(t.value(v)[[0]].as_f64())
}

pub fn l_lpips<T: Element>(a: &ArrayD<T>, b: &ArrayD<T>, enc: &EncoderSet<T>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::shape("l_lpips", a.shape(), b.shape()));
    }
    let t: Tape<T> = Tape::inference();
    let la = enc.appearance.forward(&t, stack_images(&t, &[a]));
    let lb = enc.appearance.forward(&t, stack_images(&t, &[b]));
    let v = lpips_per_sample(&t, &la.levels, &lb.levels);
    Ok(t.value(v)[[0]].as_f64())
}

pub fn l_id<T: Element>(a: &ArrayD<T>, b: &ArrayD<T>, enc: &EncoderSet<T>) -> Result<f64> {
    let t: Tape<T> = Tape::inference();
    let ea = enc.identity.forward(&t, stack_images(&t, &[a]));
    let eb = enc.identity.forward(&t, stack_images(&t, &[b]));
    let v = id_per_sample(&t, ea, eb);
    Ok(t.value(v)[[0]].as_f64())
}

pub fn l_shape<T: Element>(
    a: &ArrayD<T>,
    b: &ArrayD<T>,
    enc: &EncoderSet<T>,
    a_params: Option<&PoseParams>,
    b_params: Option<&PoseParams>,
) -> Result<f64> {
    let t: Tape<T> = Tape::inference();
    let (ea, xa, _) = reference_pose(&t, enc, stack_images(&t, &[a]), &[a_params]);
    let (eb, xb, _) = reference_pose(&t, enc, stack_images(&t, &[b]), &[b_params]);
    let da = facegeom::shape_descriptor_var(&t, &enc.landmarks, ea, xa);
    let db = facegeom::shape_descriptor_var(&t, &enc.landmarks, eb, xb);
    let v = shape_per_sample(&t, da, db);
    Ok(t.value(v)[[0]].as_f64())
}

pub fn l_gaze<T: Element>(
    a: &ArrayD<T>,
    b: &ArrayD<T>,
    enc: &EncoderSet<T>,
    a_params: Option<&PoseParams>,
    b_params: Option<&PoseParams>,
) -> Result<f64> {
    let t: Tape<T> = Tape::inference();
    let (_, _, ga) = reference_pose(&t, enc, stack_images(&t, &[a]), &[a_params]);
    let (_, _, gb) = reference_pose(&t, enc, stack_images(&t, &[b]), &[b_params]);
    let v = gaze_per_sample(&t, ga, gb);
    Ok(t.value(v)[[0]].as_f64())
}
