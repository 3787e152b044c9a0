//! StyleGAN2-style synthesis network with per-forward-pass weight rewriting.
//!
//! The generator is frozen during reenactment training; the hypernetwork
//! rewrites convolution kernels multiplicatively per sample via
//! theta_hat = theta * (1 + delta) before style modulation. Convolutions use
//! the standard modulate/demodulate recipe; upsampling is nearest-neighbour;
//! the image head is a ToRGB skip chain finished by tanh.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use reenact_tensor::element::{elem, Element};
use reenact_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::arch::{GeneratorArch, LayerKind, STYLE_DIM};
use crate::error::{Error, Result};
use crate::init;
use crate::nn::{self, ParamReg};

const DEMOD_EPS: f64 = 1e-8;
const LRELU_SLOPE: f64 = 0.2;
const LRELU_GAIN: f64 = std::f64::consts::SQRT_2;

/// A W+ code: one style vector per style row of the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode<T: Element> {
    /// [style_rows, 512]
    pub styles: ArrayD<T>,
}

impl<T: Element> LatentCode<T> {
    pub fn new(styles: ArrayD<T>, arch: &GeneratorArch) -> Result<Self> {
        let expected = [arch.style_rows(), STYLE_DIM];
        if styles.shape() != expected {
            return Err(Error::shape("latent code", &expected, styles.shape()));
        }
        Ok(LatentCode { styles })
    }

    pub fn rows(&self) -> usize {
        self.styles.shape()[0]
    }
}

/// Multiplicative offsets for the controlled (Conv) layers. Every entry has
/// the full kernel shape of its layer; the two trailing spatial dims carry
/// identical values because each offset is predicted at 1x1 and repeated.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct WeightOffsets<T: Element> {
    pub entries: BTreeMap<usize, ArrayD<T>>,
}

impl<T: Element> WeightOffsets<T> {
    /// Checks keys, shapes, and the spatial-repeat invariant against an arch.
    pub fn validate(&self, arch: &GeneratorArch) -> Result<()> {
        let controlled = arch.controlled_layers();
        for (&idx, tensor) in &self.entries {
            if !controlled.contains(&idx) {
                return Err(Error::OffsetConformance(format!(
                    "layer {idx} is not a controlled Conv layer"
                )));
            }
            let expected = arch.layer(idx).kernel_shape();
            if tensor.shape() != expected {
                return Err(Error::shape(format!("offset for layer {idx}"), &expected, tensor.shape()));
            }
            let k = expected[2];
            for o in 0..expected[0] {
                for i in 0..expected[1] {
                    let first = tensor[[o, i, 0, 0]];
                    for a in 0..k {
                        for b in 0..k {
                            if tensor[[o, i, a, b]] != first {
                                return Err(Error::OffsetConformance(format!(
                                    "offset for layer {idx} is not spatially constant at ({o},{i})"
                                )));
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Fixed-seed per-layer noise injection; off by default so generation is
    /// a pure function of (weights, code).
    pub use_noise: bool,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig { seed: 1, use_noise: false }
    }
}

#[derive(Debug, Clone)]
pub struct ConvLayerWeights<T: Element> {
    pub kernel: ArrayD<T>,
    pub bias: ArrayD<T>,
    pub affine_w: ArrayD<T>,
    pub affine_b: ArrayD<T>,
    pub noise_strength: ArrayD<T>,
}

/// Frozen generator parameters plus the z->w mapping network.
#[derive(Debug, Clone)]
pub struct GeneratorWeights<T: Element> {
    pub layers: Vec<ConvLayerWeights<T>>,
    pub const_input: ArrayD<T>,
    pub mapping_w1: ArrayD<T>,
    pub mapping_b1: ArrayD<T>,
    pub mapping_w2: ArrayD<T>,
    pub mapping_b2: ArrayD<T>,
    pub config: GeneratorConfig,
    /// Per-layer fixed noise planes, derived from the seed; present only so
    /// noise mode stays reproducible.
    noise_planes: Vec<ArrayD<T>>,
}

impl<T: Element> GeneratorWeights<T> {
    pub fn init(arch: &GeneratorArch, config: GeneratorConfig) -> Self {
        let mut rng = init::rng_for(config.seed, "generator");
        let mut layers = Vec::with_capacity(arch.layers.len());
        let mut noise_planes = Vec::with_capacity(arch.layers.len());
        for spec in &arch.layers {
            let kernel = init::kaiming_conv(&mut rng, spec.out_channels, spec.in_channels, spec.kernel_size);
            let bias = init::zeros(&[spec.out_channels]);
            let affine_w = init::normal(&mut rng, &[STYLE_DIM, spec.in_channels], (1.0 / STYLE_DIM as f64).sqrt());
            let affine_b = init::full(&[spec.in_channels], 1.0);
            layers.push(ConvLayerWeights {
                kernel,
                bias,
                affine_w,
                affine_b,
                noise_strength: init::zeros(&[1]),
            });
            noise_planes.push(init::normal(&mut rng, &[1, 1, spec.resolution, spec.resolution], 1.0));
        }
        let base_ch = arch.layer(0).in_channels;
        let const_input = init::normal(&mut rng, &[base_ch, 4, 4], 1.0);
        GeneratorWeights {
            layers,
            const_input,
            mapping_w1: init::kaiming_fc(&mut rng, STYLE_DIM, STYLE_DIM),
            mapping_b1: init::zeros(&[STYLE_DIM]),
            mapping_w2: init::kaiming_fc(&mut rng, STYLE_DIM, STYLE_DIM),
            mapping_b2: init::zeros(&[STYLE_DIM]),
            config,
            noise_planes,
        }
    }

    pub fn named_tensors(&self) -> Vec<(String, &ArrayD<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("gen.layer{i}.kernel"), &l.kernel));
            out.push((format!("gen.layer{i}.bias"), &l.bias));
            out.push((format!("gen.layer{i}.affine_w"), &l.affine_w));
            out.push((format!("gen.layer{i}.affine_b"), &l.affine_b));
            out.push((format!("gen.layer{i}.noise_strength"), &l.noise_strength));
        }
        out.push(("gen.const_input".into(), &self.const_input));
        out.push(("gen.mapping.w1".into(), &self.mapping_w1));
        out.push(("gen.mapping.b1".into(), &self.mapping_b1));
        out.push(("gen.mapping.w2".into(), &self.mapping_w2));
        out.push(("gen.mapping.b2".into(), &self.mapping_b2));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut ArrayD<T>)> {
        let mut out = Vec::new();
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("gen.layer{i}.kernel"), &mut l.kernel));
            out.push((format!("gen.layer{i}.bias"), &mut l.bias));
            out.push((format!("gen.layer{i}.affine_w"), &mut l.affine_w));
            out.push((format!("gen.layer{i}.affine_b"), &mut l.affine_b));
            out.push((format!("gen.layer{i}.noise_strength"), &mut l.noise_strength));
        }
        out.push(("gen.const_input".into(), &mut self.const_input));
        out.push(("gen.mapping.w1".into(), &mut self.mapping_w1));
        out.push(("gen.mapping.b1".into(), &mut self.mapping_b1));
        out.push(("gen.mapping.w2".into(), &mut self.mapping_w2));
        out.push(("gen.mapping.b2".into(), &mut self.mapping_b2));
        out
    }

    /// Validates that kernels conform to the arch.
    pub fn conforms(&self, arch: &GeneratorArch) -> Result<()> {
        if self.layers.len() != arch.layers.len() {
            return Err(Error::InvalidConfig(format!(
                "weights have {} layers, arch has {}",
                self.layers.len(),
                arch.layers.len()
            )));
        }
        for (spec, l) in arch.layers.iter().zip(&self.layers) {
            let expected = spec.kernel_shape();
            if l.kernel.shape() != expected {
                return Err(Error::shape(format!("kernel of {}", spec.name), &expected, l.kernel.shape()));
            }
        }
        Ok(())
    }

    /// z -> w through the mapping network (unused by the reenactment path,
    /// which receives codes from the inversion interface).
    pub fn map_latent(&self, z: &ArrayD<T>) -> ArrayD<T> {
        let t: Tape<T> = Tape::inference();
        let zv = t.constant(z.clone());
        let h = t.leaky_relu(
            nn::linear(&t, zv, t.constant(self.mapping_w1.clone()), t.constant(self.mapping_b1.clone())),
            elem(LRELU_SLOPE),
        );
        let w = nn::linear(&t, h, t.constant(self.mapping_w2.clone()), t.constant(self.mapping_b2.clone()));
        t.value(w).to_owned()
    }
}

/// theta_hat = theta * (1 + delta) for every controlled layer with an entry;
/// all other layers pass through untouched. Pure: inputs are unmodified.
pub fn apply_offsets<T: Element>(
    arch: &GeneratorArch,
    base: &GeneratorWeights<T>,
    offsets: &WeightOffsets<T>,
) -> Result<GeneratorWeights<T>> {
    base.conforms(arch)?;
    offsets.validate(arch)?;
    let mut out = base.clone();
    for (&idx, delta) in &offsets.entries {
        let one_plus = delta.mapv(|d| T::one() + d);
        out.layers[idx].kernel = &base.layers[idx].kernel * &one_plus;
    }
    Ok(out)
}

/// Tape-bound generator tensors.
pub struct GeneratorVars {
    layers: Vec<[Var; 5]>,
    const_input: Var,
}

impl<T: Element> GeneratorWeights<T> {
    pub fn bind(&self, t: &Tape<T>, mut reg: Option<&mut ParamReg>) -> GeneratorVars {
        let layers = self
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| {
                [
                    nn::bind(t, &mut reg, &format!("gen.layer{i}.kernel"), &l.kernel),
                    nn::bind(t, &mut reg, &format!("gen.layer{i}.bias"), &l.bias),
                    nn::bind(t, &mut reg, &format!("gen.layer{i}.affine_w"), &l.affine_w),
                    nn::bind(t, &mut reg, &format!("gen.layer{i}.affine_b"), &l.affine_b),
                    nn::bind(t, &mut reg, &format!("gen.layer{i}.noise_strength"), &l.noise_strength),
                ]
            })
            .collect();
        GeneratorVars {
            layers,
            const_input: nn::bind(t, &mut reg, "gen.const_input", &self.const_input),
        }
    }
}

/// One modulated convolution. `delta` is a per-sample [n,co,ci,k,k] offset.
fn modulated_conv<T: Element>(
    t: &Tape<T>,
    x: Var,
    kernel: Var,
    affine_w: Var,
    affine_b: Var,
    w_row: Var,
    delta: Option<Var>,
    demodulate: bool,
    pad: usize,
) -> Var {
    let n = t.shape(x)[0];
    let kshape = t.shape(kernel);
    let (co, ci, k) = (kshape[0], kshape[1], kshape[2]);

    // Per-sample effective kernel: theta * (1 + delta), then style-modulated.
    let base = t.reshape(kernel, &[1, co, ci, k, k]);
    let eff = match delta {
        Some(d) => t.mul(base, t.add_scalar(d, T::one())),
        None => base,
    };
    let styles = nn::linear(t, w_row, affine_w, affine_b); // [n, ci]
    let styles = t.reshape(styles, &[n, 1, ci, 1, 1]);
    let modulated = t.mul(eff, styles); // [n, co, ci, k, k]
    let weights = if demodulate {
        let ssq = t.sum_axes_keepdim(t.square(modulated), &[2, 3, 4]);
        t.mul(modulated, t.rsqrt_eps(ssq, elem(DEMOD_EPS)))
    } else {
        modulated
    };
    t.conv2d_per_sample(x, weights, pad)
}

/// Synthesizes images from per-layer kernels and a W+ code batch.
///
/// `w_codes` is [n, style_rows, 512]; `offsets` maps controlled layer index
/// to per-sample [n,co,ci,k,k] offset vars. Returns the [n,3,r,r] image in
/// [-1, 1] plus the post-activation output of every Conv layer (for
/// locality checks).
pub fn synthesize_var<T: Element>(
    t: &Tape<T>,
    arch: &GeneratorArch,
    gen: &GeneratorVars,
    weights: &GeneratorWeights<T>,
    w_codes: Var,
    offsets: &BTreeMap<usize, Var>,
) -> (Var, Vec<(usize, Var)>) {
    let wshape = t.shape(w_codes);
    assert_eq!(wshape[1], arch.style_rows(), "W+ row count mismatch");
    assert_eq!(wshape[2], STYLE_DIM);
    let n = wshape[0];

    let mut trace = Vec::new();
    let base_ch = arch.layer(0).in_channels;
    let ones = t.constant(ArrayD::from_elem(IxDyn(&[n, 1, 1, 1]), T::one()));
    let mut x = t.mul(t.reshape(gen.const_input, &[1, base_ch, 4, 4]), ones);
    let mut rgb: Option<Var> = None;
    let mut cur_res = arch.base_resolution;

    for spec in &arch.layers {
        let vars = &gen.layers[spec.index];
        let w_row = slice_row(t, w_codes, arch.style_row(spec.index));
        match spec.kind {
            LayerKind::Conv => {
                if spec.resolution > cur_res {
                    x = t.upsample2x(x);
                    cur_res = spec.resolution;
                }
                x = modulated_conv(
                    t,
                    x,
                    vars[0],
                    vars[2],
                    vars[3],
                    w_row,
                    offsets.get(&spec.index).copied(),
                    true,
                    spec.kernel_size / 2,
                );
                if weights.config.use_noise {
                    let plane = t.constant(weights.noise_planes[spec.index].clone());
                    x = t.add(x, t.mul(plane, t.reshape(vars[4], &[1, 1, 1, 1])));
                }
                x = nn::bias_channels(t, x, vars[1]);
                x = t.scale(t.leaky_relu(x, elem(LRELU_SLOPE)), elem(LRELU_GAIN));
                trace.push((spec.index, x));
            }
            LayerKind::ToRgb => {
                let y = modulated_conv(t, x, vars[0], vars[2], vars[3], w_row, None, false, 0);
                let y = nn::bias_channels(t, y, vars[1]);
                rgb = Some(match rgb {
                    Some(prev) => t.add(t.upsample2x(prev), y),
                    None => y,
                });
            }
        }
    }
    let image = t.tanh(rgb.expect("arch has at least one ToRGB layer"));
    (image, trace)
}

/// Extracts style row `row` from [n, rows, 512] as [n, 512] via a one-hot
/// contraction, so the op stays on the tape.
fn slice_row<T: Element>(t: &Tape<T>, w_codes: Var, row: usize) -> Var {
    let shape = t.shape(w_codes);
    let (n, rows, d) = (shape[0], shape[1], shape[2]);
    let mut sel = ArrayD::zeros(IxDyn(&[1, rows, 1]));
    sel[[0, row, 0]] = T::one();
    let picked = t.mul(w_codes, t.constant(sel));
    t.reshape(t.sum_axes_keepdim(picked, &[1]), &[n, d])
}

/// Plain (non-tape) synthesis of a single image. Deterministic given
/// (weights, code); offsets, when given, are applied via the same
/// per-sample kernel path used in training.
pub fn synthesize<T: Element>(
    arch: &GeneratorArch,
    weights: &GeneratorWeights<T>,
    code: &LatentCode<T>,
    offsets: Option<&WeightOffsets<T>>,
) -> Result<ArrayD<T>> {
    weights.conforms(arch)?;
    if code.rows() != arch.style_rows() {
        return Err(Error::shape(
            "latent code rows",
            &[arch.style_rows(), STYLE_DIM],
            code.styles.shape(),
        ));
    }
    if let Some(offs) = offsets {
        offs.validate(arch)?;
    }
    let t: Tape<T> = Tape::inference();
    let gen = weights.bind(&t, None);
    let w = t.constant(
        code.styles
            .clone()
            .into_shape_with_order(IxDyn(&[1, code.rows(), STYLE_DIM]))
            .unwrap(),
    );
    let mut off_vars = BTreeMap::new();
    if let Some(offs) = offsets {
        for (&idx, delta) in &offs.entries {
            let mut shape = vec![1usize];
            shape.extend_from_slice(delta.shape());
            off_vars.insert(
                idx,
                t.constant(delta.clone().into_shape_with_order(IxDyn(&shape)).unwrap()),
            );
        }
    }
    let (img, _) = synthesize_var(&t, arch, &gen, weights, w, &off_vars);
    let full = t.value(img).to_owned();
    Ok(full.into_shape_with_order(IxDyn(&[3, arch.output_resolution, arch.output_resolution])).unwrap())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::scaled_arch;

    fn test_code<T: Element>(arch: &GeneratorArch, seed: u64) -> LatentCode<T> {
        let mut rng = init::rng_for(seed, "test-code");
        LatentCode::new(init::normal(&mut rng, &[arch.style_rows(), STYLE_DIM], 1.0), arch).unwrap()
    }

    #[test]
    fn apply_offsets_scalar_cases() {
        let arch = scaled_arch(8, 8).unwrap();
        let weights = GeneratorWeights::<f32>::init(&arch, GeneratorConfig::default());
        let mut base = weights.clone();
        base.layers[0].kernel.fill(2.0);

        // delta = 0.5 -> theta_hat = 3.0
        let mut offs = WeightOffsets::default();
        offs.entries.insert(0, init::full(&arch.layer(0).kernel_shape(), 0.5));
        let updated = apply_offsets(&arch, &base, &offs).unwrap();
        assert!(updated.layers[0].kernel.iter().all(|&v| v == 3.0));

        // delta = 0 -> identity, bitwise
        let mut zero = WeightOffsets::default();
        zero.entries.insert(0, init::zeros(&arch.layer(0).kernel_shape()));
        let same = apply_offsets(&arch, &base, &zero).unwrap();
        assert_eq!(same.layers[0].kernel, base.layers[0].kernel);

        // delta = -1 -> annihilation
        let mut neg = WeightOffsets::default();
        neg.entries.insert(0, init::full(&arch.layer(0).kernel_shape(), -1.0));
        let zeroed = apply_offsets(&arch, &base, &neg).unwrap();
        assert!(zeroed.layers[0].kernel.iter().all(|&v| v == 0.0));

        // untouched layers and inputs unchanged
        assert_eq!(updated.layers[1].kernel, base.layers[1].kernel);
        assert!(base.layers[0].kernel.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn apply_offsets_rejects_nonconforming() {
        let arch = scaled_arch(8, 8).unwrap();
        let weights = GeneratorWeights::<f32>::init(&arch, GeneratorConfig::default());
        // ToRGB layer (index 1) is not controlled
        let mut offs = WeightOffsets::default();
        offs.entries.insert(1, init::zeros(&[3, 8, 1, 1]));
        assert!(apply_offsets(&arch, &weights, &offs).is_err());
        // wrong shape
        let mut bad = WeightOffsets::default();
        bad.entries.insert(0, init::zeros(&[4, 8, 3, 3]));
        assert!(apply_offsets(&arch, &weights, &bad).is_err());
    }

    #[test]
    fn synthesis_is_deterministic_and_in_range() {
        let arch = scaled_arch(16, 16).unwrap();
        let weights = GeneratorWeights::<f32>::init(&arch, GeneratorConfig::default());
        let code = test_code::<f32>(&arch, 3);
        let a = synthesize(&arch, &weights, &code, None).unwrap();
        let b = synthesize(&arch, &weights, &code, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[3, 16, 16]);
        assert!(a.iter().all(|v| v.is_finite() && (-1.0..=1.0).contains(v)));
    }

    #[test]
    fn zero_offsets_reproduce_base_synthesis_exactly() {
        let arch = scaled_arch(16, 16).unwrap();
        let weights = GeneratorWeights::<f32>::init(&arch, GeneratorConfig::default());
        let code = test_code::<f32>(&arch, 4);
        let mut offs = WeightOffsets::default();
        for idx in arch.controlled_layers() {
            offs.entries.insert(idx, init::zeros(&arch.layer(idx).kernel_shape()));
        }
        let plain = synthesize(&arch, &weights, &code, None).unwrap();
        let with = synthesize(&arch, &weights, &code, Some(&offs)).unwrap();
        assert_eq!(plain, with);
    }

    #[test]
    fn output_resolution_follows_arch() {
        let arch = scaled_arch(32, 8).unwrap();
        let weights = GeneratorWeights::<f32>::init(&arch, GeneratorConfig::default());
        let code = test_code::<f32>(&arch, 5);
        let img = synthesize(&arch, &weights, &code, None).unwrap();
        assert_eq!(img.shape(), &[3, 32, 32]);
    }

    #[test]
    fn noise_mode_is_reproducible() {
        let arch = scaled_arch(8, 8).unwrap();
        let cfg = GeneratorConfig { seed: 9, use_noise: true };
        let mut weights = GeneratorWeights::<f32>::init(&arch, cfg);
        for l in &mut weights.layers {
            l.noise_strength.fill(0.1);
        }
        let code = test_code::<f32>(&arch, 6);
        let a = synthesize(&arch, &weights, &code, None).unwrap();
        let b = synthesize(&arch, &weights, &code, None).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn mapping_network_shapes() {
        let arch = scaled_arch(8, 8).unwrap();
        let weights = GeneratorWeights::<f32>::init(&arch, GeneratorConfig::default());
        let mut rng = init::rng_for(11, "z");
        let z = init::normal::<f32>(&mut rng, &[2, STYLE_DIM], 1.0);
        let w = weights.map_latent(&z);
        assert_eq!(w.shape(), &[2, STYLE_DIM]);
    }
}
