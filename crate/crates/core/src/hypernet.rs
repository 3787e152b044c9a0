//! Hypernetwork: per-controlled-layer Reenactment Blocks that read the fused
//! 512x7x7 feature map and emit multiplicative kernel offsets.
//!
//! Max-channel square layers get Shared blocks whose two heavy
//! fully-connected layers are single tensors aliased across all of them:
//! the first is a dense [512 -> cap*cap] map, the second acts row-wise with
//! a [cap -> cap] weight. Channel-reducing layers get Layer-specific blocks
//! with one dense head each. Heads are zero-initialized so training starts
//! at the identity generator. Offsets are predicted at 1x1 and spatially
//! repeated to each layer's kernel size.

use std::collections::BTreeMap;

use ndarray::{ArrayD, IxDyn};
use reenact_tensor::element::{elem, Element};
use reenact_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::arch::GeneratorArch;
use crate::encoders::{FeatureKind, FeatureMap, APPEARANCE_CHANNELS, FEATURE_GRID};
use crate::error::{Error, Result};
use crate::generator::WeightOffsets;
use crate::init;
use crate::nn::{self, ParamReg};

const RB_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockType {
    Shared,
    LayerSpecific,
}

/// Which controlled layer gets which block type.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockAssignment {
    pub entries: Vec<(usize, BlockType)>,
}

impl BlockAssignment {
    /// Max-channel square kernels share their heavy head; channel-reducing
    /// layers get layer-specific heads. At the canonical arch this yields
    /// the published split: layers {0,2,3,5,6,8,9} shared, the last six
    /// layer-specific.
    pub fn for_arch(arch: &GeneratorArch) -> Self {
        let cap = arch.max_channels();
        let entries = arch
            .controlled_layers()
            .into_iter()
            .map(|idx| {
                let l = arch.layer(idx);
                let ty = if l.in_channels == cap && l.out_channels == cap {
                    BlockType::Shared
                } else {
                    BlockType::LayerSpecific
                };
                (idx, ty)
            })
            .collect();
        BlockAssignment { entries }
    }

    pub fn shared_layers(&self) -> Vec<usize> {
        self.entries.iter().filter(|(_, t)| *t == BlockType::Shared).map(|(i, _)| *i).collect()
    }

    pub fn specific_layers(&self) -> Vec<usize> {
        self.entries
            .iter()
            .filter(|(_, t)| *t == BlockType::LayerSpecific)
            .map(|(i, _)| *i)
            .collect()
    }

    pub fn validate(&self, arch: &GeneratorArch) -> Result<()> {
        let controlled = arch.controlled_layers();
        for (idx, _) in &self.entries {
            if !controlled.contains(idx) {
                return Err(Error::OffsetConformance(format!(
                    "assignment references non-Conv layer {idx}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HypernetConfig {
    pub seed: u64,
    /// Mid channels of the Shared block conv stack (128 at canonical scale).
    pub shared_mid: usize,
    /// Mid channels of the Layer-specific conv stack (256 at canonical).
    pub specific_mid: usize,
    /// Alias the two heavy FCs across all Shared blocks.
    pub share_fcs: bool,
}

impl Default for HypernetConfig {
    fn default() -> Self {
        HypernetConfig { seed: 7, shared_mid: 128, specific_mid: 256, share_fcs: true }
    }
}

/// The four-conv downsampling stack every block starts with: 7x7 -> 1x1.
#[derive(Debug, Clone)]
pub struct RbConvStack<T: Element> {
    pub convs: Vec<(ArrayD<T>, ArrayD<T>)>,
}

impl<T: Element> RbConvStack<T> {
    fn init(rng: &mut rand_chacha::ChaCha8Rng, mid: usize) -> Self {
        let c = APPEARANCE_CHANNELS;
        RbConvStack {
            convs: vec![
                (init::kaiming_conv(rng, mid, c, 3), init::zeros(&[mid])),
                (init::kaiming_conv(rng, mid, mid, 3), init::zeros(&[mid])),
                (init::kaiming_conv(rng, mid, mid, 3), init::zeros(&[mid])),
                (init::kaiming_conv(rng, c, mid, 3), init::zeros(&[c])),
            ],
        }
    }

    fn param_count(mid: usize) -> u64 {
        let c = APPEARANCE_CHANNELS as u64;
        let m = mid as u64;
        (m * c * 9 + m) + 2 * (m * m * 9 + m) + (c * m * 9 + c)
    }

    /// [n, 512, 7, 7] -> [n, 512] with intermediate shapes recorded.
    fn forward(&self, t: &Tape<T>, vars: &[(Var, Var)], x: Var, trace: &mut Vec<Vec<usize>>) -> Var {
        let mut h = x;
        for (i, (w, b)) in vars.iter().enumerate() {
            let pad = if i == 0 { 1 } else { 0 };
            h = t.leaky_relu(nn::bias_channels(t, t.conv2d(h, *w, pad), *b), elem(RB_SLOPE));
            trace.push(t.shape(h));
        }
        let shape = t.shape(h);
        let flat = t.reshape(h, &[shape[0], shape[1]]);
        trace.push(t.shape(flat));
        flat
    }
}

#[derive(Debug, Clone)]
pub struct SharedBlock<T: Element> {
    pub layer_index: usize,
    pub conv: RbConvStack<T>,
    /// Per-block FC [512 -> 512].
    pub fc0_w: ArrayD<T>,
    pub fc0_b: ArrayD<T>,
}

#[derive(Debug, Clone)]
pub struct SpecificBlock<T: Element> {
    pub layer_index: usize,
    pub conv: RbConvStack<T>,
    /// Dense head [512 -> c_out * c_in], zero-initialized.
    pub fc_w: ArrayD<T>,
    pub fc_b: ArrayD<T>,
}

/// One aliased pair of heavy shared FCs (or per-block copies when sharing
/// is disabled).
#[derive(Debug, Clone)]
pub struct SharedFcs<T: Element> {
    /// Dense [512 -> cap*cap], fan-in init.
    pub fc1_w: ArrayD<T>,
    pub fc1_b: ArrayD<T>,
    /// Row-wise head [cap -> cap], zero-initialized.
    pub fc2_w: ArrayD<T>,
    pub fc2_b: ArrayD<T>,
}

impl<T: Element> SharedFcs<T> {
    fn init(rng: &mut rand_chacha::ChaCha8Rng, cap: usize) -> Self {
        SharedFcs {
            fc1_w: init::kaiming_fc(rng, APPEARANCE_CHANNELS, cap * cap),
            fc1_b: init::zeros(&[cap * cap]),
            fc2_w: init::zeros(&[cap, cap]),
            fc2_b: init::zeros(&[cap]),
        }
    }

    fn param_count(cap: u64) -> u64 {
        let c = APPEARANCE_CHANNELS as u64;
        (c * cap * cap + cap * cap) + (cap * cap + cap)
    }
}

#[derive(Debug, Clone)]
pub struct HypernetParams<T: Element> {
    pub config: HypernetConfig,
    pub assignment: BlockAssignment,
    pub cap: usize,
    pub shared_blocks: Vec<SharedBlock<T>>,
    /// One entry when `share_fcs`, one per shared block otherwise.
    pub shared_fcs: Vec<SharedFcs<T>>,
    pub specific_blocks: Vec<SpecificBlock<T>>,
}

impl<T: Element> HypernetParams<T> {
    pub fn init(arch: &GeneratorArch, config: HypernetConfig) -> Self {
        let assignment = BlockAssignment::for_arch(arch);
        let cap = arch.max_channels();
        let mut rng = init::rng_for(config.seed, "hypernet");
        let shared_blocks: Vec<SharedBlock<T>> = assignment
            .shared_layers()
            .into_iter()
            .map(|layer_index| SharedBlock {
                layer_index,
                conv: RbConvStack::init(&mut rng, config.shared_mid),
                fc0_w: init::kaiming_fc(&mut rng, APPEARANCE_CHANNELS, APPEARANCE_CHANNELS),
                fc0_b: init::zeros(&[APPEARANCE_CHANNELS]),
            })
            .collect();
        let fc_copies = if config.share_fcs { 1 } else { shared_blocks.len().max(1) };
        let shared_fcs = (0..fc_copies).map(|_| SharedFcs::init(&mut rng, cap)).collect();
        let specific_blocks = assignment
            .specific_layers()
            .into_iter()
            .map(|layer_index| {
                let l = arch.layer(layer_index);
                SpecificBlock {
                    layer_index,
                    conv: RbConvStack::init(&mut rng, config.specific_mid),
                    fc_w: init::zeros(&[APPEARANCE_CHANNELS, l.out_channels * l.in_channels]),
                    fc_b: init::zeros(&[l.out_channels * l.in_channels]),
                }
            })
            .collect();
        HypernetParams { config, assignment, cap, shared_blocks, shared_fcs, specific_blocks }
    }

    pub fn named_tensors(&self) -> Vec<(String, &ArrayD<T>)> {
        let mut out: Vec<(String, &ArrayD<T>)> = Vec::new();
        for b in &self.shared_blocks {
            let p = format!("hyper.shared{}", b.layer_index);
            for (i, (w, bias)) in b.conv.convs.iter().enumerate() {
                out.push((format!("{p}.conv{i}.w"), w));
                out.push((format!("{p}.conv{i}.b"), bias));
            }
            out.push((format!("{p}.fc0.w"), &b.fc0_w));
            out.push((format!("{p}.fc0.b"), &b.fc0_b));
        }
        for (i, fcs) in self.shared_fcs.iter().enumerate() {
            let p = format!("hyper.sharedfc{i}");
            out.push((format!("{p}.fc1.w"), &fcs.fc1_w));
            out.push((format!("{p}.fc1.b"), &fcs.fc1_b));
            out.push((format!("{p}.fc2.w"), &fcs.fc2_w));
            out.push((format!("{p}.fc2.b"), &fcs.fc2_b));
        }
        for b in &self.specific_blocks {
            let p = format!("hyper.specific{}", b.layer_index);
            for (i, (w, bias)) in b.conv.convs.iter().enumerate() {
                out.push((format!("{p}.conv{i}.w"), w));
                out.push((format!("{p}.conv{i}.b"), bias));
            }
            out.push((format!("{p}.fc.w"), &b.fc_w));
            out.push((format!("{p}.fc.b"), &b.fc_b));
        }
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut ArrayD<T>)> {
        let mut out: Vec<(String, &mut ArrayD<T>)> = Vec::new();
        for b in &mut self.shared_blocks {
            let p = format!("hyper.shared{}", b.layer_index);
            for (i, (w, bias)) in b.conv.convs.iter_mut().enumerate() {
                out.push((format!("{p}.conv{i}.w"), w));
                out.push((format!("{p}.conv{i}.b"), bias));
            }
            out.push((format!("{p}.fc0.w"), &mut b.fc0_w));
            out.push((format!("{p}.fc0.b"), &mut b.fc0_b));
        }
        for (i, fcs) in self.shared_fcs.iter_mut().enumerate() {
            let p = format!("hyper.sharedfc{i}");
            out.push((format!("{p}.fc1.w"), &mut fcs.fc1_w));
            out.push((format!("{p}.fc1.b"), &mut fcs.fc1_b));
            out.push((format!("{p}.fc2.w"), &mut fcs.fc2_w));
            out.push((format!("{p}.fc2.b"), &mut fcs.fc2_b));
        }
        for b in &mut self.specific_blocks {
            let p = format!("hyper.specific{}", b.layer_index);
            for (i, (w, bias)) in b.conv.convs.iter_mut().enumerate() {
                out.push((format!("{p}.conv{i}.w"), w));
                out.push((format!("{p}.conv{i}.b"), bias));
            }
            out.push((format!("{p}.fc.w"), &mut b.fc_w));
            out.push((format!("{p}.fc.b"), &mut b.fc_b));
        }
        out
    }
}

pub struct HypernetVars {
    shared: Vec<(usize, Vec<(Var, Var)>, Var, Var)>,
    shared_fcs: Vec<(Var, Var, Var, Var)>,
    specific: Vec<(usize, Vec<(Var, Var)>, Var, Var)>,
}

impl<T: Element> HypernetParams<T> {
    pub fn bind(&self, t: &Tape<T>, mut reg: Option<&mut ParamReg>) -> HypernetVars {
        let shared = self
            .shared_blocks
            .iter()
            .map(|b| {
                let p = format!("hyper.shared{}", b.layer_index);
                let convs = b
                    .conv
                    .convs
                    .iter()
                    .enumerate()
                    .map(|(i, (w, bias))| {
                        (
                            nn::bind(t, &mut reg, &format!("{p}.conv{i}.w"), w),
                            nn::bind(t, &mut reg, &format!("{p}.conv{i}.b"), bias),
                        )
                    })
                    .collect();
                (
                    b.layer_index,
                    convs,
                    nn::bind(t, &mut reg, &format!("{p}.fc0.w"), &b.fc0_w),
                    nn::bind(t, &mut reg, &format!("{p}.fc0.b"), &b.fc0_b),
                )
            })
            .collect();
        let shared_fcs = self
            .shared_fcs
            .iter()
            .enumerate()
            .map(|(i, fcs)| {
                let p = format!("hyper.sharedfc{i}");
                (
                    nn::bind(t, &mut reg, &format!("{p}.fc1.w"), &fcs.fc1_w),
                    nn::bind(t, &mut reg, &format!("{p}.fc1.b"), &fcs.fc1_b),
                    nn::bind(t, &mut reg, &format!("{p}.fc2.w"), &fcs.fc2_w),
                    nn::bind(t, &mut reg, &format!("{p}.fc2.b"), &fcs.fc2_b),
                )
            })
            .collect();
        let specific = self
            .specific_blocks
            .iter()
            .map(|b| {
                let p = format!("hyper.specific{}", b.layer_index);
                let convs = b
                    .conv
                    .convs
                    .iter()
                    .enumerate()
                    .map(|(i, (w, bias))| {
                        (
                            nn::bind(t, &mut reg, &format!("{p}.conv{i}.w"), w),
                            nn::bind(t, &mut reg, &format!("{p}.conv{i}.b"), bias),
                        )
                    })
                    .collect();
                (
                    b.layer_index,
                    convs,
                    nn::bind(t, &mut reg, &format!("{p}.fc.w"), &b.fc_w),
                    nn::bind(t, &mut reg, &format!("{p}.fc.b"), &b.fc_b),
                )
            })
            .collect();
        HypernetVars { shared, shared_fcs, specific }
    }
}

/// Shape trace of one block's forward, for conformance checks.
#[derive(Debug, Clone)]
pub struct BlockTrace {
    pub layer_index: usize,
    pub block_type: BlockType,
    pub stages: Vec<Vec<usize>>,
}

/// Predicts per-sample offsets for every assigned layer from the fused map
/// [n, 512, 7, 7]. Returned vars are [n, c_out, c_in, k, k].
pub fn predict_offsets_var<T: Element>(
    t: &Tape<T>,
    params: &HypernetParams<T>,
    vars: &HypernetVars,
    arch: &GeneratorArch,
    f_r: Var,
) -> (BTreeMap<usize, Var>, Vec<BlockTrace>) {
    let n = t.shape(f_r)[0];
    let cap = params.cap;
    let mut offsets = BTreeMap::new();
    let mut traces = Vec::new();

    for (slot, (layer_index, convs, fc0_w, fc0_b)) in vars.shared.iter().enumerate() {
        let spec = arch.layer(*layer_index);
        let k = spec.kernel_size;
        let block = &params.shared_blocks[slot];
        let mut stages = Vec::new();
        let flat = block.conv.forward(t, convs, f_r, &mut stages);
        let h = nn::linear(t, flat, *fc0_w, *fc0_b);
        stages.push(t.shape(h));
        let fc_idx = if params.config.share_fcs { 0 } else { slot };
        let (fc1_w, fc1_b, fc2_w, fc2_b) = vars.shared_fcs[fc_idx];
        let wide = nn::linear(t, h, fc1_w, fc1_b); // [n, cap*cap]
        stages.push(t.shape(wide));
        let rows = t.reshape(wide, &[n * cap, cap]);
        let mapped = nn::linear(t, rows, fc2_w, fc2_b);
        let mapped = t.reshape(mapped, &[n, cap * cap]);
        stages.push(t.shape(mapped));
        let offset = t.reshape(mapped, &[n, cap, cap, 1, 1]);
        stages.push(t.shape(offset));
        let repeated = t.repeat_spatial(offset, k);
        stages.push(t.shape(repeated));
        offsets.insert(*layer_index, repeated);
        traces.push(BlockTrace { layer_index: *layer_index, block_type: BlockType::Shared, stages });
    }

    for (slot, (layer_index, convs, fc_w, fc_b)) in vars.specific.iter().enumerate() {
        let spec = arch.layer(*layer_index);
        let (co, ci, k) = (spec.out_channels, spec.in_channels, spec.kernel_size);
        let block = &params.specific_blocks[slot];
        let mut stages = Vec::new();
        let flat = block.conv.forward(t, convs, f_r, &mut stages);
        let head = nn::linear(t, flat, *fc_w, *fc_b); // [n, co*ci]
        stages.push(t.shape(head));
        let offset = t.reshape(head, &[n, co, ci, 1, 1]);
        stages.push(t.shape(offset));
        let repeated = t.repeat_spatial(offset, k);
        stages.push(t.shape(repeated));
        offsets.insert(*layer_index, repeated);
        traces.push(BlockTrace {
            layer_index: *layer_index,
            block_type: BlockType::LayerSpecific,
            stages,
        });
    }

    (offsets, traces)
}

impl<T: Element> HypernetParams<T> {
    /// Spec operation: offsets for one fused feature map.
    pub fn predict_offsets(&self, arch: &GeneratorArch, f_r: &FeatureMap<T>) -> Result<WeightOffsets<T>> {
        if f_r.kind != FeatureKind::Fused {
            return Err(Error::InvalidConfig(format!("expected Fused features, got {:?}", f_r.kind)));
        }
        self.assignment.validate(arch)?;
        let t: Tape<T> = Tape::inference();
        let vars = self.bind(&t, None);
        let input = t.constant(
            f_r.data
                .clone()
                .into_shape_with_order(IxDyn(&[1, APPEARANCE_CHANNELS, FEATURE_GRID, FEATURE_GRID]))
                .unwrap(),
        );
        let (offs, _) = predict_offsets_var(&t, self, &vars, arch, input);
        let mut entries = BTreeMap::new();
        for (idx, var) in offs {
            let full = t.value(var).to_owned();
            let s = full.shape().to_vec();
            entries.insert(
                idx,
                full.into_shape_with_order(IxDyn(&[s[1], s[2], s[3], s[4]])).unwrap(),
            );
        }
        Ok(WeightOffsets { entries })
    }
}

/// Breakdown of the analytic parameter count.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamCountBreakdown {
    pub shared_conv_stacks: u64,
    pub shared_block_fcs: u64,
    pub shared_heavy_fcs: u64,
    pub specific_conv_stacks: u64,
    pub specific_heads: u64,
}

impl ParamCountBreakdown {
    pub fn total(&self) -> u64 {
        self.shared_conv_stacks
            + self.shared_block_fcs
            + self.shared_heavy_fcs
            + self.specific_conv_stacks
            + self.specific_heads
    }
}

/// Exact analytic parameter count of the hypernetwork; every tensor counted
/// once, shared tensors once in total when `sharing` is on.
pub fn param_count_breakdown(
    assignment: &BlockAssignment,
    arch: &GeneratorArch,
    config: &HypernetConfig,
    sharing: bool,
) -> ParamCountBreakdown {
    let c = APPEARANCE_CHANNELS as u64;
    let cap = arch.max_channels() as u64;
    let n_shared = assignment.shared_layers().len() as u64;
    let heavy_copies = if sharing { 1 } else { n_shared };
    let specific_heads: u64 = assignment
        .specific_layers()
        .iter()
        .map(|&idx| {
            let l = arch.layer(idx);
            let out_in = (l.out_channels * l.in_channels) as u64;
            c * out_in + out_in
        })
        .sum();
    ParamCountBreakdown {
        shared_conv_stacks: n_shared * RbConvStack::<f32>::param_count(config.shared_mid),
        shared_block_fcs: n_shared * (c * c + c),
        shared_heavy_fcs: heavy_copies * SharedFcs::<f32>::param_count(cap),
        specific_conv_stacks: assignment.specific_layers().len() as u64
            * RbConvStack::<f32>::param_count(config.specific_mid),
        specific_heads,
    }
}

pub fn param_count(assignment: &BlockAssignment, arch: &GeneratorArch, config: &HypernetConfig, sharing: bool) -> u64 {
    param_count_breakdown(assignment, arch, config, sharing).total()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::{canonical_arch, scaled_arch};
    use reenact_tensor::fdcheck;

    fn fused_map<T: Element>(seed: u64) -> FeatureMap<T> {
        let mut rng = init::rng_for(seed, "hyper-test");
        FeatureMap::new(init::normal(&mut rng, &[512, 7, 7], 0.5), FeatureKind::Fused).unwrap()
    }

    #[test]
    fn canonical_assignment_matches_published_split() {
        let arch = canonical_arch();
        let a = BlockAssignment::for_arch(&arch);
        assert_eq!(a.entries.len(), 13);
        assert_eq!(a.shared_layers(), vec![0, 2, 3, 5, 6, 8, 9]);
        assert_eq!(a.specific_layers(), vec![11, 12, 14, 15, 17, 18]);
    }

    #[test]
    fn zero_init_heads_give_zero_offsets() {
        let arch = scaled_arch(16, 16).unwrap();
        let params = HypernetParams::<f32>::init(&arch, HypernetConfig { shared_mid: 8, specific_mid: 8, ..Default::default() });
        let offs = params.predict_offsets(&arch, &fused_map(1)).unwrap();
        assert_eq!(offs.entries.len(), arch.controlled_layers().len());
        for (idx, o) in &offs.entries {
            assert_eq!(o.shape(), arch.layer(*idx).kernel_shape());
            assert!(o.iter().all(|&v| v == 0.0));
        }
        offs.validate(&arch).unwrap();
    }

    #[test]
    fn offsets_are_spatially_repeated() {
        let arch = scaled_arch(16, 16).unwrap();
        let mut params = HypernetParams::<f32>::init(&arch, HypernetConfig { shared_mid: 8, specific_mid: 8, ..Default::default() });
        // Nudge the heads off zero so values are informative.
        let mut rng = init::rng_for(5, "nudge");
        params.shared_fcs[0].fc2_w = init::normal(&mut rng, &[16, 16], 0.1);
        let offs = params.predict_offsets(&arch, &fused_map(2)).unwrap();
        offs.validate(&arch).unwrap();
        let any = offs.entries.values().next().unwrap();
        assert!(any.iter().any(|&v| v != 0.0));
    }

    #[test]
    fn shared_fc_aliasing_propagates_to_all_shared_blocks() {
        let arch = scaled_arch(32, 16).unwrap();
        let mut params = HypernetParams::<f32>::init(&arch, HypernetConfig { shared_mid: 8, specific_mid: 8, ..Default::default() });
        let before = params.predict_offsets(&arch, &fused_map(3)).unwrap();
        params.shared_fcs[0].fc2_w[[0, 0]] = 0.37;
        let after = params.predict_offsets(&arch, &fused_map(3)).unwrap();
        let shared = params.assignment.shared_layers();
        assert!(!shared.is_empty());
        for idx in shared {
            let delta: f32 = (&after.entries[&idx] - &before.entries[&idx]).iter().map(|v| v.abs()).sum();
            assert!(delta > 0.0, "shared layer {idx} did not move");
        }
    }

    #[test]
    fn mixed_assignment_on_reducing_arch() {
        let arch = scaled_arch(256, 128).unwrap();
        let a = BlockAssignment::for_arch(&arch);
        assert!(!a.shared_layers().is_empty());
        assert_eq!(a.specific_layers().len(), 2);
        let p128 = param_count(&a, &arch, &HypernetConfig::default(), true);
        let p128_unshared = param_count(&a, &arch, &HypernetConfig::default(), false);
        assert!(p128_unshared > p128);
    }

    #[test]
    fn canonical_param_count_reproduces_published_reduction() {
        let arch = canonical_arch();
        let a = BlockAssignment::for_arch(&arch);
        let cfg = HypernetConfig::default();
        let shared = param_count(&a, &arch, &cfg, true);
        let unshared = param_count(&a, &arch, &cfg, false);
        assert_eq!(shared, 300_529_280);
        assert_eq!(unshared, 1_108_984_448);
        assert!((2.55e8..=3.45e8).contains(&(shared as f64)));
        assert!((0.95e9..=1.40e9).contains(&(unshared as f64)));
        assert!(unshared as f64 / shared as f64 >= 3.5);
    }

    #[test]
    fn block_gradients_match_finite_differences() {
        let arch = scaled_arch(8, 8).unwrap();
        let cfg = HypernetConfig { shared_mid: 4, specific_mid: 4, seed: 11, share_fcs: true };
        let mut params = HypernetParams::<f64>::init(&arch, cfg);
        let mut rng = init::rng_for(12, "heads");
        params.shared_fcs[0].fc2_w = init::normal(&mut rng, &[8, 8], 0.05);
        let f_r = fused_map::<f64>(4);

        let loss_given = |p: &HypernetParams<f64>| -> f64 {
            let t: Tape<f64> = Tape::inference();
            let vars = p.bind(&t, None);
            let input = t.constant(
                f_r.data
                    .clone()
                    .into_shape_with_order(IxDyn(&[1, 512, 7, 7]))
                    .unwrap(),
            );
            let (offs, _) = predict_offsets_var(&t, p, &vars, &arch, input);
            let parts: Vec<Var> = offs.values().map(|&v| t.sum_all(t.square(v))).collect();
            let mut total = parts[0];
            for p in &parts[1..] {
                total = t.add(total, *p);
            }
            t.scalar_value(total)
        };

        // Analytic gradients.
        let t: Tape<f64> = Tape::new();
        let mut reg = ParamReg::new();
        let vars = params.bind(&t, Some(&mut reg));
        let input = t.constant(f_r.data.clone().into_shape_with_order(IxDyn(&[1, 512, 7, 7])).unwrap());
        let (offs, _) = predict_offsets_var(&t, &params, &vars, &arch, input);
        let parts: Vec<Var> = offs.values().map(|&v| t.sum_all(t.square(v))).collect();
        let mut total = parts[0];
        for p in &parts[1..] {
            total = t.add(total, *p);
        }
        let grads = t.backward(total);

        for (name, var) in reg.entries() {
            if !name.contains("fc") {
                continue; // FD over every conv coord would be slow; heads and fcs cover the chain.
            }
            let named = params.named_tensors();
            let (_, tensor) = named.iter().find(|(n, _)| n == name).unwrap();
            let analytic = grads.get_or_zeros(*var, tensor.shape());
            let ga = analytic.as_slice().unwrap();
            let len = tensor.len();
            for idx in [0, len / 3, len - 1] {
                let mut f = |x: &ArrayD<f64>| {
                    let mut probe = params.clone();
                    for (n2, t2) in probe.named_tensors_mut() {
                        if n2 == *name {
                            *t2 = x.clone();
                        }
                    }
                    loss_given(&probe)
                };
                let fd = fdcheck::central_diff(&mut f, tensor, idx, 1e-5);
                let err = fdcheck::rel_err(ga[idx], fd);
                assert!(err < 1e-3, "{name}[{idx}]: rel err {err} (analytic {} fd {fd})", ga[idx]);
            }
        }
    }
}
