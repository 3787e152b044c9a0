//! Model assembly: encoders -> fusion -> hypernetwork -> generator, with a
//! one-shot reenactment entry point and the batched tape forward used by
//! training.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use reenact_tensor::element::Element;
use reenact_tensor::{Tape, Var};
use serde::{Deserialize, Serialize};

use crate::arch::{scaled_arch, GeneratorArch};
use crate::checkpoint;
use crate::encoders::{validate_image_shape, EncoderConfig, EncoderSet};
use crate::error::{Error, Result};
use crate::fusion::{fuse_var, project_pose_var, FusionParams};
use crate::generator::{synthesize_var, GeneratorConfig, GeneratorWeights, WeightOffsets};
use crate::hypernet::{predict_offsets_var, BlockTrace, HypernetConfig, HypernetParams};
use crate::nn::ParamReg;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub output_resolution: usize,
    pub channel_cap: usize,
    pub generator: GeneratorConfig,
    pub fusion_seed: u64,
    pub hypernet: HypernetConfig,
    pub encoders: EncoderConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            output_resolution: 32,
            channel_cap: 64,
            generator: GeneratorConfig::default(),
            fusion_seed: 5,
            hypernet: HypernetConfig::default(),
            encoders: EncoderConfig::default(),
        }
    }
}

impl ModelConfig {
    /// The canonical 256x512 configuration.
    pub fn canonical() -> Self {
        ModelConfig { output_resolution: 256, channel_cap: 512, ..Default::default() }
    }
}

/// The frozen generator/encoders plus the two trainable modules.
pub struct Reenactor<T: Element> {
    pub config: ModelConfig,
    pub arch: GeneratorArch,
    pub generator: GeneratorWeights<T>,
    pub fusion: FusionParams<T>,
    pub hypernet: HypernetParams<T>,
    pub encoders: EncoderSet<T>,
}

/// Everything the batched training forward produces.
pub struct ForwardVars {
    pub f_app: Var,
    pub f_p: Var,
    pub f_p_proj: Var,
    pub f_r: Var,
    pub offsets: BTreeMap<usize, Var>,
    pub block_traces: Vec<BlockTrace>,
    pub w_codes: Var,
    pub image: Var,
    pub conv_trace: Vec<(usize, Var)>,
}

impl<T: Element> Reenactor<T> {
    pub fn init(config: ModelConfig) -> Result<Self> {
        let arch = scaled_arch(config.output_resolution, config.channel_cap)?;
        let encoders = EncoderSet::from_config(&config.encoders, arch.style_rows())?;
        Ok(Reenactor {
            generator: GeneratorWeights::init(&arch, config.generator),
            fusion: FusionParams::init(config.fusion_seed),
            hypernet: HypernetParams::init(&arch, config.hypernet),
            encoders,
            arch,
            config,
        })
    }

    /// Trainable tensors: the reenactment module and the hypernetwork only.
    pub fn trainable_named(&self) -> Vec<(String, &ArrayD<T>)> {
        let mut out = self.fusion.named_tensors();
        out.extend(self.hypernet.named_tensors());
        out
    }

    pub fn trainable_named_mut(&mut self) -> Vec<(String, &mut ArrayD<T>)> {
        let mut out = self.fusion.named_tensors_mut();
        out.extend(self.hypernet.named_tensors_mut());
        out
    }

    /// Frozen tensors: generator (the encoders are seed-derived and carry no
    /// stored tensors of their own).
    pub fn frozen_named(&self) -> Vec<(String, &ArrayD<T>)> {
        self.generator.named_tensors()
    }

    /// Batched training forward. `reg`, when given, captures the trainable
    /// leaves (fusion + hypernet); everything else binds as constants.
    pub fn forward_batch(
        &self,
        t: &Tape<T>,
        mut reg: Option<&mut ParamReg>,
        sources: &[&ArrayD<T>],
        targets: &[&ArrayD<T>],
    ) -> Result<ForwardVars> {
        if sources.len() != targets.len() || sources.is_empty() {
            return Err(Error::InvalidConfig("source/target batch mismatch".into()));
        }
        for img in sources.iter().chain(targets) {
            let r = validate_image_shape(img)?;
            if r != self.arch.output_resolution {
                return Err(Error::shape(
                    "pipeline image",
                    &[3, self.arch.output_resolution, self.arch.output_resolution],
                    img.shape(),
                ));
            }
        }
        let src_stack = stack(t, sources);
        let tgt_stack = stack(t, targets);

        let f_app = self.encoders.appearance.forward(t, src_stack).out;
        let f_p = self.encoders.pose.forward(t, tgt_stack).out;

        let fusion_vars = self.fusion.bind(t, reg.as_deref_mut());
        let f_p_proj = project_pose_var(t, &fusion_vars, f_p);
        let f_r = fuse_var(t, &fusion_vars, f_app, f_p_proj);

        let hyper_vars = self.hypernet.bind(t, reg.as_deref_mut());
        let (offsets, block_traces) = predict_offsets_var(t, &self.hypernet, &hyper_vars, &self.arch, f_r);

        let w_codes = self.encoders.inverter.forward(t, src_stack);

        let gen_vars = self.generator.bind(t, None);
        let (image, conv_trace) = synthesize_var(t, &self.arch, &gen_vars, &self.generator, w_codes, &offsets);

        Ok(ForwardVars {
            f_app,
            f_p,
            f_p_proj,
            f_r,
            offsets,
            block_traces,
            w_codes,
            image,
            conv_trace,
        })
    }

    /// One-shot reenactment: one source frame, one target frame, no
    /// fine-tuning. Pure function of (weights, images).
    pub fn reenact(&self, source: &ArrayD<T>, target: &ArrayD<T>) -> Result<ArrayD<T>> {
        let t: Tape<T> = Tape::inference();
        let fwd = self.forward_batch(&t, None, &[source], &[target])?;
        let r = self.arch.output_resolution;
        Ok(t.value(fwd.image).to_owned().into_shape_with_order(IxDyn(&[3, r, r])).unwrap())
    }

    /// Plain inversion synthesis: G(theta, invert(image)), no offsets.
    pub fn invert_synthesize(&self, image: &ArrayD<T>) -> Result<ArrayD<T>> {
        let code = self.encoders.invert(image)?;
        crate::generator::synthesize(&self.arch, &self.generator, &code, None)
    }

    /// Offsets the hypernetwork predicts for one (source, target) pair.
    pub fn predict_offsets(&self, source: &ArrayD<T>, target: &ArrayD<T>) -> Result<WeightOffsets<T>> {
        let t: Tape<T> = Tape::inference();
        let fwd = self.forward_batch(&t, None, &[source], &[target])?;
        let mut entries = BTreeMap::new();
        for (idx, var) in fwd.offsets {
            let full = t.value(var).to_owned();
            let s = full.shape().to_vec();
            entries.insert(idx, full.into_shape_with_order(IxDyn(&[s[1], s[2], s[3], s[4]])).unwrap());
        }
        Ok(WeightOffsets { entries })
    }
}

fn stack<T: Element>(t: &Tape<T>, images: &[&ArrayD<T>]) -> Var {
    let r = images[0].shape()[1];
    let mut data = Vec::with_capacity(images.len() * 3 * r * r);
    for img in images {
        data.extend(img.as_slice().expect("standard layout").iter().copied());
    }
    t.constant(ArrayD::from_shape_vec(IxDyn(&[images.len(), 3, r, r]), data).unwrap())
}

impl Reenactor<f32> {
    /// Saves generator + trainable tensors and the model config.
    pub fn save(&self, dir: &Path, extra_meta: serde_json::Value) -> Result<()> {
        let mut tensors = self.frozen_named();
        tensors.extend(self.trainable_named());
        let meta = serde_json::json!({
            "model_config": self.config,
            "extra": extra_meta,
        });
        checkpoint::write_tensors(dir, &tensors, meta)
    }

    pub fn load(dir: &Path) -> Result<(Self, serde_json::Value)> {
        let (tensors, meta) = checkpoint::read_tensors(dir)?;
        let config: ModelConfig = serde_json::from_value(
            meta.get("model_config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("manifest lacks model_config".into()))?,
        )?;
        let mut model = Reenactor::init(config)?;
        {
            let mut gen = model.generator.named_tensors_mut();
            checkpoint::restore_into(&mut gen, &tensors)?;
        }
        {
            let mut trainable = model.trainable_named_mut();
            checkpoint::restore_into(&mut trainable, &tensors)?;
        }
        let extra = meta.get("extra").cloned().unwrap_or(serde_json::Value::Null);
        Ok((model, extra))
    }
}
