//! Tiny U-Net noise predictor.
//!
//! Layout for `levels = L` (channel width `c_l = base * 2^l`):
//!
//! ```text
//! t -> sinusoidal -> linear -> silu -> linear -> silu        (time MLP, module 0)
//! x -> conv_in                                               (module 0)
//!   -> down.l.0, down.l.1 for l in 0..L   [skip + avgpool between levels]
//!   -> up.l.0, up.l.1 for l in (0..L-1).rev() [upsample + concat skip first]
//!   -> conv_out                                              (module 4L-1)
//! ```
//!
//! Every 3x3 convolution is one pruning module, numbered in forward order.
//! Each `down.*`/`up.*` block adds a linear projection of the time
//! features to its conv output before the SiLU; that projection belongs to
//! the same module as the conv.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops;
use crate::params::{Param, ParameterSet, Role};
use crate::pruning::MaskSet;
use crate::rng::{self, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub image_channels: usize,
    pub image_size: usize,
    pub base_channels: usize,
    pub levels: usize,
    pub time_embed_dim: usize,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            image_channels: 1,
            image_size: 16,
            base_channels: 16,
            levels: 2,
            time_embed_dim: 32,
        }
    }
}

impl UNetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.image_channels == 0 || self.image_size == 0 || self.base_channels == 0 || self.levels == 0 {
            return bad(format!("all model sizes must be positive: {self:?}"));
        }
        if self.time_embed_dim < 2 || !self.time_embed_dim.is_multiple_of(2) {
            return bad(format!("time_embed_dim {} must be even and >= 2", self.time_embed_dim));
        }
        if self.levels > 8 {
            return bad(format!("{} resolution levels is unreasonable", self.levels));
        }
        let div = 1usize << (self.levels - 1);
        if !self.image_size.is_multiple_of(div) {
            return bad(format!(
                "image_size {} not divisible by 2^(levels-1) = {div}",
                self.image_size
            ));
        }
        Ok(())
    }
}

/// One 3x3 convolution of the network.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub module: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    /// Spatial side length at which this conv runs.
    pub size: usize,
    pub time_projection: bool,
    pub activation: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Step {
    Conv(usize),
    PushSkip,
    Downsample,
    Upsample,
    ConcatSkip,
}

#[derive(Debug, Clone)]
pub struct UNet {
    config: UNetConfig,
    convs: Vec<ConvSpec>,
    program: Vec<Step>,
}

pub const TIME_MLP: [&str; 2] = ["time_mlp.0", "time_mlp.1"];

impl UNet {
    pub fn new(config: UNetConfig) -> Result<Self> {
        config.validate()?;
        let width = |l: usize| config.base_channels << l;
        let mut convs = Vec::new();
        let mut program = Vec::new();
        let mut size = config.image_size;
        let add = |convs: &mut Vec<ConvSpec>,
                       program: &mut Vec<Step>,
                       name: String,
                       cin: usize,
                       cout: usize,
                       size: usize,
                       inner: bool| {
            let module = convs.len();
            convs.push(ConvSpec {
                name,
                module,
                in_channels: cin,
                out_channels: cout,
                size,
                time_projection: inner,
                activation: inner,
            });
            program.push(Step::Conv(module));
        };

        add(&mut convs, &mut program, "conv_in".into(), config.image_channels, width(0), size, false);
        let mut cur = width(0);
        for l in 0..config.levels {
            add(&mut convs, &mut program, format!("down.{l}.0"), cur, width(l), size, true);
            add(&mut convs, &mut program, format!("down.{l}.1"), width(l), width(l), size, true);
            cur = width(l);
            if l + 1 < config.levels {
                program.push(Step::PushSkip);
                program.push(Step::Downsample);
                size /= 2;
            }
        }
        for l in (0..config.levels - 1).rev() {
            program.push(Step::Upsample);
            program.push(Step::ConcatSkip);
            size *= 2;
            add(&mut convs, &mut program, format!("up.{l}.0"), cur + width(l), width(l), size, true);
            add(&mut convs, &mut program, format!("up.{l}.1"), width(l), width(l), size, true);
            cur = width(l);
        }
        add(&mut convs, &mut program, "conv_out".into(), cur, config.image_channels, size, false);
        Ok(Self { config, convs, program })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn convs(&self) -> &[ConvSpec] {
        &self.convs
    }

    pub fn program(&self) -> &[Step] {
        &self.program
    }

    /// Number of pruning modules `J`.
    pub fn module_count(&self) -> usize {
        self.convs.len()
    }

    fn shapes(&self) -> Vec<(usize, String, Role, Vec<usize>, usize)> {
        // (module, name, role, shape, fan_in)
        let d = self.config.time_embed_dim;
        let mut out = Vec::new();
        for name in TIME_MLP {
            out.push((0, format!("{name}.weight"), Role::PrunableWeight, vec![d, d], d));
            out.push((0, format!("{name}.bias"), Role::Bias, vec![d], d));
        }
        for c in &self.convs {
            let fan = c.in_channels * 9;
            out.push((
                c.module,
                format!("{}.weight", c.name),
                Role::PrunableWeight,
                vec![c.out_channels, c.in_channels, 3, 3],
                fan,
            ));
            out.push((c.module, format!("{}.bias", c.name), Role::Bias, vec![c.out_channels], fan));
            if c.time_projection {
                out.push((
                    c.module,
                    format!("{}.temb.weight", c.name),
                    Role::PrunableWeight,
                    vec![c.out_channels, d],
                    d,
                ));
                out.push((c.module, format!("{}.temb.bias", c.name), Role::Bias, vec![c.out_channels], d));
            }
        }
        out
    }

    /// Fan-in scaled uniform initialization `U(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    /// for every array, drawn in parameter order from the init stream.
    pub fn init(&self, seed: u64) -> ParameterSet {
        let mut rng = rng::stream(seed, Stream::Init);
        let params = self
            .shapes()
            .into_iter()
            .map(|(module, name, role, shape, fan_in)| {
                let bound = 1.0 / (fan_in as f32).sqrt();
                let tensor = Tensor::from_fn(shape, |_| rng.random_range(-bound..bound));
                Param {
                    module,
                    name,
                    role,
                    tensor,
                }
            })
            .collect();
        ParameterSet::new(params).expect("generated names are unique")
    }

    pub fn check_params(&self, params: &ParameterSet) -> Result<()> {
        let expected = self.shapes();
        let ok = expected.len() == params.len()
            && expected.iter().zip(params.iter()).all(|((module, name, role, shape, _), p)| {
                *module == p.module && *name == p.name && *role == p.role && shape.as_slice() == p.tensor.shape()
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Misaligned(format!(
                "parameter set does not match the architecture of {:?}",
                self.config
            )))
        }
    }

    /// Records the masked forward pass on a fresh tape.
    ///
    /// Parameter leaves hold `θ ⊙ m`, so the gradient reaching a masked
    /// position is discarded by [`ForwardPass::param_grads`].
    pub fn forward(
        &self,
        params: &ParameterSet,
        mask: &MaskSet,
        x_t: &Tensor<f32>,
        timesteps: &[usize],
        num_timesteps: usize,
    ) -> Result<ForwardPass> {
        self.check_params(params)?;
        let c = &self.config;
        let expect = [x_t.shape()[0], c.image_channels, c.image_size, c.image_size];
        if x_t.shape() != expect {
            return Err(Error::shape(
                "predict_noise",
                format!("input {:?} does not match model input {:?}", x_t.shape(), expect),
            ));
        }
        if timesteps.len() != expect[0] {
            return Err(Error::shape(
                "predict_noise",
                format!("{} timesteps for batch of {}", timesteps.len(), expect[0]),
            ));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t == 0 || t > num_timesteps) {
            return Err(Error::TimestepOutOfRange { t, max: num_timesteps });
        }

        let mut tape = Tape::new();
        let pairs = mask.pair(params)?;
        let mut param_vars = Vec::with_capacity(pairs.len());
        let mut masks = Vec::with_capacity(pairs.len());
        for (p, m) in pairs {
            let value = match m {
                Some(m) => m.apply(&p.tensor),
                None => p.tensor.clone(),
            };
            param_vars.push(tape.leaf(value));
            masks.push(m.map(|m| m.bits().to_vec()));
        }
        let var = |name: &str| -> Var {
            let idx = params.iter().position(|p| p.name == name).expect("known parameter");
            param_vars[idx]
        };

        let emb = tape.leaf(ops::sinusoidal_embedding(timesteps, c.time_embed_dim)?);
        let mut temb = emb;
        for name in TIME_MLP {
            temb = tape.linear(temb, var(&format!("{name}.weight")), var(&format!("{name}.bias")))?;
            temb = tape.silu(temb);
        }

        let mut h = tape.leaf(x_t.clone());
        let mut skips = Vec::new();
        for step in &self.program {
            match *step {
                Step::Conv(i) => {
                    let spec = &self.convs[i];
                    h = tape.conv2d(h, var(&format!("{}.weight", spec.name)), var(&format!("{}.bias", spec.name)))?;
                    if spec.time_projection {
                        let proj = tape.linear(
                            temb,
                            var(&format!("{}.temb.weight", spec.name)),
                            var(&format!("{}.temb.bias", spec.name)),
                        )?;
                        h = tape.add_channel_bias(h, proj)?;
                    }
                    if spec.activation {
                        h = tape.silu(h);
                    }
                }
                Step::PushSkip => skips.push(h),
                Step::Downsample => h = tape.downsample2(h)?,
                Step::Upsample => h = tape.upsample2(h)?,
                Step::ConcatSkip => {
                    let skip = skips.pop().expect("balanced skips");
                    h = tape.concat_channels(h, skip)?;
                }
            }
        }
        Ok(ForwardPass {
            tape,
            output: h,
            param_vars,
            masks,
        })
    }

    /// ε-prediction `ε_θ(x_t, t)` under `mask`.
    pub fn predict_noise(
        &self,
        params: &ParameterSet,
        mask: &MaskSet,
        x_t: &Tensor<f32>,
        timesteps: &[usize],
        num_timesteps: usize,
    ) -> Result<Tensor<f32>> {
        let pass = self.forward(params, mask, x_t, timesteps, num_timesteps)?;
        Ok(pass.tape.value(pass.output).clone())
    }

    /// Name of the conv weight array of module `j`.
    pub fn module_conv_weight(&self, j: usize) -> Result<String> {
        self.convs
            .get(j)
            .map(|c| format!("{}.weight", c.name))
            .ok_or(Error::ModuleOutOfRange {
                index: j,
                count: self.convs.len(),
            })
    }

    /// Conv weight of module `j` under `mask`, reshaped to
    /// `out_channels x (in_channels * 9)` in `f64`.
    pub fn module_weight_matrix(&self, params: &ParameterSet, mask: &MaskSet, j: usize) -> Result<Tensor<f64>> {
        let name = self.module_conv_weight(j)?;
        mask.check_aligned(params)?;
        let p = params
            .get(&name)
            .ok_or_else(|| Error::Misaligned(format!("missing `{name}`")))?;
        let m = mask
            .get(&name)
            .ok_or_else(|| Error::Misaligned(format!("no mask for `{name}`")))?;
        let masked = m.apply(&p.tensor);
        let s = p.tensor.shape();
        masked.cast::<f64>().reshape([s[0], s[1] * s[2] * s[3]])
    }
}

pub struct ForwardPass {
    pub tape: Tape<f32>,
    pub output: Var,
    pub param_vars: Vec<Var>,
    masks: Vec<Option<Vec<bool>>>,
}

impl ForwardPass {
    /// Backpropagates `loss` and returns one gradient per parameter, with
    /// masked positions forced to exactly zero.
    pub fn param_grads(&self, loss: Var) -> Result<Vec<Tensor<f32>>> {
        let mut grads = self.tape.backward(loss)?;
        Ok(self
            .param_vars
            .iter()
            .zip(&self.masks)
            .map(|(&v, m)| {
                let mut g = grads.take(v);
                if let Some(bits) = m {
                    for (gi, &keep) in g.data_mut().iter_mut().zip(bits) {
                        if !keep {
                            *gi = 0.0;
                        }
                    }
                }
                g
            })
            .collect())
    }
}
