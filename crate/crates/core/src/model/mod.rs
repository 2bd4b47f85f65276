//! The GRL restoration network: configuration, parameter registry,
//! initialization, and checkpoint I/O. The forward pass lives in
//! [`forward`]; it composes window attention, anchored stripe attention and
//! channel-attention-enhanced convolution in parallel inside each
//! transformer layer.

pub mod checkpoint;
mod forward;

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AnchorSpec, SimilarityMeasure, StripeSpec, WindowSpec};
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Scalar, Tensor};

pub use forward::{
    channel_attention_conv, forward, stage, transformer_layer, LayerNodes, ModelNodes,
};

/// Restoration task: the reconstruction head differs, everything else is
/// shared.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Denoise,
    SrX2,
    SrX4,
}

impl Task {
    pub fn scale(&self) -> usize {
        match self {
            Task::Denoise => 1,
            Task::SrX2 => 2,
            Task::SrX4 => 4,
        }
    }
}

/// Full network hyperparameters. The defaults are the GRL-micro
/// configuration used throughout the desk-scale tests.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GRLConfig {
    /// Embedding width C; must be even (the attention halves split it) and
    /// at least 4 (the channel-attention squeeze is C/4).
    pub embed_dim: usize,
    pub stages: usize,
    pub layers_per_stage: usize,
    pub window: WindowSpec,
    pub stripe: StripeSpec,
    pub anchor: AnchorSpec,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub measure: SimilarityMeasure,
    pub task: Task,
    pub channels_in: usize,
}

impl Default for GRLConfig {
    fn default() -> Self {
        GRLConfig {
            embed_dim: 16,
            stages: 2,
            layers_per_stage: 2,
            window: WindowSpec::default(),
            stripe: StripeSpec::default(),
            anchor: AnchorSpec::default(),
            heads: 2,
            mlp_ratio: 2.0,
            measure: SimilarityMeasure::Dot,
            task: Task::Denoise,
            channels_in: 1,
        }
    }
}

impl GRLConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim < 4 || self.embed_dim % 2 != 0 {
            return Err(Error::Config(format!(
                "embed_dim must be even and >= 4, got {}",
                self.embed_dim
            )));
        }
        let half = self.embed_dim / 2;
        if self.heads == 0 || half % self.heads != 0 {
            return Err(Error::Config(format!(
                "heads ({}) must divide the attention half-width ({half})",
                self.heads
            )));
        }
        if self.stages == 0 || self.layers_per_stage == 0 {
            return Err(Error::Config("stages and layers_per_stage must be >= 1".into()));
        }
        if self.mlp_ratio <= 0.0 {
            return Err(Error::Config("mlp_ratio must be positive".into()));
        }
        if self.channels_in != 1 && self.channels_in != 3 {
            return Err(Error::Config(format!(
                "channels_in must be 1 or 3, got {}",
                self.channels_in
            )));
        }
        self.window.validate()?;
        self.stripe.validate()?;
        self.anchor.validate()?;
        // within a stripe the short side is exactly `width`; pooling must
        // divide it
        let s = self.anchor.down_factor;
        if s < self.stripe.width && self.stripe.width % s != 0 {
            return Err(Error::Config(format!(
                "anchor down factor {s} does not divide stripe width {}",
                self.stripe.width
            )));
        }
        Ok(())
    }

    pub fn mlp_hidden(&self) -> usize {
        ((self.embed_dim as f64) * self.mlp_ratio).round() as usize
    }

    pub fn squeeze_dim(&self) -> usize {
        (self.embed_dim / 4).max(1)
    }

    pub fn total_layers(&self) -> usize {
        self.stages * self.layers_per_stage
    }
}

/// Ordered, name-indexed parameter registry. Iteration order is creation
/// order, which checkpoints and the optimizer rely on for determinism.
pub struct ParamSet<T> {
    entries: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamSet<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet {
            entries: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<usize> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Internal(format!("duplicate parameter name {name}")));
        }
        let idx = self.entries.len();
        self.by_name.insert(name.clone(), idx);
        self.entries.push(Parameter::new(name, value));
        Ok(idx)
    }

    pub fn idx(&self, name: &str) -> Result<usize> {
        self.by_name
            .get(name)
            .copied()
            .ok_or_else(|| Error::Internal(format!("unknown parameter {name}")))
    }

    pub fn get(&self, idx: usize) -> &Parameter<T> {
        &self.entries[idx]
    }

    pub fn entries(&self) -> &[Parameter<T>] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [Parameter<T>] {
        &mut self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.entries {
            p.zero_grad();
        }
    }

    /// Total scalar parameter count.
    pub fn count_values(&self) -> usize {
        self.entries.iter().map(|p| p.value.numel()).sum()
    }
}

/// A GRL network: configuration plus parameters.
pub struct Model<T: Scalar> {
    pub config: GRLConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Model<T> {
    /// Initialize parameters deterministically from `seed`.
    ///
    /// Linear/attention weights and bias tables: truncated normal (std
    /// 0.02). Convolutions: Kaiming-uniform over fan-in. Biases and the
    /// final head convolution: zero, so the initial denoise network is the
    /// identity map.
    pub fn init(config: GRLConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let std = T::from_f64c(0.02);
        let c = config.embed_dim;
        let half = c / 2;
        let cin = config.channels_in;

        let lin = |params: &mut ParamSet<T>,
                       rng: &mut ChaCha8Rng,
                       name: &str,
                       d_in: usize,
                       d_out: usize|
         -> Result<()> {
            params.add(format!("{name}.w"), Tensor::trunc_normal(&[d_in, d_out], std, rng))?;
            params.add(format!("{name}.b"), Tensor::zeros(&[d_out]))?;
            Ok(())
        };
        let conv = |params: &mut ParamSet<T>,
                    rng: &mut ChaCha8Rng,
                    name: &str,
                    c_out: usize,
                    c_in: usize|
         -> Result<()> {
            let fan_in = c_in * 9;
            let bound = T::from_f64c((6.0 / fan_in as f64).sqrt());
            params.add(
                format!("{name}.w"),
                Tensor::rand_uniform(&[c_out, c_in, 3, 3], -bound, bound, rng),
            )?;
            params.add(format!("{name}.b"), Tensor::zeros(&[c_out]))?;
            Ok(())
        };

        conv(&mut params, &mut rng, "feat.conv", c, cin)?;

        let span = 2 * config.window.size - 1;
        for si in 0..config.stages {
            for li in 0..config.layers_per_stage {
                let p = format!("stage{si}.layer{li}");
                params.add(format!("{p}.ln1.gamma"), Tensor::full(&[c], T::one()))?;
                params.add(format!("{p}.ln1.beta"), Tensor::zeros(&[c]))?;
                for side in ["win", "stripe"] {
                    lin(&mut params, &mut rng, &format!("{p}.{side}.q"), half, half)?;
                    lin(&mut params, &mut rng, &format!("{p}.{side}.k"), half, half)?;
                    lin(&mut params, &mut rng, &format!("{p}.{side}.v"), half, half)?;
                }
                for h in 0..config.heads {
                    params.add(
                        format!("{p}.win.bias.h{h}"),
                        Tensor::trunc_normal(&[span * span], std, &mut rng),
                    )?;
                }
                lin(&mut params, &mut rng, &format!("{p}.stripe.anchor"), half, half)?;
                lin(&mut params, &mut rng, &format!("{p}.stripe.out"), half, half)?;
                lin(&mut params, &mut rng, &format!("{p}.proj"), c, c)?;
                conv(&mut params, &mut rng, &format!("{p}.conv1"), c, c)?;
                conv(&mut params, &mut rng, &format!("{p}.conv2"), c, c)?;
                lin(&mut params, &mut rng, &format!("{p}.ca1"), c, config.squeeze_dim())?;
                lin(&mut params, &mut rng, &format!("{p}.ca2"), config.squeeze_dim(), c)?;
                params.add(format!("{p}.ln2.gamma"), Tensor::full(&[c], T::one()))?;
                params.add(format!("{p}.ln2.beta"), Tensor::zeros(&[c]))?;
                lin(&mut params, &mut rng, &format!("{p}.mlp1"), c, config.mlp_hidden())?;
                lin(&mut params, &mut rng, &format!("{p}.mlp2"), config.mlp_hidden(), c)?;
            }
            conv(&mut params, &mut rng, &format!("stage{si}.conv"), c, c)?;
        }

        match config.task {
            Task::Denoise => {}
            Task::SrX2 => {
                conv(&mut params, &mut rng, "up0.conv", 4 * c, c)?;
            }
            Task::SrX4 => {
                conv(&mut params, &mut rng, "up0.conv", 4 * c, c)?;
                conv(&mut params, &mut rng, "up1.conv", 4 * c, c)?;
            }
        }
        // final head conv zero-initialized: initial output ~= input
        params.add("head.conv.w", Tensor::zeros(&[cin, c, 3, 3]))?;
        params.add("head.conv.b", Tensor::zeros(&[cin]))?;

        Ok(Model { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.count_values()
    }
}
