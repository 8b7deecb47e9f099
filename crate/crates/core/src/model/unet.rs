//! The split U-Net: layer layout, initialization and the three stage forwards.
//!
//! Stage boundaries:
//! - front-end: the first conv + batch-norm + ReLU unit
//! - server: everything from the second conv of the first down block to the
//!   last up block, skip connections included
//! - back-end: the output conv; softmax and argmax are applied on its logits

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Mode, RunningStats, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::params::{ParamSet, SplitModelWeights};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    pub input_size: usize,
    pub in_channels: usize,
    pub num_classes: usize,
    pub down_filters: Vec<usize>,
    pub bottleneck_filters: usize,
    pub up_filters: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            input_size: 32,
            in_channels: 1,
            num_classes: 5,
            down_filters: vec![8, 16],
            bottleneck_filters: 32,
            up_filters: vec![16, 8],
            kernel_size: 3,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArchitecture(msg));
        if self.down_filters.is_empty() {
            return bad("down_filters must not be empty".into());
        }
        if self.down_filters.len() != self.up_filters.len() {
            return bad(format!(
                "down_filters has {} entries but up_filters has {}",
                self.down_filters.len(),
                self.up_filters.len()
            ));
        }
        if self.down_filters.iter().chain(&self.up_filters).any(|&f| f == 0) || self.bottleneck_filters == 0 {
            return bad("filter counts must be positive".into());
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return bad("in_channels and num_classes must be positive".into());
        }
        if self.num_classes > u8::MAX as usize + 1 {
            return bad("num_classes must fit a byte label".into());
        }
        if self.kernel_size.is_multiple_of(2) {
            return bad(format!("kernel_size must be odd, got {}", self.kernel_size));
        }
        let factor = 1usize << self.down_filters.len();
        if self.input_size == 0 || !self.input_size.is_multiple_of(factor) {
            return bad(format!(
                "input_size {} is not divisible by 2^{} = {factor}",
                self.input_size,
                self.down_filters.len()
            ));
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.down_filters.len()
    }

    /// Every conv layer as (stage, prefix, in channels, out channels, followed by batch norm).
    pub fn conv_layers(&self) -> Vec<ConvLayer> {
        let d = &self.down_filters;
        let u = &self.up_filters;
        let depth = d.len();
        let mut layers = vec![ConvLayer::new(Stage::FrontEnd, "fe", self.in_channels, d[0], true)];
        layers.push(ConvLayer::new(Stage::Server, "down0.conv2", d[0], d[0], true));
        for i in 1..depth {
            layers.push(ConvLayer::new(Stage::Server, &format!("down{i}.conv1"), d[i - 1], d[i], true));
            layers.push(ConvLayer::new(Stage::Server, &format!("down{i}.conv2"), d[i], d[i], true));
        }
        let b = self.bottleneck_filters;
        layers.push(ConvLayer::new(Stage::Server, "bottleneck.conv1", d[depth - 1], b, true));
        layers.push(ConvLayer::new(Stage::Server, "bottleneck.conv2", b, b, true));
        let mut prev = b;
        for j in 0..depth {
            let skip = d[depth - 1 - j];
            layers.push(ConvLayer::new(Stage::Server, &format!("up{j}.conv1"), skip + prev, u[j], true));
            layers.push(ConvLayer::new(Stage::Server, &format!("up{j}.conv2"), u[j], u[j], true));
            prev = u[j];
        }
        layers.push(ConvLayer::new(Stage::BackEnd, "be", prev, self.num_classes, false));
        layers
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    FrontEnd,
    Server,
    BackEnd,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub stage: Stage,
    pub prefix: String,
    pub in_channels: usize,
    pub out_channels: usize,
    pub batch_norm: bool,
}

impl ConvLayer {
    fn new(stage: Stage, prefix: &str, in_channels: usize, out_channels: usize, batch_norm: bool) -> Self {
        ConvLayer { stage, prefix: prefix.to_string(), in_channels, out_channels, batch_norm }
    }
}

/// Deterministic He-uniform initialization; batch norm starts at identity.
pub fn build_split_unet<T: Scalar>(cfg: &ArchConfig, seed: u64) -> Result<SplitModelWeights<T>> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = cfg.kernel_size;
    let mut stages = [ParamSet::new(), ParamSet::new(), ParamSet::new()];
    for layer in cfg.conv_layers() {
        let set = &mut stages[layer.stage as usize];
        let fan_in = (layer.in_channels * k * k) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let shape = [layer.out_channels, layer.in_channels, k, k];
        let weight = Tensor::from_fn(&shape, |_| T::lit(bound * (2.0 * rng.gen::<f64>() - 1.0)));
        let p = &layer.prefix;
        set.push(format!("{p}.conv.weight"), weight, true);
        set.push(format!("{p}.conv.bias"), Tensor::zeros(&[layer.out_channels]), true);
        if layer.batch_norm {
            let c = layer.out_channels;
            set.push(format!("{p}.bn.gamma"), Tensor::full(&[c], T::one()), true);
            set.push(format!("{p}.bn.beta"), Tensor::zeros(&[c]), true);
            set.push(format!("{p}.bn.running_mean"), Tensor::zeros(&[c]), false);
            set.push(format!("{p}.bn.running_var"), Tensor::full(&[c], T::one()), false);
        }
    }
    let [front_end, server, back_end] = stages;
    Ok(SplitModelWeights { front_end, server, back_end })
}

/// Graph leaves created for the trainable parameters of one stage.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: Vec<Option<Var>>,
}

impl BoundParams {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, set: &ParamSet<T>, requires_grad: bool) -> Self {
        let vars = set.iter().map(|p| p.trainable.then(|| g.leaf(p.tensor.clone(), requires_grad))).collect();
        BoundParams { vars }
    }

    fn var<T: Scalar>(&self, set: &ParamSet<T>, name: &str) -> Result<Var> {
        let i = set.index_of(name)?;
        self.vars[i].ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    /// Gradients aligned with the stage's parameter order; `None` for non-trainable entries.
    pub fn grads<T: Scalar>(&self, g: &Graph<T>) -> Vec<Option<Vec<T>>> {
        self.vars.iter().map(|v| v.and_then(|v| g.grad(v).map(<[T]>::to_vec))).collect()
    }
}

/// Output of one stage forward pass.
#[derive(Clone, Debug)]
pub struct StageRun {
    pub output: Var,
    pub params: BoundParams,
}

fn conv_unit<T: Scalar>(
    g: &mut Graph<T>,
    set: &mut ParamSet<T>,
    bound: &BoundParams,
    prefix: &str,
    x: Var,
    mode: Mode,
) -> Result<Var> {
    let w = bound.var(set, &format!("{prefix}.conv.weight"))?;
    let b = bound.var(set, &format!("{prefix}.conv.bias"))?;
    let y = g.conv2d(x, w, b)?;
    let gamma = bound.var(set, &format!("{prefix}.bn.gamma"))?;
    let beta = bound.var(set, &format!("{prefix}.bn.beta"))?;
    let im = set.index_of(&format!("{prefix}.bn.running_mean"))?;
    let iv = set.index_of(&format!("{prefix}.bn.running_var"))?;
    let (pm, pv) = set.pair_mut(im, iv);
    let stats = RunningStats { mean: pm.tensor.data_mut(), var: pv.tensor.data_mut() };
    let y = g.batchnorm2d(y, gamma, beta, stats, mode)?;
    Ok(g.relu(y))
}

fn expect_shape<T: Scalar>(g: &Graph<T>, v: Var, channels: usize, size: usize, op: &'static str) -> Result<()> {
    let t = g.value(v);
    let [n, c, h, w] = t.dims4(op)?;
    if (c, h, w) != (channels, size, size) {
        return Err(Error::shape(op, t.shape(), &[n, channels, size, size]));
    }
    Ok(())
}

/// Front-end: first conv unit on the input image batch.
pub fn forward_front<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ArchConfig,
    fe: &mut ParamSet<T>,
    x: Var,
    mode: Mode,
    requires_grad: bool,
) -> Result<StageRun> {
    expect_shape(g, x, cfg.in_channels, cfg.input_size, "forward_front")?;
    let params = BoundParams::bind(g, fe, requires_grad);
    let output = conv_unit(g, fe, &params, "fe", x, mode)?;
    Ok(StageRun { output, params })
}

/// Server body: remaining down blocks, bottleneck and up blocks with skip connections.
pub fn forward_server<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ArchConfig,
    server: &mut ParamSet<T>,
    features: Var,
    mode: Mode,
    requires_grad: bool,
) -> Result<StageRun> {
    expect_shape(g, features, cfg.down_filters[0], cfg.input_size, "forward_server")?;
    let params = BoundParams::bind(g, server, requires_grad);
    let p = &params;
    let depth = cfg.depth();
    let mut x = conv_unit(g, server, p, "down0.conv2", features, mode)?;
    let mut skips = vec![x];
    x = g.maxpool2d(x)?;
    for i in 1..depth {
        x = conv_unit(g, server, p, &format!("down{i}.conv1"), x, mode)?;
        x = conv_unit(g, server, p, &format!("down{i}.conv2"), x, mode)?;
        skips.push(x);
        x = g.maxpool2d(x)?;
    }
    x = conv_unit(g, server, p, "bottleneck.conv1", x, mode)?;
    x = conv_unit(g, server, p, "bottleneck.conv2", x, mode)?;
    for j in 0..depth {
        let up = g.upsample_nearest2x(x)?;
        x = g.concat_channels(skips[depth - 1 - j], up)?;
        x = conv_unit(g, server, p, &format!("up{j}.conv1"), x, mode)?;
        x = conv_unit(g, server, p, &format!("up{j}.conv2"), x, mode)?;
    }
    Ok(StageRun { output: x, params })
}

/// Back-end: output conv followed by the channel softmax; `output` holds the probabilities.
pub fn forward_back<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &ArchConfig,
    be: &mut ParamSet<T>,
    features: Var,
    requires_grad: bool,
) -> Result<StageRun> {
    let last = *cfg.up_filters.last().expect("validated");
    expect_shape(g, features, last, cfg.input_size, "forward_back")?;
    let params = BoundParams::bind(g, be, requires_grad);
    let w = params.var(be, "be.conv.weight")?;
    let b = params.var(be, "be.conv.bias")?;
    let logits = g.conv2d(features, w, b)?;
    let output = g.softmax_channels(logits)?;
    Ok(StageRun { output, params })
}
