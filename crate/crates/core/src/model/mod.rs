//! Small convolutional networks with interchangeable normalization layers,
//! and parameter accounting for standard residual architectures.

mod arch;
mod params;

pub use arch::{ArchTable, NormSite, ParamCount, RESNET_NAMES};
pub use params::{Param, ParamRole, ParamStore};

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ilm::{IlmOptions, IlmParams, IlmVars};
use crate::norm::{Mode, PartitionScheme, RunningStats, DEFAULT_BN_MOMENTUM, DEFAULT_EPSILON};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// A normalization scheme, optionally wrapped in meta normalization.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NormKind {
    pub scheme: PartitionScheme,
    pub ilm: bool,
}

impl NormKind {
    pub fn plain(scheme: PartitionScheme) -> Self {
        Self { scheme, ilm: false }
    }

    pub fn meta(scheme: PartitionScheme) -> Result<Self> {
        if !scheme.is_instance_level() {
            return Err(Error::InvalidArgument(
                "meta normalization cannot wrap batch normalization".into(),
            ));
        }
        Ok(Self { scheme, ilm: true })
    }
}

impl fmt::Display for NormKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.ilm {
            f.write_str("ilm+")?;
        }
        write!(f, "{}", self.scheme)
    }
}

impl FromStr for NormKind {
    type Err = Error;

    /// `bn`, `ln`, `in`, `gn(G)`, or `ilm+` followed by one of the
    /// instance-level ones.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s.strip_prefix("ilm+") {
            Some(rest) => NormKind::meta(rest.parse()?),
            None => Ok(NormKind::plain(s.parse()?)),
        }
    }
}

/// Everything a model needs to instantiate its normalization layers.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NormSpec {
    pub kind: NormKind,
    pub ilm: IlmOptions,
    pub epsilon: f64,
    /// Running-statistic momentum of batch normalization.
    pub momentum: f64,
}

impl NormSpec {
    pub fn new(kind: NormKind) -> Self {
        Self {
            kind,
            ilm: IlmOptions::default(),
            epsilon: DEFAULT_EPSILON,
            momentum: DEFAULT_BN_MOMENTUM,
        }
    }
}

/// One entry of a layer plan. Norm layers take their kind from the
/// model-wide [`NormSpec`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Bias-free convolution.
    Conv2d {
        kernel: usize,
        stride: usize,
        padding: usize,
        out_channels: usize,
    },
    /// Flattens its input, then `x·W + b`.
    FullyConnected {
        out_dim: usize,
    },
    Relu,
    AvgPool {
        kernel: usize,
    },
    MaxPool {
        kernel: usize,
    },
    /// Average over the whole (square) feature map.
    GlobalAvgPool,
    Norm,
    /// Two 3×3 conv + norm stages added to a shortcut, then ReLU. The
    /// shortcut is a 1×1 conv + norm when the shape changes.
    ResidualBlock {
        out_channels: usize,
        stride: usize,
    },
}

impl LayerSpec {
    pub fn conv3x3(out_channels: usize, stride: usize) -> Self {
        LayerSpec::Conv2d {
            kernel: 3,
            stride,
            padding: 1,
            out_channels,
        }
    }

    pub(crate) fn residual_body(out_channels: usize, stride: usize) -> Vec<LayerSpec> {
        vec![
            LayerSpec::conv3x3(out_channels, stride),
            LayerSpec::Norm,
            LayerSpec::Relu,
            LayerSpec::conv3x3(out_channels, 1),
            LayerSpec::Norm,
        ]
    }

    pub(crate) fn residual_shortcut(in_channels: usize, out_channels: usize, stride: usize) -> Vec<LayerSpec> {
        if stride == 1 && in_channels == out_channels {
            return Vec::new();
        }
        vec![
            LayerSpec::Conv2d {
                kernel: 1,
                stride,
                padding: 0,
                out_channels,
            },
            LayerSpec::Norm,
        ]
    }
}

/// Distribution of convolution and linear weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum WeightInit {
    /// Zero-mean normal with variance `2/fan_in` for convolutions (He) and
    /// `1/fan_in` for linear layers.
    #[default]
    FanIn,
    /// Standard normal for every weight.
    StandardNormal,
}

impl WeightInit {
    fn std(self, fan_in_variance: f64) -> f64 {
        match self {
            WeightInit::FanIn => fan_in_variance.sqrt(),
            WeightInit::StandardNormal => 1.0,
        }
    }
}

impl fmt::Display for WeightInit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightInit::FanIn => "fan_in",
            WeightInit::StandardNormal => "standard_normal",
        })
    }
}

impl FromStr for WeightInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "fan_in" => Ok(WeightInit::FanIn),
            "standard_normal" => Ok(WeightInit::StandardNormal),
            other => Err(Error::InvalidArgument(format!(
                "weight init must be `fan_in` or `standard_normal`, got `{other}`"
            ))),
        }
    }
}

/// Depth and width plan of the small residual classifier: a 3×3 stride-1
/// stem conv + norm + ReLU, one stage of residual blocks per width, global
/// average pooling and a linear classifier.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MicroNetPlan {
    pub input: [usize; 3],
    pub stem_channels: usize,
    pub widths: Vec<usize>,
    /// Stride of the first block of each stage.
    pub strides: Vec<usize>,
    pub blocks_per_stage: usize,
    pub classes: usize,
    pub init: WeightInit,
}

impl Default for MicroNetPlan {
    fn default() -> Self {
        Self {
            input: [3, 32, 32],
            stem_channels: 16,
            widths: vec![16, 32, 64],
            strides: vec![1, 2, 2],
            blocks_per_stage: 1,
            classes: 10,
            init: WeightInit::FanIn,
        }
    }
}

impl MicroNetPlan {
    pub fn specs(&self) -> Result<Vec<LayerSpec>> {
        if self.widths.is_empty() || self.widths.len() != self.strides.len() {
            return Err(Error::InvalidArgument(format!(
                "{} stage widths but {} strides",
                self.widths.len(),
                self.strides.len()
            )));
        }
        if self.blocks_per_stage == 0 || self.classes == 0 || self.stem_channels == 0 {
            return Err(Error::InvalidArgument("empty network plan".into()));
        }
        let mut specs = vec![
            LayerSpec::conv3x3(self.stem_channels, 1),
            LayerSpec::Norm,
            LayerSpec::Relu,
        ];
        for (&w, &s) in self.widths.iter().zip(&self.strides) {
            for b in 0..self.blocks_per_stage {
                specs.push(LayerSpec::ResidualBlock {
                    out_channels: w,
                    stride: if b == 0 { s } else { 1 },
                });
            }
        }
        specs.push(LayerSpec::GlobalAvgPool);
        specs.push(LayerSpec::FullyConnected { out_dim: self.classes });
        Ok(specs)
    }
}

pub fn build_micro_cnn<T: Scalar>(plan: &MicroNetPlan, norm: &NormSpec, seed: u64) -> Result<Model<T>> {
    Model::build_with_init(&plan.specs()?, plan.input, norm, seed, plan.init)
}

#[derive(Clone, Debug)]
struct NormLayer<T> {
    name: String,
    scheme: PartitionScheme,
    omega: usize,
    beta: usize,
    /// `W1`, `W2`, `W3` when wrapped in meta normalization.
    ilm: Option<[usize; 3]>,
    running: Option<RunningStats<T>>,
}

#[derive(Clone, Debug)]
enum Layer<T> {
    Conv {
        weight: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        weight: usize,
        bias: usize,
    },
    Relu,
    AvgPool(usize),
    MaxPool(usize),
    GlobalAvgPool,
    Norm(NormLayer<T>),
    Residual {
        body: Vec<Layer<T>>,
        shortcut: Vec<Layer<T>>,
    },
}

/// Output of a recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub output: Var,
    /// Tape handle of every parameter, in store order.
    pub params: Vec<Var>,
}

/// A built network: parameters, per-layer state and the plan it came from.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub params: ParamStore<T>,
    layers: Vec<Layer<T>>,
    specs: Vec<LayerSpec>,
    input: [usize; 3],
    norm: NormSpec,
}

struct Builder<'a, T> {
    params: &'a mut ParamStore<T>,
    rng: &'a mut ChaCha8Rng,
    norm: &'a NormSpec,
    init: WeightInit,
}

impl<T: Scalar> Builder<'_, T> {
    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<T> {
        let rng = &mut *self.rng;
        Tensor::from_fn(shape, |_| T::from_f64(std * rng.sample::<f64, _>(StandardNormal)))
    }

    fn layers(&mut self, specs: &[LayerSpec], shape: &mut Vec<usize>, prefix: &str) -> Result<Vec<Layer<T>>> {
        let mut out = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let name = format!("{prefix}{i}");
            out.push(self.layer(spec, shape, &name)?);
        }
        Ok(out)
    }

    fn layer(&mut self, spec: &LayerSpec, shape: &mut Vec<usize>, name: &str) -> Result<Layer<T>> {
        let feature_map = |shape: &[usize]| -> Result<(usize, usize, usize)> {
            match *shape {
                [c, h, w] => Ok((c, h, w)),
                _ => Err(Error::Shape(format!("`{name}` needs a feature map, got {shape:?}"))),
            }
        };
        Ok(match *spec {
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                out_channels,
            } => {
                let (c, h, w) = feature_map(shape)?;
                let ho = crate::tensor::conv_output_size(h, kernel, stride, padding)?;
                let wo = crate::tensor::conv_output_size(w, kernel, stride, padding)?;
                let fan_in = c * kernel * kernel;
                let value = self.normal(&[out_channels, c, kernel, kernel], self.init.std(2.0 / fan_in as f64));
                let weight = self.params.push(format!("{name}.weight"), value, ParamRole::ConvWeight);
                *shape = vec![out_channels, ho, wo];
                Layer::Conv {
                    weight,
                    stride,
                    padding,
                }
            }
            LayerSpec::FullyConnected { out_dim } => {
                let inputs: usize = shape.iter().product();
                let value = self.normal(&[inputs, out_dim], self.init.std(1.0 / inputs as f64));
                let weight = self
                    .params
                    .push(format!("{name}.weight"), value, ParamRole::LinearWeight);
                let bias = self
                    .params
                    .push(format!("{name}.bias"), Tensor::zeros(&[out_dim]), ParamRole::LinearBias);
                *shape = vec![out_dim];
                Layer::Linear { weight, bias }
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::AvgPool { kernel } | LayerSpec::MaxPool { kernel } => {
                let (c, h, w) = feature_map(shape)?;
                if kernel == 0 || h % kernel != 0 || w % kernel != 0 {
                    return Err(Error::Shape(format!("pool {kernel} does not tile {h}×{w} at `{name}`")));
                }
                *shape = vec![c, h / kernel, w / kernel];
                if matches!(spec, LayerSpec::AvgPool { .. }) {
                    Layer::AvgPool(kernel)
                } else {
                    Layer::MaxPool(kernel)
                }
            }
            LayerSpec::GlobalAvgPool => {
                let (c, h, w) = feature_map(shape)?;
                if h != w {
                    return Err(Error::Shape(format!("global pooling needs a square map, got {h}×{w}")));
                }
                *shape = vec![c, 1, 1];
                Layer::GlobalAvgPool
            }
            LayerSpec::Norm => {
                let (c, _, _) = feature_map(shape)?;
                self.norm_layer(c, name)?
            }
            LayerSpec::ResidualBlock { out_channels, stride } => {
                let (c, _, _) = feature_map(shape)?;
                let mut body_shape = shape.clone();
                let body = self.layers(
                    &LayerSpec::residual_body(out_channels, stride),
                    &mut body_shape,
                    &format!("{name}.body."),
                )?;
                let mut skip_shape = shape.clone();
                let shortcut = self.layers(
                    &LayerSpec::residual_shortcut(c, out_channels, stride),
                    &mut skip_shape,
                    &format!("{name}.shortcut."),
                )?;
                if body_shape != skip_shape {
                    return Err(Error::Shape(format!(
                        "residual branches of `{name}` disagree: {body_shape:?} vs {skip_shape:?}"
                    )));
                }
                *shape = body_shape;
                Layer::Residual { body, shortcut }
            }
        })
    }

    fn norm_layer(&mut self, channels: usize, name: &str) -> Result<Layer<T>> {
        let kind = self.norm.kind;
        let scheme = kind.scheme.fit_channels(channels)?;
        let omega = self
            .params
            .push(format!("{name}.omega"), Tensor::ones(&[channels]), ParamRole::NormScale);
        let beta = self
            .params
            .push(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamRole::NormShift);
        let ilm = if kind.ilm {
            let p = IlmParams::<T>::init(channels, &self.norm.ilm, self.rng)?;
            Some([
                self.params.push(format!("{name}.ilm.w1"), p.w1, ParamRole::IlmEncoder),
                self.params.push(format!("{name}.ilm.w2"), p.w2, ParamRole::IlmDecoder),
                self.params.push(format!("{name}.ilm.w3"), p.w3, ParamRole::IlmDecoder),
            ])
        } else {
            None
        };
        let running = match scheme {
            PartitionScheme::Batch => Some(RunningStats::new(channels, self.norm.momentum)?),
            _ => None,
        };
        Ok(Layer::Norm(NormLayer {
            name: name.to_string(),
            scheme,
            omega,
            beta,
            ilm,
            running,
        }))
    }
}

impl<T: Scalar> Model<T> {
    /// Instantiates `specs` for inputs of shape `[B, input...]` with
    /// [`WeightInit::FanIn`] weights.
    pub fn build(specs: &[LayerSpec], input: [usize; 3], norm: &NormSpec, seed: u64) -> Result<Self> {
        Self::build_with_init(specs, input, norm, seed, WeightInit::FanIn)
    }

    /// Weights are drawn from a generator seeded with `seed`, in layer
    /// order. Linear biases start at 0, norm scale at 1 and shift at 0,
    /// meta-norm weights standard normal.
    pub fn build_with_init(
        specs: &[LayerSpec],
        input: [usize; 3],
        norm: &NormSpec,
        seed: u64,
        init: WeightInit,
    ) -> Result<Self> {
        let mut params = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut shape = input.to_vec();
        let layers = Builder {
            params: &mut params,
            rng: &mut rng,
            norm,
            init,
        }
        .layers(specs, &mut shape, "")?;
        if shape.len() != 1 {
            return Err(Error::Shape(format!(
                "network must end in a fully connected layer, ends with {shape:?}"
            )));
        }
        Ok(Self {
            params,
            layers,
            specs: specs.to_vec(),
            input,
            norm: *norm,
        })
    }

    pub fn norm_spec(&self) -> &NormSpec {
        &self.norm
    }

    pub fn specs(&self) -> &[LayerSpec] {
        &self.specs
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input
    }

    /// Counts from the allocated parameter tensors.
    pub fn count_parameters(&self) -> ParamCount {
        let total = self.params.numel();
        let extra = self.params.numel_where(ParamRole::is_ilm);
        ParamCount {
            total,
            norm_extra: extra,
            ratio: extra as f64 / (total - extra) as f64,
        }
    }

    /// Layout of this model derived from its plan alone.
    pub fn arch_table(&self) -> Result<ArchTable> {
        ArchTable::from_specs("model", &self.specs, self.input, self.norm.kind)
    }

    /// Records a forward pass. Parameters become gradient-receiving leaves
    /// in training mode and constants in evaluation mode.
    pub fn forward(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<Forward> {
        let trainable = mode == Mode::Train;
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| tape.leaf(p.value.clone(), trainable))
            .collect();
        let output = self.forward_with(tape, x, mode, &params)?;
        Ok(Forward { output, params })
    }

    /// Forward pass with caller-provided parameter handles, one per store
    /// entry.
    pub fn forward_with(&mut self, tape: &mut Tape<T>, x: Var, mode: Mode, params: &[Var]) -> Result<Var> {
        if params.len() != self.params.len() {
            return Err(Error::InvalidArgument(format!(
                "{} parameter handles for {} parameters",
                params.len(),
                self.params.len()
            )));
        }
        let shape = tape.value(x).shape();
        if shape.len() != 4 || shape[1..] != self.input {
            return Err(Error::Shape(format!(
                "model expects [B, {}, {}, {}] input, got {shape:?}",
                self.input[0], self.input[1], self.input[2]
            )));
        }
        run(&mut self.layers, tape, x, mode, params, &self.norm)
    }

    /// Evaluation-mode logits for a batch.
    pub fn predict(&mut self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let f = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(f.output).clone())
    }

    /// Running statistics of every batch-norm layer, by layer name.
    pub fn running_stats(&self) -> Vec<(&str, &RunningStats<T>)> {
        let mut out = Vec::new();
        visit_norms(&self.layers, &mut |n| {
            if let Some(r) = &n.running {
                out.push((n.name.as_str(), r));
            }
        });
        out
    }

    pub fn running_stats_mut(&mut self) -> Vec<(&str, &mut RunningStats<T>)> {
        let mut out = Vec::new();
        visit_norms_mut(&mut self.layers, &mut out);
        out
    }
}

fn visit_norms<'a, T>(layers: &'a [Layer<T>], f: &mut impl FnMut(&'a NormLayer<T>)) {
    for layer in layers {
        match layer {
            Layer::Norm(n) => f(n),
            Layer::Residual { body, shortcut } => {
                visit_norms(body, f);
                visit_norms(shortcut, f);
            }
            _ => {}
        }
    }
}

fn visit_norms_mut<'a, T>(layers: &'a mut [Layer<T>], out: &mut Vec<(&'a str, &'a mut RunningStats<T>)>) {
    for layer in layers {
        match layer {
            Layer::Norm(NormLayer {
                name, running: Some(r), ..
            }) => out.push((name.as_str(), r)),
            Layer::Residual { body, shortcut } => {
                visit_norms_mut(body, out);
                visit_norms_mut(shortcut, out);
            }
            _ => {}
        }
    }
}

fn run<T: Scalar>(
    layers: &mut [Layer<T>],
    tape: &mut Tape<T>,
    mut x: Var,
    mode: Mode,
    params: &[Var],
    norm: &NormSpec,
) -> Result<Var> {
    for layer in layers {
        x = match layer {
            Layer::Conv {
                weight,
                stride,
                padding,
            } => tape.conv2d(x, params[*weight], *stride, *padding)?,
            Layer::Linear { weight, bias } => {
                let flat = if tape.value(x).rank() == 2 { x } else { tape.flatten(x)? };
                let y = tape.matmul(flat, params[*weight])?;
                tape.add(y, params[*bias])?
            }
            Layer::Relu => tape.relu(x)?,
            Layer::AvgPool(k) => tape.avg_pool2d(x, *k)?,
            Layer::MaxPool(k) => tape.max_pool2d(x, *k)?,
            Layer::GlobalAvgPool => {
                let k = tape.value(x).shape()[2];
                tape.avg_pool2d(x, k)?
            }
            Layer::Norm(n) => norm_forward(n, tape, x, mode, params, norm)?,
            Layer::Residual { body, shortcut } => {
                let main = run(body, tape, x, mode, params, norm)?;
                let skip = run(shortcut, tape, x, mode, params, norm)?;
                let sum = tape.add(main, skip)?;
                tape.relu(sum)?
            }
        };
    }
    Ok(x)
}

fn norm_forward<T: Scalar>(
    n: &mut NormLayer<T>,
    tape: &mut Tape<T>,
    x: Var,
    mode: Mode,
    params: &[Var],
    spec: &NormSpec,
) -> Result<Var> {
    let (omega, beta) = (params[n.omega], params[n.beta]);
    if let Some([w1, w2, w3]) = n.ilm {
        let vars = IlmVars {
            w1: params[w1],
            w2: params[w2],
            w3: params[w3],
            b_omega: omega,
            b_beta: beta,
        };
        let o = &spec.ilm;
        return tape.ilm_forward(x, n.scheme, vars, o.act_mu, o.act_gamma, o.key_source, spec.epsilon);
    }
    let xs = match (n.scheme, mode, n.running.as_mut()) {
        (PartitionScheme::Batch, Mode::Eval, running) => match running {
            Some(r) if r.initialized => tape.standardize_fixed(x, &r.running_mu, &r.running_gamma, spec.epsilon)?,
            _ => return Err(Error::UninitializedRunningStats),
        },
        (scheme, _, running) => {
            let (xs, stats) = tape.standardize(x, scheme, spec.epsilon)?;
            if let Some(r) = running {
                r.update(&stats.mu.to_f64_vec(), &stats.gamma.to_f64_vec());
            }
            xs
        }
    };
    tape.channel_affine(xs, omega, beta)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_plan() -> MicroNetPlan {
        MicroNetPlan {
            input: [3, 8, 8],
            stem_channels: 4,
            widths: vec![4, 8],
            strides: vec![1, 2],
            blocks_per_stage: 1,
            classes: 10,
            init: WeightInit::FanIn,
        }
    }

    fn spec(kind: &str) -> NormSpec {
        let mut s = NormSpec::new(kind.parse().unwrap());
        s.ilm.key_group_size = 2;
        s
    }

    fn input(b: usize) -> Tensor<f64> {
        Tensor::from_fn(&[b, 3, 8, 8], |i| ((i * 7919) % 211) as f64 / 50.0 - 2.0)
    }

    #[test]
    fn norm_kind_strings() {
        for s in ["bn", "ln", "in", "gn(32)", "ilm+ln", "ilm+in", "ilm+gn(32)"] {
            assert_eq!(s.parse::<NormKind>().unwrap().to_string(), s);
        }
        assert!("ilm+bn".parse::<NormKind>().is_err());
        assert!("ilm+".parse::<NormKind>().is_err());
    }

    #[test]
    fn same_seed_same_parameters() {
        let a: Model<f64> = build_micro_cnn(&tiny_plan(), &spec("ilm+gn(2)"), 9).unwrap();
        let b: Model<f64> = build_micro_cnn(&tiny_plan(), &spec("ilm+gn(2)"), 9).unwrap();
        assert_eq!(a.params, b.params);
        let c: Model<f64> = build_micro_cnn(&tiny_plan(), &spec("ilm+gn(2)"), 10).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn every_norm_kind_maps_images_to_logits() {
        for kind in ["bn", "ln", "in", "gn(2)", "ilm+ln", "ilm+in", "ilm+gn(2)"] {
            let mut m: Model<f64> = build_micro_cnn(&tiny_plan(), &spec(kind), 1).unwrap();
            for b in [1, 3] {
                let mut tape = Tape::new();
                let x = tape.constant(input(b));
                let f = m.forward(&mut tape, x, Mode::Train).unwrap();
                assert_eq!(tape.value(f.output).shape(), &[b, 10], "{kind}");
            }
        }
    }

    #[test]
    fn single_group_norm_equals_layer_norm() {
        let mut gn: Model<f64> = build_micro_cnn(&tiny_plan(), &spec("gn(1)"), 4).unwrap();
        let mut ln: Model<f64> = build_micro_cnn(&tiny_plan(), &spec("ln"), 4).unwrap();
        let x = input(2);
        assert!(gn.predict(&x).unwrap().max_abs_diff(&ln.predict(&x).unwrap()).unwrap() <= 1e-12);
    }

    #[test]
    fn meta_norm_adds_exactly_the_auto_encoder_weights() {
        let gn: Model<f64> = build_micro_cnn(&tiny_plan(), &spec("gn(2)"), 4).unwrap();
        let ilm: Model<f64> = build_micro_cnn(&tiny_plan(), &spec("ilm+gn(2)"), 4).unwrap();
        let table = gn.arch_table().unwrap();
        let expected: usize = table
            .sites
            .iter()
            .map(|s| {
                let n = s.channels / 2;
                3 * n * (n / 16).max(1)
            })
            .sum();
        assert_eq!(ilm.count_parameters().total - gn.count_parameters().total, expected);
        assert_eq!(ilm.count_parameters().norm_extra, expected);
        assert_eq!(gn.count_parameters().norm_extra, 0);
    }

    #[test]
    fn allocated_and_tabulated_counts_agree() {
        for kind in ["bn", "gn(2)", "ilm+gn(2)", "ilm+in"] {
            let s = spec(kind);
            let m: Model<f32> = build_micro_cnn(&MicroNetPlan::default(), &s, 0).unwrap();
            let table = m.arch_table().unwrap();
            assert_eq!(table.count(s.kind, &s.ilm).unwrap(), m.count_parameters(), "{kind}");
        }
    }

    #[test]
    fn batch_norm_eval_needs_a_training_pass() {
        let mut m: Model<f64> = build_micro_cnn(&tiny_plan(), &spec("bn"), 2).unwrap();
        assert!(matches!(m.predict(&input(2)), Err(Error::UninitializedRunningStats)));
        let mut tape = Tape::new();
        let x = tape.constant(input(4));
        m.forward(&mut tape, x, Mode::Train).unwrap();
        assert!(m.running_stats().iter().all(|(_, r)| r.initialized));
        assert!(m.predict(&input(2)).is_ok());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let mut m: Model<f64> = build_micro_cnn(&tiny_plan(), &spec("ln"), 2).unwrap();
        let x = Tensor::<f64>::zeros(&[1, 3, 16, 16]);
        assert!(matches!(m.predict(&x), Err(Error::Shape(_))));
    }
}
