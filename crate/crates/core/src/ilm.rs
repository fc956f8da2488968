//! Instance-level meta normalization.
//!
//! A light auto-encoder reads per-group means and variances of the layer
//! input and produces per-instance rescaling weights, which replace the
//! fixed affine step after an instance-level standardization.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::norm::{channel_affine, standardize, AffineParams, Moment, PartitionScheme};
use crate::scalar::Scalar;
use crate::tensor::{grouped_moments, matmul, transpose, unary, Tensor, UnaryOp};

pub const DEFAULT_KEY_GROUP_SIZE: usize = 16;

/// Per-instance, per-group mean and variance; both `[B, N]`.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyFeatures<T> {
    pub mu: Tensor<T>,
    pub gamma: Tensor<T>,
    pub group_size: usize,
}

impl<T: Scalar> KeyFeatures<T> {
    pub fn groups(&self) -> usize {
        self.mu.shape()[1]
    }
}

/// Decoder nonlinearity.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Tanh,
    Sigmoid,
    Relu,
    /// Negative slope 0.01.
    LeakyRelu,
    Relu6,
    Identity,
}

impl Activation {
    pub const ALL: [Activation; 6] = [
        Activation::Tanh,
        Activation::Sigmoid,
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Relu6,
        Activation::Identity,
    ];

    pub fn op(self) -> UnaryOp {
        match self {
            Activation::Tanh => UnaryOp::Tanh,
            Activation::Sigmoid => UnaryOp::Sigmoid,
            Activation::Relu => UnaryOp::Relu,
            Activation::LeakyRelu => UnaryOp::LeakyRelu,
            Activation::Relu6 => UnaryOp::Relu6,
            Activation::Identity => UnaryOp::Identity,
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.op().name())
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let op: UnaryOp = s.parse()?;
        Activation::ALL
            .into_iter()
            .find(|a| a.op() == op)
            .ok_or_else(|| Error::InvalidArgument(format!("`{s}` is not a decoder activation")))
    }
}

/// Length `M` of the embedded vector as a function of the group count `N`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum EmbedDimRule {
    /// `max(1, ⌊N / 16⌋)`.
    #[default]
    NOver16Min1,
    Fixed(usize),
}

impl EmbedDimRule {
    pub fn apply(self, groups: usize) -> usize {
        match self {
            EmbedDimRule::NOver16Min1 => (groups / 16).max(1),
            EmbedDimRule::Fixed(m) => m,
        }
    }
}

impl fmt::Display for EmbedDimRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EmbedDimRule::NOver16Min1 => f.write_str("n_over_16_min_1"),
            EmbedDimRule::Fixed(m) => write!(f, "fixed:{m}"),
        }
    }
}

impl FromStr for EmbedDimRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "n_over_16_min_1" {
            return Ok(EmbedDimRule::NOver16Min1);
        }
        match s.strip_prefix("fixed:").map(|m| m.trim().parse::<usize>()) {
            Some(Ok(m)) if m > 0 => Ok(EmbedDimRule::Fixed(m)),
            _ => Err(Error::InvalidArgument(format!(
                "embed-dim rule must be `n_over_16_min_1` or `fixed:M` with M ≥ 1, got `{s}`"
            ))),
        }
    }
}

/// Which tensor the key features are read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Default)]
pub enum KeySource {
    /// The layer input, before standardization.
    #[default]
    Input,
    Standardized,
}

impl fmt::Display for KeySource {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            KeySource::Input => "input",
            KeySource::Standardized => "standardized",
        })
    }
}

impl FromStr for KeySource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "input" => Ok(KeySource::Input),
            "standardized" => Ok(KeySource::Standardized),
            other => Err(Error::InvalidArgument(format!(
                "key source must be `input` or `standardized`, got `{other}`"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct IlmOptions {
    pub key_group_size: usize,
    pub embed_dim: EmbedDimRule,
    pub act_mu: Activation,
    pub act_gamma: Activation,
    pub key_source: KeySource,
}

impl Default for IlmOptions {
    fn default() -> Self {
        Self {
            key_group_size: DEFAULT_KEY_GROUP_SIZE,
            embed_dim: EmbedDimRule::default(),
            act_mu: Activation::Tanh,
            act_gamma: Activation::Sigmoid,
            key_source: KeySource::Input,
        }
    }
}

impl IlmOptions {
    /// The key group size actually used for `channels`: capped at the
    /// channel count, and required to divide it.
    pub fn group_size_for(&self, channels: usize) -> Result<usize> {
        let k = self.key_group_size.min(channels);
        if k == 0 || !channels.is_multiple_of(k) {
            return Err(Error::Partition(format!(
                "key group size {k} does not divide {channels} channels"
            )));
        }
        Ok(k)
    }

    /// `(N, M)` for a layer with `channels` channels.
    pub fn dims_for(&self, channels: usize) -> Result<(usize, usize)> {
        let n = channels / self.group_size_for(channels)?;
        let m = self.embed_dim.apply(n);
        if m == 0 {
            return Err(Error::InvalidArgument("embedded dimension must be positive".into()));
        }
        Ok((n, m))
    }
}

/// Auto-encoder weights of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct IlmParams<T> {
    /// Shared encoder, `[M, N]`.
    pub w1: Tensor<T>,
    /// Mean decoder, `[N, M]`.
    pub w2: Tensor<T>,
    /// Variance decoder, `[N, M]`.
    pub w3: Tensor<T>,
    /// `B_ω`, `B_β`, length `C`.
    pub base: AffineParams<T>,
    pub act_mu: Activation,
    pub act_gamma: Activation,
}

impl<T: Scalar> IlmParams<T> {
    /// Standard-normal encoder/decoder weights, `B_ω = 1`, `B_β = 0`.
    pub fn init<R: Rng + ?Sized>(channels: usize, options: &IlmOptions, rng: &mut R) -> Result<Self> {
        let (n, m) = options.dims_for(channels)?;
        let mut normal =
            |shape: &[usize]| Tensor::from_fn(shape, |_| T::from_f64(rng.sample::<f64, _>(StandardNormal)));
        let w1 = normal(&[m, n]);
        let w2 = normal(&[n, m]);
        let w3 = normal(&[n, m]);
        Self::new(
            w1,
            w2,
            w3,
            AffineParams::identity(channels),
            options.act_mu,
            options.act_gamma,
        )
    }

    /// All encoder and decoder weights zero.
    pub fn zeros(channels: usize, options: &IlmOptions) -> Result<Self> {
        let (n, m) = options.dims_for(channels)?;
        Self::new(
            Tensor::zeros(&[m, n]),
            Tensor::zeros(&[n, m]),
            Tensor::zeros(&[n, m]),
            AffineParams::identity(channels),
            options.act_mu,
            options.act_gamma,
        )
    }

    pub fn new(
        w1: Tensor<T>,
        w2: Tensor<T>,
        w3: Tensor<T>,
        base: AffineParams<T>,
        act_mu: Activation,
        act_gamma: Activation,
    ) -> Result<Self> {
        let (m, n) = w1.dims2()?;
        if w2.shape() != [n, m] || w3.shape() != [n, m] {
            return Err(Error::Shape(format!(
                "decoders must be {n}×{m}, got {:?} and {:?}",
                w2.shape(),
                w3.shape()
            )));
        }
        if !base.channels().is_multiple_of(n) {
            return Err(Error::Shape(format!(
                "{} channels are not a multiple of {n} key groups",
                base.channels()
            )));
        }
        Ok(Self {
            w1,
            w2,
            w3,
            base,
            act_mu,
            act_gamma,
        })
    }

    pub fn groups(&self) -> usize {
        self.w1.shape()[1]
    }

    pub fn embed_dim(&self) -> usize {
        self.w1.shape()[0]
    }

    pub fn channels(&self) -> usize {
        self.base.channels()
    }

    pub fn group_size(&self) -> usize {
        self.channels() / self.groups()
    }
}

/// Mean and variance of each run of `group_size` channels, per instance.
pub fn extract_key_features<T: Scalar>(x: &Tensor<T>, group_size: usize) -> Result<KeyFeatures<T>> {
    let (_, c, _, _) = x.dims4()?;
    if group_size == 0 || c % group_size != 0 {
        return Err(Error::Partition(format!(
            "key group size {group_size} does not divide {c} channels"
        )));
    }
    let (mu, gamma) = grouped_moments(x, c / group_size)?;
    Ok(KeyFeatures { mu, gamma, group_size })
}

/// `E_μ = ReLU(W1·μ)`, `E_γ = ReLU(W1·γ)` for every instance.
pub fn encode<T: Scalar>(kf: &KeyFeatures<T>, params: &IlmParams<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    if kf.groups() != params.groups() {
        return Err(Error::Shape(format!(
            "{} key groups but encoder expects {}",
            kf.groups(),
            params.groups()
        )));
    }
    let w1t = transpose(&params.w1)?;
    let e_mu = unary(UnaryOp::Relu, &matmul(&kf.mu, &w1t)?)?;
    let e_gamma = unary(UnaryOp::Relu, &matmul(&kf.gamma, &w1t)?)?;
    Ok((e_mu, e_gamma))
}

/// `D_μ = act_mu(W2·E_μ)`, `D_γ = act_gamma(W3·E_γ)` for every instance.
pub fn decode<T: Scalar>(
    e_mu: &Tensor<T>,
    e_gamma: &Tensor<T>,
    params: &IlmParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let d_mu = unary(params.act_mu.op(), &matmul(e_mu, &transpose(&params.w2)?)?)?;
    let d_gamma = unary(params.act_gamma.op(), &matmul(e_gamma, &transpose(&params.w3)?)?)?;
    Ok((d_mu, d_gamma))
}

/// Repeats every column `times` times: `[B, N] -> [B, N·times]`.
pub fn duplicate<T: Scalar>(v: &Tensor<T>, times: usize) -> Result<Tensor<T>> {
    let (b, n) = v.dims2()?;
    if times == 0 {
        return Err(Error::InvalidArgument("duplication factor must be positive".into()));
    }
    let data = v.data().iter().flat_map(|&x| std::iter::repeat_n(x, times)).collect();
    Ok(Tensor::from_parts(vec![b, n * times], data))
}

/// `ω[b] = D_γ[b]↑ + B_ω`, `β[b] = D_μ[b]↑ + B_β`, where `↑` repeats each
/// group value over its `C / N` contiguous channels. Both outputs are
/// `[B, C]`.
pub fn align<T: Scalar>(
    d_mu: &Tensor<T>,
    d_gamma: &Tensor<T>,
    base: &AffineParams<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    d_mu.expect_same_shape(d_gamma)?;
    let (_, n) = d_mu.dims2()?;
    let c = base.channels();
    if !c.is_multiple_of(n) {
        return Err(Error::Shape(format!("{c} channels cannot hold {n} key groups")));
    }
    let k = c / n;
    let add_base = |d: &Tensor<T>, b: &Tensor<T>| -> Result<Tensor<T>> {
        let mut up = duplicate(d, k)?;
        for row in up.data_mut().chunks_exact_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
        Ok(up)
    };
    Ok((add_base(d_gamma, &base.omega)?, add_base(d_mu, &base.beta)?))
}

fn check_standardizer(scheme: PartitionScheme) -> Result<()> {
    if scheme.is_instance_level() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(
            "meta normalization needs an instance-level standardizer (ln, in or gn); \
             batch statistics would make each instance's weights depend on the rest of the batch"
                .into(),
        ))
    }
}

/// Full layer: standardize `x`, derive per-instance rescaling weights from
/// its key features, and apply them.
pub fn ilm_forward<T: Scalar>(
    x: &Tensor<T>,
    standardizer: PartitionScheme,
    params: &IlmParams<T>,
    key_source: KeySource,
    epsilon: f64,
) -> Result<Tensor<T>> {
    check_standardizer(standardizer)?;
    let (xs, _) = standardize(x, standardizer, epsilon)?;
    let source = match key_source {
        KeySource::Input => x,
        KeySource::Standardized => &xs,
    };
    let kf = extract_key_features(source, params.group_size())?;
    let (e_mu, e_gamma) = encode(&kf, params)?;
    let (d_mu, d_gamma) = decode(&e_mu, &e_gamma, params)?;
    let (omega, beta) = align(&d_mu, &d_gamma, &params.base)?;
    channel_affine(&xs, &omega, &beta)
}

/// `(extra, base)` parameter counts of one layer: `extra = 3·M·N` for the
/// auto-encoder and `base = 2·C` for `B_ω`, `B_β`.
pub fn count_ilm_params(channels: usize, key_group_size: usize, rule: EmbedDimRule) -> Result<(usize, usize)> {
    if key_group_size == 0 || !channels.is_multiple_of(key_group_size) {
        return Err(Error::Partition(format!(
            "key group size {key_group_size} does not divide {channels} channels"
        )));
    }
    let n = channels / key_group_size;
    let m = rule.apply(n);
    Ok((3 * m * n, 2 * channels))
}

struct DuplicateFn {
    times: usize,
}

impl<T: Scalar> Backward<T> for DuplicateFn {
    fn name(&self) -> &'static str {
        "duplicate"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let data = grad
            .data()
            .chunks_exact(self.times)
            .map(|run| T::from_f64(run.iter().map(|v| v.as_f64()).sum()))
            .collect();
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), data))]
    }
}

/// Tape handles of one layer's auto-encoder parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct IlmVars {
    pub w1: Var,
    pub w2: Var,
    pub w3: Var,
    pub b_omega: Var,
    pub b_beta: Var,
}

impl<T: Scalar> Tape<T> {
    /// Recorded [`duplicate`].
    pub fn duplicate(&mut self, v: Var, times: usize) -> Result<Var> {
        let out = duplicate(self.value(v), times)?;
        Ok(self.record(DuplicateFn { times }, &[v], out))
    }

    pub fn ilm_params(&mut self, params: &IlmParams<T>, trainable: bool) -> IlmVars {
        let mut leaf = |t: &Tensor<T>| self.leaf(t.clone(), trainable);
        IlmVars {
            w1: leaf(&params.w1),
            w2: leaf(&params.w2),
            w3: leaf(&params.w3),
            b_omega: leaf(&params.base.omega),
            b_beta: leaf(&params.base.beta),
        }
    }

    /// Recorded [`ilm_forward`].
    #[allow(clippy::too_many_arguments)]
    pub fn ilm_forward(
        &mut self,
        x: Var,
        standardizer: PartitionScheme,
        vars: IlmVars,
        act_mu: Activation,
        act_gamma: Activation,
        key_source: KeySource,
        epsilon: f64,
    ) -> Result<Var> {
        check_standardizer(standardizer)?;
        let (_, c, _, _) = self.value(x).dims4()?;
        let (m, n) = self.value(vars.w1).dims2()?;
        if c % n != 0 {
            return Err(Error::Shape(format!("{c} channels cannot hold {n} key groups")));
        }
        if self.value(vars.w2).shape() != [n, m] || self.value(vars.w3).shape() != [n, m] {
            return Err(Error::Shape("decoder weights must be N×M".into()));
        }
        let (xs, _) = self.standardize(x, standardizer, epsilon)?;
        let source = match key_source {
            KeySource::Input => x,
            KeySource::Standardized => xs,
        };
        let keys = PartitionScheme::Group(n);
        let mu = self.partition_moment(source, keys, Moment::Mean)?;
        let gamma = self.partition_moment(source, keys, Moment::Variance)?;

        let w1t = self.transpose(vars.w1)?;
        let h_mu = self.matmul(mu, w1t)?;
        let e_mu = self.relu(h_mu)?;
        let h_gamma = self.matmul(gamma, w1t)?;
        let e_gamma = self.relu(h_gamma)?;

        let w2t = self.transpose(vars.w2)?;
        let w3t = self.transpose(vars.w3)?;
        let h_mu = self.matmul(e_mu, w2t)?;
        let d_mu = self.unary(act_mu.op(), h_mu)?;
        let h_gamma = self.matmul(e_gamma, w3t)?;
        let d_gamma = self.unary(act_gamma.op(), h_gamma)?;

        let up_gamma = self.duplicate(d_gamma, c / n)?;
        let omega = self.add(up_gamma, vars.b_omega)?;
        let up_mu = self.duplicate(d_mu, c / n)?;
        let beta = self.add(up_mu, vars.b_beta)?;
        self.channel_affine(xs, omega, beta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_tape_fn, FdOptions};
    use crate::norm::DEFAULT_EPSILON;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn options(k: usize) -> IlmOptions {
        IlmOptions {
            key_group_size: k,
            ..IlmOptions::default()
        }
    }

    fn kf(mu: &[f64], gamma: &[f64]) -> KeyFeatures<f64> {
        let n = mu.len();
        KeyFeatures {
            mu: t(&[1, n], mu),
            gamma: t(&[1, n], gamma),
            group_size: 1,
        }
    }

    #[test]
    fn key_features_of_four_channels() {
        let x = t(&[1, 4, 1, 1], &[1.0, 3.0, 5.0, 9.0]);
        let k = extract_key_features(&x, 2).unwrap();
        assert_eq!(k.mu.data(), &[2.0, 7.0]);
        assert_eq!(k.gamma.data(), &[1.0, 4.0]);
        let whole = extract_key_features(&x, 4).unwrap();
        assert_eq!(whole.mu.data(), &[4.5]);
        let per_channel = extract_key_features(&x, 1).unwrap();
        assert_eq!(per_channel.mu.data(), x.data());
        assert!(per_channel.gamma.data().iter().all(|&g| g == 0.0));
        assert!(matches!(extract_key_features(&x, 3), Err(Error::Partition(_))));
    }

    #[test]
    fn key_features_respond_to_shifts() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 2, 2], |i| (i as f64 * 0.37).sin());
        let a = extract_key_features(&x, 2).unwrap();
        let b = extract_key_features(&x.map(|v| v + 2.5), 2).unwrap();
        for (p, q) in a.mu.data().iter().zip(b.mu.data()) {
            assert!((q - p - 2.5).abs() < 1e-12);
        }
        assert!(a.gamma.max_abs_diff(&b.gamma).unwrap() < 1e-12);
    }

    fn params_with(w1: Tensor<f64>, w2: Tensor<f64>, w3: Tensor<f64>, c: usize) -> IlmParams<f64> {
        IlmParams::new(
            w1,
            w2,
            w3,
            AffineParams::identity(c),
            Activation::Tanh,
            Activation::Sigmoid,
        )
        .unwrap()
    }

    #[test]
    fn encoder_examples() {
        let zero = params_with(
            Tensor::zeros(&[1, 2]),
            Tensor::zeros(&[2, 1]),
            Tensor::zeros(&[2, 1]),
            4,
        );
        let (e_mu, e_gamma) = encode(&kf(&[2.0, 7.0], &[1.0, 4.0]), &zero).unwrap();
        assert_eq!(e_mu.data(), &[0.0]);
        assert_eq!(e_gamma.data(), &[0.0]);

        let eye = params_with(Tensor::identity(2), Tensor::identity(2), Tensor::identity(2), 2);
        let (e_mu, _) = encode(&kf(&[2.0, -3.0], &[1.0, 1.0]), &eye).unwrap();
        assert_eq!(e_mu.data(), &[2.0, 0.0]);

        let sum = params_with(
            t(&[1, 2], &[1.0, 1.0]),
            Tensor::zeros(&[2, 1]),
            Tensor::zeros(&[2, 1]),
            4,
        );
        let (e_mu, e_gamma) = encode(&kf(&[2.0, 7.0], &[1.0, 4.0]), &sum).unwrap();
        assert_eq!(e_mu.data(), &[9.0]);
        assert_eq!(e_gamma.data(), &[5.0]);

        assert!(matches!(
            encode(&kf(&[1.0, 2.0, 3.0], &[1.0; 3]), &sum),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn decoder_examples() {
        let w = Tensor::<f64>::from_fn(&[2, 2], |i| i as f64 - 1.5);
        let p = params_with(Tensor::identity(2), w.clone(), w, 2);
        let zeros = Tensor::zeros(&[1, 2]);
        let (d_mu, d_gamma) = decode(&zeros, &zeros, &p).unwrap();
        assert_eq!(d_mu.data(), &[0.0, 0.0]);
        assert_eq!(d_gamma.data(), &[0.5, 0.5]);

        let eye = params_with(Tensor::identity(2), Tensor::identity(2), Tensor::identity(2), 2);
        let (d_mu, _) = decode(&t(&[1, 2], &[0.5, 0.0]), &zeros, &eye).unwrap();
        assert!((d_mu.data()[0] - 0.462117).abs() < 1e-6);
        assert_eq!(d_mu.data()[1], 0.0);
    }

    #[test]
    fn align_examples() {
        let base = AffineParams::identity(4);
        let (omega, beta) = align(&t(&[1, 2], &[0.0, 0.0]), &t(&[1, 2], &[0.5, 0.5]), &base).unwrap();
        assert_eq!(omega.data(), &[1.5; 4]);
        assert_eq!(beta.data(), &[0.0; 4]);

        let (omega, beta) = align(&t(&[1, 2], &[0.3, -0.7]), &t(&[1, 2], &[0.2, 0.9]), &base).unwrap();
        assert_eq!(beta.data(), &[0.3, 0.3, -0.7, -0.7]);
        let expected = [1.2, 1.2, 1.9, 1.9];
        for (a, b) in omega.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!(align(&t(&[1, 3], &[0.0; 3]), &t(&[1, 3], &[0.0; 3]), &base).is_err());
    }

    #[test]
    fn zero_weights_scale_by_one_and_a_half() {
        let x = Tensor::<f64>::from_fn(&[3, 8, 4, 4], |i| ((i * 7919) % 101) as f64 / 17.0 - 3.0);
        let mut p = IlmParams::zeros(8, &options(4)).unwrap();
        p.base = AffineParams::new(
            Tensor::from_fn(&[8], |i| 0.25 * i as f64 - 1.0),
            Tensor::from_fn(&[8], |i| 0.1 * i as f64),
        )
        .unwrap();
        for scheme in [
            PartitionScheme::Group(2),
            PartitionScheme::Layer,
            PartitionScheme::Instance,
        ] {
            let out = ilm_forward(&x, scheme, &p, KeySource::Input, DEFAULT_EPSILON).unwrap();
            let (xs, _) = standardize(&x, scheme, DEFAULT_EPSILON).unwrap();
            let omega = p.base.omega.map(|w| w + 0.5);
            let expected = channel_affine(&xs, &omega, &p.base.beta).unwrap();
            assert_eq!(out, expected);
        }
        let out = ilm_forward(
            &x,
            PartitionScheme::Layer,
            &IlmParams::zeros(8, &options(4)).unwrap(),
            KeySource::Input,
            1e-5,
        )
        .unwrap();
        let (xs, _) = standardize(&x, PartitionScheme::Layer, 1e-5).unwrap();
        assert_eq!(out, xs.scale(1.5));
    }

    #[test]
    fn batch_standardizer_is_rejected() {
        let x = Tensor::<f64>::ones(&[2, 4, 2, 2]);
        let p = IlmParams::zeros(4, &options(2)).unwrap();
        let err = ilm_forward(&x, PartitionScheme::Batch, &p, KeySource::Input, 1e-5).unwrap_err();
        assert!(err.to_string().contains("instance-level"), "{err}");
    }

    #[test]
    fn weights_stay_in_activation_ranges() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = IlmParams::<f64>::init(16, &options(4), &mut rng).unwrap();
        for s in 0..5 {
            let x = Tensor::<f64>::from_fn(&[2, 16, 3, 3], |i| {
                ((i * 31 + s * 7) % 41) as f64 * (s as f64 + 0.5) - 10.0
            });
            let kf = extract_key_features(&x, 4).unwrap();
            let (e_mu, e_gamma) = encode(&kf, &p).unwrap();
            let (d_mu, d_gamma) = decode(&e_mu, &e_gamma, &p).unwrap();
            // open intervals in exact arithmetic; saturation can reach the bounds in floating point
            assert!(d_mu.data().iter().all(|&v| (-1.0..=1.0).contains(&v)));
            assert!(d_gamma.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            let (omega, _) = align(&d_mu, &d_gamma, &p.base).unwrap();
            assert!(omega.data().iter().all(|&w| (1.0..=2.0).contains(&w)));
        }
    }

    #[test]
    fn instance_output_is_independent_of_the_batch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = IlmParams::<f64>::init(8, &options(4), &mut rng).unwrap();
        let batch = Tensor::<f64>::from_fn(&[8, 8, 3, 3], |i| ((i * 131) % 97) as f64 / 13.0 - 3.0);
        for scheme in [
            PartitionScheme::Group(2),
            PartitionScheme::Layer,
            PartitionScheme::Instance,
        ] {
            let full = ilm_forward(&batch, scheme, &p, KeySource::Input, 1e-5).unwrap();
            for b in [0, 5] {
                let single =
                    ilm_forward(&batch.slice_outer(b, 1).unwrap(), scheme, &p, KeySource::Input, 1e-5).unwrap();
                let from_full = full.slice_outer(b, 1).unwrap();
                assert!(single.max_abs_diff(&from_full).unwrap() <= 1e-12);
            }
        }
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(count_ilm_params(32, 16, EmbedDimRule::NOver16Min1).unwrap(), (6, 64));
        assert_eq!(count_ilm_params(256, 16, EmbedDimRule::NOver16Min1).unwrap(), (48, 512));
        assert_eq!(
            count_ilm_params(256, 1, EmbedDimRule::NOver16Min1).unwrap(),
            (3 * 16 * 256, 512)
        );
        assert_eq!(count_ilm_params(64, 16, EmbedDimRule::Fixed(3)).unwrap(), (36, 128));
        assert!(count_ilm_params(24, 16, EmbedDimRule::NOver16Min1).is_err());
    }

    #[test]
    fn option_strings_round_trip() {
        for a in Activation::ALL {
            assert_eq!(a.to_string().parse::<Activation>().unwrap(), a);
        }
        assert!("sqrt".parse::<Activation>().is_err());
        for r in [EmbedDimRule::NOver16Min1, EmbedDimRule::Fixed(4)] {
            assert_eq!(r.to_string().parse::<EmbedDimRule>().unwrap(), r);
        }
        assert!("fixed:0".parse::<EmbedDimRule>().is_err());
        assert_eq!("standardized".parse::<KeySource>().unwrap(), KeySource::Standardized);
    }

    fn tape_matches_pure(scheme: PartitionScheme, source: KeySource) {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = IlmParams::<f64>::init(8, &options(2), &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn(&[2, 8, 3, 3], |i| ((i * 17) % 29) as f64 / 7.0 - 2.0);
        let pure = ilm_forward(&x, scheme, &p, source, 1e-5).unwrap();
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let vars = tape.ilm_params(&p, false);
        let y = tape
            .ilm_forward(xv, scheme, vars, p.act_mu, p.act_gamma, source, 1e-5)
            .unwrap();
        assert!(tape.value(y).max_abs_diff(&pure).unwrap() < 1e-13);
    }

    #[test]
    fn tape_forward_matches_pure_forward() {
        tape_matches_pure(PartitionScheme::Group(2), KeySource::Input);
        tape_matches_pure(PartitionScheme::Instance, KeySource::Standardized);
        tape_matches_pure(PartitionScheme::Layer, KeySource::Input);
    }

    #[test]
    fn full_layer_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let p = IlmParams::<f64>::init(8, &options(4), &mut rng).unwrap();
        let x = Tensor::<f64>::from_fn(&[2, 8, 4, 4], |_| rng.sample::<f64, _>(StandardNormal));
        let r = Tensor::<f64>::from_fn(&[2, 8, 4, 4], |_| rng.sample::<f64, _>(StandardNormal));
        for (scheme, source) in [
            (PartitionScheme::Group(2), KeySource::Input),
            (PartitionScheme::Instance, KeySource::Input),
            (PartitionScheme::Layer, KeySource::Standardized),
        ] {
            let r = r.clone();
            let build = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                let vars = IlmVars {
                    w1: v[1],
                    w2: v[2],
                    w3: v[3],
                    b_omega: v[4],
                    b_beta: v[5],
                };
                let y = tape.ilm_forward(v[0], scheme, vars, Activation::Tanh, Activation::Sigmoid, source, 1e-5)?;
                let rv = tape.constant(r.clone());
                let yr = tape.mul(y, rv)?;
                Ok(tape.sum(yr))
            };
            let values = [
                x.clone(),
                p.w1.clone(),
                p.w2.clone(),
                p.w3.clone(),
                p.base.omega.clone(),
                p.base.beta.clone(),
            ];
            let names = ["x", "w1", "w2", "w3", "b_omega", "b_beta"];
            let report = check_tape_fn(&build, &names, &values, FdOptions::default()).unwrap();
            assert!(report.passed(), "{scheme}/{source}: {report:?}");
        }
    }
}
