//! Standardization and rescaling, and the batch / layer / instance / group
//! normalizers built from them.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Backward, Tape, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{PartitionLayout, Tensor};

pub const DEFAULT_EPSILON: f64 = 1e-5;
pub const DEFAULT_BN_MOMENTUM: f64 = 0.1;

/// Which elements of an NCHW tensor share a mean and variance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PartitionScheme {
    /// Per channel, across every instance of the batch.
    Batch,
    /// All channels of one instance.
    Layer,
    /// One channel of one instance.
    Instance,
    /// `num_groups` contiguous channel blocks per instance.
    Group(usize),
}

impl PartitionScheme {
    /// True for schemes whose statistics never mix instances.
    pub fn is_instance_level(self) -> bool {
        !matches!(self, PartitionScheme::Batch)
    }

    pub fn layout(self, shape: &[usize]) -> Result<PartitionLayout> {
        let channels = match *shape {
            [_, c, _, _] => c,
            _ => return Err(Error::Shape(format!("expected NCHW tensor, got {shape:?}"))),
        };
        match self {
            PartitionScheme::Batch => PartitionLayout::per_channel(shape),
            PartitionScheme::Layer => PartitionLayout::grouped(shape, 1),
            PartitionScheme::Instance => PartitionLayout::grouped(shape, channels),
            PartitionScheme::Group(g) => PartitionLayout::grouped(shape, g),
        }
    }

    /// Resolves a group count against a concrete channel count: the count
    /// is capped at `channels` and must then divide it.
    pub fn fit_channels(self, channels: usize) -> Result<Self> {
        match self {
            PartitionScheme::Group(g) => {
                let g = g.min(channels);
                if g == 0 || !channels.is_multiple_of(g) {
                    return Err(Error::Partition(format!(
                        "group count {g} does not divide {channels} channels"
                    )));
                }
                Ok(PartitionScheme::Group(g))
            }
            other => Ok(other),
        }
    }
}

impl fmt::Display for PartitionScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartitionScheme::Batch => f.write_str("bn"),
            PartitionScheme::Layer => f.write_str("ln"),
            PartitionScheme::Instance => f.write_str("in"),
            PartitionScheme::Group(g) => write!(f, "gn({g})"),
        }
    }
}

impl FromStr for PartitionScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "bn" | "batch" => return Ok(PartitionScheme::Batch),
            "ln" | "layer" => return Ok(PartitionScheme::Layer),
            "in" | "instance" => return Ok(PartitionScheme::Instance),
            _ => {}
        }
        let groups = s
            .strip_prefix("gn(")
            .and_then(|r| r.strip_suffix(')'))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown normalization `{s}`")))?;
        let g: usize = groups
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad group count in `{s}`")))?;
        if g == 0 {
            return Err(Error::InvalidArgument("group count must be positive".into()));
        }
        Ok(PartitionScheme::Group(g))
    }
}

/// Per-partition statistics used by one standardization.
#[derive(Clone, Debug, PartialEq)]
pub struct NormStats<T> {
    pub mu: Tensor<T>,
    pub gamma: Tensor<T>,
    pub epsilon: f64,
}

/// Per-channel rescaling weights.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineParams<T> {
    pub omega: Tensor<T>,
    pub beta: Tensor<T>,
}

impl<T: Scalar> AffineParams<T> {
    pub fn new(omega: Tensor<T>, beta: Tensor<T>) -> Result<Self> {
        if omega.rank() != 1 || omega.shape() != beta.shape() {
            return Err(Error::Shape(format!(
                "affine weights must be equal-length vectors, got {:?} and {:?}",
                omega.shape(),
                beta.shape()
            )));
        }
        Ok(Self { omega, beta })
    }

    /// `omega = 1`, `beta = 0`.
    pub fn identity(channels: usize) -> Self {
        Self {
            omega: Tensor::ones(&[channels]),
            beta: Tensor::zeros(&[channels]),
        }
    }

    pub fn channels(&self) -> usize {
        self.omega.numel()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Exponential moving averages of batch statistics for evaluation-mode
/// batch normalization.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub running_mu: Tensor<T>,
    pub running_gamma: Tensor<T>,
    pub momentum: f64,
    pub initialized: bool,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize, momentum: f64) -> Result<Self> {
        if !(momentum > 0.0 && momentum < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "running-stat momentum {momentum} outside (0, 1)"
            )));
        }
        Ok(Self {
            running_mu: Tensor::zeros(&[channels]),
            running_gamma: Tensor::ones(&[channels]),
            momentum,
            initialized: false,
        })
    }

    /// `new = (1 − m)·old + m·batch`; the first update copies the batch.
    pub fn update(&mut self, batch_mu: &[f64], batch_gamma: &[f64]) {
        let m = self.momentum;
        let blend = |old: &mut Tensor<T>, new: &[f64], init: bool| {
            for (o, &n) in old.data_mut().iter_mut().zip(new) {
                *o = if init {
                    T::from_f64((1.0 - m) * o.as_f64() + m * n)
                } else {
                    T::from_f64(n)
                };
            }
        };
        blend(&mut self.running_mu, batch_mu, self.initialized);
        blend(&mut self.running_gamma, batch_gamma, self.initialized);
        self.initialized = true;
    }
}

fn check_epsilon(epsilon: f64) -> Result<()> {
    if epsilon > 0.0 && epsilon.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!(
            "epsilon must be positive, got {epsilon}"
        )))
    }
}

/// `xs = (x − μ) / sqrt(γ + ε)` with `μ`, `γ` taken over each partition.
pub fn standardize<T: Scalar>(
    x: &Tensor<T>,
    scheme: PartitionScheme,
    epsilon: f64,
) -> Result<(Tensor<T>, NormStats<T>)> {
    check_epsilon(epsilon)?;
    let layout = scheme.layout(x.shape())?;
    let (mean, var) = layout.moments(x.data());
    let xs = apply_standardization(x, &layout, &mean, &var, epsilon);
    let stats = NormStats {
        mu: layout.stat_tensor(&mean),
        gamma: layout.stat_tensor(&var),
        epsilon,
    };
    Ok((xs, stats))
}

fn apply_standardization<T: Scalar>(
    x: &Tensor<T>,
    layout: &PartitionLayout,
    mean: &[f64],
    var: &[f64],
    epsilon: f64,
) -> Tensor<T> {
    let denom: Vec<f64> = var.iter().map(|&v| (v + epsilon).sqrt()).collect();
    let mut out = Vec::with_capacity(x.numel());
    for (plane, &p) in x.data().chunks_exact(layout.plane_len).zip(&layout.part_of_plane) {
        let (m, d) = (mean[p], denom[p]);
        out.extend(plane.iter().map(|&v| T::from_f64((v.as_f64() - m) / d)));
    }
    Tensor::from_parts(x.shape().to_vec(), out)
}

/// `x_n[b, c, h, w] = omega[c]·xs[b, c, h, w] + beta[c]`.
pub fn rescale<T: Scalar>(xs: &Tensor<T>, params: &AffineParams<T>) -> Result<Tensor<T>> {
    channel_affine(xs, &params.omega, &params.beta)
}

/// Channel-wise affine map; `omega` and `beta` are either `[C]` (shared
/// across the batch) or `[B, C]` (one set per instance).
pub fn channel_affine<T: Scalar>(x: &Tensor<T>, omega: &Tensor<T>, beta: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c, h, w) = x.dims4()?;
    let per_instance = affine_layout(b, c, omega, beta)?;
    let hw = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for (q, plane) in x.data().chunks_exact(hw).enumerate() {
        let k = if per_instance { q } else { q % c };
        let (wk, bk) = (omega.data()[k], beta.data()[k]);
        out.extend(plane.iter().map(|&v| wk * v + bk));
    }
    Ok(Tensor::from_parts(x.shape().to_vec(), out))
}

/// Validates affine shapes; returns whether they are per instance.
fn affine_layout<T: Scalar>(b: usize, c: usize, omega: &Tensor<T>, beta: &Tensor<T>) -> Result<bool> {
    if omega.shape() != beta.shape() {
        return Err(Error::Shape(format!(
            "omega {:?} and beta {:?} differ",
            omega.shape(),
            beta.shape()
        )));
    }
    match *omega.shape() {
        [n] if n == c => Ok(false),
        [nb, n] if nb == b && n == c => Ok(true),
        _ => Err(Error::Shape(format!(
            "affine parameters {:?} do not match {c} channels (batch {b})",
            omega.shape()
        ))),
    }
}

/// Full normalization layer: standardize under `scheme`, then rescale.
///
/// Batch normalization in evaluation mode standardizes with the running
/// statistics; in training mode it updates them when given. Instance-level
/// schemes behave identically in both modes.
pub fn norm_layer_forward<T: Scalar>(
    x: &Tensor<T>,
    scheme: PartitionScheme,
    params: &AffineParams<T>,
    mode: Mode,
    running: Option<&mut RunningStats<T>>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    check_epsilon(epsilon)?;
    let xs = match (scheme, mode) {
        (PartitionScheme::Batch, Mode::Eval) => {
            let stats = running.ok_or(Error::UninitializedRunningStats)?;
            standardize_fixed(x, &stats.running_mu, &stats.running_gamma, epsilon)?
        }
        _ => {
            let layout = scheme.layout(x.shape())?;
            let (mean, var) = layout.moments(x.data());
            if let (PartitionScheme::Batch, Some(r)) = (scheme, running) {
                r.update(&mean, &var);
            }
            apply_standardization(x, &layout, &mean, &var, epsilon)
        }
    };
    rescale(&xs, params)
}

/// Standardizes each channel with externally supplied statistics.
pub fn standardize_fixed<T: Scalar>(
    x: &Tensor<T>,
    mu: &Tensor<T>,
    gamma: &Tensor<T>,
    epsilon: f64,
) -> Result<Tensor<T>> {
    let (scale, shift) = fixed_affine(x, mu, gamma, epsilon)?;
    channel_affine(x, &scale, &shift)
}

fn fixed_affine<T: Scalar>(
    x: &Tensor<T>,
    mu: &Tensor<T>,
    gamma: &Tensor<T>,
    epsilon: f64,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, c, _, _) = x.dims4()?;
    if mu.shape() != [c] || gamma.shape() != [c] {
        return Err(Error::Shape(format!(
            "running statistics {:?}/{:?} do not match {c} channels",
            mu.shape(),
            gamma.shape()
        )));
    }
    let inv: Vec<f64> = gamma
        .data()
        .iter()
        .map(|g| 1.0 / (g.as_f64() + epsilon).sqrt())
        .collect();
    let scale = Tensor::from_parts(vec![c], inv.iter().map(|&v| T::from_f64(v)).collect());
    let shift = Tensor::from_parts(
        vec![c],
        mu.data()
            .iter()
            .zip(&inv)
            .map(|(m, &v)| T::from_f64(-m.as_f64() * v))
            .collect(),
    );
    Ok((scale, shift))
}

struct StandardizeFn {
    layout: PartitionLayout,
    denom: Vec<f64>,
}

impl<T: Scalar> Backward<T> for StandardizeFn {
    fn name(&self) -> &'static str {
        "standardize"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        // dx = (g − mean(g) − xs·mean(g·xs)) / sqrt(γ + ε), per partition
        let (g, xs) = (grad.data(), output.data());
        let n = self.layout.part_len as f64;
        let mean_g: Vec<f64> = self
            .layout
            .reduce(|i| g[i].as_f64())
            .into_iter()
            .map(|s| s / n)
            .collect();
        let mean_gx: Vec<f64> = self
            .layout
            .reduce(|i| g[i].as_f64() * xs[i].as_f64())
            .into_iter()
            .map(|s| s / n)
            .collect();
        let plane = self.layout.plane_len;
        let mut dx = Vec::with_capacity(g.len());
        for (q, &p) in self.layout.part_of_plane.iter().enumerate() {
            let (mg, mgx, d) = (mean_g[p], mean_gx[p], self.denom[p]);
            for i in q * plane..(q + 1) * plane {
                dx.push(T::from_f64((g[i].as_f64() - mg - xs[i].as_f64() * mgx) / d));
            }
        }
        vec![Some(Tensor::from_parts(grad.shape().to_vec(), dx))]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Moment {
    Mean,
    Variance,
}

struct MomentFn {
    which: Moment,
    layout: PartitionLayout,
    mean: Vec<f64>,
}

impl<T: Scalar> Backward<T> for MomentFn {
    fn name(&self) -> &'static str {
        match self.which {
            Moment::Mean => "partition_mean",
            Moment::Variance => "partition_var",
        }
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let x = inputs[0].data();
        let n = self.layout.part_len as f64;
        let plane = self.layout.plane_len;
        let mut dx = Vec::with_capacity(x.len());
        for (q, &p) in self.layout.part_of_plane.iter().enumerate() {
            let gp = grad.data()[p].as_f64();
            for &v in &x[q * plane..(q + 1) * plane] {
                dx.push(T::from_f64(match self.which {
                    Moment::Mean => gp / n,
                    Moment::Variance => gp * 2.0 * (v.as_f64() - self.mean[p]) / n,
                }));
            }
        }
        vec![Some(Tensor::from_parts(inputs[0].shape().to_vec(), dx))]
    }
}

/// Channel-wise affine map; the parameter gradients are reduced over the
/// axes the parameters are broadcast along.
struct ChannelAffineFn {
    per_instance: bool,
}

impl<T: Scalar> Backward<T> for ChannelAffineFn {
    fn name(&self) -> &'static str {
        "channel_affine"
    }

    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        _output: &Tensor<T>,
        grad: &Tensor<T>,
        needs: &[bool],
    ) -> Vec<Option<Tensor<T>>> {
        let (x, omega) = (inputs[0], inputs[1]);
        let (_, c, h, w) = x.dims4().expect("NCHW");
        let hw = h * w;
        let slot = |q: usize| if self.per_instance { q } else { q % c };

        let gx = needs[0].then(|| {
            let mut out = Vec::with_capacity(x.numel());
            for (q, g) in grad.data().chunks_exact(hw).enumerate() {
                let wk = omega.data()[slot(q)];
                out.extend(g.iter().map(|&v| v * wk));
            }
            Tensor::from_parts(x.shape().to_vec(), out)
        });
        let (mut d_omega, mut d_beta) = (vec![0.0f64; omega.numel()], vec![0.0f64; omega.numel()]);
        if needs[1] || needs[2] {
            for (q, (g, xv)) in grad.data().chunks_exact(hw).zip(x.data().chunks_exact(hw)).enumerate() {
                let k = slot(q);
                for (&gv, &xv) in g.iter().zip(xv) {
                    d_omega[k] += gv.as_f64() * xv.as_f64();
                    d_beta[k] += gv.as_f64();
                }
            }
        }
        let to_tensor =
            |v: Vec<f64>| Tensor::from_parts(omega.shape().to_vec(), v.into_iter().map(T::from_f64).collect());
        vec![
            gx,
            needs[1].then(|| to_tensor(d_omega)),
            needs[2].then(|| to_tensor(d_beta)),
        ]
    }
}

impl<T: Scalar> Tape<T> {
    /// Recorded [`standardize`].
    pub fn standardize(&mut self, x: Var, scheme: PartitionScheme, epsilon: f64) -> Result<(Var, NormStats<T>)> {
        check_epsilon(epsilon)?;
        let xv = self.value(x);
        let layout = scheme.layout(xv.shape())?;
        let (mean, var) = layout.moments(xv.data());
        let xs = apply_standardization(xv, &layout, &mean, &var, epsilon);
        let stats = NormStats {
            mu: layout.stat_tensor(&mean),
            gamma: layout.stat_tensor(&var),
            epsilon,
        };
        let denom = var.iter().map(|&v| (v + epsilon).sqrt()).collect();
        let out = self.record(StandardizeFn { layout, denom }, &[x], xs);
        Ok((out, stats))
    }

    /// Per-partition mean or population variance of `x`, shaped like the
    /// partition statistics (`[B, P]` instance-level, `[C]` batch).
    pub fn partition_moment(&mut self, x: Var, scheme: PartitionScheme, which: Moment) -> Result<Var> {
        let xv = self.value(x);
        let layout = scheme.layout(xv.shape())?;
        let (mean, var) = layout.moments(xv.data());
        let out = layout.stat_tensor(match which {
            Moment::Mean => &mean,
            Moment::Variance => &var,
        });
        Ok(self.record(MomentFn { which, layout, mean }, &[x], out))
    }

    /// Recorded [`channel_affine`].
    pub fn channel_affine(&mut self, x: Var, omega: Var, beta: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(omega), self.value(beta));
        let (b, c, _, _) = xv.dims4()?;
        let per_instance = affine_layout(b, c, wv, bv)?;
        let out = channel_affine(xv, wv, bv)?;
        Ok(self.record(ChannelAffineFn { per_instance }, &[x, omega, beta], out))
    }

    /// Standardization with fixed per-channel statistics (evaluation-mode
    /// batch normalization). Gradients flow to `x` only.
    pub fn standardize_fixed(&mut self, x: Var, mu: &Tensor<T>, gamma: &Tensor<T>, epsilon: f64) -> Result<Var> {
        check_epsilon(epsilon)?;
        let (scale, shift) = fixed_affine(self.value(x), mu, gamma, epsilon)?;
        let s = self.constant(scale);
        let b = self.constant(shift);
        self.channel_affine(x, s, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{check_tape_fn, FdOptions};

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn constant_input_standardizes_to_zero() {
        let x = Tensor::<f64>::full(&[2, 4, 3, 3], -7.25);
        for scheme in [
            PartitionScheme::Batch,
            PartitionScheme::Layer,
            PartitionScheme::Instance,
            PartitionScheme::Group(2),
        ] {
            let (xs, stats) = standardize(&x, scheme, DEFAULT_EPSILON).unwrap();
            assert!(xs.data().iter().all(|&v| v == 0.0), "{scheme}");
            assert!(stats.gamma.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn four_value_group() {
        // one group [1, 2, 3, 4]: mean 2.5, population variance 1.25
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let (xs, stats) = standardize(&x, PartitionScheme::Instance, 1e-5).unwrap();
        assert_eq!(stats.mu.data(), &[2.5]);
        assert_eq!(stats.gamma.data(), &[1.25]);
        let eps_free = [-1.5, -0.5, 0.5, 1.5].map(|v: f64| v / 1.25f64.sqrt());
        for (a, b) in xs.data().iter().zip(eps_free) {
            assert!((a - b).abs() < 5e-5);
        }
        let expected = [-1.34164, -0.44721, 0.44721, 1.34164];
        for (a, b) in xs.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn already_standardized_input_is_a_near_fixed_point() {
        let x = t(&[1, 1, 1, 4], &[-1.0, -1.0, 1.0, 1.0]);
        let eps = 1e-5;
        let (xs, _) = standardize(&x, PartitionScheme::Layer, eps).unwrap();
        for (a, b) in xs.data().iter().zip(x.data()) {
            assert!(((a - b) / b).abs() <= eps / 2.0);
        }
    }

    #[test]
    fn invalid_arguments() {
        let x = Tensor::<f64>::zeros(&[1, 6, 2, 2]);
        assert!(matches!(
            standardize(&x, PartitionScheme::Group(4), 1e-5),
            Err(Error::Partition(_))
        ));
        assert!(standardize(&x, PartitionScheme::Layer, 0.0).is_err());
        assert!(standardize(&Tensor::<f64>::zeros(&[6, 4]), PartitionScheme::Layer, 1e-5).is_err());
    }

    #[test]
    fn rescale_examples() {
        let xs = Tensor::<f64>::from_fn(&[2, 3, 2, 2], |i| i as f64 * 0.1 - 1.0);
        let id = AffineParams::identity(3);
        assert_eq!(rescale(&xs, &id).unwrap(), xs);

        let zeros = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let p = AffineParams::new(t(&[3], &[2.0, 3.0, 4.0]), t(&[3], &[-1.0, 0.5, 9.0])).unwrap();
        let out = rescale(&zeros, &p).unwrap();
        assert_eq!(&out.data()[..4], &[-1.0; 4]);
        assert_eq!(&out.data()[8..], &[9.0; 4]);

        let p = AffineParams::new(t(&[1], &[2.0]), t(&[1], &[-1.0])).unwrap();
        let out = rescale(&t(&[1, 1, 1, 1], &[0.5]), &p).unwrap();
        assert_eq!(out.data(), &[0.0]);

        assert!(matches!(rescale(&xs, &p), Err(Error::Shape(_))));
    }

    #[test]
    fn instance_norm_example() {
        let x = t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let out = norm_layer_forward(
            &x,
            PartitionScheme::Instance,
            &AffineParams::identity(1),
            Mode::Train,
            None,
            1e-5,
        )
        .unwrap();
        let expected = [-1.34163, -0.44721, 0.44721, 1.34163];
        for (a, b) in out.data().iter().zip(expected) {
            assert!((a - b).abs() < 2e-5);
        }
    }

    #[test]
    fn batch_norm_train_on_standard_channels_is_affine() {
        // each channel over (B, H, W) has mean 0 and variance 1
        let x = t(&[2, 2, 1, 2], &[1.0, -1.0, 1.0, 1.0, -1.0, 1.0, -1.0, -1.0]);
        let p = AffineParams::new(t(&[2], &[3.0, 0.5]), t(&[2], &[1.0, -2.0])).unwrap();
        let out = norm_layer_forward(&x, PartitionScheme::Batch, &p, Mode::Train, None, 1e-5).unwrap();
        let direct = rescale(&x, &p).unwrap();
        assert!(out.max_abs_diff(&direct).unwrap() < 1e-4);
    }

    #[test]
    fn batch_norm_eval_requires_running_stats() {
        let x = Tensor::<f64>::ones(&[2, 2, 2, 2]);
        let p = AffineParams::identity(2);
        assert!(matches!(
            norm_layer_forward(&x, PartitionScheme::Batch, &p, Mode::Eval, None, 1e-5),
            Err(Error::UninitializedRunningStats)
        ));
        let mut rs = RunningStats::new(2, 0.1).unwrap();
        norm_layer_forward(&x, PartitionScheme::Batch, &p, Mode::Train, Some(&mut rs), 1e-5).unwrap();
        assert!(rs.initialized);
        assert!(norm_layer_forward(&x, PartitionScheme::Batch, &p, Mode::Eval, Some(&mut rs), 1e-5).is_ok());
    }

    #[test]
    fn running_stats_follow_the_moving_average() {
        let mut rs = RunningStats::<f64>::new(1, 0.1).unwrap();
        rs.update(&[2.0], &[4.0]);
        assert_eq!(rs.running_mu.data(), &[2.0]);
        rs.update(&[12.0], &[1.0]);
        assert!((rs.running_mu.data()[0] - 3.0).abs() < 1e-12);
        assert!((rs.running_gamma.data()[0] - 3.7).abs() < 1e-12);
        assert!(RunningStats::<f64>::new(1, 1.0).is_err());
    }

    #[test]
    fn eval_mode_uses_running_statistics() {
        let x = Tensor::<f64>::from_fn(&[4, 2, 2, 2], |i| (i as f64 * 0.7).sin() * 3.0 + 1.0);
        let p = AffineParams::identity(2);
        let mut rs = RunningStats::new(2, 0.1).unwrap();
        let train = norm_layer_forward(&x, PartitionScheme::Batch, &p, Mode::Train, Some(&mut rs), 1e-5).unwrap();
        // after one update the running stats equal the batch stats
        let eval = norm_layer_forward(&x, PartitionScheme::Batch, &p, Mode::Eval, Some(&mut rs), 1e-5).unwrap();
        assert!(train.max_abs_diff(&eval).unwrap() < 1e-12);
        let shifted = x.map(|v| v + 5.0);
        let eval2 = norm_layer_forward(&shifted, PartitionScheme::Batch, &p, Mode::Eval, Some(&mut rs), 1e-5).unwrap();
        assert!(eval2.max_abs_diff(&eval).unwrap() > 1.0);
    }

    #[test]
    fn scheme_parsing_round_trips() {
        for s in ["bn", "ln", "in", "gn(32)"] {
            let scheme: PartitionScheme = s.parse().unwrap();
            assert_eq!(scheme.to_string(), s);
        }
        assert!("gn(0)".parse::<PartitionScheme>().is_err());
        assert!("gn32".parse::<PartitionScheme>().is_err());
        assert_eq!(
            PartitionScheme::Group(32).fit_channels(16).unwrap(),
            PartitionScheme::Group(16)
        );
        assert!(PartitionScheme::Group(3).fit_channels(16).is_err());
    }

    #[test]
    fn tape_forward_matches_pure_functions() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 3, 3], |i| (i as f64 * 1.3).cos() * 2.0);
        let omega = t(&[4], &[1.0, 0.5, 2.0, -1.0]);
        let beta = t(&[4], &[0.0, 0.1, -0.2, 0.3]);
        for scheme in [
            PartitionScheme::Batch,
            PartitionScheme::Group(2),
            PartitionScheme::Instance,
        ] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let (xs, _) = tape.standardize(xv, scheme, 1e-5).unwrap();
            let w = tape.constant(omega.clone());
            let b = tape.constant(beta.clone());
            let y = tape.channel_affine(xs, w, b).unwrap();
            let pure = norm_layer_forward(
                &x,
                scheme,
                &AffineParams::new(omega.clone(), beta.clone()).unwrap(),
                Mode::Train,
                None,
                1e-5,
            )
            .unwrap();
            assert_eq!(tape.value(y), &pure);
        }
    }

    fn weighted_sum(tape: &mut Tape<f64>, y: Var, seed: usize) -> Result<Var> {
        let shape = tape.value(y).shape().to_vec();
        let r = Tensor::from_fn(&shape, |i| ((i * 7919 + seed * 31) % 23) as f64 / 11.0 - 1.0);
        let r = tape.constant(r);
        let p = tape.mul(y, r)?;
        Ok(tape.sum(p))
    }

    #[test]
    fn standardize_gradient_matches_finite_differences() {
        let x = Tensor::<f64>::from_fn(&[1, 4, 2, 2], |i| ((i * 37) % 13) as f64 / 5.0 - 1.0);
        for scheme in [
            PartitionScheme::Layer,
            PartitionScheme::Instance,
            PartitionScheme::Group(2),
            PartitionScheme::Batch,
        ] {
            let build = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
                let (xs, _) = tape.standardize(v[0], scheme, 1e-5)?;
                weighted_sum(tape, xs, 3)
            };
            let report = check_tape_fn(&build, &["x"], std::slice::from_ref(&x), FdOptions::default()).unwrap();
            assert!(report.passed(), "{scheme}: {report:?}");
        }
    }

    #[test]
    fn moments_and_affine_gradients_match_finite_differences() {
        let x = Tensor::<f64>::from_fn(&[2, 4, 2, 2], |i| ((i * 53) % 17) as f64 / 6.0 - 1.0);
        let w = Tensor::<f64>::from_fn(&[2, 4], |i| 0.5 + i as f64 * 0.1);
        let b = Tensor::<f64>::from_fn(&[4], |i| i as f64 * 0.2 - 0.3);
        let build = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let m = tape.partition_moment(v[0], PartitionScheme::Group(2), Moment::Mean)?;
            let s = tape.partition_moment(v[0], PartitionScheme::Group(2), Moment::Variance)?;
            let ms = tape.mul(m, s)?;
            let a = tape.sum(ms);
            let bb = tape.reshape(v[2], &[1, 4])?;
            let w2 = tape.add(v[1], bb)?;
            let y = tape.channel_affine(v[0], w2, v[1])?;
            let c = weighted_sum(tape, y, 5)?;
            tape.add(a, c)
        };
        let report = check_tape_fn(&build, &["x", "w", "b"], &[x, w, b], FdOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
