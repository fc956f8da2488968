//! Finite-difference verification of whole layers on random inputs.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{check_tape_fn, Backward, FdOptions, FdReport, Tape, Var};
use crate::error::{Error, Result};
use crate::ilm::{IlmOptions, IlmParams, IlmVars};
use crate::model::NormKind;
use crate::norm::PartitionScheme;
use crate::tensor::Tensor;

/// What to differentiate.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CheckTarget {
    /// Standardization alone.
    Standardize(PartitionScheme),
    /// Per-channel affine map alone.
    Rescale,
    /// A complete normalization layer (training mode for batch norm).
    Layer(NormKind),
    /// Standardization whose backward pass is deliberately wrong; the
    /// check must fail on it.
    Corrupted,
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckTarget::Standardize(s) => write!(f, "standardize:{s}"),
            CheckTarget::Rescale => f.write_str("rescale"),
            CheckTarget::Layer(k) => write!(f, "{k}"),
            CheckTarget::Corrupted => f.write_str("corrupted"),
        }
    }
}

impl FromStr for CheckTarget {
    type Err = Error;

    /// `standardize:<scheme>`, `rescale`, `corrupted`, or a norm kind such
    /// as `gn(2)` or `ilm+gn(2)`.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        match s {
            "rescale" => Ok(CheckTarget::Rescale),
            "corrupted" => Ok(CheckTarget::Corrupted),
            _ => match s.strip_prefix("standardize:") {
                Some(scheme) => Ok(CheckTarget::Standardize(scheme.parse()?)),
                None => Ok(CheckTarget::Layer(s.parse()?)),
            },
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckSpec {
    pub target: CheckTarget,
    /// `[B, C, H, W]` of the random input.
    pub shape: [usize; 4],
    pub seed: u64,
    pub ilm: IlmOptions,
    pub epsilon: f64,
    pub fd: FdOptions,
}

impl GradcheckSpec {
    pub fn new(target: CheckTarget, shape: [usize; 4], seed: u64) -> Self {
        Self {
            target,
            shape,
            seed,
            ilm: IlmOptions::default(),
            epsilon: crate::norm::DEFAULT_EPSILON,
            fd: FdOptions::default(),
        }
    }
}

/// Backward of the identity that over-reports the gradient by 1%.
struct SkewedIdentityFn;

impl Backward<f64> for SkewedIdentityFn {
    fn name(&self) -> &'static str {
        "skewed_identity"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor<f64>],
        _output: &Tensor<f64>,
        grad: &Tensor<f64>,
        _needs: &[bool],
    ) -> Vec<Option<Tensor<f64>>> {
        vec![Some(grad.scale(1.01))]
    }
}

/// Checks the target's gradients with respect to its input and every
/// parameter. The scalar loss is `Σ out ⊙ R` for a fixed random `R`; a
/// plain sum would be constant for standardized outputs.
pub fn run_gradcheck(spec: &GradcheckSpec) -> Result<FdReport> {
    let [b, c, h, w] = spec.shape;
    if b * c * h * w == 0 {
        return Err(Error::Shape(format!("empty input shape {:?}", spec.shape)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut normal = |shape: &[usize], mean: f64, std: f64| {
        Tensor::<f64>::from_fn(shape, |_| mean + std * rng.sample::<f64, _>(StandardNormal))
    };
    let x = normal(&spec.shape, 0.0, 1.0);
    let r = normal(&spec.shape, 0.0, 1.0);
    let omega = normal(&[c], 1.0, 0.2);
    let beta = normal(&[c], 0.0, 0.2);
    let eps = spec.epsilon;

    let mut names = vec!["x".to_string()];
    let mut values = vec![x];
    let target = spec.target;
    let ilm = spec.ilm;
    match target {
        CheckTarget::Standardize(_) | CheckTarget::Corrupted => {}
        CheckTarget::Rescale | CheckTarget::Layer(_) => {
            names.extend(["omega".to_string(), "beta".to_string()]);
            values.extend([omega, beta]);
        }
    }
    let layer_scheme = match target {
        CheckTarget::Layer(kind) => Some(kind.scheme.fit_channels(c)?),
        _ => None,
    };
    if let CheckTarget::Layer(kind) = target {
        if kind.ilm {
            let p = IlmParams::<f64>::init(c, &ilm, &mut rng)?;
            names.extend(["w1", "w2", "w3"].map(String::from));
            values.extend([p.w1, p.w2, p.w3]);
        }
    }

    let build = move |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
        let out = match target {
            CheckTarget::Standardize(scheme) => tape.standardize(v[0], scheme, eps)?.0,
            CheckTarget::Corrupted => {
                let (xs, _) = tape.standardize(v[0], PartitionScheme::Layer, eps)?;
                let value = tape.value(xs).clone();
                tape.record(SkewedIdentityFn, &[xs], value)
            }
            CheckTarget::Rescale => tape.channel_affine(v[0], v[1], v[2])?,
            CheckTarget::Layer(kind) => {
                let scheme = layer_scheme.expect("layer scheme");
                if kind.ilm {
                    let vars = IlmVars {
                        w1: v[3],
                        w2: v[4],
                        w3: v[5],
                        b_omega: v[1],
                        b_beta: v[2],
                    };
                    tape.ilm_forward(v[0], scheme, vars, ilm.act_mu, ilm.act_gamma, ilm.key_source, eps)?
                } else {
                    let (xs, _) = tape.standardize(v[0], scheme, eps)?;
                    tape.channel_affine(xs, v[1], v[2])?
                }
            }
        };
        let rv = tape.constant(r.clone());
        let prod = tape.mul(out, rv)?;
        Ok(tape.sum(prod))
    };
    let name_refs: Vec<&str> = names.iter().map(String::as_str).collect();
    check_tape_fn(&build, &name_refs, &values, spec.fd)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ilm4() -> IlmOptions {
        IlmOptions {
            key_group_size: 4,
            ..IlmOptions::default()
        }
    }

    #[test]
    fn targets_parse_and_print() {
        for s in ["standardize:gn(2)", "rescale", "corrupted", "ilm+gn(2)", "bn", "ilm+in"] {
            assert_eq!(s.parse::<CheckTarget>().unwrap().to_string(), s);
        }
        assert!("standardize:xx".parse::<CheckTarget>().is_err());
    }

    #[test]
    fn layers_pass() {
        for t in [
            "standardize:gn(2)",
            "standardize:bn",
            "rescale",
            "gn(2)",
            "bn",
            "ilm+gn(2)",
            "ilm+in",
            "ilm+ln",
        ] {
            let mut spec = GradcheckSpec::new(t.parse().unwrap(), [2, 8, 4, 4], 7);
            spec.ilm = ilm4();
            let report = run_gradcheck(&spec).unwrap();
            assert!(report.passed(), "{t}: {report:?}");
        }
    }

    #[test]
    fn corrupted_backward_fails() {
        let report = run_gradcheck(&GradcheckSpec::new(CheckTarget::Corrupted, [2, 8, 4, 4], 7)).unwrap();
        assert!(!report.passed());
        assert!(report.max_rel_error() > 1e-3);
    }
}
