//! Central-difference verification of analytic gradients.

use super::tape::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdOptions {
    pub step: f64,
    pub tol_rel: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol_rel: 1e-4,
        }
    }
}

/// A parameter under test with its analytic gradient.
#[derive(Clone, Debug)]
pub struct Probe {
    pub name: String,
    pub value: Tensor<f64>,
    pub grad: Tensor<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamReport {
    pub name: String,
    pub max_rel_error: f64,
    /// Flat index of the worst coordinate.
    pub worst_index: Option<usize>,
    pub checked: usize,
    /// Coordinates sitting on a non-differentiable point, excluded from
    /// the pass/fail decision.
    pub kinks: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdReport {
    pub params: Vec<ParamReport>,
    pub tol_rel: f64,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.max_rel_error <= self.tol_rel)
    }

    pub fn worst(&self) -> Option<&ParamReport> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }

    pub fn max_rel_error(&self) -> f64 {
        self.worst().map_or(0.0, |p| p.max_rel_error)
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares each probe's analytic gradient with the central difference
/// `(f(θ+h) − f(θ−h)) / 2h`, one coordinate at a time.
///
/// A coordinate whose one-sided slopes disagree by an amount that does
/// not shrink with the step is reported as a kink and skipped.
pub fn finite_diff_check<F>(mut f: F, probes: &[Probe], opts: FdOptions) -> Result<FdReport>
where
    F: FnMut(&[Tensor<f64>]) -> Result<f64>,
{
    for p in probes {
        p.value.expect_same_shape(&p.grad)?;
    }
    let mut values: Vec<Tensor<f64>> = probes.iter().map(|p| p.value.clone()).collect();
    let base = f(&values)?;
    let again = f(&values)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Autodiff(format!(
            "function is not deterministic: {base} vs {again}"
        )));
    }

    let h = opts.step;
    let mut reports = Vec::with_capacity(probes.len());
    for (pi, probe) in probes.iter().enumerate() {
        let mut report = ParamReport {
            name: probe.name.clone(),
            max_rel_error: 0.0,
            worst_index: None,
            checked: 0,
            kinks: Vec::new(),
        };
        for i in 0..probe.value.numel() {
            let orig = probe.value.data()[i];
            let mut eval_at = |x: f64, values: &mut [Tensor<f64>]| -> Result<f64> {
                values[pi].data_mut()[i] = x;
                let r = f(values);
                values[pi].data_mut()[i] = orig;
                r
            };
            let plus = eval_at(orig + h, &mut values)?;
            let minus = eval_at(orig - h, &mut values)?;
            let numeric = (plus - minus) / (2.0 * h);

            let one_sided_gap = ((plus - base) / h - (base - minus) / h).abs();
            if one_sided_gap > opts.tol_rel * numeric.abs().max(1.0) {
                let h2 = h / 10.0;
                let p2 = eval_at(orig + h2, &mut values)?;
                let m2 = eval_at(orig - h2, &mut values)?;
                let gap2 = ((p2 - base) / h2 - (base - m2) / h2).abs();
                if gap2 > 0.5 * one_sided_gap {
                    report.kinks.push(i);
                    continue;
                }
            }

            let err = relative_error(probe.grad.data()[i], numeric);
            report.checked += 1;
            if report.worst_index.is_none() || err > report.max_rel_error {
                report.max_rel_error = err;
                report.worst_index = Some(i);
            }
        }
        reports.push(report);
    }
    Ok(FdReport {
        params: reports,
        tol_rel: opts.tol_rel,
    })
}

/// Builds the scalar loss on a fresh tape from leaves holding `values`.
pub type LossBuilder<'a> = dyn Fn(&mut Tape<f64>, &[Var]) -> Result<Var> + 'a;

/// Analytic gradients of `build` via the tape, for every entry of `values`.
pub fn tape_gradients(build: &LossBuilder<'_>, values: &[Tensor<f64>]) -> Result<(f64, Vec<Tensor<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = values.iter().map(|v| tape.param(v.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let value = tape.value(loss).item()?;
    tape.backward(loss)?;
    let grads = vars
        .iter()
        .zip(values)
        .map(|(&v, t)| tape.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, grads))
}

/// Gradient check of a loss expressed as a tape computation.
pub fn check_tape_fn(
    build: &LossBuilder<'_>,
    names: &[&str],
    values: &[Tensor<f64>],
    opts: FdOptions,
) -> Result<FdReport> {
    if names.len() != values.len() {
        return Err(Error::InvalidArgument("one name per parameter required".into()));
    }
    let (_, grads) = tape_gradients(build, values)?;
    let probes: Vec<Probe> = names
        .iter()
        .zip(values)
        .zip(grads)
        .map(|((n, v), g)| Probe {
            name: n.to_string(),
            value: v.clone(),
            grad: g,
        })
        .collect();
    finite_diff_check(
        |vals| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|v| tape.constant(v.clone())).collect();
            let loss = build(&mut tape, &vars)?;
            tape.value(loss).item()
        },
        &probes,
        opts,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn quadratic_passes() {
        let theta = 3.0;
        let probe = Probe {
            name: "theta".into(),
            value: t(&[1], &[theta]),
            grad: t(&[1], &[2.0 * theta]),
        };
        let report =
            finite_diff_check(|v| Ok(v[0].data()[0] * v[0].data()[0]), &[probe], FdOptions::default()).unwrap();
        assert!(report.passed());
        assert!(report.max_rel_error() < 1e-9);
    }

    #[test]
    fn wrong_gradient_fails() {
        let probe = Probe {
            name: "theta".into(),
            value: t(&[1], &[3.0]),
            grad: t(&[1], &[6.1]),
        };
        let report = finite_diff_check(|v| Ok(v[0].data()[0].powi(2)), &[probe], FdOptions::default()).unwrap();
        assert!(!report.passed());
        assert_eq!(report.worst().unwrap().worst_index, Some(0));
    }

    #[test]
    fn relu_kink_is_excluded() {
        let build = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let r = tape.relu(v[0])?;
            Ok(tape.sum(r))
        };
        let report = check_tape_fn(&build, &["x"], &[t(&[3], &[0.0, 0.7, -0.4])], FdOptions::default()).unwrap();
        assert!(report.passed());
        assert_eq!(report.params[0].kinks, vec![0]);
        assert_eq!(report.params[0].checked, 2);
    }

    #[test]
    fn nondeterministic_function_is_detected() {
        let mut calls = 0.0;
        let probe = Probe {
            name: "x".into(),
            value: t(&[1], &[1.0]),
            grad: t(&[1], &[1.0]),
        };
        let err = finite_diff_check(
            |v| {
                calls += 1.0;
                Ok(v[0].data()[0] + calls)
            },
            &[probe],
            FdOptions::default(),
        );
        assert!(matches!(err, Err(Error::Autodiff(_))));
    }

    #[test]
    fn smooth_primitives_pass() {
        let build = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let ab = tape.matmul(v[0], v[1])?;
            let th = tape.tanh(ab)?;
            let sg = tape.sigmoid(v[2])?;
            let q = tape.div(th, sg)?;
            let sq = tape.mul(q, q)?;
            let sqrt_in = tape.add(sq, v[2])?;
            let r = tape.sqrt(sqrt_in)?;
            let tr = tape.transpose(r)?;
            let s = tape.sub(tr, v[3])?;
            Ok(tape.mean(s))
        };
        let a = t(&[2, 3], &[0.3, -0.2, 0.5, 0.1, 0.4, -0.6]);
        let b = t(&[3, 2], &[0.7, -0.3, 0.2, 0.9, -0.5, 0.1]);
        let c = t(&[2], &[1.5, 2.5]);
        let d = t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]);
        let report = check_tape_fn(&build, &["a", "b", "c", "d"], &[a, b, c, d], FdOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }

    #[test]
    fn conv_and_pool_gradients_pass() {
        let build = |tape: &mut Tape<f64>, v: &[Var]| -> Result<Var> {
            let y = tape.conv2d(v[0], v[1], 2, 1)?;
            let p = tape.avg_pool2d(y, 2)?;
            let m = tape.max_pool2d(y, 2)?;
            let s = tape.mul(p, m)?;
            Ok(tape.sum(s))
        };
        let x = Tensor::from_fn(&[2, 2, 7, 8], |i| ((i * 31 % 17) as f64 - 8.0) / 7.0);
        let w = Tensor::from_fn(&[3, 2, 3, 3], |i| ((i * 7 % 11) as f64 - 5.0) / 9.0);
        let report = check_tape_fn(&build, &["x", "w"], &[x, w], FdOptions::default()).unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
