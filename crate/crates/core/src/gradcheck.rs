//! Central finite-difference oracle for checking analytic gradients.

pub mod suite;

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FdOptions {
    /// Perturbation applied on each side of every coordinate.
    pub step: f64,
    /// Largest acceptable relative error.
    pub tol: f64,
    /// Denominator floor so near-zero gradients are compared absolutely.
    pub floor: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            tol: 1e-4,
            floor: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// Coordinates whose relative error exceeds the tolerance.
    pub flagged: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FdReport {
    pub params: Vec<ParamReport>,
}

impl FdReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged.is_empty())
    }

    pub fn max_rel_error(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max)
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

fn evaluate<F>(f: &F, params: &[Tensor], track: bool) -> Result<(Graph, Vec<Var>, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .map(|p| {
            let mut t = Tensor::new(p.shape(), p.data().to_vec()).expect("valid tensor");
            t.requires_grad = track;
            g.leaf(t)
        })
        .collect();
    let out = f(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
    }
    Ok((g, vars, out))
}

fn scalar<F>(f: &F, params: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (g, _, out) = evaluate(f, params, false)?;
    Ok(g.value(out).data()[0])
}

/// Central differences `(f(θ+h) − f(θ−h)) / 2h` for every coordinate of every parameter.
pub fn numeric_gradient<F>(f: &F, params: &[Tensor], step: f64) -> Result<Vec<Vec<f64>>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if !(step > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("step must be positive, got {step}")));
    }
    let mut work: Vec<Tensor> = params.to_vec();
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut grads = vec![0.0; params[p].len()];
        for i in 0..params[p].len() {
            let orig = work[p].data()[i];
            work[p].data_mut()[i] = orig + step;
            let plus = scalar(f, &work)?;
            work[p].data_mut()[i] = orig - step;
            let minus = scalar(f, &work)?;
            work[p].data_mut()[i] = orig;
            grads[i] = (plus - minus) / (2.0 * step);
        }
        out.push(grads);
    }
    Ok(out)
}

/// Compares the graph's analytic gradients of the scalar built by `f`
/// against central finite differences, parameter by parameter.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], opts: FdOptions) -> Result<FdReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let first = scalar(&f, params)?;
    let second = scalar(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::NonDeterministic { first, second });
    }
    let (mut g, vars, out) = evaluate(&f, params, true)?;
    g.backward(out)?;
    let numeric = numeric_gradient(&f, params, opts.step)?;
    let params = vars
        .iter()
        .zip(numeric)
        .map(|(&v, numeric)| {
            let analytic = g
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; numeric.len()]);
            let errs: Vec<f64> = analytic
                .iter()
                .zip(&numeric)
                .map(|(&a, &n)| relative_error(a, n, opts.floor))
                .collect();
            let (worst_index, max_rel_error) = errs
                .iter()
                .cloned()
                .enumerate()
                .fold((0, 0.0), |acc, (i, e)| if e > acc.1 { (i, e) } else { acc });
            let flagged = errs
                .iter()
                .enumerate()
                .filter(|(_, &e)| !(e <= opts.tol))
                .map(|(i, _)| i)
                .collect();
            ParamReport {
                max_rel_error,
                worst_index,
                analytic,
                numeric,
                flagged,
            }
        })
        .collect();
    Ok(FdReport { params })
}

#[cfg(test)]
mod tests {
    use super::*;
    use core::cell::Cell;

    #[test]
    fn sum_has_no_error() {
        let x = Tensor::new(&[4], vec![0.3, -1.0, 2.0, 5.5]).unwrap();
        let r = finite_diff_check(|g, v| g.sum(v[0]), &[x], FdOptions::default()).unwrap();
        assert!(r.passed());
        assert!(r.max_rel_error() < 1e-9);
    }

    #[test]
    fn sigmoid_at_zero_matches_quarter() {
        let x = Tensor::new(&[1], vec![0.0]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let s = g.sigmoid(v[0])?;
                g.sum(s)
            },
            &[x],
            FdOptions::default(),
        )
        .unwrap();
        assert_eq!(r.params[0].analytic, vec![0.25]);
        assert!((r.params[0].numeric[0] - 0.25).abs() < 1e-8);
    }

    #[test]
    fn flags_a_wrong_gradient() {
        // straight-through claims a derivative the locally constant threshold does not have
        let x = Tensor::new(&[2], vec![0.3, 0.7]).unwrap();
        let r = finite_diff_check(
            |g, v| {
                let t = g.threshold(v[0], true)?;
                let s = g.add(t, v[0])?;
                let sq = g.mul(s, v[0])?;
                g.sum(sq)
            },
            &[x],
            FdOptions::default(),
        )
        .unwrap();
        assert!(!r.passed());
    }

    #[test]
    fn detects_non_determinism() {
        let calls = Cell::new(0u32);
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let err = finite_diff_check(
            |g, v| {
                calls.set(calls.get() + 1);
                let s = g.scale(v[0], calls.get() as f64)?;
                g.sum(s)
            },
            &[x],
            FdOptions::default(),
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonDeterministic { .. }));
    }

    #[test]
    fn rejects_non_positive_step() {
        let x = Tensor::new(&[1], vec![1.0]).unwrap();
        let opts = FdOptions { step: 0.0, ..FdOptions::default() };
        assert!(finite_diff_check(|g, v| g.sum(v[0]), &[x], opts).is_err());
    }
}
