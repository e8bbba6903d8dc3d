//! Central finite-difference verification of tape gradients.
//!
//! Perturbed evaluations are independent of one another, so with the
//! `parallel` feature they are spread over the rayon pool. Results are
//! collected in coordinate order and do not depend on the thread count.

use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// A tensor under test, tagged with the group it is reported under.
#[derive(Debug, Clone)]
pub struct CheckParam {
    pub name: String,
    pub group: String,
    pub tensor: Tensor,
}

impl CheckParam {
    pub fn new(name: impl Into<String>, group: impl Into<String>, tensor: Tensor) -> Self {
        Self {
            name: name.into(),
            group: group.into(),
            tensor,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub step: f64,
    /// Coordinates sampled per tensor; smaller tensors are checked exhaustively.
    pub max_coords: usize,
    pub seed: u64,
    /// Multiplier applied to the analytic gradient before comparison. Anything
    /// other than 1.0 deliberately corrupts the check.
    pub analytic_scale: f64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            max_coords: 12,
            seed: 0,
            analytic_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoordCheck {
    pub param: String,
    pub group: String,
    pub coord: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Default)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_error.total_cmp(&b.rel_error))
    }

    /// Worst coordinate per group, keyed by group name.
    pub fn by_group(&self) -> BTreeMap<String, &CoordCheck> {
        let mut out: BTreeMap<String, &CoordCheck> = BTreeMap::new();
        for c in &self.coords {
            match out.get(&c.group) {
                Some(prev) if prev.rel_error >= c.rel_error => {}
                _ => {
                    out.insert(c.group.clone(), c);
                }
            }
        }
        out
    }
}

/// Denominator floor of [`relative_error`]. Central differences of an O(1)
/// objective with step 1e-5 carry up to about 1e-10 of rounding noise, so
/// gradients that are exactly zero are compared with an absolute tolerance
/// of `floor · 1e-4`.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-5;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(RELATIVE_ERROR_FLOOR)
}

fn evaluate<F>(f: &F, tensors: &[Tensor]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = tensors.iter().map(|t| tape.constant(t)).collect();
    let root = f(&mut tape, &vars)?;
    if tape.data(root).len() != 1 {
        return Err(invalid(format!(
            "objective must be scalar, got shape {:?}",
            tape.shape(root)
        )));
    }
    Ok(tape.item(root))
}

/// Compares the tape gradient of the scalar objective `f` against central
/// differences at the sampled coordinates of every parameter.
pub fn grad_check<F>(f: F, params: &[CheckParam], opts: &GradCheckOptions) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    if !(opts.step > 1e-7 && opts.step < 1e-3) {
        return Err(invalid(format!("step {} outside (1e-7, 1e-3)", opts.step)));
    }
    let base: Vec<Tensor> = params.iter().map(|p| p.tensor.clone()).collect();

    let mut tape = Tape::new();
    let vars: Vec<Var> = base.iter().map(|t| tape.param(t)).collect();
    let root = f(&mut tape, &vars)?;
    let value = tape.item(root);
    tape.backward(root)?;
    for attempt in 0..2 {
        let again = evaluate(&f, &base)?;
        if again.to_bits() != value.to_bits() {
            return Err(Error::NonDeterministic(format!(
                "objective evaluated to {value} then {again} (repeat {attempt}) on identical inputs"
            )));
        }
    }

    let mut jobs = Vec::new();
    for (pi, p) in params.iter().enumerate() {
        let n = p.tensor.len();
        if n <= opts.max_coords {
            jobs.extend((0..n).map(|c| (pi, c)));
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ (pi as u64).wrapping_mul(0x9e37_79b9));
            let mut picked = sample(&mut rng, n, opts.max_coords).into_vec();
            picked.sort_unstable();
            jobs.extend(picked.into_iter().map(|c| (pi, c)));
        }
    }

    let numeric = |&(pi, c): &(usize, usize)| -> Result<f64> {
        let mut shifted = base.clone();
        let x0 = base[pi].data()[c];
        shifted[pi].data_mut()[c] = x0 + opts.step;
        let plus = evaluate(&f, &shifted)?;
        shifted[pi].data_mut()[c] = x0 - opts.step;
        let minus = evaluate(&f, &shifted)?;
        Ok((plus - minus) / (2.0 * opts.step))
    };
    #[cfg(feature = "parallel")]
    let numerics: Vec<Result<f64>> = jobs.par_iter().map(numeric).collect();
    #[cfg(not(feature = "parallel"))]
    let numerics: Vec<Result<f64>> = jobs.iter().map(numeric).collect();

    let mut report = GradCheckReport::default();
    for (&(pi, c), num) in jobs.iter().zip(numerics) {
        let num = num?;
        let analytic = tape.grad(vars[pi]).map_or(0.0, |g| g[c]) * opts.analytic_scale;
        report.coords.push(CoordCheck {
            param: params[pi].name.clone(),
            group: params[pi].group.clone(),
            coord: c,
            analytic,
            numeric: num,
            rel_error: relative_error(analytic, num),
        });
    }
    Ok(report)
}

/// Plain form: max relative error over all coordinates of `params`.
pub fn max_relative_error<F>(f: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var> + Sync,
{
    let named: Vec<CheckParam> = params
        .iter()
        .enumerate()
        .map(|(i, t)| CheckParam::new(format!("p{i}"), "params", t.clone()))
        .collect();
    let opts = GradCheckOptions {
        step,
        max_coords: usize::MAX,
        ..Default::default()
    };
    Ok(grad_check(f, &named, &opts)?.max_rel_error())
}
