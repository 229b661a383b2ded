//! Central finite-difference gradient checking at 64-bit precision.

use rand::Rng;

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::tensor::Tensor;

/// Gradients smaller than this are compared absolutely instead of relatively.
pub const ABS_FLOOR: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct CoordCheck {
    pub input: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub coords: Vec<CoordCheck>,
}

impl GradCheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.coords.iter().map(|c| c.rel_err).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&CoordCheck> {
        self.coords
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err() < tol
    }
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(ABS_FLOOR)
}

/// Compares analytic gradients of `f` against central differences with step
/// `h` on `coords` coordinates drawn uniformly over all input elements.
///
/// `f` receives one tracked leaf per input and must return a scalar.
pub fn check<F>(
    inputs: &[Tensor<f64>],
    f: F,
    coords: usize,
    h: f64,
    rng: &mut impl Rng,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |vals: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = vals.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out).item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let total: usize = inputs.iter().map(|t| t.numel()).sum();
    let mut work = inputs.to_vec();
    let mut report = Vec::with_capacity(coords);
    for _ in 0..coords {
        let mut flat = rng.random_range(0..total);
        let mut input = 0;
        while flat >= inputs[input].numel() {
            flat -= inputs[input].numel();
            input += 1;
        }
        let orig = work[input].data()[flat];
        work[input].data_mut()[flat] = orig + h;
        let plus = eval(&work)?;
        work[input].data_mut()[flat] = orig - h;
        let minus = eval(&work)?;
        work[input].data_mut()[flat] = orig;
        let numeric = (plus - minus) / (2.0 * h);
        let analytic = grads.get(vars[input]).map_or(0.0, |g| g.data()[flat]);
        report.push(CoordCheck {
            input,
            index: flat,
            analytic,
            numeric,
            rel_err: rel_err(analytic, numeric),
        });
    }
    Ok(GradCheckReport { coords: report })
}
