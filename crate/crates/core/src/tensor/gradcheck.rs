use super::{Array, Tape, Var};
use crate::error::{Error, Result};

/// Per-coordinate comparison of analytic and central-difference gradients.
#[derive(Clone, Debug)]
pub struct GradCheck {
    /// `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)` per coordinate,
    /// parameters flattened in order.
    pub rel_errors: Vec<f64>,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.rel_errors.iter().copied().fold(0.0, f64::max)
    }

    pub fn fraction_below(&self, tol: f64) -> f64 {
        if self.rel_errors.is_empty() {
            return 1.0;
        }
        self.rel_errors.iter().filter(|&&e| e < tol).count() as f64 / self.rel_errors.len() as f64
    }

    pub fn median(&self) -> f64 {
        if self.rel_errors.is_empty() {
            return 0.0;
        }
        let mut v = self.rel_errors.clone();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        if n % 2 == 1 {
            v[n / 2]
        } else {
            0.5 * (v[n / 2 - 1] + v[n / 2])
        }
    }
}

fn evaluate<F>(f: &F, params: &[Array]) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.constant(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    tape.value(out)
        .item()
        .ok_or_else(|| Error::shape("finite_diff_check", "function must return a scalar"))
}

/// Compares reverse-mode gradients of `f` against central differences with
/// step `eps` on every coordinate of `params`.
pub fn finite_diff_check<F>(f: F, params: &[Array], eps: f64) -> Result<GradCheck>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::invalid(format!("finite-difference step {eps} outside [1e-7, 1e-3]")));
    }
    let first = evaluate(&f, params)?;
    let second = evaluate(&f, params)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::invalid(format!(
            "function is not deterministic ({first} vs {second})"
        )));
    }

    let mut tape = Tape::new();
    let vars: Vec<Var> = params.iter().map(|p| tape.leaf(p.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut check = GradCheck {
        rel_errors: Vec::new(),
        analytic: Vec::new(),
        numeric: Vec::new(),
    };
    let mut work: Vec<Array> = params.to_vec();
    for (p, &var) in vars.iter().enumerate() {
        let analytic = grads.get(var).expect("leaf gradient").data().to_vec();
        for (k, &a) in analytic.iter().enumerate() {
            let orig = work[p].data()[k];
            work[p].data_mut()[k] = orig + eps;
            let plus = evaluate(&f, &work)?;
            work[p].data_mut()[k] = orig - eps;
            let minus = evaluate(&f, &work)?;
            work[p].data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            check.rel_errors.push((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
            check.analytic.push(a);
            check.numeric.push(numeric);
        }
    }
    Ok(check)
}
