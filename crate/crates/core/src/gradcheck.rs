//! Central finite-difference verification of analytic gradients.

use crate::error::Result;
use crate::param::ParamSet;
use crate::tape::{Tape, Var};

/// Per-parameter worst relative error between analytic and central-difference
/// gradients.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub per_param: Vec<(String, f64)>,
    pub max_rel_err: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_err < tolerance
    }
}

/// Compare analytic gradients of `f` against central differences at `eps`.
///
/// `f` must be deterministic given the parameter values (no live RNG inside);
/// it is re-evaluated `2 × scalar-count` times with perturbed parameters, so
/// keep the models used here small.
pub fn finite_difference_check<F>(
    mut f: F,
    params: &mut ParamSet,
    eps: f64,
) -> Result<GradCheckReport>
where
    F: FnMut(&ParamSet, &mut Tape) -> Result<Var>,
{
    // Analytic pass.
    let mut tape = Tape::new();
    let loss = f(params, &mut tape)?;
    let analytic = tape.backward(loss)?;

    let names = params.trainable_names();
    let mut per_param = Vec::with_capacity(names.len());
    let mut max_rel = 0.0f64;

    for name in names {
        let numel = params.get(&name).tensor.numel();
        let mut worst = 0.0f64;
        for i in 0..numel {
            let orig = params.get(&name).tensor.data[i];

            params.get_mut(&name).tensor.data[i] = orig + eps;
            let up = eval(&mut f, params)?;
            params.get_mut(&name).tensor.data[i] = orig - eps;
            let down = eval(&mut f, params)?;
            params.get_mut(&name).tensor.data[i] = orig;

            let numeric = (up - down) / (2.0 * eps);
            let a = analytic.get(&name).map(|t| t.data[i]).unwrap_or(0.0);
            let rel = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
            worst = worst.max(rel);
        }
        max_rel = max_rel.max(worst);
        per_param.push((name, worst));
    }
    Ok(GradCheckReport {
        per_param,
        max_rel_err: max_rel,
    })
}

fn eval<F>(f: &mut F, params: &ParamSet) -> Result<f64>
where
    F: FnMut(&ParamSet, &mut Tape) -> Result<Var>,
{
    let mut tape = Tape::inference();
    let loss = f(params, &mut tape)?;
    Ok(tape.value(loss).item())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::param::Parameter;
    use crate::tensor::Tensor;
    use rand::rngs::StdRng;
    use rand::SeedableRng;

    #[test]
    fn constant_function_reports_zero_error() {
        let mut params = ParamSet::new();
        params
            .insert(Parameter::trainable("w", Tensor::row(vec![1.0, -2.0])))
            .unwrap();
        let report = finite_difference_check(
            |_, tape| Ok(tape.constant(Tensor::scalar(5.0))),
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "err = {}", report.max_rel_err);
    }

    #[test]
    fn softmax_cross_entropy_gradient_matches() {
        // -log softmax(w·x)[target] over random logits
        let mut rng = StdRng::seed_from_u64(11);
        let mut params = ParamSet::new();
        params
            .insert(Parameter::trainable("w", Tensor::glorot(4, 6, &mut rng)))
            .unwrap();
        let x = Tensor::uniform(1, 4, 1.0, &mut rng);
        let report = finite_difference_check(
            move |ps, tape| {
                let xv = tape.constant(x.clone());
                let wv = tape.param(ps.get("w"));
                let logits = tape.matmul(xv, wv)?;
                let lse = tape.lse_rows(logits);
                let logp = tape.sub_col(logits, lse)?;
                let picked = tape.gather_elems(logp, &[2])?;
                let s = tape.sum_all(picked);
                Ok(tape.scale(s, -1.0))
            },
            &mut params,
            1e-5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "err = {}", report.max_rel_err);
    }
}
