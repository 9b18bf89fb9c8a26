use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const GRADCHECK_EPS: f64 = 1e-5;

/// Gradients smaller than this are compared in absolute terms.
const REL_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub probes: usize,
    pub max_rel_error: f64,
    /// (input index, element index) of the worst probe.
    pub worst: Option<(usize, usize)>,
}

/// Compares the tape's analytic gradient against central finite differences.
///
/// `f` builds a scalar from the inputs recorded on a fresh tape. Only inputs
/// with `requires_grad` are probed. When they hold more than `probes`
/// elements in total, a seeded random subset of `probes` elements is checked.
pub fn gradcheck<Fun>(inputs: &[Tensor<f64>], f: Fun, probes: usize, seed: u64, eps: f64) -> Result<GradcheckReport>
where
    Fun: Fn(&mut Tape<f64>, &[Var]) -> Result<Var>,
{
    let eval = |ts: &[Tensor<f64>]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars = ts.iter().map(|t| tape.insert(t)).collect::<Result<Vec<_>>>()?;
        let out = f(&mut tape, &vars)?;
        Ok(tape.scalar(out))
    };

    let mut tape = Tape::new();
    let vars = inputs.iter().map(|t| tape.insert(t)).collect::<Result<Vec<_>>>()?;
    let out = f(&mut tape, &vars)?;
    tape.backward(out)?;
    let analytic: Vec<Vec<f64>> = inputs
        .iter()
        .zip(&vars)
        .map(|(t, &v)| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();

    let candidates: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .filter(|(_, t)| t.requires_grad)
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    if candidates.is_empty() {
        return Err(Error::contract("gradcheck: no input requires a gradient"));
    }
    let chosen: Vec<(usize, usize)> = if candidates.len() <= probes {
        candidates
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..probes)
            .map(|_| candidates[rng.random_range(0..candidates.len())])
            .collect()
    };

    let mut work = inputs.to_vec();
    let mut report = GradcheckReport {
        probes: chosen.len(),
        max_rel_error: 0.0,
        worst: None,
    };
    for (i, j) in chosen {
        let orig = work[i].data()[j];
        work[i].data_mut()[j] = orig + eps;
        let plus = eval(&work)?;
        work[i].data_mut()[j] = orig - eps;
        let minus = eval(&work)?;
        work[i].data_mut()[j] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let a = analytic[i][j];
        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((i, j));
        }
    }
    Ok(report)
}
