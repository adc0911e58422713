//! Central-difference gradient checking in f64.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, Var};
use crate::tensor::DTensor;

/// Step used for central differences.
pub const FD_EPS: f64 = 1e-5;

/// Magnitudes below this are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    /// `(input, flat index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.checked > 0 && self.max_rel_error < tol
    }
}

/// Compares analytic gradients of the scalar built by `build` against
/// central differences on up to `samples` coordinates drawn across all
/// `inputs` (every coordinate when there are fewer).
///
/// `build` receives one graph leaf per input, each requiring a gradient.
pub fn check_gradients<F>(inputs: &[DTensor<f64>], build: F, samples: usize, seed: u64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
{
    let eval = |tensors: &[DTensor<f64>]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.leaf(&t.clone().with_grad())).collect();
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };

    let (mut g, vars, loss) = eval(inputs)?;
    g.backward(loss)?;
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| g.grad(v).map_or_else(|| vec![0.0; t.numel()], <[f64]>::to_vec))
        .collect();
    drop(g);

    let coords: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.numel()).map(move |j| (i, j)))
        .collect();
    let picked: Vec<(usize, usize)> = if coords.len() <= samples {
        coords
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut idx = sample(&mut rng, coords.len(), samples).into_vec();
        idx.sort_unstable();
        idx.into_iter().map(|i| coords[i]).collect()
    };

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        checked: 0,
        worst: None,
    };
    let mut probe = inputs.to_vec();
    for (i, j) in picked {
        let orig = probe[i].data()[j];
        probe[i].data_mut()[j] = orig + FD_EPS;
        let (g, _, l) = eval(&probe)?;
        let plus = g.value(l)[0];
        probe[i].data_mut()[j] = orig - FD_EPS;
        let (g, _, l) = eval(&probe)?;
        let minus = g.value(l)[0];
        probe[i].data_mut()[j] = orig;

        let numeric = (plus - minus) / (2.0 * FD_EPS);
        let a = analytic[i][j];
        let abs = (a - numeric).abs();
        let rel = abs / a.abs().max(numeric.abs()).max(REL_FLOOR);
        report.checked += 1;
        report.max_abs_error = report.max_abs_error.max(abs);
        if rel > report.max_rel_error || report.worst.is_none() {
            report.max_rel_error = report.max_rel_error.max(rel);
            report.worst = Some((i, j, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_graph_is_exact() {
        let x = DTensor::new(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let w = DTensor::new(&[3], vec![1.5, 0.25, -3.0]).unwrap();
        let r = check_gradients(
            &[x, w.clone()],
            |g, v| {
                let c = g.leaf(&w);
                let p = g.mul(v[0], c)?;
                Ok(g.sum(p))
            },
            100,
            0,
        )
        .unwrap();
        assert_eq!(r.checked, 6);
        assert!(r.max_rel_error < 1e-10, "{r:?}");
    }
}
