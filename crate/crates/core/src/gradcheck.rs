//! Central finite-difference gradient checking for graph computations.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|, REL_FLOOR)`.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// `(input, element)` of the worst entry.
    pub worst: (usize, usize),
}

/// Denominator floor of the relative error, so entries whose true gradient
/// is zero are judged on an absolute scale.
pub const REL_FLOOR: f64 = 1e-6;

/// Reduce any tensor to a scalar with fixed pseudo-random weights.
pub fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w: Vec<f64> = (0..g.value(out).len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    g.dot_const(out, &w)
}

fn eval<F>(inputs: &[Tensor], build: &F) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    Ok(g.value(out).item())
}

/// Check every element of every input.
pub fn check_gradients<F>(inputs: &[Tensor], eps: f64, build: F) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let probes: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |e| (i, e)))
        .collect();
    check_gradients_at(inputs, &probes, eps, build)
}

/// Check only the listed `(input, element)` entries.
pub fn check_gradients_at<F>(
    inputs: &[Tensor],
    probes: &[(usize, usize)],
    eps: f64,
    build: F,
) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = build(&mut g, &vars)?;
    if g.value(out).len() != 1 {
        return Err(Error::shape("gradient check needs a scalar output"));
    }
    let grads = g.backward(out);

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        worst: (0, 0),
    };
    let mut work = inputs.to_vec();
    for &(i, e) in probes {
        let analytic = grads.get(vars[i]).map_or(0.0, |t| t.data()[e]);
        let orig = work[i].data()[e];
        work[i].data_mut()[e] = orig + eps;
        let plus = eval(&work, &build)?;
        work[i].data_mut()[e] = orig - eps;
        let minus = eval(&work, &build)?;
        work[i].data_mut()[e] = orig;
        let numeric = (plus - minus) / (2.0 * eps);
        let abs = (analytic - numeric).abs();
        let rel = abs / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = (i, e);
        }
        report.max_abs_err = report.max_abs_err.max(abs);
        report.checked += 1;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn detects_correct_gradient_of_sigmoid_chain() {
        let x = Tensor::new(vec![2, 3, 3], (0..18).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let r = check_gradients(&[x], 1e-6, |g, v| {
            let s = g.sigmoid(v[0]);
            let t = g.tanh(s);
            project(g, t, 1)
        })
        .unwrap();
        assert_eq!(r.checked, 18);
        assert!(r.max_rel_err < 1e-6, "{r:?}");
    }

    #[test]
    fn conv_norm_resize_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut rand = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
        };
        let inputs = [
            rand(&[3, 6, 6]),
            rand(&[4, 3, 3, 3]),
            rand(&[4]),
            rand(&[4, 1, 3, 3]),
            rand(&[4]),
            rand(&[4]),
        ];
        let r = check_gradients(&inputs, 1e-6, |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), 2, 1)?;
            let y = g.depthwise_conv2d(y, v[3], None, 1, 1)?;
            let y = g.norm(y, v[4], v[5])?;
            let y = g.resize(y, 7, 5)?;
            let y = g.tanh(y);
            project(g, y, 5)
        })
        .unwrap();
        assert!(r.max_rel_err < 1e-4, "{r:?}");
    }
}
