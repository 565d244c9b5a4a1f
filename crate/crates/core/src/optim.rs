//! Adam.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor]) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|t| vec![0.0; t.len()]).collect(),
            v: params.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One bias-corrected update with learning rate `lr`.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::shape(format!(
                "optimizer tracks {} tensors; got {} params and {} grads",
                self.m.len(),
                params.len(),
                grads.len()
            )));
        }
        for (p, g) in params.iter().zip(grads) {
            if p.shape() != g.shape() {
                return Err(Error::shape(format!(
                    "gradient {:?} for parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NumericFailure("non-finite gradient".into()));
            }
        }
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step as i32);
        let c2 = 1.0 - self.beta2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, (x, &d)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * d;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * d * d;
                *x -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = vec![Tensor::new(vec![2], vec![1.0, -1.0]).unwrap()];
        let g = vec![Tensor::new(vec![2], vec![0.3, -5.0]).unwrap()];
        let mut opt = Adam::new(&p);
        opt.update(&mut p, &g, 0.01).unwrap();
        assert!((p[0].data()[0] - 0.99).abs() < 1e-9);
        assert!((p[0].data()[1] + 0.99).abs() < 1e-9);
    }

    #[test]
    fn minimizes_quadratic() {
        let mut p = vec![Tensor::new(vec![1], vec![3.0]).unwrap()];
        let mut opt = Adam::new(&p);
        for _ in 0..2000 {
            let g = vec![p[0].map(|x| 2.0 * (x - 0.5))];
            opt.update(&mut p, &g, 0.05).unwrap();
        }
        assert!((p[0].item() - 0.5).abs() < 1e-3);
    }

    #[test]
    fn rejects_bad_gradients() {
        let mut p = vec![Tensor::zeros(&[2])];
        let mut opt = Adam::new(&p);
        assert!(opt.update(&mut p, &[Tensor::zeros(&[3])], 0.1).is_err());
        let nan = Tensor::new(vec![2], vec![f64::NAN, 0.0]).unwrap();
        assert!(matches!(opt.update(&mut p, &[nan], 0.1), Err(Error::NumericFailure(_))));
        assert_eq!(opt.steps(), 0);
    }
}
