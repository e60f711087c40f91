use crate::error::{Error, Result};
use crate::net::ParamSet;

/// Bias-corrected ADAM moments shaped like a [`ParamSet`].
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f32>>,
    pub v: Vec<Vec<f32>>,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(params: &ParamSet<f32>) -> Self {
        let z: Vec<Vec<f32>> = params.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        Self {
            m: z.clone(),
            v: z,
            step: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn matches(&self, params: &ParamSet<f32>) -> bool {
        self.m.len() == params.tensors().len()
            && self.v.len() == self.m.len()
            && params
                .tensors()
                .iter()
                .zip(self.m.iter().zip(&self.v))
                .all(|(t, (m, v))| m.len() == t.len() && v.len() == t.len())
    }

    /// Applies one update from the gradient slots, then zeroes them. A
    /// non-finite gradient leaves parameters and moments untouched.
    pub fn step(&mut self, params: &mut ParamSet<f32>, lr: f64) -> Result<()> {
        if !self.matches(params) {
            return Err(Error::SizeMismatch("optimizer state does not match parameters".into()));
        }
        if params.tensors().iter().any(|t| t.grad.iter().any(|g| !g.is_finite())) {
            params.zero_grads();
            return Err(Error::NonFinite("gradient".into()));
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (ti, tensor) in params.tensors_mut().iter_mut().enumerate() {
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            for k in 0..tensor.data.len() {
                let g = tensor.grad[k] as f64;
                let mk = self.beta1 * m[k] as f64 + (1.0 - self.beta1) * g;
                let vk = self.beta2 * v[k] as f64 + (1.0 - self.beta2) * g * g;
                m[k] = mk as f32;
                v[k] = vk as f32;
                let upd = lr * (mk / bc1) / ((vk / bc2).sqrt() + self.eps);
                tensor.data[k] = (tensor.data[k] as f64 - upd) as f32;
            }
            tensor.grad.fill(0.0);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::{ArchSpec, Tensor};

    fn scalar_params(v: f32) -> ParamSet<f32> {
        let mut t = Tensor::zeros("theta", vec![1]);
        t.data[0] = v;
        ParamSet::from_tensors(ArchSpec::default(), vec![t])
    }

    #[test]
    fn zero_gradient_is_a_noop() {
        let mut p = scalar_params(0.7);
        let mut s = AdamState::new(&p);
        s.step(&mut p, 0.1).unwrap();
        assert_eq!(p.tensors()[0].data[0], 0.7);
        assert_eq!(s.step, 1);
    }

    #[test]
    fn quadratic_converges() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        for _ in 0..200 {
            let th = p.tensors()[0].data[0];
            p.tensors_mut()[0].grad[0] = 2.0 * th;
            s.step(&mut p, 0.1).unwrap();
        }
        assert!(p.tensors()[0].data[0].abs() < 0.05);
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut p = scalar_params(1.0);
        let mut s = AdamState::new(&p);
        p.tensors_mut()[0].grad[0] = f32::NAN;
        assert!(s.step(&mut p, 0.1).is_err());
        assert_eq!((p.tensors()[0].data[0], s.step), (1.0, 0));
        assert_eq!(p.tensors()[0].grad[0], 0.0);
    }
}
