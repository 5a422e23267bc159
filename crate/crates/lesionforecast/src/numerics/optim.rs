use super::{NumericsError, ParamSet, Real};

/// Adam with bias correction.
///
/// Moment buffers are laid out parallel to the owning [`ParamSet`]; a
/// non-finite gradient aborts the step before any parameter is touched.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<Vec<Real>>,
    v: Vec<Vec<Real>>,
    step: u64,
    pub lr: Real,
    pub beta1: Real,
    pub beta2: Real,
    pub eps: Real,
}

impl AdamState {
    pub fn new(params: &ParamSet, lr: Real) -> Self {
        AdamState {
            m: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            v: params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect(),
            step: 0,
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn with_betas(mut self, beta1: Real, beta2: Real) -> Self {
        self.beta1 = beta1;
        self.beta2 = beta2;
        self
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. `grads[i]` is the gradient for parameter `i`,
    /// or `None` when the parameter did not participate in the loss (its
    /// gradient is treated as zero; moments still decay).
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &[Option<Vec<Real>>],
    ) -> Result<(), NumericsError> {
        assert_eq!(grads.len(), params.len(), "gradient list must match parameter count");
        for (i, grad) in grads.iter().enumerate() {
            if let Some(g) = grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(NumericsError::NonFiniteGrad {
                        param: params.name(i).to_string(),
                    });
                }
            }
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let zero: Vec<Real> = Vec::new();
        for i in 0..params.len() {
            let g = grads[i].as_deref().unwrap_or(&zero);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let t = params.tensor_mut(i);
            for (k, p) in t.data_mut().iter_mut().enumerate() {
                let gk = g.get(k).copied().unwrap_or(0.0);
                m[k] = self.beta1 * m[k] + (1.0 - self.beta1) * gk;
                v[k] = self.beta2 * v[k] + (1.0 - self.beta2) * gk * gk;
                let m_hat = m[k] / bc1;
                let v_hat = v[k] / bc2;
                *p -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn one_param(values: &[Real]) -> ParamSet {
        let mut p = ParamSet::new();
        p.add("w", Tensor::from_vec(&[values.len()], values.to_vec()).unwrap());
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters_unchanged() {
        let mut params = one_param(&[1.0, -2.0, 3.0]);
        let mut adam = AdamState::new(&params, 1e-2);
        adam.step(&mut params, &[Some(vec![0.0; 3])]).unwrap();
        assert_eq!(params.tensor(0).data(), &[1.0, -2.0, 3.0]);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        // With bias correction, m_hat = g and v_hat = g², so the first
        // update is lr * g / (|g| + eps) = lr * sign(g) up to eps.
        let mut params = one_param(&[0.0, 0.0]);
        let mut adam = AdamState::new(&params, 1e-3);
        adam.step(&mut params, &[Some(vec![2.5, -0.3])]).unwrap();
        let d = params.tensor(0).data();
        assert!((d[0] + 1e-3).abs() < 1e-8);
        assert!((d[1] - 1e-3).abs() < 1e-7);
    }

    #[test]
    fn constant_gradient_moves_monotonically_against_it() {
        let mut params = one_param(&[1.0]);
        let mut adam = AdamState::new(&params, 1e-2);
        let mut last = 1.0;
        for _ in 0..50 {
            adam.step(&mut params, &[Some(vec![1.0])]).unwrap();
            let now = params.tensor(0).data()[0];
            assert!(now < last, "positive gradient must keep decreasing the parameter");
            last = now;
        }
    }

    #[test]
    fn nan_gradient_aborts_and_names_parameter() {
        let mut params = one_param(&[1.0]);
        let mut adam = AdamState::new(&params, 1e-2);
        let err = adam.step(&mut params, &[Some(vec![Real::NAN])]).unwrap_err();
        assert_eq!(
            err,
            crate::numerics::NumericsError::NonFiniteGrad { param: "w".into() }
        );
        assert_eq!(params.tensor(0).data(), &[1.0]);
        assert_eq!(adam.step_count(), 0);
    }
}
