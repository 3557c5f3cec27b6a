use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// A trainable tensor with its gradient accumulator and learning-rate multiplier.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor<F = f32> {
    pub value: Tensor<F>,
    pub grad: Tensor<F>,
    lr_multiplier: f64,
}

impl<F: Real> ParamTensor<F> {
    pub fn new(value: Tensor<F>) -> Self {
        let grad = Tensor::zeros_like(&value);
        Self {
            value,
            grad,
            lr_multiplier: 1.0,
        }
    }

    pub fn with_lr_multiplier(mut self, m: f64) -> Result<Self> {
        self.set_lr_multiplier(m)?;
        Ok(self)
    }

    pub fn lr_multiplier(&self) -> f64 {
        self.lr_multiplier
    }

    pub fn set_lr_multiplier(&mut self, m: f64) -> Result<()> {
        if !(m > 0.0) || !m.is_finite() {
            return Err(Error::Config(format!(
                "learning-rate multiplier must be positive, got {m}"
            )));
        }
        self.lr_multiplier = m;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn shape(&self) -> &[usize] {
        self.value.shape()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<F = f32> {
    pub m: Tensor<F>,
    pub v: Tensor<F>,
    pub step_count: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl<F: Real> AdamState<F> {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step_count: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    pub fn for_param(param: &ParamTensor<F>) -> Self {
        Self::new(param.shape())
    }
}

/// One bias-corrected Adam update with `lr = base_lr * param.lr_multiplier`.
pub fn adam_step<F: Real>(
    param: &mut ParamTensor<F>,
    state: &mut AdamState<F>,
    base_lr: f64,
) -> Result<()> {
    if state.m.shape() != param.shape() || state.v.shape() != param.shape() {
        return Err(Error::Dimension(format!(
            "optimizer state {:?} does not match parameter {:?}",
            state.m.shape(),
            param.shape()
        )));
    }
    param.grad.ensure_finite("gradient")?;

    state.step_count += 1;
    let t = state.step_count as i32;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powi(t);
    let bc2 = 1.0 - b2.powi(t);
    let lr = base_lr * param.lr_multiplier;

    let (fb1, fb2) = (F::lit(b1), F::lit(b2));
    let (one_b1, one_b2) = (F::lit(1.0 - b1), F::lit(1.0 - b2));
    let (fbc1, fbc2) = (F::lit(bc1), F::lit(bc2));
    let (flr, feps) = (F::lit(lr), F::lit(state.eps));

    let grads = param.grad.data();
    let values = param.value.data_mut();
    let m = state.m.data_mut();
    let v = state.v.data_mut();
    for i in 0..grads.len() {
        let g = grads[i];
        m[i] = fb1 * m[i] + one_b1 * g;
        v[i] = fb2 * v[i] + one_b2 * g * g;
        let m_hat = m[i] / fbc1;
        let v_hat = v[i] / fbc2;
        values[i] -= flr * m_hat / (v_hat.sqrt() + feps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = ParamTensor::new(Tensor::<f32>::vector(vec![0.5, -2.0, 3.0]));
        let before = p.value.clone();
        let mut s = AdamState::for_param(&p);
        for _ in 0..5 {
            adam_step(&mut p, &mut s, 0.1).unwrap();
        }
        assert_eq!(p.value, before);
        assert_eq!(s.step_count, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = ParamTensor::new(Tensor::<f64>::vector(vec![1.0, 1.0, 1.0]))
            .with_lr_multiplier(10.0)
            .unwrap();
        p.grad = Tensor::vector(vec![0.3, -4.0, 1e-3]);
        let mut s = AdamState::for_param(&p);
        adam_step(&mut p, &mut s, 0.01).unwrap();
        let eff = 0.1;
        for (i, sign) in [1.0, -1.0, 1.0].iter().enumerate() {
            let moved = 1.0 - p.value.data()[i];
            assert!((moved - eff * sign).abs() < 1e-4, "{moved}");
        }
    }

    #[test]
    fn quadratic_descent_matches_scalar_recursion() {
        // Independent scalar recursion of bias-corrected Adam on f(w) = w^2 per coordinate.
        let (mut w, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        for t in 1..=200 {
            let g = 2.0 * w;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let mh = m / (1.0 - 0.9f64.powi(t));
            let vh = v / (1.0 - 0.999f64.powi(t));
            w -= 0.1 * mh / (vh.sqrt() + 1e-8);
        }
        let oracle_norm = (2.0 * w * w).sqrt();
        assert!(oracle_norm < 0.1);

        let mut p = ParamTensor::new(Tensor::<f64>::vector(vec![1.0, 1.0]));
        let mut s = AdamState::for_param(&p);
        for _ in 0..200 {
            p.grad = p.value.scale(2.0);
            adam_step(&mut p, &mut s, 0.1).unwrap();
        }
        assert!(p.value.norm() < 0.1);
        assert!((p.value.norm() - oracle_norm).abs() < 1e-12);
    }

    #[test]
    fn rejects_non_finite_gradient() {
        let mut p = ParamTensor::new(Tensor::<f32>::vector(vec![1.0]));
        p.grad = Tensor::vector(vec![f32::NAN]);
        let mut s = AdamState::for_param(&p);
        assert!(matches!(adam_step(&mut p, &mut s, 0.1), Err(Error::Numeric(_))));
    }

    #[test]
    fn rejects_bad_multiplier() {
        let p = ParamTensor::new(Tensor::<f32>::vector(vec![1.0]));
        assert!(p.with_lr_multiplier(0.0).is_err());
    }
}
