use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Adam with bias correction. Moments are stored at the parameter's
/// precision; the update itself is computed in `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T: Real = f32> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
}

impl<T: Real> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// Apply one update to `params` and zero their gradients.
    ///
    /// Moment buffers are allocated on the first call and must keep
    /// matching the parameter list afterwards.
    pub fn step<'a>(&mut self, params: impl IntoIterator<Item = &'a mut Tensor<T>>) -> Result<()> {
        let mut params: Vec<&mut Tensor<T>> = params.into_iter().collect();
        if let Some(i) = params.iter().position(|p| p.grad.is_none()) {
            return Err(Error::MissingGrad(i));
        }
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![T::ZERO; p.numel()]).collect();
            self.v = self.m.clone();
        }
        if self.m.len() != params.len() || self.m.iter().zip(&params).any(|(m, p)| m.len() != p.numel()) {
            return Err(Error::Config(
                "optimizer state does not match the parameter list".into(),
            ));
        }

        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for ((p, m), v) in params.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let grad = p.grad.take().expect("checked above");
            for (((theta, &g), m), v) in p.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.to_f64();
                let m_new = self.beta1 * m.to_f64() + (1.0 - self.beta1) * g;
                let v_new = self.beta2 * v.to_f64() + (1.0 - self.beta2) * g * g;
                *m = T::from_f64(m_new);
                *v = T::from_f64(v_new);
                let m_hat = m.to_f64() / bc1;
                let v_hat = v.to_f64() / bc2;
                *theta = T::from_f64(theta.to_f64() - self.lr * m_hat / (v_hat.sqrt() + self.eps));
            }
            p.grad = Some(vec![T::ZERO; grad.len()]);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f32, g: f32) -> Tensor<f32> {
        let mut t = Tensor::scalar(v);
        t.grad = Some(vec![g]);
        t
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = scalar_param(0.0, 1.0);
        let mut adam = Adam::new(1e-4);
        adam.step([&mut p]).unwrap();
        assert_eq!(adam.t, 1);
        let delta = -p.item() as f64;
        assert!((delta - 1e-4).abs() < 1e-4 * 1e-3, "{delta}");
        assert_eq!(p.grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar_param(0.25, 0.0);
        let mut adam = Adam::new(0.1);
        for _ in 0..3 {
            p.grad = Some(vec![0.0]);
            adam.step([&mut p]).unwrap();
        }
        assert_eq!(p.item(), 0.25);
        assert_eq!(adam.t, 3);
    }

    #[test]
    fn missing_grad_rejected() {
        let mut a = scalar_param(0.0, 1.0);
        let mut b = Tensor::<f32>::scalar(0.0);
        let mut adam = Adam::new(1e-3);
        assert!(matches!(adam.step([&mut a, &mut b]), Err(Error::MissingGrad(1))));
        assert_eq!(adam.t, 0);
    }

    /// Textbook scalar Adam, written out independently.
    fn reference_adam(steps: usize, lr: f64) -> Vec<f64> {
        let (b1, b2, eps) = (0.9f64, 0.999f64, 1e-8f64);
        let (mut theta, mut m, mut v) = (0.0f64, 0.0f64, 0.0f64);
        let mut path = vec![theta];
        for t in 1..=steps {
            let g = 2.0 * (theta - 3.0);
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - b1.powi(t as i32));
            let vh = v / (1.0 - b2.powi(t as i32));
            theta -= lr * mh / (vh.sqrt() + eps);
            path.push(theta);
        }
        path
    }

    #[test]
    fn quadratic_matches_reference_and_converges_by_windows() {
        let reference = reference_adam(50, 0.1);
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut adam = Adam::new(0.1);
        let mut path = vec![0.0];
        for _ in 0..50 {
            p.grad = Some(vec![2.0 * (p.item() - 3.0)]);
            adam.step([&mut p]).unwrap();
            path.push(p.item());
        }
        for (a, b) in path.iter().zip(&reference) {
            assert!((a - b).abs() < 1e-12);
        }
        // Adam overshoots near the optimum, so compare the worst error per window.
        let errs: Vec<f64> = path[1..]
            .chunks(10)
            .map(|w| w.iter().map(|t| (t - 3.0).abs()).fold(0.0, f64::max))
            .collect();
        for w in errs.windows(2) {
            assert!(w[1] < w[0], "{errs:?}");
        }
    }
}
