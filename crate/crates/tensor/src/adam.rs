use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Bias-corrected Adam.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub step: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    /// One update of `params` with `grads` (a missing gradient counts as zero).
    pub fn update(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&[T]>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params
                .iter()
                .map(|p| Tensor::zeros(p.shape().to_vec()))
                .collect();
            self.v = self.m.clone();
        }
        assert_eq!(
            self.m.len(),
            params.len(),
            "parameter set changed between steps"
        );
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (self.beta1, self.beta2);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), m.shape());
            let Some(g) = g else { continue };
            let pd = p.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let gj = g[j].as_f64();
                let mj = b1 * md[j].as_f64() + (1.0 - b1) * gj;
                let vj = b2 * vd[j].as_f64() + (1.0 - b2) * gj * gj;
                md[j] = T::of(mj);
                vd[j] = T::of(vj);
                let mhat = mj / bc1;
                let vhat = vj / bc2;
                pd[j] = T::of(pd[j].as_f64() - self.lr * mhat / (vhat.sqrt() + self.epsilon));
            }
        }
    }

    /// Updates every trainable entry of `store` from its accumulated gradient.
    pub fn step_store(&mut self, store: &mut ParamStore<T>) {
        let entries = store.entries_mut();
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        let mut params: Vec<&mut Tensor<T>> = Vec::new();
        for e in entries.iter_mut().filter(|e| e.trainable) {
            grads.push(e.tensor.grad.take());
            params.push(&mut e.tensor);
        }
        let refs: Vec<Option<&[T]>> = grads.iter().map(|g| g.as_deref()).collect();
        self.update(&mut params, &refs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = Tensor::<f64>::from_vec(vec![1.5, -2.0]);
        let mut st = AdamState::new(0.1);
        st.update(&mut [&mut p], &[Some(&[0.0, 0.0][..])]);
        assert_eq!(p.data(), &[1.5, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Tensor::<f64>::scalar(0.0);
        let mut st = AdamState::new(0.1);
        st.update(&mut [&mut p], &[Some(&[1.0][..])]);
        assert!((p.item() + 0.1).abs() < 1e-6);
    }

    #[test]
    fn minimizes_square() {
        let mut p = Tensor::<f64>::scalar(1.0);
        let mut st = AdamState::new(0.1);
        for _ in 0..100 {
            let x = p.item();
            st.update(&mut [&mut p], &[Some(&[2.0 * x][..])]);
        }
        assert!(p.item().abs() < 0.1, "{}", p.item());
    }
}
