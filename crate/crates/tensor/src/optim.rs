use crate::float::Float;

/// First and second moment estimates for one parameter buffer.
#[derive(Debug, Clone, Default, PartialEq)]
struct AdamState<T> {
    m: Vec<T>,
    v: Vec<T>,
}

/// Adam with bias correction over flat parameter buffers.
#[derive(Debug, Clone)]
pub struct Adam<T: Float = f32> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    step: u64,
    states: Vec<AdamState<T>>,
}

impl<T: Float> Adam<T> {
    pub fn new(lr: T, beta1: T, beta2: T) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps: T::lit(1e-8),
            step: 0,
            states: Vec::new(),
        }
    }

    /// Number of `step` calls so far.
    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to every `(param, grad)` pair; buffers are matched by position.
    pub fn step(&mut self, params: &mut [&mut [T]], grads: &[&[T]]) {
        assert_eq!(params.len(), grads.len());
        if self.states.is_empty() {
            self.states = params
                .iter()
                .map(|p| AdamState {
                    m: vec![T::zero(); p.len()],
                    v: vec![T::zero(); p.len()],
                })
                .collect();
        }
        assert_eq!(self.states.len(), params.len(), "parameter set changed between steps");
        self.step += 1;
        let t = self.step as i32;
        let one = T::one();
        let bc1 = one - self.beta1.powi(t);
        let bc2 = one - self.beta2.powi(t);
        for ((p, g), st) in params.iter_mut().zip(grads).zip(self.states.iter_mut()) {
            assert_eq!(p.len(), g.len());
            for i in 0..p.len() {
                st.m[i] = self.beta1 * st.m[i] + (one - self.beta1) * g[i];
                st.v[i] = self.beta2 * st.v[i] + (one - self.beta2) * g[i] * g[i];
                let m_hat = st.m[i] / bc1;
                let v_hat = st.v[i] / bc2;
                p[i] = p[i] - self.lr * m_hat / (v_hat.sqrt() + self.eps);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_lr_against_gradient_sign() {
        let mut p = vec![1.0f32, -1.0, 0.5];
        let g = vec![0.3f32, -2.0, 0.0];
        let mut adam = Adam::new(0.1, 0.9, 0.999);
        adam.step(&mut [&mut p], &[&g]);
        assert!((p[0] - 0.9).abs() < 1e-5);
        assert!((p[1] + 0.9).abs() < 1e-5);
        assert_eq!(p[2], 0.5);
        assert_eq!(adam.steps(), 1);
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut p = vec![3.0f32, -4.0];
        let mut adam = Adam::new(0.05, 0.9, 0.999);
        for _ in 0..2000 {
            let g: Vec<f32> = p.iter().map(|x| 2.0 * x).collect();
            adam.step(&mut [&mut p], &[&g]);
        }
        assert!(p.iter().all(|x| x.abs() < 1e-2), "{p:?}");
    }
}
