//! AdamW with decoupled weight decay.

use crate::diffcore::Tensor;

pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// First/second moment per parameter block, in visit order.
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
}

impl AdamW {
    pub fn new(shapes: &[Vec<usize>], beta1: f64, beta2: f64, weight_decay: f64) -> Self {
        AdamW {
            beta1,
            beta2,
            eps: 1e-8,
            weight_decay,
            m: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            v: shapes.iter().map(|s| Tensor::zeros(s.clone())).collect(),
            t: 0,
        }
    }

    /// Advance the step counter; call once per optimizer step before
    /// updating blocks.
    pub fn begin_step(&mut self) {
        self.t += 1;
    }

    /// Update one parameter block in place.
    ///
    /// p <- p - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * p)
    pub fn update(&mut self, index: usize, param: &mut Tensor, grad: &Tensor, lr: f64) {
        assert_eq!(param.shape(), grad.shape(), "gradient shape mismatch");
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let m = self.m[index].data_mut();
        let v = self.v[index].data_mut();
        for ((p, g), (m, v)) in param
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            *m = self.beta1 * *m + (1.0 - self.beta1) * g;
            *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + self.eps) + self.weight_decay * *p);
        }
    }
}
