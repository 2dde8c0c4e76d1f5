use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bias-corrected Adam with per-tensor learning rates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Steps taken so far.
    pub t: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(params: &[Tensor<f32>], beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: params.iter().map(|p| vec![0.0; p.shape().len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.shape().len()]).collect(),
        }
    }

    /// One update. `grads[i] == None` leaves tensor `i` and its moments
    /// untouched; `lrs[i]` is the learning rate of tensor `i`.
    ///
    /// Non-finite gradients abort before anything is modified.
    pub fn step(
        &mut self,
        params: &mut [Tensor<f32>],
        grads: &[Option<Tensor<f32>>],
        lrs: &[f64],
        names: &[String],
    ) -> Result<()> {
        if params.len() != grads.len() || params.len() != lrs.len() || params.len() != self.m.len() {
            return Err(Error::dim("adam", "parameter", self.m.len(), params.len()));
        }
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            params[i].shape().expect(&g.shape(), "adam")?;
            if let Some(at) = g.data().iter().position(|v| !v.is_finite()) {
                let name = names.get(i).map(String::as_str).unwrap_or("?");
                return Err(Error::Numeric(format!(
                    "non-finite gradient {} in {name}[{at}] at optimizer step {}",
                    g.data()[at],
                    self.t + 1
                )));
            }
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &gv), mv), vv) in params[i].data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
                let gv = f64::from(gv);
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                let update = lrs[i] * (*mv / c1) / ((*vv / c2).sqrt() + self.eps);
                *p = (f64::from(*p) - update) as f32;
            }
        }
        Ok(())
    }
}
