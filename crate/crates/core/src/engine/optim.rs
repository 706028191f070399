//! Adaptive moment estimation with decoupled weight decay.

use crate::error::{shape_err, Result};
use crate::params::Params;
use crate::tensor::{Real, Tensor};

pub struct AdamW<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Real> AdamW<T> {
    pub fn new(lr: f64, weight_decay: f64, params: &Params<T>) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamW { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay, step: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over the registry; grads align with registry order and may
    /// be None where no gradient flowed.
    pub fn apply(&mut self, params: &mut Params<T>, grads: &[Option<Tensor<T>>]) -> Result<()> {
        if grads.len() != params.len() {
            return Err(shape_err(format!(
                "{} grads for {} params",
                grads.len(),
                params.len()
            )));
        }
        self.step += 1;
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (ob1, ob2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let lr = T::of(self.lr);
        let wd = T::of(self.weight_decay);
        let eps = T::of(self.eps);
        let (ibc1, ibc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));

        for (i, (_, p)) in params.iter_mut().enumerate() {
            let Some(g) = &grads[i] else { continue };
            if g.shape() != p.shape() {
                return Err(shape_err(format!(
                    "grad shape {:?} vs param {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
            let mut m = self.m[i].to_vec();
            let mut v = self.v[i].to_vec();
            let mut pd = p.to_vec();
            for j in 0..pd.len() {
                let gj = g.data()[j];
                m[j] = b1 * m[j] + ob1 * gj;
                v[j] = b2 * v[j] + ob2 * gj * gj;
                let mhat = m[j] * ibc1;
                let vhat = v[j] * ibc2;
                pd[j] = pd[j] - lr * (mhat / (vhat.sqrt() + eps) + wd * pd[j]);
            }
            self.m[i] = Tensor::from_vec(p.shape().to_vec(), m)?;
            self.v[i] = Tensor::from_vec(p.shape().to_vec(), v)?;
            *p = Tensor::from_vec(p.shape().to_vec(), pd)?;
        }
        Ok(())
    }

    /// Flatten optimizer state for checkpointing, keyed by parameter name.
    pub fn export_state(&self, params: &Params<T>, prefix: &str, out: &mut Params<T>) {
        for (i, (name, _)) in params.iter().enumerate() {
            out.insert(format!("{prefix}/m/{name}"), self.m[i].clone());
            out.insert(format!("{prefix}/v/{name}"), self.v[i].clone());
        }
        out.insert(
            format!("{prefix}/t"),
            Tensor::from_vec(vec![1], vec![T::of(self.step as f64)]).unwrap(),
        );
    }

    pub fn import_state(
        &mut self,
        params: &Params<T>,
        prefix: &str,
        saved: &Params<T>,
    ) -> Result<()> {
        for (i, (name, _)) in params.iter().enumerate() {
            self.m[i] = saved.get(&format!("{prefix}/m/{name}"))?.clone();
            self.v[i] = saved.get(&format!("{prefix}/v/{name}"))?.clone();
        }
        self.step = saved.get(&format!("{prefix}/t"))?.item().to_f64() as u64;
        Ok(())
    }
}
