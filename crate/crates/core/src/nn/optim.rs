//! Adam optimizer with checkpoint-compatible state.

use super::tape::{ParamSet, Tensor};

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(params: &ParamSet, lr: f64) -> Self {
        let m = params.iter().map(|(_, t)| Tensor::zeros(t.raw_dim())).collect();
        let v = params.iter().map(|(_, t)| Tensor::zeros(t.raw_dim())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m,
            v,
        }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    pub fn step(&mut self, params: &mut ParamSet, grads: &[Option<Tensor>]) {
        assert_eq!(grads.len(), params.len(), "grad slots must match params");
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (i, (_, value)) in params.iter_mut().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            m.zip_mut_with(grad, |mm, &g| *mm = self.beta1 * *mm + (1.0 - self.beta1) * g);
            v.zip_mut_with(grad, |vv, &g| *vv = self.beta2 * *vv + (1.0 - self.beta2) * g * g);
            let lr = self.lr;
            let eps = self.eps;
            ndarray::Zip::from(&mut *value)
                .and(&*m)
                .and(&*v)
                .for_each(|p, &mm, &vv| {
                    let mhat = mm / bc1;
                    let vhat = vv / bc2;
                    *p -= lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }

    /// Optimizer state as named tensors, for inclusion in checkpoints.
    pub fn state_tensors(&self, params: &ParamSet) -> Vec<(String, Tensor)> {
        let mut out = Vec::with_capacity(2 * self.m.len() + 1);
        for (i, (name, _)) in params.iter().enumerate() {
            out.push((format!("opt.m.{name}"), self.m[i].clone()));
            out.push((format!("opt.v.{name}"), self.v[i].clone()));
        }
        out.push((
            "opt.t".to_string(),
            Tensor::from_elem(ndarray::IxDyn(&[1]), self.t as f64),
        ));
        out
    }

    pub fn load_state(
        &mut self,
        params: &ParamSet,
        mut lookup: impl FnMut(&str) -> Option<Tensor>,
    ) {
        for (i, (name, _)) in params.iter().enumerate() {
            if let Some(m) = lookup(&format!("opt.m.{name}")) {
                self.m[i] = m;
            }
            if let Some(v) = lookup(&format!("opt.v.{name}")) {
                self.v[i] = v;
            }
        }
        if let Some(t) = lookup("opt.t") {
            self.t = t[[0]] as u64;
        }
    }

    /// Rounds state through f32, matching checkpoint precision so a resumed
    /// run continues bit-identically to an uninterrupted one.
    pub fn quantize_f32(&mut self) {
        for t in self.m.iter_mut().chain(self.v.iter_mut()) {
            t.mapv_inplace(|x| x as f32 as f64);
        }
    }
}

/// Rounds every parameter through f32 (see [`Adam::quantize_f32`]).
pub fn quantize_params_f32(params: &mut ParamSet) {
    for (_, t) in params.iter_mut() {
        t.mapv_inplace(|x| x as f32 as f64);
    }
}
