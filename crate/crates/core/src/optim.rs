//! Adam with bias correction, one optimiser per parameter group.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::nn::ParamStore;
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One Adam update of `params` in place; `t` is the 1-based step number.
///
/// Moment arithmetic is carried out in `f64` and stored back in `S`.
pub fn adam_step<S: Scalar>(
    params: &mut [S],
    grads: &[S],
    m: &mut [S],
    v: &mut [S],
    t: u64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() || m.len() != params.len() || v.len() != params.len() {
        return Err(dim_err!(
            "adam: {} params, {} grads, {} and {} moments",
            params.len(),
            grads.len(),
            m.len(),
            v.len()
        ));
    }
    if t == 0 {
        return Err(Error::Contract("adam step numbers start at 1".into()));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient at element {i}")));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i].to_f64();
        let mi = cfg.beta1 * m[i].to_f64() + (1.0 - cfg.beta1) * g;
        let vi = cfg.beta2 * v[i].to_f64() + (1.0 - cfg.beta2) * g * g;
        m[i] = S::from_f64(mi);
        v[i] = S::from_f64(vi);
        let step = cfg.lr * (mi / c1) / ((vi / c2).sqrt() + cfg.eps);
        params[i] = S::from_f64(params[i].to_f64() - step);
    }
    Ok(())
}

/// Adam over the store parameters whose names start with any of `prefixes`.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<S: Scalar = f32> {
    pub cfg: AdamConfig,
    pub prefixes: Vec<String>,
    pub t: u64,
    moments: BTreeMap<String, (Tensor<S>, Tensor<S>)>,
}

impl<S: Scalar> Adam<S> {
    pub fn new(cfg: AdamConfig, prefixes: &[&str]) -> Self {
        Self {
            cfg,
            prefixes: prefixes.iter().map(|p| p.to_string()).collect(),
            t: 0,
            moments: BTreeMap::new(),
        }
    }

    pub fn owns(&self, name: &str) -> bool {
        self.prefixes.iter().any(|p| name.starts_with(p.as_str()))
    }

    /// Applies `grads` to the owned parameters. Parameters without a gradient
    /// are left alone. All gradients are checked before anything is written.
    pub fn step(&mut self, store: &mut ParamStore<S>, grads: &BTreeMap<String, Tensor<S>>) -> Result<()> {
        let owned: Vec<(&String, &Tensor<S>)> = grads.iter().filter(|(n, _)| self.owns(n)).collect();
        for (name, g) in &owned {
            if !g.all_finite() {
                return Err(Error::Numerical(format!("non-finite gradient for {name}")));
            }
        }
        self.t += 1;
        for (name, g) in owned {
            let p = store.get_mut(name)?;
            if p.shape() != g.shape() {
                return Err(dim_err!("gradient of {name} has shape {:?}, parameter {:?}", g.shape(), p.shape()));
            }
            let (m, v) = self
                .moments
                .entry(name.clone())
                .or_insert_with(|| (Tensor::zeros(g.shape()), Tensor::zeros(g.shape())));
            adam_step(p.data_mut(), g.data(), m.data_mut(), v.data_mut(), self.t, &self.cfg)?;
        }
        Ok(())
    }

    /// Moments and step counter as named tensors under `prefix`.
    pub fn export(&self, prefix: &str) -> Vec<(String, Tensor<f32>)> {
        let mut out = vec![(format!("{prefix}.t"), Tensor::scalar(self.t as f32))];
        for (name, (m, v)) in &self.moments {
            out.push((format!("{prefix}.m.{name}"), m.cast()));
            out.push((format!("{prefix}.v.{name}"), v.cast()));
        }
        out
    }

    /// Restores state written by [`Adam::export`].
    pub fn import(&mut self, prefix: &str, tensors: &BTreeMap<String, Tensor<f32>>) -> Result<()> {
        let t = tensors
            .get(&format!("{prefix}.t"))
            .ok_or_else(|| Error::Format(format!("checkpoint lacks {prefix}.t")))?;
        self.t = t.item() as u64;
        self.moments.clear();
        let m_prefix = format!("{prefix}.m.");
        for (key, m) in tensors.range(m_prefix.clone()..) {
            let Some(name) = key.strip_prefix(&m_prefix) else { break };
            let v = tensors
                .get(&format!("{prefix}.v.{name}"))
                .ok_or_else(|| Error::Format(format!("checkpoint lacks second moment of {name}")))?;
            self.moments.insert(name.to_string(), (m.cast(), v.cast()));
        }
        Ok(())
    }
}
