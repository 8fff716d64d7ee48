//! AdamW with decoupled weight decay and per-group hyperparameters.

use std::collections::BTreeMap;

use crate::tensor::Tensor;
use crate::Error;

/// Named parameter tensors, iterated in name order everywhere so training is
/// deterministic.
#[derive(Default, Clone)]
pub struct ParamStore {
    params: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.params.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, Error> {
        self.params.get(name).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor, Error> {
        self.params.get_mut(name).ok_or_else(|| Error::UnknownParam(name.into()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }
}

/// One learning-rate group: parameter names matched by exact name or by
/// `prefix/` when the spec ends in '/'.
#[derive(Debug, Clone)]
pub struct ParamGroup {
    pub pattern: String,
    pub lr: f64,
    /// Decoupled decay coefficient; 0 disables decay for the group.
    pub weight_decay: f64,
}

impl ParamGroup {
    pub fn new(pattern: impl Into<String>, lr: f64, weight_decay: f64) -> Self {
        Self { pattern: pattern.into(), lr, weight_decay }
    }

    fn matches(&self, name: &str) -> bool {
        if let Some(prefix) = self.pattern.strip_suffix('/') {
            name.starts_with(prefix) && name[prefix.len()..].starts_with('/')
        } else {
            self.pattern == name
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-15 }
    }
}

/// Per-parameter first/second moment accumulators plus the shared step count.
pub struct AdamW {
    cfg: AdamConfig,
    groups: Vec<ParamGroup>,
    m: BTreeMap<String, Tensor>,
    v: BTreeMap<String, Tensor>,
    step: u64,
}

impl AdamW {
    pub fn new(cfg: AdamConfig, groups: Vec<ParamGroup>) -> Self {
        Self { cfg, groups, m: BTreeMap::new(), v: BTreeMap::new(), step: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    fn group_for(&self, name: &str) -> Option<&ParamGroup> {
        self.groups.iter().find(|g| g.matches(name))
    }

    /// One AdamW update over every parameter the group list covers.
    /// Parameters without a gradient this step see a zero gradient (their
    /// moments decay and decay-enabled groups still shrink).
    pub fn step(
        &mut self,
        params: &mut ParamStore,
        grads: &BTreeMap<String, Tensor>,
    ) -> Result<(), Error> {
        for (name, g) in grads {
            let p = params.get(name)?;
            if g.shape() != p.shape() {
                return Err(Error::ShapeMismatch {
                    op: "adamw_step",
                    lhs: p.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { context: format!("gradient of {}", name) });
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        let names: Vec<String> = params.names().cloned().collect();
        for name in names {
            let Some(group) = self.group_for(&name) else { continue };
            let (lr, wd) = (group.lr, group.weight_decay);
            let p = params.get_mut(&name)?;
            let zero;
            let g = match grads.get(&name) {
                Some(g) => g,
                None => {
                    zero = Tensor::zeros(p.shape());
                    &zero
                }
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let v = self.v.entry(name.clone()).or_insert_with(|| Tensor::zeros(p.shape()));
            let (b1, b2, eps) = (self.cfg.beta1, self.cfg.beta2, self.cfg.eps);
            for i in 0..p.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let mhat = mi / bc1;
                let vhat = vi / bc2;
                let mut pi = p.data()[i];
                pi -= lr * mhat / (vhat.sqrt() + eps);
                if wd > 0.0 {
                    pi -= lr * wd * pi;
                }
                p.data_mut()[i] = pi;
            }
        }
        Ok(())
    }

    /// Moment tensors for checkpointing, flat-named `m/<param>` and `v/<param>`.
    pub fn export_state(&self) -> (BTreeMap<String, Tensor>, u64) {
        let mut out = BTreeMap::new();
        for (k, t) in &self.m {
            out.insert(format!("m/{}", k), t.clone());
        }
        for (k, t) in &self.v {
            out.insert(format!("v/{}", k), t.clone());
        }
        (out, self.step)
    }

    pub fn import_state(&mut self, state: &BTreeMap<String, Tensor>, step: u64) {
        self.m.clear();
        self.v.clear();
        for (k, t) in state {
            if let Some(name) = k.strip_prefix("m/") {
                self.m.insert(name.to_string(), t.clone());
            } else if let Some(name) = k.strip_prefix("v/") {
                self.v.insert(name.to_string(), t.clone());
            }
        }
        self.step = step;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(v: f64) -> ParamStore {
        let mut p = ParamStore::new();
        p.insert("w", Tensor::scalar(v));
        p
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m-hat = g, v-hat = g^2, so the update is lr * g/|g| = lr.
        let mut opt = AdamW::new(AdamConfig::default(), vec![ParamGroup::new("w", 1e-3, 0.0)]);
        let mut p = one_param(0.5);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::scalar(1.0));
        opt.step(&mut p, &grads).unwrap();
        let got = p.get("w").unwrap().item();
        assert!((got - (0.5 - 1e-3)).abs() < 1e-12, "got {}", got);
    }

    #[test]
    fn zero_grad_no_decay_leaves_param_unchanged() {
        let mut opt = AdamW::new(AdamConfig::default(), vec![ParamGroup::new("w", 1e-3, 0.0)]);
        let mut p = one_param(0.7);
        opt.step(&mut p, &BTreeMap::new()).unwrap();
        assert_eq!(p.get("w").unwrap().item(), 0.7);
    }

    #[test]
    fn zero_grad_with_decay_scales_param() {
        let (lr, wd) = (5e-4, 0.001);
        let mut opt = AdamW::new(AdamConfig::default(), vec![ParamGroup::new("w", lr, wd)]);
        let mut p = one_param(0.7);
        opt.step(&mut p, &BTreeMap::new()).unwrap();
        let got = p.get("w").unwrap().item();
        assert!((got - 0.7 * (1.0 - lr * wd)).abs() < 1e-15, "got {}", got);
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut opt = AdamW::new(AdamConfig::default(), vec![ParamGroup::new("w", 1e-3, 0.0)]);
        let mut p = one_param(0.0);
        let mut grads = BTreeMap::new();
        grads.insert("w".to_string(), Tensor::zeros(&[2]));
        assert!(opt.step(&mut p, &grads).is_err());
    }

    #[test]
    fn prefix_groups_match_nested_names() {
        let g = ParamGroup::new("dec/mlp/", 1.0, 0.0);
        assert!(g.matches("dec/mlp/0/w0"));
        assert!(!g.matches("dec/mlpx/0/w0"));
        assert!(!g.matches("dec/mlp"));
    }
}
