use rand::Rng;

use super::graph::{Conv2dSpec, Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.add_uniform(format!("{name}.weight"), &[fan_in, fan_out], fan_in, rng);
        let b = bias.then(|| store.add_uniform(format!("{name}.bias"), &[fan_out], fan_in, rng));
        Linear { w, b }
    }

    /// Same as [`Linear::new`] with every weight set to zero.
    pub fn zeroed(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let w = store.add(format!("{name}.weight"), Tensor::zeros(vec![fan_in, fan_out]));
        let b = Some(store.add(format!("{name}.bias"), Tensor::zeros(vec![fan_out])));
        Linear { w, b }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = self.b.map(|b| g.param(store, b));
        g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    spec: Conv2dSpec,
}

impl Conv2d {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        spec: Conv2dSpec,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = spec.kh * spec.kw * cin;
        let w = store.add_uniform(format!("{name}.weight"), &[fan_in, cout], fan_in, rng);
        let b = store.add_uniform(format!("{name}.bias"), &[cout], fan_in, rng);
        Conv2d { w, b, spec }
    }

    pub fn zeroed(store: &mut ParamStore, name: &str, cin: usize, cout: usize, spec: Conv2dSpec) -> Self {
        let fan_in = spec.kh * spec.kw * cin;
        let w = store.add(format!("{name}.weight"), Tensor::zeros(vec![fan_in, cout]));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
        Conv2d { w, b, spec }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        g.conv2d(x, w, Some(b), self.spec)
    }
}

#[derive(Clone, Debug)]
pub struct GroupNorm {
    gamma: ParamId,
    beta: ParamId,
    groups: usize,
}

impl GroupNorm {
    pub const EPS: f32 = 1e-5;

    /// Uses the largest group count `<= max_groups` that divides `channels`.
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, max_groups: usize) -> Self {
        let groups = (1..=max_groups.min(channels).max(1))
            .rev()
            .find(|g| channels.is_multiple_of(*g))
            .unwrap_or(1);
        let gamma = store.add(format!("{name}.gamma"), Tensor::full(vec![channels], 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        GroupNorm {
            gamma,
            beta,
            groups,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gamma = g.param(store, self.gamma);
        let beta = g.param(store, self.beta);
        g.group_norm(x, gamma, beta, self.groups, Self::EPS)
    }
}
