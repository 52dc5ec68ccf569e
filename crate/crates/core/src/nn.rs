//! Named parameters and the convolutional building blocks of the tracker.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autograd::{Gradients, Graph, Tensor, Var};

/// Named trainable tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Puts every parameter on the graph, tracked when `trainable`.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Parameters whose name starts with `prefix`, bound as constants; the
    /// rest are left off the graph.
    pub fn bind_prefix(&self, g: &mut Graph, prefix: &str) -> Bound {
        let vars = self
            .tensors
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(k, t)| (k.clone(), g.constant(t.clone())))
            .collect();
        Bound { vars }
    }
}

/// Graph handles for a [`ParamStore`].
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    /// Gradients keyed by parameter name; parameters the loss does not reach
    /// get zeros.
    pub fn gradients(&self, g: &Graph, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let t = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (k.clone(), t)
            })
            .collect()
    }
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(shape, |_| dist.sample(rng))
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
}

impl Conv2d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            stride,
        }
    }

    fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan_in = (self.in_ch * self.kernel * self.kernel) as f64;
        store.insert(
            self.weight(),
            normal_tensor(&[self.out_ch, self.in_ch, self.kernel, self.kernel], (2.0 / fan_in).sqrt(), rng),
        );
        store.insert(self.bias(), Tensor::zeros(&[self.out_ch]));
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv2d(x, p.get(&self.weight()), Some(p.get(&self.bias())), self.stride, self.kernel / 2)
    }
}

/// Two 3×3 convolutions with instance normalization and a residual path;
/// the path gets a strided 1×1 projection when the shape changes.
#[derive(Clone, Debug)]
pub struct ResBlock2d {
    conv1: Conv2d,
    conv2: Conv2d,
    down: Option<Conv2d>,
}

impl ResBlock2d {
    pub fn new(name: &str, in_ch: usize, out_ch: usize, stride: usize) -> Self {
        let down = (stride != 1 || in_ch != out_ch)
            .then(|| Conv2d::new(format!("{name}.down"), in_ch, out_ch, 1, stride));
        Self {
            conv1: Conv2d::new(format!("{name}.conv1"), in_ch, out_ch, 3, stride),
            conv2: Conv2d::new(format!("{name}.conv2"), out_ch, out_ch, 3, 1),
            down,
        }
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
        if let Some(d) = &self.down {
            d.init(store, rng);
        }
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = self.conv1.forward(g, p, x);
        let y = g.instance_norm(y);
        let y = g.relu(y);
        let y = self.conv2.forward(g, p, y);
        let y = g.instance_norm(y);
        let skip = match &self.down {
            Some(d) => {
                let s = d.forward(g, p, x);
                g.instance_norm(s)
            }
            None => x,
        };
        let sum = g.add(y, skip);
        g.relu(sum)
    }
}

#[derive(Clone, Debug)]
pub struct Conv1d {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub dilation: usize,
    /// Multiplier on the He-normal initialization scale.
    pub init_gain: f64,
}

impl Conv1d {
    pub fn new(name: impl Into<String>, in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            name: name.into(),
            in_ch,
            out_ch,
            kernel,
            dilation,
            init_gain: 1.0,
        }
    }

    pub fn with_gain(mut self, gain: f64) -> Self {
        self.init_gain = gain;
        self
    }

    pub fn weight(&self) -> String {
        format!("{}.weight", self.name)
    }

    pub fn bias(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        let fan_in = (self.in_ch * self.kernel) as f64;
        store.insert(
            self.weight(),
            normal_tensor(&[self.out_ch, self.in_ch, self.kernel], self.init_gain * (2.0 / fan_in).sqrt(), rng),
        );
        store.insert(self.bias(), Tensor::zeros(&[self.out_ch]));
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        g.conv1d(x, p.get(&self.weight()), Some(p.get(&self.bias())), self.dilation)
    }
}

/// Residual pair of dilated kernel-3 temporal convolutions.
#[derive(Clone, Debug)]
pub struct ResBlock1d {
    conv1: Conv1d,
    conv2: Conv1d,
}

impl ResBlock1d {
    pub fn new(name: &str, width: usize, dilation: usize) -> Self {
        Self {
            conv1: Conv1d::new(format!("{name}.conv1"), width, width, 3, dilation),
            conv2: Conv1d::new(format!("{name}.conv2"), width, width, 3, dilation).with_gain(0.5),
        }
    }

    /// Frames on either side that influence one output.
    pub fn reach(&self) -> usize {
        2 * self.conv1.dilation
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) {
        self.conv1.init(store, rng);
        self.conv2.init(store, rng);
    }

    pub fn forward(&self, g: &mut Graph, p: &Bound, x: Var) -> Var {
        let y = self.conv1.forward(g, p, x);
        let y = g.relu(y);
        let y = self.conv2.forward(g, p, y);
        let sum = g.add(x, y);
        g.relu(sum)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::gradcheck;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn blocks_have_expected_shapes_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let block = ResBlock2d::new("b", 2, 3, 2);
        block.init(&mut store, &mut rng);
        assert_eq!(store.len(), 6);
        let x = Tensor::from_fn(&[1, 2, 6, 6], |i| ((i * 7) % 11) as f64 / 11.0);
        let mut g = Graph::new();
        let p = store.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let y = block.forward(&mut g, &p, xv);
        assert_eq!(g.shape(y), &[1, 3, 3, 3]);

        let r = gradcheck::check(&[x], 1e-5, |g, v| {
            let p = store.bind(g, false);
            let y = block.forward(g, &p, v[0]);
            let w = g.constant(Tensor::from_fn(&[1, 3, 3, 3], |i| (i as f64 * 0.3).sin()));
            let m = g.mul(y, w);
            g.sum_all(m)
        });
        assert!(r.relative < 1e-5, "{r:?}");
    }

    #[test]
    fn temporal_block_reach() {
        let b = ResBlock1d::new("t", 4, 4);
        assert_eq!(b.reach(), 8);
    }
}
