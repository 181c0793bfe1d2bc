//! Named parameter storage and small feed-forward building blocks.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::tensor::{Graph, Result, Tensor, Var};

/// Handle to one tensor in a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Ordered, named collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    /// Gaussian init with standard deviation `1/sqrt(fan_in)`.
    pub fn add_scaled(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        rng: &mut impl Rng,
    ) -> ParamId {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("positive std");
        let len = shape.iter().product();
        let data = (0..len).map(|_| dist.sample(rng)).collect();
        self.add(name, Tensor::new(shape.to_vec(), data).expect("shape matches"))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Registers every parameter as a leaf on `g`.
    pub fn bind(&self, g: &Graph) -> Bound {
        Bound {
            vars: self.values.iter().map(|t| g.param(t.clone())).collect(),
        }
    }
}

/// Tape variables for a [`ParamStore`] on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps variables already on a graph, in [`ParamStore`] order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Identity,
    Tanh,
}

/// Stack of affine layers, tanh between them, configurable final activation.
/// With no layers it is the identity map.
#[derive(Clone, Debug)]
pub struct FeedForward {
    layers: Vec<(ParamId, ParamId)>,
    dims: Vec<usize>,
    last: Activation,
}

impl FeedForward {
    /// `dims = [input, hidden.., output]`; `dims = [d]` gives the identity.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        dims: &[usize],
        last: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(!dims.is_empty(), "feed-forward needs an input width");
        let mut layers = Vec::new();
        for (i, w) in dims.windows(2).enumerate() {
            let wid = store.add_scaled(format!("{prefix}.{i}.weight"), &[w[0], w[1]], w[0], rng);
            let bid = store.add(format!("{prefix}.{i}.bias"), Tensor::zeros(&[w[1]]));
            layers.push((wid, bid));
        }
        FeedForward {
            layers,
            dims: dims.to_vec(),
            last,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn is_identity(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn layers(&self) -> &[(ParamId, ParamId)] {
        &self.layers
    }

    /// Applies the net to the rows of `x: [m, input]`.
    pub fn forward(&self, g: &Graph, p: &Bound, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len().saturating_sub(1);
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = g.affine(h, p.var(w), p.var(b))?;
            if i < last || self.last == Activation::Tanh {
                h = g.tanh(h)?;
            }
        }
        Ok(h)
    }
}

/// Broadcasts a 1-D `v` to `rows` identical rows.
pub fn repeat_rows(g: &Graph, v: Var, rows: usize) -> Result<Var> {
    let d = g.shape(v).iter().product::<usize>();
    let row = g.reshape(v, &[1, d])?;
    let ones = g.constant(Tensor::filled(&[rows, 1], 1.0));
    g.matmul(ones, row)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn identity_net_passes_input_through() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ff = FeedForward::new(&mut store, "psi", &[3], Activation::Tanh, &mut rng);
        assert!(store.is_empty());
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0]).unwrap());
        let y = ff.forward(&g, &p, x).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn zero_weights_give_bias() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let ff = FeedForward::new(&mut store, "f", &[2, 4, 3], Activation::Identity, &mut rng);
        for (i, &(w, b)) in ff.layers().iter().enumerate() {
            store.get_mut(w).data_mut().fill(0.0);
            if i == 1 {
                store.get_mut(b).data_mut().copy_from_slice(&[0.1, 0.2, 0.3]);
            }
        }
        let g = Graph::new();
        let p = store.bind(&g);
        let x = g.constant(Tensor::matrix(2, 2, vec![5.0, 6.0, 7.0, 8.0]).unwrap());
        let y = ff.forward(&g, &p, x).unwrap();
        assert_eq!(g.value(y).data(), &[0.1, 0.2, 0.3, 0.1, 0.2, 0.3]);
    }

    #[test]
    fn two_layer_matches_direct_evaluation() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ff = FeedForward::new(&mut store, "f", &[2, 3, 1], Activation::Identity, &mut rng);
        let x = [0.4, -1.3];
        let (w0, b0) = ff.layers()[0];
        let (w1, _) = ff.layers()[1];
        let w0 = store.get(w0).clone();
        let w1 = store.get(w1).clone();
        let mut expected = 0.0;
        for j in 0..3 {
            let pre = x[0] * w0.at(0, j) + x[1] * w0.at(1, j) + store.get(b0).data()[j];
            expected += pre.tanh() * w1.at(j, 0);
        }
        let g = Graph::new();
        let p = store.bind(&g);
        let xv = g.constant(Tensor::matrix(1, 2, x.to_vec()).unwrap());
        let y = ff.forward(&g, &p, xv).unwrap();
        assert!((g.value(y).item() - expected).abs() < 1e-14);
    }
}
