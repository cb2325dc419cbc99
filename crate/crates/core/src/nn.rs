//! Named parameter storage and the small set of layers the model is built from.

use std::collections::HashMap;
use std::ops::{Deref, DerefMut};
use std::sync::Arc;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{Gradients, Graph, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Clusterer, decoder, fusion and projection head.
    Head,
    /// Unfrozen backbone blocks.
    Backbone,
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Array2<T>>,
    pub trainable: bool,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    /// Registers a parameter. Names are unique; registering a name twice panics.
    pub fn add(
        &mut self,
        name: impl Into<String>,
        value: Array2<T>,
        trainable: bool,
        group: ParamGroup,
    ) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            value: Arc::new(value),
            trainable,
            group,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Array2<T> {
        &self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| p.trainable)
            .map(|(id, _)| id)
            .collect()
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Replaces a parameter's value, checking the shape is unchanged.
    pub fn set_value(&mut self, id: ParamId, value: Array2<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.dim() != value.dim() {
            return Err(Error::Shape(format!(
                "parameter {} expects {:?}, got {:?}",
                p.name,
                p.value.dim(),
                value.dim()
            )));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Mutable access for in-place optimizer updates.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Array2<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }
}

/// A graph bound to a parameter store. Parameters enter the graph lazily, as
/// trainable leaves when the store marks them trainable and as constants
/// otherwise.
pub struct Session<'a, T: Scalar> {
    pub graph: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
}

impl<'a, T: Scalar> Session<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Session {
            graph: Graph::new(),
            store,
            bound: vec![None; store.len()],
        }
    }

    pub fn store(&self) -> &'a ParamStore<T> {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let p = self.store.get(id);
        let v = self.graph.shared_leaf(Arc::clone(&p.value), p.trainable);
        self.bound[id.0] = Some(v);
        v
    }

    /// Gradients of every bound trainable parameter. Parameters the output does
    /// not depend on get an explicit zero matrix.
    pub fn param_grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Array2<T>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let p = &self.store.params[i];
                if !p.trainable {
                    return None;
                }
                Some((ParamId(i), grads.get_or_zeros(v, p.value.dim())))
            })
            .collect()
    }
}

impl<T: Scalar> Deref for Session<'_, T> {
    type Target = Graph<T>;
    fn deref(&self) -> &Graph<T> {
        &self.graph
    }
}

impl<T: Scalar> DerefMut for Session<'_, T> {
    fn deref_mut(&mut self) -> &mut Graph<T> {
        &mut self.graph
    }
}

pub fn uniform<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize),
    bound: f64,
) -> Array2<T> {
    Array2::from_shape_fn(shape, |_| T::lit(rng.random_range(-bound..=bound)))
}

pub fn normal<T: Scalar, R: Rng + ?Sized>(
    rng: &mut R,
    shape: (usize, usize),
    std: f64,
) -> Array2<T> {
    Array2::from_shape_fn(shape, |_| {
        let z: f64 = StandardNormal.sample(rng);
        T::lit(z * std)
    })
}

/// Fully connected layer, weight stored input-major.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// PyTorch-style uniform(-1/sqrt(in), 1/sqrt(in)) initialisation.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        group: ParamGroup,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            uniform(rng, (in_dim, out_dim), bound),
            true,
            group,
        );
        let bias = store.add(
            format!("{name}.bias"),
            uniform(rng, (1, out_dim), bound),
            true,
            group,
        );
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let w = s.param(self.weight);
        let b = s.param(self.bias);
        s.affine(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        dim: usize,
        eps: f64,
        group: ParamGroup,
    ) -> Self {
        let gamma = store.add(
            format!("{name}.weight"),
            Array2::ones((1, dim)),
            true,
            group,
        );
        let beta = store.add(
            format!("{name}.bias"),
            Array2::zeros((1, dim)),
            true,
            group,
        );
        LayerNorm { gamma, beta, eps }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let n = s.layer_norm_rows(x, T::lit(self.eps));
        let g = s.param(self.gamma);
        let b = s.param(self.beta);
        let scaled = s.mul_row(n, g);
        s.add_row(scaled, b)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<T: Scalar>(self, g: &mut Graph<T>, x: Var) -> Var {
        match self {
            Activation::Relu => g.relu(x),
            Activation::Gelu => g.gelu(x),
        }
    }
}

/// Stack of linear layers with an activation between consecutive layers and
/// none after the last.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

impl Mlp {
    /// `dims` lists every width from input to output, so `dims.len() - 1` layers.
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        dims: &[usize],
        activation: Activation,
        group: ParamGroup,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs at least one layer");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, rng, &format!("{name}.{i}"), w[0], w[1], group))
            .collect();
        Mlp { layers, activation }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var) -> Var {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h);
            if i < last {
                h = self.activation.apply(&mut s.graph, h);
            }
        }
        h
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().map(|l| l.out_dim).unwrap_or(0)
    }
}

/// Gated recurrent cell with PyTorch `GRUCell` gate layout (reset, update, new).
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub dim: usize,
}

impl GruCell {
    pub fn new<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        in_dim: usize,
        hidden_dim: usize,
        group: ParamGroup,
    ) -> Self {
        let bound = 1.0 / (hidden_dim as f64).sqrt();
        let mut make = |suffix: &str, rows: usize| {
            let weight = store.add(
                format!("{name}.weight_{suffix}"),
                uniform(rng, (rows, 3 * hidden_dim), bound),
                true,
                group,
            );
            let bias = store.add(
                format!("{name}.bias_{suffix}"),
                uniform(rng, (1, 3 * hidden_dim), bound),
                true,
                group,
            );
            Linear {
                weight,
                bias,
                in_dim: rows,
                out_dim: 3 * hidden_dim,
            }
        };
        let input = make("ih", in_dim);
        let hidden = make("hh", hidden_dim);
        GruCell {
            input,
            hidden,
            dim: hidden_dim,
        }
    }

    pub fn forward<T: Scalar>(&self, s: &mut Session<'_, T>, x: Var, h: Var) -> Var {
        let d = self.dim;
        let gi = self.input.forward(s, x);
        let gh = self.hidden.forward(s, h);
        let (ir, iz, inn) = (s.slice_cols(gi, 0, d), s.slice_cols(gi, d, d), s.slice_cols(gi, 2 * d, d));
        let (hr, hz, hn) = (s.slice_cols(gh, 0, d), s.slice_cols(gh, d, d), s.slice_cols(gh, 2 * d, d));
        let r_pre = s.add(ir, hr);
        let r = s.sigmoid(r_pre);
        let z_pre = s.add(iz, hz);
        let z = s.sigmoid(z_pre);
        let gated = s.mul(r, hn);
        let n_pre = s.add(inn, gated);
        let n = s.tanh(n_pre);
        let keep_new = s.one_minus(z);
        let a = s.mul(keep_new, n);
        let b = s.mul(z, h);
        s.add(a, b)
    }
}
