use std::collections::HashMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::tape::{Array, Tape, TensorResult, Var};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: Array,
    /// Only trainable parameters are touched by the optimizer.
    pub trainable: bool,
}

/// Owns every parameter of a model, addressed by unique dotted names.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a new parameter. Panics on a duplicate name: names are fixed
    /// by model construction code, never by user input.
    pub fn add(&mut self, name: impl Into<String>, value: Array) -> ParamId {
        let name = name.into();
        assert!(
            !self.by_name.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Parameter {
            name,
            value,
            trainable: true,
        });
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Total scalar count of parameters whose name starts with `prefix`.
    pub fn count_scalars(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.len())
            .sum()
    }

    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }
}

/// Bindings of parameters to tape leaves, detached from any store borrow.
pub struct ForwardState<'t> {
    bound: HashMap<ParamId, Var<'t>>,
    train: bool,
    track_frozen: bool,
    rng: ChaCha8Rng,
}

/// One forward pass: a tape, read access to the parameters, train/eval mode
/// and the RNG that drives dropout.
pub struct Forward<'t, 's> {
    pub tape: &'t Tape,
    pub store: &'s ParamStore,
    bound: HashMap<ParamId, Var<'t>>,
    pub train: bool,
    /// Bind non-trainable parameters as tracked leaves too, so that frozen
    /// gradients can be audited. The optimizer still skips them.
    pub track_frozen: bool,
    pub rng: ChaCha8Rng,
}

impl<'t, 's> Forward<'t, 's> {
    pub fn new(tape: &'t Tape, store: &'s ParamStore, train: bool, rng: ChaCha8Rng) -> Self {
        Self {
            tape,
            store,
            bound: HashMap::new(),
            train,
            track_frozen: false,
            rng,
        }
    }

    /// Release the store borrow, keeping every binding made so far.
    pub fn suspend(self) -> ForwardState<'t> {
        ForwardState {
            bound: self.bound,
            train: self.train,
            track_frozen: self.track_frozen,
            rng: self.rng,
        }
    }

    pub fn resume(tape: &'t Tape, store: &'s ParamStore, state: ForwardState<'t>) -> Self {
        Self {
            tape,
            store,
            bound: state.bound,
            train: state.train,
            track_frozen: state.track_frozen,
            rng: state.rng,
        }
    }

    /// The parameter as a leaf: tracked when trainable (or when auditing
    /// frozen gradients), constant otherwise. Bound once per tape.
    pub fn param(&mut self, id: ParamId) -> Var<'t> {
        if let Some(v) = self.bound.get(&id) {
            return *v;
        }
        let p = self.store.get(id);
        let v = if p.trainable || self.track_frozen {
            self.tape.leaf(p.value.clone())
        } else {
            self.tape.constant(p.value.clone())
        };
        self.bound.insert(id, v);
        v
    }

    /// A fresh constant copy of the parameter's current value. Gradients
    /// never reach the parameter through it.
    pub fn param_const(&self, id: ParamId) -> Var<'t> {
        self.tape.constant(self.store.get(id).value.clone())
    }

    /// Use `var` for parameter `id` in this pass instead of the stored value.
    pub fn bind(&mut self, id: ParamId, var: Var<'t>) {
        self.bound.insert(id, var);
    }

    pub fn constant(&self, value: Array) -> Var<'t> {
        self.tape.constant(value)
    }

    pub fn dropout(&mut self, x: Var<'t>, p: f64) -> Var<'t> {
        x.dropout(p, self.train, &mut self.rng)
    }

    /// Gradients accumulated so far for every bound, tracked parameter.
    pub fn grads(&self) -> Vec<(ParamId, Array)> {
        collect_grads(self.tape, &self.bound)
    }
}

impl<'t> ForwardState<'t> {
    pub fn grads(&self, tape: &'t Tape) -> Vec<(ParamId, Array)> {
        collect_grads(tape, &self.bound)
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

fn collect_grads<'t>(tape: &'t Tape, bound: &HashMap<ParamId, Var<'t>>) -> Vec<(ParamId, Array)> {
    let mut out: Vec<(ParamId, Array)> = bound
        .iter()
        .filter(|(_, v)| v.requires_grad())
        .map(|(id, v)| {
            let g = tape
                .grad(*v)
                .unwrap_or_else(|| Array::zeros(v.value_ref().raw_dim()));
            (*id, g)
        })
        .collect();
    out.sort_by_key(|(id, _)| *id);
    out
}

/// Affine layer `x W + b`, with `W` stored input-major (in × out).
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    /// Uniform(-1/sqrt(in), 1/sqrt(in)) initialisation for weight and bias.
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let w = Array::from_shape_fn(ndarray::IxDyn(&[in_dim, out_dim]), |_| {
            rng.random_range(-bound..bound)
        });
        let b = Array::from_shape_fn(ndarray::IxDyn(&[out_dim]), |_| {
            rng.random_range(-bound..bound)
        });
        Self {
            weight: store.add(format!("{name}.weight"), w),
            bias: store.add(format!("{name}.bias"), b),
            in_dim,
            out_dim,
        }
    }

    pub fn forward<'t>(&self, fw: &mut Forward<'t, '_>, x: Var<'t>) -> TensorResult<Var<'t>> {
        let w = fw.param(self.weight);
        let b = fw.param(self.bias);
        x.matmul(&w)?.add(&b)
    }

    /// Forward pass reading the parameters as constants.
    pub fn forward_const<'t>(&self, fw: &Forward<'t, '_>, x: Var<'t>) -> TensorResult<Var<'t>> {
        let w = fw.param_const(self.weight);
        let b = fw.param_const(self.bias);
        x.matmul(&w)?.add(&b)
    }

    pub fn param_count(&self) -> usize {
        self.in_dim * self.out_dim + self.out_dim
    }
}

/// Feed-forward stack: `Linear -> GELU -> Dropout` for every hidden layer,
/// then a final linear layer. Layers are named `layer1`, `layer2`, ...
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub dropout: f64,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        dropout: f64,
        rng: &mut R,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output sizes");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.layer{}", i + 1), w[0], w[1], rng))
            .collect();
        Self { layers, dropout }
    }

    pub fn forward<'t>(&self, fw: &mut Forward<'t, '_>, x: Var<'t>) -> TensorResult<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(fw, h)?;
            if i < last {
                h = h.gelu();
                h = fw.dropout(h, self.dropout);
            }
        }
        Ok(h)
    }

    /// Same network with every parameter read as a constant; dropout still
    /// follows `fw.train`.
    pub fn forward_const<'t>(&self, fw: &mut Forward<'t, '_>, x: Var<'t>) -> TensorResult<Var<'t>> {
        let last = self.layers.len() - 1;
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_const(fw, h)?;
            if i < last {
                h = h.gelu();
                h = fw.dropout(h, self.dropout);
            }
        }
        Ok(h)
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].out_dim
    }
}
