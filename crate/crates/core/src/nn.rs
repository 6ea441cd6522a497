//! Small dense networks with exact reverse-mode gradients: the shared MLP
//! actor and the topology-aware graph-attention critic.
//!
//! Tensors are row-major `Array2<f64>`; biases are stored as `1 × n` rows.
//! Batches put samples on the leading axis.

use std::fs;
use std::io::Read;
use std::path::Path;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub value: Array2<f64>,
}

/// Flat, ordered collection of named weight matrices. Gradients use the
/// same type and layout.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    tensors: Vec<Tensor>,
}

impl ParameterSet {
    pub fn new() -> Self {
        ParameterSet::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Array2<f64>) -> usize {
        self.tensors.push(Tensor {
            name: name.into(),
            value,
        });
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, i: usize) -> &Array2<f64> {
        &self.tensors[i].value
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Array2<f64> {
        &mut self.tensors[i].value
    }

    pub fn name(&self, i: usize) -> &str {
        &self.tensors[i].name
    }

    pub fn by_name(&self, name: &str) -> Option<&Array2<f64>> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.value)
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor {
                    name: t.name.clone(),
                    value: Array2::zeros(t.value.raw_dim()),
                })
                .collect(),
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    /// Global L2 norm over every tensor, summed in tensor order.
    pub fn norm(&self) -> f64 {
        self.tensors
            .iter()
            .map(|t| t.value.iter().map(|x| x * x).sum::<f64>())
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, c: f64) {
        for t in &mut self.tensors {
            t.value.mapv_inplace(|x| x * c);
        }
    }

    /// `self += c * other`
    pub fn add_scaled(&mut self, other: &ParameterSet, c: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.value.scaled_add(c, &b.value);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.iter().all(|x| x.is_finite()))
    }

    /// Overwrites values from `other`, which must carry identical names and
    /// shapes in the same order.
    pub fn assign_from(&mut self, other: &ParameterSet) -> Result<(), NnError> {
        if self.len() != other.len() {
            return Err(NnError::Shape(format!(
                "expected {} tensors, found {}",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.tensors.iter().zip(&other.tensors) {
            if a.name != b.name || a.value.dim() != b.value.dim() {
                return Err(NnError::Shape(format!(
                    "expected {} {:?}, found {} {:?}",
                    a.name,
                    a.value.dim(),
                    b.name,
                    b.value.dim()
                )));
            }
        }
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            a.value.assign(&b.value);
        }
        Ok(())
    }

    /// Tensors whose names start with `prefix`, as a new set.
    pub fn subset(&self, prefix: &str) -> ParameterSet {
        ParameterSet {
            tensors: self.tensors.iter().filter(|t| t.name.starts_with(prefix)).cloned().collect(),
        }
    }

    pub fn extend(&mut self, other: &ParameterSet) {
        self.tensors.extend(other.tensors.iter().cloned());
    }
}

fn glorot<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Array2::from_shape_fn((fan_in, fan_out), |_| rng.random_range(-limit..=limit))
}

fn tanh_grad(grad: &Array2<f64>, activated: &Array2<f64>) -> Array2<f64> {
    grad * &activated.mapv(|a| 1.0 - a * a)
}

fn check_finite(x: &Array2<f64>, what: &str) -> Result<(), NnError> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(NnError::NonFinite(what.to_string()))
    }
}

/// A stack of affine layers with tanh on hidden layers (and optionally on the
/// output). Weight and bias tensors live in an external [`ParameterSet`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub sizes: Vec<usize>,
    pub tanh_output: bool,
    /// Index of the first weight tensor; layer `l` uses `first + 2l` (W) and `first + 2l + 1` (b).
    pub first: usize,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Inputs to each layer; `inputs[0]` is the network input.
    pub inputs: Vec<Array2<f64>>,
    pub output: Array2<f64>,
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        params: &mut ParameterSet,
        prefix: &str,
        sizes: &[usize],
        tanh_output: bool,
        rng: &mut R,
    ) -> Mlp {
        assert!(sizes.len() >= 2, "an MLP needs input and output sizes");
        let first = params.len();
        for (l, w) in sizes.windows(2).enumerate() {
            params.push(format!("{prefix}.l{l}.w"), glorot(w[0], w[1], rng));
            params.push(format!("{prefix}.l{l}.b"), Array2::zeros((1, w[1])));
        }
        Mlp {
            sizes: sizes.to_vec(),
            tanh_output,
            first,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("non-empty sizes")
    }

    fn activated(&self, l: usize) -> bool {
        l + 1 < self.num_layers() || self.tanh_output
    }

    pub fn forward(&self, params: &ParameterSet, input: &Array2<f64>) -> Result<MlpCache, NnError> {
        if input.ncols() != self.input_dim() {
            return Err(NnError::Shape(format!(
                "MLP expects {} inputs, got {}",
                self.input_dim(),
                input.ncols()
            )));
        }
        check_finite(input, "MLP input")?;
        let mut inputs = Vec::with_capacity(self.num_layers());
        let mut x = input.clone();
        for l in 0..self.num_layers() {
            let w = params.get(self.first + 2 * l);
            let b = params.get(self.first + 2 * l + 1);
            let mut z = x.dot(w) + b;
            if self.activated(l) {
                z.mapv_inplace(f64::tanh);
            }
            inputs.push(x);
            x = z;
        }
        Ok(MlpCache { inputs, output: x })
    }

    /// Accumulates parameter gradients into `grads` and returns d(loss)/d(input).
    pub fn backward(
        &self,
        params: &ParameterSet,
        cache: &MlpCache,
        grad_out: &Array2<f64>,
        grads: &mut ParameterSet,
    ) -> Array2<f64> {
        let mut g = grad_out.clone();
        for l in (0..self.num_layers()).rev() {
            let out = if l + 1 == self.num_layers() {
                &cache.output
            } else {
                &cache.inputs[l + 1]
            };
            if self.activated(l) {
                g = tanh_grad(&g, out);
            }
            let x = &cache.inputs[l];
            *grads.get_mut(self.first + 2 * l) += &x.t().dot(&g);
            *grads.get_mut(self.first + 2 * l + 1) += &g.sum_axis(Axis(0)).insert_axis(Axis(0));
            g = g.dot(&params.get(self.first + 2 * l).t());
        }
        g
    }
}

/// Convenience forward pass returning only the output.
pub fn mlp_forward(mlp: &Mlp, params: &ParameterSet, input: &Array2<f64>) -> Result<Array2<f64>, NnError> {
    Ok(mlp.forward(params, input)?.output)
}

pub fn log_softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|z| z - lse);
    }
    out
}

/// Decentralised policy: observation → tanh encoder → categorical logits.
#[derive(Debug, Clone, PartialEq)]
pub struct Actor {
    pub params: ParameterSet,
    pub net: Mlp,
}

impl Actor {
    pub fn new<R: Rng + ?Sized>(obs_dim: usize, hidden: &[usize], num_actions: usize, rng: &mut R) -> Actor {
        let mut params = ParameterSet::new();
        let mut sizes = vec![obs_dim];
        sizes.extend_from_slice(hidden);
        sizes.push(num_actions);
        let net = Mlp::init(&mut params, "actor", &sizes, false, rng);
        Actor { params, net }
    }

    pub fn obs_dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn num_actions(&self) -> usize {
        self.net.output_dim()
    }

    pub fn forward(&self, obs: &Array2<f64>) -> Result<MlpCache, NnError> {
        self.net.forward(&self.params, obs)
    }

    pub fn log_probs(&self, obs: &Array2<f64>) -> Result<Array2<f64>, NnError> {
        Ok(log_softmax_rows(&self.forward(obs)?.output))
    }

    /// Action probabilities for one observation.
    pub fn probs(&self, obs: &[f64]) -> Result<Vec<f64>, NnError> {
        let x = Array2::from_shape_vec((1, obs.len()), obs.to_vec()).map_err(|e| NnError::Shape(e.to_string()))?;
        Ok(self.log_probs(&x)?.row(0).iter().map(|l| l.exp()).collect())
    }

    /// Samples an action by inverse CDF; returns it with its log-probability.
    pub fn sample<R: Rng + ?Sized>(&self, obs: &[f64], rng: &mut R) -> Result<(usize, f64), NnError> {
        let probs = self.probs(obs)?;
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut choice = probs.len() - 1;
        for (a, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                choice = a;
                break;
            }
        }
        Ok((choice, probs[choice].ln()))
    }

    pub fn greedy(&self, obs: &[f64]) -> Result<usize, NnError> {
        let probs = self.probs(obs)?;
        let mut best = 0;
        for (a, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = a;
            }
        }
        Ok(best)
    }

    /// Batched action sampling (one row per agent). Consumes one uniform draw
    /// per row, in row order.
    pub fn sample_batch<R: Rng + ?Sized>(&self, obs: &Array2<f64>, rng: &mut R) -> Result<Vec<(usize, f64)>, NnError> {
        let logp = self.log_probs(obs)?;
        Ok(logp
            .rows()
            .into_iter()
            .map(|row| {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut choice = row.len() - 1;
                for (a, l) in row.iter().enumerate() {
                    acc += l.exp();
                    if u < acc {
                        choice = a;
                        break;
                    }
                }
                (choice, row[choice])
            })
            .collect())
    }
}

/// Ego-centric graph of one agent as seen by the centralised critic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoGraph {
    pub ego: Vec<f64>,
    /// One row per other UAV slot; masked rows are all zero.
    pub neighbors: Vec<Vec<f64>>,
    pub mask: Vec<bool>,
    /// Ground-station entity, always present.
    pub anchor: Vec<f64>,
}

impl EgoGraph {
    /// Applies `perm` to neighbor rows and their mask bits together.
    pub fn permuted(&self, perm: &[usize]) -> EgoGraph {
        EgoGraph {
            ego: self.ego.clone(),
            neighbors: perm.iter().map(|&i| self.neighbors[i].clone()).collect(),
            mask: perm.iter().map(|&i| self.mask[i]).collect(),
            anchor: self.anchor.clone(),
        }
    }
}

/// Uniform random permutation of neighbor rows (mask follows its row); the
/// ego row and the anchor stay in place.
pub fn ros_shuffle<R: Rng + ?Sized>(graph: &EgoGraph, rng: &mut R) -> EgoGraph {
    let mut perm: Vec<usize> = (0..graph.neighbors.len()).collect();
    perm.shuffle(rng);
    graph.permuted(&perm)
}

/// Batched ego graphs. `others` stacks, per sample, the neighbor rows followed
/// by the anchor row (`slots` rows per sample).
#[derive(Debug, Clone, PartialEq)]
pub struct EgoGraphBatch {
    pub ego: Array2<f64>,
    pub others: Array2<f64>,
    pub mask: Vec<bool>,
    pub slots: usize,
}

impl EgoGraphBatch {
    pub fn from_graphs(graphs: &[&EgoGraph]) -> Result<EgoGraphBatch, NnError> {
        let first = graphs.first().ok_or_else(|| NnError::Shape("empty ego-graph batch".into()))?;
        let dim = first.ego.len();
        let slots = first.neighbors.len() + 1;
        let b = graphs.len();
        let mut ego = Array2::zeros((b, dim));
        let mut others = Array2::zeros((b * slots, dim));
        let mut mask = Vec::with_capacity(b * slots);
        for (i, g) in graphs.iter().enumerate() {
            if g.ego.len() != dim || g.anchor.len() != dim || g.neighbors.len() + 1 != slots || g.mask.len() + 1 != slots {
                return Err(NnError::Shape(format!("ego graph {i} does not match batch layout")));
            }
            ego.row_mut(i).assign(&ArrayView1::from(&g.ego));
            for (s, row) in g.neighbors.iter().enumerate() {
                if row.len() != dim {
                    return Err(NnError::Shape(format!("neighbor row of width {} in sample {i}", row.len())));
                }
                if g.mask[s] {
                    others.row_mut(i * slots + s).assign(&ArrayView1::from(row));
                }
                mask.push(g.mask[s]);
            }
            others.row_mut(i * slots + slots - 1).assign(&ArrayView1::from(&g.anchor));
            mask.push(true);
        }
        Ok(EgoGraphBatch { ego, others, mask, slots })
    }

    pub fn len(&self) -> usize {
        self.ego.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.ego.nrows() == 0
    }

    pub fn entity_dim(&self) -> usize {
        self.ego.ncols()
    }
}

/// Output of one masked scaled-dot-product attention read.
#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub scores: Vec<f64>,
    /// Softmax weights per slot; zero for masked slots.
    pub weights: Vec<f64>,
    pub context: Array1<f64>,
}

/// Masked softmax attention of one query over projected keys and values.
/// With every slot masked the context is zero.
pub fn attend(query: ArrayView1<f64>, keys: ArrayView2<f64>, values: ArrayView2<f64>, mask: &[bool]) -> Attention {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let n = keys.nrows();
    let scores: Vec<f64> = (0..n)
        .map(|j| if mask[j] { keys.row(j).dot(&query) * scale } else { f64::NEG_INFINITY })
        .collect();
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut weights = vec![0.0; n];
    let mut context = Array1::zeros(values.ncols());
    if max.is_finite() {
        let mut total = 0.0;
        for j in 0..n {
            if mask[j] {
                weights[j] = (scores[j] - max).exp();
                total += weights[j];
            }
        }
        for j in 0..n {
            weights[j] /= total;
            if weights[j] != 0.0 {
                context.scaled_add(weights[j], &values.row(j));
            }
        }
    }
    Attention {
        scores,
        weights,
        context,
    }
}

/// Gradients of one [`attend`] call with respect to query, keys and values.
pub struct AttentionGrads {
    pub query: Array1<f64>,
    pub keys: Array2<f64>,
    pub values: Array2<f64>,
}

pub fn attend_backward(
    query: ArrayView1<f64>,
    keys: ArrayView2<f64>,
    values: ArrayView2<f64>,
    att: &Attention,
    grad_context: ArrayView1<f64>,
) -> AttentionGrads {
    let scale = 1.0 / (query.len() as f64).sqrt();
    let n = keys.nrows();
    let d_alpha: Vec<f64> = (0..n).map(|j| grad_context.dot(&values.row(j))).collect();
    let mean: f64 = (0..n).map(|j| att.weights[j] * d_alpha[j]).sum();
    let mut g_query = Array1::zeros(query.len());
    let mut g_keys = Array2::zeros(keys.raw_dim());
    let mut g_values = Array2::zeros(values.raw_dim());
    for j in 0..n {
        let a = att.weights[j];
        if a == 0.0 {
            continue;
        }
        g_values.row_mut(j).scaled_add(a, &grad_context);
        let d_score = a * (d_alpha[j] - mean) * scale;
        g_query.scaled_add(d_score, &keys.row(j));
        g_keys.row_mut(j).scaled_add(d_score, &query);
    }
    AttentionGrads {
        query: g_query,
        keys: g_keys,
        values: g_values,
    }
}

/// Projects embeddings with W_Q, W_K, W_V and attends from the ego embedding
/// over the neighbor embeddings.
pub fn attention_forward(
    w_q: &Array2<f64>,
    w_k: &Array2<f64>,
    w_v: &Array2<f64>,
    h_ego: ArrayView1<f64>,
    h_neighbors: ArrayView2<f64>,
    mask: &[bool],
) -> Result<Attention, NnError> {
    if h_ego.iter().chain(h_neighbors.iter()).any(|x| x.is_nan()) {
        return Err(NnError::NonFinite("attention input".into()));
    }
    if mask.len() != h_neighbors.nrows() {
        return Err(NnError::Shape("mask length differs from neighbor count".into()));
    }
    let q = h_ego.dot(w_q);
    let k = h_neighbors.dot(w_k);
    let v = h_neighbors.dot(w_v);
    Ok(attend(q.view(), k.view(), v.view(), mask))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatDims {
    pub entity_dim: usize,
    pub d_model: usize,
    pub d_attn: usize,
    pub head_hidden: usize,
}

impl GatDims {
    pub fn standard(entity_dim: usize) -> Self {
        GatDims {
            entity_dim,
            d_model: 128,
            d_attn: 64,
            head_hidden: 128,
        }
    }
}

const ENC_W: usize = 0;
const ENC_B: usize = 1;
const W_Q: usize = 2;
const W_K: usize = 3;
const W_V: usize = 4;
const W_SELF: usize = 5;

/// Topology-aware graph-attention critic: shared entity encoder, attention
/// over neighbors and the GBS anchor, and an ego skip path fused by the head.
#[derive(Debug, Clone, PartialEq)]
pub struct GatCritic {
    pub params: ParameterSet,
    pub dims: GatDims,
    pub head: Mlp,
}

#[derive(Debug, Clone)]
pub struct GatCache {
    h_ego: Array2<f64>,
    h_others: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    attention: Vec<Attention>,
    head: MlpCache,
}

impl GatCache {
    pub fn attention_weights(&self, sample: usize) -> &[f64] {
        &self.attention[sample].weights
    }
}

impl GatCritic {
    pub fn new<R: Rng + ?Sized>(dims: GatDims, rng: &mut R) -> GatCritic {
        let d = dims.d_model;
        let mut params = ParameterSet::new();
        params.push("critic.enc.w", glorot(dims.entity_dim, d, rng));
        params.push("critic.enc.b", Array2::zeros((1, d)));
        params.push("critic.w_q", glorot(d, dims.d_attn, rng));
        params.push("critic.w_k", glorot(d, dims.d_attn, rng));
        params.push("critic.w_v", glorot(d, d, rng));
        params.push("critic.w_self", glorot(d, d, rng));
        let head = Mlp::init(&mut params, "critic.head", &[2 * d, dims.head_hidden, 1], false, rng);
        GatCritic { params, dims, head }
    }

    fn encode(&self, x: &Array2<f64>) -> Array2<f64> {
        (x.dot(self.params.get(ENC_W)) + self.params.get(ENC_B)).mapv(f64::tanh)
    }

    pub fn forward(&self, batch: &EgoGraphBatch) -> Result<(Array1<f64>, GatCache), NnError> {
        if batch.entity_dim() != self.dims.entity_dim {
            return Err(NnError::Shape(format!(
                "critic expects entity width {}, got {}",
                self.dims.entity_dim,
                batch.entity_dim()
            )));
        }
        check_finite(&batch.ego, "critic ego rows")?;
        check_finite(&batch.others, "critic neighbor rows")?;
        let b = batch.len();
        let s = batch.slots;
        let h_ego = self.encode(&batch.ego);
        let h_others = self.encode(&batch.others);
        let q = h_ego.dot(self.params.get(W_Q));
        let k = h_others.dot(self.params.get(W_K));
        let v = h_others.dot(self.params.get(W_V));
        let mut context = Array2::zeros((b, self.dims.d_model));
        let mut attention = Vec::with_capacity(b);
        for i in 0..b {
            let rows = s![i * s..(i + 1) * s, ..];
            let att = attend(q.row(i), k.slice(rows), v.slice(rows), &batch.mask[i * s..(i + 1) * s]);
            context.row_mut(i).assign(&att.context);
            attention.push(att);
        }
        let ego_path = h_ego.dot(self.params.get(W_SELF));
        let fused = concatenate(Axis(1), &[ego_path.view(), context.view()]).expect("equal row counts");
        let head = self.head.forward(&self.params, &fused)?;
        let values = head.output.column(0).to_owned();
        Ok((
            values,
            GatCache {
                h_ego,
                h_others,
                q,
                k,
                v,
                attention,
                head,
            },
        ))
    }

    pub fn values(&self, batch: &EgoGraphBatch) -> Result<Array1<f64>, NnError> {
        Ok(self.forward(batch)?.0)
    }

    /// Gradient of Σ_i grad_values[i] · V_i with respect to every parameter.
    pub fn backward(&self, batch: &EgoGraphBatch, cache: &GatCache, grad_values: &Array1<f64>) -> ParameterSet {
        let mut grads = self.params.zeros_like();
        let d = self.dims.d_model;
        let b = batch.len();
        let s = batch.slots;
        let g_out = grad_values.clone().insert_axis(Axis(1));
        let g_fused = self.head.backward(&self.params, &cache.head, &g_out, &mut grads);
        let g_ego_path = g_fused.slice(s![.., ..d]).to_owned();
        let g_context = g_fused.slice(s![.., d..]);

        *grads.get_mut(W_SELF) += &cache.h_ego.t().dot(&g_ego_path);
        let mut g_h_ego = g_ego_path.dot(&self.params.get(W_SELF).t());

        let mut g_q = Array2::zeros(cache.q.raw_dim());
        let mut g_k = Array2::zeros(cache.k.raw_dim());
        let mut g_v = Array2::zeros(cache.v.raw_dim());
        for i in 0..b {
            let rows = s![i * s..(i + 1) * s, ..];
            let ag = attend_backward(
                cache.q.row(i),
                cache.k.slice(rows),
                cache.v.slice(rows),
                &cache.attention[i],
                g_context.row(i),
            );
            g_q.row_mut(i).assign(&ag.query);
            g_k.slice_mut(rows).assign(&ag.keys);
            g_v.slice_mut(rows).assign(&ag.values);
        }
        *grads.get_mut(W_Q) += &cache.h_ego.t().dot(&g_q);
        *grads.get_mut(W_K) += &cache.h_others.t().dot(&g_k);
        *grads.get_mut(W_V) += &cache.h_others.t().dot(&g_v);
        g_h_ego += &g_q.dot(&self.params.get(W_Q).t());
        let g_h_others = g_k.dot(&self.params.get(W_K).t()) + g_v.dot(&self.params.get(W_V).t());

        let g_pre_ego = tanh_grad(&g_h_ego, &cache.h_ego);
        let g_pre_others = tanh_grad(&g_h_others, &cache.h_others);
        *grads.get_mut(ENC_W) += &(batch.ego.t().dot(&g_pre_ego) + batch.others.t().dot(&g_pre_others));
        *grads.get_mut(ENC_B) += &(g_pre_ego.sum_axis(Axis(0)) + g_pre_others.sum_axis(Axis(0))).insert_axis(Axis(0));
        grads
    }

    pub fn w_self_index() -> usize {
        W_SELF
    }

    pub fn w_v_index() -> usize {
        W_V
    }
}

// ---------------------------------------------------------------------------
// Checkpoints: magic, manifest length (u64 LE), JSON manifest, f64 LE payload.

const MAGIC: &[u8; 8] = b"TAGCKPT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the payload.
    pub offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub seed: u64,
    pub config_hash: String,
    pub controller: String,
    pub episode: usize,
    pub tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(
    path: &Path,
    params: &ParameterSet,
    seed: u64,
    config_hash: &str,
    controller: &str,
    episode: usize,
) -> Result<(), NnError> {
    let mut tensors = Vec::with_capacity(params.len());
    let mut payload = Vec::with_capacity(params.num_scalars() * 8);
    for t in params.tensors() {
        tensors.push(TensorEntry {
            name: t.name.clone(),
            shape: [t.value.nrows(), t.value.ncols()],
            offset: payload.len(),
        });
        for x in t.value.iter() {
            payload.extend_from_slice(&x.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: 1,
        seed,
        config_hash: config_hash.to_string(),
        controller: controller.to_string(),
        episode,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    let mut bytes = Vec::with_capacity(16 + json.len() + payload.len());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(json.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&json);
    bytes.extend_from_slice(&payload);
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Manifest, ParameterSet), NnError> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Manifest, ParameterSet), NnError> {
    let bad = |m: &str| NnError::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing checkpoint magic"));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest"))?;
    let manifest: Manifest = serde_json::from_slice(body).map_err(|e| NnError::Checkpoint(e.to_string()))?;
    if manifest.format_version != 1 {
        return Err(bad("unsupported checkpoint version"));
    }
    let payload = &bytes[16 + len..];
    let mut params = ParameterSet::new();
    let mut expected_offset = 0;
    for e in &manifest.tensors {
        if e.offset != expected_offset {
            return Err(bad(&format!("tensor {} at unexpected offset {}", e.name, e.offset)));
        }
        let n = e.shape[0] * e.shape[1];
        let raw = payload
            .get(e.offset..e.offset + 8 * n)
            .ok_or_else(|| bad(&format!("payload too short for {}", e.name)))?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let value = Array2::from_shape_vec((e.shape[0], e.shape[1]), data).map_err(|e| NnError::Shape(e.to_string()))?;
        params.push(e.name.clone(), value);
        expected_offset += 8 * n;
    }
    if expected_offset != payload.len() {
        return Err(bad("trailing bytes after payload"));
    }
    Ok((manifest, params))
}
