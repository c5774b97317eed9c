//! Node-level building blocks: semantic embeddings, prediction heads, the
//! edge-gated residual GCN, and the fusion operators that merge two views of
//! the same nodes.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Mode, Tape, Var};
use crate::error::{Error, Result};
use crate::params::{kaiming_uniform, ParamId, ParamStore, LINEAR_GAIN};
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tensor::Tensor;
use crate::EMBED_DIM;

/// Semantic branch a node belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeKind {
    Fae,
    Cae,
    Ar,
}

impl NodeKind {
    pub const ALL: [NodeKind; 3] = [NodeKind::Fae, NodeKind::Cae, NodeKind::Ar];

    pub fn name(self) -> &'static str {
        match self {
            NodeKind::Fae => "fae",
            NodeKind::Cae => "cae",
            NodeKind::Ar => "ar",
        }
    }
}

fn linear_params<T: Real>(
    store: &mut ParamStore<T>,
    rng: &mut SeededRng,
    prefix: &str,
    out: usize,
    inp: usize,
) -> Result<(ParamId, ParamId)> {
    let w = store.add_param(&format!("{prefix}.weight"), kaiming_uniform(rng, &[out, inp], inp, LINEAR_GAIN))?;
    let b = store.add_param(&format!("{prefix}.bias"), Tensor::zeros([out]))?;
    Ok((w, b))
}

/// `nodes` parallel linear maps `feature → 64`, one weight block per node.
///
/// Stored as a single `[nodes·64, in]` matrix whose row block `k` belongs to
/// node `k` alone.
#[derive(Debug, Clone)]
pub struct EmbeddingBlock {
    weight: ParamId,
    bias: ParamId,
    nodes: usize,
    in_dim: usize,
}

impl EmbeddingBlock {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        nodes: usize,
        in_dim: usize,
    ) -> Result<Self> {
        let (weight, bias) = linear_params(store, rng, prefix, nodes * EMBED_DIM, in_dim)?;
        Ok(EmbeddingBlock {
            weight,
            bias,
            nodes,
            in_dim,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    /// `feature: [N, in]` → node set `[N, nodes, 64]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, feature: Var) -> Result<Var> {
        let shape = tape.shape(feature).to_vec();
        if shape.len() != 2 || shape[1] != self.in_dim {
            return Err(Error::Contract(format!(
                "embedding block expects [N, {}] features, got {shape:?}",
                self.in_dim
            )));
        }
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let flat = tape.linear(feature, w, Some(b))?;
        tape.reshape(flat, &[shape[0], self.nodes, EMBED_DIM])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    /// Sigmoid probability.
    Event,
    /// Raw linear output.
    Rating,
}

/// One 1-unit linear layer per node.
#[derive(Debug, Clone)]
pub struct NodeHeads {
    weight: ParamId,
    bias: ParamId,
    kind: HeadKind,
    nodes: usize,
}

impl NodeHeads {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        nodes: usize,
        kind: HeadKind,
    ) -> Result<Self> {
        let weight = store.add_param(
            &format!("{prefix}.weight"),
            kaiming_uniform(rng, &[nodes, EMBED_DIM], EMBED_DIM, LINEAR_GAIN),
        )?;
        let bias = store.add_param(&format!("{prefix}.bias"), Tensor::zeros([nodes]))?;
        Ok(NodeHeads {
            weight,
            bias,
            kind,
            nodes,
        })
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    /// `h: [N, nodes, 64]` → `[N, nodes]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let logits = tape.node_dot(h, w, b)?;
        Ok(match self.kind {
            HeadKind::Event => tape.sigmoid(logits),
            HeadKind::Rating => logits,
        })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }
}

/// Edge-gated residual graph convolution on a fully connected graph:
/// `h_i' = relu(U h_i + mean_{j≠i} η_ij ⊙ V h_j) + h_i`,
/// `η_ij = sigmoid(A h_i + B h_j)`.
#[derive(Debug, Clone)]
pub struct GatedGcnLayer {
    u: (ParamId, ParamId),
    v: (ParamId, ParamId),
    a: (ParamId, ParamId),
    b: (ParamId, ParamId),
}

impl GatedGcnLayer {
    pub fn new<T: Real>(store: &mut ParamStore<T>, rng: &mut SeededRng, prefix: &str) -> Result<Self> {
        let mut lin = |name: &str| linear_params(store, rng, &format!("{prefix}.{name}"), EMBED_DIM, EMBED_DIM);
        Ok(GatedGcnLayer {
            u: lin("u")?,
            v: lin("v")?,
            a: lin("a")?,
            b: lin("b")?,
        })
    }

    pub fn param_ids(&self) -> [ParamId; 8] {
        [
            self.u.0, self.u.1, self.v.0, self.v.1, self.a.0, self.a.1, self.b.0, self.b.1,
        ]
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, h: Var) -> Result<Var> {
        let lin = |tape: &mut Tape<T>, (w, b): (ParamId, ParamId)| {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            tape.linear(h, w, Some(b))
        };
        let uh = lin(tape, self.u)?;
        let vh = lin(tape, self.v)?;
        let ah = lin(tape, self.a)?;
        let bh = lin(tape, self.b)?;
        let agg = tape.edge_gate_mean(ah, bh, vh)?;
        let pre = tape.add(uh, agg)?;
        let act = tape.relu(pre);
        tape.add(act, h)
    }
}

/// A stack of gated GCN layers over a fixed number of nodes, with dropout
/// after every layer.
#[derive(Debug, Clone)]
pub struct GcnStack {
    layers: Vec<GatedGcnLayer>,
    nodes: usize,
}

impl GcnStack {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        nodes: usize,
        depth: usize,
    ) -> Result<Self> {
        let layers = (0..depth)
            .map(|i| GatedGcnLayer::new(store, rng, &format!("{prefix}.layer{i}")))
            .collect::<Result<_>>()?;
        Ok(GcnStack { layers, nodes })
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn layers(&self) -> &[GatedGcnLayer] {
        &self.layers
    }

    /// `h: [N, nodes, 64]`; node order is preserved.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        h: Var,
        dropout: f64,
        mode: &mut Mode<'_>,
    ) -> Result<Var> {
        let shape = tape.shape(h).to_vec();
        if shape.len() != 3 || shape[1] != self.nodes || shape[2] != EMBED_DIM {
            return Err(Error::Contract(format!(
                "graph expects [N, {}, {EMBED_DIM}] nodes, got {shape:?}",
                self.nodes
            )));
        }
        let mut x = h;
        for layer in &self.layers {
            x = layer.forward(tape, store, x)?;
            x = tape.dropout(x, dropout, mode)?;
        }
        Ok(x)
    }
}

/// How two embeddings of the same nodes are merged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum FusionMode {
    /// `softmax(Q Kᵀ / √64) K` with `Q = EV1`, `K = V = EV2`.
    #[default]
    Attention,
    Addition,
    /// `linear(128 → 64)` over `[EV1 ‖ EV2]`.
    Concat,
    Hadamard,
    /// `(W1 EV1 + b1) ⊙ sigmoid(W2 EV2 + b)`, where `b` is `b1` when the bias
    /// is shared.
    Gating,
}

impl FusionMode {
    pub const ALL: [FusionMode; 5] = [
        FusionMode::Addition,
        FusionMode::Concat,
        FusionMode::Hadamard,
        FusionMode::Gating,
        FusionMode::Attention,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMode::Attention => "attention",
            FusionMode::Addition => "addition",
            FusionMode::Concat => "concat",
            FusionMode::Hadamard => "hadamard",
            FusionMode::Gating => "gating",
        }
    }
}

impl core::str::FromStr for FusionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Input(format!("unknown fusion mode {s:?}")))
    }
}

#[derive(Debug, Clone)]
enum FusionParams {
    None,
    Projections {
        q: (ParamId, ParamId),
        k: (ParamId, ParamId),
        v: (ParamId, ParamId),
    },
    Concat(ParamId, ParamId),
    Gating {
        w1: ParamId,
        b1: ParamId,
        w2: ParamId,
        b2: Option<ParamId>,
    },
}

/// Output of [`Fusion::forward`].
#[derive(Debug, Clone, Copy)]
pub struct Fused {
    pub nodes: Var,
    /// Attention weights `[N, n, n]` (attention mode only).
    pub weights: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct Fusion {
    mode: FusionMode,
    params: FusionParams,
}

impl Fusion {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        rng: &mut SeededRng,
        prefix: &str,
        mode: FusionMode,
        attention_projections: bool,
        gating_shared_bias: bool,
    ) -> Result<Self> {
        let d = EMBED_DIM;
        let params = match mode {
            FusionMode::Attention if attention_projections => FusionParams::Projections {
                q: linear_params(store, rng, &format!("{prefix}.q"), d, d)?,
                k: linear_params(store, rng, &format!("{prefix}.k"), d, d)?,
                v: linear_params(store, rng, &format!("{prefix}.v"), d, d)?,
            },
            FusionMode::Attention | FusionMode::Addition | FusionMode::Hadamard => FusionParams::None,
            FusionMode::Concat => {
                let (w, b) = linear_params(store, rng, &format!("{prefix}.proj"), d, 2 * d)?;
                FusionParams::Concat(w, b)
            }
            FusionMode::Gating => {
                let (w1, b1) = linear_params(store, rng, &format!("{prefix}.w1"), d, d)?;
                let w2 = store.add_param(&format!("{prefix}.w2.weight"), kaiming_uniform(rng, &[d, d], d, LINEAR_GAIN))?;
                let b2 = if gating_shared_bias {
                    None
                } else {
                    Some(store.add_param(&format!("{prefix}.w2.bias"), Tensor::zeros([d]))?)
                };
                FusionParams::Gating { w1, b1, w2, b2 }
            }
        };
        Ok(Fusion { mode, params })
    }

    pub fn mode(&self) -> FusionMode {
        self.mode
    }

    /// Fuses `ev1` and `ev2`, both `[N, n, 64]`.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, ev1: Var, ev2: Var) -> Result<Fused> {
        let (s1, s2) = (tape.shape(ev1).to_vec(), tape.shape(ev2).to_vec());
        if s1 != s2 || s1.len() != 3 || s1[2] != EMBED_DIM {
            return Err(Error::shape("fuse", &s1, &s2));
        }
        let plain = |nodes| Ok(Fused { nodes, weights: None });
        match (&self.mode, &self.params) {
            (FusionMode::Addition, _) => plain(tape.add(ev1, ev2)?),
            (FusionMode::Hadamard, _) => plain(tape.hadamard(ev1, ev2)?),
            (FusionMode::Concat, FusionParams::Concat(w, b)) => {
                let cat = tape.concat(&[ev1, ev2], 2)?;
                let (w, b) = (tape.param(store, *w), tape.param(store, *b));
                plain(tape.linear(cat, w, Some(b))?)
            }
            (FusionMode::Gating, FusionParams::Gating { w1, b1, w2, b2 }) => {
                let (w1, b1v) = (tape.param(store, *w1), tape.param(store, *b1));
                let left = tape.linear(ev1, w1, Some(b1v))?;
                let w2 = tape.param(store, *w2);
                let gate_bias = match b2 {
                    Some(b2) => tape.param(store, *b2),
                    None => b1v,
                };
                let right = tape.linear(ev2, w2, Some(gate_bias))?;
                let gate = tape.sigmoid(right);
                plain(tape.hadamard(left, gate)?)
            }
            (FusionMode::Attention, params) => {
                let (q, k, v) = match params {
                    FusionParams::Projections { q, k, v } => {
                        let mut proj = |x: Var, (w, b): (ParamId, ParamId)| {
                            let w = tape.param(store, w);
                            let b = tape.param(store, b);
                            tape.linear(x, w, Some(b))
                        };
                        (proj(ev1, *q)?, proj(ev2, *k)?, proj(ev2, *v)?)
                    }
                    _ => (ev1, ev2, ev2),
                };
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scaled = tape.scale(scores, T::one() / T::of(EMBED_DIM as f64).sqrt());
                let weights = tape.softmax(scaled, 2)?;
                let nodes = tape.matmul(weights, v)?;
                Ok(Fused {
                    nodes,
                    weights: Some(weights),
                })
            }
            _ => Err(Error::Contract("fusion parameters do not match mode".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn nodes(rng: &mut SeededRng, n: usize) -> Tensor<f64> {
        Tensor::new([2, n, EMBED_DIM], (0..2 * n * EMBED_DIM).map(|_| rng.normal()).collect()).unwrap()
    }

    #[test]
    fn zero_weight_layer_is_the_residual_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(1);
        let layer = GatedGcnLayer::new(&mut store, &mut rng, "g").unwrap();
        for id in layer.param_ids() {
            store.param_mut(id).data_mut().fill(0.0);
        }
        let h = nodes(&mut rng, 4);
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let y = layer.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y).data(), h.data());
    }

    #[test]
    fn single_node_sees_no_neighbours() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(2);
        let layer = GatedGcnLayer::new(&mut store, &mut rng, "g").unwrap();
        let h = nodes(&mut rng, 1);
        let mut tape = Tape::new();
        let x = tape.constant(h.clone());
        let y = layer.forward(&mut tape, &store, x).unwrap();
        let (w, b) = (store.param(layer.u.0).data(), store.param(layer.u.1).data());
        let d = EMBED_DIM;
        let mut want = vec![0.0; 2 * d];
        for s in 0..2 {
            let hs = &h.data()[s * d..(s + 1) * d];
            for o in 0..d {
                let pre: f64 = b[o] + (0..d).map(|i| w[o * d + i] * hs[i]).sum::<f64>();
                want[s * d + o] = pre.max(0.0) + hs[o];
            }
        }
        for (got, want) in tape.value(y).data().iter().zip(&want) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn parameter_free_fusions_are_elementwise() {
        let mut rng = SeededRng::new(3);
        let (a, b) = (nodes(&mut rng, 3), nodes(&mut rng, 3));
        for (mode, f) in [
            (FusionMode::Addition, (|x, y| x + y) as fn(f64, f64) -> f64),
            (FusionMode::Hadamard, |x, y| x * y),
        ] {
            let mut store = ParamStore::<f64>::new();
            let fusion = Fusion::new(&mut store, &mut rng, "f", mode, false, false).unwrap();
            assert_eq!(store.param_ids().count(), 0);
            let mut tape = Tape::new();
            let (x, y) = (tape.constant(a.clone()), tape.constant(b.clone()));
            let out = fusion.forward(&mut tape, &store, x, y).unwrap();
            assert!(out.weights.is_none());
            let want: Vec<f64> = a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect();
            assert_eq!(tape.value(out.nodes).data(), &want[..]);
        }
    }

    #[test]
    fn stack_rejects_wrong_node_count() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = SeededRng::new(4);
        let stack = GcnStack::new(&mut store, &mut rng, "s", 3, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(nodes(&mut rng, 4));
        assert!(stack.forward(&mut tape, &store, x, 0.0, &mut Mode::Eval).is_err());
    }
}
