//! The full multi-level graph model.
//!
//! Level 1: three backbones feed three embedding blocks (24 fine-event
//! nodes, 7 coarse-event nodes, 1 annoyance node), each node with its own
//! head. Level 2: three local graphs (fine+AR, fine+coarse, coarse+AR) are
//! run through gated GCNs and the two views of every node are fused. Level 3:
//! the 32 fused nodes form one global graph. All nine head groups are
//! returned.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{BatchNormUpdate, Mode, Tape, Var};
use crate::backbone::{Backbone, Pooling};
use crate::error::{Error, Result};
use crate::graph::{EmbeddingBlock, Fusion, FusionMode, GcnStack, HeadKind, NodeHeads, NodeKind};
use crate::params::ParamStore;
use crate::real::Real;
use crate::rng::SeededRng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct ModelConfig {
    pub n_fae: usize,
    pub n_cae: usize,
    pub n_mels: usize,
    /// Output widths of the three conv blocks.
    pub channels: [usize; 3],
    pub pooling: Pooling,
    pub gcn_layers: usize,
    /// Dropout after every embedding block and GCN layer.
    pub dropout: f64,
    pub fusion: FusionMode,
    /// Learned Q/K/V projections in attention fusion (off: plain attention).
    pub attention_projections: bool,
    /// Gating fusion reuses `b1` inside the sigmoid.
    pub gating_shared_bias: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            n_fae: 24,
            n_cae: 7,
            n_mels: 64,
            channels: [64, 192, 512],
            pooling: Pooling::GlobalAverage,
            gcn_layers: 3,
            dropout: 0.2,
            fusion: FusionMode::Attention,
            attention_projections: false,
            gating_shared_bias: true,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_fae == 0 || self.n_cae == 0 {
            return Err(Error::Input("model needs at least one fine and one coarse event".into()));
        }
        if self.channels.contains(&0) || self.gcn_layers == 0 {
            return Err(Error::Input("channel widths and GCN depth must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Input(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.n_mels < Backbone::MIN_FRAMES {
            return Err(Error::Input(format!("need at least {} mel bands", Backbone::MIN_FRAMES)));
        }
        Ok(())
    }

    /// Nodes in the global graph (fine + coarse + annoyance).
    pub fn total_nodes(&self) -> usize {
        self.n_fae + self.n_cae + 1
    }

    pub fn nodes_of(&self, kind: NodeKind) -> usize {
        match kind {
            NodeKind::Fae => self.n_fae,
            NodeKind::Cae => self.n_cae,
            NodeKind::Ar => 1,
        }
    }
}

/// The three local context-aware graphs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LocalGraph {
    /// Fine events + annoyance.
    Fag,
    /// Fine + coarse events.
    Fcg,
    /// Coarse events + annoyance.
    Cag,
}

impl LocalGraph {
    pub const ALL: [LocalGraph; 3] = [LocalGraph::Fag, LocalGraph::Fcg, LocalGraph::Cag];

    pub fn name(self) -> &'static str {
        match self {
            LocalGraph::Fag => "fag",
            LocalGraph::Fcg => "fcg",
            LocalGraph::Cag => "cag",
        }
    }

    /// Node kinds in graph order.
    pub fn members(self) -> [NodeKind; 2] {
        match self {
            LocalGraph::Fag => [NodeKind::Fae, NodeKind::Ar],
            LocalGraph::Fcg => [NodeKind::Fae, NodeKind::Cae],
            LocalGraph::Cag => [NodeKind::Cae, NodeKind::Ar],
        }
    }

    pub fn nodes(self, cfg: &ModelConfig) -> usize {
        self.members().iter().map(|&k| cfg.nodes_of(k)).sum()
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Head outputs of one level, as recorded vars.
#[derive(Debug, Clone, Copy)]
pub struct LevelVars {
    /// `[N, n_fae]` probabilities.
    pub fae: Var,
    /// `[N, n_cae]` probabilities.
    pub cae: Var,
    /// `[N, 1]` raw annoyance ratings.
    pub ar: Var,
}

impl LevelVars {
    pub fn get(&self, kind: NodeKind) -> Var {
        match kind {
            NodeKind::Fae => self.fae,
            NodeKind::Cae => self.cae,
            NodeKind::Ar => self.ar,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub levels: [LevelVars; 3],
    /// Node sets `[N, 32, 64]` at each level in fixed role order
    /// (fine events, coarse events, annoyance).
    pub nodes: [Var; 3],
    /// Outputs of the fAG, fcG and cAG stacks, nodes in member order.
    pub local: [Var; 3],
    /// Attention weights of the fine, coarse and annoyance fusions.
    pub attention: [Option<Var>; 3],
}

/// Plain-value predictions of one level (row-major over the batch).
#[derive(Debug, Clone, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LevelOutput {
    pub fae: Vec<f64>,
    pub cae: Vec<f64>,
    pub ar: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LevelPredictions {
    pub batch: usize,
    pub levels: [LevelOutput; 3],
}

impl LevelPredictions {
    pub fn read<T: Real>(tape: &Tape<T>, out: &ForwardOutput) -> Self {
        let read = |v: Var| tape.value(v).to_f64();
        LevelPredictions {
            batch: tape.shape(out.levels[0].fae)[0],
            levels: out.levels.map(|l| LevelOutput {
                fae: read(l.fae),
                cae: read(l.cae),
                ar: read(l.ar),
            }),
        }
    }

    /// Concatenates predictions of consecutive batches.
    pub fn extend(&mut self, other: &LevelPredictions) {
        self.batch += other.batch;
        for (a, b) in self.levels.iter_mut().zip(&other.levels) {
            a.fae.extend_from_slice(&b.fae);
            a.cae.extend_from_slice(&b.cae);
            a.ar.extend_from_slice(&b.ar);
        }
    }

    pub fn empty() -> Self {
        LevelPredictions {
            batch: 0,
            levels: Default::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct Mlgl<T> {
    config: ModelConfig,
    store: ParamStore<T>,
    backbones: [Backbone; 3],
    embeddings: [EmbeddingBlock; 3],
    /// `heads[level][kind]`.
    heads: [[NodeHeads; 3]; 3],
    local: [GcnStack; 3],
    /// Fusions of the fine, coarse and annoyance nodes.
    fusions: [Fusion; 3],
    global: GcnStack,
}

fn kind_index(kind: NodeKind) -> usize {
    kind as usize
}

impl<T: Real> Mlgl<T> {
    /// Builds the model with Kaiming-uniform weights drawn from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = SeededRng::with_stream(seed, 0x6d6c_676c);
        let c = &config;

        let mut backbones = Vec::with_capacity(3);
        let mut embeddings = Vec::with_capacity(3);
        for kind in NodeKind::ALL {
            let bb = Backbone::new(&mut store, &mut rng, &format!("backbone.{}", kind.name()), c.channels, c.pooling)?;
            embeddings.push(EmbeddingBlock::new(
                &mut store,
                &mut rng,
                &format!("embed.{}", kind.name()),
                c.nodes_of(kind),
                bb.out_dim(),
            )?);
            backbones.push(bb);
        }

        let mut heads = Vec::with_capacity(3);
        for level in 1..=3 {
            let mut per_kind = Vec::with_capacity(3);
            for kind in NodeKind::ALL {
                let head_kind = if kind == NodeKind::Ar { HeadKind::Rating } else { HeadKind::Event };
                per_kind.push(NodeHeads::new(
                    &mut store,
                    &mut rng,
                    &format!("head.l{level}.{}", kind.name()),
                    c.nodes_of(kind),
                    head_kind,
                )?);
            }
            heads.push(into_array(per_kind));
        }

        let local = LocalGraph::ALL
            .map(|g| GcnStack::new(&mut store, &mut rng, &format!("lcg.{}", g.name()), g.nodes(c), c.gcn_layers));
        let local = into_array(local.into_iter().collect::<Result<Vec<_>>>()?);

        let fusions = NodeKind::ALL.map(|k| {
            Fusion::new(
                &mut store,
                &mut rng,
                &format!("fusion.{}", k.name()),
                c.fusion,
                c.attention_projections,
                c.gating_shared_bias,
            )
        });
        let fusions = into_array(fusions.into_iter().collect::<Result<Vec<_>>>()?);
        let global = GcnStack::new(&mut store, &mut rng, "gcg", c.total_nodes(), c.gcn_layers)?;

        Ok(Mlgl {
            config,
            store,
            backbones: into_array(backbones),
            embeddings: into_array(embeddings),
            heads: into_array(heads),
            local,
            fusions,
            global,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn backbone(&self, kind: NodeKind) -> &Backbone {
        &self.backbones[kind_index(kind)]
    }

    pub fn embedding(&self, kind: NodeKind) -> &EmbeddingBlock {
        &self.embeddings[kind_index(kind)]
    }

    /// Heads of `level` (1-based).
    pub fn heads(&self, level: usize, kind: NodeKind) -> &NodeHeads {
        &self.heads[level - 1][kind_index(kind)]
    }

    pub fn local_graph(&self, graph: LocalGraph) -> &GcnStack {
        &self.local[graph.index()]
    }

    pub fn fusion(&self, kind: NodeKind) -> &Fusion {
        &self.fusions[kind_index(kind)]
    }

    pub fn global_graph(&self) -> &GcnStack {
        &self.global
    }

    pub fn param_count(&self) -> usize {
        self.store.trainable_count()
    }

    fn level_heads(&self, tape: &mut Tape<T>, s: &ParamStore<T>, level: usize, nodes: [Var; 3]) -> Result<LevelVars> {
        Ok(LevelVars {
            fae: self.heads(level, NodeKind::Fae).forward(tape, s, nodes[0])?,
            cae: self.heads(level, NodeKind::Cae).forward(tape, s, nodes[1])?,
            ar: self.heads(level, NodeKind::Ar).forward(tape, s, nodes[2])?,
        })
    }

    /// Level-1 node embeddings `[fae, cae, ar]` for input `[N, 1, frames, mels]`.
    pub fn embed(&self, tape: &mut Tape<T>, input: Var, mode: &mut Mode<'_>) -> Result<[Var; 3]> {
        self.embed_with(&self.store, tape, input, mode)
    }

    /// [`Mlgl::embed`] with parameter values taken from `store`, which must
    /// share this model's layout.
    pub fn embed_with(
        &self,
        store: &ParamStore<T>,
        tape: &mut Tape<T>,
        input: Var,
        mode: &mut Mode<'_>,
    ) -> Result<[Var; 3]> {
        let mut out = [input; 3];
        for kind in NodeKind::ALL {
            let feature = self.backbone(kind).forward(tape, store, input, mode, self.config.bn_eps)?;
            let nodes = self.embedding(kind).forward(tape, store, feature)?;
            out[kind_index(kind)] = tape.dropout(nodes, self.config.dropout, mode)?;
        }
        Ok(out)
    }

    /// Runs all three levels on `input: [N, 1, frames, mels]`.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var, mode: &mut Mode<'_>) -> Result<ForwardOutput> {
        self.forward_with(&self.store, tape, input, mode)
    }

    /// [`Mlgl::forward`] with parameter values taken from `store`, which must
    /// share this model's layout.
    pub fn forward_with(
        &self,
        s: &ParamStore<T>,
        tape: &mut Tape<T>,
        input: Var,
        mode: &mut Mode<'_>,
    ) -> Result<ForwardOutput> {
        let shape = tape.shape(input).to_vec();
        if shape.len() != 4 || shape[1] != 1 || shape[3] != self.config.n_mels {
            return Err(Error::Contract(format!(
                "model input must be [N, 1, frames, {}], got {shape:?}",
                self.config.n_mels
            )));
        }
        let (n_fae, n_cae) = (self.config.n_fae, self.config.n_cae);
        let dropout = self.config.dropout;

        let level1 = self.embed_with(s, tape, input, mode)?;
        let [fae, cae, ar] = level1;
        let l1 = self.level_heads(tape, s, 1, level1)?;

        let fag_in = tape.concat(&[fae, ar], 1)?;
        let fcg_in = tape.concat(&[fae, cae], 1)?;
        let cag_in = tape.concat(&[cae, ar], 1)?;
        let fag = self.local_graph(LocalGraph::Fag).forward(tape, s, fag_in, dropout, mode)?;
        let fcg = self.local_graph(LocalGraph::Fcg).forward(tape, s, fcg_in, dropout, mode)?;
        let cag = self.local_graph(LocalGraph::Cag).forward(tape, s, cag_in, dropout, mode)?;

        let fag_fae = tape.narrow(fag, 1, 0, n_fae)?;
        let fag_ar = tape.narrow(fag, 1, n_fae, 1)?;
        let fcg_fae = tape.narrow(fcg, 1, 0, n_fae)?;
        let fcg_cae = tape.narrow(fcg, 1, n_fae, n_cae)?;
        let cag_cae = tape.narrow(cag, 1, 0, n_cae)?;
        let cag_ar = tape.narrow(cag, 1, n_cae, 1)?;

        let e_fae = self.fusion(NodeKind::Fae).forward(tape, s, fag_fae, fcg_fae)?;
        let e_cae = self.fusion(NodeKind::Cae).forward(tape, s, cag_cae, fcg_cae)?;
        let e_ar = self.fusion(NodeKind::Ar).forward(tape, s, cag_ar, fag_ar)?;
        let level2 = [e_fae.nodes, e_cae.nodes, e_ar.nodes];
        let l2 = self.level_heads(tape, s, 2, level2)?;

        let gcg_in = tape.concat(&level2, 1)?;
        let gcg = self.global.forward(tape, s, gcg_in, dropout, mode)?;
        let level3 = [
            tape.narrow(gcg, 1, 0, n_fae)?,
            tape.narrow(gcg, 1, n_fae, n_cae)?,
            tape.narrow(gcg, 1, n_fae + n_cae, 1)?,
        ];
        let l3 = self.level_heads(tape, s, 3, level3)?;
        let l1_nodes = tape.concat(&level1, 1)?;

        Ok(ForwardOutput {
            levels: [l1, l2, l3],
            nodes: [l1_nodes, gcg_in, gcg],
            local: [fag, fcg, cag],
            attention: [e_fae.weights, e_cae.weights, e_ar.weights],
        })
    }

    /// Evaluation-mode predictions for a batch `[N, 1, frames, mels]`.
    pub fn predict(&self, input: &Tensor<T>) -> Result<LevelPredictions> {
        let mut tape = Tape::inference();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x, &mut Mode::Eval)?;
        Ok(LevelPredictions::read(&tape, &out))
    }

    /// Evaluation-mode node sets `[N, 32, 64]` for levels 1..=3.
    pub fn node_embeddings(&self, input: &Tensor<T>) -> Result<[Tensor<T>; 3]> {
        let mut tape = Tape::inference();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x, &mut Mode::Eval)?;
        Ok(out.nodes.map(|v| tape.value(v).clone()))
    }

    /// Evaluation-mode node embeddings and scalar scores of each local graph:
    /// `([N, nodes, 64], [N, nodes])` for fAG, fcG and cAG. Scores come from
    /// the level-2 heads of each node's role.
    pub fn local_outputs(&self, input: &Tensor<T>) -> Result<[(Tensor<T>, Tensor<T>); 3]> {
        let mut tape = Tape::inference();
        let x = tape.constant(input.clone());
        let out = self.forward(&mut tape, x, &mut Mode::Eval)?;
        let mut result = Vec::with_capacity(3);
        for (graph, &h) in LocalGraph::ALL.iter().zip(&out.local) {
            let mut offset = 0;
            let mut scores = Vec::with_capacity(2);
            for kind in graph.members() {
                let n = self.config.nodes_of(kind);
                let part = tape.narrow(h, 1, offset, n)?;
                scores.push(self.heads(2, kind).forward(&mut tape, &self.store, part)?);
                offset += n;
            }
            let scores = tape.concat(&scores, 1)?;
            result.push((tape.value(h).clone(), tape.value(scores).clone()));
        }
        Ok(into_array(result))
    }

    /// Folds observed batch statistics into the running buffers:
    /// `running ← (1 − momentum)·running + momentum·batch`.
    pub fn apply_bn_updates(&mut self, updates: &[BatchNormUpdate<T>]) {
        let m = T::of(self.config.bn_momentum);
        let keep = T::one() - m;
        for u in updates {
            for (buf, batch) in [(u.mean_buffer, &u.batch_mean), (u.var_buffer, &u.batch_var)] {
                for (r, &b) in self.store.buffer_mut(buf).data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b;
                }
            }
        }
    }
}

fn into_array<X: core::fmt::Debug, const N: usize>(v: Vec<X>) -> [X; N] {
    v.try_into().expect("fixed arity")
}
