//! Relation-aware graph attention over one scene.
//!
//! Scores are `LeakyReLU(a1·W1h_i + a2·W1h_j + a3·Σ_r W2[r])` over the
//! relations linking `i` and `j`, normalised over the neighbourhood of `i`.
//! Node outputs are `ELU(Σ_j α_ij h_j)` over the raw input features. Only the
//! unmasked part of the graph is ever touched, so masked nodes have no
//! influence at all on the result and their own output rows are zero.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Result, SgrError};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::scene_graph::{CompleteGraph, SceneGraph, LOCATE_IN_REL};

pub const LEAKY_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, Copy)]
pub struct GatParams {
    /// `d × d`.
    pub w1: ParamId,
    /// One embedding row per relation, `R' × d`.
    pub w2: ParamId,
    /// Attention vector, `3d × 1`.
    pub a: ParamId,
    pub dim: usize,
}

impl GatParams {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        dim: usize,
        num_relation_rows: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(GatParams {
            w1: store.init_uniform(format!("{prefix}.w1"), &[dim, dim], dim, rng)?,
            w2: store.init_uniform(format!("{prefix}.w2"), &[num_relation_rows, dim], dim, rng)?,
            a: store.init_uniform(format!("{prefix}.a"), &[3 * dim, 1], dim, rng)?,
            dim,
        })
    }

    pub fn from_store(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |n: &str| store.require(&format!("{prefix}.{n}"));
        let w1 = get("w1")?;
        Ok(GatParams {
            w1,
            w2: get("w2")?,
            a: get("a")?,
            dim: store.get(w1).rows(),
        })
    }
}

/// Where each graph relation, the global link and the self-loop live in the
/// relation embedding table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelationRows {
    /// Embedding row of each entry of the graph's relation vocabulary.
    pub graph: Vec<usize>,
    pub global: usize,
    pub self_loop: usize,
}

impl RelationRows {
    /// Graph relations map to their own index, followed by the global and
    /// self-loop rows (`R + 2` rows in total).
    pub fn identity(graph: &CompleteGraph) -> Self {
        let r = graph.relation_vocab().len();
        RelationRows {
            graph: (0..r).collect(),
            global: r,
            self_loop: r + 1,
        }
    }

    pub fn num_rows(&self) -> usize {
        self.graph.iter().copied().chain([self.global, self.self_loop]).max().unwrap_or(0) + 1
    }
}

/// The active edge structure of one scene, in local (active node) indices.
#[derive(Debug, Clone)]
pub struct SceneEdges {
    /// Unmasked nodes, ascending.
    pub active: Vec<usize>,
    /// Relation-row multiset per ordered local pair `(i, j)`: `i` attends to `j`.
    pub relations: BTreeMap<(usize, usize), Vec<usize>>,
}

impl SceneEdges {
    pub fn build(graph: &CompleteGraph, scene: &SceneGraph, rels: &RelationRows) -> Result<Self> {
        scene.validate(graph)?;
        let active: Vec<usize> = (0..graph.num_nodes()).filter(|&i| scene.mask[i]).collect();
        let mut local = vec![usize::MAX; graph.num_nodes()];
        for (k, &i) in active.iter().enumerate() {
            local[i] = k;
        }
        let mut relations: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
        let mut link = |a: usize, b: usize, row: usize| {
            if local[a] != usize::MAX && local[b] != usize::MAX && a != b {
                relations.entry((local[a], local[b])).or_default().push(row);
                relations.entry((local[b], local[a])).or_default().push(row);
            }
        };
        for &(i, j, r) in graph.static_edges() {
            let row = *rels.graph.get(r).ok_or_else(|| {
                SgrError::contract(format!("relation {r} has no embedding row"))
            })?;
            link(i, j, row);
        }
        let located = rels.graph[LOCATE_IN_REL];
        for (e, col) in scene.locate_in.iter().enumerate() {
            if let Some(c) = col {
                link(e, graph.column_node(*c), located);
            }
        }
        for k in 0..active.len() {
            relations.entry((k, k)).or_default().push(rels.self_loop);
        }
        let g = local[graph.global_index()];
        for k in 0..active.len() {
            if k != g {
                relations.entry((g, k)).or_default().push(rels.global);
            }
        }
        Ok(SceneEdges { active, relations })
    }

    pub fn num_active(&self) -> usize {
        self.active.len()
    }

    /// Relation counts per ordered pair, `m² × rows`.
    fn count_matrix(&self, rows: usize) -> Tensor {
        let m = self.active.len();
        let mut c = Tensor::zeros(&[m * m, rows]);
        for (&(i, j), rels) in &self.relations {
            for &r in rels {
                c.data_mut()[(i * m + j) * rows + r] += 1.0;
            }
        }
        c
    }

    /// Additive attention mask, `0` on edges and `-inf` elsewhere.
    fn attention_mask(&self) -> Tensor {
        let m = self.active.len();
        let mut mask = Tensor::filled(&[m, m], f64::NEG_INFINITY);
        for &(i, j) in self.relations.keys() {
            mask.data_mut()[i * m + j] = 0.0;
        }
        mask
    }
}

pub struct SceneEncoding {
    /// `M × d`; rows of masked nodes are zero.
    pub node_states: Var,
    /// The global node's output state, `1 × d`.
    pub global: Var,
    /// Attention over the active nodes, `m × m` in local indices.
    pub alpha: Var,
    pub active: Vec<usize>,
}

fn attend(
    tape: &Tape,
    store: &ParamStore,
    params: &GatParams,
    edges: &SceneEdges,
    feats: Var,
) -> Result<(Var, Var)> {
    let d = params.dim;
    let m = edges.num_active();
    let x = tape.select_rows(feats, &edges.active)?;
    let w1 = tape.param(store, params.w1);
    let w2 = tape.param(store, params.w2);
    let a = tape.param(store, params.a);
    let proj = tape.matmul(x, w1)?;
    let a_src = tape.select_rows(a, &(0..d).collect::<Vec<_>>())?;
    let a_dst = tape.select_rows(a, &(d..2 * d).collect::<Vec<_>>())?;
    let a_rel = tape.select_rows(a, &(2 * d..3 * d).collect::<Vec<_>>())?;
    let s_src = tape.matmul(proj, a_src)?;
    let s_dst = tape.matmul(proj, a_dst)?;
    let q = tape.matmul(w2, a_rel)?;
    let counts = tape.constant(edges.count_matrix(store.get(params.w2).rows()));
    let s_rel = tape.matmul(counts, q)?;
    let raw = tape.add(tape.pair_sum(s_src, s_dst)?, s_rel)?;
    let scores = tape.reshape(tape.leaky_relu(raw, LEAKY_SLOPE)?, &[m, m])?;
    let alpha = tape.softmax_rows(scores, Some(&edges.attention_mask()))?;
    let h = tape.elu(tape.matmul(alpha, x)?)?;
    Ok((alpha, h))
}

/// Encodes one scene. `feats` holds the `M × d` static concept features.
pub fn encode_scene(
    tape: &Tape,
    store: &ParamStore,
    params: &GatParams,
    rels: &RelationRows,
    graph: &CompleteGraph,
    scene: &SceneGraph,
    feats: Var,
) -> Result<SceneEncoding> {
    let shape = tape.shape(feats)?;
    if shape != [graph.num_nodes(), params.dim] {
        return Err(SgrError::Shape {
            op: "encode_scene",
            shapes: vec![shape, vec![graph.num_nodes(), params.dim]],
        });
    }
    let edges = SceneEdges::build(graph, scene, rels)?;
    let (alpha, h) = attend(tape, store, params, &edges, feats)?;
    let node_states = tape.scatter_rows(h, &edges.active, graph.num_nodes())?;
    let global = tape.select_rows(node_states, &[graph.global_index()])?;
    Ok(SceneEncoding {
        node_states,
        global,
        alpha,
        active: edges.active,
    })
}

/// Full `M × M` attention coefficients; rows and columns of masked nodes are
/// zero.
pub fn attention_coefficients(
    store: &ParamStore,
    params: &GatParams,
    rels: &RelationRows,
    graph: &CompleteGraph,
    scene: &SceneGraph,
    feats: &Tensor,
) -> Result<Tensor> {
    let tape = Tape::new();
    let f = tape.constant(feats.clone());
    let enc = encode_scene(&tape, store, params, rels, graph, scene, f)?;
    let local = tape.value(enc.alpha)?;
    let big = graph.num_nodes();
    let mut out = Tensor::zeros(&[big, big]);
    let m = enc.active.len();
    for i in 0..m {
        for j in 0..m {
            out.data_mut()[enc.active[i] * big + enc.active[j]] = local.get(i, j);
        }
    }
    Ok(out)
}
