//! Encoders and heads against straight-line reimplementations over plain
//! vectors, plus the symmetry and masking properties of the graph encoder.
// The reference code indexes on purpose, mirroring the summation formulas.
#![allow(clippy::needless_range_loop)]

mod common;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sgr_core::context_encoder::{encode_batch, EncoderConfig, EncoderParams};
use sgr_core::corpus::{Split, Triple};
use sgr_core::model::build_graph;
use sgr_core::numerics::{ParamStore, Tape, Tensor};
use sgr_core::predictor::{predict_step, PredictorParams, ScenePrediction};
use sgr_core::scene_graph::{CompleteGraph, SceneGraph};
use sgr_core::structure_encoder::{encode_scene, GatParams, RelationRows};

use common::{random_annotation, Bounds};

type Mat = Vec<Vec<f64>>;

fn mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

fn param(store: &ParamStore, name: &str) -> Mat {
    mat(store.get(store.require(name).unwrap()))
}

fn mm(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .map(|row| {
            (0..b[0].len())
                .map(|j| row.iter().zip(b).map(|(x, brow)| x * brow[j]).sum())
                .collect()
        })
        .collect()
}

fn plus_row(a: &Mat, b: &[f64]) -> Mat {
    a.iter().map(|r| r.iter().zip(b).map(|(x, y)| x + y).collect()).collect()
}

fn plus(a: &Mat, b: &Mat) -> Mat {
    a.iter().zip(b).map(|(r, s)| r.iter().zip(s).map(|(x, y)| x + y).collect()).collect()
}

fn norm(a: &Mat, g: &[f64], b: &[f64]) -> Mat {
    a.iter()
        .map(|r| {
            let n = r.len() as f64;
            let mean = r.iter().sum::<f64>() / n;
            let var = r.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            r.iter()
                .enumerate()
                .map(|(j, x)| g[j] * (x - mean) / (var + 1e-5).sqrt() + b[j])
                .collect()
        })
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

/// One sequence, no packing, every step spelled out.
fn transformer_oracle(store: &ParamStore, cfg: &EncoderConfig, ids: &[usize]) -> Vec<f64> {
    let tok = param(store, "ctx.tok");
    let pos = param(store, "ctx.pos");
    let emb: Mat = ids
        .iter()
        .enumerate()
        .map(|(p, &t)| tok[t].iter().zip(&pos[p]).map(|(a, b)| a + b).collect())
        .collect();
    let mut x = norm(&emb, &param(store, "ctx.emb_ln.g")[0], &param(store, "ctx.emb_ln.b")[0]);
    let dh = cfg.dim / cfg.heads;
    for l in 0..cfg.layers {
        let p = |n: &str| param(store, &format!("ctx.l{l}.{n}"));
        let q = plus_row(&mm(&x, &p("wq")), &p("bq")[0]);
        let k = plus_row(&mm(&x, &p("wk")), &p("bk")[0]);
        let v = plus_row(&mm(&x, &p("wv")), &p("bv")[0]);
        let n = ids.len();
        let mut ctx = vec![vec![0.0; cfg.dim]; n];
        for h in 0..cfg.heads {
            for i in 0..n {
                let scores: Vec<f64> = (0..n)
                    .map(|j| (0..dh).map(|c| q[i][h * dh + c] * k[j][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let w = softmax(&scores);
                for c in 0..dh {
                    ctx[i][h * dh + c] = (0..n).map(|j| w[j] * v[j][h * dh + c]).sum();
                }
            }
        }
        let attn = plus_row(&mm(&ctx, &p("wo")), &p("bo")[0]);
        x = norm(&plus(&x, &attn), &p("ln1.g")[0], &p("ln1.b")[0]);
        let hidden: Mat = plus_row(&mm(&x, &p("ff1")), &p("ff1.b")[0])
            .iter()
            .map(|r| r.iter().map(|&z| gelu(z)).collect())
            .collect();
        let ff = plus_row(&mm(&hidden, &p("ff2")), &p("ff2.b")[0]);
        x = norm(&plus(&x, &ff), &p("ln2.g")[0], &p("ln2.b")[0]);
    }
    x[0].clone()
}

fn jitter(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).data_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
}

#[test]
fn transformer_matches_straight_line_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = EncoderConfig {
        dim: 4,
        layers: 2,
        heads: 2,
        ffn_dim: 6,
        max_len: 8,
    };
    let mut store = ParamStore::new();
    let params = EncoderParams::init(&mut store, "ctx", cfg, 10, &mut rng).unwrap();
    // Move norms and biases off their neutral initial values.
    jitter(&mut store, &mut rng);
    let seqs = vec![vec![2, 7, 3, 9, 4], vec![2, 5], vec![2, 8, 8, 1, 6, 3, 7, 9]];
    let tape = Tape::new();
    let cls = encode_batch(&tape, &store, &params, &seqs).unwrap();
    let got = tape.value(cls).unwrap().clone();
    for (s, ids) in seqs.iter().enumerate() {
        let want = transformer_oracle(&store, &cfg, ids);
        for c in 0..cfg.dim {
            assert!((got.get(s, c) - want[c]).abs() < 1e-12, "seq {s} col {c}: {} vs {}", got.get(s, c), want[c]);
        }
    }
}

#[test]
fn packed_sequences_do_not_see_each_other() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let cfg = EncoderConfig {
        dim: 8,
        layers: 1,
        heads: 2,
        ffn_dim: 16,
        max_len: 8,
    };
    let mut store = ParamStore::new();
    let params = EncoderParams::init(&mut store, "ctx", cfg, 12, &mut rng).unwrap();
    let a = vec![2, 5, 6, 3];
    let cls_of = |seqs: &[Vec<usize>]| {
        let tape = Tape::new();
        let v = encode_batch(&tape, &store, &params, seqs).unwrap();
        let t = tape.value(v).unwrap().clone();
        t.row(0).to_vec()
    };
    let alone = cls_of(std::slice::from_ref(&a));
    let with_b = cls_of(&[a.clone(), vec![2, 11, 10]]);
    let with_c = cls_of(&[a, vec![2, 9, 9, 9, 9, 1]]);
    for c in 0..cfg.dim {
        assert!((alone[c] - with_b[c]).abs() < 1e-12);
        assert!((with_b[c] - with_c[c]).abs() < 1e-12);
    }
}

/// Attention neighbourhood of every node, derived from the graph and scene
/// without the encoder's edge builder.
fn neighbourhoods(graph: &CompleteGraph, scene: &SceneGraph) -> Vec<Vec<(usize, Vec<usize>)>> {
    let m = graph.num_nodes();
    let rels = graph.relation_vocab().len();
    let (global_row, self_row) = (rels, rels + 1);
    let mut links: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); m]; m];
    for &(i, j, r) in graph.static_edges() {
        if i != j && scene.mask[i] && scene.mask[j] {
            links[i][j].push(r);
            links[j][i].push(r);
        }
    }
    for e in 0..graph.num_entities() {
        if let Some(c) = scene.locate_in[e] {
            let l = graph.column_node(c);
            links[e][l].push(0);
            links[l][e].push(0);
        }
    }
    let g = graph.global_index();
    for i in 0..m {
        if scene.mask[i] {
            links[i][i].push(self_row);
            if i != g {
                links[g][i].push(global_row);
            }
        }
    }
    links
        .into_iter()
        .map(|row| row.into_iter().enumerate().filter(|(_, r)| !r.is_empty()).collect())
        .collect()
}

fn gat_oracle(store: &ParamStore, graph: &CompleteGraph, scene: &SceneGraph, x: &Mat) -> (Mat, Mat) {
    let w1 = param(store, "gat.w1");
    let w2 = param(store, "gat.w2");
    let a = param(store, "gat.a");
    let d = w1.len();
    let proj = mm(x, &w1);
    let dot = |v: &[f64], off: usize| (0..d).map(|c| v[c] * a[off + c][0]).sum::<f64>();
    let m = graph.num_nodes();
    let mut out = vec![vec![0.0; d]; m];
    let mut alpha = vec![vec![0.0; m]; m];
    for (i, nbrs) in neighbourhoods(graph, scene).iter().enumerate() {
        if !scene.mask[i] {
            continue;
        }
        let scores: Vec<f64> = nbrs
            .iter()
            .map(|(j, rs)| {
                let rel: f64 = rs.iter().map(|&r| dot(&w2[r], 2 * d)).sum();
                let s = dot(&proj[i], 0) + dot(&proj[*j], d) + rel;
                if s > 0.0 {
                    s
                } else {
                    0.2 * s
                }
            })
            .collect();
        let w = softmax(&scores);
        for ((j, _), wj) in nbrs.iter().zip(&w) {
            alpha[i][*j] = *wj;
            for c in 0..d {
                out[i][c] += wj * x[*j][c];
            }
        }
        for v in out[i].iter_mut() {
            if *v < 0.0 {
                *v = v.exp() - 1.0;
            }
        }
    }
    (out, alpha)
}

fn scene_fixture(seed: u64) -> (CompleteGraph, SceneGraph, ChaCha8Rng) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inst = random_annotation(&mut rng, Bounds::default(), 0);
    let triples = [Triple::new("plant", "HasA", "root"), Triple::new("sea", "RelatedTo", "ocean")];
    let graph = build_graph(&inst, Split::Train, &triples).unwrap();
    let mut scene = SceneGraph::empty(&graph);
    for e in 0..graph.num_entities() {
        if rng.gen_bool(0.7) {
            scene.mask[e] = true;
            scene.locate_in[e] = Some(rng.gen_range(0..graph.num_columns()));
        }
    }
    (graph, scene, rng)
}

#[test]
fn graph_attention_matches_straight_line_oracle() {
    for seed in 0..20 {
        let (graph, scene, mut rng) = scene_fixture(seed);
        let d = 5;
        let rels = RelationRows::identity(&graph);
        let mut store = ParamStore::new();
        let params = GatParams::init(&mut store, "gat", d, rels.num_rows(), &mut rng).unwrap();
        let feats = Tensor::uniform(&[graph.num_nodes(), d], 2.0, &mut rng);
        let tape = Tape::new();
        let f = tape.constant(feats.clone());
        let enc = encode_scene(&tape, &store, &params, &rels, &graph, &scene, f).unwrap();
        let states = tape.value(enc.node_states).unwrap().clone();
        let (want, want_alpha) = gat_oracle(&store, &graph, &scene, &mat(&feats));
        for i in 0..graph.num_nodes() {
            for c in 0..d {
                assert!((states.get(i, c) - want[i][c]).abs() < 1e-12, "seed {seed} node {i}");
            }
        }
        let alpha = tape.value(enc.alpha).unwrap().clone();
        for (li, &i) in enc.active.iter().enumerate() {
            for (lj, &j) in enc.active.iter().enumerate() {
                assert!((alpha.get(li, lj) - want_alpha[i][j]).abs() < 1e-12);
            }
        }
        let g = tape.value(enc.global).unwrap().clone();
        assert_eq!(g.row(0), states.row(graph.global_index()));
    }
}

#[test]
fn reordering_entities_permutes_graph_states() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0;
    for i in 0..30 {
        let inst = random_annotation(&mut rng, Bounds::default(), i);
        if inst.entities.len() < 2 {
            continue;
        }
        let mut flipped = inst.clone();
        flipped.entities.reverse();
        if let Some(s) = flipped.gold_states.as_mut() {
            s.reverse();
        }
        if let Some(l) = flipped.gold_locations.as_mut() {
            l.reverse();
        }
        if let Some(l) = flipped.initial_locations.as_mut() {
            l.reverse();
        }
        let g1 = build_graph(&inst, Split::Train, &[]).unwrap();
        let g2 = build_graph(&flipped, Split::Train, &[]).unwrap();
        assert_eq!(g1.num_nodes(), g2.num_nodes());
        // Node k of g2 is node perm[k] of g1.
        let perm: Vec<usize> = g2
            .nodes()
            .iter()
            .map(|n| {
                g1.nodes()
                    .iter()
                    .position(|m| m.surface == n.surface && m.kind == n.kind)
                    .expect("same concepts")
            })
            .collect();
        let d = 4;
        let rels = RelationRows::identity(&g1);
        assert_eq!(rels, RelationRows::identity(&g2));
        let mut store = ParamStore::new();
        let params = GatParams::init(&mut store, "gat", d, rels.num_rows(), &mut rng).unwrap();
        let mut s1 = SceneGraph::empty(&g1);
        for e in 0..g1.num_entities() {
            if rng.gen_bool(0.6) {
                s1.mask[e] = true;
                s1.locate_in[e] = Some(rng.gen_range(0..g1.num_columns()));
            }
        }
        let mut s2 = SceneGraph::empty(&g2);
        for k in 0..g2.num_entities() {
            s2.mask[k] = s1.mask[perm[k]];
            s2.locate_in[k] = s1.locate_in[perm[k]]
                .map(|c| g2.location_column(&g1.column_location(c)).expect("same locations"));
        }
        let f1 = Tensor::uniform(&[g1.num_nodes(), d], 1.0, &mut rng);
        let rows: Vec<Vec<f64>> = perm.iter().map(|&p| f1.row(p).to_vec()).collect();
        let f2 = Tensor::from_rows(&rows).unwrap();
        let run = |g: &CompleteGraph, s: &SceneGraph, f: &Tensor| {
            let tape = Tape::new();
            let v = tape.constant(f.clone());
            let enc = encode_scene(&tape, &store, &params, &rels, g, s, v).unwrap();
            let out = tape.value(enc.node_states).unwrap().clone();
            out
        };
        let (o1, o2) = (run(&g1, &s1, &f1), run(&g2, &s2, &f2));
        for k in 0..g2.num_nodes() {
            for c in 0..d {
                assert!((o2.get(k, c) - o1.get(perm[k], c)).abs() < 1e-12);
            }
        }
        checked += 1;
    }
    assert!(checked > 10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn masked_features_never_reach_any_output(seed in 0u64..10_000, noise in -100.0f64..100.0) {
        let (graph, scene, mut rng) = scene_fixture(seed);
        let d = 3;
        let rels = RelationRows::identity(&graph);
        let mut store = ParamStore::new();
        let params = GatParams::init(&mut store, "gat", d, rels.num_rows(), &mut rng).unwrap();
        let feats = Tensor::uniform(&[graph.num_nodes(), d], 1.0, &mut rng);
        let mut noisy = feats.clone();
        for i in (0..graph.num_nodes()).filter(|&i| !scene.mask[i]) {
            noisy.data_mut()[i * d..(i + 1) * d].fill(noise);
        }
        let run = |f: &Tensor| {
            let tape = Tape::new();
            let v = tape.constant(f.clone());
            let enc = encode_scene(&tape, &store, &params, &rels, &graph, &scene, v).unwrap();
            let out = tape.value(enc.node_states).unwrap().clone();
            out.into_data().into_iter().map(f64::to_bits).collect::<Vec<_>>()
        };
        prop_assert_eq!(run(&feats), run(&noisy));
    }
}

fn heads_fixture(seed: u64) -> (CompleteGraph, ParamStore, PredictorParams, Tensor, Tensor, Tensor, Tensor) {
    let (graph, _, mut rng) = scene_fixture(seed);
    let (d, hidden) = (3, 5);
    let mut store = ParamStore::new();
    let params = PredictorParams::init(&mut store, "head", d, hidden, &mut rng).unwrap();
    jitter(&mut store, &mut rng);
    let m = graph.num_nodes();
    let feats = Tensor::uniform(&[m, d], 1.0, &mut rng);
    let states = Tensor::uniform(&[m, d], 1.0, &mut rng);
    let g = Tensor::uniform(&[1, d], 1.0, &mut rng);
    let c = Tensor::uniform(&[1, d], 1.0, &mut rng);
    (graph, store, params, feats, states, g, c)
}

fn perceptron(store: &ParamStore, prefix: &str, input: &[f64]) -> f64 {
    let w = param(store, &format!("{prefix}.w"));
    let b = &param(store, &format!("{prefix}.b"))[0];
    let v = param(store, &format!("{prefix}.v"));
    let c = param(store, &format!("{prefix}.c"))[0][0];
    (0..b.len())
        .map(|h| {
            let z: f64 = input.iter().zip(&w).map(|(x, row)| x * row[h]).sum::<f64>() + b[h];
            z.tanh() * v[h][0]
        })
        .sum::<f64>()
        + c
}

#[test]
fn heads_match_straight_line_oracle() {
    for seed in 0..10 {
        let (graph, store, params, feats, states, g, c) = heads_fixture(seed);
        let tape = Tape::new();
        let [fv, sv, gv, cv] = [&feats, &states, &g, &c].map(|t| tape.constant(t.clone()));
        let logits = predict_step(&tape, &store, &params, &graph, fv, sv, gv, cv).unwrap();
        let mask = tape.value(logits.mask).unwrap().clone();
        let loc = tape.value(logits.location).unwrap().clone();
        let summary: Vec<f64> = g.row(0).iter().chain(c.row(0)).copied().collect();
        let node = |i: usize| -> Vec<f64> { feats.row(i).iter().chain(states.row(i)).copied().collect() };
        for e in 0..graph.num_entities() {
            let input: Vec<f64> = summary.iter().copied().chain(node(e)).collect();
            assert!((mask.get(e, 0) - perceptron(&store, "head.mask", &input)).abs() < 1e-12);
            for col in 0..graph.num_columns() {
                let pair: Vec<f64> = input.iter().copied().chain(node(graph.column_node(col))).collect();
                assert!((loc.get(e, col) - perceptron(&store, "head.loc", &pair)).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn zero_output_layers_give_half_masks_and_uniform_locations() {
    let (graph, mut store, params, feats, states, g, c) = heads_fixture(3);
    for name in ["head.mask.v", "head.mask.c", "head.loc.v", "head.loc.c"] {
        let id = store.require(name).unwrap();
        store.get_mut(id).data_mut().fill(0.0);
    }
    let tape = Tape::new();
    let [fv, sv, gv, cv] = [&feats, &states, &g, &c].map(|t| tape.constant(t.clone()));
    let logits = predict_step(&tape, &store, &params, &graph, fv, sv, gv, cv).unwrap();
    let pred = ScenePrediction::from_logits(&tape, &logits).unwrap();
    let cols = graph.num_columns() as f64;
    for (p, row) in pred.mask_probs.iter().zip(&pred.loc_probs) {
        assert_eq!(*p, 0.5);
        assert!(row.iter().all(|&q| (q - 1.0 / cols).abs() < 1e-15));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
}

#[test]
fn heads_reject_mismatched_summaries() {
    let (graph, store, params, feats, states, g, _) = heads_fixture(4);
    let tape = Tape::new();
    let [fv, sv, gv] = [&feats, &states, &g].map(|t| tape.constant(t.clone()));
    let wide = tape.constant(Tensor::zeros(&[1, 4]));
    assert!(predict_step(&tape, &store, &params, &graph, fv, sv, gv, wide).is_err());
}
