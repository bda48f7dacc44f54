//! Heterogeneous graph embedder: mean aggregation over adjacency and
//! inclusion edges, edge-aware attention over flow edges.

use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::graph::{GraphBundle, HOURS};
use crate::nn::{Linear, ParamId, ParameterStore, SparseMatrix, Tape, Tensor, Var};

/// Constant structure derived once from a graph bundle.
#[derive(Debug, Clone)]
pub struct GraphInputs {
    pub n_cells: usize,
    pub n_nodes: usize,
    pub region_ids: Vec<usize>,
    /// `log1p` hourly occupancy, `n_nodes x 24`.
    pub occupancy: Tensor,
    /// Row-normalised structural neighbourhood mean.
    pub structural_mean: Rc<SparseMatrix>,
    /// Attention edges: flow in-edges followed by one self edge per node.
    pub edge_src: Vec<usize>,
    pub edge_dst: Rc<Vec<usize>>,
    pub n_flow_edges: usize,
    /// `log1p` hourly counts per attention edge; a self edge carries the
    /// node's self-loop flow when one exists.
    pub edge_features: Tensor,
    /// Sums weighted edge messages into destination rows.
    pub scatter: Rc<SparseMatrix>,
}

impl GraphInputs {
    pub fn new(bundle: &GraphBundle) -> Self {
        let g = &bundle.graph;
        let n = g.n_nodes();
        let occupancy = Tensor::from_rows(
            &bundle
                .features
                .occupancy
                .iter()
                .map(|row| row.iter().map(|&c| (c as f64).ln_1p()).collect())
                .collect::<Vec<Vec<f64>>>(),
        )
        .expect("occupancy rows have 24 entries");

        let nbrs = g.structural_neighbors();
        let groups: Vec<Vec<usize>> = nbrs
            .iter()
            .map(|ns| ns.iter().map(|&q| q as usize).collect())
            .collect();
        let structural_mean = Rc::new(SparseMatrix::mean_pool(&groups, n));

        let mut edge_src = Vec::new();
        let mut edge_dst = Vec::new();
        let mut feats: Vec<Vec<f64>> = Vec::new();
        let mut self_feat = vec![vec![0.0; HOURS]; n];
        let log = |h: &[u64; HOURS]| h.iter().map(|&c| (c as f64).ln_1p()).collect::<Vec<f64>>();
        for e in g.unified_flows() {
            if e.src == e.dst {
                self_feat[e.src as usize] = log(&e.hourly);
                continue;
            }
            edge_src.push(e.src as usize);
            edge_dst.push(e.dst as usize);
            feats.push(log(&e.hourly));
        }
        let n_flow_edges = edge_src.len();
        for (p, f) in self_feat.into_iter().enumerate() {
            edge_src.push(p);
            edge_dst.push(p);
            feats.push(f);
        }
        let mut scatter = SparseMatrix::new(n, edge_src.len());
        for (e, &d) in edge_dst.iter().enumerate() {
            scatter.push(d, e, 1.0);
        }
        Self {
            n_cells: g.n_cells,
            n_nodes: n,
            region_ids: bundle.features.region_ids.iter().map(|&r| r as usize).collect(),
            occupancy,
            structural_mean,
            edge_src,
            edge_dst: Rc::new(edge_dst),
            n_flow_edges,
            edge_features: Tensor::from_rows(&feats).expect("24-hour edge features"),
            scatter: Rc::new(scatter),
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct GnnLayer {
    sage_self: Linear,
    sage_nbr: Linear,
    w_self: Linear,
    w_nbr: Linear,
    w_edge: Linear,
    a_self: ParamId,
    a_nbr: ParamId,
    a_edge: ParamId,
}

/// Attention weights of one flow-attention layer, aligned with
/// [`GraphInputs::edge_src`] / [`GraphInputs::edge_dst`].
#[derive(Debug, Clone, PartialEq)]
pub struct FlowAttention {
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct GraphEmbedder {
    region_table: ParamId,
    occupancy_proj: Linear,
    layers: Vec<GnnLayer>,
    attn_slope: f64,
    gnn_slope: f64,
}

impl GraphEmbedder {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        n_regions: usize,
        dim: usize,
        n_layers: usize,
        attn_slope: f64,
        gnn_slope: f64,
    ) -> Result<Self> {
        let region_table = store.add_glorot("graph.region_emb", n_regions, dim, rng)?;
        let occupancy_proj = Linear::new(store, rng, "graph.occupancy", HOURS, dim)?;
        let mut layers = Vec::with_capacity(n_layers);
        for l in 0..n_layers {
            let name = |s: &str| format!("graph.layer{l}.{s}");
            layers.push(GnnLayer {
                sage_self: Linear::no_bias(store, rng, &name("sage_self"), dim, dim)?,
                sage_nbr: Linear::no_bias(store, rng, &name("sage_nbr"), dim, dim)?,
                w_self: Linear::no_bias(store, rng, &name("w_self"), dim, dim)?,
                w_nbr: Linear::no_bias(store, rng, &name("w_nbr"), dim, dim)?,
                w_edge: Linear::no_bias(store, rng, &name("w_edge"), HOURS, dim)?,
                a_self: store.add_glorot(name("a_self"), dim, 1, rng)?,
                a_nbr: store.add_glorot(name("a_nbr"), dim, 1, rng)?,
                a_edge: store.add_glorot(name("a_edge"), dim, 1, rng)?,
            });
        }
        Ok(Self {
            region_table,
            occupancy_proj,
            layers,
            attn_slope,
            gnn_slope,
        })
    }

    /// Embeddings of every node after all layers, `n_nodes x d`, plus the
    /// flow-attention weight node of each layer.
    pub fn forward_all(&self, tape: &mut Tape, store: &ParameterStore, g: &GraphInputs) -> (Var, Vec<Var>) {
        let table = tape.param(store, self.region_table);
        let ids = tape.embedding_lookup(table, &g.region_ids);
        let occ = tape.constant(g.occupancy.clone());
        let occ = self.occupancy_proj.forward(tape, store, occ);
        let mut x = tape.add(ids, occ);
        let edges = tape.constant(g.edge_features.clone());
        let src: Vec<Option<usize>> = g.edge_src[..g.n_flow_edges].iter().map(|&s| Some(s)).collect();
        let dst: Vec<Option<usize>> = g.edge_dst.iter().map(|&d| Some(d)).collect();
        let mut alphas = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            // mean aggregation over adjacency and inclusion neighbours
            let s_self = layer.sage_self.forward(tape, store, x);
            let mean = tape.sparse_matmul(g.structural_mean.clone(), x);
            let s_nbr = layer.sage_nbr.forward(tape, store, mean);
            let sage = tape.add(s_self, s_nbr);

            // attention over flow in-neighbours and the node itself
            let hp = layer.w_self.forward(tape, store, x);
            let hq = layer.w_nbr.forward(tape, store, x);
            let he = layer.w_edge.forward(tape, store, edges);
            let a_self = tape.param(store, layer.a_self);
            let a_nbr = tape.param(store, layer.a_nbr);
            let a_edge = tape.param(store, layer.a_edge);
            let sp = tape.matmul(hp, a_self);
            let sq = tape.matmul(hq, a_nbr);
            let se = tape.matmul(he, a_edge);
            let sp_e = tape.gather_rows(sp, dst.clone());
            let all_src: Vec<Option<usize>> = g.edge_src.iter().map(|&s| Some(s)).collect();
            let sq_e = tape.gather_rows(sq, all_src);
            let logit = tape.add(sp_e, sq_e);
            let logit = tape.add(logit, se);
            let logit = tape.leaky_relu(logit, self.attn_slope);
            let alpha = tape.segment_softmax(logit, g.edge_dst.clone());
            alphas.push(alpha);
            let nbr_msgs = tape.gather_rows(hq, src.clone());
            let msgs = tape.concat_rows(&[nbr_msgs, hp]);
            let weighted = tape.mul_col(msgs, alpha);
            let gat = tape.sparse_matmul(g.scatter.clone(), weighted);

            let fused = tape.add(sage, gat);
            x = tape.leaky_relu(fused, self.gnn_slope);
        }
        (x, alphas)
    }

    /// Cell rows of the final node embeddings, `n_cells x d`.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, g: &GraphInputs) -> Var {
        let (x, _) = self.forward_all(tape, store, g);
        if g.n_cells == g.n_nodes {
            return x;
        }
        tape.gather_rows(x, (0..g.n_cells).map(Some).collect())
    }

    pub fn flow_attention(&self, store: &ParameterStore, g: &GraphInputs) -> Vec<FlowAttention> {
        let mut tape = Tape::new();
        let (_, alphas) = self.forward_all(&mut tape, store, g);
        alphas
            .into_iter()
            .map(|a| FlowAttention {
                alpha: tape.value(a).data().to_vec(),
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::{FlowEdge, HeteroGraph, NodeFeatures};

    fn bundle(flows: Vec<FlowEdge>) -> GraphBundle {
        GraphBundle {
            slots_per_day: 24,
            source_days: 0..1,
            graph: HeteroGraph {
                n_cells: 3,
                n_admins: 0,
                cell_flow: flows,
                admin_flow: vec![],
                cell_adjacency: vec![],
                admin_adjacency: vec![],
                inclusion: vec![],
            },
            features: NodeFeatures {
                region_ids: vec![0, 1, 2],
                occupancy: vec![[1; HOURS], [0; HOURS], [5; HOURS]],
            },
        }
    }

    fn embedder(store: &mut ParameterStore) -> GraphEmbedder {
        GraphEmbedder::new(store, &mut ChaCha8Rng::seed_from_u64(3), 3, 4, 2, 0.2, 0.01).unwrap()
    }

    #[test]
    fn no_edges_gives_stacked_self_transforms() {
        let b = bundle(vec![]);
        let g = GraphInputs::new(&b);
        let mut store = ParameterStore::new();
        let emb = embedder(&mut store);
        let mut tape = Tape::new();
        let out = emb.forward(&mut tape, &store, &g);

        // hand-rolled: x <- leaky(x W1 + x Wp) per layer
        let mut x = store.value(emb.region_table).clone();
        let occ = g.occupancy.matmul(store.value(emb.occupancy_proj.w));
        x.add_assign(&occ);
        let bias = store.value(emb.occupancy_proj.b.unwrap()).row(0).to_vec();
        for r in 0..x.rows() {
            for (v, b) in x.row_mut(r).iter_mut().zip(&bias) {
                *v += b;
            }
        }
        for l in &emb.layers {
            let mut y = x.matmul(store.value(l.sage_self.w));
            y.add_assign(&x.matmul(store.value(l.w_self.w)));
            x = y.map(|v| if v > 0.0 { v } else { 0.01 * v });
        }
        assert!(tape.value(out).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn single_in_neighbour_weights_are_normalised() {
        let b = bundle(vec![FlowEdge {
            src: 0,
            dst: 1,
            hourly: [2; HOURS],
        }]);
        let g = GraphInputs::new(&b);
        let mut store = ParameterStore::new();
        let emb = embedder(&mut store);
        for layer in emb.flow_attention(&store, &g) {
            let mut sums = vec![0.0; g.n_nodes];
            for (e, &d) in g.edge_dst.iter().enumerate() {
                sums[d] += layer.alpha[e];
            }
            for s in sums {
                assert!((s - 1.0).abs() < 1e-12);
            }
            // nodes without in-edges attend only to themselves
            assert_eq!(layer.alpha[g.n_flow_edges], 1.0);
        }
    }
}
