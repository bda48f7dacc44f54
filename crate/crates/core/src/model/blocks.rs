//! Encoder and decoder stacks shared by the daily, weekly and decoding
//! stages.

use std::rc::Rc;

use rand::Rng;

use crate::error::Result;
use crate::nn::{
    sinusoidal_positions, AttentionBlock, AttentionPlan, DecoderLayer, EncoderLayer, Linear, ParamId,
    ParameterStore, SparseMatrix, Tape, Tensor, Var,
};
use crate::traj::WINDOW_DAYS;

/// Position rows for packed segments of the given lengths.
pub(crate) fn packed_positions(table: &Tensor, lengths: &[usize]) -> Tensor {
    let total: usize = lengths.iter().sum();
    let mut out = Tensor::zeros(total, table.cols());
    let mut r = 0;
    for &len in lengths {
        for p in 0..len {
            out.row_mut(r).copy_from_slice(table.row(p));
            r += 1;
        }
    }
    out
}

fn segment_groups(lengths: &[usize]) -> Vec<Vec<usize>> {
    let mut start = 0;
    lengths
        .iter()
        .map(|&len| {
            let g = (start..start + len).collect();
            start += len;
            g
        })
        .collect()
}

/// Input projection, positional encoding, self-attention stack and mean
/// pooling of each packed segment to one vector.
#[derive(Debug, Clone)]
pub struct ChainEncoder {
    proj: Linear,
    layers: Vec<EncoderLayer>,
    heads: usize,
    positions: Tensor,
}

impl ChainEncoder {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        dim: usize,
        heads: usize,
        n_layers: usize,
        ff_mult: usize,
        max_len: usize,
    ) -> Result<Self> {
        let proj = Linear::new(store, rng, &format!("{name}.proj"), in_dim, dim)?;
        let layers = (0..n_layers)
            .map(|l| EncoderLayer::new(store, rng, &format!("{name}.layer{l}"), dim, heads, ff_mult * dim))
            .collect::<Result<_>>()?;
        Ok(Self {
            proj,
            layers,
            heads,
            positions: sinusoidal_positions(max_len, dim),
        })
    }

    /// Per-position outputs for the packed rows of `x`.
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, x: Var, lengths: &[usize]) -> Var {
        let h = self.proj.forward(tape, store, x);
        let pe = tape.constant(packed_positions(&self.positions, lengths));
        let mut h = tape.add(h, pe);
        let plan = AttentionPlan::segments(lengths, self.heads, false);
        for layer in &self.layers {
            h = layer.forward(tape, store, h, &plan);
        }
        h
    }

    /// One pooled vector per segment.
    pub fn encode_pooled(&self, tape: &mut Tape, store: &ParameterStore, x: Var, lengths: &[usize]) -> Var {
        let h = self.encode(tape, store, x, lengths);
        let pool = SparseMatrix::mean_pool(&segment_groups(lengths), lengths.iter().sum());
        tape.sparse_matmul(Rc::new(pool), h)
    }
}

/// Masked self-attention over seven-day windows with window position and
/// weekday encodings, pooled over present days.
#[derive(Debug, Clone)]
pub struct WeeklyEncoder {
    proj: Linear,
    weekday_table: ParamId,
    layers: Vec<EncoderLayer>,
    heads: usize,
    positions: Tensor,
}

impl WeeklyEncoder {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        name: &str,
        in_dim: usize,
        dim: usize,
        heads: usize,
        n_layers: usize,
        ff_mult: usize,
    ) -> Result<Self> {
        let proj = Linear::new(store, rng, &format!("{name}.proj"), in_dim, dim)?;
        let weekday_table = store.add_glorot(format!("{name}.weekday_emb"), 7, dim, rng)?;
        let layers = (0..n_layers)
            .map(|l| EncoderLayer::new(store, rng, &format!("{name}.layer{l}"), dim, heads, ff_mult * dim))
            .collect::<Result<_>>()?;
        Ok(Self {
            proj,
            weekday_table,
            layers,
            heads,
            positions: sinusoidal_positions(WINDOW_DAYS, dim),
        })
    }

    /// `x` holds `7 * B` rows, window by window. `mask[i]` marks present
    /// days; every window needs at least one.
    pub fn encode(&self, tape: &mut Tape, store: &ParameterStore, x: Var, weekdays: &[u8], mask: &[bool]) -> Var {
        let n = weekdays.len();
        let windows = n / WINDOW_DAYS;
        let h = self.encode_positions(tape, store, x, weekdays, mask);
        let groups: Vec<Vec<usize>> = (0..windows)
            .map(|w| (w * WINDOW_DAYS..(w + 1) * WINDOW_DAYS).filter(|&i| mask[i]).collect())
            .collect();
        tape.sparse_matmul(Rc::new(SparseMatrix::mean_pool(&groups, n)), h)
    }

    /// Per-position outputs before pooling.
    pub fn encode_positions(&self, tape: &mut Tape, store: &ParameterStore, x: Var, weekdays: &[u8], mask: &[bool]) -> Var {
        let n = weekdays.len();
        debug_assert_eq!(n % WINDOW_DAYS, 0);
        let windows = n / WINDOW_DAYS;
        let h = self.proj.forward(tape, store, x);
        let pe = tape.constant(packed_positions(&self.positions, &vec![WINDOW_DAYS; windows]));
        let table = tape.param(store, self.weekday_table);
        let ids: Vec<usize> = weekdays.iter().map(|&w| w as usize).collect();
        let wd = tape.embedding_lookup(table, &ids);
        let h = tape.add(h, pe);
        let mut h = tape.add(h, wd);
        let plan = AttentionPlan::segments(&vec![WINDOW_DAYS; windows], self.heads, false).with_key_mask(mask.to_vec());
        for layer in &self.layers {
            h = layer.forward(tape, store, h, &plan);
        }
        h
    }
}

/// Autoregressive location decoder with a one-vector cross-attention memory.
#[derive(Debug, Clone)]
pub struct SpatialDecoder {
    proj_in: Linear,
    layers: Vec<DecoderLayer>,
    proj_out: Linear,
    out_bias: ParamId,
    heads: usize,
    positions: Tensor,
}

impl SpatialDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        emb_dim: usize,
        dim: usize,
        memory_dim: usize,
        vocab: usize,
        heads: usize,
        n_layers: usize,
        ff_mult: usize,
        max_len: usize,
    ) -> Result<Self> {
        let proj_in = Linear::new(store, rng, "spatial.proj_in", emb_dim, dim)?;
        let layers = (0..n_layers)
            .map(|l| DecoderLayer::new(store, rng, &format!("spatial.layer{l}"), dim, memory_dim, heads, ff_mult * dim))
            .collect::<Result<_>>()?;
        let proj_out = Linear::new(store, rng, "spatial.proj_out", dim, emb_dim)?;
        let out_bias = store.add("spatial.out_bias", Tensor::zeros(1, vocab))?;
        Ok(Self {
            proj_in,
            layers,
            proj_out,
            out_bias,
            heads,
            positions: sinusoidal_positions(max_len, dim),
        })
    }

    /// Logits over the vocabulary for every packed input row.
    ///
    /// `tokens` are the packed decoder inputs (starting with SOS per
    /// sequence), `table` is the `vocab x emb_dim` token embedding table and
    /// row `s` of `memory` conditions sequence `s`.
    pub fn logits(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        table: Var,
        tokens: &[usize],
        lengths: &[usize],
        memory: Var,
    ) -> Var {
        let x = tape.embedding_lookup(table, tokens);
        let h = self.proj_in.forward(tape, store, x);
        let pe = tape.constant(packed_positions(&self.positions, lengths));
        let mut h = tape.add(h, pe);
        let self_plan = AttentionPlan::segments(lengths, self.heads, true);
        let mut blocks = Vec::with_capacity(lengths.len());
        let mut start = 0;
        for (s, &len) in lengths.iter().enumerate() {
            blocks.push(AttentionBlock {
                q_start: start,
                q_len: len,
                k_start: s,
                k_len: 1,
            });
            start += len;
        }
        let cross_plan = AttentionPlan {
            blocks,
            heads: self.heads,
            causal: false,
            key_mask: None,
        };
        for layer in &self.layers {
            h = layer.forward(tape, store, h, memory, &self_plan, &cross_plan);
        }
        let out = self.proj_out.forward(tape, store, h);
        // output scores share the input token embeddings
        let table_t = tape.transpose(table);
        let logits = tape.matmul(out, table_t);
        let bias = tape.param(store, self.out_bias);
        tape.add_row(logits, bias)
    }
}

/// Non-causal encoder over location embeddings joined with the duration
/// history summary, regressing one duration per position.
#[derive(Debug, Clone)]
pub struct TemporalDecoder {
    adjust: Linear,
    proj: Linear,
    layers: Vec<EncoderLayer>,
    head: Linear,
    heads: usize,
    positions: Tensor,
}

impl TemporalDecoder {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        emb_dim: usize,
        dim: usize,
        memory_dim: usize,
        heads: usize,
        n_layers: usize,
        ff_mult: usize,
        max_len: usize,
        init_duration: f64,
    ) -> Result<Self> {
        let adjust = Linear::new(store, rng, "temporal.adjust", emb_dim, dim)?;
        let proj = Linear::new(store, rng, "temporal.proj", dim + memory_dim, dim)?;
        let layers = (0..n_layers)
            .map(|l| EncoderLayer::new(store, rng, &format!("temporal.layer{l}"), dim, heads, ff_mult * dim))
            .collect::<Result<_>>()?;
        let head = Linear::new(store, rng, "temporal.head", dim, 1)?;
        store.get_mut(head.b.unwrap()).value = Tensor::scalar(init_duration);
        Ok(Self {
            adjust,
            proj,
            layers,
            head,
            heads,
            positions: sinusoidal_positions(max_len, dim),
        })
    }

    /// `loc_emb` are packed location embeddings; row `s` of `memory`
    /// conditions sequence `s`. Returns an `N x 1` column.
    pub fn durations(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        loc_emb: Var,
        lengths: &[usize],
        memory: Var,
    ) -> Var {
        let s = self.adjust.forward(tape, store, loc_emb);
        let owner: Vec<Option<usize>> = lengths
            .iter()
            .enumerate()
            .flat_map(|(i, &len)| std::iter::repeat_n(Some(i), len))
            .collect();
        let z = tape.gather_rows(memory, owner);
        let x = tape.concat_cols(&[s, z]);
        let h = self.proj.forward(tape, store, x);
        let pe = tape.constant(packed_positions(&self.positions, lengths));
        let mut h = tape.add(h, pe);
        let plan = AttentionPlan::segments(lengths, self.heads, false);
        for layer in &self.layers {
            h = layer.forward(tape, store, h, &plan);
        }
        self.head.forward(tape, store, h)
    }
}
