//! Parameterised building blocks on top of [`Tape`].

use std::rc::Rc;

use rand::Rng;

use super::params::{ParamId, ParameterStore};
use super::tape::{AttentionPlan, Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const LN_EPS: f64 = 1e-5;

/// `x W + b`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng)?;
        let b = store.add(format!("{name}.b"), Tensor::zeros(1, out_dim))?;
        Ok(Self {
            w,
            b: Some(b),
            in_dim,
            out_dim,
        })
    }

    pub fn no_bias(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let w = store.add_glorot(format!("{name}.w"), in_dim, out_dim, rng)?;
        Ok(Self {
            w,
            b: None,
            in_dim,
            out_dim,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let w = tape.param(store, self.w);
        let y = tape.matmul(x, w);
        match self.b {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Row standardisation followed by a learned gain and shift.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParameterStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.add(format!("{name}.gain"), Tensor::filled(1, dim, 1.0))?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(1, dim))?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let n = tape.layer_norm(x, LN_EPS);
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        let y = tape.mul_row(n, g);
        tape.add_row(y, b)
    }
}

/// Two linear maps with a ReLU between.
#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub l1: Linear,
    pub l2: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, dim: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(Self {
            l1: Linear::new(store, rng, &format!("{name}.l1"), dim, hidden)?,
            l2: Linear::new(store, rng, &format!("{name}.l2"), hidden, out)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var) -> Var {
        let h = self.l1.forward(tape, store, x);
        let h = tape.relu(h);
        self.l2.forward(tape, store, h)
    }
}

/// Multi-head scaled dot-product attention with query, key, value and
/// output projections. Keys and values may come from a source of a
/// different width.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, dim: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(Error::HeadSplit { dim, heads });
        }
        Ok(Self {
            q: Linear::new(store, rng, &format!("{name}.q"), dim, dim)?,
            // A key bias only shifts every score of a query equally.
            k: Linear::no_bias(store, rng, &format!("{name}.k"), kv_dim, dim)?,
            v: Linear::new(store, rng, &format!("{name}.v"), kv_dim, dim)?,
            o: Linear::new(store, rng, &format!("{name}.o"), dim, dim)?,
            heads,
        })
    }

    /// `plan.heads` is overridden by this layer's head count.
    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x_q: Var, x_kv: Var, plan: &AttentionPlan) -> Var {
        self.forward_traced(tape, store, x_q, x_kv, plan).0
    }

    /// Like [`forward`](Self::forward) but also returns the attention node,
    /// whose weights can be read with [`Tape::attention_probs`].
    pub fn forward_traced(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x_q: Var,
        x_kv: Var,
        plan: &AttentionPlan,
    ) -> (Var, Var) {
        let q = self.q.forward(tape, store, x_q);
        let k = self.k.forward(tape, store, x_kv);
        let v = self.v.forward(tape, store, x_kv);
        let plan = if plan.heads == self.heads {
            Rc::new(plan.clone())
        } else {
            Rc::new(AttentionPlan {
                heads: self.heads,
                ..plan.clone()
            })
        };
        let a = tape.attention(q, k, v, plan);
        (self.o.forward(tape, store, a), a)
    }
}

/// Post-norm self-attention block: attention, add, norm, feed-forward, add,
/// norm.
#[derive(Debug, Clone, Copy)]
pub struct EncoderLayer {
    pub attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub ffn: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParameterStore, rng: &mut impl Rng, name: &str, dim: usize, heads: usize, ff: usize) -> Result<Self> {
        Ok(Self {
            attn: MultiHeadAttention::new(store, rng, &format!("{name}.attn"), dim, dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ff, dim)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParameterStore, x: Var, plan: &AttentionPlan) -> Var {
        let a = self.attn.forward(tape, store, x, x, plan);
        let x = tape.add(x, a);
        let x = self.norm1.forward(tape, store, x);
        let f = self.ffn.forward(tape, store, x);
        let x = tape.add(x, f);
        self.norm2.forward(tape, store, x)
    }
}

/// Post-norm decoder block: causal self-attention, cross-attention to a
/// memory, feed-forward.
#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attn: MultiHeadAttention,
    pub norm1: LayerNorm,
    pub cross_attn: MultiHeadAttention,
    pub norm2: LayerNorm,
    pub ffn: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(
        store: &mut ParameterStore,
        rng: &mut impl Rng,
        name: &str,
        dim: usize,
        memory_dim: usize,
        heads: usize,
        ff: usize,
    ) -> Result<Self> {
        Ok(Self {
            self_attn: MultiHeadAttention::new(store, rng, &format!("{name}.self_attn"), dim, dim, heads)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), dim)?,
            cross_attn: MultiHeadAttention::new(store, rng, &format!("{name}.cross_attn"), dim, memory_dim, heads)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), dim)?,
            ffn: FeedForward::new(store, rng, &format!("{name}.ffn"), dim, ff, dim)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), dim)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParameterStore,
        x: Var,
        memory: Var,
        self_plan: &AttentionPlan,
        cross_plan: &AttentionPlan,
    ) -> Var {
        let a = self.self_attn.forward(tape, store, x, x, self_plan);
        let x = tape.add(x, a);
        let x = self.norm1.forward(tape, store, x);
        let c = self.cross_attn.forward(tape, store, x, memory, cross_plan);
        let x = tape.add(x, c);
        let x = self.norm2.forward(tape, store, x);
        let f = self.ffn.forward(tape, store, x);
        let x = tape.add(x, f);
        self.norm3.forward(tape, store, x)
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(7)
    }

    fn random(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
        Tensor::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn head_split_is_checked() {
        let mut store = ParameterStore::new();
        let err = MultiHeadAttention::new(&mut store, &mut rng(), "a", 6, 6, 4).unwrap_err();
        assert!(matches!(err, Error::HeadSplit { dim: 6, heads: 4 }));
    }

    #[test]
    fn single_position_single_head_returns_projected_value() {
        let mut r = rng();
        let mut store = ParameterStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut r, "a", 4, 4, 1).unwrap();
        let x = random(1, 4, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let out = mha.forward(&mut tape, &store, xv, xv, &AttentionPlan::segments(&[1], 1, false));
        let v = mha.v.forward(&mut tape, &store, xv);
        let expected = mha.o.forward(&mut tape, &store, v);
        assert!(tape.value(out).max_abs_diff(tape.value(expected)) < 1e-12);
    }

    #[test]
    fn causal_output_ignores_future_positions() {
        let mut r = rng();
        let mut store = ParameterStore::new();
        let layer = EncoderLayer::new(&mut store, &mut r, "e", 8, 2, 16).unwrap();
        let x = random(5, 8, &mut r);
        let mut y = x.clone();
        for c in 0..8 {
            y.set(3, c, 9.0);
            y.set(4, c, -4.0);
        }
        let plan = AttentionPlan::segments(&[5], 2, true);
        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(input);
            let o = layer.forward(&mut tape, &store, v, &plan);
            tape.value(o).clone()
        };
        let (a, b) = (run(x), run(y));
        for row in 0..3 {
            assert_eq!(a.row(row), b.row(row));
        }
        assert_ne!(a.row(3), b.row(3));
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut r = rng();
        let mut store = ParameterStore::new();
        let mha = MultiHeadAttention::new(&mut store, &mut r, "a", 8, 8, 4).unwrap();
        let x = random(7, 8, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let plan = AttentionPlan::segments(&[3, 4], 4, true).with_key_mask(vec![true, false, true, true, true, false, true]);
        let (_, a) = mha.forward_traced(&mut tape, &store, xv, xv, &plan);
        let (plan, probs) = tape.attention_probs(a).unwrap();
        let mut pos = 0;
        for b in &plan.blocks {
            for _ in 0..plan.heads {
                for i in 0..b.q_len {
                    let row = &probs[pos..pos + b.k_len];
                    pos += b.k_len;
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                    for (j, &p) in row.iter().enumerate() {
                        if j > i || !plan.key_mask.as_ref().unwrap()[b.k_start + j] {
                            assert_eq!(p, 0.0);
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn attention_is_permutation_equivariant() {
        let mut r = rng();
        let mut store = ParameterStore::new();
        let layer = EncoderLayer::new(&mut store, &mut r, "e", 8, 2, 16).unwrap();
        let x = random(4, 8, &mut r);
        let perm = [2, 0, 3, 1];
        let px = Tensor::from_rows(&perm.iter().map(|&p| x.row(p).to_vec()).collect::<Vec<_>>()).unwrap();
        let plan = AttentionPlan::segments(&[4], 2, false);
        let run = |input: Tensor| {
            let mut tape = Tape::new();
            let v = tape.constant(input);
            let o = layer.forward(&mut tape, &store, v, &plan);
            tape.value(o).clone()
        };
        let (a, b) = (run(x), run(px));
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..8 {
                assert!((b.get(i, c) - a.get(p, c)).abs() < 1e-12);
            }
        }
    }
}
