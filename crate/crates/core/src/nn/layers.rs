//! Parameter bundles for the building blocks shared by both models.

use rand::Rng;

use super::graph::{AttnMask, Graph, NodeId};
use super::params::{ParamId, ParamStore};
use crate::error::Result;

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Linear {
            weight: store.add_normal(format!("{name}.weight"), input, output, std, depth, rng),
            bias: Some(store.add_filled(format!("{name}.bias"), 1, output, 0.0, depth)),
        }
    }

    pub fn without_bias<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (input as f64).sqrt();
        Linear {
            weight: store.add_normal(format!("{name}.weight"), input, output, std, depth, rng),
            bias: None,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let w = g.param(store, self.weight);
        let z = g.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(z, b)
            }
            None => z,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, depth: usize) -> Self {
        LayerNorm {
            gain: store.add_filled(format!("{name}.gain"), 1, width, 1.0, depth),
            bias: store.add_filled(format!("{name}.bias"), 1, width, 0.0, depth),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Multi-head attention with separate query, key, value and output
/// projections.
#[derive(Debug, Clone, Copy)]
pub struct MultiHeadAttention {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

/// Projected keys and values of an attention source, reusable across
/// queries.
#[derive(Debug, Clone, Copy)]
pub struct KeyValue {
    pub keys: NodeId,
    pub values: NodeId,
}

impl MultiHeadAttention {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        assert!(
            heads > 0 && width.is_multiple_of(heads),
            "width {width} not divisible by {heads} heads"
        );
        MultiHeadAttention {
            query: Linear::new(store, &format!("{name}.q"), width, width, depth, rng),
            // A key bias only shifts each score row and cancels in the softmax.
            key: Linear::without_bias(store, &format!("{name}.k"), width, width, depth, rng),
            value: Linear::new(store, &format!("{name}.v"), width, width, depth, rng),
            output: Linear::new(store, &format!("{name}.o"), width, width, depth, rng),
            heads,
        }
    }

    pub fn project_source(&self, g: &mut Graph, store: &ParamStore, source: NodeId) -> KeyValue {
        KeyValue {
            keys: self.key.forward(g, store, source),
            values: self.value.forward(g, store, source),
        }
    }

    pub fn attend(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        kv: KeyValue,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let q = self.query.forward(g, store, queries);
        let mixed = g.attention(q, kv.keys, kv.values, self.heads, mask)?;
        Ok(self.output.forward(g, store, mixed))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        queries: NodeId,
        source: NodeId,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let kv = self.project_source(g, store, source);
        self.attend(g, store, queries, kv, mask)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}

impl FeedForward {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        hidden: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        FeedForward {
            up: Linear::new(store, &format!("{name}.up"), width, hidden, depth, rng),
            down: Linear::new(store, &format!("{name}.down"), hidden, width, depth, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: NodeId) -> NodeId {
        let h = self.up.forward(g, store, x);
        let h = g.gelu(h);
        self.down.forward(g, store, h)
    }
}

/// Pre-norm self-attention block: `x + attn(ln(x))`, then `x + ffn(ln(x))`.
#[derive(Debug, Clone, Copy)]
pub struct EncoderBlock {
    pub norm_attn: LayerNorm,
    pub attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        width: usize,
        heads: usize,
        depth: usize,
        rng: &mut R,
    ) -> Self {
        EncoderBlock {
            norm_attn: LayerNorm::new(store, &format!("{name}.ln1"), width, depth),
            attn: MultiHeadAttention::new(store, &format!("{name}.attn"), width, heads, depth, rng),
            norm_ffn: LayerNorm::new(store, &format!("{name}.ln2"), width, depth),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), width, 2 * width, depth, rng),
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        mask: AttnMask,
    ) -> Result<NodeId> {
        let h = self.norm_attn.forward(g, store, x);
        let a = self.attn.forward(g, store, h, h, mask)?;
        let x = g.add(x, a);
        let h = self.norm_ffn.forward(g, store, x);
        let f = self.ffn.forward(g, store, h);
        Ok(g.add(x, f))
    }
}
