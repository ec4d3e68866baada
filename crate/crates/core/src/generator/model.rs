use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EntitySet, LinearizedInput, Tokenizer, BOS, EOS, SEP};
use crate::error::{Error, Result};
use crate::nn::graph::bce_term;
use crate::nn::layers::{
    EncoderBlock, FeedForward, KeyValue, LayerNorm, Linear, MultiHeadAttention,
};
use crate::nn::{log_softmax, AttnMask, Graph, NodeId, ParamId, ParamStore, Tensor};

/// Third term of the fused average: the causal self-attention output, or
/// the normalized decoder input it was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SelfTerm {
    #[default]
    OPrev,
    EPrev,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FusionConfig {
    pub width: usize,
    pub heads: usize,
    pub encoder_blocks: usize,
    pub decoder_blocks: usize,
    /// Size of the shared position table; bounds every input stream.
    pub max_len: usize,
    pub self_term: SelfTerm,
    /// How many preceding tokens the language-model task conditions on.
    pub lm_window: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            width: 32,
            heads: 2,
            encoder_blocks: 2,
            decoder_blocks: 2,
            max_len: 192,
            self_term: SelfTerm::OPrev,
            lm_window: 64,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "generator.heads",
                "width must be a positive multiple of heads",
            ));
        }
        if self.encoder_blocks == 0 || self.decoder_blocks == 0 {
            return Err(Error::config(
                "generator.decoder_blocks",
                "need at least one block on each side",
            ));
        }
        if self.max_len < 2 {
            return Err(Error::config("generator.max_len", "must be at least 2"));
        }
        if self.lm_window == 0 {
            return Err(Error::config("generator.lm_window", "must be at least 1"));
        }
        Ok(())
    }
}

/// Weights of the auxiliary terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub mu: f64,
    pub nu: f64,
    pub lambda: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            mu: 1.0,
            nu: 1.0,
            lambda: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (key, v) in [("mu", self.mu), ("nu", self.nu), ("lambda", self.lambda)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::config(
                    format!("loss_weights.{key}"),
                    "must be non-negative",
                ));
            }
        }
        Ok(())
    }
}

/// `l_d + mu * l_lm + nu * l_t5 + lambda * l_t160`.
pub fn total_loss(l_d: f64, l_lm: f64, l_t5: f64, l_t160: f64, w: &LossWeights) -> f64 {
    l_d + w.mu * l_lm + w.nu * l_t5 + w.lambda * l_t160
}

/// Loss components of one example or their mean over a split.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub generation: f64,
    pub lm: f64,
    pub domain: f64,
    pub entity: f64,
    pub total: f64,
}

impl LossParts {
    pub(crate) fn add_scaled(&mut self, other: &LossParts, factor: f64) {
        self.generation += other.generation * factor;
        self.lm += other.lm * factor;
        self.domain += other.domain * factor;
        self.entity += other.entity * factor;
        self.total += other.total * factor;
    }
}

/// Summed token negative log-likelihood of `targets` under the row-wise
/// softmax of `logits`.
pub fn generation_loss(logits: &[Vec<f64>], targets: &[usize]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} logit rows for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    let mut total = 0.0;
    for (row, &t) in logits.iter().zip(targets) {
        if t >= row.len() {
            return Err(Error::TokenOutOfRange(t));
        }
        total -= log_softmax(row)[t];
    }
    Ok(total)
}

/// Multi-label cross-entropy of one head: the unweighted BCE summed over
/// classes, with probabilities clamped at `1e-12`.
pub fn hierarchical_type_loss(logits: &[f64], targets: &[bool]) -> Result<f64> {
    if logits.len() != targets.len() {
        return Err(Error::LengthMismatch(format!(
            "{} logits for {} targets",
            logits.len(),
            targets.len()
        )));
    }
    Ok(logits
        .iter()
        .zip(targets)
        .map(|(&x, &t)| bce_term(x, t as u8 as f64))
        .sum())
}

/// Canonical entity stream: the sorted entities, each followed by `[SEP]`.
/// An empty set yields a lone `[SEP]`.
pub fn entity_stream(entities: &EntitySet, tok: &Tokenizer) -> Vec<usize> {
    if entities.is_empty() {
        return vec![SEP];
    }
    let mut out = Vec::new();
    for e in entities {
        out.extend(tok.encode(e));
        out.push(SEP);
    }
    out
}

/// Everything the encoder side consumes for one response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionInput {
    pub context: Vec<usize>,
    pub spans: Vec<(usize, usize)>,
    /// Characters of each sentence's annotated entities, concatenated.
    pub sentence_entities: Vec<Vec<usize>>,
    pub entity_stream: Vec<usize>,
}

impl FusionInput {
    pub fn new(ctx: &LinearizedInput, predicted: &EntitySet, tok: &Tokenizer) -> Self {
        FusionInput {
            context: ctx.tokens.clone(),
            spans: ctx.sentence_spans.clone(),
            sentence_entities: ctx
                .sentence_entities
                .iter()
                .map(|es| es.iter().flat_map(|e| tok.encode(e)).collect())
                .collect(),
            entity_stream: entity_stream(predicted, tok),
        }
    }
}

/// One training instance: encoder input, response characters and the
/// response's entity and domain labels for the auxiliary heads.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenExample {
    pub input: FusionInput,
    pub target: Vec<usize>,
    pub entity_targets: Vec<bool>,
    pub domain_targets: Vec<bool>,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderBlock {
    pub norm: LayerNorm,
    pub self_attn: MultiHeadAttention,
    pub ent_attn: MultiHeadAttention,
    pub ctx_attn: MultiHeadAttention,
    pub norm_ffn: LayerNorm,
    pub ffn: FeedForward,
}

/// Projected encoder outputs for one decoder block.
#[derive(Debug, Clone, Copy)]
pub struct BlockSources {
    pub ctx: KeyValue,
    pub ent: KeyValue,
}

/// Graph nodes of one decoder block's fused encodings.
#[derive(Debug, Clone, Copy)]
pub struct BlockTrace {
    pub e_prev: NodeId,
    pub o_ent: Option<NodeId>,
    pub o_c: Option<NodeId>,
    pub o_prev: Option<NodeId>,
    pub o_avg: NodeId,
}

/// Values of one decoder block's fused encodings, one row per prefix
/// position.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockState {
    pub e_prev: Tensor,
    pub o_ent: Tensor,
    pub o_c: Tensor,
    pub o_prev: Option<Tensor>,
    pub o_avg: Tensor,
}

/// Encoder outputs, per-block fused encodings and the next-token logits
/// after a prefix.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionState {
    pub e_c: Tensor,
    pub e_ent: Tensor,
    pub blocks: Vec<BlockState>,
    pub logits: Vec<f64>,
}

/// Graph nodes of the four loss terms and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub generation: NodeId,
    pub lm: NodeId,
    pub domain: NodeId,
    pub entity: NodeId,
    pub total: NodeId,
}

impl LossNodes {
    pub fn values(&self, g: &Graph) -> LossParts {
        LossParts {
            generation: g.value(self.generation).item(),
            lm: g.value(self.lm).item(),
            domain: g.value(self.domain).item(),
            entity: g.value(self.entity).item(),
            total: g.value(self.total).item(),
        }
    }
}

/// Parameter layout of the entity-aware encoder-decoder.
#[derive(Debug, Clone)]
pub struct FusionModel {
    pub cfg: FusionConfig,
    pub vocab_size: usize,
    pub entity_classes: usize,
    pub domain_classes: usize,
    pub token_embedding: ParamId,
    pub position_embedding: ParamId,
    pub entity_mlp: [Linear; 2],
    pub encoder: Vec<EncoderBlock>,
    pub encoder_norm: LayerNorm,
    pub decoder: Vec<DecoderBlock>,
    pub final_norm: LayerNorm,
    pub output: Linear,
    pub domain_head: Linear,
    pub entity_head: Linear,
}

impl FusionModel {
    /// Allocates freshly initialized parameters. Depth tags: output and
    /// auxiliary heads 0, decoder blocks next, then encoder blocks, with the
    /// embeddings and the entity MLP deepest.
    pub fn new<R: Rng>(
        cfg: FusionConfig,
        vocab_size: usize,
        entity_classes: usize,
        domain_classes: usize,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if vocab_size == 0 || entity_classes == 0 || domain_classes == 0 {
            return Err(Error::Empty("generator vocabulary or label space".into()));
        }
        let d = cfg.width;
        let (nd, ne) = (cfg.decoder_blocks, cfg.encoder_blocks);
        let deepest = nd + ne + 1;
        let mut s = ParamStore::new();
        let token_embedding = s.add_normal("gen.tok", vocab_size, d, 0.1, deepest, rng);
        let position_embedding = s.add_normal("gen.pos", cfg.max_len, d, 0.1, deepest, rng);
        let entity_mlp = [
            Linear::new(&mut s, "gen.ent_mlp.0", d, d, deepest, rng),
            Linear::new(&mut s, "gen.ent_mlp.1", d, d, deepest, rng),
        ];
        let encoder = (0..ne)
            .map(|i| {
                EncoderBlock::new(
                    &mut s,
                    &format!("gen.enc{i}"),
                    d,
                    cfg.heads,
                    nd + ne - i,
                    rng,
                )
            })
            .collect();
        let encoder_norm = LayerNorm::new(&mut s, "gen.enc_norm", d, nd + 1);
        let decoder = (0..nd)
            .map(|i| {
                let name = format!("gen.dec{i}");
                let depth = nd - i;
                DecoderBlock {
                    norm: LayerNorm::new(&mut s, &format!("{name}.ln1"), d, depth),
                    self_attn: MultiHeadAttention::new(
                        &mut s,
                        &format!("{name}.self"),
                        d,
                        cfg.heads,
                        depth,
                        rng,
                    ),
                    ent_attn: MultiHeadAttention::new(
                        &mut s,
                        &format!("{name}.ent"),
                        d,
                        cfg.heads,
                        depth,
                        rng,
                    ),
                    ctx_attn: MultiHeadAttention::new(
                        &mut s,
                        &format!("{name}.ctx"),
                        d,
                        cfg.heads,
                        depth,
                        rng,
                    ),
                    norm_ffn: LayerNorm::new(&mut s, &format!("{name}.ln2"), d, depth),
                    ffn: FeedForward::new(&mut s, &format!("{name}.ffn"), d, 2 * d, depth, rng),
                }
            })
            .collect();
        let final_norm = LayerNorm::new(&mut s, "gen.final_norm", d, 0);
        let output = Linear::new(&mut s, "gen.out", d, vocab_size, 0, rng);
        let domain_head = Linear::new(&mut s, "gen.head5", d, domain_classes, 0, rng);
        let entity_head = Linear::new(&mut s, "gen.head_ent", d, entity_classes, 0, rng);
        Ok((
            FusionModel {
                cfg,
                vocab_size,
                entity_classes,
                domain_classes,
                token_embedding,
                position_embedding,
                entity_mlp,
                encoder,
                encoder_norm,
                decoder,
                final_norm,
                output,
                domain_head,
                entity_head,
            },
            s,
        ))
    }

    fn check_stream(&self, tokens: &[usize], what: &str) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty(what.into()));
        }
        if tokens.len() > self.cfg.max_len {
            return Err(Error::SequenceTooLong {
                len: tokens.len(),
                max: self.cfg.max_len,
            });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t >= self.vocab_size) {
            return Err(Error::TokenOutOfRange(t));
        }
        Ok(())
    }

    fn embed(&self, store: &ParamStore, g: &mut Graph, tokens: &[usize]) -> NodeId {
        let tok = g.param(store, self.token_embedding);
        let pos = g.param(store, self.position_embedding);
        let te = g.gather_rows(tok, tokens);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pe = g.gather_rows(pos, &positions);
        g.add(te, pe)
    }

    fn mlp(&self, store: &ParamStore, g: &mut Graph, x: NodeId) -> NodeId {
        let h = self.entity_mlp[0].forward(g, store, x);
        let h = g.tanh(h);
        self.entity_mlp[1].forward(g, store, h)
    }

    /// Per-position entity channel: the MLP of the mean entity-character
    /// embedding for sentences with entities, the sentence's mean token
    /// embedding otherwise, and zero on special tokens.
    pub fn entity_channel(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        input: &FusionInput,
    ) -> Result<NodeId> {
        self.check_stream(&input.context, "context")?;
        if input.spans.len() != input.sentence_entities.len() {
            return Err(Error::LengthMismatch(format!(
                "{} sentence spans with {} entity lists",
                input.spans.len(),
                input.sentence_entities.len()
            )));
        }
        let n = input.context.len();
        let tok = g.param(store, self.token_embedding);
        let mut rows = Vec::with_capacity(input.spans.len() + 1);
        let mut index = vec![input.spans.len(); n];
        for (k, (&(s, e), ents)) in input.spans.iter().zip(&input.sentence_entities).enumerate() {
            if s >= e {
                return Err(Error::Empty(format!("sentence span {k}")));
            }
            if e > n {
                return Err(Error::Shape(format!(
                    "sentence span {k} ends at {e} past {n} tokens"
                )));
            }
            if let Some(&t) = ents.iter().find(|&&t| t >= self.vocab_size) {
                return Err(Error::TokenOutOfRange(t));
            }
            let row = if ents.is_empty() {
                let te = g.gather_rows(tok, &input.context[s..e]);
                g.mean_rows(te)
            } else {
                let te = g.gather_rows(tok, ents);
                let mean = g.mean_rows(te);
                self.mlp(store, g, mean)
            };
            rows.push(row);
            index[s..e].iter_mut().for_each(|i| *i = k);
        }
        rows.push(g.constant(Tensor::zeros(&[1, self.cfg.width])));
        let table = g.concat_rows(&rows);
        Ok(g.gather_rows(table, &index))
    }

    /// Token plus position plus entity-channel embedding of the context.
    pub fn context_embedding(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        input: &FusionInput,
    ) -> Result<NodeId> {
        let channel = self.entity_channel(store, g, input)?;
        let x = self.embed(store, g, &input.context);
        Ok(g.add(x, channel))
    }

    fn encode_stream(&self, store: &ParamStore, g: &mut Graph, mut x: NodeId) -> Result<NodeId> {
        for block in &self.encoder {
            x = block.forward(g, store, x, AttnMask::None)?;
        }
        Ok(self.encoder_norm.forward(g, store, x))
    }

    /// Encodes the context and the entity stream with the shared encoder,
    /// returning `(E_C, E_ent)`.
    pub fn encode(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        input: &FusionInput,
    ) -> Result<(NodeId, NodeId)> {
        self.check_stream(&input.entity_stream, "entity stream")?;
        let ctx = self.context_embedding(store, g, input)?;
        let e_c = self.encode_stream(store, g, ctx)?;
        let ent = self.embed(store, g, &input.entity_stream);
        let e_ent = self.encode_stream(store, g, ent)?;
        Ok((e_c, e_ent))
    }

    pub fn project_sources(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        e_c: NodeId,
        e_ent: NodeId,
    ) -> Vec<BlockSources> {
        self.decoder
            .iter()
            .map(|b| BlockSources {
                ctx: b.ctx_attn.project_source(g, store, e_c),
                ent: b.ent_attn.project_source(g, store, e_ent),
            })
            .collect()
    }

    /// Runs the decoder over `prefix` and returns the logits of every
    /// position. Without `sources` the blocks run in self-only mode, where
    /// the causal self-attention output replaces the fused average.
    pub fn decode(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        prefix: &[usize],
        sources: Option<&[BlockSources]>,
    ) -> Result<(NodeId, Vec<BlockTrace>)> {
        self.check_stream(prefix, "decoder prefix")?;
        let mut x = self.embed(store, g, prefix);
        let mut traces = Vec::with_capacity(self.decoder.len());
        for (i, block) in self.decoder.iter().enumerate() {
            let a = block.norm.forward(g, store, x);
            let trace = match sources {
                Some(src) => {
                    let o_ent = block
                        .ent_attn
                        .attend(g, store, a, src[i].ent, AttnMask::None)?;
                    let o_c = block
                        .ctx_attn
                        .attend(g, store, a, src[i].ctx, AttnMask::None)?;
                    let (o_prev, self_term) = match self.cfg.self_term {
                        SelfTerm::OPrev => {
                            let o = block.self_attn.forward(g, store, a, a, AttnMask::Causal)?;
                            (Some(o), o)
                        }
                        SelfTerm::EPrev => (None, a),
                    };
                    BlockTrace {
                        e_prev: a,
                        o_ent: Some(o_ent),
                        o_c: Some(o_c),
                        o_prev,
                        o_avg: g.mean_of(&[o_ent, o_c, self_term]),
                    }
                }
                None => {
                    let o = block.self_attn.forward(g, store, a, a, AttnMask::Causal)?;
                    BlockTrace {
                        e_prev: a,
                        o_ent: None,
                        o_c: None,
                        o_prev: Some(o),
                        o_avg: o,
                    }
                }
            };
            x = g.add(x, trace.o_avg);
            let h = block.norm_ffn.forward(g, store, x);
            let f = block.ffn.forward(g, store, h);
            x = g.add(x, f);
            traces.push(trace);
        }
        let h = self.final_norm.forward(g, store, x);
        Ok((self.output.forward(g, store, h), traces))
    }

    /// Full forward pass for one prefix, returning every intermediate
    /// encoding and the logits at its last position.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        input: &FusionInput,
        prefix: &[usize],
    ) -> Result<FusionState> {
        check_prefix(prefix)?;
        let mut g = Graph::new();
        let (e_c, e_ent) = self.encode(store, &mut g, input)?;
        let sources = self.project_sources(store, &mut g, e_c, e_ent);
        let (logits, traces) = self.decode(store, &mut g, prefix, Some(&sources))?;
        let value = |id: NodeId| g.value(id).clone();
        let blocks = traces
            .iter()
            .map(|t| BlockState {
                e_prev: value(t.e_prev),
                o_ent: value(t.o_ent.expect("fused mode")),
                o_c: value(t.o_c.expect("fused mode")),
                o_prev: t.o_prev.map(value),
                o_avg: value(t.o_avg),
            })
            .collect();
        Ok(FusionState {
            e_c: value(e_c),
            e_ent: value(e_ent),
            blocks,
            logits: g.value(logits).row(prefix.len() - 1).to_vec(),
        })
    }

    /// Summed next-token NLL of `seq` with the decoder in self-only mode,
    /// each position conditioned on at most `window` preceding tokens.
    pub fn lm_loss_node(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        seq: &[usize],
        window: usize,
    ) -> Result<NodeId> {
        let n = seq.len();
        if n < 2 {
            return Err(Error::Empty(
                "language-model sequence needs two tokens".into(),
            ));
        }
        if window == 0 {
            return Err(Error::config("generator.lm_window", "must be at least 1"));
        }
        // Positions up to `window` see their whole history in one pass.
        let head = window.min(n - 1);
        let (logits, _) = self.decode(store, g, &seq[..head], None)?;
        let mut terms = vec![g.cross_entropy(logits, &seq[1..=head])?];
        for i in head + 1..n {
            let (logits, _) = self.decode(store, g, &seq[i - window..i], None)?;
            let last = g.gather_rows(logits, &[window - 1]);
            terms.push(g.cross_entropy(last, &[seq[i]])?);
        }
        let all = g.concat_cols(&terms);
        Ok(g.sum(all))
    }

    pub fn lm_loss(&self, store: &ParamStore, seq: &[usize], window: usize) -> Result<f64> {
        let mut g = Graph::new();
        let node = self.lm_loss_node(store, &mut g, seq, window)?;
        Ok(g.value(node).item())
    }

    /// Records all four losses of one example and their weighted sum.
    pub fn losses(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        ex: &GenExample,
        w: &LossWeights,
    ) -> Result<LossNodes> {
        if ex.entity_targets.len() != self.entity_classes
            || ex.domain_targets.len() != self.domain_classes
        {
            return Err(Error::LengthMismatch(
                "auxiliary targets do not match the heads".into(),
            ));
        }
        let (e_c, e_ent) = self.encode(store, g, &ex.input)?;
        let sources = self.project_sources(store, g, e_c, e_ent);
        let mut inputs = Vec::with_capacity(ex.target.len() + 1);
        inputs.push(BOS);
        inputs.extend_from_slice(&ex.target);
        let mut outputs = ex.target.clone();
        outputs.push(EOS);
        let (logits, traces) = self.decode(store, g, &inputs, Some(&sources))?;
        let generation = g.cross_entropy(logits, &outputs)?;

        let mut seq = inputs;
        seq.push(EOS);
        let lm = self.lm_loss_node(store, g, &seq, self.cfg.lm_window)?;

        let o_c = traces.last().and_then(|t| t.o_c).expect("fused mode");
        let pooled = g.mean_rows(o_c);
        let as_f64 = |v: &[bool]| v.iter().map(|&b| b as u8 as f64).collect::<Vec<_>>();
        let z5 = self.domain_head.forward(g, store, pooled);
        let domain = g.bce_with_logits(
            z5,
            &as_f64(&ex.domain_targets),
            &vec![1.0; self.domain_classes],
            1.0,
        )?;
        let zk = self.entity_head.forward(g, store, pooled);
        let entity = g.bce_with_logits(
            zk,
            &as_f64(&ex.entity_targets),
            &vec![1.0; self.entity_classes],
            1.0,
        )?;

        let mut total = generation;
        for (node, weight) in [(lm, w.mu), (domain, w.nu), (entity, w.lambda)] {
            let scaled = g.scale(node, weight);
            total = g.add(total, scaled);
        }
        Ok(LossNodes {
            generation,
            lm,
            domain,
            entity,
            total,
        })
    }

    /// Loss values of one example without recording gradients.
    pub fn eval_losses(
        &self,
        store: &ParamStore,
        ex: &GenExample,
        w: &LossWeights,
    ) -> Result<LossParts> {
        let mut g = Graph::new();
        let nodes = self.losses(store, &mut g, ex, w)?;
        Ok(nodes.values(&g))
    }
}

pub(crate) fn check_prefix(prefix: &[usize]) -> Result<()> {
    match prefix.first() {
        Some(&BOS) => Ok(()),
        Some(&t) => Err(Error::InvalidPrefix(format!(
            "starts with token {t}, not [BOS]"
        ))),
        None => Err(Error::InvalidPrefix("empty".into())),
    }
}
