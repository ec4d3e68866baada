use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::LinearizedInput;
use crate::error::{Error, Result};
use crate::nn::dropout::multi_sample_dropout_node;
use crate::nn::layers::{EncoderBlock, LayerNorm};
use crate::nn::{sigmoid, AttnMask, Graph, Mode, NodeId, ParamId, ParamStore};

/// The scorer always has three blocks, so the pooled "last three layers"
/// are the whole stack.
pub const ENTITY_BLOCKS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntityModelConfig {
    pub width: usize,
    pub heads: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub dropout_samples: usize,
}

impl Default for EntityModelConfig {
    fn default() -> Self {
        EntityModelConfig {
            width: 32,
            heads: 2,
            max_len: 160,
            dropout: 0.1,
            dropout_samples: 4,
        }
    }
}

impl EntityModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::config(
                "entity.heads",
                "width must be a positive multiple of heads",
            ));
        }
        if self.max_len == 0 {
            return Err(Error::config("entity.max_len", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("entity.dropout", "must lie in [0, 1)"));
        }
        if self.dropout_samples == 0 {
            return Err(Error::config(
                "entity.dropout_samples",
                "must be at least 1",
            ));
        }
        Ok(())
    }
}

/// Parameter layout of the entity scorer. The weights themselves live in a
/// [`ParamStore`] so training, gradient checks and frozen inference can
/// share one architecture.
#[derive(Debug, Clone)]
pub struct EntityModel {
    pub cfg: EntityModelConfig,
    pub vocab_size: usize,
    pub classes: usize,
    pub token_embedding: ParamId,
    position_embedding: ParamId,
    blocks: [EncoderBlock; ENTITY_BLOCKS],
    cls_norm: LayerNorm,
    pool: ParamId,
    head_weight: ParamId,
    head_bias: ParamId,
}

impl EntityModel {
    /// Allocates freshly initialized parameters. Depth tags count down from
    /// the embeddings (deepest) to the classifier head (0).
    pub fn new<R: Rng>(
        cfg: EntityModelConfig,
        vocab_size: usize,
        classes: usize,
        rng: &mut R,
    ) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if classes == 0 {
            return Err(Error::Empty("entity vocabulary".into()));
        }
        let d = cfg.width;
        let mut s = ParamStore::new();
        let token_embedding = s.add_normal("ent.tok", vocab_size, d, 0.1, ENTITY_BLOCKS + 1, rng);
        let position_embedding =
            s.add_normal("ent.pos", cfg.max_len, d, 0.1, ENTITY_BLOCKS + 1, rng);
        let blocks = std::array::from_fn(|i| {
            EncoderBlock::new(
                &mut s,
                &format!("ent.block{i}"),
                d,
                cfg.heads,
                ENTITY_BLOCKS - i,
                rng,
            )
        });
        let cls_norm = LayerNorm::new(&mut s, "ent.cls_norm", d, 0);
        let pool = s.add_normal("ent.pool", d, 1, 1.0 / (d as f64).sqrt(), 0, rng);
        let head_weight = s.add_normal(
            "ent.head.weight",
            d,
            classes,
            1.0 / (d as f64).sqrt(),
            0,
            rng,
        );
        let head_bias = s.add_filled("ent.head.bias", 1, classes, 0.0, 0);
        Ok((
            EntityModel {
                cfg,
                vocab_size,
                classes,
                token_embedding,
                position_embedding,
                blocks,
                cls_norm,
                pool,
                head_weight,
                head_bias,
            },
            s,
        ))
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::Empty("entity scorer input".into()));
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

    /// Records the forward pass and returns the `1 x classes` logits.
    ///
    /// The `[CLS]` rows of the three blocks are layer-normalized, pooled by a
    /// learned softmax over layers, and fed to the multi-sample-dropout head.
    pub fn logits<R: Rng + ?Sized>(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        tokens: &[usize],
        mode: Mode,
        rng: &mut R,
    ) -> Result<NodeId> {
        self.check_tokens(tokens)?;
        let tok = g.param(store, self.token_embedding);
        let pos = g.param(store, self.position_embedding);
        let te = g.gather_rows(tok, tokens);
        let positions: Vec<usize> = (0..tokens.len()).collect();
        let pe = g.gather_rows(pos, &positions);
        let mut x = g.add(te, pe);
        let mut cls = Vec::with_capacity(ENTITY_BLOCKS);
        for block in &self.blocks {
            x = block.forward(g, store, x, AttnMask::None)?;
            cls.push(g.gather_rows(x, &[0]));
        }
        let stacked = g.concat_rows(&cls);
        let h = self.cls_norm.forward(g, store, stacked);
        let w = g.param(store, self.pool);
        let scores = g.matmul(h, w);
        let scores = g.transpose(scores);
        let alpha = g.softmax_rows(scores, AttnMask::None)?;
        let pooled = g.matmul(alpha, h);
        let hw = g.param(store, self.head_weight);
        let hb = g.param(store, self.head_bias);
        multi_sample_dropout_node(
            g,
            pooled,
            self.cfg.dropout_samples,
            self.cfg.dropout,
            hw,
            hb,
            mode,
            rng,
        )
    }
}

/// A trained entity scorer with frozen weights.
#[derive(Debug, Clone)]
pub struct EntityScorer {
    pub model: EntityModel,
    pub params: ParamStore,
}

impl EntityScorer {
    /// Rebuilds the architecture and loads `params` into it.
    pub fn from_params(
        cfg: EntityModelConfig,
        vocab_size: usize,
        classes: usize,
        params: &ParamStore,
    ) -> Result<Self> {
        let (model, mut store) =
            EntityModel::new(cfg, vocab_size, classes, &mut ChaCha8Rng::seed_from_u64(0))?;
        store.copy_values_from(params)?;
        Ok(EntityScorer {
            model,
            params: store,
        })
    }

    pub fn logits(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        // Eval mode draws no dropout masks, so the generator is never advanced.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self
            .model
            .logits(&self.params, &mut g, tokens, Mode::Eval, &mut rng)?;
        Ok(g.value(out).data().to_vec())
    }

    /// Per-entity probabilities in eval mode.
    pub fn predict_scores(&self, input: &LinearizedInput) -> Result<Vec<f64>> {
        Ok(self
            .logits(&input.tokens)?
            .into_iter()
            .map(sigmoid)
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::grad_check;

    fn tiny() -> EntityModelConfig {
        EntityModelConfig {
            width: 4,
            heads: 2,
            max_len: 8,
            dropout: 0.2,
            dropout_samples: 2,
        }
    }

    #[test]
    fn eval_is_deterministic_and_shaped() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (model, params) =
            EntityModel::new(EntityModelConfig::default(), 20, 7, &mut rng).unwrap();
        let scorer = EntityScorer { model, params };
        let input = LinearizedInput {
            tokens: vec![1, 8, 9, 10, 2],
            sentence_spans: vec![(1, 4)],
            sentence_entities: vec![vec![]],
        };
        let a = scorer.predict_scores(&input).unwrap();
        assert_eq!(a.len(), 7);
        assert!(a.iter().all(|&p| p > 0.0 && p < 1.0));
        assert_eq!(a, scorer.predict_scores(&input).unwrap());
    }

    #[test]
    fn rejects_long_or_foreign_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (model, params) = EntityModel::new(tiny(), 10, 3, &mut rng).unwrap();
        let scorer = EntityScorer { model, params };
        assert!(matches!(
            scorer.logits(&[1; 9]),
            Err(Error::SequenceTooLong { len: 9, max: 8 })
        ));
        assert!(matches!(
            scorer.logits(&[1, 10]),
            Err(Error::TokenOutOfRange(10))
        ));
    }

    #[test]
    fn weighted_bce_gradients() {
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (model, mut store) = EntityModel::new(tiny(), 10, 3, &mut rng).unwrap();
            let tokens = [1, 7, 8, 3, 9, 2];
            let report = grad_check(
                &mut store,
                |s, g| {
                    // Same dropout masks on every evaluation.
                    let mut masks = ChaCha8Rng::seed_from_u64(100 + seed);
                    let logits = model.logits(s, g, &tokens, Mode::Train, &mut masks)?;
                    g.bce_with_logits(logits, &[1.0, 0.0, 1.0], &[0.5, 1.0, 1.5], 3.0)
                },
                1e-5,
            )
            .unwrap();
            assert!(report.max_rel_error <= 1e-4, "{report:?}");
        }
    }
}
