use super::model::{check_prefix, BlockSources, FusionInput, FusionModel};
use crate::corpus::{BOS, EOS};
use crate::decode::Scorer;
use crate::error::Result;
use crate::nn::layers::KeyValue;
use crate::nn::{Graph, ParamStore, Tensor};

struct CachedSources {
    ctx_keys: Tensor,
    ctx_values: Tensor,
    ent_keys: Tensor,
    ent_values: Tensor,
}

/// A frozen generator bound to one context and one predicted entity set.
///
/// The encoder runs once at construction; its projected keys and values are
/// replayed for every prefix.
pub struct FusionScorer<'a> {
    model: &'a FusionModel,
    params: &'a ParamStore,
    sources: Vec<CachedSources>,
}

impl<'a> FusionScorer<'a> {
    pub fn new(
        model: &'a FusionModel,
        params: &'a ParamStore,
        input: &FusionInput,
    ) -> Result<Self> {
        let mut g = Graph::new();
        let (e_c, e_ent) = model.encode(params, &mut g, input)?;
        let sources = model
            .project_sources(params, &mut g, e_c, e_ent)
            .into_iter()
            .map(|s| CachedSources {
                ctx_keys: g.value(s.ctx.keys).clone(),
                ctx_values: g.value(s.ctx.values).clone(),
                ent_keys: g.value(s.ent.keys).clone(),
                ent_values: g.value(s.ent.values).clone(),
            })
            .collect();
        Ok(FusionScorer {
            model,
            params,
            sources,
        })
    }

    /// Logits of every prefix position.
    pub fn all_logits(&self, prefix: &[usize]) -> Result<Tensor> {
        check_prefix(prefix)?;
        let mut g = Graph::new();
        let sources: Vec<BlockSources> = self
            .sources
            .iter()
            .map(|c| BlockSources {
                ctx: KeyValue {
                    keys: g.constant(c.ctx_keys.clone()),
                    values: g.constant(c.ctx_values.clone()),
                },
                ent: KeyValue {
                    keys: g.constant(c.ent_keys.clone()),
                    values: g.constant(c.ent_values.clone()),
                },
            })
            .collect();
        let (logits, _) = self
            .model
            .decode(self.params, &mut g, prefix, Some(&sources))?;
        Ok(g.value(logits).clone())
    }
}

impl Scorer for FusionScorer<'_> {
    fn vocab_size(&self) -> usize {
        self.model.vocab_size
    }

    fn bos(&self) -> usize {
        BOS
    }

    fn eos(&self) -> Option<usize> {
        Some(EOS)
    }

    fn logits(&self, prefix: &[usize]) -> Result<Vec<f64>> {
        let all = self.all_logits(prefix)?;
        Ok(all.row(prefix.len() - 1).to_vec())
    }
}

/// Log-probabilities of the token after `prefix`.
pub fn score_next_token(
    model: &FusionModel,
    params: &ParamStore,
    input: &FusionInput,
    prefix: &[usize],
) -> Result<Vec<f64>> {
    FusionScorer::new(model, params, input)?.log_probs(prefix)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::SEP;
    use crate::generator::model::{FusionConfig, SelfTerm};
    use crate::nn::log_softmax;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const V: usize = 14;

    fn setup(seed: u64) -> (FusionModel, ParamStore) {
        let cfg = FusionConfig {
            width: 8,
            heads: 2,
            encoder_blocks: 1,
            decoder_blocks: 2,
            max_len: 16,
            self_term: SelfTerm::OPrev,
            lm_window: 16,
        };
        FusionModel::new(cfg, V, 3, 2, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    fn input(entities: Vec<usize>) -> FusionInput {
        FusionInput {
            context: vec![1, 7, 8, 9, 2, 10, 11, 2],
            spans: vec![(1, 4), (5, 7)],
            sentence_entities: vec![vec![12, 13], vec![]],
            entity_stream: entities,
        }
    }

    #[test]
    fn log_probs_normalize() {
        let (m, p) = setup(1);
        let lp = score_next_token(&m, &p, &input(vec![SEP]), &[BOS, 7]).unwrap();
        assert_eq!(lp.len(), V);
        let mass: f64 = lp.iter().map(|x| x.exp()).sum();
        assert!((mass - 1.0).abs() < 1e-9);
        assert_eq!(
            lp,
            score_next_token(&m, &p, &input(vec![SEP]), &[BOS, 7]).unwrap()
        );
    }

    #[test]
    fn cached_sources_match_full_pass() {
        let (m, p) = setup(2);
        let inp = input(vec![9, 10, SEP]);
        let state = m.decode_step(&p, &inp, &[BOS, 7, 8]).unwrap();
        let cached = FusionScorer::new(&m, &p, &inp)
            .unwrap()
            .logits(&[BOS, 7, 8])
            .unwrap();
        assert_eq!(state.logits, cached);
        assert_eq!(
            log_softmax(&state.logits),
            score_next_token(&m, &p, &inp, &[BOS, 7, 8]).unwrap()
        );
    }

    #[test]
    fn entity_set_changes_scores() {
        let (m, p) = setup(3);
        let empty = score_next_token(&m, &p, &input(vec![SEP]), &[BOS]).unwrap();
        let some = score_next_token(&m, &p, &input(vec![12, 13, SEP]), &[BOS]).unwrap();
        assert_ne!(empty, some);
    }

    proptest! {
        #[test]
        fn earlier_positions_ignore_later_tokens(seed in 0u64..200, len in 2usize..10, cut in 1usize..9) {
            let cut = cut.min(len - 1);
            let (m, p) = setup(seed % 4);
            let scorer = FusionScorer::new(&m, &p, &input(vec![9, SEP])).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut a = vec![BOS];
            a.extend((1..len).map(|_| rng.random_range(0..V)));
            let mut b = a.clone();
            for t in &mut b[cut..] {
                *t = rng.random_range(0..V);
            }
            let la = scorer.all_logits(&a).unwrap();
            let lb = scorer.all_logits(&b).unwrap();
            for i in 0..cut {
                prop_assert_eq!(la.row(i), lb.row(i));
            }
        }
    }
}
