use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{FusionConfig, FusionInput, FusionModel, GenExample, LossParts, LossWeights};
use crate::corpus::{linearize_context, Dialogue, EntityVocabulary, Tokenizer};
use crate::entity::EntityPredictor;
use crate::error::{Error, Result};
use crate::nn::optim::{fgm_attack, fgm_restore};
use crate::nn::{Graph, Optimizer, OptimizerConfig, ParamStore, Tensor};

/// Where the conditioning entity set of each response comes from.
#[derive(Debug, Clone, Copy)]
pub enum EntitySource<'a> {
    /// The response's own annotations.
    Gold,
    /// The entity predictor's output on the preceding turns.
    Predicted(&'a EntityPredictor),
}

/// Builds one example per doctor turn of `d`. The context is linearized
/// without entity blocks; entity information enters through the channel
/// embedding and the entity stream.
pub fn dialogue_examples(
    d: &Dialogue,
    vocab: &EntityVocabulary,
    tok: &Tokenizer,
    source: EntitySource<'_>,
    history_turns: usize,
) -> Result<Vec<GenExample>> {
    d.target_turns()
        .map(|t| {
            let ctx = linearize_context(d, t, history_turns, false, tok)?;
            let turn = &d.turns[t];
            let conditioning = match source {
                EntitySource::Gold => turn.entity_set(),
                EntitySource::Predicted(p) => p.predict(d, t)?,
            };
            let hot = |v: Vec<f64>| v.into_iter().map(|x| x > 0.5).collect();
            Ok(GenExample {
                input: FusionInput::new(&ctx, &conditioning, tok),
                target: tok.encode(&turn.text),
                entity_targets: hot(vocab.multi_hot(&turn.entities)?),
                domain_targets: hot(vocab.domain_multi_hot(&turn.entities)?),
            })
        })
        .collect()
}

/// One curriculum stage. Dialogues pass the stage filter when their entity
/// count exceeds `filter_min_entities`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: usize,
    pub folds: usize,
    #[serde(default)]
    pub filter_min_entities: Option<usize>,
}

impl StageConfig {
    /// Three stages of the full-scale schedule: all data, dialogues with
    /// entities, then dialogues with more than 11 entities.
    pub fn full_schedule(folds: usize) -> Vec<StageConfig> {
        vec![
            StageConfig {
                epochs: 4,
                folds,
                filter_min_entities: None,
            },
            StageConfig {
                epochs: 4,
                folds,
                filter_min_entities: Some(0),
            },
            StageConfig {
                epochs: 2,
                folds,
                filter_min_entities: Some(11),
            },
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenTrainConfig {
    pub history_turns: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub ema: bool,
    pub layer_lr: bool,
    pub fgm: bool,
    pub loss_weights: LossWeights,
    pub stages: Vec<StageConfig>,
}

impl Default for GenTrainConfig {
    fn default() -> Self {
        GenTrainConfig {
            history_turns: 1,
            batch_size: 8,
            optimizer: OptimizerConfig {
                ema_decay: 0.99,
                ..OptimizerConfig::default()
            },
            ema: true,
            layer_lr: true,
            fgm: false,
            loss_weights: LossWeights::default(),
            stages: vec![
                StageConfig {
                    epochs: 6,
                    folds: 1,
                    filter_min_entities: None,
                },
                StageConfig {
                    epochs: 2,
                    folds: 1,
                    filter_min_entities: Some(0),
                },
                StageConfig {
                    epochs: 2,
                    folds: 1,
                    filter_min_entities: Some(11),
                },
            ],
        }
    }
}

impl GenTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(
                "generator_train.batch_size",
                "must be at least 1",
            ));
        }
        self.optimizer.validate()?;
        self.loss_weights.validate()?;
        let Some(first) = self.stages.first() else {
            return Err(Error::config(
                "generator_train.stages",
                "need at least one stage",
            ));
        };
        for (i, s) in self.stages.iter().enumerate() {
            if s.folds == 0 {
                return Err(Error::config(
                    format!("generator_train.stages[{i}].folds"),
                    "must be at least 1",
                ));
            }
            // Fold k of every stage continues from fold k of the stage before.
            if s.folds != first.folds {
                return Err(Error::config(
                    format!("generator_train.stages[{i}].folds"),
                    "every stage must use the same number of folds",
                ));
            }
        }
        Ok(())
    }

    fn effective_optimizer(&self) -> OptimizerConfig {
        let mut cfg = self.optimizer.clone();
        if !self.layer_lr {
            cfg.layer_decay = 1.0;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenEpoch {
    pub epoch: usize,
    /// Mean per-example losses; epoch 0 evaluates the starting weights.
    pub train: LossParts,
    pub valid: Option<LossParts>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub fold: usize,
    pub train_dialogues: Vec<String>,
    pub valid_dialogues: Vec<String>,
    pub train_examples: usize,
    pub epochs: Vec<GenEpoch>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub stage: usize,
    pub config: StageConfig,
    pub dialogues: usize,
    pub folds: Vec<FoldReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenTrainReport {
    pub stages: Vec<StageReport>,
}

impl GenTrainReport {
    /// Training-loss curve of one fold across all stages, in order.
    pub fn fold_curve(&self, fold: usize) -> Vec<f64> {
        self.stages
            .iter()
            .filter_map(|s| s.folds.get(fold))
            .flat_map(|f| f.epochs.iter().map(|e| e.train.total))
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct GeneratorTraining {
    pub model: FusionModel,
    /// One checkpoint per fold.
    pub checkpoints: Vec<ParamStore>,
    pub report: GenTrainReport,
}

fn mean_losses(
    model: &FusionModel,
    store: &ParamStore,
    data: &[&GenExample],
    w: &LossWeights,
) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for ex in data {
        acc.add_scaled(&model.eval_losses(store, ex, w)?, 1.0 / data.len() as f64);
    }
    Ok(acc)
}

/// Adds the batch-mean gradient into `store` and returns the summed losses.
fn batch_pass(
    model: &FusionModel,
    store: &mut ParamStore,
    batch: &[&GenExample],
    w: &LossWeights,
) -> Result<LossParts> {
    let mut acc = LossParts::default();
    for ex in batch {
        let mut g = Graph::new();
        let nodes = model.losses(store, &mut g, ex, w)?;
        acc.add_scaled(&nodes.values(&g), 1.0);
        g.backward(nodes.total);
        g.accumulate_param_grads(store);
    }
    store.scale_grads(1.0 / batch.len() as f64);
    Ok(acc)
}

struct FoldRun<'a> {
    model: &'a FusionModel,
    cfg: &'a GenTrainConfig,
    stage: usize,
    fold: usize,
}

impl FoldRun<'_> {
    fn train(
        &self,
        mut store: ParamStore,
        train: &[&GenExample],
        valid: &[&GenExample],
        epochs: usize,
        order_rng: &mut ChaCha8Rng,
    ) -> Result<(ParamStore, Vec<GenEpoch>)> {
        let (model, cfg, w) = (self.model, self.cfg, &self.cfg.loss_weights);
        let mut opt = Optimizer::new(cfg.effective_optimizer(), &store)?;
        let evaluate = |params: &ParamStore| -> Result<Option<LossParts>> {
            if valid.is_empty() {
                Ok(None)
            } else {
                mean_losses(model, params, valid, w).map(Some)
            }
        };
        let mut records = vec![GenEpoch {
            epoch: 0,
            train: mean_losses(model, &store, train, w)?,
            valid: evaluate(&store)?,
        }];
        let mut order: Vec<usize> = (0..train.len()).collect();
        for epoch in 1..=epochs {
            order.shuffle(order_rng);
            let mut sum = LossParts::default();
            for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<&GenExample> = chunk.iter().map(|&i| train[i]).collect();
                let diverged = |loss: f64| Error::Diverged { epoch, step, loss };
                store.zero_grads();
                let parts = batch_pass(model, &mut store, &batch, w)?;
                if !parts.total.is_finite() {
                    return Err(diverged(parts.total));
                }
                if cfg.fgm {
                    let clean: Vec<Tensor> = store.iter().map(|(_, p)| p.grad.clone()).collect();
                    let original =
                        fgm_attack(&mut store, model.token_embedding, cfg.optimizer.fgm_epsilon)?;
                    store.zero_grads();
                    let adv = batch_pass(model, &mut store, &batch, w);
                    fgm_restore(&mut store, model.token_embedding, original);
                    let adv = adv?;
                    if !adv.total.is_finite() {
                        return Err(diverged(adv.total));
                    }
                    for (p, c) in store.iter_mut().zip(&clean) {
                        for (a, b) in p.grad.data_mut().iter_mut().zip(c.data()) {
                            *a = (*a + b) * 0.5;
                        }
                    }
                }
                opt.step(&mut store).map_err(|_| diverged(f64::NAN))?;
                sum.add_scaled(&parts, 1.0 / train.len() as f64);
            }
            let current = if cfg.ema {
                opt.shadow_params(&store)
            } else {
                store.clone()
            };
            let record = GenEpoch {
                epoch,
                train: sum,
                valid: evaluate(&current)?,
            };
            info!(
                "generator stage {} fold {} epoch {epoch}: loss {:.4}",
                self.stage, self.fold, record.train.total
            );
            records.push(record);
        }
        let out = if cfg.ema {
            opt.shadow_params(&store)
        } else {
            store
        };
        Ok((out, records))
    }
}

/// Trains the generator through the configured curriculum.
///
/// Each stage keeps the dialogues passing its entity-count filter and, with
/// `folds > 1`, splits them into contiguous folds: fold `k` trains on every
/// other fold, validates on fold `k`, and starts from fold `k`'s weights of
/// the previous stage. A single fold trains on the whole stage. With EMA on,
/// each stage hands its moving-average weights to the next.
pub fn train_generator(
    corpus: &[Dialogue],
    vocab: &EntityVocabulary,
    tok: &Tokenizer,
    source: EntitySource<'_>,
    model_cfg: &FusionConfig,
    cfg: &GenTrainConfig,
    seed: u64,
) -> Result<GeneratorTraining> {
    cfg.validate()?;
    if corpus.is_empty() {
        return Err(Error::Empty("generator training corpus".into()));
    }
    let examples: Vec<Vec<GenExample>> = corpus
        .iter()
        .map(|d| dialogue_examples(d, vocab, tok, source, cfg.history_turns))
        .collect::<Result<_>>()?;
    let folds = cfg.stages[0].folds;
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    let (model, fresh) = FusionModel::new(
        model_cfg.clone(),
        tok.vocab_size(),
        vocab.len(),
        vocab.domain_count(),
        &mut init,
    )?;
    let mut checkpoints = vec![fresh; folds];
    let mut stages = Vec::with_capacity(cfg.stages.len());

    for (s, stage) in cfg.stages.iter().enumerate() {
        let members: Vec<usize> = (0..corpus.len())
            .filter(|&i| {
                stage
                    .filter_min_entities
                    .is_none_or(|m| corpus[i].entity_count() > m)
            })
            .collect();
        if members.len() < stage.folds.max(1) {
            return Err(Error::Empty(format!(
                "stage {s} keeps {} dialogues for {} folds",
                members.len(),
                stage.folds
            )));
        }
        let n = members.len();
        let mut fold_reports = Vec::with_capacity(folds);
        for (k, ckpt) in checkpoints.iter_mut().enumerate() {
            let (lo, hi) = if folds == 1 {
                (n, n)
            } else {
                (k * n / folds, (k + 1) * n / folds)
            };
            let valid_ids = &members[lo..hi];
            let train_ids: Vec<usize> = members[..lo]
                .iter()
                .chain(&members[hi..])
                .copied()
                .collect();
            let collect = |ids: &[usize]| -> Vec<&GenExample> {
                ids.iter().flat_map(|&i| &examples[i]).collect()
            };
            let (train, valid) = (collect(&train_ids), collect(valid_ids));
            if train.is_empty() {
                return Err(Error::Empty(format!(
                    "stage {s} fold {k} has no training examples"
                )));
            }
            let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
            order_rng.set_stream(1 + (s * folds + k) as u64);
            let run = FoldRun {
                model: &model,
                cfg,
                stage: s,
                fold: k,
            };
            let (params, epochs) =
                run.train(ckpt.clone(), &train, &valid, stage.epochs, &mut order_rng)?;
            *ckpt = params;
            let ids = |v: &[usize]| v.iter().map(|&i| corpus[i].id.clone()).collect();
            fold_reports.push(FoldReport {
                fold: k,
                train_dialogues: ids(&train_ids),
                valid_dialogues: ids(valid_ids),
                train_examples: train.len(),
                epochs,
            });
        }
        stages.push(StageReport {
            stage: s,
            config: stage.clone(),
            dialogues: n,
            folds: fold_reports,
        });
    }
    Ok(GeneratorTraining {
        model,
        checkpoints,
        report: GenTrainReport { stages },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_tokenizer, filter_by_entity_count, generate_synthetic_corpus, SynthConfig,
    };
    use std::collections::BTreeSet;

    fn small() -> (Vec<Dialogue>, EntityVocabulary, Tokenizer) {
        let cfg = SynthConfig {
            dialogues: 20,
            entities: 10,
            ..SynthConfig::default()
        };
        let (corpus, vocab) = generate_synthetic_corpus(&cfg).unwrap();
        let tok = build_tokenizer(&corpus, &vocab).unwrap();
        (corpus, vocab, tok)
    }

    fn tiny_model() -> FusionConfig {
        FusionConfig {
            width: 8,
            encoder_blocks: 1,
            decoder_blocks: 1,
            ..FusionConfig::default()
        }
    }

    fn quick(stages: Vec<StageConfig>) -> GenTrainConfig {
        GenTrainConfig {
            stages,
            ..GenTrainConfig::default()
        }
    }

    #[test]
    fn five_folds_give_five_disjoint_checkpoints() {
        let (corpus, vocab, tok) = small();
        let cfg = quick(vec![StageConfig {
            epochs: 1,
            folds: 5,
            filter_min_entities: None,
        }]);
        let out = train_generator(
            &corpus,
            &vocab,
            &tok,
            EntitySource::Gold,
            &tiny_model(),
            &cfg,
            3,
        )
        .unwrap();
        assert_eq!(out.checkpoints.len(), 5);
        let folds = &out.report.stages[0].folds;
        let mut seen = BTreeSet::new();
        for f in folds {
            assert!(!f.valid_dialogues.is_empty());
            for id in &f.valid_dialogues {
                assert!(seen.insert(id.clone()), "{id} validated twice");
                assert!(!f.train_dialogues.contains(id));
            }
        }
        assert_eq!(seen.len(), corpus.len());
    }

    #[test]
    fn filtered_stage_trains_only_on_passing_dialogues() {
        let (corpus, vocab, tok) = small();
        let cfg = quick(vec![
            StageConfig {
                epochs: 1,
                folds: 1,
                filter_min_entities: None,
            },
            StageConfig {
                epochs: 1,
                folds: 1,
                filter_min_entities: Some(11),
            },
        ]);
        let out = train_generator(
            &corpus,
            &vocab,
            &tok,
            EntitySource::Gold,
            &tiny_model(),
            &cfg,
            3,
        )
        .unwrap();
        let passing: BTreeSet<String> = filter_by_entity_count(&corpus, 11)
            .into_iter()
            .map(|d| d.id)
            .collect();
        let used: BTreeSet<String> = out.report.stages[1].folds[0]
            .train_dialogues
            .iter()
            .cloned()
            .collect();
        assert!(!used.is_empty());
        assert_eq!(used, passing);
        assert_eq!(
            out.report.stages[0].folds[0].train_dialogues.len(),
            corpus.len()
        );
    }

    #[test]
    fn deterministic_under_seed() {
        let (corpus, vocab, tok) = small();
        let cfg = quick(vec![StageConfig {
            epochs: 1,
            folds: 1,
            filter_min_entities: None,
        }]);
        let run = || {
            train_generator(
                &corpus[..6],
                &vocab,
                &tok,
                EntitySource::Gold,
                &tiny_model(),
                &cfg,
                5,
            )
            .unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(
            a.checkpoints[0].flat_values(),
            b.checkpoints[0].flat_values()
        );
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn unequal_folds_are_rejected() {
        let (corpus, vocab, tok) = small();
        let cfg = quick(vec![
            StageConfig {
                epochs: 1,
                folds: 2,
                filter_min_entities: None,
            },
            StageConfig {
                epochs: 1,
                folds: 1,
                filter_min_entities: None,
            },
        ]);
        let err = train_generator(
            &corpus,
            &vocab,
            &tok,
            EntitySource::Gold,
            &tiny_model(),
            &cfg,
            1,
        )
        .unwrap_err();
        assert!(matches!(err, Error::Config { .. }));
    }

    #[test]
    fn gold_examples_condition_on_the_response_entities() {
        let (corpus, vocab, tok) = small();
        let d = &corpus[0];
        let ex = dialogue_examples(d, &vocab, &tok, EntitySource::Gold, 1).unwrap();
        let targets: Vec<usize> = d.target_turns().collect();
        assert_eq!(ex.len(), targets.len());
        for (e, &t) in ex.iter().zip(&targets) {
            let expect = super::super::model::entity_stream(&d.turns[t].entity_set(), &tok);
            assert_eq!(e.input.entity_stream, expect);
            assert_eq!(tok.decode(&e.target), d.turns[t].text);
        }
    }
}
