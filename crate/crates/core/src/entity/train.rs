use std::collections::BTreeSet;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{EntityModel, EntityModelConfig, EntityScorer};
use super::threshold::{
    class_f1_at, inverse_frequency_weights, multilabel_f1, search_thresholds, Average, GridSpec,
    Prf, ThresholdVector,
};
use crate::corpus::{linearize_context, Dialogue, EntityVocabulary, Tokenizer};
use crate::error::{Error, Result};
use crate::nn::optim::{fgm_attack, fgm_restore};
use crate::nn::{sigmoid, Graph, Mode, Optimizer, OptimizerConfig, ParamStore, Tensor};

/// One prediction problem: the linearized history before a doctor turn and
/// the entities that turn mentions.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityExample {
    pub tokens: Vec<usize>,
    pub labels: Vec<bool>,
}

impl EntityExample {
    pub fn gold(&self) -> BTreeSet<usize> {
        self.labels
            .iter()
            .enumerate()
            .filter(|(_, &l)| l)
            .map(|(k, _)| k)
            .collect()
    }
}

/// One example per doctor turn of every dialogue, with the entity blocks of
/// the history serialized into the input.
pub fn entity_examples(
    corpus: &[Dialogue],
    vocab: &EntityVocabulary,
    tok: &Tokenizer,
    history_turns: usize,
) -> Result<Vec<EntityExample>> {
    let mut out = Vec::new();
    for d in corpus {
        for target in d.target_turns() {
            let input = linearize_context(d, target, history_turns, true, tok)?;
            let hot = vocab.multi_hot(&d.turns[target].entities)?;
            out.push(EntityExample {
                tokens: input.tokens,
                labels: hot.iter().map(|&v| v > 0.5).collect(),
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EntityTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub fgm: bool,
    pub ema: bool,
    /// When off, every layer trains at `base_lr`.
    pub layer_lr: bool,
    pub grid: GridSpec,
}

impl Default for EntityTrainConfig {
    fn default() -> Self {
        EntityTrainConfig {
            epochs: 8,
            batch_size: 8,
            optimizer: OptimizerConfig {
                ema_decay: 0.99,
                ..OptimizerConfig::default()
            },
            fgm: true,
            ema: true,
            layer_lr: true,
            grid: GridSpec::default(),
        }
    }
}

impl EntityTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config(
                "entity_train.batch_size",
                "must be at least 1",
            ));
        }
        self.optimizer.validate()?;
        self.grid.points().map(|_| ())
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
pub struct EntityEpoch {
    pub epoch: usize,
    /// Mean per-example loss; epoch 0 is the untrained model in eval mode.
    pub train_loss: f64,
    /// Validation micro scores at the uniform threshold 0.5.
    pub valid: Prf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityTrainReport {
    pub epochs: Vec<EntityEpoch>,
    pub searched: Prf,
    pub uniform: Prf,
    pub class_f1_searched: Vec<f64>,
    pub class_f1_uniform: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct EntityTraining {
    pub scorer: EntityScorer,
    pub thresholds: ThresholdVector,
    pub report: EntityTrainReport,
}

fn targets(ex: &EntityExample) -> Vec<f64> {
    ex.labels.iter().map(|&l| l as u8 as f64).collect()
}

/// Forward and backward over one batch; gradients are added into `store`.
/// Returns the batch-mean loss.
fn batch_pass(
    model: &EntityModel,
    store: &mut ParamStore,
    batch: &[&EntityExample],
    weights: &[f64],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let norm = (model.classes * batch.len()) as f64;
    let mut total = 0.0;
    for ex in batch {
        let mut g = Graph::new();
        let logits = model.logits(store, &mut g, &ex.tokens, Mode::Train, rng)?;
        let loss = g.bce_with_logits(logits, &targets(ex), weights, norm)?;
        total += g.value(loss).item();
        g.backward(loss);
        g.accumulate_param_grads(store);
    }
    Ok(total)
}

fn eval_loss(
    model: &EntityModel,
    store: &ParamStore,
    data: &[EntityExample],
    weights: &[f64],
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut total = 0.0;
    for ex in data {
        let mut g = Graph::new();
        let logits = model.logits(store, &mut g, &ex.tokens, Mode::Eval, &mut rng)?;
        let loss = g.bce_with_logits(logits, &targets(ex), weights, model.classes as f64)?;
        total += g.value(loss).item();
    }
    Ok(total / data.len() as f64)
}

pub fn score_matrix(scorer: &EntityScorer, data: &[EntityExample]) -> Result<Vec<Vec<f64>>> {
    data.iter()
        .map(|ex| {
            Ok(scorer
                .logits(&ex.tokens)?
                .into_iter()
                .map(sigmoid)
                .collect())
        })
        .collect()
}

fn micro_at(scores: &[Vec<f64>], data: &[EntityExample], th: &ThresholdVector) -> Result<Prf> {
    let pred: Vec<BTreeSet<usize>> = scores
        .iter()
        .map(|s| super::threshold::apply_thresholds(s, th))
        .collect::<Result<_>>()?;
    let gold: Vec<BTreeSet<usize>> = data.iter().map(EntityExample::gold).collect();
    multilabel_f1(&pred, &gold, Average::Micro)
}

/// Validation scores of tuned thresholds next to the uniform 0.5 baseline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdReport {
    pub searched: Prf,
    pub uniform: Prf,
    pub class_f1_searched: Vec<f64>,
    pub class_f1_uniform: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct ThresholdTuning {
    pub thresholds: ThresholdVector,
    pub report: ThresholdReport,
}

/// Searches per-class thresholds for a trained scorer on `valid`. The
/// class `weights` are stored alongside the thresholds.
pub fn tune_thresholds(
    scorer: &EntityScorer,
    valid: &[EntityExample],
    grid: &GridSpec,
    weights: Vec<f64>,
) -> Result<ThresholdTuning> {
    if valid.is_empty() {
        return Err(Error::Empty("threshold validation split".into()));
    }
    let classes = scorer.model.classes;
    let scores = score_matrix(scorer, valid)?;
    let labels: Vec<Vec<bool>> = valid.iter().map(|e| e.labels.clone()).collect();
    let found = search_thresholds(&scores, &labels, grid)?;
    let thresholds = ThresholdVector {
        thresholds: found.thresholds,
        weights,
    };
    let uniform = ThresholdVector::uniform(classes, 0.5);
    let report = ThresholdReport {
        searched: micro_at(&scores, valid, &thresholds)?,
        uniform: micro_at(&scores, valid, &uniform)?,
        class_f1_searched: found.f1,
        class_f1_uniform: (0..classes)
            .map(|k| class_f1_at(&scores, &labels, k, 0.5))
            .collect(),
    };
    Ok(ThresholdTuning { thresholds, report })
}

/// Trains the scorer with class-weighted BCE, then tunes per-class
/// thresholds on `valid`. With FGM on, each step averages the clean
/// gradient and the gradient at the perturbed token embedding, replaying
/// the same dropout masks. With EMA on, the returned weights are the moving
/// average.
pub fn train_entity_predictor(
    train: &[EntityExample],
    valid: &[EntityExample],
    model_cfg: &EntityModelConfig,
    cfg: &EntityTrainConfig,
    vocab_size: usize,
    seed: u64,
) -> Result<EntityTraining> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Empty("entity training or validation split".into()));
    }
    let classes = train[0].labels.len();
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    let (model, mut store) = EntityModel::new(model_cfg.clone(), vocab_size, classes, &mut init)?;
    let mut opt = Optimizer::new(cfg.effective_optimizer(), &store)?;
    let labels: Vec<Vec<bool>> = train.iter().map(|e| e.labels.clone()).collect();
    let weights = inverse_frequency_weights(&labels, classes);

    let mut order_rng = ChaCha8Rng::seed_from_u64(seed);
    order_rng.set_stream(1);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(seed);
    dropout_rng.set_stream(2);

    let current = |store: &ParamStore, opt: &Optimizer| -> ParamStore {
        if cfg.ema {
            opt.shadow_params(store)
        } else {
            store.clone()
        }
    };
    let uniform = ThresholdVector::uniform(classes, 0.5);
    let mut epochs = Vec::with_capacity(cfg.epochs + 1);
    let validate = |params: ParamStore| -> Result<Prf> {
        let scorer = EntityScorer {
            model: model.clone(),
            params,
        };
        micro_at(&score_matrix(&scorer, valid)?, valid, &uniform)
    };
    epochs.push(EntityEpoch {
        epoch: 0,
        train_loss: eval_loss(&model, &store, train, &weights)?,
        valid: validate(store.clone())?,
    });

    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut sum = 0.0;
        for (step, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&EntityExample> = chunk.iter().map(|&i| &train[i]).collect();
            let diverged = |loss: f64| Error::Diverged { epoch, step, loss };
            store.zero_grads();
            let masks = dropout_rng.clone();
            let loss = batch_pass(&model, &mut store, &batch, &weights, &mut dropout_rng)?;
            if !loss.is_finite() {
                return Err(diverged(loss));
            }
            if cfg.fgm {
                let clean: Vec<Tensor> = store.iter().map(|(_, p)| p.grad.clone()).collect();
                let eps = cfg.optimizer.fgm_epsilon;
                let original = fgm_attack(&mut store, model.token_embedding, eps)?;
                store.zero_grads();
                let adv = batch_pass(&model, &mut store, &batch, &weights, &mut masks.clone());
                fgm_restore(&mut store, model.token_embedding, original);
                let adv = adv?;
                if !adv.is_finite() {
                    return Err(diverged(adv));
                }
                for (p, c) in store.iter_mut().zip(&clean) {
                    for (a, b) in p.grad.data_mut().iter_mut().zip(c.data()) {
                        *a = (*a + b) * 0.5;
                    }
                }
            }
            opt.step(&mut store).map_err(|_| diverged(f64::NAN))?;
            sum += loss * batch.len() as f64;
        }
        let record = EntityEpoch {
            epoch,
            train_loss: sum / train.len() as f64,
            valid: validate(current(&store, &opt))?,
        };
        info!(
            "entity epoch {epoch}: loss {:.4}, valid F1 {:.4}",
            record.train_loss, record.valid.f1
        );
        epochs.push(record);
    }

    let scorer = EntityScorer {
        model,
        params: current(&store, &opt),
    };
    let tuned = tune_thresholds(&scorer, valid, &cfg.grid, weights)?;
    let report = EntityTrainReport {
        searched: tuned.report.searched,
        uniform: tuned.report.uniform,
        class_f1_searched: tuned.report.class_f1_searched,
        class_f1_uniform: tuned.report.class_f1_uniform,
        epochs,
    };
    let thresholds = tuned.thresholds;
    Ok(EntityTraining {
        scorer,
        thresholds,
        report,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{
        build_tokenizer, generate_synthetic_corpus, split_corpus, SynthConfig, PAD,
    };

    fn small_setup() -> (Vec<EntityExample>, Vec<EntityExample>, usize) {
        let cfg = SynthConfig {
            dialogues: 60,
            entities: 10,
            max_pairs: 1,
            ..SynthConfig::default()
        };
        let (corpus, vocab) = generate_synthetic_corpus(&cfg).unwrap();
        let tok = build_tokenizer(&corpus, &vocab).unwrap();
        let (train, valid) = split_corpus(&corpus, 0.25, 1);
        (
            entity_examples(&train, &vocab, &tok, 1).unwrap(),
            entity_examples(&valid, &vocab, &tok, 1).unwrap(),
            tok.vocab_size(),
        )
    }

    fn small_model() -> EntityModelConfig {
        EntityModelConfig {
            width: 16,
            max_len: 64,
            ..EntityModelConfig::default()
        }
    }

    fn quick(epochs: usize) -> EntityTrainConfig {
        EntityTrainConfig {
            epochs,
            ..EntityTrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let (train, valid, v) = small_setup();
        let a = train_entity_predictor(&train, &valid, &small_model(), &quick(1), v, 5).unwrap();
        let b = train_entity_predictor(&train, &valid, &small_model(), &quick(1), v, 5).unwrap();
        assert_eq!(a.scorer.params.flat_values(), b.scorer.params.flat_values());
        assert_eq!(a.thresholds, b.thresholds);
    }

    #[test]
    fn zero_epsilon_fgm_matches_disabled() {
        let (train, valid, v) = small_setup();
        let mut with = quick(1);
        with.optimizer.fgm_epsilon = 0.0;
        let without = EntityTrainConfig {
            fgm: false,
            ..with.clone()
        };
        let a = train_entity_predictor(&train, &valid, &small_model(), &with, v, 3).unwrap();
        let b = train_entity_predictor(&train, &valid, &small_model(), &without, v, 3).unwrap();
        assert_eq!(a.scorer.params.flat_values(), b.scorer.params.flat_values());
        assert_eq!(a.report, b.report);
    }

    #[test]
    fn searched_thresholds_dominate_per_class() {
        let (train, valid, v) = small_setup();
        let out = train_entity_predictor(&train, &valid, &small_model(), &quick(2), v, 9).unwrap();
        let r = &out.report;
        assert_eq!(r.epochs.len(), 3);
        for (s, u) in r.class_f1_searched.iter().zip(&r.class_f1_uniform) {
            assert!(s >= u);
        }
        out.thresholds.validate(&GridSpec::default()).unwrap();
        let scores = score_matrix(&out.scorer, &valid).unwrap();
        let labels: Vec<Vec<bool>> = valid.iter().map(|e| e.labels.clone()).collect();
        for (k, &t) in out.thresholds.thresholds.iter().enumerate() {
            let best = class_f1_at(&scores, &labels, k, t);
            for g in GridSpec::default().points().unwrap() {
                assert!(class_f1_at(&scores, &labels, k, g) <= best);
            }
        }
    }

    #[test]
    fn trained_model_reads_its_input() {
        let (train, valid, v) = small_setup();
        let out = train_entity_predictor(&train, &valid, &small_model(), &quick(2), v, 4).unwrap();
        let ex = &valid[0];
        let real = out.scorer.logits(&ex.tokens).unwrap();
        let pad = out.scorer.logits(&vec![PAD; ex.tokens.len()]).unwrap();
        assert_ne!(real, pad);
    }

    #[test]
    fn empty_splits_rejected() {
        let (train, _, v) = small_setup();
        assert!(train_entity_predictor(&train, &[], &small_model(), &quick(1), v, 0).is_err());
    }
}
