//! Training loop, evaluation and run artifacts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{save_checkpoint, Provenance};
use crate::config::RunConfig;
use crate::data::{epoch_batches, Batch, Corpus, Instance};
use crate::decode::{decode_all, DecodeResult};
use crate::error::{Error, Result};
use crate::metrics::{InstanceScores, Metric};
use crate::model::{IotModel, ObjectiveSettings, OrderOverride};
use crate::objective::LossBundle;
use crate::optim::{lr_at, Adam};
use crate::routing::RoutingError;
use crate::tensor::{Graph, TensorError};

/// How many dev instances each order code was selected for.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct OrderUsage {
    pub encoder: BTreeMap<u8, usize>,
    pub decoder: BTreeMap<u8, usize>,
}

impl OrderUsage {
    fn for_model<F>(model: &IotModel<F>) -> Self {
        Self {
            encoder: model.enc_orders.codes().iter().map(|&c| (c, 0)).collect(),
            decoder: model.dec_orders.codes().iter().map(|&c| (c, 0)).collect(),
        }
    }

    /// Largest share of instances sent to a single decoder order.
    pub fn max_decoder_share(&self) -> f64 {
        let total: usize = self.decoder.values().sum();
        let max = self.decoder.values().copied().max().unwrap_or(0);
        if total == 0 {
            0.0
        } else {
            max as f64 / total as f64
        }
    }

    /// Smallest share of instances sent to any decoder order.
    pub fn min_decoder_share(&self) -> f64 {
        let total: usize = self.decoder.values().sum();
        let min = self.decoder.values().copied().min().unwrap_or(0);
        if total == 0 {
            0.0
        } else {
            min as f64 / total as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: u64,
    pub step: u64,
    pub lr: f64,
    /// Number of learning-rate halvings after non-finite steps so far.
    pub lr_halvings: u32,
    pub train_loss: f64,
    pub train_task_loss: f64,
    pub dev_loss: f64,
    pub dev_exact_match: f64,
    pub dev_token_acc: f64,
    pub dev_bleu: f64,
    pub order_usage: OrderUsage,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub loss: LossBundle,
}

/// Corpus-level evaluation of one model on a split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub count: usize,
    pub exact_match: f64,
    pub token_acc: f64,
    pub bleu: f64,
    /// Mean per-instance cross-entropy under the selected orders.
    pub loss: f64,
    pub order_usage: OrderUsage,
    pub truncated: usize,
}

impl EvalSummary {
    pub fn score(&self, metric: Metric) -> f64 {
        match metric {
            Metric::ExactMatch => self.exact_match,
            Metric::TokenAccuracy => self.token_acc,
            Metric::Bleu => self.bleu,
        }
    }
}

/// Per-instance outputs behind an [`EvalSummary`].
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub summary: EvalSummary,
    pub results: Vec<DecodeResult>,
    pub scores: Vec<InstanceScores>,
}

const EVAL_BATCH: usize = 64;

fn is_numeric_failure(e: &Error) -> bool {
    matches!(
        e,
        Error::NonFiniteGradient { .. }
            | Error::Tensor(TensorError::NonFinite { .. })
            | Error::Routing(RoutingError::Tensor(TensorError::NonFinite { .. }))
            | Error::Routing(RoutingError::ZeroProbability(_))
    )
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    rng.set_stream(1);
    rng
}

/// One optimizer update on `batch`. Parameters are untouched on error.
pub fn train_step(
    model: &mut IotModel<f32>,
    adam: &mut Adam,
    batch: &Batch,
    settings: &ObjectiveSettings,
    lr: f64,
    seed: u64,
    step: u64,
) -> Result<LossBundle> {
    let mut g = Graph::new().with_dropout(seed, step);
    let mut rng = step_rng(seed, step);
    let out = model.training_loss(&mut g, batch, settings, &mut rng)?;
    g.backward(out.total)?;
    model.store.zero_grads();
    g.write_param_grads(&mut model.store);
    adam.step(&mut model.store, lr)?;
    Ok(out.bundle)
}

/// Mean teacher-forced cross-entropy (no smoothing) per instance under
/// the orders the model selects at inference.
pub fn routed_losses(model: &IotModel<f32>, instances: &[&Instance]) -> Result<Vec<f64>> {
    let mut losses = vec![0.0; instances.len()];
    let ctx = model.ctx();
    for (ci, chunk) in instances.chunks(EVAL_BATCH).enumerate() {
        let batch = Batch::new(chunk)?;
        let routing = model.route(&batch.src, OrderOverride::default())?;
        for m in 0..model.enc_orders.len() {
            for n in 0..model.dec_orders.len() {
                let rows: Vec<usize> = (0..chunk.len())
                    .filter(|&i| routing.enc[i] == m && routing.dec[i] == n)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let members: Vec<&Instance> = rows.iter().map(|&i| chunk[i]).collect();
                let sub = Batch::new(&members)?;
                let mut g = Graph::new().without_param_grads();
                let (_, states) = ctx.encode(&mut g, &model.params, &sub.src, model.enc_orders.order(m))?;
                let logits =
                    ctx.decode_forward(&mut g, &model.params, &sub.tgt_in, &states, model.dec_orders.order(n))?;
                let per = g.cross_entropy_ls_grouped(logits, &sub.tgt_out, 0.0, sub.tgt_in.pad_id, rows.len())?;
                for (&r, v) in rows.iter().zip(g.value(per).data()) {
                    losses[ci * EVAL_BATCH + r] = *v as f64;
                }
            }
        }
    }
    Ok(losses)
}

/// Decodes and scores `instances`, optionally with forced orders or an
/// ensemble (`models.len() > 1`).
pub fn evaluate(models: &[&IotModel<f32>], instances: &[&Instance], max_len: usize, over: OrderOverride) -> Result<Evaluation> {
    if instances.is_empty() {
        return Err(Error::EmptyBatch("evaluate"));
    }
    let srcs: Vec<&[usize]> = instances.iter().map(|i| i.src.as_slice()).collect();
    let results = decode_all(models, &srcs, max_len, over, EVAL_BATCH)?;
    let scores: Vec<InstanceScores> = results
        .iter()
        .zip(instances)
        .map(|(r, inst)| InstanceScores::new(&r.tokens, &inst.tgt))
        .collect();
    let n = instances.len() as f64;
    let mean = |f: fn(&InstanceScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
    let mut usage = OrderUsage::for_model(models[0]);
    for r in &results {
        *usage.encoder.entry(r.routes[0].enc_code).or_default() += 1;
        *usage.decoder.entry(r.routes[0].dec_code).or_default() += 1;
    }
    let loss = if models.len() == 1 && over == OrderOverride::default() {
        routed_losses(models[0], instances)?.iter().sum::<f64>() / n
    } else {
        f64::NAN
    };
    Ok(Evaluation {
        summary: EvalSummary {
            count: instances.len(),
            exact_match: mean(|s| s.exact_match),
            token_acc: mean(|s| s.token_acc),
            bleu: mean(|s| s.bleu),
            loss,
            order_usage: usage,
            truncated: results.iter().filter(|r| r.truncated).count(),
        },
        results,
        scores,
    })
}

#[derive(Debug, Clone)]
pub struct FitOutcome {
    /// Model with the best dev exact match (ties: lower dev loss, then
    /// earlier epoch).
    pub best: IotModel<f32>,
    pub best_epoch: u64,
    pub best_step: u64,
    pub last: IotModel<f32>,
    pub epochs: Vec<EpochRecord>,
    pub steps: Vec<StepRecord>,
    pub stopped_early: bool,
}

const MAX_HALVINGS: u32 = 10;

/// Trains per `cfg` on `corpus`, evaluating on the dev split after each
/// epoch and once more when the step budget runs out mid-epoch.
pub fn fit(cfg: &RunConfig, corpus: &Corpus, on_epoch: &mut dyn FnMut(&EpochRecord)) -> Result<FitOutcome> {
    cfg.validate()?;
    if corpus.train.is_empty() || corpus.dev.is_empty() {
        return Err(Error::EmptyBatch("training and dev splits must be non-empty"));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = IotModel::<f32>::new(cfg.model_spec(), &mut init_rng)?;
    let mut adam = Adam::new(cfg.optim.adam, &model.store);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    shuffle_rng.set_stream(2);

    let dev_limit = if cfg.train.eval_limit == 0 {
        corpus.dev.len()
    } else {
        cfg.train.eval_limit.min(corpus.dev.len())
    };
    let dev: Vec<&Instance> = corpus.dev[..dev_limit].iter().collect();
    let max_len = cfg.decode_max_len();

    let mut step = 0u64;
    let mut lr_scale = 1.0;
    let mut halvings = 0u32;
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut best: Option<(f64, f64, IotModel<f32>, u64, u64)> = None;
    let mut since_best = 0u64;
    let mut stopped_early = false;

    for epoch in 1..=cfg.train.max_epochs.max(1) {
        let (mut sum_total, mut sum_task, mut count) = (0.0, 0.0, 0usize);
        for idx in epoch_batches(corpus.train.len(), cfg.train.batch_size, &mut shuffle_rng) {
            if step >= cfg.train.max_steps {
                break;
            }
            step += 1;
            let members: Vec<&Instance> = idx.iter().map(|&i| &corpus.train[i]).collect();
            let batch = Batch::new(&members)?;
            let settings = cfg.objective_at(step);
            let bundle = loop {
                let lr = lr_at(step, cfg.optim.lr_base * lr_scale, cfg.optim.warmup_steps);
                match train_step(&mut model, &mut adam, &batch, &settings, lr, cfg.seed, step) {
                    Ok(b) => break b,
                    Err(e) if is_numeric_failure(&e) && halvings < MAX_HALVINGS => {
                        halvings += 1;
                        lr_scale *= 0.5;
                    }
                    Err(e) if is_numeric_failure(&e) => {
                        return Err(Error::Diverged(format!("step {step} after {halvings} halvings: {e}")));
                    }
                    Err(e) => return Err(e),
                }
            };
            sum_total += bundle.total;
            sum_task += bundle.l_c;
            count += 1;
            steps.push(StepRecord {
                step,
                lr: lr_at(step, cfg.optim.lr_base * lr_scale, cfg.optim.warmup_steps),
                loss: bundle,
            });
        }
        if count == 0 {
            break;
        }

        let eval = evaluate(&[&model], &dev, max_len, OrderOverride::default())?;
        let record = EpochRecord {
            epoch,
            step,
            lr: lr_at(step, cfg.optim.lr_base * lr_scale, cfg.optim.warmup_steps),
            lr_halvings: halvings,
            train_loss: sum_total / count as f64,
            train_task_loss: sum_task / count as f64,
            dev_loss: eval.summary.loss,
            dev_exact_match: eval.summary.exact_match,
            dev_token_acc: eval.summary.token_acc,
            dev_bleu: eval.summary.bleu,
            order_usage: eval.summary.order_usage.clone(),
        };
        on_epoch(&record);
        epochs.push(record);

        let better = match &best {
            None => true,
            Some((em, loss, ..)) => {
                eval.summary.exact_match > *em || (eval.summary.exact_match == *em && eval.summary.loss < *loss)
            }
        };
        if better {
            best = Some((eval.summary.exact_match, eval.summary.loss, model.clone(), epoch, step));
            since_best = 0;
        } else {
            since_best += 1;
        }
        if cfg.train.patience > 0 && since_best >= cfg.train.patience {
            stopped_early = true;
            break;
        }
        if step >= cfg.train.max_steps {
            break;
        }
    }
    let (_, _, best_model, best_epoch, best_step) = best.ok_or(Error::EmptyBatch("no training steps were run"))?;
    Ok(FitOutcome {
        best: best_model,
        best_epoch,
        best_step,
        last: model,
        epochs,
        steps,
        stopped_early,
    })
}

pub fn to_jsonl<T: Serialize>(records: &[T]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Writes `best.ckpt`, `last.ckpt`, `train_log.jsonl`, `step_log.jsonl`
/// and `config.json` into `dir`.
pub fn save_run(dir: &Path, cfg: &RunConfig, outcome: &FitOutcome) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(format!("writing {}", path.display()), e))
    };
    write("config.json", cfg.to_json_pretty() + "\n")?;
    write("train_log.jsonl", to_jsonl(&outcome.epochs)?)?;
    write("step_log.jsonl", to_jsonl(&outcome.steps)?)?;
    let run = serde_json::to_value(cfg)?;
    let history = serde_json::to_value(&outcome.epochs)?;
    save_checkpoint(
        &dir.join("best.ckpt"),
        &outcome.best,
        &Provenance {
            run: run.clone(),
            seed: cfg.seed,
            step: outcome.best_step,
            history: history.clone(),
        },
    )?;
    save_checkpoint(
        &dir.join("last.ckpt"),
        &outcome.last,
        &Provenance {
            run,
            seed: cfg.seed,
            step: outcome.steps.last().map_or(0, |s| s.step),
            history,
        },
    )
}
