//! Greedy and ensemble decoding with per-instance order selection.

use serde::{Deserialize, Serialize};

use crate::data::{BOS, EOS, PAD};
use crate::error::{Error, Result};
use crate::model::{IotModel, OrderOverride};
use crate::tensor::{Element, Graph, Tensor};
use crate::transformer::{EncoderStates, TokenBatch};

/// Orders one model used for one instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RouteInfo {
    pub enc_code: u8,
    pub dec_code: u8,
    pub enc_probs: Option<Vec<f64>>,
    pub dec_probs: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    /// Hypothesis without `BOS` / `EOS`.
    pub tokens: Vec<usize>,
    /// True when `max_len` was reached without emitting `EOS`.
    pub truncated: bool,
    /// One entry per model (a single entry for plain decoding).
    pub routes: Vec<RouteInfo>,
}

struct Group<F> {
    rows: Vec<usize>,
    dec: usize,
    h: Tensor<F>,
    keep: Vec<bool>,
    src_len: usize,
}

/// A model with routing decided and encoder states cached for a batch.
struct Prepared<'a, F> {
    model: &'a IotModel<F>,
    groups: Vec<Group<F>>,
    routes: Vec<RouteInfo>,
}

impl<'a, F: Element> Prepared<'a, F> {
    fn new(model: &'a IotModel<F>, src: &TokenBatch, over: OrderOverride) -> Result<Self> {
        let routing = model.route(src, over)?;
        let mut routes = Vec::with_capacity(src.batch);
        for i in 0..src.batch {
            routes.push(RouteInfo {
                enc_code: model.enc_orders.code(routing.enc[i]),
                dec_code: model.dec_orders.code(routing.dec[i]),
                enc_probs: routing.enc_probs.as_ref().map(|p| p[i].clone()),
                dec_probs: routing.dec_probs.as_ref().map(|p| p[i].clone()),
            });
        }
        let ctx = model.ctx();
        let mut groups = Vec::new();
        for m in 0..model.enc_orders.len() {
            for n in 0..model.dec_orders.len() {
                let rows: Vec<usize> = (0..src.batch)
                    .filter(|&i| routing.enc[i] == m && routing.dec[i] == n)
                    .collect();
                if rows.is_empty() {
                    continue;
                }
                let sub = src.select(&rows)?;
                let mut g = Graph::new().without_param_grads();
                let (_, states) = ctx.encode(&mut g, &model.params, &sub, model.enc_orders.order(m))?;
                groups.push(Group {
                    rows,
                    dec: n,
                    h: g.value(states.h).clone(),
                    keep: states.keep,
                    src_len: sub.len,
                });
            }
        }
        Ok(Self { model, groups, routes })
    }

    /// Next-token distributions for every instance given equal-length
    /// prefixes, written to `out[row]`.
    fn next_probs(&self, prefixes: &[Vec<usize>], out: &mut [Vec<f64>]) -> Result<()> {
        let ctx = self.model.ctx();
        for group in &self.groups {
            let t = prefixes[group.rows[0]].len();
            let ids: Vec<usize> = group.rows.iter().flat_map(|&r| prefixes[r].iter().copied()).collect();
            let tgt = TokenBatch::new(ids, group.rows.len(), t, PAD)?;
            let mut g = Graph::new().without_param_grads();
            let h = g.constant(group.h.clone())?;
            let memory = EncoderStates {
                h,
                keep: group.keep.clone(),
                batch: group.rows.len(),
                len: group.src_len,
            };
            let order = self.model.dec_orders.order(group.dec);
            let logits = ctx.decode_forward(&mut g, &self.model.params, &tgt, &memory, order)?;
            let v = g.shape(logits)[2];
            let data = g.value(logits).data();
            for (gi, &row) in group.rows.iter().enumerate() {
                let last = &data[(gi * t + t - 1) * v..(gi * t + t) * v];
                out[row] = softmax(last);
            }
        }
        Ok(())
    }
}

fn softmax<F: Element>(logits: &[F]) -> Vec<f64> {
    let max = logits.iter().map(|x| x.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|x| (x.as_f64() - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn argmax_token(p: &[f64]) -> usize {
    crate::routing::argmax(p)
}

fn decode_prepared<F: Element>(models: &[Prepared<'_, F>], batch: usize, max_len: usize) -> Result<Vec<DecodeResult>> {
    let vocab = models[0].model.config().tgt_vocab;
    let mut prefixes = vec![vec![BOS]; batch];
    let mut done = vec![false; batch];
    let mut hyps = vec![Vec::new(); batch];
    let mut probs = vec![Vec::new(); batch];
    for _ in 0..max_len {
        if done.iter().all(|&d| d) {
            break;
        }
        let mut avg = vec![vec![0.0; vocab]; batch];
        for p in models {
            p.next_probs(&prefixes, &mut probs)?;
            for (a, row) in avg.iter_mut().zip(&probs) {
                for (x, y) in a.iter_mut().zip(row) {
                    *x += y;
                }
            }
        }
        if models.len() > 1 {
            let inv = 1.0 / models.len() as f64;
            for a in &mut avg {
                a.iter_mut().for_each(|x| *x *= inv);
            }
        }
        for i in 0..batch {
            let tok = argmax_token(&avg[i]);
            prefixes[i].push(tok);
            if !done[i] {
                if tok == EOS {
                    done[i] = true;
                } else {
                    hyps[i].push(tok);
                }
            }
        }
    }
    Ok((0..batch)
        .map(|i| DecodeResult {
            tokens: std::mem::take(&mut hyps[i]),
            truncated: !done[i],
            routes: models.iter().map(|p| p.routes[i].clone()).collect(),
        })
        .collect())
}

fn source_batch(srcs: &[&[usize]]) -> Result<TokenBatch> {
    if srcs.is_empty() {
        return Err(Error::EmptyBatch("decode"));
    }
    if srcs.iter().any(|s| s.is_empty()) {
        return Err(Error::Dimension("empty source sequence".into()));
    }
    TokenBatch::from_rows(srcs, PAD)
}

/// Greedy decoding of a batch of sources. Orders come from the model's
/// predictors unless `over` pins them.
pub fn greedy_decode<F: Element>(
    model: &IotModel<F>,
    srcs: &[&[usize]],
    max_len: usize,
    over: OrderOverride,
) -> Result<Vec<DecodeResult>> {
    let src = source_batch(srcs)?;
    let prepared = Prepared::new(model, &src, over)?;
    decode_prepared(&[prepared], srcs.len(), max_len)
}

/// Averages the next-token distributions of several models (each with its
/// own order selection) and decodes greedily.
pub fn ensemble_decode<F: Element>(models: &[&IotModel<F>], srcs: &[&[usize]], max_len: usize) -> Result<Vec<DecodeResult>> {
    let first = models.first().ok_or(Error::EmptyBatch("ensemble"))?;
    for m in models {
        let (a, b) = (m.config(), first.config());
        if a.src_vocab != b.src_vocab || a.tgt_vocab != b.tgt_vocab {
            return Err(Error::Config(format!(
                "vocabulary mismatch in ensemble: {}/{} vs {}/{}",
                a.src_vocab, a.tgt_vocab, b.src_vocab, b.tgt_vocab
            )));
        }
    }
    let src = source_batch(srcs)?;
    let prepared = models
        .iter()
        .map(|m| Prepared::new(m, &src, OrderOverride::default()))
        .collect::<Result<Vec<_>>>()?;
    decode_prepared(&prepared, srcs.len(), max_len)
}

/// Decodes many sources in chunks of `batch_size`.
pub fn decode_all<F: Element>(
    models: &[&IotModel<F>],
    srcs: &[&[usize]],
    max_len: usize,
    over: OrderOverride,
    batch_size: usize,
) -> Result<Vec<DecodeResult>> {
    let mut out = Vec::with_capacity(srcs.len());
    for chunk in srcs.chunks(batch_size.max(1)) {
        if models.len() == 1 {
            out.extend(greedy_decode(models[0], chunk, max_len, over)?);
        } else {
            if over != OrderOverride::default() {
                return Err(Error::Config("order overrides are not supported for ensembles".into()));
            }
            out.extend(ensemble_decode(models, chunk, max_len)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{ModelSpec, RoutingConfig, TrainMode};
    use crate::transformer::ModelConfig;

    fn model(seed: u64, dec: &[u8]) -> IotModel<f64> {
        let spec = ModelSpec {
            model: ModelConfig {
                src_vocab: 10,
                tgt_vocab: 10,
                d_model: 8,
                d_ff: 16,
                heads: 2,
                layers: 1,
                max_len: 12,
                ..ModelConfig::default()
            },
            routing: RoutingConfig {
                mode: TrainMode::Iot,
                decoder_orders: Some(dec.to_vec()),
                ..RoutingConfig::default()
            },
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut m = IotModel::new(spec, &mut rng).unwrap();
        if let Some(id) = m.dec_predictor {
            for (i, v) in m.store.value_mut(id).data_mut().iter_mut().enumerate() {
                *v = ((i * 7 + 3) % 5) as f64 - 2.0;
            }
        }
        m
    }

    fn sources() -> Vec<Vec<usize>> {
        vec![vec![4, 5, 6], vec![7, 8], vec![9, 4, 4, 5], vec![6]]
    }

    #[test]
    fn override_with_selected_order_matches_plain_decode() {
        let m = model(1, &[1, 4, 6]);
        let srcs = sources();
        let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
        let plain = greedy_decode(&m, &refs, 6, OrderOverride::default()).unwrap();
        for (i, r) in plain.iter().enumerate() {
            let over = m.override_from_codes(None, Some(r.routes[0].dec_code)).unwrap();
            let forced = greedy_decode(&m, &refs[i..i + 1], 6, over).unwrap();
            assert_eq!(forced[0].tokens, r.tokens);
        }
    }

    #[test]
    fn batching_does_not_change_outputs() {
        let m = model(2, &[4, 6]);
        let srcs = sources();
        let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
        let together = greedy_decode(&m, &refs, 6, OrderOverride::default()).unwrap();
        for (i, r) in together.iter().enumerate() {
            let alone = greedy_decode(&m, &refs[i..i + 1], 6, OrderOverride::default()).unwrap();
            assert_eq!(&alone[0], r);
        }
    }

    #[test]
    fn truncation_is_flagged() {
        let m = model(3, &[1]);
        let srcs = sources();
        let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
        for r in greedy_decode(&m, &refs, 2, OrderOverride::default()).unwrap() {
            assert!(r.tokens.len() <= 2);
            assert_eq!(r.truncated, r.tokens.len() == 2);
        }
    }

    #[test]
    fn ensembles_of_one_or_clones_equal_plain_decode() {
        let m = model(4, &[4, 6]);
        let srcs = sources();
        let refs: Vec<&[usize]> = srcs.iter().map(Vec::as_slice).collect();
        let plain = greedy_decode(&m, &refs, 6, OrderOverride::default()).unwrap();
        let one = ensemble_decode(&[&m], &refs, 6).unwrap();
        assert_eq!(plain, one);
        let two = ensemble_decode(&[&m, &m], &refs, 6).unwrap();
        for (a, b) in plain.iter().zip(&two) {
            assert_eq!(a.tokens, b.tokens);
        }
    }

    #[test]
    fn bad_overrides_and_vocab_mismatch_are_errors() {
        let m = model(5, &[4, 6]);
        let src: &[usize] = &[4, 5];
        assert!(greedy_decode(&m, &[src], 4, OrderOverride { enc: None, dec: Some(2) }).is_err());
        let mut other = model(6, &[1]);
        other.spec.model.tgt_vocab = 11;
        assert!(matches!(ensemble_decode(&[&m, &other], &[src], 4), Err(Error::Config(_))));
    }
}
