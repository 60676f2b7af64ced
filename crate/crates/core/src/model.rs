//! A transformer with candidate layer orders and instance-wise routing.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Batch;
use crate::error::{Error, Result};
use crate::gradcheck::GradCheckReport;
use crate::objective::{
    self, check_floor, clamp_probs_var, exploitation_loss, exploration_loss, weighted_task_loss, LossBundle,
};
use crate::routing::{
    argmax, gumbel_noise, gumbel_softmax_weights, order_subset, predictor_probs, sentence_summary, OrderSet, Role,
};
use crate::tensor::{Element, Graph, ParamId, ParamStore, Tensor, Var};
use crate::transformer::{Ctx, EncoderStates, ModelConfig, TokenBatch, TransformerParams};

/// How candidate orders are trained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainMode {
    /// Learned instance-wise routing over all candidate orders.
    Iot,
    /// A single decoder order given by its code.
    FixedOrder(u8),
    /// Every candidate order with unit weight and no predictor.
    UniformShared,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoutingConfig {
    pub mode: TrainMode,
    pub encoder_orders: Vec<u8>,
    /// Explicit decoder order codes; mutually exclusive with `decoder_subset`.
    pub decoder_orders: Option<Vec<u8>>,
    /// Size of a standard decoder order subset (2..=6).
    pub decoder_subset: Option<usize>,
    pub temperature: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            mode: TrainMode::Iot,
            encoder_orders: vec![1],
            decoder_orders: None,
            decoder_subset: None,
            temperature: 1.0,
        }
    }
}

impl RoutingConfig {
    /// Encoder and decoder candidate sets implied by the mode.
    pub fn order_sets(&self) -> Result<(OrderSet, OrderSet)> {
        let enc = OrderSet::from_codes(Role::Encoder, &self.encoder_orders)?;
        let dec = match (self.mode, &self.decoder_orders, self.decoder_subset) {
            (TrainMode::FixedOrder(code), _, _) => {
                if enc.len() != 1 {
                    return Err(Error::Config("fixed_order mode needs exactly one encoder order".into()));
                }
                OrderSet::from_codes(Role::Decoder, &[code])?
            }
            (_, Some(_), Some(_)) => {
                return Err(Error::Config("give decoder_orders or decoder_subset, not both".into()));
            }
            (_, Some(codes), None) => OrderSet::from_codes(Role::Decoder, codes)?,
            (_, None, Some(n)) => order_subset(n)?,
            (_, None, None) => OrderSet::from_codes(Role::Decoder, &[1])?,
        };
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        Ok((enc, dec))
    }
}

/// Everything needed to rebuild a model's parameter layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub model: ModelConfig,
    pub routing: RoutingConfig,
}

/// Loss-side settings for one training step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveSettings {
    pub c1: f64,
    pub c2: f64,
    pub clamp_floor: f64,
    /// Evaluate the auxiliaries on clamped (true) or raw probabilities.
    pub clamp_aux: bool,
    pub label_smoothing: f64,
    pub temperature: f64,
}

impl Default for ObjectiveSettings {
    fn default() -> Self {
        Self {
            c1: objective::DEFAULT_C1,
            c2: objective::DEFAULT_C2,
            clamp_floor: objective::DEFAULT_CLAMP_FLOOR,
            clamp_aux: true,
            label_smoothing: 0.1,
            temperature: 1.0,
        }
    }
}

/// Graph handles and recorded values of one training forward pass.
pub struct TrainForward {
    pub total: Var,
    pub bundle: LossBundle,
    /// Raw encoder / decoder routing probabilities, `[B][K]`, when routed.
    pub enc_probs: Option<Vec<Vec<f64>>>,
    pub dec_probs: Option<Vec<Vec<f64>>>,
}

/// Inference-time order choice for each instance of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Routing {
    /// Indices into the encoder / decoder order sets.
    pub enc: Vec<usize>,
    pub dec: Vec<usize>,
    /// Predictor probabilities when that side has a predictor.
    pub enc_probs: Option<Vec<Vec<f64>>>,
    pub dec_probs: Option<Vec<Vec<f64>>>,
}

/// Order indices forced at inference, per side.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OrderOverride {
    pub enc: Option<usize>,
    pub dec: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct IotModel<F> {
    pub spec: ModelSpec,
    pub enc_orders: OrderSet,
    pub dec_orders: OrderSet,
    pub store: ParamStore<F>,
    pub params: TransformerParams,
    pub enc_predictor: Option<ParamId>,
    pub dec_predictor: Option<ParamId>,
}

fn rows(t: &Tensor<impl Element>) -> Vec<Vec<f64>> {
    t.to_f64_vec().chunks(t.cols()).map(<[f64]>::to_vec).collect()
}

impl<F: Element> IotModel<F> {
    /// Fresh model with random transformer weights and zero predictors
    /// (uniform routing at the start of training).
    pub fn new<R: Rng>(spec: ModelSpec, rng: &mut R) -> Result<Self> {
        spec.model.validate()?;
        let (enc_orders, dec_orders) = spec.routing.order_sets()?;
        let mut store = ParamStore::new();
        let params = TransformerParams::init(&spec.model, &mut store, rng)?;
        let d = spec.model.d_model;
        let routed = spec.routing.mode == TrainMode::Iot;
        let mut predictor = |name: &str, k: usize| -> Result<Option<ParamId>> {
            if routed && k > 1 {
                Ok(Some(store.insert(name, Tensor::zeros(vec![d, k]))?))
            } else {
                Ok(None)
            }
        };
        let enc_predictor = predictor("pred.enc.w", enc_orders.len())?;
        let dec_predictor = predictor("pred.dec.w", dec_orders.len())?;
        Ok(Self {
            spec,
            enc_orders,
            dec_orders,
            store,
            params,
            enc_predictor,
            dec_predictor,
        })
    }

    /// Rebuilds a model around an existing parameter store.
    pub fn from_store(spec: ModelSpec, store: ParamStore<F>) -> Result<Self> {
        spec.model.validate()?;
        let (enc_orders, dec_orders) = spec.routing.order_sets()?;
        let params = TransformerParams::bind(&spec.model, &store)?;
        let routed = spec.routing.mode == TrainMode::Iot;
        let d = spec.model.d_model;
        let lookup = |name: &str, k: usize| -> Result<Option<ParamId>> {
            if !(routed && k > 1) {
                return Ok(None);
            }
            let id = store
                .id(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
            if store.value(id).shape() != [d, k] {
                return Err(Error::Checkpoint(format!(
                    "{name} has shape {:?}, expected [{d}, {k}]",
                    store.value(id).shape()
                )));
            }
            Ok(Some(id))
        };
        let enc_predictor = lookup("pred.enc.w", enc_orders.len())?;
        let dec_predictor = lookup("pred.dec.w", dec_orders.len())?;
        Ok(Self {
            spec,
            enc_orders,
            dec_orders,
            store,
            params,
            enc_predictor,
            dec_predictor,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.spec.model
    }

    pub fn mode(&self) -> TrainMode {
        self.spec.routing.mode
    }

    pub fn ctx(&self) -> Ctx<'_, F> {
        Ctx::new(&self.store, &self.spec.model)
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn predictor_params(&self) -> usize {
        [self.enc_predictor, self.dec_predictor]
            .into_iter()
            .flatten()
            .map(|id| self.store.value(id).numel())
            .sum()
    }

    /// Routing probabilities (`[B, K]`) from a summary, or `None` when the
    /// side has no predictor.
    fn probs(&self, g: &mut Graph<F>, predictor: Option<ParamId>, summary: Var) -> Result<Option<Var>> {
        match predictor {
            Some(id) => {
                let w = g.param(&self.store, id)?;
                Ok(Some(predictor_probs(g, summary, w)?))
            }
            None => Ok(None),
        }
    }

    /// Builds the full training objective for one batch.
    ///
    /// Every (encoder order, decoder order) path is run with teacher
    /// forcing. Gumbel noise for routed sides is drawn from `rng`, encoder
    /// side first.
    pub fn training_loss<R: Rng>(
        &self,
        g: &mut Graph<F>,
        batch: &Batch,
        settings: &ObjectiveSettings,
        rng: &mut R,
    ) -> Result<TrainForward> {
        let ctx = self.ctx();
        let b = batch.size();
        let (m_count, n_count) = (self.enc_orders.len(), self.dec_orders.len());
        let src_keep = batch.src.keep();

        let embedded = ctx.embed(g, self.params.src_embedding, &batch.src)?;
        let s_e = sentence_summary(g, embedded, &src_keep)?;
        let pi_e = self.probs(g, self.enc_predictor, s_e)?;
        let (gamma, pi_e_clamped) = self.soft_weights(g, pi_e, b, settings, rng)?;

        let mut states = Vec::with_capacity(m_count);
        for order in self.enc_orders.orders() {
            let h = ctx.encode_embedded(g, &self.params, embedded, &src_keep, order)?;
            states.push(EncoderStates {
                h,
                keep: src_keep.clone(),
                batch: b,
                len: batch.src.len,
            });
        }

        // The decoder predictor reads the routing-weighted encoder output.
        let mixed = match gamma {
            Some(gw) if m_count > 1 => {
                let mut acc = None;
                for (m, st) in states.iter().enumerate() {
                    let col = g.select_col(gw, m)?;
                    let part = g.scale_rows(st.h, col)?;
                    acc = Some(match acc {
                        Some(a) => g.add(a, part)?,
                        None => part,
                    });
                }
                acc.expect("at least one encoder order")
            }
            _ => states[0].h,
        };
        let pi_d = if self.dec_predictor.is_some() {
            let s_d = sentence_summary(g, mixed, &src_keep)?;
            self.probs(g, self.dec_predictor, s_d)?
        } else {
            None
        };
        let (lambda, pi_d_clamped) = self.soft_weights(g, pi_d, b, settings, rng)?;

        let mut grid = Vec::with_capacity(m_count);
        let mut path_means = Vec::with_capacity(m_count);
        for st in &states {
            let mut row = Vec::with_capacity(n_count);
            let mut means = Vec::with_capacity(n_count);
            for order in self.dec_orders.orders() {
                let logits = ctx.decode_forward(g, &self.params, &batch.tgt_in, st, order)?;
                let per_instance = g.cross_entropy_ls_grouped(
                    logits,
                    &batch.tgt_out,
                    settings.label_smoothing,
                    batch.tgt_in.pad_id,
                    b,
                )?;
                means.push(g.value(per_instance).to_f64_vec().iter().sum::<f64>() / b as f64);
                row.push(per_instance);
            }
            grid.push(row);
            path_means.push(means);
        }

        let mut bundle = LossBundle {
            path_losses: path_means,
            c1: settings.c1,
            c2: settings.c2,
            clamp_floor: settings.clamp_floor,
            ..LossBundle::default()
        };

        if self.mode() == TrainMode::UniformShared {
            let mut total = None;
            for &loss in grid.iter().flatten() {
                let mean = g.mean_all(loss)?;
                total = Some(match total {
                    Some(t) => g.add(t, mean)?,
                    None => mean,
                });
            }
            let total = total.expect("at least one path");
            bundle.l_c = g.value(total).item().as_f64();
            bundle.total = bundle.l_c;
            bundle.c1 = 0.0;
            bundle.c2 = 0.0;
            return Ok(TrainForward {
                total,
                bundle,
                enc_probs: None,
                dec_probs: None,
            });
        }

        let l_c = weighted_task_loss(g, &grid, gamma, lambda)?;
        bundle.l_c = g.value(l_c).item().as_f64();
        let mut l_d = Vec::new();
        let mut l_s = Vec::new();
        for (raw, clamped, d_slot, s_slot) in [
            (pi_e, pi_e_clamped, &mut bundle.l_d_enc, &mut bundle.l_s_enc),
            (pi_d, pi_d_clamped, &mut bundle.l_d_dec, &mut bundle.l_s_dec),
        ] {
            let (Some(raw), Some(clamped)) = (raw, clamped) else {
                continue;
            };
            let p = if settings.clamp_aux { clamped } else { raw };
            let d = exploration_loss(g, p)?;
            let s = exploitation_loss(g, p)?;
            *d_slot = g.value(d).item().as_f64();
            *s_slot = g.value(s).item().as_f64();
            l_d.push(d);
            l_s.push(s);
        }
        let total = objective::total_loss_var(g, l_c, &l_d, &l_s, settings.c1, settings.c2)?;
        bundle.total = g.value(total).item().as_f64();
        Ok(TrainForward {
            total,
            bundle,
            enc_probs: pi_e.map(|p| rows(g.value(p))),
            dec_probs: pi_d.map(|p| rows(g.value(p))),
        })
    }

    /// Clamps routed probabilities and turns them into Gumbel-softmax
    /// weights. Returns `(weights, clamped)`.
    fn soft_weights<R: Rng>(
        &self,
        g: &mut Graph<F>,
        probs: Option<Var>,
        batch: usize,
        settings: &ObjectiveSettings,
        rng: &mut R,
    ) -> Result<(Option<Var>, Option<Var>)> {
        let Some(p) = probs else {
            return Ok((None, None));
        };
        let k = g.shape(p)[1];
        check_floor(settings.clamp_floor, k)?;
        let clamped = clamp_probs_var(g, p, settings.clamp_floor)?;
        let noise = gumbel_noise(batch * k, rng);
        let w = gumbel_softmax_weights(g, clamped, &noise, settings.temperature)?;
        Ok((Some(w), Some(clamped)))
    }

    /// Picks orders by the argmax of each predictor (lowest index when no
    /// predictor exists), honouring any override.
    pub fn route(&self, src: &TokenBatch, over: OrderOverride) -> Result<Routing> {
        for (idx, set) in [(over.enc, &self.enc_orders), (over.dec, &self.dec_orders)] {
            if let Some(i) = idx {
                if i >= set.len() {
                    return Err(Error::Config(format!("order index {i} outside a set of {}", set.len())));
                }
            }
        }
        let ctx = self.ctx();
        let b = src.batch;
        let keep = src.keep();
        let mut g = Graph::new().without_param_grads();
        let embedded = ctx.embed(&mut g, self.params.src_embedding, src)?;

        let (enc, enc_probs) = match over.enc {
            Some(i) => (vec![i; b], None),
            None => {
                let s_e = sentence_summary(&mut g, embedded, &keep)?;
                match self.probs(&mut g, self.enc_predictor, s_e)? {
                    Some(p) => {
                        let p = rows(g.value(p));
                        (p.iter().map(|r| argmax(r)).collect(), Some(p))
                    }
                    None => (vec![0; b], None),
                }
            }
        };

        let (dec, dec_probs) = match over.dec {
            Some(i) => (vec![i; b], None),
            None if self.dec_predictor.is_none() => (vec![0; b], None),
            None => {
                let mut chosen = vec![0; b];
                let mut probs = vec![Vec::new(); b];
                for (m, order) in self.enc_orders.orders().iter().enumerate() {
                    let members: Vec<usize> = (0..b).filter(|&i| enc[i] == m).collect();
                    if members.is_empty() {
                        continue;
                    }
                    let h = ctx.encode_embedded(&mut g, &self.params, embedded, &keep, order)?;
                    let s_d = sentence_summary(&mut g, h, &keep)?;
                    let p = self.probs(&mut g, self.dec_predictor, s_d)?.expect("decoder predictor");
                    let p = rows(g.value(p));
                    for i in members {
                        chosen[i] = argmax(&p[i]);
                        probs[i] = p[i].clone();
                    }
                }
                (chosen, Some(probs))
            }
        };
        Ok(Routing {
            enc,
            dec,
            enc_probs,
            dec_probs,
        })
    }

    /// Converts `[enc_code, dec_code]`-style overrides to set indices.
    pub fn override_from_codes(&self, enc: Option<u8>, dec: Option<u8>) -> Result<OrderOverride> {
        Ok(OrderOverride {
            enc: enc.map(|c| self.enc_orders.index_of(c)).transpose()?,
            dec: dec.map(|c| self.dec_orders.index_of(c)).transpose()?,
        })
    }

    /// Inference view sharing these weights that always runs the given
    /// orders, which need not belong to the trained order sets.
    pub fn pinned(&self, enc: Option<u8>, dec: Option<u8>) -> Result<Self> {
        let mut m = self.clone();
        if let Some(code) = enc {
            m.enc_orders = OrderSet::from_codes(Role::Encoder, &[code])?;
            m.enc_predictor = None;
        }
        if let Some(code) = dec {
            m.dec_orders = OrderSet::from_codes(Role::Decoder, &[code])?;
            m.dec_predictor = None;
        }
        Ok(m)
    }

    /// Re-types the parameters (e.g. to 64-bit for gradient checks).
    pub fn cast<G: Element>(&self) -> IotModel<G> {
        IotModel {
            spec: self.spec.clone(),
            enc_orders: self.enc_orders.clone(),
            dec_orders: self.dec_orders.clone(),
            store: self.store.cast(),
            params: self.params.clone(),
            enc_predictor: self.enc_predictor,
            dec_predictor: self.dec_predictor,
        }
    }
}

/// Central finite-difference check of the full training objective with
/// respect to the named parameters (all parameters when `names` is empty).
///
/// Gumbel noise is replayed from `noise_seed` on every evaluation, so the
/// objective is a deterministic function of the parameters.
pub fn objective_gradient_check(
    model: &IotModel<f64>,
    batch: &Batch,
    settings: &ObjectiveSettings,
    noise_seed: u64,
    names: &[&str],
    h: f64,
) -> Result<GradCheckReport> {
    use rand::SeedableRng;
    let eval = |store: &ParamStore<f64>, grads: bool| -> Result<(f64, ParamStore<f64>)> {
        let mut m = model.clone();
        m.store = store.clone();
        let mut g = if grads { Graph::new() } else { Graph::new().without_param_grads() };
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise_seed);
        let out = m.training_loss(&mut g, batch, settings, &mut rng)?;
        let value = g.value(out.total).item();
        if grads {
            m.store.zero_grads();
            g.backward(out.total)?;
            g.write_param_grads(&mut m.store);
        }
        Ok((value, m.store))
    };
    let (_, with_grads) = eval(&model.store, true)?;
    let ids: Vec<ParamId> = model
        .store
        .ids()
        .filter(|&id| names.is_empty() || names.contains(&model.store.name(id)))
        .collect();
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let mut work = model.store.clone();
    for &id in &ids {
        analytic.push(with_grads.grad(id).to_vec());
        let mut col = Vec::with_capacity(work.value(id).numel());
        for j in 0..work.value(id).numel() {
            let orig = work.value(id).data()[j];
            work.value_mut(id).data_mut()[j] = orig + h;
            let (plus, _) = eval(&work, false)?;
            work.value_mut(id).data_mut()[j] = orig - h;
            let (minus, _) = eval(&work, false)?;
            work.value_mut(id).data_mut()[j] = orig;
            col.push((plus - minus) / (2.0 * h));
        }
        numeric.push(col);
    }
    Ok(crate::gradcheck::compare(&analytic, &numeric))
}

#[cfg(test)]
mod tests;
