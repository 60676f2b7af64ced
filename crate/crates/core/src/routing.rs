//! Candidate layer orders and the instance-wise order predictors.
//!
//! Decoder orders carry the integer codes 1-6 and encoder orders 1-2:
//!
//! | code | decoder      | encoder |
//! |------|--------------|---------|
//! | 1    | SA → ED → FF | SA → FF |
//! | 2    | FF → SA → ED | FF → SA |
//! | 3    | ED → FF → SA |         |
//! | 4    | ED → SA → FF |         |
//! | 5    | SA → FF → ED |         |
//! | 6    | FF → ED → SA |         |

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Element, Graph, Tensor, TensorError, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RoutingError {
    #[error("unsupported layer kind set {0:?}")]
    UnsupportedKinds(Vec<LayerKind>),
    #[error("order subset size must be in 2..=6, got {0}")]
    SubsetSize(usize),
    #[error("order code {code} is not one of {valid:?}")]
    UnknownCode { code: u8, valid: Vec<u8> },
    #[error("layer order {0:?} repeats a layer kind")]
    RepeatedKind(Vec<LayerKind>),
    #[error("gumbel-softmax needs strictly positive probabilities; entry {0} is not")]
    ZeroProbability(usize),
    #[error("temperature must be positive, got {0}")]
    Temperature(f64),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LayerKind {
    /// Self-attention.
    SA,
    /// Encoder-decoder (cross) attention.
    ED,
    /// Position-wise feed-forward.
    FF,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            LayerKind::SA => "SA",
            LayerKind::ED => "ED",
            LayerKind::FF => "FF",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Encoder,
    Decoder,
}

/// A permutation of distinct layer kinds applied inside every block of a stack.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerOrder(Vec<LayerKind>);

impl LayerOrder {
    pub fn new(kinds: Vec<LayerKind>) -> Result<Self, RoutingError> {
        let mut seen = kinds.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != kinds.len() || kinds.is_empty() {
            return Err(RoutingError::RepeatedKind(kinds));
        }
        Ok(Self(kinds))
    }

    pub fn kinds(&self) -> &[LayerKind] {
        &self.0
    }

    pub fn contains(&self, kind: LayerKind) -> bool {
        self.0.contains(&kind)
    }
}

impl fmt::Display for LayerOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, k) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("->")?;
            }
            write!(f, "{k}")?;
        }
        Ok(())
    }
}

use LayerKind::{ED, FF, SA};

const DECODER_CODES: [[LayerKind; 3]; 6] = [
    [SA, ED, FF],
    [FF, SA, ED],
    [ED, FF, SA],
    [ED, SA, FF],
    [SA, FF, ED],
    [FF, ED, SA],
];

const ENCODER_CODES: [[LayerKind; 2]; 2] = [[SA, FF], [FF, SA]];

/// Indexed family of candidate orders for one stack.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderSet {
    role: Role,
    codes: Vec<u8>,
    orders: Vec<LayerOrder>,
}

impl OrderSet {
    /// Decoder order for a code in 1..=6.
    pub fn decoder_order(code: u8) -> Result<LayerOrder, RoutingError> {
        DECODER_CODES
            .get((code as usize).wrapping_sub(1))
            .map(|k| LayerOrder(k.to_vec()))
            .ok_or(RoutingError::UnknownCode {
                code,
                valid: (1..=6).collect(),
            })
    }

    /// Encoder order for a code in 1..=2.
    pub fn encoder_order(code: u8) -> Result<LayerOrder, RoutingError> {
        ENCODER_CODES
            .get((code as usize).wrapping_sub(1))
            .map(|k| LayerOrder(k.to_vec()))
            .ok_or(RoutingError::UnknownCode {
                code,
                valid: vec![1, 2],
            })
    }

    /// Builds a set from explicit codes, in the given order.
    pub fn from_codes(role: Role, codes: &[u8]) -> Result<Self, RoutingError> {
        let orders = codes
            .iter()
            .map(|&c| match role {
                Role::Encoder => Self::encoder_order(c),
                Role::Decoder => Self::decoder_order(c),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let mut dedup = codes.to_vec();
        dedup.sort_unstable();
        dedup.dedup();
        if dedup.len() != codes.len() || codes.is_empty() {
            return Err(RoutingError::UnknownCode {
                code: codes.first().copied().unwrap_or(0),
                valid: match role {
                    Role::Encoder => vec![1, 2],
                    Role::Decoder => (1..=6).collect(),
                },
            });
        }
        Ok(Self {
            role,
            codes: codes.to_vec(),
            orders,
        })
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn len(&self) -> usize {
        self.orders.len()
    }

    pub fn is_empty(&self) -> bool {
        self.orders.is_empty()
    }

    pub fn codes(&self) -> &[u8] {
        &self.codes
    }

    pub fn orders(&self) -> &[LayerOrder] {
        &self.orders
    }

    pub fn order(&self, index: usize) -> &LayerOrder {
        &self.orders[index]
    }

    pub fn code(&self, index: usize) -> u8 {
        self.codes[index]
    }

    /// Position of `code` within this set.
    pub fn index_of(&self, code: u8) -> Result<usize, RoutingError> {
        self.codes
            .iter()
            .position(|&c| c == code)
            .ok_or_else(|| RoutingError::UnknownCode {
                code,
                valid: self.codes.clone(),
            })
    }
}

/// All permutations of a supported kind set, indexed by their codes.
///
/// `{SA, FF}` gives the two encoder orders, `{SA, ED, FF}` the six decoder
/// orders. A single kind yields one trivial order (used in tests).
pub fn enumerate_orders(kinds: &[LayerKind]) -> Result<OrderSet, RoutingError> {
    let mut set = kinds.to_vec();
    set.sort();
    set.dedup();
    match set.as_slice() {
        [SA, FF] => OrderSet::from_codes(Role::Encoder, &[1, 2]),
        [SA, ED, FF] => OrderSet::from_codes(Role::Decoder, &[1, 2, 3, 4, 5, 6]),
        [single] => Ok(OrderSet {
            role: if *single == ED { Role::Decoder } else { Role::Encoder },
            codes: vec![1],
            orders: vec![LayerOrder(vec![*single])],
        }),
        _ => Err(RoutingError::UnsupportedKinds(kinds.to_vec())),
    }
}

/// The decoder order combinations used for each candidate count.
pub fn order_subset(n: usize) -> Result<OrderSet, RoutingError> {
    let codes: &[u8] = match n {
        2 => &[4, 6],
        3 => &[1, 4, 6],
        4 => &[1, 2, 4, 6],
        5 => &[1, 2, 4, 5, 6],
        6 => &[1, 2, 3, 4, 5, 6],
        _ => return Err(RoutingError::SubsetSize(n)),
    };
    OrderSet::from_codes(Role::Decoder, codes)
}

// ---- predictor math ----------------------------------------------------

/// Mean of `states` over rows whose `keep` flag is set.
///
/// `states` is `[T, d]` for one instance or `[B, T, d]` for a batch, with
/// `keep` covering the leading `T` or `B * T` positions. Returns `[d]` or
/// `[B, d]`.
pub fn sentence_summary<F: Element>(g: &mut Graph<F>, states: Var, keep: &[bool]) -> Result<Var, TensorError> {
    let shape = g.shape(states).to_vec();
    let (batch, t, d) = match *shape.as_slice() {
        [t, d] => (1, t, d),
        [b, t, d] => (b, t, d),
        _ => {
            return Err(TensorError::Invalid {
                op: "sentence_summary",
                msg: format!("expected [T, d] or [B, T, d], got {shape:?}"),
            })
        }
    };
    if keep.len() != batch * t {
        return Err(TensorError::Invalid {
            op: "sentence_summary",
            msg: format!("mask of {} for {batch}x{t} positions", keep.len()),
        });
    }
    let mut weights = vec![0.0; batch * t];
    for (b, row) in keep.chunks(t).enumerate() {
        let count = row.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(TensorError::Invalid {
                op: "sentence_summary",
                msg: format!("instance {b} has no non-pad positions"),
            });
        }
        for (w, &k) in weights[b * t..(b + 1) * t].iter_mut().zip(row) {
            if k {
                *w = 1.0 / count as f64;
            }
        }
    }
    let w = g.constant(Tensor::from_f64(vec![batch, 1, t], &weights)?)?;
    let x = g.reshape(states, &[batch, t, d])?;
    let pooled = g.matmul(w, x)?;
    if shape.len() == 2 {
        g.reshape(pooled, &[d])
    } else {
        g.reshape(pooled, &[batch, d])
    }
}

/// Predictor logits `summary · W` for a `[d]` or `[B, d]` summary.
pub fn predictor_logits<F: Element>(g: &mut Graph<F>, summary: Var, w: Var) -> Result<Var, TensorError> {
    let single = g.shape(summary).len() == 1;
    let d = g.shape(summary)[g.shape(summary).len() - 1];
    let s = if single { g.reshape(summary, &[1, d])? } else { summary };
    let logits = g.matmul(s, w)?;
    if single {
        let k = g.shape(logits)[1];
        g.reshape(logits, &[k])
    } else {
        Ok(logits)
    }
}

/// Order confidences `softmax(summary · W)`.
pub fn predictor_probs<F: Element>(g: &mut Graph<F>, summary: Var, w: Var) -> Result<Var, TensorError> {
    let logits = predictor_logits(g, summary, w)?;
    g.softmax(logits)
}

/// One standard Gumbel sample `-ln(-ln U)` with `U` drawn from the open
/// interval (0, 1).
pub fn gumbel_sample<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u = loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            break u;
        }
    };
    gumbel_from_uniform(u)
}

pub fn gumbel_from_uniform(u: f64) -> f64 {
    -(-u.ln()).ln()
}

pub fn gumbel_noise<R: Rng + ?Sized>(k: usize, rng: &mut R) -> Vec<f64> {
    (0..k).map(|_| gumbel_sample(rng)).collect()
}

/// Soft routing weights `softmax((log π + g) / τ)` over the last axis.
///
/// `probs` must already be clamped away from zero.
pub fn gumbel_softmax_weights<F: Element>(
    g: &mut Graph<F>,
    probs: Var,
    noise: &[f64],
    temperature: f64,
) -> Result<Var, RoutingError> {
    if !(temperature > 0.0) {
        return Err(RoutingError::Temperature(temperature));
    }
    if let Some(i) = g.value(probs).data().iter().position(|&p| p <= F::zero()) {
        return Err(RoutingError::ZeroProbability(i));
    }
    let shape = g.shape(probs).to_vec();
    let logp = g.log(probs)?;
    let noise = g.constant(Tensor::from_f64(shape, noise)?)?;
    let z = g.add(logp, noise)?;
    let z = g.scale(z, 1.0 / temperature)?;
    Ok(g.softmax(z)?)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Inference-time selection: argmax of the predictor logits, no noise.
pub fn select_argmax<F: Element>(summary: &[F], w: &Tensor<F>) -> usize {
    let k = w.cols();
    let logits: Vec<f64> = (0..k)
        .map(|j| {
            summary
                .iter()
                .enumerate()
                .map(|(i, &s)| s.as_f64() * w.data()[i * k + j].as_f64())
                .sum()
        })
        .collect();
    argmax(&logits)
}

/// Per-instance routing outcome.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub pi: Vec<f64>,
    pub gumbel: Vec<f64>,
    pub weights: Vec<f64>,
    pub selected: usize,
    pub summary: Vec<f64>,
}
