//! Diagnostic studies over trained models: order preference ratios,
//! variance decomposition, subset decode matrices, robustness under forced
//! orders and predictor parameter overhead.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::Instance;
use crate::error::{Error, Result};
use crate::metrics::Metric;
use crate::model::{IotModel, OrderOverride, TrainMode};
use crate::train::evaluate;

/// Per-instance scores, `scores[instance][column]`.
pub type ScoreMatrix = Vec<Vec<f64>>;

fn check_matrix(scores: &[Vec<f64>]) -> Result<usize> {
    let k = scores.first().map_or(0, Vec::len);
    if scores.is_empty() || k == 0 || scores.iter().any(|r| r.len() != k) {
        return Err(Error::Dimension("score matrix must be non-empty and rectangular".into()));
    }
    Ok(k)
}

/// Fraction of instances on which each column scores best; ties are split
/// equally among the tied columns.
pub fn preference_ratios(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let k = check_matrix(scores)?;
    let mut ratios = vec![0.0; k];
    for row in scores {
        let best = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let winners: Vec<usize> = (0..k).filter(|&j| row[j] == best).collect();
        let share = 1.0 / winners.len() as f64;
        for j in winners {
            ratios[j] += share;
        }
    }
    let n = scores.len() as f64;
    Ok(ratios.into_iter().map(|r| r / n).collect())
}

fn variance(xs: &[f64]) -> f64 {
    let mean = xs.iter().sum::<f64>() / xs.len() as f64;
    xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    /// Variance across columns of the corpus-mean score.
    pub corpus_variance: f64,
    /// Mean over instances of the across-column score variance.
    pub mean_instance_variance: f64,
    pub ratio: f64,
    pub corpus_scores: Vec<f64>,
}

pub fn variance_report(scores: &[Vec<f64>]) -> Result<VarianceReport> {
    let k = check_matrix(scores)?;
    if k < 2 {
        return Err(Error::Dimension("variance study needs at least two orders".into()));
    }
    let n = scores.len() as f64;
    let corpus_scores: Vec<f64> = (0..k).map(|j| scores.iter().map(|r| r[j]).sum::<f64>() / n).collect();
    let corpus_variance = variance(&corpus_scores);
    let mean_instance_variance = scores.iter().map(|r| variance(r)).sum::<f64>() / n;
    Ok(VarianceReport {
        corpus_variance,
        mean_instance_variance,
        ratio: mean_instance_variance / corpus_variance.max(1e-12),
        corpus_scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetMatrix {
    /// Instances whose predicted order is each row's order.
    pub counts: Vec<usize>,
    /// Mean score of row subset `i` decoded with order `j`; `None` for empty
    /// rows.
    pub matrix: Vec<Option<Vec<f64>>>,
    pub row_argmax: Vec<Option<usize>>,
    /// Non-empty rows whose diagonal strictly beats every other column.
    pub strictly_dominant_rows: usize,
    /// Non-empty rows whose diagonal is at least every other column.
    pub diagonal_max_rows: usize,
    pub nonempty_rows: usize,
}

/// Builds the K x K subset matrix from per-instance scores under every
/// forced order (`scores[i][j]`) and each instance's predicted order.
pub fn subset_matrix(scores: &[Vec<f64>], predicted: &[usize]) -> Result<SubsetMatrix> {
    let k = check_matrix(scores)?;
    if predicted.len() != scores.len() || predicted.iter().any(|&p| p >= k) {
        return Err(Error::Dimension("predicted orders do not match the score matrix".into()));
    }
    let mut counts = vec![0; k];
    let mut sums = vec![vec![0.0; k]; k];
    for (row, &p) in scores.iter().zip(predicted) {
        counts[p] += 1;
        for j in 0..k {
            sums[p][j] += row[j];
        }
    }
    let matrix: Vec<Option<Vec<f64>>> = (0..k)
        .map(|i| (counts[i] > 0).then(|| sums[i].iter().map(|s| s / counts[i] as f64).collect()))
        .collect();
    let mut strictly = 0;
    let mut diag_max = 0;
    let row_argmax = matrix
        .iter()
        .enumerate()
        .map(|(i, row)| {
            row.as_ref().map(|r| {
                if (0..k).all(|j| j == i || r[i] > r[j]) {
                    strictly += 1;
                }
                if (0..k).all(|j| r[i] >= r[j]) {
                    diag_max += 1;
                }
                crate::routing::argmax(r)
            })
        })
        .collect();
    Ok(SubsetMatrix {
        nonempty_rows: counts.iter().filter(|&&c| c > 0).count(),
        counts,
        matrix,
        row_argmax,
        strictly_dominant_rows: strictly,
        diagonal_max_rows: diag_max,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub codes: Vec<u8>,
    pub scores: Vec<f64>,
    /// Decoder order a fixed-order model was trained with.
    pub trained_code: Option<u8>,
    pub spread: f64,
    /// `spread / max score` (0 when every score is 0).
    pub relative_spread: f64,
}

pub fn robustness_report(codes: &[u8], scores: &[f64], trained_code: Option<u8>) -> RobustnessReport {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let min = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let spread = max - min;
    RobustnessReport {
        codes: codes.to_vec(),
        scores: scores.to_vec(),
        trained_code,
        spread,
        relative_spread: if max > 0.0 { spread / max } else { 0.0 },
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamOverhead {
    pub total_params: usize,
    pub predictor_params: usize,
    /// `d * M + d * N`, omitting sides with a single order.
    pub closed_form: usize,
}

pub fn param_overhead<F: crate::tensor::Element>(model: &IotModel<F>) -> ParamOverhead {
    let d = model.config().d_model;
    let routed = model.mode() == TrainMode::Iot;
    let side = |k: usize| if routed && k > 1 { d * k } else { 0 };
    ParamOverhead {
        total_params: model.num_params(),
        predictor_params: model.predictor_params(),
        closed_form: side(model.enc_orders.len()) + side(model.dec_orders.len()),
    }
}

/// Per-instance scores of each model (one column per model).
pub fn model_score_matrix(models: &[&IotModel<f32>], instances: &[&Instance], metric: Metric, max_len: usize) -> Result<ScoreMatrix> {
    let mut scores = vec![Vec::with_capacity(models.len()); instances.len()];
    for m in models {
        let eval = evaluate(&[m], instances, max_len, OrderOverride::default())?;
        for (row, s) in scores.iter_mut().zip(&eval.scores) {
            row.push(s.get(metric));
        }
    }
    Ok(scores)
}

/// Per-instance scores of one model decoded with every decoder order
/// forced in turn (one column per order), plus its own predicted orders.
pub fn override_score_matrix(
    model: &IotModel<f32>,
    instances: &[&Instance],
    metric: Metric,
    max_len: usize,
) -> Result<(ScoreMatrix, Vec<usize>)> {
    let k = model.dec_orders.len();
    let mut scores = vec![Vec::with_capacity(k); instances.len()];
    for j in 0..k {
        let eval = evaluate(&[model], instances, max_len, OrderOverride { enc: None, dec: Some(j) })?;
        for (row, s) in scores.iter_mut().zip(&eval.scores) {
            row.push(s.get(metric));
        }
    }
    let plain = evaluate(&[model], instances, max_len, OrderOverride::default())?;
    let predicted = plain
        .results
        .iter()
        .map(|r| model.dec_orders.index_of(r.routes[0].dec_code))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    Ok((scores, predicted))
}

/// Decoder order codes a robustness study covers: a routed model's own
/// candidates, or all six orders for single-order models.
pub fn robustness_codes<F: crate::tensor::Element>(model: &IotModel<F>) -> Vec<u8> {
    if model.mode() == TrainMode::Iot && model.dec_orders.len() > 1 {
        model.dec_orders.codes().to_vec()
    } else {
        (1..=6).collect()
    }
}

/// Corpus score of `model` decoded with each decoder order in `codes`
/// forced; encoder routing is left to the model.
pub fn forced_order_scores(
    model: &IotModel<f32>,
    codes: &[u8],
    instances: &[&Instance],
    metric: Metric,
    max_len: usize,
) -> Result<Vec<f64>> {
    codes
        .iter()
        .map(|&code| {
            let view = model.pinned(None, Some(code))?;
            Ok(evaluate(&[&view], instances, max_len, OrderOverride::default())?.summary.score(metric))
        })
        .collect()
}

/// Machine-readable study output with provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyReport {
    pub study: String,
    pub metric: Metric,
    pub split: String,
    pub seed: u64,
    pub checkpoints: Vec<String>,
    /// Resolved run configuration of each checkpoint.
    pub configs: Vec<Value>,
    pub result: Value,
    /// Row-major table mirrored in the CSV file; the first row is a header.
    pub table: Vec<Vec<String>>,
}

impl StudyReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for row in &self.table {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }
}

fn fmt(x: f64) -> String {
    format!("{x}")
}

pub fn ratios_table(codes: &[u8], ratios: &[f64]) -> Vec<Vec<String>> {
    let mut t = vec![vec!["order".to_string(), "ratio".to_string()]];
    t.extend(codes.iter().zip(ratios).map(|(c, r)| vec![c.to_string(), fmt(*r)]));
    t
}

pub fn variance_table(codes: &[u8], v: &VarianceReport) -> Vec<Vec<String>> {
    let mut header = vec!["corpus_variance".to_string(), "mean_instance_variance".into(), "ratio".into()];
    header.extend(codes.iter().map(|c| format!("score_{c}")));
    let mut row = vec![fmt(v.corpus_variance), fmt(v.mean_instance_variance), fmt(v.ratio)];
    row.extend(v.corpus_scores.iter().map(|s| fmt(*s)));
    vec![header, row]
}

pub fn subset_table(codes: &[u8], s: &SubsetMatrix) -> Vec<Vec<String>> {
    let mut header = vec!["predicted".to_string(), "count".to_string()];
    header.extend(codes.iter().map(u8::to_string));
    let mut t = vec![header];
    for (i, c) in codes.iter().enumerate() {
        let mut row = vec![c.to_string(), s.counts[i].to_string()];
        match &s.matrix[i] {
            Some(r) => row.extend(r.iter().map(|x| fmt(*x))),
            None => row.extend(codes.iter().map(|_| String::new())),
        }
        t.push(row);
    }
    t
}

pub fn robustness_table(r: &RobustnessReport) -> Vec<Vec<String>> {
    let mut t = vec![vec!["order".to_string(), "score".to_string(), "trained".to_string()]];
    for (c, s) in r.codes.iter().zip(&r.scores) {
        t.push(vec![c.to_string(), fmt(*s), (r.trained_code == Some(*c)).to_string()]);
    }
    t
}

pub fn params_table(p: &ParamOverhead) -> Vec<Vec<String>> {
    vec![
        vec!["total_params".into(), "predictor_params".into(), "closed_form".into()],
        vec![p.total_params.to_string(), p.predictor_params.to_string(), p.closed_form.to_string()],
    ]
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::model::{ModelSpec, RoutingConfig};
    use crate::transformer::ModelConfig;

    #[test]
    fn ratios_split_ties_and_sum_to_one() {
        let identical = vec![vec![1.0, 1.0, 1.0]; 4];
        assert_eq!(preference_ratios(&identical).unwrap(), vec![1.0 / 3.0; 3]);
        let dominant = vec![vec![0.2, 0.9], vec![0.0, 0.5]];
        assert_eq!(preference_ratios(&dominant).unwrap(), vec![0.0, 1.0]);
        let mixed = vec![vec![1.0, 0.0, 1.0], vec![0.3, 0.2, 0.1], vec![0.0, 0.0, 0.0]];
        let r = preference_ratios(&mixed).unwrap();
        assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
        assert!((r[0] - (0.5 + 1.0 + 1.0 / 3.0) / 3.0).abs() < 1e-12);
        assert!(preference_ratios(&[]).is_err());
    }

    #[test]
    fn variance_hand_case() {
        // Two instances, two orders: scores (1, 0) and (0, 1). Corpus means
        // are (0.5, 0.5) -> variance 0; each instance has variance 0.25.
        let v = variance_report(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(v.corpus_variance, 0.0);
        assert_eq!(v.mean_instance_variance, 0.25);
        assert_eq!(v.ratio, 0.25 / 1e-12);

        // (4, 2) and (0, 2): corpus means (2, 2); instance variances 1 and 1.
        let v = variance_report(&[vec![4.0, 2.0], vec![0.0, 2.0]]).unwrap();
        assert_eq!((v.corpus_variance, v.mean_instance_variance), (0.0, 1.0));

        // (3, 1), (1, 1): means (2, 1) -> corpus variance 0.25; instance
        // variances 1 and 0 -> mean 0.5.
        let v = variance_report(&[vec![3.0, 1.0], vec![1.0, 1.0]]).unwrap();
        assert!((v.corpus_variance - 0.25).abs() < 1e-12);
        assert!((v.mean_instance_variance - 0.5).abs() < 1e-12);
        assert!((v.ratio - 2.0).abs() < 1e-12);

        let same = variance_report(&[vec![0.7, 0.7], vec![0.1, 0.1]]).unwrap();
        assert_eq!((same.corpus_variance, same.mean_instance_variance), (0.0, 0.0));
        assert!(variance_report(&[vec![1.0]]).is_err());
    }

    #[test]
    fn specialized_fixture_is_diagonal_dominant() {
        // Instance i is only solved by order i % 3, and predicted as such.
        let k = 3;
        let scores: Vec<Vec<f64>> = (0..12).map(|i| (0..k).map(|j| f64::from(u8::from(j == i % k))).collect()).collect();
        let predicted: Vec<usize> = (0..12).map(|i| i % k).collect();
        let s = subset_matrix(&scores, &predicted).unwrap();
        assert_eq!(s.counts.iter().sum::<usize>(), 12);
        assert_eq!(s.strictly_dominant_rows, 3);
        assert_eq!(s.row_argmax, vec![Some(0), Some(1), Some(2)]);
    }

    #[test]
    fn empty_subset_rows_are_null() {
        let scores = vec![vec![1.0, 0.0], vec![0.5, 0.2]];
        let s = subset_matrix(&scores, &[0, 0]).unwrap();
        assert_eq!(s.counts, vec![2, 0]);
        assert!(s.matrix[1].is_none());
        assert_eq!(s.nonempty_rows, 1);
        let table = subset_table(&[4, 6], &s);
        assert_eq!(table[2], vec!["6", "0", "", ""]);
        let single = subset_matrix(&[vec![0.3], vec![0.5]], &[0, 0]).unwrap();
        assert_eq!(single.matrix[0], Some(vec![0.4]));
    }

    #[test]
    fn robustness_spread() {
        let r = robustness_report(&[4, 6], &[0.8, 0.6], Some(4));
        assert!((r.spread - 0.2).abs() < 1e-12);
        assert!((r.relative_spread - 0.25).abs() < 1e-12);
        assert_eq!(robustness_table(&r)[1], vec!["4", "0.8", "true"]);
        let single = robustness_report(&[1], &[0.5], None);
        assert_eq!(single.spread, 0.0);
    }

    #[test]
    fn overhead_matches_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (enc, dec) in [(vec![1], vec![1]), (vec![1], vec![4, 6]), (vec![1, 2], vec![1, 2, 4, 6])] {
            let spec = ModelSpec {
                model: ModelConfig {
                    d_model: 8,
                    d_ff: 16,
                    ..ModelConfig::default()
                },
                routing: RoutingConfig {
                    encoder_orders: enc,
                    decoder_orders: Some(dec),
                    ..RoutingConfig::default()
                },
            };
            let m = IotModel::<f32>::new(spec, &mut rng).unwrap();
            let p = param_overhead(&m);
            assert_eq!(p.predictor_params, p.closed_form);
        }
    }

    #[test]
    fn csv_has_header_and_rows() {
        let report = StudyReport {
            study: "ratios".into(),
            metric: Metric::ExactMatch,
            split: "dev".into(),
            seed: 1,
            checkpoints: vec![],
            configs: vec![],
            result: Value::Null,
            table: ratios_table(&[1, 2], &[0.25, 0.75]),
        };
        assert_eq!(report.to_csv(), "order,ratio\n1,0.25\n2,0.75\n");
    }
}
