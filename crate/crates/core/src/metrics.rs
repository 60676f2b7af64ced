//! Per-instance toy metrics.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::data::TaskKind;

pub fn exact_match(hyp: &[usize], reference: &[usize]) -> f64 {
    if hyp == reference {
        1.0
    } else {
        0.0
    }
}

/// Position-wise matches over the longer of the two sequences.
pub fn token_accuracy(hyp: &[usize], reference: &[usize]) -> f64 {
    let longest = hyp.len().max(reference.len());
    if longest == 0 {
        return 1.0;
    }
    let hits = hyp.iter().zip(reference).filter(|(a, b)| a == b).count();
    hits as f64 / longest as f64
}

fn ngram_counts(tokens: &[usize], n: usize) -> HashMap<&[usize], usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w).or_insert(0) += 1;
        }
    }
    counts
}

/// Sentence BLEU in `[0, 100]`: geometric mean of clipped 1- to 4-gram
/// precisions (add-one smoothing from bigrams up) times the brevity
/// penalty.
pub fn sentence_bleu(hyp: &[usize], reference: &[usize]) -> f64 {
    if hyp.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=4 {
        let h = ngram_counts(hyp, n);
        let r = ngram_counts(reference, n);
        let total: usize = h.values().sum();
        let matched: usize = h.iter().map(|(g, &c)| c.min(*r.get(g).unwrap_or(&0))).sum();
        let p = if n == 1 {
            if matched == 0 {
                return 0.0;
            }
            matched as f64 / total as f64
        } else {
            (matched as f64 + 1.0) / (total as f64 + 1.0)
        };
        log_sum += p.ln();
    }
    let (c, r) = (hyp.len() as f64, reference.len() as f64);
    let bp = if c > r { 1.0 } else { (1.0 - r / c).exp() };
    100.0 * bp * (log_sum / 4.0).exp()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    ExactMatch,
    TokenAccuracy,
    Bleu,
}

impl Metric {
    pub fn score(self, hyp: &[usize], reference: &[usize]) -> f64 {
        match self {
            Metric::ExactMatch => exact_match(hyp, reference),
            Metric::TokenAccuracy => token_accuracy(hyp, reference),
            Metric::Bleu => sentence_bleu(hyp, reference),
        }
    }

    /// Study score for a task: BLEU for mapped-reverse, exact match
    /// otherwise (BLEU degenerates on very short targets).
    pub fn for_task(kind: TaskKind) -> Self {
        match kind {
            TaskKind::MappedReverse => Metric::Bleu,
            _ => Metric::ExactMatch,
        }
    }
}

/// All three metrics for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InstanceScores {
    pub exact_match: f64,
    pub token_acc: f64,
    pub bleu: f64,
}

impl InstanceScores {
    pub fn new(hyp: &[usize], reference: &[usize]) -> Self {
        Self {
            exact_match: exact_match(hyp, reference),
            token_acc: token_accuracy(hyp, reference),
            bleu: sentence_bleu(hyp, reference),
        }
    }

    pub fn get(&self, metric: Metric) -> f64 {
        match metric {
            Metric::ExactMatch => self.exact_match,
            Metric::TokenAccuracy => self.token_acc,
            Metric::Bleu => self.bleu,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bleu_identity_and_disjoint() {
        assert!((sentence_bleu(&[4, 5, 6, 7, 8], &[4, 5, 6, 7, 8]) - 100.0).abs() < 1e-9);
        assert!((sentence_bleu(&[4, 5], &[4, 5]) - 100.0).abs() < 1e-9);
        assert_eq!(sentence_bleu(&[4, 5, 6], &[7, 8, 9]), 0.0);
        assert_eq!(sentence_bleu(&[], &[7]), 0.0);
    }

    #[test]
    fn bleu_hand_case() {
        // hyp a b c d vs ref a b e d: unigrams 3/4, bigrams (1+1)/(3+1),
        // trigrams (0+1)/(2+1), 4-grams (0+1)/(1+1); equal lengths.
        let logs = [3.0f64 / 4.0, 2.0 / 4.0, 1.0 / 3.0, 1.0 / 2.0].map(f64::ln);
        let want = 100.0 * (logs.iter().sum::<f64>() / 4.0).exp();
        assert!((sentence_bleu(&[0, 1, 2, 3], &[0, 1, 4, 3]) - want).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty() {
        let full = sentence_bleu(&[4, 5, 6, 7], &[4, 5, 6, 7]);
        let short = sentence_bleu(&[4, 5, 6], &[4, 5, 6, 7]);
        // All n-gram precisions are 1 for the prefix; only the penalty
        // exp(1 - 4/3) applies.
        assert!((short - full * (1.0f64 - 4.0 / 3.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn bleu_clips_repeated_ngrams() {
        let s = sentence_bleu(&[4, 4, 4, 4], &[4, 5, 6, 7]);
        let logs = [1.0f64 / 4.0, 1.0 / 4.0, 1.0 / 3.0, 1.0 / 2.0].map(f64::ln);
        assert!((s - 100.0 * (logs.iter().sum::<f64>() / 4.0).exp()).abs() < 1e-9);
    }

    #[test]
    fn exact_and_token_accuracy() {
        assert_eq!(exact_match(&[1, 2], &[1, 2]), 1.0);
        assert_eq!(exact_match(&[1, 2], &[1]), 0.0);
        assert_eq!(token_accuracy(&[1, 2, 3], &[1, 9, 3]), 2.0 / 3.0);
        assert_eq!(token_accuracy(&[1], &[1, 2]), 0.5);
        assert_eq!(token_accuracy(&[1, 2, 3, 4], &[1, 2]), 0.5);
    }

    #[test]
    fn metric_selection() {
        assert_eq!(Metric::for_task(TaskKind::MappedReverse), Metric::Bleu);
        assert_eq!(Metric::for_task(TaskKind::Mixture), Metric::ExactMatch);
        assert_eq!(Metric::TokenAccuracy.score(&[1, 2], &[1, 3]), 0.5);
    }
}
