//! Answer vocabulary, label-distribution targets, the KLD loss, the
//! Max Prob / Answer Sampling strategies, and the consensus accuracy
//! metric.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::{Graph, Tensor, Var};
use std::collections::HashMap;

/// Canonical form used for all answer-string matching: lowercased and
/// whitespace-trimmed, nothing further.
pub fn normalize_answer(s: &str) -> String {
    s.trim().to_lowercase()
}

/// Answer classes ordered by descending training-set frequency, ties
/// broken lexicographically.
#[derive(Debug, Clone)]
pub struct AnswerVocab {
    answers: Vec<String>,
    index: HashMap<String, usize>,
}

impl AnswerVocab {
    /// Builds the top-`limit` vocabulary from training answer lists.
    pub fn build<'a>(
        answer_lists: impl IntoIterator<Item = &'a [String]>,
        limit: usize,
    ) -> Result<Self> {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for list in answer_lists {
            for a in list {
                *counts.entry(normalize_answer(a)).or_insert(0) += 1;
            }
        }
        if counts.is_empty() {
            return Err(Error::InvalidConfig("no answers to build vocabulary".into()));
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(limit);
        let answers: Vec<String> = ranked.into_iter().map(|(a, _)| a).collect();
        let index = answers
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        Ok(AnswerVocab { answers, index })
    }

    pub fn from_answers(answers: Vec<String>) -> Self {
        let index = answers
            .iter()
            .enumerate()
            .map(|(i, a)| (a.clone(), i))
            .collect();
        AnswerVocab { answers, index }
    }

    pub fn len(&self) -> usize {
        self.answers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.answers.is_empty()
    }

    pub fn id(&self, answer: &str) -> Option<usize> {
        self.index.get(&normalize_answer(answer)).copied()
    }

    pub fn answer(&self, id: usize) -> &str {
        &self.answers[id]
    }

    pub fn answers(&self) -> &[String] {
        &self.answers
    }

    /// In-vocabulary class ids of an annotator answer list, repeats
    /// kept.
    pub fn filter_ids(&self, answers: &[String]) -> Vec<usize> {
        answers.iter().filter_map(|a| self.id(a)).collect()
    }
}

/// probs[i] = occurrences of answer i in the in-vocab part of the
/// annotator list, divided by the in-vocab total.
pub fn build_distribution(answers: &[String], vocab: &AnswerVocab) -> Result<Tensor> {
    let ids = vocab.filter_ids(answers);
    if ids.is_empty() {
        return Err(Error::EmptyAnswerList);
    }
    let mut probs = Tensor::zeros(&[vocab.len()]);
    let share = 1.0 / ids.len() as f64;
    for id in ids {
        probs.data_mut()[id] += share;
    }
    Ok(probs)
}

/// KL divergence Σᵢ yᵢ·log(yᵢ/zᵢ) of the constant target distribution
/// `y` from the post-softmax prediction `z`, with 0·log(0/z) := 0.
/// Gradient flows to `z` only.
pub fn kld_loss(graph: &Graph, y: &Tensor, z: &Var) -> Result<Var> {
    let zshape = z.shape();
    if zshape.iter().product::<usize>() != y.numel() {
        return Err(Error::ShapeMismatch {
            op: "kld_loss",
            lhs: y.shape().to_vec(),
            rhs: zshape,
        });
    }
    // sum_{y_i>0} y_i log y_i is a constant; the variable part is
    // -sum y_i log z_i, where zero y_i annihilate the log.
    let entropy_term: f64 = y
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum();
    let y_flat = y.reshape(&zshape)?;
    let cross = graph.constant(y_flat).hadamard(&z.log())?.sum_all();
    graph.constant(Tensor::scalar(entropy_term)).sub(&cross)
}

/// One uniformly random element of the repeatable in-vocab answer list.
pub fn answer_sampling_target(
    answers: &[String],
    vocab: &AnswerVocab,
    rng: &mut Rng,
) -> Result<usize> {
    let ids = vocab.filter_ids(answers);
    if ids.is_empty() {
        return Err(Error::EmptyAnswerList);
    }
    Ok(ids[rng.below(ids.len())])
}

/// The modal in-vocab answer; ties broken by lower vocabulary id.
pub fn max_prob_target(answers: &[String], vocab: &AnswerVocab) -> Result<usize> {
    let ids = vocab.filter_ids(answers);
    if ids.is_empty() {
        return Err(Error::EmptyAnswerList);
    }
    let mut counts = vec![0usize; vocab.len()];
    for id in ids {
        counts[id] += 1;
    }
    Ok(counts
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(&a.0)))
        .map(|(id, _)| id)
        .expect("vocab nonempty"))
}

/// Consensus accuracy: min(count of the predicted answer among the
/// annotators / 3, 1).
pub fn vqa_accuracy(predicted: &str, answers: &[String]) -> f64 {
    let p = normalize_answer(predicted);
    let count = answers.iter().filter(|a| normalize_answer(a) == p).count();
    (count as f64 / 3.0).min(1.0)
}
