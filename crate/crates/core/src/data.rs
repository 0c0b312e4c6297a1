//! Deterministic toy VQA dataset: grid worlds of colored shapes with
//! templated questions and simulated noisy annotators.
//!
//! Every question's true answer is a function of the scene; each of
//! the simulated annotators independently reports it with probability
//! 1-ε, otherwise a distractor drawn from the same answer-type pool.

use crate::error::{Error, Result};
use crate::rng::Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

pub const PAD_TOKEN: &str = "<pad>";

fn default_shapes() -> Vec<String> {
    ["circle", "square", "triangle"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_colors() -> Vec<String> {
    ["red", "green", "blue", "yellow"]
        .iter()
        .map(|s| s.to_string())
        .collect()
}

fn default_annotators() -> usize {
    10
}

fn default_fill_prob() -> f64 {
    0.6
}

fn default_grid_side() -> usize {
    3
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorConfig {
    #[serde(default = "default_grid_side")]
    pub grid_side: usize,
    #[serde(default = "default_shapes")]
    pub shapes: Vec<String>,
    #[serde(default = "default_colors")]
    pub colors: Vec<String>,
    /// Simulated annotators per question.
    #[serde(default = "default_annotators")]
    pub annotators: usize,
    /// Probability that an annotator gives a distractor answer.
    #[serde(default)]
    pub noise: f64,
    #[serde(default)]
    pub seed: u64,
    /// Probability that a grid cell holds an object.
    #[serde(default = "default_fill_prob")]
    pub fill_prob: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            grid_side: default_grid_side(),
            shapes: default_shapes(),
            colors: default_colors(),
            annotators: default_annotators(),
            noise: 0.0,
            seed: 0,
            fill_prob: default_fill_prob(),
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.grid_side == 0 {
            return Err(Error::InvalidConfig("grid_side must be >= 1".into()));
        }
        if self.shapes.is_empty() || self.colors.is_empty() {
            return Err(Error::InvalidConfig("need at least one shape and color".into()));
        }
        if !(0.0..0.5).contains(&self.noise) {
            return Err(Error::InvalidConfig(format!(
                "noise {} outside [0, 0.5)",
                self.noise
            )));
        }
        if self.annotators == 0 {
            return Err(Error::InvalidConfig("annotators must be >= 1".into()));
        }
        if !(0.0 < self.fill_prob && self.fill_prob <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "fill_prob {} outside (0, 1]",
                self.fill_prob
            )));
        }
        Ok(())
    }

    pub fn grid_count(&self) -> usize {
        self.grid_side * self.grid_side
    }

    /// one-hot shape ⊕ one-hot color ⊕ (row, col) position encoding
    pub fn feature_dim(&self) -> usize {
        self.shapes.len() + self.colors.len() + 2
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct VqaSample {
    pub id: u64,
    pub grid: Vec<Vec<f64>>,
    pub question: Vec<String>,
    pub answers: Vec<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnswerType {
    YesNo,
    Number,
    Other,
}

/// Classifies an answer string: yes/no, decimal number, anything else.
pub fn answer_type(answer: &str) -> AnswerType {
    let a = crate::answer::normalize_answer(answer);
    if a == "yes" || a == "no" {
        AnswerType::YesNo
    } else if !a.is_empty() && a.chars().all(|c| c.is_ascii_digit()) {
        AnswerType::Number
    } else {
        AnswerType::Other
    }
}

struct Scene {
    side: usize,
    // row-major cells, None = empty
    cells: Vec<Option<(usize, usize)>>, // (shape idx, color idx)
}

impl Scene {
    fn features(&self, cfg: &GeneratorConfig) -> Vec<Vec<f64>> {
        let (s, c) = (cfg.shapes.len(), cfg.colors.len());
        self.cells
            .iter()
            .enumerate()
            .map(|(i, cell)| {
                let mut f = vec![0.0; s + c + 2];
                if let Some((shape, color)) = cell {
                    f[*shape] = 1.0;
                    f[s + *color] = 1.0;
                }
                f[s + c] = (i / self.side) as f64 / self.side as f64;
                f[s + c + 1] = (i % self.side) as f64 / self.side as f64;
                f
            })
            .collect()
    }

    fn count_color(&self, color: usize) -> usize {
        self.cells
            .iter()
            .flatten()
            .filter(|(_, c)| *c == color)
            .count()
    }

    fn shapes_with_unique_occurrence(&self) -> Vec<usize> {
        let mut counts = std::collections::BTreeMap::new();
        for (shape, _) in self.cells.iter().flatten() {
            *counts.entry(*shape).or_insert(0usize) += 1;
        }
        counts
            .into_iter()
            .filter(|(_, n)| *n == 1)
            .map(|(s, _)| s)
            .collect()
    }
}

fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(|w| w.to_string()).collect()
}

/// A templated question plus its scene-determined true answer and the
/// pool its distractors come from.
struct Question {
    tokens: Vec<String>,
    truth: String,
    distractors: Vec<String>,
}

fn build_question(scene: &Scene, cfg: &GeneratorConfig, rng: &mut Rng) -> Question {
    // template 0 needs a uniquely-occurring shape; the other three are
    // always applicable
    let unique = scene.shapes_with_unique_occurrence();
    let mut templates = vec![1usize, 2, 3];
    if !unique.is_empty() {
        templates.push(0);
    }
    let template = templates[rng.below(templates.len())];
    match template {
        0 => {
            let shape_idx = unique[rng.below(unique.len())];
            let color_idx = scene
                .cells
                .iter()
                .flatten()
                .find(|(s, _)| *s == shape_idx)
                .map(|(_, c)| *c)
                .expect("unique shape present");
            let shape = &cfg.shapes[shape_idx];
            Question {
                tokens: words(&format!("what color is the {shape}")),
                truth: cfg.colors[color_idx].clone(),
                distractors: cfg
                    .colors
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| *i != color_idx)
                    .map(|(_, c)| c.clone())
                    .collect(),
            }
        }
        1 => {
            let color_idx = rng.below(cfg.colors.len());
            let color = &cfg.colors[color_idx];
            let count = scene.count_color(color_idx);
            Question {
                tokens: words(&format!("how many {color} things are there")),
                truth: count.to_string(),
                distractors: (0..=scene.cells.len())
                    .filter(|&n| n != count)
                    .map(|n| n.to_string())
                    .collect(),
            }
        }
        2 => {
            let pos = rng.below(scene.cells.len());
            let (row, col) = (pos / scene.side, pos % scene.side);
            let truth = match scene.cells[pos] {
                Some((shape, _)) => cfg.shapes[shape].clone(),
                None => "nothing".to_string(),
            };
            let mut pool: Vec<String> = cfg.shapes.clone();
            pool.push("nothing".to_string());
            Question {
                tokens: words(&format!("what shape is at row {row} column {col}")),
                truth: truth.clone(),
                distractors: pool.into_iter().filter(|a| *a != truth).collect(),
            }
        }
        _ => {
            let shape_idx = rng.below(cfg.shapes.len());
            let color_idx = rng.below(cfg.colors.len());
            let exists = scene
                .cells
                .iter()
                .flatten()
                .any(|&(s, c)| s == shape_idx && c == color_idx);
            let (truth, other) = if exists { ("yes", "no") } else { ("no", "yes") };
            Question {
                tokens: words(&format!(
                    "is there a {} {}",
                    cfg.colors[color_idx], cfg.shapes[shape_idx]
                )),
                truth: truth.to_string(),
                distractors: vec![other.to_string()],
            }
        }
    }
}

fn annotate(q: &Question, cfg: &GeneratorConfig, rng: &mut Rng) -> Vec<String> {
    (0..cfg.annotators)
        .map(|_| {
            if cfg.noise > 0.0 && rng.next_f64() < cfg.noise && !q.distractors.is_empty() {
                q.distractors[rng.below(q.distractors.len())].clone()
            } else {
                q.truth.clone()
            }
        })
        .collect()
}

/// Generates `n` samples. Each sample draws from its own seed-derived
/// stream, so shards generated separately agree with one full run.
pub fn generate(cfg: &GeneratorConfig, n: usize) -> Result<Vec<VqaSample>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("sample count must be >= 1".into()));
    }
    let base = Rng::new(cfg.seed);
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let mut rng = base.derive(i as u64 + 1);
        let cells = (0..cfg.grid_count())
            .map(|_| {
                if rng.next_f64() < cfg.fill_prob {
                    Some((rng.below(cfg.shapes.len()), rng.below(cfg.colors.len())))
                } else {
                    None
                }
            })
            .collect();
        let scene = Scene {
            side: cfg.grid_side,
            cells,
        };
        let question = build_question(&scene, cfg, &mut rng);
        let answers = annotate(&question, cfg, &mut rng);
        samples.push(VqaSample {
            id: i as u64,
            grid: scene.features(cfg),
            question: question.tokens,
            answers,
        });
    }
    Ok(samples)
}

/// The closed question-token vocabulary of a sample set: pad token
/// first, then sorted unique tokens.
pub fn token_vocab(samples: &[VqaSample]) -> Vec<String> {
    let mut tokens: std::collections::BTreeSet<String> = std::collections::BTreeSet::new();
    for s in samples {
        tokens.extend(s.question.iter().cloned());
    }
    let mut vocab = vec![PAD_TOKEN.to_string()];
    vocab.extend(tokens);
    vocab
}

pub fn max_question_len(samples: &[VqaSample]) -> usize {
    samples.iter().map(|s| s.question.len()).max().unwrap_or(0)
}

/// Line-delimited JSON, one sample per line.
pub fn write_dataset(samples: &[VqaSample], path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)
        .map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(file);
    for s in samples {
        let line = serde_json::to_string(s)
            .map_err(|e| Error::InvalidConfig(format!("serializing sample: {e}")))?;
        writeln!(w, "{line}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<VqaSample>> {
    let file = std::fs::File::open(path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let reader = BufReader::new(file);
    let mut samples = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let sample: VqaSample = serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
            line: i + 1,
            msg: e.to_string(),
        })?;
        samples.push(sample);
    }
    Ok(samples)
}
