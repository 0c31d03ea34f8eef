//! Bag-of-words prompt encoder over a closed phantom vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Result, VadeError};
use crate::nn::{init, ParamId, ParamSet, Tape, Var};
use crate::tensor::{Real, SeededRng};

pub const NULL_ID: usize = 0;
pub const UNK_ID: usize = 1;

pub const CLASS_WORDS: [&str; 6] = [
    "normal",
    "opacity",
    "haze",
    "pneumonia",
    "cardiomegaly",
    "carcinoma",
];
pub const MODIFIER_WORDS: [&str; 6] = ["left", "right", "large", "small", "severe", "mild"];
pub const FILLER_WORDS: [&str; 4] = ["chest", "scan", "lung", "x-ray"];
pub const STOP_WORDS: [&str; 6] = ["on", "the", "a", "of", "in", "with"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub tokens: Vec<String>,
    /// Drop stop words instead of mapping them to the unknown token.
    pub drop_stop_words: bool,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut tokens = vec!["<null>".to_string(), "<unk>".to_string()];
        tokens.extend(
            CLASS_WORDS
                .iter()
                .chain(&MODIFIER_WORDS)
                .chain(&FILLER_WORDS)
                .map(|s| s.to_string()),
        );
        Vocab {
            tokens,
            drop_stop_words: true,
        }
    }
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.tokens.iter().position(|t| t == word)
    }

    /// Lowercases, splits on whitespace and punctuation (keeping `-` inside
    /// words) and maps out-of-vocabulary words to the unknown token. An empty
    /// prompt becomes `[null]`.
    pub fn tokenize(&self, prompt: &str) -> Vec<usize> {
        let lower = prompt.to_lowercase();
        let ids: Vec<usize> = lower
            .split(|c: char| !(c.is_alphanumeric() || c == '-'))
            .map(|w| w.trim_matches('-'))
            .filter(|w| !w.is_empty())
            .filter(|w| !(self.drop_stop_words && STOP_WORDS.contains(w)))
            .map(|w| self.id(w).filter(|&i| i > UNK_ID).unwrap_or(UNK_ID))
            .collect();
        if ids.is_empty() {
            vec![NULL_ID]
        } else {
            ids
        }
    }

    pub fn words(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.tokens.get(i).map(String::as_str).unwrap_or("<?>"))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TextConfig {
    pub embed_dim: usize,
    pub cond_dim: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig {
            embed_dim: 32,
            cond_dim: 32,
        }
    }
}

/// Parameter handles of the encoder: table `[vocab, embed_dim]`, then an
/// affine projection to `cond_dim`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoder {
    pub config: TextConfig,
    pub table: ParamId,
    pub proj_w: ParamId,
    pub proj_b: ParamId,
}

impl TextEncoder {
    pub fn new<T: Real>(
        params: &mut ParamSet<T>,
        vocab_len: usize,
        config: TextConfig,
        rng: &mut SeededRng,
    ) -> Self {
        let table = params.add(
            "text.table",
            init::scaled_normal(rng, &[vocab_len, config.embed_dim], 1, 1.0),
        );
        let proj_w = params.add(
            "text.proj.w",
            init::scaled_normal(
                rng,
                &[config.cond_dim, config.embed_dim],
                config.embed_dim,
                1.0,
            ),
        );
        let proj_b = params.add(
            "text.proj.b",
            crate::tensor::Tensor::zeros(&[config.cond_dim]),
        );
        TextEncoder {
            config,
            table,
            proj_w,
            proj_b,
        }
    }

    /// Mean of token embeddings followed by the projection.
    pub fn embed<T: Real>(&self, tape: &mut Tape<'_, T>, ids: &[usize]) -> Result<Var> {
        let pooled = tape.mean_rows(self.table, ids)?;
        tape.linear(pooled, self.proj_w, self.proj_b)
    }

    pub fn null_condition<T: Real>(&self, tape: &mut Tape<'_, T>) -> Result<Var> {
        self.embed(tape, &[NULL_ID])
    }

    /// Evaluates an embedding outside of any larger graph.
    pub fn embed_value<T: Real>(&self, params: &ParamSet<T>, ids: &[usize]) -> Result<Vec<T>> {
        let mut tape = Tape::inference(params);
        let v = self.embed(&mut tape, ids)?;
        Ok(tape.value(v).data().to_vec())
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(&x, &y)| x as f64 * y as f64).sum();
    let na: f64 = a.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}

/// Validates that every id indexes the vocabulary.
pub fn check_ids(ids: &[usize], vocab: &Vocab) -> Result<()> {
    match ids.iter().find(|&&i| i >= vocab.len()) {
        Some(&id) => Err(VadeError::TokenOutOfRange {
            id,
            len: vocab.len(),
        }),
        None => Ok(()),
    }
}
