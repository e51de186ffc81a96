//! Detection prompts built from dataset category names.
//!
//! A dataset's vocabulary is joined into one comma-separated prompt, tokenized
//! to a fixed-length sequence with a record of which sub-word tokens belong to
//! which category, and embedded once by a frozen language embedder.

mod embedder;
mod target;
mod tokenizer;

pub use embedder::{
    embed_prompt, CachedEmbedder, DatasetEmbedding, EmbedderKind, EmbedderSpec, LanguageEmbedder,
    PrecomputedEmbedder, StubEmbedder,
};
pub use target::{make_target_matrix, TargetMatrix};
pub use tokenizer::{tokenize_prompt, DetectionPrompt, StubTokenizer, TokenSpan, TOKENIZER_ID};

use ndarray::{s, Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Separator placed between category names in a prompt.
pub const SEPARATOR: &str = ", ";

/// Ordered category names of one dataset. Position in the list is the category index.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryVocabulary {
    pub dataset_name: String,
    categories: Vec<String>,
}

impl CategoryVocabulary {
    pub fn new(dataset_name: impl Into<String>, categories: Vec<String>) -> Result<Self> {
        let dataset_name = dataset_name.into();
        let mut seen = std::collections::HashSet::new();
        for name in &categories {
            let trimmed = name.trim();
            if trimmed.is_empty() {
                return Err(Error::data(format!(
                    "dataset `{dataset_name}` has an empty category name"
                )));
            }
            if trimmed != name || name.contains(',') {
                return Err(Error::data(format!(
                    "category name `{name}` in `{dataset_name}` must be trimmed and comma-free"
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::data(format!(
                    "duplicate category `{name}` in dataset `{dataset_name}`"
                )));
            }
        }
        Ok(Self {
            dataset_name,
            categories,
        })
    }

    /// Reads one category name per line, skipping blank lines.
    pub fn from_lines(dataset_name: impl Into<String>, text: &str) -> Result<Self> {
        let names = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        Self::new(dataset_name, names)
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn category_count(&self) -> usize {
        self.categories.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.categories.iter().position(|c| c == name)
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }
}

/// Joins the category names with `", "` in vocabulary order.
pub fn build_prompt(vocab: &CategoryVocabulary) -> Result<String> {
    if vocab.is_empty() {
        return Err(Error::data("empty vocabulary"));
    }
    Ok(vocab.categories().join(SEPARATOR))
}

/// Category scores as the mean token score over each category's span.
///
/// `token_scores: [N_q, L]`; returns `[N_q, category_count]`. Truncated
/// categories have no span and score 0.
pub fn pool_category_scores(token_scores: &Array2<f64>, prompt: &DetectionPrompt) -> Array2<f64> {
    let mut out = Array2::zeros((token_scores.nrows(), prompt.category_count()));
    for (c, span) in prompt.span_map.iter().enumerate() {
        if let Some(span) = span {
            let cols = token_scores.slice(s![.., span.clone()]);
            out.column_mut(c).assign(&cols.mean_axis(Axis(1)).expect("spans are non-empty"));
        }
    }
    out
}
