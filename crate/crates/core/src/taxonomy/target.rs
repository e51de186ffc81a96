use ndarray::Array2;

use super::DetectionPrompt;
use crate::error::{Error, Result};
use crate::losses::Assignment;

/// Binary region-word target over prompt tokens, one row per query.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMatrix {
    pub t_hat: Array2<f64>,
}

impl TargetMatrix {
    pub fn zeros(num_queries: usize, token_count: usize) -> Self {
        Self {
            t_hat: Array2::zeros((num_queries, token_count)),
        }
    }

    pub fn num_queries(&self) -> usize {
        self.t_hat.nrows()
    }

    pub fn token_count(&self) -> usize {
        self.t_hat.ncols()
    }
}

/// Sets row `i` to 1 on the token span of the ground-truth category matched to
/// query `i`. Unmatched queries keep all-zero rows; separators and pads are
/// never inside a span, so they stay 0.
pub fn make_target_matrix(
    gt_labels: &[usize],
    prompt: &DetectionPrompt,
    num_queries: usize,
    assignment: &Assignment,
    dataset: &str,
) -> Result<TargetMatrix> {
    let mut target = TargetMatrix::zeros(num_queries, prompt.token_count());
    for &(query, gt) in &assignment.pairs {
        let label = *gt_labels
            .get(gt)
            .ok_or_else(|| Error::data(format!("assignment references gt {gt} out of range")))?;
        if query >= num_queries {
            return Err(Error::data(format!(
                "assignment references query {query} of {num_queries}"
            )));
        }
        let span = prompt.span(label).ok_or_else(|| Error::TruncatedCategory {
            dataset: dataset.to_string(),
            category: prompt
                .category_names
                .get(label)
                .cloned()
                .unwrap_or_else(|| format!("#{label}")),
        })?;
        for j in span.clone() {
            target.t_hat[[query, j]] = 1.0;
        }
    }
    Ok(target)
}
