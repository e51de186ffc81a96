use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::AnnotationRecord;
use crate::error::{Error, Result};

/// Per-category repeat factor `max(1, sqrt(t / f_c))`.
pub fn category_repeat_factors(category_frequencies: &[f64], threshold: f64, size: usize) -> Result<Vec<f64>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::config(format!(
            "rebalance threshold must be in (0, 1), got {threshold}"
        )));
    }
    let floor = 1.0 / size.max(1) as f64;
    Ok(category_frequencies
        .iter()
        .map(|&f| {
            let f = if f > 0.0 { f } else { floor };
            (threshold / f).sqrt().max(1.0)
        })
        .collect())
}

/// Per-image repeat factor: the maximum factor over the image's categories,
/// 1 for images without annotations.
pub fn repeat_factor_weights(
    category_frequencies: &[f64],
    records: &[AnnotationRecord],
    threshold: f64,
) -> Result<Vec<f64>> {
    let per_cat = category_repeat_factors(category_frequencies, threshold, records.len())?;
    records
        .iter()
        .map(|r| {
            r.labels.iter().try_fold(1.0f64, |acc, &l| {
                per_cat
                    .get(l)
                    .map(|&f| acc.max(f))
                    .ok_or_else(|| Error::data(format!("label {l} outside vocabulary")))
            })
        })
        .collect()
}

/// One dataset as seen by the sampler.
#[derive(Debug, Clone, Copy)]
pub struct SamplerSource<'a> {
    pub name: &'a str,
    pub records: &'a [AnnotationRecord],
    pub category_frequencies: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerConfig {
    pub seed: u64,
    pub rebalance_threshold: f64,
    /// Enables per-image repeat factors.
    pub balancing: bool,
    /// Keeps every batch within one dataset.
    pub homogeneous_batches: bool,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rebalance_threshold: 0.01,
            balancing: false,
            homogeneous_batches: false,
        }
    }
}

/// One scheduled training item.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ScheduleEntry {
    pub dataset: String,
    pub image_id: u64,
}

/// Deterministic interleaving of all datasets' images for one schedule pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerPlan {
    pub epoch_schedule: Vec<ScheduleEntry>,
    /// Repeat factor per `(dataset, image_id)` before rounding.
    pub per_image_repeat: BTreeMap<(String, u64), f64>,
    pub seed: u64,
}

/// Builds the shuffled union of every dataset's (repeated) images.
///
/// Fractional repeat factors are rounded stochastically under `seed`.
pub fn make_sampler_plan(
    sources: &[SamplerSource<'_>],
    batch_size: usize,
    config: &SamplerConfig,
    epoch: u64,
) -> Result<SamplerPlan> {
    if sources.is_empty() {
        return Err(Error::config("sampler needs at least one dataset"));
    }
    if batch_size == 0 {
        return Err(Error::config("batch size must be positive"));
    }
    let seed = config.seed;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x2545_f491_4f6c_dd1d));
    let mut per_image_repeat = BTreeMap::new();
    let mut per_dataset: Vec<Vec<ScheduleEntry>> = Vec::with_capacity(sources.len());
    for src in sources {
        if src.records.is_empty() {
            return Err(Error::data(format!("dataset `{}` is empty", src.name)));
        }
        let factors = if config.balancing {
            repeat_factor_weights(src.category_frequencies, src.records, config.rebalance_threshold)?
        } else {
            vec![1.0; src.records.len()]
        };
        let mut entries = Vec::new();
        for (rec, &r) in src.records.iter().zip(&factors) {
            per_image_repeat.insert((src.name.to_string(), rec.image_id), r);
            let whole = r.floor();
            let frac = r - whole;
            let copies = whole as usize + usize::from(frac > 0.0 && rng.gen::<f64>() < frac);
            for _ in 0..copies {
                entries.push(ScheduleEntry {
                    dataset: src.name.to_string(),
                    image_id: rec.image_id,
                });
            }
        }
        per_dataset.push(entries);
    }
    let epoch_schedule = if config.homogeneous_batches {
        let mut batches: Vec<Vec<ScheduleEntry>> = Vec::new();
        for mut entries in per_dataset {
            entries.shuffle(&mut rng);
            batches.extend(entries.chunks(batch_size).map(<[_]>::to_vec));
        }
        batches.shuffle(&mut rng);
        batches.into_iter().flatten().collect()
    } else {
        let mut all: Vec<ScheduleEntry> = per_dataset.into_iter().flatten().collect();
        all.shuffle(&mut rng);
        all
    };
    Ok(SamplerPlan {
        epoch_schedule,
        per_image_repeat,
        seed,
    })
}
