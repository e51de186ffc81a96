use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::config::{Precision, TrainConfig};
use super::eval::{
    compute_map, DatasetReport, EvalReport, GroundTruth, Prediction, PredictionRecord, RunMetadata,
    COCO_IOU_THRESHOLDS,
};
use super::optim::{AdamW, LrSchedule};
use crate::boxes::xyxy_to_xywh;
use crate::data::{
    make_sampler_plan, DatasetDescriptor, DescriptorSummary, LoadedDataset, SamplerPlan,
    SamplerSource,
};
use crate::detector::{AdaptationMode, Conditioning, Detector};
use crate::error::{Error, Result};
use crate::losses::{total_loss, ImageTargets, LossBreakdown};
use crate::nn::ops::sigmoid;
use crate::taxonomy::{
    build_prompt, pool_category_scores, tokenize_prompt, CategoryVocabulary, DatasetEmbedding,
    DetectionPrompt, LanguageEmbedder,
};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const WEIGHTS_FILE: &str = "weights.safetensors";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";

/// A prompt with its frozen embedding and the map from a dataset's labels
/// to the prompt's categories.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptEntry {
    pub prompt: DetectionPrompt,
    pub embedding: DatasetEmbedding,
    /// `label_map[dataset_label]` = prompt category, if the prompt has it.
    pub label_map: Vec<Option<usize>>,
}

impl PromptEntry {
    fn build(
        names: Vec<String>,
        dataset_categories: &[String],
        max_length: usize,
        embedder: &dyn LanguageEmbedder,
    ) -> Result<Self> {
        let vocab = CategoryVocabulary::new("prompt", names)?;
        let prompt = tokenize_prompt(&build_prompt(&vocab)?, max_length)?;
        let embedding = embedder.embed(&prompt)?;
        let label_map = dataset_categories
            .iter()
            .map(|c| vocab.index_of(c))
            .collect();
        Ok(Self {
            prompt,
            embedding,
            label_map,
        })
    }

    /// Inverse of `label_map`: prompt category → dataset label.
    pub fn prompt_to_dataset(&self) -> Vec<Option<usize>> {
        let mut inv = vec![None; self.prompt.category_count()];
        for (label, p) in self.label_map.iter().enumerate() {
            if let Some(p) = p {
                inv[*p] = Some(label);
            }
        }
        inv
    }
}

/// Names of every vocabulary in order, duplicates removed.
pub fn union_categories<'a>(vocabularies: impl IntoIterator<Item = &'a [String]>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for v in vocabularies {
        for c in v {
            if !out.contains(c) {
                out.push(c.clone());
            }
        }
    }
    out
}

/// The prompt a dataset is evaluated with under `mode`.
///
/// Only the global-embedding mode looks beyond the dataset's own vocabulary;
/// it needs the union over `all_vocabularies`.
pub fn eval_prompt_entry(
    mode: AdaptationMode,
    categories: &[String],
    all_vocabularies: &[Vec<String>],
    max_length: usize,
    embedder: &dyn LanguageEmbedder,
) -> Result<PromptEntry> {
    let names = match mode {
        AdaptationMode::GlobalEmbedding => {
            union_categories(all_vocabularies.iter().map(Vec::as_slice))
        }
        _ => categories.to_vec(),
    };
    PromptEntry::build(names, categories, max_length, embedder)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// 0-based index of the step these values come from.
    pub step: usize,
    pub loss_total: f64,
    pub loss_align: f64,
    pub loss_l1: f64,
    pub loss_giou: f64,
    pub lr: f64,
    pub grad_norm: f64,
    /// Images per source dataset in this step's batch.
    pub datasets: BTreeMap<String, usize>,
    /// Mean total loss per source dataset in this step's batch.
    pub dataset_loss: BTreeMap<String, f64>,
    pub degenerate_boxes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub step: usize,
    pub total_steps: usize,
    pub config: TrainConfig,
    pub config_hash: String,
    pub embedder_id: String,
    pub embedder_fingerprint: String,
    pub datasets: Vec<DescriptorSummary>,
    pub sampler_epoch: u64,
    pub sampler_cursor: usize,
    pub parameter_fingerprint: String,
}

impl CheckpointManifest {
    pub fn read(dir: &Path) -> Result<Self> {
        let p = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let m: Self = serde_json::from_str(&text)?;
        if m.format_version != CHECKPOINT_FORMAT_VERSION {
            return Err(Error::data(format!(
                "checkpoint format {} is not supported (expected {CHECKPOINT_FORMAT_VERSION})",
                m.format_version
            )));
        }
        Ok(m)
    }
}

/// Summary returned by [`Trainer::run`].
#[derive(Debug, Clone, PartialEq)]
pub struct TrainSummary {
    pub steps: usize,
    pub checkpoints: Vec<PathBuf>,
    pub frozen_hash_before: String,
    pub frozen_hash_after: String,
}

fn dtype_of(p: Precision) -> DType {
    match p {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    }
}

/// Loads every dataset listed in `config.datasets`.
pub fn load_datasets(config: &TrainConfig) -> Result<Vec<LoadedDataset>> {
    if config.datasets.is_empty() {
        return Err(Error::config("no datasets configured (`datasets`)"));
    }
    config
        .datasets
        .iter()
        .map(|d| LoadedDataset::load(&d.name, &d.path, config.model.image_size as u32))
        .collect()
}

/// Joint trainer over one or more datasets.
pub struct Trainer {
    pub config: TrainConfig,
    pub detector: Detector,
    pub datasets: Vec<LoadedDataset>,
    pub descriptors: Vec<DatasetDescriptor>,
    embedder: Box<dyn LanguageEmbedder>,
    dataset_index: HashMap<String, usize>,
    dataset_prompts: Vec<Arc<PromptEntry>>,
    instance_prompts: HashMap<(usize, Vec<usize>), Arc<PromptEntry>>,
    optimizer: AdamW,
    schedule: LrSchedule,
    step: usize,
    epoch: u64,
    cursor: usize,
    plan: SamplerPlan,
    history: Vec<MetricsRecord>,
}

impl Trainer {
    pub fn new(config: TrainConfig, datasets: Vec<LoadedDataset>) -> Result<Self> {
        config.validate()?;
        if datasets.is_empty() {
            return Err(Error::config("training needs at least one dataset"));
        }
        let image_size = config.model.image_size as u32;
        if let Some(d) = datasets.iter().find(|d| d.image_size != image_size) {
            return Err(Error::config(format!(
                "dataset `{}` was loaded at {}px, model.image_size is {image_size}",
                d.name, d.image_size
            )));
        }
        let embedder = config.embedder.build(config.model.d)?;
        let max_length = config.model.max_length;
        let descriptors = datasets
            .iter()
            .map(|d| {
                DatasetDescriptor::build(d.vocabulary.clone(), &d.records, max_length, embedder.as_ref())
            })
            .collect::<Result<Vec<_>>>()?;
        let vocabularies: Vec<Vec<String>> = datasets
            .iter()
            .map(|d| d.vocabulary.categories().to_vec())
            .collect();
        let dataset_prompts = datasets
            .iter()
            .map(|d| {
                eval_prompt_entry(
                    config.adaptation.mode,
                    d.vocabulary.categories(),
                    &vocabularies,
                    max_length,
                    embedder.as_ref(),
                )
                .map(Arc::new)
            })
            .collect::<Result<Vec<_>>>()?;
        let detector = Detector::new(
            &config.detector(),
            config.embedder.embed_dim,
            dtype_of(config.train.precision),
            config.train.seed,
        )?;
        let dataset_index = datasets
            .iter()
            .enumerate()
            .map(|(i, d)| (d.name.clone(), i))
            .collect::<HashMap<_, _>>();
        if dataset_index.len() != datasets.len() {
            return Err(Error::config("dataset names must be unique"));
        }
        let optimizer = AdamW::new(&config.optimizer);
        let schedule = LrSchedule::new(&config.optimizer, config.train.steps);
        let mut trainer = Self {
            plan: SamplerPlan {
                epoch_schedule: Vec::new(),
                per_image_repeat: BTreeMap::new(),
                seed: config.sampler.seed,
            },
            config,
            detector,
            datasets,
            descriptors,
            embedder,
            dataset_index,
            dataset_prompts,
            instance_prompts: HashMap::new(),
            optimizer,
            schedule,
            step: 0,
            epoch: 0,
            cursor: 0,
            history: Vec::new(),
        };
        trainer.plan = trainer.make_plan(0)?;
        Ok(trainer)
    }

    fn make_plan(&self, epoch: u64) -> Result<SamplerPlan> {
        let sources: Vec<SamplerSource<'_>> = self
            .datasets
            .iter()
            .zip(&self.descriptors)
            .map(|(d, desc)| SamplerSource {
                name: &d.name,
                records: &d.records,
                category_frequencies: &desc.category_frequencies,
            })
            .collect();
        make_sampler_plan(&sources, self.config.train.batch_size, &self.config.sampler, epoch)
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn history(&self) -> &[MetricsRecord] {
        &self.history
    }

    pub fn schedule(&self) -> &LrSchedule {
        &self.schedule
    }

    pub fn embedder(&self) -> &dyn LanguageEmbedder {
        self.embedder.as_ref()
    }

    /// Hash over the embedder's frozen weights and every cached dataset embedding.
    pub fn frozen_state_hash(&self) -> String {
        let mut parts = vec![self.embedder.fingerprint()];
        parts.extend(self.descriptors.iter().map(|d| d.embedding.content_hash()));
        parts.extend(self.dataset_prompts.iter().map(|p| p.embedding.content_hash()));
        parts.join(":")
    }

    /// Prompt used for training image `record` of dataset `ds`.
    pub fn training_prompt(&mut self, ds: usize, record: usize) -> Result<Arc<PromptEntry>> {
        if self.config.adaptation.mode != AdaptationMode::InstanceEmbedding {
            return Ok(self.dataset_prompts[ds].clone());
        }
        let mut present = self.datasets[ds].records[record].labels.clone();
        present.sort_unstable();
        present.dedup();
        if present.is_empty() {
            return Ok(self.dataset_prompts[ds].clone());
        }
        let key = (ds, present);
        if let Some(e) = self.instance_prompts.get(&key) {
            return Ok(e.clone());
        }
        let cats = self.datasets[ds].vocabulary.categories();
        let names = key.1.iter().map(|&l| cats[l].clone()).collect();
        let entry = Arc::new(PromptEntry::build(
            names,
            cats,
            self.config.model.max_length,
            self.embedder.as_ref(),
        )?);
        self.instance_prompts.insert(key, entry.clone());
        Ok(entry)
    }

    fn next_batch(&mut self) -> Result<Vec<(usize, usize)>> {
        let mut out = Vec::with_capacity(self.config.train.batch_size);
        while out.len() < self.config.train.batch_size {
            if self.cursor >= self.plan.epoch_schedule.len() {
                self.epoch += 1;
                self.cursor = 0;
                self.plan = self.make_plan(self.epoch)?;
            }
            let e = &self.plan.epoch_schedule[self.cursor];
            self.cursor += 1;
            let ds = self.dataset_index[&e.dataset];
            let pos = self.datasets[ds]
                .position(e.image_id)
                .ok_or_else(|| Error::data(format!("image {} missing from `{}`", e.image_id, e.dataset)))?;
            out.push((ds, pos));
        }
        Ok(out)
    }

    fn images_tensor(&self, items: &[(usize, usize)]) -> Result<Tensor> {
        let s = self.config.model.image_size;
        let mut flat = Vec::with_capacity(items.len() * 3 * s * s);
        for &(ds, pos) in items {
            flat.extend_from_slice(&self.datasets[ds].pixels[pos]);
        }
        Ok(Tensor::from_vec(flat, (items.len(), 3, s, s), &Device::Cpu)?
            .to_dtype(self.detector.dtype())?)
    }

    /// One optimizer step. Returns the step's metrics (also appended to the history).
    pub fn train_step(&mut self) -> Result<MetricsRecord> {
        let step = self.step;
        let items = self.next_batch()?;
        let entries = items
            .iter()
            .map(|&(ds, pos)| self.training_prompt(ds, pos))
            .collect::<Result<Vec<_>>>()?;
        let images = self.images_tensor(&items)?;
        let embeddings: Vec<&DatasetEmbedding> = entries.iter().map(|e| &e.embedding).collect();
        let cond = Conditioning::new(&embeddings, self.detector.dtype(), &Device::Cpu)?;
        let out = self.detector.forward(&images, &cond)?;

        let mut total: Option<Tensor> = None;
        let mut parts = LossBreakdown::default();
        let mut per_ds: BTreeMap<String, (usize, f64)> = BTreeMap::new();
        for (b, (&(ds, pos), entry)) in items.iter().zip(&entries).enumerate() {
            let rec = &self.datasets[ds].records[pos];
            let mut targets = ImageTargets::default();
            for (bx, &l) in rec.normalized_boxes().iter().zip(&rec.labels) {
                if let Some(p) = entry.label_map.get(l).copied().flatten() {
                    targets.boxes.push(*bx);
                    targets.labels.push(p);
                }
            }
            let (loss, p) = total_loss(
                &out.image_stages(b)?,
                &targets,
                &entry.prompt,
                &cond.valid_mask.get(b)?,
                &self.config.loss,
                &self.datasets[ds].name,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!(
                    "step {step}, dataset `{}`, image {}: {msg}",
                    self.datasets[ds].name, rec.image_id
                )),
                other => other,
            })?;
            parts.accumulate(&p);
            let slot = per_ds.entry(self.datasets[ds].name.clone()).or_default();
            slot.0 += 1;
            slot.1 += p.total;
            total = Some(match total {
                Some(t) => (t + loss)?,
                None => loss,
            });
        }
        let scale = 1.0 / items.len() as f64;
        let loss = (total.expect("non-empty batch") * scale)?;
        let grads = loss.backward()?;
        let lr = self.schedule.lr_at(step);
        let grad_norm = self
            .optimizer
            .step(&self.detector.params, &grads, lr)
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Numeric(format!("step {step}: {msg}")),
                other => other,
            })?;
        let parts = parts.scale(scale);
        let record = MetricsRecord {
            step,
            loss_total: parts.total,
            loss_align: parts.align,
            loss_l1: parts.l1,
            loss_giou: parts.giou,
            lr,
            grad_norm,
            datasets: per_ds.iter().map(|(k, v)| (k.clone(), v.0)).collect(),
            dataset_loss: per_ds
                .into_iter()
                .map(|(k, (n, s))| (k, s / n as f64))
                .collect(),
            degenerate_boxes: out.degenerate_boxes,
        };
        self.history.push(record.clone());
        self.step += 1;
        Ok(record)
    }

    /// Whether step `step` (0-based) goes to the metrics log: every
    /// `metrics_every` steps, the last step, and both sides of each lr milestone.
    pub fn logs_step(&self, step: usize) -> bool {
        step % self.config.train.metrics_every == 0
            || step + 1 == self.config.train.steps
            || self.schedule.is_milestone(step)
            || self.schedule.is_milestone(step + 1)
    }

    /// Runs the remaining steps. With an output directory, appends to
    /// `metrics.jsonl` and checkpoints at each milestone and at the end.
    pub fn run(&mut self, out_dir: Option<&Path>) -> Result<TrainSummary> {
        let frozen_hash_before = self.frozen_state_hash();
        let mut writer = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let p = dir.join(METRICS_FILE);
                let f = OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?;
                Some((BufWriter::new(f), p))
            }
            None => None,
        };
        let mut checkpoints = Vec::new();
        while self.step < self.config.train.steps {
            let rec = self.train_step()?;
            if let Some((w, p)) = writer.as_mut() {
                if self.logs_step(rec.step) {
                    writeln!(w, "{}", serde_json::to_string(&rec)?).map_err(|e| Error::io(&*p, e))?;
                    w.flush().map_err(|e| Error::io(&*p, e))?;
                }
            }
            if rec.step % 50 == 0 {
                log::info!(
                    "step {} loss {:.4} (align {:.4}, l1 {:.4}, giou {:.4}) lr {:.2e}",
                    rec.step,
                    rec.loss_total,
                    rec.loss_align,
                    rec.loss_l1,
                    rec.loss_giou,
                    rec.lr
                );
            }
            if let Some(dir) = out_dir {
                if self.schedule.is_milestone(self.step) || self.step == self.config.train.steps {
                    checkpoints.push(self.save_checkpoint(&dir.join("checkpoints"))?);
                }
            }
        }
        let frozen_hash_after = self.frozen_state_hash();
        if frozen_hash_after != frozen_hash_before {
            return Err(Error::Numeric("frozen language embeddings changed during training".into()));
        }
        Ok(TrainSummary {
            steps: self.step,
            checkpoints,
            frozen_hash_before,
            frozen_hash_after,
        })
    }

    pub fn manifest(&self) -> Result<CheckpointManifest> {
        Ok(CheckpointManifest {
            format_version: CHECKPOINT_FORMAT_VERSION,
            step: self.step,
            total_steps: self.config.train.steps,
            config: self.config.clone(),
            config_hash: self.config.hash()?,
            embedder_id: self.embedder.id(),
            embedder_fingerprint: self.embedder.fingerprint(),
            datasets: self.descriptors.iter().map(DatasetDescriptor::summary).collect(),
            sampler_epoch: self.epoch,
            sampler_cursor: self.cursor,
            parameter_fingerprint: self.detector.params.fingerprint()?,
        })
    }

    /// Writes `<root>/step-NNNNNN/{weights,optimizer}.safetensors` and the manifest.
    pub fn save_checkpoint(&self, root: &Path) -> Result<PathBuf> {
        let dir = root.join(format!("step-{:06}", self.step));
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        self.detector.params.save(&dir.join(WEIGHTS_FILE))?;
        self.optimizer.save(&dir.join(OPTIMIZER_FILE))?;
        let p = dir.join(MANIFEST_FILE);
        let f = File::create(&p).map_err(|e| Error::io(&p, e))?;
        serde_json::to_writer_pretty(f, &self.manifest()?)?;
        Ok(dir)
    }

    /// Restores a trainer from a checkpoint; `datasets` must match the manifest.
    pub fn resume(checkpoint: &Path, datasets: Vec<LoadedDataset>) -> Result<Self> {
        let manifest = CheckpointManifest::read(checkpoint)?;
        let mut t = Self::new(manifest.config.clone(), datasets)?;
        let summaries: Vec<DescriptorSummary> =
            t.descriptors.iter().map(DatasetDescriptor::summary).collect();
        if summaries != manifest.datasets {
            return Err(Error::data(
                "datasets differ from those recorded in the checkpoint manifest",
            ));
        }
        if t.embedder.id() != manifest.embedder_id {
            return Err(Error::EmbedderMismatch {
                expected: manifest.embedder_id,
                found: t.embedder.id(),
            });
        }
        t.detector.params.load(&checkpoint.join(WEIGHTS_FILE))?;
        t.optimizer.load(&checkpoint.join(OPTIMIZER_FILE))?;
        t.step = manifest.step;
        t.epoch = manifest.sampler_epoch;
        t.cursor = manifest.sampler_cursor;
        t.plan = t.make_plan(t.epoch)?;
        Ok(t)
    }

    /// Evaluates on `dataset` with the prompt its name maps to in training (or
    /// its own vocabulary when unseen).
    pub fn evaluate(
        &self,
        dataset: &LoadedDataset,
        max_images: usize,
    ) -> Result<(DatasetReport, Vec<PredictionRecord>)> {
        let vocabularies: Vec<Vec<String>> = self
            .datasets
            .iter()
            .map(|d| d.vocabulary.categories().to_vec())
            .collect();
        let entry = eval_prompt_entry(
            self.config.adaptation.mode,
            dataset.vocabulary.categories(),
            &vocabularies,
            self.config.model.max_length,
            self.embedder.as_ref(),
        )?;
        evaluate_dataset(&self.detector, &entry, dataset, max_images)
    }
}

/// Images per forward pass during evaluation.
const EVAL_BATCH: usize = 8;

/// Runs the detector on (up to `max_images` of) `dataset` and scores the
/// detections with [`compute_map`]. Only categories of `dataset` can be emitted.
pub fn evaluate_dataset(
    detector: &Detector,
    entry: &PromptEntry,
    dataset: &LoadedDataset,
    max_images: usize,
) -> Result<(DatasetReport, Vec<PredictionRecord>)> {
    let n = if max_images == 0 {
        dataset.len()
    } else {
        max_images.min(dataset.len())
    };
    let s = dataset.image_size as usize;
    let to_dataset = entry.prompt_to_dataset();
    let top_k = detector.config.model.top_k;
    let categories = dataset.vocabulary.categories();
    let mut preds = Vec::new();
    let mut records = Vec::new();
    for start in (0..n).step_by(EVAL_BATCH) {
        let end = (start + EVAL_BATCH).min(n);
        let b = end - start;
        let mut flat = Vec::with_capacity(b * 3 * s * s);
        for i in start..end {
            flat.extend_from_slice(&dataset.pixels[i]);
        }
        let images = Tensor::from_vec(flat, (b, 3, s, s), &Device::Cpu)?.to_dtype(detector.dtype())?;
        let embeddings = vec![&entry.embedding; b];
        let cond = Conditioning::new(&embeddings, detector.dtype(), &Device::Cpu)?;
        let out = detector.forward(&images, &cond)?;
        let last = out.stages.last().expect("detector has stages");
        let logits = last.logits.as_ref().expect("final stage classifies");
        let scores = sigmoid(logits)?.broadcast_mul(&cond.valid_mask)?.to_dtype(DType::F64)?;
        let boxes = last.boxes.to_dtype(DType::F64)?;
        let (_, nq, l) = scores.dims3()?;
        for bi in 0..b {
            let rec = &dataset.records[start + bi];
            let token_scores =
                Array2::from_shape_vec((nq, l), scores.get(bi)?.flatten_all()?.to_vec1::<f64>()?)
                    .map_err(|e| Error::shape("evaluate", e.to_string()))?;
            let cat_scores = pool_category_scores(&token_scores, &entry.prompt);
            let bx = boxes.get(bi)?.to_vec2::<f64>()?;
            let (w, h) = (f64::from(rec.width), f64::from(rec.height));
            let mut dets: Vec<(usize, usize, f64)> = cat_scores
                .indexed_iter()
                .filter_map(|((q, c), &sc)| to_dataset[c].map(|dc| (q, dc, sc)))
                .collect();
            dets.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
            dets.truncate(top_k);
            for (q, c, score) in dets {
                let bbox = [bx[q][0] * w, bx[q][1] * h, bx[q][2] * w, bx[q][3] * h];
                if !(bbox[2] > bbox[0] && bbox[3] > bbox[1]) {
                    continue;
                }
                preds.push(Prediction {
                    image_id: rec.image_id,
                    category: c,
                    score,
                    bbox,
                });
                records.push(PredictionRecord {
                    image_id: rec.image_id,
                    dataset: dataset.name.clone(),
                    category: categories[c].clone(),
                    category_id: c as u64 + 1,
                    score,
                    bbox: xyxy_to_xywh(bbox),
                });
            }
        }
    }
    let gts: Vec<GroundTruth> = dataset.records[..n]
        .iter()
        .flat_map(|r| {
            r.boxes.iter().zip(&r.labels).map(|(b, &l)| GroundTruth {
                image_id: r.image_id,
                category: l,
                bbox: *b,
            })
        })
        .collect();
    let m = compute_map(&preds, &gts, categories.len(), &COCO_IOU_THRESHOLDS)?;
    Ok((DatasetReport::from_map(&dataset.name, n, categories, &m), records))
}

/// Loads a checkpoint and evaluates each dataset with its own prompt.
///
/// `embedder` is the embedder the caller intends to use; its id must match the
/// one the checkpoint was trained with.
pub fn evaluate_checkpoint(
    checkpoint: &Path,
    datasets: &[LoadedDataset],
    embedder: &crate::taxonomy::EmbedderSpec,
    max_images: usize,
) -> Result<(EvalReport, Vec<PredictionRecord>)> {
    let manifest = CheckpointManifest::read(checkpoint)?;
    if embedder.id() != manifest.embedder_id {
        return Err(Error::EmbedderMismatch {
            expected: manifest.embedder_id,
            found: embedder.id(),
        });
    }
    let config = &manifest.config;
    let built = embedder.build(config.model.d)?;
    let detector = Detector::new(
        &config.detector(),
        embedder.embed_dim,
        dtype_of(config.train.precision),
        config.train.seed,
    )?;
    detector.params.load(&checkpoint.join(WEIGHTS_FILE))?;
    let vocabularies: Vec<Vec<String>> =
        manifest.datasets.iter().map(|d| d.categories.clone()).collect();
    let mut report = EvalReport {
        metadata: RunMetadata {
            config_hash: manifest.config_hash.clone(),
            embedder_id: manifest.embedder_id.clone(),
            step: manifest.step,
            checkpoint: Some(checkpoint.display().to_string()),
        },
        ..Default::default()
    };
    let mut all = Vec::new();
    for ds in datasets {
        if ds.image_size as usize != config.model.image_size {
            return Err(Error::config(format!(
                "dataset `{}` loaded at {}px, checkpoint expects {}",
                ds.name, ds.image_size, config.model.image_size
            )));
        }
        let entry = eval_prompt_entry(
            config.adaptation.mode,
            ds.vocabulary.categories(),
            &vocabularies,
            config.model.max_length,
            built.as_ref(),
        )?;
        let (r, preds) = evaluate_dataset(&detector, &entry, ds, max_images)?;
        report.datasets.insert(ds.name.clone(), r);
        all.extend(preds);
    }
    Ok((report, all))
}

/// Writes predictions as JSON lines.
pub fn write_predictions(path: &Path, preds: &[PredictionRecord]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for p in preds {
        writeln!(w, "{}", serde_json::to_string(p)?).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a metrics log written by [`Trainer::run`].
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}
