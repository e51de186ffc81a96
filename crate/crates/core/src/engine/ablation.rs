use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::train::Trainer;
use crate::data::LoadedDataset;
use crate::error::{Error, Result};

/// Named experiment grids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationPreset {
    /// Prompt strategy: instance / global / query adaptation.
    Modes,
    /// Number of object queries.
    Queries,
    /// Where queries are adapted: proposal stage, decoder, both, neither.
    Components,
    /// Number of decoder stages.
    Layers,
    /// Dynamic-convolution kernel size.
    Kernels,
    /// Prompt length in tokens.
    Lengths,
    /// Joint training over dataset combinations.
    Datasets,
}

impl AblationPreset {
    pub const ALL: [AblationPreset; 7] = [
        AblationPreset::Modes,
        AblationPreset::Queries,
        AblationPreset::Components,
        AblationPreset::Layers,
        AblationPreset::Kernels,
        AblationPreset::Lengths,
        AblationPreset::Datasets,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            AblationPreset::Modes => "modes",
            AblationPreset::Queries => "queries",
            AblationPreset::Components => "components",
            AblationPreset::Layers => "layers",
            AblationPreset::Kernels => "kernels",
            AblationPreset::Lengths => "lengths",
            AblationPreset::Datasets => "datasets",
        }
    }
}

impl std::str::FromStr for AblationPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|p| p.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Self::ALL.iter().map(AblationPreset::as_str).collect();
                Error::config(format!("unknown ablation grid `{s}` (expected one of {names:?})"))
            })
    }
}

/// One trained-and-evaluated configuration of a grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub table: String,
    pub row: String,
    pub overrides: Vec<String>,
    /// Datasets trained on; empty means all.
    pub datasets: Vec<String>,
}

fn cell(table: AblationPreset, row: &str, overrides: &[&str]) -> AblationCell {
    AblationCell {
        table: table.as_str().to_string(),
        row: row.to_string(),
        overrides: overrides.iter().map(|s| s.to_string()).collect(),
        datasets: Vec::new(),
    }
}

/// Rows of `preset`. The dataset grid joins every combination of two or more
/// of `dataset_names`.
pub fn preset_cells(preset: AblationPreset, dataset_names: &[String]) -> Vec<AblationCell> {
    use AblationPreset as P;
    match preset {
        P::Modes => vec![
            cell(preset, "instance-embedding", &["adaptation.mode=\"instance-embedding\""]),
            cell(preset, "global-embedding", &["adaptation.mode=\"global-embedding\""]),
            cell(preset, "query-adaptation", &["adaptation.mode=\"query-adaptation\""]),
        ],
        P::Queries => [100, 300]
            .iter()
            .map(|n| cell(preset, &format!("{n} queries"), &[&format!("queries.count={n}")]))
            .collect(),
        P::Components => vec![
            cell(preset, "no adaptation", &["adaptation.rpn=false", "adaptation.decoder=false"]),
            cell(preset, "rpn", &["adaptation.rpn=true", "adaptation.decoder=false"]),
            cell(preset, "decoder", &["adaptation.rpn=false", "adaptation.decoder=true"]),
            cell(preset, "rpn + decoder", &["adaptation.rpn=true", "adaptation.decoder=true"]),
        ],
        P::Layers => [2, 4, 6, 8]
            .iter()
            .map(|n| cell(preset, &n.to_string(), &[&format!("model.stages={n}")]))
            .collect(),
        P::Kernels => [1, 3, 5]
            .iter()
            .map(|k| cell(preset, &k.to_string(), &[&format!("dyconv.kernel_size={k}")]))
            .collect(),
        P::Lengths => [128, 256, 512]
            .iter()
            .map(|l| cell(preset, &l.to_string(), &[&format!("model.max_length={l}")]))
            .collect(),
        P::Datasets => {
            let n = dataset_names.len();
            let mut combos: Vec<Vec<String>> = (1u32..(1 << n))
                .filter(|m| m.count_ones() >= 2)
                .map(|m| {
                    (0..n)
                        .filter(|i| m & (1 << i) != 0)
                        .map(|i| dataset_names[i].clone())
                        .collect()
                })
                .collect();
            combos.sort_by(|a, b| a.len().cmp(&b.len()).then(a.cmp(b)));
            combos
                .into_iter()
                .map(|names| AblationCell {
                    table: preset.as_str().to_string(),
                    row: names.join("+"),
                    overrides: Vec::new(),
                    datasets: names,
                })
                .collect()
        }
    }
}

/// Result row; AP values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub table: String,
    pub row: String,
    pub datasets: Vec<String>,
    /// `ok` or `failed: <code>: <message>`.
    pub status: String,
    pub final_loss: Option<f64>,
    pub ap: Vec<(String, f64)>,
    pub mean_ap: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// Dataset names with an AP column, in first-seen order.
    fn ap_columns(&self) -> Vec<String> {
        let mut seen = BTreeSet::new();
        let mut cols = Vec::new();
        for r in &self.rows {
            for (d, _) in &r.ap {
                if seen.insert(d.clone()) {
                    cols.push(d.clone());
                }
            }
        }
        cols
    }

    pub fn to_csv(&self) -> Result<String> {
        let cols = self.ap_columns();
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec![
            "table".to_string(),
            "row".into(),
            "datasets".into(),
            "status".into(),
            "final_loss".into(),
            "mean_ap".into(),
        ];
        header.extend(cols.iter().map(|c| format!("ap_{c}")));
        let csv_err = |e: csv::Error| Error::data(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![
                r.table.clone(),
                r.row.clone(),
                r.datasets.join("+"),
                r.status.clone(),
                fmt(r.final_loss),
                fmt(r.mean_ap),
            ];
            rec.extend(cols.iter().map(|c| {
                fmt(r.ap.iter().find(|(d, _)| d == c).map(|(_, v)| *v))
            }));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::data(format!("csv: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::data(e.to_string()))
    }

    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv_path = dir.join(format!("{stem}.csv"));
        std::fs::write(&csv_path, self.to_csv()?).map_err(|e| Error::io(&csv_path, e))?;
        let json_path = dir.join(format!("{stem}.json"));
        std::fs::write(&json_path, serde_json::to_string_pretty(self)?)
            .map_err(|e| Error::io(&json_path, e))
    }
}

fn run_cell(
    base: &TrainConfig,
    train: &[LoadedDataset],
    eval: &[LoadedDataset],
    cell: &AblationCell,
    max_eval_images: usize,
) -> Result<(f64, Vec<(String, f64)>)> {
    let config = base.with_overrides(&cell.overrides)?;
    let chosen: Vec<LoadedDataset> = if cell.datasets.is_empty() {
        train.to_vec()
    } else {
        cell.datasets
            .iter()
            .map(|n| {
                train
                    .iter()
                    .find(|d| &d.name == n)
                    .cloned()
                    .ok_or_else(|| Error::UnknownDataset(n.clone()))
            })
            .collect::<Result<_>>()?
    };
    let names: Vec<String> = chosen.iter().map(|d| d.name.clone()).collect();
    let mut trainer = Trainer::new(config, chosen)?;
    trainer.run(None)?;
    let final_loss = trainer
        .history()
        .last()
        .map(|r| r.loss_total)
        .ok_or_else(|| Error::config("ablation cell ran no steps"))?;
    let mut ap = Vec::new();
    for name in &names {
        let ds = eval
            .iter()
            .find(|d| &d.name == name)
            .or_else(|| trainer.datasets.iter().find(|d| &d.name == name))
            .expect("name comes from the training set");
        let (report, _) = trainer.evaluate(ds, max_eval_images)?;
        ap.push((name.clone(), report.ap * 100.0));
    }
    Ok((final_loss, ap))
}

/// Trains and evaluates every cell in order. Cell errors are recorded in the
/// row's status and the run continues.
pub fn run_ablation(
    base: &TrainConfig,
    train: &[LoadedDataset],
    eval: &[LoadedDataset],
    cells: &[AblationCell],
    max_eval_images: usize,
) -> AblationTable {
    let rows = cells
        .iter()
        .map(|cell| {
            log::info!("ablation {} / {}", cell.table, cell.row);
            let datasets = if cell.datasets.is_empty() {
                train.iter().map(|d| d.name.clone()).collect()
            } else {
                cell.datasets.clone()
            };
            match run_cell(base, train, eval, cell, max_eval_images) {
                Ok((loss, ap)) => AblationRow {
                    table: cell.table.clone(),
                    row: cell.row.clone(),
                    datasets,
                    status: "ok".into(),
                    final_loss: Some(loss),
                    mean_ap: Some(ap.iter().map(|(_, v)| v).sum::<f64>() / ap.len().max(1) as f64),
                    ap,
                },
                Err(e) => AblationRow {
                    table: cell.table.clone(),
                    row: cell.row.clone(),
                    datasets,
                    status: format!("failed: {}: {e}", e.code()),
                    final_loss: None,
                    ap: Vec::new(),
                    mean_ap: None,
                },
            }
        })
        .collect();
    AblationTable { rows }
}
