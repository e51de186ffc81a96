//! Trains on freshly generated synthetic datasets and prints per-dataset AP.
//!
//! Usage: `cargo run --release --example toy_train -- [only=NAME] [key=value ...]`

use std::time::Instant;

use dethub::data::{synth_conflict_datasets, LoadedDataset, SynthSpec};
use dethub::engine::{TrainConfig, Trainer};

fn main() -> dethub::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let only: Option<String> = args
        .iter()
        .find_map(|a| a.strip_prefix("only=").map(str::to_string));
    let overrides: Vec<&String> = args.iter().filter(|a| !a.starts_with("only=")).collect();
    let base = TrainConfig::from_toml_str(
        r#"
[model]
d = 32
heads = 4
stages = 2
backbone_width = 8
feature_channels = 16
image_size = 64
max_length = 16
[queries]
count = 16
[optimizer]
lr = 1e-3
[train]
steps = 200
batch_size = 4
"#,
    )?;
    let config = base.with_overrides(&overrides)?;
    let size = config.model.image_size as u32;
    let train = synth_conflict_datasets(&SynthSpec::with_datasets(2, 200), 1)?;
    let val = synth_conflict_datasets(&SynthSpec::with_datasets(2, 50), 2)?;
    let keep = |d: &&dethub::data::SynthDataset| {
        only.as_ref().map_or(true, |n| &d.vocabulary.dataset_name == n)
    };
    let train: Vec<LoadedDataset> = train
        .iter()
        .filter(keep)
        .map(|d| LoadedDataset::from_synth(d, size))
        .collect::<dethub::Result<_>>()?;
    let val: Vec<LoadedDataset> = val
        .iter()
        .filter(keep)
        .map(|d| LoadedDataset::from_synth(d, size))
        .collect::<dethub::Result<_>>()?;
    let mut trainer = Trainer::new(config, train)?;
    let t0 = Instant::now();
    let steps = trainer.config.train.steps;
    while trainer.step() < steps {
        let r = trainer.train_step()?;
        if r.step % 25 == 0 || r.step + 1 == steps {
            println!(
                "step {:4} loss {:.4} align {:.4} l1 {:.4} giou {:.4} ({:.2}s/step)",
                r.step,
                r.loss_total,
                r.loss_align,
                r.loss_l1,
                r.loss_giou,
                t0.elapsed().as_secs_f64() / (r.step + 1) as f64
            );
        }
    }
    for ds in &val {
        let (report, _) = trainer.evaluate(ds, 0)?;
        println!(
            "{}: AP {:.2} AP50 {:.2} AP75 {:.2}",
            ds.name,
            report.ap * 100.0,
            report.ap50 * 100.0,
            report.ap75 * 100.0
        );
    }
    Ok(())
}
