//! Trains the full model and the mode-free ablation on a synthetic dataset
//! and prints validation metrics per epoch.
//!
//! ```text
//! cargo run --release -p dm2rm --example synthetic_benchmark -- [config.json]
//! ```

use std::time::Instant;

use dm2rm::data::{generate_synthetic, SyntheticSpec};
use dm2rm::encoders::Providers;
use dm2rm::features::FeatureStore;
use dm2rm::lang::LangPipeline;
use dm2rm::model::RankerModel;
use dm2rm::training::fit;
use dm2rm::{Config, ModeToken};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let config: Config = match std::env::args().nth(1) {
        Some(path) => serde_json::from_str(&std::fs::read_to_string(path)?)?,
        None => Config::benchmark(),
    };
    let dataset = generate_synthetic(&SyntheticSpec::default())?;
    let train = dataset.split_samples("train")?;
    let val = dataset.split_samples("val")?;
    let everything: Vec<_> = train.iter().chain(&val).copied().collect();
    println!("{} train / {} val samples", train.len(), val.len());

    for mode_switching in [true, false] {
        let config = Config {
            mode_switching,
            ..config.clone()
        };
        let start = Instant::now();
        let providers = Providers::synthetic(&config);
        let features = FeatureStore::build(
            &dataset,
            &everything,
            &LangPipeline::offline(),
            &providers,
            &config,
        )?;
        let model = RankerModel::new(&config)?;
        let report = fit(model, &dataset, &train, &val, &features, |r, _| {
            println!(
                "  epoch {:2} loss {:.4} val mrr {:.4} r@10 {:.4}{}",
                r.epoch,
                r.train_loss,
                r.val_mrr,
                r.val_r10,
                if r.selected { " *" } else { "" }
            )
        })?;
        let r = &report.best_report;
        println!(
            "mode_switching={mode_switching}: best epoch {} target mrr {:.4} receptacle mrr {:.4} ({:.1}s)",
            report.best_epoch,
            r.mode(ModeToken::Target).mrr,
            r.mode(ModeToken::Receptacle).mrr,
            start.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
