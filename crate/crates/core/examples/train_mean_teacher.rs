//! Trains one mean-teacher model on the toy screen, stopping halfway to save
//! and resume from a checkpoint.

use platescope::config::RunConfig;
use platescope::plate_data::{compute_norm_stats, generate_synthetic, NormalizedImages};
use platescope::trainer::{accuracy_on, fit, read_checkpoint, write_checkpoint, TrainData, TrainState};

pub fn run_example(epochs: usize) -> platescope::Result<f64> {
    let mut cfg = RunConfig::toy();
    cfg.train.total_epochs = epochs;
    cfg.train.pseudo_label_weight = 0.0;
    let dataset = generate_synthetic(&cfg.synthetic)?;
    let stats = compute_norm_stats(&dataset.manifest, &dataset.images, cfg.grouping)?;
    let images = NormalizedImages::new(&dataset, &stats)?;
    let data = TrainData::from_manifest(&dataset.manifest);

    let mut state = TrainState::new(&cfg.backbone, cfg.head(), cfg.train.seed)?;
    let mut first_half = cfg.train.clone();
    first_half.total_epochs = epochs / 2;
    for log in fit(&mut state, &first_half, &data, &images, None)? {
        println!("epoch {:>3}  lr {:.1e}  loss {:.4}", log.epoch, log.lr, log.mean_loss());
    }

    let path = std::env::temp_dir().join("platescope-example-mean-teacher.ckpt");
    write_checkpoint(&path, &state)?;
    let mut state = read_checkpoint(&path, cfg.head())?;
    println!("resumed from {} at epoch {}", path.display(), state.epoch);
    // the schedule uses the full run's length, so resume with the full config
    for log in fit(&mut state, &cfg.train, &data, &images, None)? {
        println!("epoch {:>3}  lr {:.1e}  loss {:.4}", log.epoch, log.lr, log.mean_loss());
    }
    std::fs::remove_file(&path).ok();

    let test: Vec<(usize, usize)> = dataset
        .manifest
        .records_in(platescope::plate_data::Split::Test)
        .map(|r| (r.image_index as usize, r.true_label().unwrap()))
        .collect();
    let acc = accuracy_on(&state, &images, &test)?;
    println!("teacher accuracy on hidden-label wells: {:.1}%", 100.0 * acc);
    Ok(acc)
}

fn main() -> platescope::Result<()> {
    run_example(RunConfig::toy().train.total_epochs).map(|_| ())
}
