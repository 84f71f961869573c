//! Fine-tunes a jointly trained model on each cell type and routes every well
//! to the model of its own cell type.

use platescope::config::RunConfig;
use platescope::plate_data::{compute_norm_stats, generate_synthetic, NormalizedImages};
use platescope::trainer::{
    finetune_per_celltype, fit, validation_loss, CellTypeRouter, FinetuneConfig, TrainData, TrainState,
};

pub fn run_example(epochs: usize) -> platescope::Result<usize> {
    let mut cfg = RunConfig::toy();
    cfg.train.total_epochs = epochs;
    cfg.synthetic.cell_signal_strength = 3.0;
    let dataset = generate_synthetic(&cfg.synthetic)?;
    let m = &dataset.manifest;
    let stats = compute_norm_stats(m, &dataset.images, cfg.grouping)?;
    let images = NormalizedImages::new(&dataset, &stats)?;
    let train = cfg.train.supervised();

    let mut joint = TrainState::new(&cfg.backbone, cfg.head(), 0)?;
    fit(&mut joint, &train, &TrainData::from_manifest(m), &images, None)?;
    let ft = FinetuneConfig { epochs: 10, lr: 3e-4 };
    let per_cell = finetune_per_celltype(&joint, &train, &ft, m, &images, None)?;
    for (cell, tuned) in &per_cell {
        let own = TrainData::from_manifest_filtered(m, |r| r.cell_type == *cell);
        println!(
            "{}: validation loss {:.4} joint, {:.4} fine-tuned",
            m.cell_types[*cell as usize],
            validation_loss(&joint, &images, &own.validation)?,
            validation_loss(tuned, &images, &own.validation)?
        );
    }

    let router = CellTypeRouter { joint, per_cell };
    let all: Vec<usize> = m.records.iter().map(|r| r.image_index as usize).collect();
    let routed = router.predict(m, &images, &all)?;
    println!("routed {} wells to {} fine-tuned models", routed.len(), router.per_cell.len());
    Ok(router.per_cell.len())
}

fn main() -> platescope::Result<()> {
    run_example(RunConfig::toy().train.total_epochs).map(|_| ())
}
