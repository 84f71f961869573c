//! Trains the two-member ensemble with plate-balanced pseudo-labels and
//! reports how many of the pseudo-labels are right.

use platescope::config::RunConfig;
use platescope::ensemble::{ensemble_predict_map, fit_ensemble, EnsembleState};
use platescope::metrics::EvalResult;
use platescope::plate_data::{compute_norm_stats, generate_synthetic, NormalizedImages};
use platescope::trainer::{TrainData, TrainState};

pub fn run_example(epochs: usize) -> platescope::Result<f64> {
    let mut cfg = RunConfig::toy();
    cfg.train.total_epochs = epochs;
    cfg.pseudo_start_epoch = epochs / 3;
    let dataset = generate_synthetic(&cfg.synthetic)?;
    let stats = compute_norm_stats(&dataset.manifest, &dataset.images, cfg.grouping)?;
    let images = NormalizedImages::new(&dataset, &stats)?;
    let data = TrainData::from_manifest(&dataset.manifest);

    let members = cfg
        .ladder()
        .member_backbones()
        .iter()
        .enumerate()
        .map(|(i, b)| TrainState::new(b, cfg.head(), cfg.train.seed + i as u64))
        .collect::<platescope::Result<Vec<_>>>()?;
    for (m, b) in members.iter().zip(cfg.ladder().member_backbones()) {
        println!("member width x{}: {} parameters", b.width_multiplier, m.student.param_count());
    }
    let mut ens = EnsembleState::new(members)?;
    fit_ensemble(&mut ens, &cfg.train, &dataset.manifest, &data, &images, cfg.pseudo_start_epoch, None)?;

    let pseudo: std::collections::BTreeMap<u32, usize> = ens.pseudo_labels.iter().map(|(w, (c, _))| (*w, *c)).collect();
    let pseudo_acc = EvalResult::score(&pseudo, &dataset.manifest)?.multiclass_accuracy;
    let preds = ensemble_predict_map(&ens.members, &images, &data.unlabeled)?;
    let final_acc = EvalResult::score(&platescope::assignment::argmax_predictions(&preds), &dataset.manifest)?;
    println!("best ensemble validation accuracy {:.1}%", 100.0 * ens.best_val_accuracy);
    println!("{} pseudo-labels, {:.1}% correct", pseudo.len(), 100.0 * pseudo_acc);
    println!("final ensemble argmax accuracy {:.1}%", 100.0 * final_acc.multiclass_accuracy);
    Ok(final_acc.multiclass_accuracy)
}

fn main() -> platescope::Result<()> {
    run_example(RunConfig::toy().train.total_epochs).map(|_| ())
}
