//! Balances noisy per-well predictions so every class appears once per plate,
//! comparing the iterative heuristic with the exact assignment.

use std::collections::BTreeMap;

use platescope::assignment::{
    apply_postprocess_with, argmax_predictions, balance_heuristic, balance_oracle, log_objective, plate_matrices,
    predictions_csv, Balancer,
};
use platescope::metrics::EvalResult;
use platescope::plate_data::{generate_synthetic, Split, SyntheticConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn run_example() -> platescope::Result<(f64, f64)> {
    let dataset = generate_synthetic(&SyntheticConfig {
        channels: 1,
        height: 4,
        width: 4,
        ..SyntheticConfig::default()
    })?;
    let m = &dataset.manifest;
    let k = m.num_classes as usize;

    // scores with a modest bump on the true class
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let predictions: BTreeMap<u32, Vec<f64>> = m
        .records_in(Split::Test)
        .map(|r| {
            let y = r.true_label().unwrap();
            let s: Vec<f64> = (0..k)
                .map(|j| {
                    let noise: f64 = StandardNormal.sample(&mut rng);
                    (noise + if j == y { 1.5 } else { 0.0 }).exp()
                })
                .collect();
            let z: f64 = s.iter().sum();
            (r.image_index, s.into_iter().map(|v| v / z).collect())
        })
        .collect();

    for pm in plate_matrices(&predictions, m)? {
        let h = balance_heuristic(&pm)?;
        let o = balance_oracle(&pm)?;
        println!(
            "plate {}: {} wells, heuristic log-prob {:.3} after {} sweeps{}, optimum {:.3}",
            pm.plate,
            pm.rows(),
            log_objective(&pm, &h),
            h.sweeps,
            if h.used_fallback { " (greedy finish)" } else { "" },
            log_objective(&pm, &o)
        );
    }

    let raw = EvalResult::score(&argmax_predictions(&predictions), m)?.multiclass_accuracy;
    let heuristic = apply_postprocess_with(&predictions, m, Balancer::Heuristic)?;
    let balanced = EvalResult::score(&heuristic, m)?.multiclass_accuracy;
    let oracle = EvalResult::score(&apply_postprocess_with(&predictions, m, Balancer::Oracle)?, m)?.multiclass_accuracy;
    println!("accuracy: argmax {:.1}%, heuristic {:.1}%, exact {:.1}%", 100.0 * raw, 100.0 * balanced, 100.0 * oracle);
    print!("{}", predictions_csv(&heuristic).lines().take(4).collect::<Vec<_>>().join("\n"));
    println!("\n...");
    Ok((raw, balanced))
}

fn main() -> platescope::Result<()> {
    run_example().map(|_| ())
}
