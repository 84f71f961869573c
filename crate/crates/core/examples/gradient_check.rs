//! Central finite differences against reverse-mode gradients for a small
//! backbone with an ArcFace head.

use platescope::autodiff::{Tape, Tensor};
use platescope::losses::{arcface_loss, ArcFaceConfig};
use platescope::model::{self, BackboneConfig, ModelParams, CLASS_WEIGHT};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn loss(params: &ModelParams, batch: &Tensor, labels: &[usize], cfg: &ArcFaceConfig) -> platescope::Result<(f64, Tape, model::ParamVars)> {
    let mut tape = Tape::new();
    let vars = params.record(&mut tape, true);
    let x = tape.constant(batch.clone());
    let emb = model::forward(&mut tape, &vars, x)?;
    let l = arcface_loss(&mut tape, emb, vars[CLASS_WEIGHT], labels, cfg)?;
    let value = tape.value(l).item();
    tape.backward(l)?;
    Ok((value, tape, vars))
}

pub fn run_example() -> platescope::Result<f64> {
    let backbone = BackboneConfig {
        input_channels: 2,
        stem_channels: 3,
        num_blocks: 2,
        embedding_dim: 4,
        num_classes: 3,
        ..BackboneConfig::default()
    };
    let cfg = ArcFaceConfig::new(8.0, 0.2, 3)?;
    let params = model::build(&backbone, 1)?;
    let batch = Tensor::randn(&[3, 2, 6, 6], 1.0, &mut ChaCha8Rng::seed_from_u64(2));
    let labels = [0, 2, 1];
    let (_, tape, vars) = loss(&params, &batch, &labels, &cfg)?;

    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (name, t) in params.iter() {
        let grad = tape.grad(vars[name]).cloned().unwrap_or_else(|| Tensor::zeros(t.shape()));
        let mut name_worst: f64 = 0.0;
        for i in 0..t.len() {
            let probe = |delta: f64| {
                let mut p = params.clone();
                p.get_mut(name).unwrap().data_mut()[i] += delta;
                loss(&p, &batch, &labels, &cfg).map(|r| r.0)
            };
            let numeric = (probe(h)? - probe(-h)?) / (2.0 * h);
            let analytic = grad.data()[i];
            let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-4);
            name_worst = name_worst.max(rel);
        }
        println!("{name:<22} {:>4} values  worst rel err {name_worst:.2e}", t.len());
        worst = worst.max(name_worst);
    }
    println!("overall worst relative error {worst:.2e}");
    Ok(worst)
}

fn main() -> platescope::Result<()> {
    run_example().map(|_| ())
}
