//! Generates a synthetic screen, writes it to disk, reads it back and compares
//! how each normalization grouping removes plate-level offsets.

use std::collections::BTreeMap;

use platescope::plate_data::{
    compute_norm_stats, generate_synthetic, read_dataset, write_dataset, Grouping, NormalizedImages, Split, SyntheticConfig,
};

pub fn run_example() -> platescope::Result<BTreeMap<Grouping, f64>> {
    let cfg = SyntheticConfig {
        height: 12,
        width: 12,
        ..SyntheticConfig::default()
    };
    let dir = std::env::temp_dir().join("platescope-example-synthetic");
    write_dataset(&dir, &generate_synthetic(&cfg)?)?;
    let dataset = read_dataset(&dir)?;
    let m = &dataset.manifest;
    println!(
        "{} wells on {} plates, {} classes, {} cell types, {}x{}x{} images",
        m.records.len(),
        m.num_plates(),
        m.num_classes,
        m.cell_types.len(),
        m.channels,
        m.height,
        m.width
    );

    let plane = dataset.images.height * dataset.images.width;
    let mut spread = BTreeMap::new();
    for g in Grouping::ALL {
        let stats = compute_norm_stats(m, &dataset.images, g)?;
        let images = NormalizedImages::new(&dataset, &stats)?;
        // mean of channel 0 over each plate's training wells
        let mut sums: BTreeMap<_, (f64, usize)> = BTreeMap::new();
        for r in m.records.iter().filter(|r| r.split == Split::Train) {
            let e = sums.entry(r.plate_key()).or_default();
            e.0 += images.image(r.image_index as usize)[..plane].iter().sum::<f64>();
            e.1 += plane;
        }
        let means: Vec<f64> = sums.values().map(|(s, n)| s / *n as f64).collect();
        let worst = means.iter().map(|v| v.abs()).fold(0.0, f64::max);
        println!("{:>5}: {} groups, largest plate mean offset {worst:.4}", g.to_string(), stats.groups.len());
        spread.insert(g, worst);
    }
    std::fs::remove_dir_all(&dir).ok();
    Ok(spread)
}

fn main() -> platescope::Result<()> {
    run_example().map(|_| ())
}
