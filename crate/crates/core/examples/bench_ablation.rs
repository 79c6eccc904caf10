//! Quick timing probe for the module-ablation sweep (not shipped behavior).
use dynafuse::train::{ablation_rows, train_loop, AblationTable, TrainConfig};
use std::time::Instant;

fn main() {
    let seeds: Vec<u64> = std::env::args()
        .nth(1)
        .map(|s| s.split(',').map(|v| v.parse().unwrap()).collect())
        .unwrap_or_else(|| vec![7]);
    let mut base = TrainConfig::default();
    if let Some(steps) = std::env::args().nth(2) {
        base.steps = steps.parse().unwrap();
    }
    let rows = ablation_rows(&base, AblationTable::IVa);
    let mut sums = vec![0.0; rows.len()];
    for &seed in &seeds {
        for (i, (name, cfg)) in rows.iter().enumerate() {
            let mut cfg = cfg.clone();
            cfg.seed = seed;
            let t0 = Instant::now();
            let (_, _, ev) = train_loop(&cfg).unwrap();
            sums[i] += ev.map;
            println!(
                "seed {seed} {name}: map {:.4} ({:.1}s)",
                ev.map,
                t0.elapsed().as_secs_f64()
            );
        }
    }
    for (i, (name, _)) in rows.iter().enumerate() {
        println!("MEAN {name}: {:.4}", sums[i] / seeds.len() as f64);
    }
}
