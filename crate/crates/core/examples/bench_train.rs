use patchinv_core::data_model::make_synthetic_dataset;
use patchinv_core::losses::PatchMode;
use patchinv_core::training::{TrainRunConfig, Trainer};
use std::time::Instant;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let gw: usize = args.get(1).map(|s| s.parse().unwrap()).unwrap_or(8);
    let cw: usize = args.get(2).map(|s| s.parse().unwrap()).unwrap_or(8);
    let data = make_synthetic_dataset(7, 64, 64).unwrap();
    let cfg = TrainRunConfig {
        mode: PatchMode::UAPI,
        generator_updates_total: 3,
        generator_width: gw,
        critic_width: cw,
        seed: 1,
        ..TrainRunConfig::default()
    };
    let mut t = Trainer::new(cfg, &data).unwrap();
    let t0 = Instant::now();
    t.train(&data, None).unwrap();
    let el = t0.elapsed().as_secs_f64();
    let per_cycle = el / 3.0;
    println!(
        "gw={gw} cw={cw}: 3 cycles in {el:.2}s  ({per_cycle:.2}s/cycle, projected 2000 cycles = {:.1} min)",
        per_cycle * 2000.0 / 60.0
    );
}
