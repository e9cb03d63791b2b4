//! Runs the synthetic interval-sensitivity experiment and prints per-run
//! and per-mode HR@1. Modes and seeds can be narrowed with
//! `MODES=FULL_IIA,NO_INTERVAL SEEDS=0`.

use intervalrec::experiment::{mean_by_mode, run_interval_experiment, ExperimentConfig};
use intervalrec::prompt::Mode;

fn main() -> intervalrec::Result<()> {
    let mut cfg = ExperimentConfig::default();
    if let Ok(m) = std::env::var("MODES") {
        cfg.modes = m.split(',').map(Mode::parse).collect::<intervalrec::Result<_>>()?;
    }
    if let Ok(s) = std::env::var("SEEDS") {
        cfg.seeds = s.split(',').map(|x| x.parse().expect("seed")).collect();
    }
    let start = std::time::Instant::now();
    let results = run_interval_experiment(&cfg, |r| {
        println!("{} seed {} test {:.3} val {:?} epochs {} ({:.0}s)", r.mode, r.seed, r.test_hr1, r.best_val_hr1, r.epochs, start.elapsed().as_secs_f64())
    })?;
    for (m, hr) in mean_by_mode(&results, &cfg.modes) {
        println!("{m}: {hr:.3}");
    }
    Ok(())
}
