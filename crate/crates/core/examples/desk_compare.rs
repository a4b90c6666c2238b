//! Runs the desk-scale OCM vs random-removal comparison and prints the
//! final log-likelihood and memory transport distance per seed.

use std::time::Instant;

use ocmlab::harness::presets;
use ocmlab::harness::run_experiment;

fn main() -> ocmlab::Result<()> {
    let seeds: Vec<u64> = std::env::args()
        .skip(1)
        .filter_map(|a| a.parse().ok())
        .collect();
    let seeds = if seeds.is_empty() {
        vec![0, 1, 2]
    } else {
        seeds
    };
    for seed in seeds {
        for cfg in [presets::gmm4_ocm(seed), presets::gmm4_random(seed)] {
            let t = Instant::now();
            let out = run_experiment(&cfg)?;
            let f = out.final_record().expect("final record");
            println!(
                "seed {seed} {:<12} ll {:>10.4} w2(target, memory) {:>8.4} ltm {:>4} recon {:>8.4} {:.1}s",
                cfg.name,
                f.test_log_likelihood.unwrap_or(f64::NAN),
                f.w_target_memory.unwrap_or(f64::NAN),
                f.ltm_size,
                f.reconstruction_error.unwrap_or(f64::NAN),
                t.elapsed().as_secs_f64()
            );
        }
    }
    Ok(())
}
