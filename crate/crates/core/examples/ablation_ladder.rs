//! Runs the five-row ablation ladder on in-memory synthetic data and prints
//! the target-domain IoU table.
//!
//! cargo run --release --example ablation_ladder -- [iterations] [seeds, e.g. 0,1,2]

use std::time::Instant;

use ds2net::ablation::{run_ablation, Ladder};
use ds2net::synthdata::{GenSpec, SplitCounts};
use ds2net::trainer::TrainData;
use ds2net::RunConfig;

fn main() -> ds2net::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let iterations = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(1500);
    let seeds: Vec<u64> = args
        .get(2)
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect())
        .unwrap_or_else(|| vec![0, 1, 2]);

    let base = RunConfig {
        iterations,
        log_interval: 0,
        ..RunConfig::default()
    };
    let ladder = Ladder::standard(base);
    let data = TrainData::generate(&GenSpec::default(), SplitCounts::default(), 0, &ladder.base)?;

    let start = Instant::now();
    let report = run_ablation(&ladder, &data, &seeds, &mut |row, seed, result| {
        eprintln!("[{:>7.1}s] {row} seed {seed}: {result:?}", start.elapsed().as_secs_f64());
    })?;
    println!("{}", report.to_table());
    print!("{}", report.to_csv());
    Ok(())
}
