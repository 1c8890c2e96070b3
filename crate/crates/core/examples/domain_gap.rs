//! Supervised training on domain A, then scoring on both domains: the
//! appearance shift alone costs most of the lesion IoU.
//!
//! cargo run --release --example domain_gap -- [iterations]

use ds2net::synthdata::{GenSpec, SplitCounts};
use ds2net::trainer::{run, TrainData, SOURCE_TEST, TARGET_TEST};
use ds2net::RunConfig;

fn main() -> ds2net::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(1000);
    let cfg = RunConfig {
        iterations,
        eval_interval: iterations / 4,
        ..RunConfig::source_only()
    };
    let data = TrainData::generate(&GenSpec::default(), SplitCounts::default(), 0, &cfg)?;
    let out = run(cfg, &data)?;
    for m in &out.metrics {
        println!("iteration {:>5}  {:<11}  lesion IoU {:.4}  mIoU {:.4}", m.iteration, m.split, m.iou_lesion, m.miou);
    }
    let (a, b) = (out.final_metrics(SOURCE_TEST), out.final_metrics(TARGET_TEST));
    if let (Some(a), Some(b)) = (a, b) {
        println!("gap: {:.1} IoU points", 100.0 * (a.iou_lesion - b.iou_lesion));
    }
    Ok(())
}
