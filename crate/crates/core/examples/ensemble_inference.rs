//! Trains the full symmetric model briefly and compares each head's target
//! predictions with the averaged-probability ensemble.
//!
//! cargo run --release --example ensemble_inference -- [iterations]

use ds2net::metrics::Confusion;
use ds2net::nets::argmax_mask;
use ds2net::synthdata::{GenSpec, SplitCounts};
use ds2net::trainer::{train, Batch, TrainData, TrainState, TARGET_TEST};
use ds2net::RunConfig;

fn main() -> ds2net::Result<()> {
    let iterations = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let cfg = RunConfig {
        iterations,
        ..RunConfig::default()
    };
    let data = TrainData::generate(&GenSpec::default(), SplitCounts::default(), 0, &cfg)?;
    let mut state = TrainState::new(cfg)?;
    train(&mut state, &data, iterations, &mut |_| {})?;

    let (_, test) = data.eval.iter().find(|(n, _)| n == TARGET_TEST).expect("target test set");
    let mut scores = [Confusion::new(); 3];
    for chunk in test.chunks(8) {
        let batch = Batch::from_samples(chunk)?;
        let (p_s, p_t) = state.model.head_probabilities(&batch.images)?;
        let p_t = p_t.expect("symmetric model has two heads");
        let masks = [argmax_mask(&p_s), argmax_mask(&p_t), state.model.predict(&batch.images)?];
        for (c, m) in scores.iter_mut().zip(&masks) {
            c.accumulate(m, &batch.labels)?;
        }
    }
    for (name, c) in ["source-style head", "target-style head", "ensemble"].iter().zip(&scores) {
        println!("{name:<18} target lesion IoU {:.4}", c.iou(1)?.value);
    }
    Ok(())
}
