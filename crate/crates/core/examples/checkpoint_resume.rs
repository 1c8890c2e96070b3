//! Interrupts a small adversarial run halfway, saves a checkpoint, resumes
//! from disk and checks the result against an uninterrupted run.
//!
//! cargo run --release --example checkpoint_resume

use ds2net::model::Group;
use ds2net::synthdata::{GenSpec, SplitCounts};
use ds2net::trainer::{train, TrainData, TrainState};
use ds2net::RunConfig;

fn main() -> ds2net::Result<()> {
    let cfg = RunConfig {
        iterations: 40,
        encoder_widths: vec![8, 16, 32],
        head_width: 16,
        disc_channels: vec![16, 16, 16],
        ..RunConfig::default()
    };
    let counts = SplitCounts {
        train_a: 20,
        test_a: 10,
        train_b: 20,
        test_b: 10,
    };
    let data = TrainData::generate(&GenSpec::default(), counts, 0, &cfg)?;
    let dir = std::env::temp_dir().join("ds2net-checkpoint-example");
    std::fs::create_dir_all(&dir).map_err(|e| ds2net::Error::io(&dir, e))?;
    let path = dir.join("half.bin");

    let mut first = TrainState::new(cfg.clone())?;
    train(&mut first, &data, cfg.iterations / 2, &mut |_| {})?;
    first.save(&path)?;
    println!("saved iteration {} to {}", first.iteration, path.display());

    let mut resumed = TrainState::load(cfg.clone(), &path)?;
    train(&mut resumed, &data, cfg.iterations, &mut |_| {})?;
    let mut straight = TrainState::new(cfg.clone())?;
    train(&mut straight, &data, cfg.iterations, &mut |_| {})?;

    for g in [Group::Encoder, Group::Head, Group::Discriminator] {
        println!("{g:?}: resumed == uninterrupted: {}", resumed.param_digest(g) == straight.param_digest(g));
    }
    let other = RunConfig { lambda_es: 0.1, ..cfg };
    match TrainState::load(other, &path) {
        Err(e) => println!("loading under a different config is refused: {e}"),
        Ok(_) => println!("unexpected: checkpoint accepted under a different config"),
    }
    Ok(())
}
