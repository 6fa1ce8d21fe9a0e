//! Fits the standard synthetic scene and prints progress and metrics.
//!
//! `cargo run --release --example fit_desk_av -- [epochs] [stride]`

use std::time::Instant;

use pdeflow::geometry::DEFAULT_GROUND_HEIGHT;
use pdeflow::synth::{generate, SceneSpec};
use pdeflow::trainer::{fit_with_observer, score, TrainConfig};

fn main() -> pdeflow::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let epochs = args.get(1).map_or(300, |s| s.parse().expect("epochs"));
    let stride = args.get(2).map_or(5, |s| s.parse().expect("stride"));
    let seq = generate(&SceneSpec::desk_av())?;
    let seq = seq.without_ground(DEFAULT_GROUND_HEIGHT)?;
    let config = TrainConfig {
        epochs,
        window_stride: stride,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let fit = fit_with_observer(&seq, &config, |s| {
        if s.epoch % 10 == 0 || s.epoch == 1 {
            eprintln!("epoch {:4} loss {:.6} best {} ({:.1}s)", s.epoch, s.loss, s.best_epoch, start.elapsed().as_secs_f64());
        }
    })?;
    println!("{}", score(&fit.params, &seq)?.to_text());
    println!("stop: {} after {} epochs, {:.1}s", fit.log.stop_reason.name(), fit.log.epochs_run(), start.elapsed().as_secs_f64());
    Ok(())
}
