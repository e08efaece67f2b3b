//! Trains one mechanism on the marker-position task and prints per-epoch
//! metrics. Usage: `cargo run --release --example position_task -- rope`

use std::time::Instant;

use riemannformer::model::Vit;
use riemannformer::positional::Mechanism;
use riemannformer::presets::{position_data, position_model, position_training};
use riemannformer::training::{train, TrainOutput};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mechanism: Mechanism = std::env::args()
        .nth(1)
        .as_deref()
        .unwrap_or("riemann")
        .parse()?;
    let (train_set, test_set) = position_data(0)?;
    let (vit, mut store) = Vit::new(position_model(mechanism, None), 0)?;
    let start = Instant::now();
    let report = train(
        &vit,
        &mut store,
        &position_training(0),
        &train_set,
        &test_set,
        &TrainOutput::default(),
        |m| {
            println!(
                "epoch {:2}  loss {:.4}  train {:.3}  test {:.3}  {:.1}s",
                m.epoch,
                m.train_loss,
                m.train_acc,
                m.test_acc,
                start.elapsed().as_secs_f64()
            );
        },
    )?;
    println!(
        "best test accuracy {:.3} at epoch {}",
        report.best_test_acc, report.best_epoch
    );
    Ok(())
}
