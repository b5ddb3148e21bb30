//! Trains on a small synthetic corpus and reports fit on the training set.
//!
//! `cargo run --release -p sgr-core --example overfit -- [epochs] [paragraphs] [learning rate]`

use std::time::Instant;

use sgr_core::synthetic::{generate, SyntheticConfig};
use sgr_core::trainer::{document_f1, teacher_forced_match, TrainConfig, Trainer};

fn main() -> sgr_core::Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(500);
    let paragraphs: usize = args.next().and_then(|a| a.parse().ok()).unwrap_or(30);
    let learning_rate: f64 = args.next().and_then(|a| a.parse().ok()).unwrap_or(5e-5);
    let corpus = generate(&SyntheticConfig::new(paragraphs, 7));
    let config = TrainConfig {
        epochs,
        learning_rate,
        eval_every: 50,
        seed: 7,
        ..TrainConfig::default()
    };
    let start = Instant::now();
    let trainer = Trainer::new(&corpus, &corpus, config, &[])?;
    println!("parameters: {}", trainer.model.store.num_scalars());
    let outcome = trainer.fit(|e| {
        if e.epoch % 10 == 0 || e.dev_doc_f1.is_some() {
            println!(
                "epoch {:4}  loss {:10.5}  dev F1 {:?}  {:.1}s",
                e.epoch,
                e.train_loss,
                e.dev_doc_f1,
                start.elapsed().as_secs_f64()
            );
        }
    })?;
    let tf = teacher_forced_match(&outcome.model, &outcome.train)?;
    let f1 = document_f1(&outcome.model, &outcome.train)?;
    println!(
        "best epoch {}  teacher-forced match {tf:.4}  autoregressive doc F1 {f1:.4}  total {:.1}s",
        outcome.best_epoch,
        start.elapsed().as_secs_f64()
    );
    Ok(())
}
