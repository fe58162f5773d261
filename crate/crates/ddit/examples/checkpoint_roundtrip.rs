//! Checkpoint persistence: train, save, reload, and confirm the resumed
//! trajectory is bitwise identical to the unbroken one.
//!
//! ```bash
//! cargo run --release --example checkpoint_roundtrip
//! ```

use ddit::config::RunConfig;
use ddit::trainer::{load_checkpoint, save_checkpoint, train_step, TrainState};

fn main() -> ddit::Result<()> {
    let cfg = RunConfig::from_json(
        r#"{
        "model": {"num_blocks": 2, "hidden_dim": 16},
        "train": {"batch_size": 8, "seed": 21}
    }"#,
    )?;
    let dir = std::env::temp_dir().join("ddit-example-ckpt");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("demo.ddit");

    let mut state = TrainState::new(&cfg)?;
    for _ in 0..5 {
        train_step(&mut state, &cfg)?;
    }
    save_checkpoint(&state, &cfg, &path)?;
    println!(
        "saved step-{} checkpoint ({} bytes) to {}",
        state.step,
        std::fs::metadata(&path)?.len(),
        path.display()
    );

    let unbroken: Vec<f64> = (0..5)
        .map(|_| train_step(&mut state, &cfg).map(|m| m.l_total))
        .collect::<ddit::Result<_>>()?;

    let (mut resumed, rcfg) = load_checkpoint(&path)?;
    println!("reloaded at step {} with rng state {}", resumed.step, resumed.rng.to_hex());
    let replayed: Vec<f64> = (0..5)
        .map(|_| train_step(&mut resumed, &rcfg).map(|m| m.l_total))
        .collect::<ddit::Result<_>>()?;

    println!("\n step | unbroken l_total      | resumed l_total       | bitwise");
    for (i, (a, b)) in unbroken.iter().zip(&replayed).enumerate() {
        println!(
            "  {:>3} | {a:<21.17} | {b:<21.17} | {}",
            i + 6,
            if a.to_bits() == b.to_bits() { "yes" } else { "NO" }
        );
    }
    Ok(())
}
