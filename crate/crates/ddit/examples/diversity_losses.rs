//! The three representation-diversity components on constructed feature
//! stacks, plus the adaptive weight schedule.
//!
//! ```bash
//! cargo run --release --example diversity_losses
//! ```

use ddit::losses::{adaptive_weight, disp_loss, diversity_loss, mi_loss, orth_loss, DiversityConfig, PairSet};
use ddit::tensor::{Rng, TensorValue};

const EPS: f64 = 1e-8;

fn stack(blocks: Vec<Vec<f64>>, n: usize, t: usize, d: usize) -> Vec<TensorValue> {
    blocks
        .into_iter()
        .map(|b| TensorValue::new(vec![n, t, d], b).unwrap())
        .collect()
}

fn main() -> ddit::Result<()> {
    let pairs = PairSet::all(2)?;

    let base = Rng::new(1).fill_uniform(4 * 3, -1.0, 1.0);
    let negated: Vec<f64> = base.iter().map(|v| -v).collect();

    println!("constructed extremes (2 blocks, 2×2 tokens, dim 3):");
    let identical = stack(vec![base.clone(), base.clone()], 2, 2, 3);
    println!(
        "  identical blocks:   orth {:+.3}  mi {:+.3}",
        orth_loss(&identical, &pairs, EPS)?.item()?,
        mi_loss(&identical, &pairs, EPS)?.item()?,
    );
    let opposite = stack(vec![base.clone(), negated], 2, 2, 3);
    println!(
        "  negated blocks:     orth {:+.3}  mi {:+.3}",
        orth_loss(&opposite, &pairs, EPS)?.item()?,
        mi_loss(&opposite, &pairs, EPS)?.item()?,
    );
    let e1 = vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0];
    let e2 = vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0];
    let orthogonal = stack(vec![e1, e2], 2, 2, 3);
    println!(
        "  orthogonal means:   orth {:+.3}  mi {:+.3}",
        orth_loss(&orthogonal, &pairs, EPS)?.item()?,
        mi_loss(&orthogonal, &pairs, EPS)?.item()?,
    );

    let mut rng = Rng::new(2);
    let random = stack(
        vec![rng.fill_uniform(12, -1.0, 1.0), rng.fill_uniform(12, -1.0, 1.0)],
        2,
        2,
        3,
    );
    println!(
        "  random blocks:      orth {:+.3}  mi {:+.3}  disp {:+.4}",
        orth_loss(&random, &pairs, EPS)?.item()?,
        mi_loss(&random, &pairs, EPS)?.item()?,
        disp_loss(&random, &pairs, EPS)?.item()?,
    );

    let cfg = DiversityConfig::default();
    let out = diversity_loss(&random, &cfg, &pairs)?;
    println!(
        "\naggregate with default λ = (0.33, 0.33, 0.33): {:+.4}",
        out.total.item()?
    );

    println!("\nadaptive weight over the default [0.1, 0.5] range:");
    for l in [-0.2, 0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 1.0] {
        println!("  w({l:+.1}) = {:.2}", adaptive_weight(l, cfg.adaptive_lo, cfg.adaptive_hi));
    }
    Ok(())
}
