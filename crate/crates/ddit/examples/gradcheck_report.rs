//! Finite-difference verification of every loss component on the built-in
//! tiny configuration.
//!
//! ```bash
//! cargo run --release --example gradcheck_report
//! ```

use ddit::gradcheck::{default_tiny_config, run_gradcheck, GRADCHECK_TOL};

fn main() -> ddit::Result<()> {
    let cfg = default_tiny_config();
    println!(
        "central finite differences (h = 1e-5) vs reverse mode, {} blocks × width {}:",
        cfg.model.num_blocks, cfg.model.hidden_dim
    );
    let reports = run_gradcheck(&cfg, 3, 3, false)?;
    for r in &reports {
        println!(
            "  {:<14} max rel err {:.3e} over {:>4} probed entries  {}",
            r.name,
            r.max_rel_err,
            r.entries_checked,
            if r.passed() { "ok" } else { "FAIL" }
        );
    }
    println!("tolerance: {GRADCHECK_TOL:.0e}");
    Ok(())
}
