//! Central-difference gradient checks on every differentiable subgraph.
//!
//! ```text
//! cargo run --example grad_check -- [seed]
//! ```

use std::time::Instant;

use cotok::training::{check_subgraph, Subgraph};

fn main() -> cotok::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    println!("{:<18} {:>8} {:>12}  {:<32} {:>8}", "subgraph", "coords", "max rel err", "worst tensor", "seconds");
    for which in Subgraph::ALL {
        let t = Instant::now();
        let r = check_subgraph(which, seed, 1e-5)?;
        println!(
            "{:<18} {:>8} {:>12.3e}  {:<32} {:>8.2}",
            which.keyword(),
            r.coords,
            r.max_rel_error,
            r.worst,
            t.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
