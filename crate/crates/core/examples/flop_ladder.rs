//! FLOP estimates across the ablation ladder at both geometries.
//!
//! ```text
//! cargo run --example flop_ladder
//! ```

use cotok::config::{Preset, Scale};
use cotok::flops::{compare, estimate};

fn main() -> cotok::Result<()> {
    for (label, scale) in [("desk", Scale::Desk), ("full", Scale::Full)] {
        let configs: Vec<_> = Preset::LADDER
            .iter()
            .map(|p| (p.keyword().to_string(), p.config(scale)))
            .collect();
        println!("== {label} geometry ==");
        println!("{}\n", compare(&configs)?);
    }
    let cotok = Preset::PlusCoTok.config(Scale::Desk);
    println!("== plus_cotok (desk) by module ==");
    println!("{}", estimate(&cotok)?);
    Ok(())
}
