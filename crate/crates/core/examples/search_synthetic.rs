//! A short architecture search on synthetic identities.
//!
//!     cargo run --release --example search_synthetic -- 10

use autoreid::archspace::MacroConfig;
use autoreid::harness::{synthetic_image_set, SyntheticSpec};
use autoreid::searcher::{run_search, SearchConfig};

fn main() -> autoreid::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4);
    let data = synthetic_image_set(&SyntheticSpec::default(), [64, 32])?;
    let m = MacroConfig {
        channels: 4,
        layers: [1, 1, 1, 1],
        blocks: 2,
        input_hw: [64, 32],
        embed_dim: 32,
        ..Default::default()
    };
    let cfg = SearchConfig {
        epochs,
        ..Default::default()
    };
    let out = run_search(&cfg, &m, &data, None)?;
    for (e, (tr, va)) in out.state.train_loss.iter().zip(&out.state.val_loss).enumerate() {
        println!("epoch {e:3}  train {tr:.4}  val {va:.4}");
    }
    print!("{}", out.genotype.render());
    Ok(())
}
