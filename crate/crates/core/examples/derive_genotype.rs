//! Discretizes random architecture logits into a genotype and round-trips
//! it through JSON.

use autoreid::archspace::{derive_genotype, AlphaParams, Genotype, SearchSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> autoreid::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let alpha = AlphaParams::random(SearchSpace::Reid, 4, 1.0, &mut rng);
    let g = derive_genotype(&alpha)?;
    print!("{}", g.render());
    let json = g.to_json();
    println!("{json}");
    assert_eq!(Genotype::from_json(&json)?, g);
    Ok(())
}
