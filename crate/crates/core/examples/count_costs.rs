//! Static parameter and multiply-accumulate counts: the ResNet-18 reference
//! and a random searched genotype at full scale.

use autoreid::archspace::{count_params_flops, reference_resnet_cost, Genotype, MacroConfig, SearchSpace};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> autoreid::Result<()> {
    let r18 = reference_resnet_cost([2, 2, 2, 2], [384, 128], 751, 512);
    println!("resnet-18 @384x128: {:.2} M params, {:.2} G MACs", r18.params as f64 / 1e6, r18.macs as f64 / 1e9);

    let m = MacroConfig {
        channels: 64,
        ..Default::default()
    };
    let g = Genotype::random(SearchSpace::Reid, m.blocks, &mut ChaCha8Rng::seed_from_u64(1));
    let c = count_params_flops(&g, &m)?;
    print!("{}", g.render());
    println!("searched @C=64: {:.2} M params, {:.2} G MACs", c.params as f64 / 1e6, c.macs as f64 / 1e9);
    Ok(())
}
