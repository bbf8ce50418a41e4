//! The part-aware operation on its own: forward a random feature map and
//! show that permuting the horizontal bands permutes the output bands.

use autoreid::nn::{Builder, ParamStore};
use autoreid::partaware::{part_aware_cost, part_aware_forward, permute_bands, PartAware, PartAwareConfig};
use autoreid::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> autoreid::Result<()> {
    let cfg = PartAwareConfig::for_edge(8, 1, 4);
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let module = PartAware::new(&mut Builder::new(&mut store, &mut rng), cfg)?;

    let (h, w) = (16, 8);
    let x = Tensor::new(vec![2, 8, h, w], (0..2 * 8 * h * w).map(|_| rng.random_range(-1.0..1.0)).collect());
    let y = part_aware_forward(&x, &module, &store)?;
    println!("input {:?} -> output {:?}", x.shape(), y.shape());

    let perm = [2, 0, 3, 1];
    let lhs = part_aware_forward(&permute_bands(&x, 4, &perm), &module, &store)?;
    let rhs = permute_bands(&y, 4, &perm);
    let gap = lhs.data().iter().zip(rhs.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    println!("band permutation gap: {gap:.2e}");

    let cost = part_aware_cost(&cfg, h, w)?;
    println!("{} params, {} MACs per image", cost.params, cost.macs);
    Ok(())
}
