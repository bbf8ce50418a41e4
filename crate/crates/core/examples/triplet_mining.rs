//! Batch-hard mining on a PK batch of random embeddings.

use autoreid::objectives::{batch_hard_triplet_value, mine_hard, pk_sample, IdentityIndex, Reduction, TripletForm};
use autoreid::retrieval::euclidean_distances;
use autoreid::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> autoreid::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let labels: Vec<usize> = (0..40).map(|i| i / 5).collect();
    let index = IdentityIndex::new(&labels);
    let draw = pk_sample(&index, 4, 3, &mut rng)?;
    println!("drew {:?}", draw.indices);

    let f = Tensor::new(vec![12, 4], (0..48).map(|_| rng.random_range(-1.0..1.0)).collect());
    let dist = euclidean_distances(&f, &f)?;
    for (a, (p, n)) in mine_hard(&dist, &draw.labels)?.into_iter().enumerate() {
        println!("anchor {a:2}: hardest positive {p:2} ({:.3}), hardest negative {n:2} ({:.3})", dist.data()[a * 12 + p], dist.data()[a * 12 + n]);
    }
    let loss = batch_hard_triplet_value(&f, &draw.labels, 0.3, TripletForm::Hinge, Reduction::Mean)?;
    println!("batch-hard loss {loss:.4}");
    Ok(())
}
