//! Builds a small supernet, runs one batch and prints the architecture
//! gradient of the first normal-cell edge.

use autoreid::archspace::{MacroConfig, SearchSpace};
use autoreid::nn::{Ctx, GradTarget};
use autoreid::objectives::{retrieval_loss, LossWeights};
use autoreid::supernet::build_supernet;
use autoreid::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> autoreid::Result<()> {
    let m = MacroConfig {
        channels: 4,
        layers: [1, 1, 1, 1],
        blocks: 2,
        input_hw: [32, 16],
        num_ids: 4,
        embed_dim: 16,
        ..Default::default()
    };
    let model = build_supernet(&m, SearchSpace::Reid, 0)?;
    println!("{} tensors, {} architecture tensors", model.store.len(), model.net.alpha.as_ref().map_or(0, |a| a.all().count()));

    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let n = 8;
    let x = Tensor::new(vec![n, 3, 32, 16], (0..n * 3 * 32 * 16).map(|_| rng.random_range(-1.0..1.0)).collect());
    let labels = [0, 0, 1, 1, 2, 2, 3, 3];

    let mut ctx = Ctx::new(&model.store, true, GradTarget::Arch, 5);
    let xin = ctx.input(x);
    let out = model.net.forward(&mut ctx, xin)?;
    let loss = retrieval_loss(&mut ctx.tape, out.h, out.f, &labels, &LossWeights::default())?;
    println!("h {:?}  g {:?}  loss {:.4}", ctx.value(out.h).shape(), ctx.value(out.g).shape(), ctx.value(loss.total).item());

    let first = model.net.alpha.as_ref().expect("supernet").normal[0][0];
    let grads = ctx.gradients(loss.total);
    if let Some((_, g)) = grads.iter().find(|(id, _)| *id == first) {
        let names: Vec<_> = SearchSpace::Reid.ops().iter().map(|o| o.name()).collect();
        for (name, v) in names.iter().zip(g.data()) {
            println!("  dL/dalpha[{name}] = {v:+.3e}");
        }
    }
    Ok(())
}
