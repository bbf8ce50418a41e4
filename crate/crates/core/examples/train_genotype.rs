//! Trains a hand-written genotype on synthetic identities and scores it on
//! held-out images.

use autoreid::archspace::{BlockSpec, Genotype, MacroConfig, OpKind, SearchSpace};
use autoreid::harness::{holdout_split, synthetic_image_set, SyntheticSpec};
use autoreid::retrieval::EvalOptions;
use autoreid::trainer::{evaluate_sets, train, TrainConfig};

fn main() -> autoreid::Result<()> {
    let cell = vec![
        BlockSpec::new(0, 1, OpKind::SepConv3x3, OpKind::PartAware),
        BlockSpec::new(2, 0, OpKind::Identity, OpKind::DilConv3x3),
    ];
    let g = Genotype {
        space: SearchSpace::Reid,
        normal: cell.clone(),
        reduction: cell,
    };
    let data = synthetic_image_set(&SyntheticSpec::default(), [64, 32])?;
    let split = holdout_split(&data, 0.25)?;
    let m = MacroConfig {
        channels: 4,
        layers: [1, 1, 1, 1],
        blocks: 2,
        input_hw: [64, 32],
        embed_dim: 32,
        ..Default::default()
    };
    let cfg = TrainConfig {
        epochs: 20,
        milestones: vec![15],
        ..Default::default()
    };
    let out = train(&g, &m, &split.train, &cfg, None)?;
    for row in out.log.iter().step_by(5) {
        println!("epoch {:3}  loss {:.4}  ce {:.4}  triplet {:.4}", row.epoch, row.loss, row.ce, row.triplet);
    }
    let r = evaluate_sets(&out.model, &split.query, &split.gallery, &EvalOptions { camera_filter: false }, 32)?;
    println!("held-out rank-1 {:.3}  mAP {:.3}", r.rank(1), r.map);
    Ok(())
}
