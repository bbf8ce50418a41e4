//! Architecture description: the operation vocabulary, cell genotypes,
//! architecture logits and their discretisation, the macro skeleton, and
//! static cost accounting.

mod alpha;
mod cost;
mod genotype;
mod macro_config;
mod ops;

pub use alpha::{derive_genotype, AlphaParams};
pub use cost::{
    bn_cost, cell_cost, cell_frame_cost, conv_cost, count_params_flops, head_cost, linear_cost, op_cost,
    reference_resnet_cost, stem_cost, Cost,
};
pub use genotype::{BlockSpec, Genotype, GENOTYPE_VERSION};
pub use macro_config::{CellPlan, FeatureShape, MacroConfig};
pub use ops::{CellType, OpKind, SearchSpace};
