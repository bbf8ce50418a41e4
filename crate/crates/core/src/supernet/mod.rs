//! The relaxed search network and the discrete networks derived from it.

mod cell;
mod checkpoint;
mod network;
mod ops;

pub use cell::{mixed_edge_forward, Cell, CellEdges, CellTrace, MixedEdge};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use network::{
    build_final_network, build_supernet, one_hot_alpha, AlphaIds, HeadParams, Model, Network, NetworkKind, Outputs,
};
pub use ops::{EdgeOp, SepUnit};

#[cfg(test)]
mod tests;
