//! Datasets, experiment configuration and the command line front end.

pub mod cli;
pub mod config;
pub mod dataset;
pub mod experiment;

pub use cli::run_cli;
pub use config::{apply_override, parse_macro_spec, DatasetConfig, DatasetKind, EvalConfig, ExperimentConfig, RunMode};
pub use dataset::{
    generate_synthetic, load_folder, parse_camera, render_synthetic, synthetic_image_set, FolderIndex, ImageSet,
    IndexEntry, SyntheticSpec,
};
pub use experiment::{holdout_split, load_dataset, EvalSplit};

/// Seed for the component `name`, derived from the experiment seed so that
/// components can be reproduced in isolation.
pub fn sub_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a over the name, then one splitmix64 round
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = (seed ^ h).wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
