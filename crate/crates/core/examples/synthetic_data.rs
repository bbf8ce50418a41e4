//! Writes the synthetic identities as PNG folders and indexes them again.

use autoreid::harness::{generate_synthetic, load_folder, SyntheticSpec};

fn main() -> autoreid::Result<()> {
    let root = std::env::args()
        .nth(1)
        .map(Into::into)
        .unwrap_or_else(|| std::env::temp_dir().join("autoreid-synthetic"));
    let spec = SyntheticSpec::default();
    let n = generate_synthetic(&spec, &root)?;
    let index = load_folder(&root)?;
    println!("wrote {n} images under {}", root.display());
    println!("{} identities, {} indexed, {} skipped", index.identities.len(), index.len(), index.warnings.len());
    Ok(())
}
