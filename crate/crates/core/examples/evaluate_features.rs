//! Retrieval metrics on a toy feature set, written to and read back from
//! the binary feature dump.

use autoreid::retrieval::{evaluate, read_labeled, write_labeled, EvalOptions, EvalReport, LabeledFeatures};
use autoreid::tensor::Tensor;

fn main() -> autoreid::Result<()> {
    let query = LabeledFeatures::new(
        Tensor::new(vec![2, 2], vec![0.0, 0.0, 5.0, 5.0]),
        vec![0, 1],
        vec![Some(0), Some(0)],
    )?;
    let gallery = LabeledFeatures::new(
        Tensor::new(vec![4, 2], vec![0.1, 0.0, 4.0, 4.0, 5.0, 5.1, 0.0, 0.0]),
        vec![0, 0, 1, 1],
        vec![Some(1), Some(0), Some(1), Some(0)],
    )?;

    let dir = std::env::temp_dir().join("autoreid-eval-example");
    std::fs::create_dir_all(&dir).map_err(|e| autoreid::Error::Io { path: dir.clone(), source: e })?;
    write_labeled(&dir.join("query.feat"), &query)?;
    write_labeled(&dir.join("gallery.feat"), &gallery)?;
    let (q, g) = (read_labeled(&dir.join("query.feat"))?, read_labeled(&dir.join("gallery.feat"))?);

    for filter in [true, false] {
        let r = evaluate(&q, &g, &EvalOptions { camera_filter: filter })?;
        let report = EvalReport::new(&r);
        println!("camera filter {filter}: {}", serde_json::to_string(&report).expect("plain data"));
    }
    Ok(())
}
