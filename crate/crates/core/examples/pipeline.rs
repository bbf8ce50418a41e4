//! The command line pipeline run in-process with a few epochs per stage:
//! gen-data, search, train, eval.
//!
//!     cargo run --release --example pipeline -- runs/example

fn main() {
    let out = std::env::args().nth(1).unwrap_or_else(|| "runs/example".into());
    let common = |cmd: &str| -> Vec<String> {
        let mut v: Vec<String> = ["autoreid", cmd, "--config", "configs/desk.toml", "--out", &out]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for s in ["search.epochs=3", "train.epochs=3", "train.milestones=[]"] {
            v.extend(["--set".into(), s.into()]);
        }
        v
    };
    for cmd in ["gen-data", "search", "train", "eval"] {
        println!("== {cmd}");
        let code = autoreid::harness::run_cli(common(cmd));
        if code != 0 {
            std::process::exit(code);
        }
    }
}
