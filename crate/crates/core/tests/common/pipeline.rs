//! Drive the command-line pipeline end to end.

use std::path::Path;

use clap::Parser;
use splatrefine::cli::{execute, run, Cli};

pub fn cli(args: &[&str]) -> i32 {
    run(std::iter::once("splatrefine").chain(args.iter().copied()))
}

/// Run a command that must succeed, discarding what it would print.
pub fn ok(args: &[&str]) {
    let parsed = Cli::try_parse_from(std::iter::once("splatrefine").chain(args.iter().copied()))
        .unwrap_or_else(|e| panic!("splatrefine {}: {e}", args.join(" ")));
    if let Err(e) = execute(&parsed) {
        panic!("splatrefine {}: {e}", args.join(" "));
    }
}

/// synth → prune → train → refine → render → eval → report in `root`, with
/// a small scene and a short schedule. Returns the report and both eval files.
pub fn run_pipeline(root: &Path, seed: u64, iterations: usize) -> (String, String, String) {
    let p = |s: &str| root.join(s).to_string_lossy().into_owned();
    std::fs::write(
        root.join("spec.txt"),
        "n_gaussians = 120\nwidth = 32\nheight = 32\nn_cameras = 10\ntest_fraction = 0.2\n",
    )
    .unwrap();
    std::fs::write(root.join("train.txt"), format!("train.iterations = {iterations}\n")).unwrap();
    let s = seed.to_string();
    ok(&["--seed", &s, "synth", "--spec", &p("spec.txt"), "--out", &p("scene")]);
    ok(&["prune", "--in", &p("scene/scene.ply"), "--out", &p("scene/pruned.ply"), "--report", &p("prune.csv")]);
    ok(&[
        "--seed", &s, "train", "--scenes", &p("scene"), "--config", &p("train.txt"), "--checkpoint", &p("model.ckpt"),
        "--log", &p("train.log"),
    ]);
    ok(&["refine", "--in", &p("scene/pruned.ply"), "--checkpoint", &p("model.ckpt"), "--out", &p("refined.ply")]);
    let run_dir = root.join("runs/seed");
    std::fs::create_dir_all(&run_dir).unwrap();
    for (ply, name) in [("scene/pruned.ply", "pruned"), ("refined.ply", "refined")] {
        let renders = p(&format!("renders_{name}"));
        ok(&["render", "--in", &p(ply), "--cameras", &p("scene/cameras.txt"), "--out", &renders, "--float-dump", "--views", "test"]);
        let report = run_dir.join(format!("{name}.txt")).to_string_lossy().into_owned();
        ok(&["eval", "--renders", &renders, "--targets", &p("scene/targets"), "--report", &report]);
    }
    ok(&["report", "--runs", &p("runs"), "--out", &p("report.md")]);
    let read = |f: &Path| std::fs::read_to_string(f).unwrap();
    (read(&root.join("report.md")), read(&run_dir.join("pruned.txt")), read(&run_dir.join("refined.txt")))
}
