//! Shared fixture for binary-level tests: a small two-community dataset
//! plus a config tuned to train in well under a second.

use std::path::PathBuf;
use std::process::{Command, Output};

use tempfile::TempDir;

pub struct Fixture {
    pub dir: TempDir,
    pub config: PathBuf,
}

impl Fixture {
    pub fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }
}

/// Twelve users in two blocks of six, each block interacting with its own
/// ten of twenty items, so clusters have an obvious two-community truth.
/// `extra` is appended to the config; later values win.
pub fn setup(extra: &str) -> Fixture {
    let dir = tempfile::tempdir().expect("tempdir");
    let root = dir.path();

    let mut inter = String::new();
    for u in 0..12u32 {
        let base = if u < 6 { 0 } else { 10 };
        for i in 0..10u32 {
            inter.push_str(&format!("u{:02}\ti{:02}\n", u, base + i));
        }
    }
    std::fs::write(root.join("interactions.tsv"), inter).expect("write interactions");

    let mut tags = String::new();
    for i in 0..20u32 {
        let t = if i < 10 {
            "electronic|synth"
        } else {
            "folk|acoustic"
        };
        tags.push_str(&format!("i{:02}\t{}\n", i, t));
    }
    std::fs::write(root.join("tags.tsv"), tags).expect("write tags");

    let config = root.join("ecf.conf");
    let text = format!(
        "[data]\n\
         interactions = {root}/interactions.tsv\n\
         tags = {root}/tags.tsv\n\
         dir = {root}/prepared\n\
         kcore = 3\n\
         min_tag_items = 2\n\
         [model]\n\
         num_clusters = 4\n\
         embed_dim = 8\n\
         item_top_m = 2\n\
         user_top_n = 2\n\
         tags_per_cluster = 2\n\
         [train]\n\
         epochs_max = 12\n\
         batch_size = 128\n\
         patience = 12\n\
         eval_k = 5\n\
         learning_rate = 0.02\n\
         seed = 7\n\
         forest_size = 2\n\
         [output]\n\
         dir = {root}/models\n\
         {extra}\n",
        root = root.display(),
        extra = extra
    );
    std::fs::write(&config, text).expect("write config");
    Fixture { dir, config }
}

fn ecf_cmd(fx: &Fixture) -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_ecf"));
    cmd.arg("--config").arg(&fx.config);
    cmd
}

pub fn ecf(fx: &Fixture, args: &[&str]) -> Output {
    ecf_cmd(fx).args(args).output().expect("run ecf binary")
}

pub fn run_ok(fx: &Fixture, args: &[&str]) -> String {
    let out = ecf(fx, args);
    assert!(
        out.status.success(),
        "command {:?} failed\nstdout: {}\nstderr: {}",
        args,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf8 stdout")
}

/// Runs with logging off so stderr carries nothing but the error line,
/// then checks the single-line contract and the expected fragment.
pub fn run_err(fx: &Fixture, args: &[&str], needle: &str) -> String {
    let out = ecf_cmd(fx)
        .env("RUST_LOG", "off")
        .args(args)
        .output()
        .expect("run ecf binary");
    assert!(
        !out.status.success(),
        "command {:?} unexpectedly succeeded\nstdout: {}",
        args,
        String::from_utf8_lossy(&out.stdout)
    );
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    let line = stderr.trim_end();
    assert!(
        line.starts_with("error: ") && !line.contains('\n'),
        "expected one `error:` line, got {:?}",
        stderr
    );
    assert!(
        line.contains(needle),
        "error {:?} does not mention {:?}",
        line,
        needle
    );
    stderr
}
