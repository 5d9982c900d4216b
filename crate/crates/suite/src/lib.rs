//! Fixtures and reporting for the acceptance suite.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::OnceLock;
use std::time::Duration;

use snnbench::ann::AnnModel;
use snnbench::bench::{resolve_network, DataStore, NetworkSource};
use snnbench::mnist_data::MnistSplits;

/// `MNIST_DIR`, or the copy shipped with the workspace.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist"))
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn store() -> &'static DataStore {
    static STORE: OnceLock<DataStore> = OnceLock::new();
    STORE.get_or_init(|| DataStore::new(mnist_dir()))
}

/// 89-input splits.
pub fn pooled() -> &'static MnistSplits {
    store().pooled().expect("MNIST files (set MNIST_DIR)")
}

pub fn full() -> &'static MnistSplits {
    store().full().expect("MNIST files (set MNIST_DIR)")
}

/// Trains a builtin recipe with its default schedule.
pub fn builtin(name: &str) -> AnnModel {
    let src = NetworkSource::Builtin { name: name.into(), train: None };
    resolve_network(&src, store()).unwrap_or_else(|e| panic!("training `{name}`: {e}"))
}

/// The 89x100x10 hinge-trained network, trained once per process.
pub fn spikey() -> &'static AnnModel {
    static M: OnceLock<AnnModel> = OnceLock::new();
    M.get_or_init(|| builtin("spikey"))
}

#[derive(Debug, Clone)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

/// Outcome of one acceptance criterion: a set of named checks that must all
/// hold.
#[derive(Debug, Clone)]
pub struct Verdict {
    pub id: u32,
    pub title: String,
    pub checks: Vec<Check>,
    pub elapsed: Duration,
}

impl Verdict {
    pub fn new(id: u32, title: &str) -> Self {
        Self { id, title: title.into(), checks: Vec::new(), elapsed: Duration::ZERO }
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.checks.push(Check { name: name.into(), passed, detail: detail.into() });
    }

    /// At least one check, all passed.
    pub fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.passed)
    }

    /// `criterion N (title): PASS|FAIL` followed by one indented line per
    /// check.
    pub fn render(&self) -> String {
        let mut out = format!(
            "criterion {} ({}): {} [{:.1} s]\n",
            self.id,
            self.title,
            if self.passed() { "PASS" } else { "FAIL" },
            self.elapsed.as_secs_f64()
        );
        for c in &self.checks {
            let _ = writeln!(out, "    {} {}: {}", if c.passed { "ok  " } else { "miss" }, c.name, c.detail);
        }
        out
    }
}
