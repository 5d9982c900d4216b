#![allow(dead_code)]

pub mod oracle;

use std::path::PathBuf;
use std::sync::OnceLock;

use snnbench::ann::AnnModel;
use snnbench::bench::{resolve_network, DataStore, NetworkSource};
use snnbench::mnist_data::MnistSplits;

/// `MNIST_DIR`, or the copy shipped with the workspace.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn store() -> &'static DataStore {
    static STORE: OnceLock<DataStore> = OnceLock::new();
    STORE.get_or_init(|| DataStore::new(mnist_dir()))
}

/// 89-input splits.
pub fn pooled() -> &'static MnistSplits {
    store().pooled().expect("MNIST files (set MNIST_DIR)")
}

fn builtin(name: &str) -> AnnModel {
    let src = NetworkSource::Builtin { name: name.into(), train: None };
    resolve_network(&src, store()).expect("training a builtin network")
}

/// The 89x100x10 non-negative hinge-trained network.
pub fn spikey() -> &'static AnnModel {
    static M: OnceLock<AnnModel> = OnceLock::new();
    M.get_or_init(|| builtin("spikey"))
}

pub fn spikey_softmax() -> &'static AnnModel {
    static M: OnceLock<AnnModel> = OnceLock::new();
    M.get_or_init(|| builtin("spikey_softmax"))
}
