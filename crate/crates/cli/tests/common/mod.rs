#![allow(dead_code)]

use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::process::Output;
use std::sync::atomic::AtomicBool;

use clap::Parser;
use pocketlm_cli::{execute, Cli, CliError};
use pocketlm_core::quant::DType;
use pocketlm_core::synth::TinySpec;

pub const BIN: &str = env!("CARGO_BIN_EXE_pocketlm");

pub fn data_path(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

pub fn tiny_spec(dtype: DType) -> TinySpec {
    TinySpec {
        ctx_max: 512,
        dtype,
        ..TinySpec::default()
    }
}

/// Writes a tiny model into `dir` and returns its path.
pub fn write_model(dir: &Path, name: &str, spec: &TinySpec) -> PathBuf {
    let path = dir.join(name);
    spec.build().save(&path).unwrap();
    path
}

/// Runs the command line in-process with `stdin` as input.
pub fn run_cli(args: &[&str], stdin: &str) -> (Result<(), CliError>, String) {
    let cli = Cli::try_parse_from(std::iter::once("pocketlm").chain(args.iter().copied())).unwrap();
    let mut input = Cursor::new(stdin.as_bytes().to_vec());
    let mut out = Vec::new();
    let r = execute(cli, &mut input, &mut out, &AtomicBool::new(false));
    (r, String::from_utf8(out).unwrap())
}

pub fn run_bin(args: &[&str]) -> Output {
    std::process::Command::new(BIN).args(args).output().unwrap()
}

pub fn check_or_bless(path: &Path, actual: &str) {
    if std::env::var_os("POCKETLM_BLESS").is_some() {
        std::fs::write(path, actual).unwrap();
        return;
    }
    let expected = std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("{}: {e}; rerun with POCKETLM_BLESS=1", path.display()));
    assert_eq!(actual, expected, "{} is stale", path.display());
}
