//! `quantize`: float model files to block formats.

use std::io::{self, Write};
use std::path::Path;

use pocketlm_core::convert::{convert, ConvertReport};
use pocketlm_core::quant::DType;
use pocketlm_core::ModelContainer;

use crate::CliError;

/// Converts `input` to `dtype` and writes the result to `output`.
pub fn run_quantize(input: &Path, output: &Path, dtype: DType) -> Result<ConvertReport, CliError> {
    let src = ModelContainer::open(input)
        .map_err(|e| CliError::Load(format!("cannot read {}: {e}", input.display())))?;
    let (dst, report) = convert(&src, dtype).map_err(|e| CliError::Runtime(e.to_string()))?;
    dst.save(output)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", output.display())))?;
    // the written file must read back cleanly
    ModelContainer::open(output)
        .map_err(|e| CliError::Runtime(format!("{} failed validation: {e}", output.display())))?;
    Ok(report)
}

fn bits(bytes: u64, n: u64) -> f64 {
    if n == 0 {
        0.0
    } else {
        8.0 * bytes as f64 / n as f64
    }
}

pub fn print_report(r: &ConvertReport, out: &mut dyn Write) -> io::Result<()> {
    let n: u64 = r.tensors.iter().map(|t| t.n_elements).sum();
    for t in &r.tensors {
        if t.to != r.target {
            writeln!(out, "{}: {} -> {}", t.name, t.from, t.to)?;
        }
    }
    writeln!(
        out,
        "before: {} bytes, {:.2} bits/weight",
        r.bytes_in,
        bits(r.bytes_in, n)
    )?;
    writeln!(
        out,
        "after:  {} bytes, {:.2} bits/weight ({})",
        r.bytes_out,
        bits(r.bytes_out, n),
        r.target
    )
}
