//! `inspect`: human-readable dump of a container.

use std::io::{self, Write};

use pocketlm_core::container::VERSION;
use pocketlm_core::ModelContainer;

pub fn dump(c: &ModelContainer, out: &mut dyn Write) -> io::Result<()> {
    writeln!(out, "PLM1 version {VERSION}, alignment {}", c.alignment())?;
    writeln!(out)?;
    writeln!(out, "metadata ({} keys)", c.metadata().len())?;
    let key_width = c.metadata().keys().map(|k| k.len()).max().unwrap_or(0);
    for (k, v) in c.metadata() {
        writeln!(out, "  {k:<key_width$}  {:<6} {v}", v.value_type().to_string())?;
    }
    writeln!(out)?;
    writeln!(out, "tensors ({})", c.tensors().len())?;
    let name_width = c.tensors().iter().map(|t| t.name.len()).max().unwrap_or(4).max(4);
    writeln!(
        out,
        "  {:<name_width$}  {:<20}  {:<5}  {:>12}  {:>12}",
        "name", "dims", "dtype", "bytes", "offset"
    )?;
    let (mut elements, mut bytes) = (0u64, 0u64);
    for t in c.tensors() {
        let dims = format!("{:?}", t.dims);
        writeln!(
            out,
            "  {:<name_width$}  {dims:<20}  {:<5}  {:>12}  {:>12}",
            t.name,
            t.dtype.name(),
            t.byte_len(),
            t.offset
        )?;
        elements += t.n_elements();
        bytes += t.byte_len();
    }
    writeln!(out)?;
    let bpw = if elements == 0 {
        0.0
    } else {
        8.0 * bytes as f64 / elements as f64
    };
    writeln!(
        out,
        "total: {} tensors, {elements} elements, {bytes} bytes, {bpw:.3} bits/weight",
        c.tensors().len()
    )
}
