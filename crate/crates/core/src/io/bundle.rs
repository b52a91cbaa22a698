//! Ordered tensor bundles: a versioned text manifest of names followed by
//! one 64-bit GTEN record per name, in manifest order.
//!
//! ```text
//! GAMSEG-BUNDLE 1
//! <count>
//! <name>            (count lines)
//! <GTEN records>
//! ```

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::gten::{read_gten, write_gten, DType};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const BUNDLE_MAGIC: &str = "GAMSEG-BUNDLE 1";

pub fn write_bundle_to<W: Write>(w: &mut W, entries: &[(String, Tensor)]) -> Result<()> {
    let fmt = |e: std::io::Error| Error::Format(e.to_string());
    writeln!(w, "{BUNDLE_MAGIC}").map_err(fmt)?;
    writeln!(w, "{}", entries.len()).map_err(fmt)?;
    for (name, _) in entries {
        if name.is_empty() || name.contains(char::is_whitespace) {
            return Err(Error::Format(format!("invalid tensor name {name:?}")));
        }
        writeln!(w, "{name}").map_err(fmt)?;
    }
    for (_, t) in entries {
        write_gten(w, t, DType::F64)?;
    }
    Ok(())
}

pub fn read_bundle_from<R: BufRead>(r: &mut R) -> Result<Vec<(String, Tensor)>> {
    let mut line = String::new();
    let mut next_line = |r: &mut R| -> Result<String> {
        line.clear();
        r.read_line(&mut line)
            .map_err(|e| Error::Format(e.to_string()))?;
        Ok(line.trim_end_matches('\n').to_string())
    };
    let magic = next_line(r)?;
    if magic != BUNDLE_MAGIC {
        return Err(Error::Format(format!("not a tensor bundle (header {magic:?})")));
    }
    let count: usize = next_line(r)?
        .parse()
        .map_err(|_| Error::Format("bad bundle count".into()))?;
    let names = (0..count).map(|_| next_line(r)).collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(count);
    for name in names {
        let t = read_gten(r)?;
        out.push((name, t));
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest).map_err(|e| Error::Format(e.to_string()))? != 0 {
        return Err(Error::Format("trailing bytes after bundle".into()));
    }
    Ok(out)
}

pub fn write_bundle(path: &Path, entries: &[(String, Tensor)]) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    write_bundle_to(&mut w, entries)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_bundle(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_bundle_from(&mut BufReader::new(f))
}
