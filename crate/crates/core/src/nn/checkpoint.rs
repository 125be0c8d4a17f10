//! Checkpoints: parameter tensors concatenated as `CMTT` records in
//! `params.cmtt`, plus `manifest.txt` with one `layer kind dims` line per
//! tensor in file order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{format, Result};
use crate::tensor::{read_tensor, write_tensor};

use super::network::Network;

pub const PARAMS_FILE: &str = "params.cmtt";
pub const MANIFEST_FILE: &str = "manifest.txt";

fn dims_str(d: &[usize]) -> String {
    d.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("x")
}

pub fn save_checkpoint(net: &Network, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut params = BufWriter::new(File::create(dir.join(PARAMS_FILE))?);
    let mut manifest = BufWriter::new(File::create(dir.join(MANIFEST_FILE))?);
    for (i, p) in net.params().iter().enumerate() {
        if let Some(p) = p {
            for (kind, t) in [("weight", &p.weight), ("bias", &p.bias)] {
                write_tensor(t, &mut params)?;
                writeln!(manifest, "{i} {kind} {}", dims_str(t.dims()))?;
            }
        }
    }
    params.flush()?;
    manifest.flush()?;
    Ok(())
}

/// Loads parameters into a network of the same architecture.
pub fn load_checkpoint(net: &mut Network, dir: &Path) -> Result<()> {
    let manifest = std::fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let mut lines = manifest.lines();
    let mut params = BufReader::new(File::open(dir.join(PARAMS_FILE))?);
    for (i, p) in net.params_mut().iter_mut().enumerate() {
        let Some(p) = p else { continue };
        for (kind, slot) in [("weight", &mut p.weight), ("bias", &mut p.bias)] {
            let expect = format!("{i} {kind} {}", dims_str(slot.dims()));
            if lines.next() != Some(expect.as_str()) {
                return Err(format(format!("checkpoint manifest does not match network at {expect:?}")));
            }
            let t = read_tensor(&mut params)?;
            if t.dims() != slot.dims() {
                return Err(format("checkpoint tensor shape mismatch"));
            }
            *slot = t;
        }
    }
    if lines.next().is_some() {
        return Err(format("checkpoint has more tensors than the network"));
    }
    Ok(())
}
