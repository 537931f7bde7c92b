//! Named-tensor container used for checkpoints and dataset dumps.
//!
//! ```text
//! JARCKPT 1
//! tensors <count>
//! <name> <rank> <dim>...      one line per tensor
//! END
//! <f64 little-endian values of every tensor, in header order>
//! ```

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use jar_core::params::ParamStore;
use jar_core::tasks::SyntheticSample;
use jar_core::tensor::Tensor;

use crate::error::{CliError, Result};

pub const MAGIC: &str = "JARCKPT 1";

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Usage(format!("malformed checkpoint: {}", msg.into()))
}

pub fn write_tensors<W: Write>(out: &mut W, tensors: &[(String, &Tensor)]) -> std::io::Result<()> {
    writeln!(out, "{MAGIC}")?;
    writeln!(out, "tensors {}", tensors.len())?;
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(out, "{name} {} {}", dims.len(), dims.join(" "))?;
    }
    writeln!(out, "END")?;
    for (_, t) in tensors {
        for v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_tensors<R: Read>(input: R) -> Result<Vec<(String, Tensor)>> {
    let mut input = BufReader::new(input);
    let mut line = String::new();
    let mut next_line = |input: &mut BufReader<R>| -> Result<String> {
        line.clear();
        let n = input.read_line(&mut line).map_err(|e| bad(e.to_string()))?;
        if n == 0 {
            return Err(bad("unexpected end of header"));
        }
        Ok(line.trim_end_matches('\n').to_string())
    };
    if next_line(&mut input)? != MAGIC {
        return Err(bad("missing magic line"));
    }
    let count: usize = next_line(&mut input)?
        .strip_prefix("tensors ")
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| bad("missing tensor count"))?;
    let mut header = Vec::with_capacity(count);
    for _ in 0..count {
        let l = next_line(&mut input)?;
        let mut parts = l.split(' ');
        let name = parts.next().filter(|n| !n.is_empty()).ok_or_else(|| bad("empty tensor name"))?;
        let rank: usize = parts.next().and_then(|r| r.parse().ok()).ok_or_else(|| bad(format!("bad rank for `{name}`")))?;
        let dims: Vec<usize> = parts.map(|d| d.parse().map_err(|_| bad(format!("bad dimension for `{name}`")))).collect::<Result<_>>()?;
        if dims.len() != rank {
            return Err(bad(format!("`{name}` declares rank {rank} but lists {} dimensions", dims.len())));
        }
        header.push((name.to_string(), dims));
    }
    if next_line(&mut input)? != "END" {
        return Err(bad("missing END"));
    }
    let mut out = Vec::with_capacity(count);
    for (name, dims) in header {
        let numel: usize = dims.iter().product();
        let mut bytes = vec![0u8; numel * 8];
        input.read_exact(&mut bytes).map_err(|_| bad(format!("data of `{name}` is truncated")))?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
        out.push((name, Tensor::new(&dims, data)?));
    }
    let mut rest = [0u8; 1];
    if input.read(&mut rest).map_err(|e| bad(e.to_string()))? != 0 {
        return Err(bad("trailing bytes after the last tensor"));
    }
    Ok(out)
}

fn write_file(path: &Path, tensors: &[(String, &Tensor)]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    write_tensors(&mut w, tensors)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path, e))
}

pub fn save_store(path: &Path, store: &ParamStore) -> Result<()> {
    let tensors: Vec<(String, &Tensor)> = store.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    write_file(path, &tensors)
}

/// Overwrites every parameter of `store` from the file; names and shapes
/// must match exactly.
pub fn load_into(path: &Path, store: &mut ParamStore) -> Result<()> {
    let file = std::fs::File::open(path).map_err(|e| CliError::io(path, e))?;
    let tensors = read_tensors(file)?;
    if tensors.len() != store.len() {
        return Err(bad(format!("{} tensors for a model with {} parameters", tensors.len(), store.len())));
    }
    for (name, t) in tensors {
        let id = store.id(&name).ok_or_else(|| bad(format!("unknown parameter `{name}`")))?;
        if store.get(id).shape() != t.shape() {
            return Err(bad(format!("`{name}` has shape {:?}, model expects {:?}", t.shape(), store.get(id).shape())));
        }
        store.set(id, t.data())?;
    }
    Ok(())
}

/// Writes samples as `sample.<i>.image`, `.question` and `.answer` tensors.
pub fn save_samples(path: &Path, samples: &[SyntheticSample]) -> Result<()> {
    let mut owned = Vec::with_capacity(samples.len() * 2);
    for s in samples {
        let q = Tensor::new(&[s.question.len()], s.question.iter().map(|&t| t as f64).collect())?;
        owned.push((q, Tensor::scalar(s.answer as f64)));
    }
    let mut tensors = Vec::with_capacity(samples.len() * 3);
    for (i, (s, (q, a))) in samples.iter().zip(&owned).enumerate() {
        tensors.push((format!("sample.{i}.image"), &s.image));
        tensors.push((format!("sample.{i}.question"), q));
        tensors.push((format!("sample.{i}.answer"), a));
    }
    write_file(path, &tensors)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn roundtrip(tensors: &[(String, &Tensor)]) -> Vec<(String, Tensor)> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, tensors).unwrap();
        read_tensors(buf.as_slice()).unwrap()
    }

    #[test]
    fn values_survive_bit_exactly() {
        let a = Tensor::new(&[2, 3], vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 0.1]).unwrap();
        let b = Tensor::scalar(3.0);
        let back = roundtrip(&[("fuse.alpha".into(), &a), ("b".into(), &b)]);
        assert_eq!(back[0].0, "fuse.alpha");
        assert_eq!(back[0].1.shape(), &[2, 3]);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back[0].1), bits(&a));
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn header_is_readable_text() {
        let a = Tensor::zeros(&[4, 2]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".into(), &a)]).unwrap();
        assert!(buf.starts_with(b"JARCKPT 1\ntensors 1\nw 2 4 2\nEND\n"));
        assert_eq!(buf.len(), "JARCKPT 1\ntensors 1\nw 2 4 2\nEND\n".len() + 64);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let a = Tensor::zeros(&[2]);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w".into(), &a)]).unwrap();
        assert!(read_tensors(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_tensors(extra.as_slice()).is_err());
        assert!(read_tensors(&b"JARCKPT 2\n"[..]).is_err());
        assert!(read_tensors(&b"JARCKPT 1\ntensors 1\nw 2 4\nEND\n"[..]).is_err());
    }
}
