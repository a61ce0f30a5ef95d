//! Binary weight files: a magic tag, a text header listing each tensor's
//! name, dtype and shape, then the raw little-endian values in header order.

use std::collections::HashMap;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::element::Element;
use crate::nn::Module;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VXTWGT01";

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

pub fn save<T: Element>(module: &dyn Module<T>, path: &Path) -> io::Result<()> {
    let slots = module.named_slots();
    let mut header = String::new();
    for (name, slot) in &slots {
        let shape: Vec<String> = slot.value().shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{name}\t{}\t{}\n", T::DTYPE, shape.join(",")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(header.as_bytes())?;
    for (_, slot) in &slots {
        for &v in slot.value().data() {
            match T::DTYPE {
                "f64" => w.write_all(&v.f64().to_le_bytes())?,
                _ => w.write_all(&(v.f64() as f32).to_le_bytes())?,
            }
        }
    }
    w.flush()
}

/// Reads every tensor in the file, keyed by name.
pub fn read<T: Element>(path: &Path) -> io::Result<HashMap<String, Tensor<T>>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(invalid(format!("{} is not a weight file", path.display())));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header)?;
    let header = String::from_utf8(header).map_err(|_| invalid("weight header is not UTF-8"))?;
    let mut out = HashMap::new();
    for line in header.lines() {
        let mut fields = line.split('\t');
        let (Some(name), Some(dtype), Some(dims)) = (fields.next(), fields.next(), fields.next()) else {
            return Err(invalid(format!("malformed weight header line '{line}'")));
        };
        let shape: Vec<usize> = if dims.is_empty() {
            Vec::new()
        } else {
            dims.split(',').map(|d| d.parse().map_err(|_| invalid(format!("bad dim in '{line}'")))).collect::<Result<_, _>>()?
        };
        let n: usize = shape.iter().product();
        let data: Vec<T> = match dtype {
            "f64" => {
                let mut buf = vec![0u8; n * 8];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(8).map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap()))).collect()
            }
            "f32" => {
                let mut buf = vec![0u8; n * 4];
                r.read_exact(&mut buf)?;
                buf.chunks_exact(4).map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64)).collect()
            }
            other => return Err(invalid(format!("unsupported dtype '{other}'"))),
        };
        out.insert(name.to_string(), Tensor::from_vec(data, &shape));
    }
    Ok(out)
}

/// Loads a file into `module`; names and shapes must match exactly.
pub fn load<T: Element>(module: &dyn Module<T>, path: &Path) -> io::Result<()> {
    let mut stored = read::<T>(path)?;
    for (name, slot) in module.named_slots() {
        let t = stored.remove(&name).ok_or_else(|| invalid(format!("weight file lacks '{name}'")))?;
        if t.shape() != slot.value().shape() {
            return Err(invalid(format!("'{name}' has shape {:?}, model expects {:?}", t.shape(), slot.value().shape())));
        }
        slot.set(t);
    }
    if let Some(extra) = stored.keys().next() {
        return Err(invalid(format!("weight file has unexpected tensor '{extra}'")));
    }
    Ok(())
}
