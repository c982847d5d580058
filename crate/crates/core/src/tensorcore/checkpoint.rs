//! Binary checkpoint files.
//!
//! Layout (all integers little-endian):
//! ```text
//! magic   b"STKCKPT\0"
//! version u32
//! count   u32                      number of graph sections
//! per section:
//!   name_len u32, name utf-8
//!   topo_len u64, topology JSON    nodes + parameter registry
//!   raw f64 parameter buffers in registry order
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Graph, Tensor4, Topology};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STKCKPT\0";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut out: W, sections: &[(&str, &Graph)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(sections.len() as u32).to_le_bytes())?;
    for (name, graph) in sections {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        let topo = serde_json::to_vec(&graph.topology())?;
        out.write_all(&(topo.len() as u64).to_le_bytes())?;
        out.write_all(&topo)?;
        for p in graph.params() {
            for v in p.data() {
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Vec<(String, Graph)>> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u32(&mut r)?;
    let mut sections = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = read_u32(&mut r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let topo_len = read_u64(&mut r)? as usize;
        let mut topo = vec![0u8; topo_len];
        r.read_exact(&mut topo)?;
        let topo: Topology = serde_json::from_slice(&topo)?;
        let mut params = Vec::with_capacity(topo.params.len());
        for info in &topo.params {
            let mut buf = vec![0u8; info.shape.len() * 8];
            r.read_exact(&mut buf)?;
            let data = buf
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            params.push(Tensor4::from_vec(info.shape, data)?);
        }
        sections.push((name, Graph::from_parts(topo, params)?));
    }
    Ok(sections)
}

pub fn save_checkpoint(path: &Path, sections: &[(&str, &Graph)]) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), sections)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Graph)>> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn roundtrip_preserves_graph() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut g = Graph::new();
        let x = g.input("x", 3).unwrap();
        let c = g.conv3x3("c", x, 4, &mut rng).unwrap();
        let p = g.maxpool2x2("p", c).unwrap();
        g.deconv2x2("d", p, 2, &mut rng).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &[("net", &g)]).unwrap();
        let back = read_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].0, "net");
        assert_eq!(back[0].1, g);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_checkpoint(&b"not a checkpoint"[..]).is_err());
    }
}
