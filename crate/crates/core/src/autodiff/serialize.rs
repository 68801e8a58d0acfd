//! Binary container for named f32 arrays:
//!
//! ```text
//! "UCK1" | u32 version | u32 header_len | header (UTF-8 JSON) | u32 block_count |
//! block*: u32 name_len | name | u32 rank | u32 dims[rank] | f32 payload[prod(dims)]
//! ```
//! All integers and floats little-endian.

use crate::error::{bail, Error, Result};

pub const CKPT_MAGIC: &[u8; 4] = b"UCK1";
pub const CKPT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

pub fn encode(header: &str, blocks: &[Block]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.name.len() as u32).to_le_bytes());
        out.extend_from_slice(b.name.as_bytes());
        out.extend_from_slice(&(b.shape.len() as u32).to_le_bytes());
        for &d in &b.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &b.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Truncated {
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
}

pub fn decode(bytes: &[u8]) -> Result<(String, Vec<Block>)> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        bail!(Format, "not a checkpoint (bad magic)");
    }
    let version = r.u32()? as u32;
    if version != CKPT_VERSION {
        bail!(Format, "unsupported checkpoint version {version}");
    }
    let hlen = r.u32()?;
    let header = std::str::from_utf8(r.take(hlen)?)
        .map_err(|e| Error::Format(format!("header not UTF-8: {e}")))?
        .to_string();
    let count = r.u32()?;
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        let nlen = r.u32()?;
        let name = std::str::from_utf8(r.take(nlen)?)
            .map_err(|e| Error::Format(format!("block name not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let data = r
            .take(n * 4)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        blocks.push(Block { name, shape, data });
    }
    if r.pos != bytes.len() {
        bail!(Format, "{} trailing bytes after last block", bytes.len() - r.pos);
    }
    Ok((header, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_and_truncation() {
        let blocks = vec![
            Block {
                name: "g.enc0.kernel".into(),
                shape: vec![2, 1, 3, 3],
                data: (0..18).map(|i| i as f32 * 0.25 - 1.0).collect(),
            },
            Block {
                name: "scalar".into(),
                shape: vec![],
                data: vec![7.5],
            },
        ];
        let bytes = encode("{\"iter\":3}", &blocks);
        let (h, back) = decode(&bytes).unwrap();
        assert_eq!(h, "{\"iter\":3}");
        assert_eq!(back, blocks);
        assert!(matches!(decode(&bytes[..bytes.len() - 1]), Err(Error::Truncated { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
    }
}
