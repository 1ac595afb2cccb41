//! Binary checkpoint of a trained state.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! 5 bytes    magic "DGPN1"
//! u32        length of the problem id, then its UTF-8 bytes
//! u32        number of layer widths L, then L x u32 widths
//! u32        number of unknowns K, then K x (u32 length, UTF-8 name)
//! u64        number of values N = M + K
//! N x f64    network parameters in flat order, then the K unknowns
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::mlp::{parameter_count, TrainableState};
use crate::pde_suite::ProblemId;

pub const MAGIC: &[u8; 5] = b"DGPN1";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub problem: ProblemId,
    pub state: TrainableState,
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    put_u32(out, s.len())?;
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub fn encode(problem: ProblemId, state: &TrainableState) -> Result<Vec<u8>> {
    let flat = state.to_flat();
    let mut out = Vec::with_capacity(64 + flat.len() * 8);
    out.extend_from_slice(MAGIC);
    put_str(&mut out, problem.as_str())?;
    let widths = state.network.widths();
    put_u32(&mut out, widths.len())?;
    for &w in widths {
        put_u32(&mut out, w)?;
    }
    put_u32(&mut out, state.inverse.len())?;
    for name in &state.inverse.names {
        put_str(&mut out, name)?;
    }
    out.extend_from_slice(&(flat.len() as u64).to_le_bytes());
    for v in flat {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.u32(what)?;
        String::from_utf8(self.take(n, what)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not valid UTF-8")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MAGIC.len(), "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not a checkpoint file".into()));
    }
    let problem: ProblemId = r
        .string("problem id")?
        .parse()
        .map_err(|e| Error::Checkpoint(format!("problem id: {e}")))?;
    let n_widths = r.u32("width count")?;
    let widths = (0..n_widths).map(|_| r.u32("widths")).collect::<Result<Vec<_>>>()?;
    let n_names = r.u32("unknown count")?;
    let names = (0..n_names).map(|_| r.string("unknown name")).collect::<Result<Vec<_>>>()?;
    let n = u64::from_le_bytes(r.take(8, "value count")?.try_into().unwrap()) as usize;
    let m = parameter_count(&widths).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if n != m + names.len() {
        return Err(Error::Checkpoint(format!("header declares {n} values, widths and names imply {}", m + names.len())));
    }
    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("value count overflows".into()))?, "values")?;
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    let flat: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let state = TrainableState::from_flat(&widths, names, &flat)?;
    Ok(Checkpoint { problem, state })
}

pub fn save(path: &Path, problem: ProblemId, state: &TrainableState) -> Result<()> {
    fs::write(path, encode(problem, state)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{init_network, InverseParams};

    fn sample() -> TrainableState {
        TrainableState::new(
            init_network(&[2, 4, 3, 1], 8).unwrap(),
            InverseParams::new(vec!["c_sq".into()], vec![3.75]).unwrap(),
        )
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = sample();
        let bytes = encode(ProblemId::Wave, &s).unwrap();
        let c = decode(&bytes).unwrap();
        assert_eq!(c.problem, ProblemId::Wave);
        assert_eq!(c.state, s);
        assert_eq!(encode(ProblemId::Wave, &c.state).unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = encode(ProblemId::Heat, &sample()).unwrap();
        assert_eq!(&bytes[..5], b"DGPN1");
        assert_eq!(u32::from_le_bytes(bytes[5..9].try_into().unwrap()), 4);
        assert_eq!(&bytes[9..13], b"heat");
        assert_eq!(u32::from_le_bytes(bytes[13..17].try_into().unwrap()), 4);
        let values = parameter_count(&[2, 4, 3, 1]).unwrap() + 1;
        let header = 5 + 4 + 4 + 4 + 16 + 4 + 4 + 4 + 8;
        assert_eq!(bytes.len(), header + 8 * values);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode(ProblemId::Heat, &sample()).unwrap();
        for cut in [0, 3, 10, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut long = bytes;
        long.push(0);
        assert!(decode(&long).is_err());
    }
}
