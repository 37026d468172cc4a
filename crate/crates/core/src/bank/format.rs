//! Binary bank layout, all integers little-endian:
//!
//! ```text
//! "IDBK" | version u32 | kind u8 | dim u32 | count u32 | provenance (u32 len + JSON)
//! count × { id (u32 len + UTF-8) | n_sentences u32 | n_values u32 | n_values × f32 }
//! ```

use std::collections::BTreeMap;

use super::{BankKind, EmbeddingBank};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"IDBK";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

pub(super) fn encode(bank: &EmbeddingBank) -> Result<Vec<u8>> {
    let mut out = Vec::with_capacity(32 + bank.len() * (bank.dim * 4 + 32));
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    out.push(match bank.kind {
        BankKind::Ie => 0,
        BankKind::Definition => 1,
    });
    put_u32(&mut out, bank.dim as u32);
    put_u32(&mut out, bank.len() as u32);
    put_str(&mut out, &serde_json::to_string(&bank.provenance)?);
    for (id, e) in &bank.entries {
        put_str(&mut out, id);
        put_u32(&mut out, e.n_sentences as u32);
        put_u32(&mut out, e.vector.len() as u32);
        for v in &e.vector {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Integrity(format!("truncated bank file at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Integrity("bank string is not UTF-8".into()))
    }
}

pub(super) fn decode(bytes: &[u8]) -> Result<EmbeddingBank> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Integrity("not an embedding bank (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Integrity(format!("unsupported bank version {version}")));
    }
    let kind = match r.take(1)?[0] {
        0 => BankKind::Ie,
        1 => BankKind::Definition,
        k => return Err(Error::Integrity(format!("unknown bank kind {k}"))),
    };
    let dim = r.u32()? as usize;
    let count = r.u32()? as usize;
    let provenance: BTreeMap<String, String> = serde_json::from_str(&r.string()?)
        .map_err(|e| Error::Integrity(format!("bad provenance: {e}")))?;
    let mut bank = EmbeddingBank::new(kind, dim);
    bank.provenance = provenance;
    for _ in 0..count {
        let id = r.string()?;
        let n_sentences = r.u32()? as usize;
        let n_values = r.u32()? as usize;
        if n_values != dim {
            return Err(Error::Integrity(format!(
                "record {id} holds {n_values} values, header says dim {dim}"
            )));
        }
        let raw = r.take(n_values * 4)?;
        let vector = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        bank.insert(&id, vector, n_sentences).map_err(|e| match e {
            Error::Integrity(m) => Error::Integrity(m),
            other => Error::Integrity(other.to_string()),
        })?;
    }
    if r.pos != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok(bank)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank() -> EmbeddingBank {
        let mut b = EmbeddingBank::new(BankKind::Ie, 3);
        b.insert("over-the-moon", vec![0.1, -2.5, 3.0], 4).unwrap();
        b.insert("hit-the-sack", vec![1e-7, 0.0, -0.0], 1).unwrap();
        b.set_provenance("checkpoint", "runs/x/best");
        b
    }

    #[test]
    fn round_trip_is_exact() {
        let b = bank();
        let back = decode(&encode(&b).unwrap()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = encode(&bank()).unwrap();
        for cut in [3, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Integrity(_))), "cut {cut}");
        }
    }

    #[test]
    fn record_dim_must_match_header() {
        let mut b = EmbeddingBank::new(BankKind::Definition, 2);
        b.insert("a", vec![1.0, 0.0], 1).unwrap();
        let mut bytes = encode(&b).unwrap();
        // Rewrite the header dim from 2 to 3.
        bytes[9..13].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Integrity(_))));
    }
}
