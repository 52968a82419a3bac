//! Precomputed concept vectors keyed by entity id.
//!
//! `CFLT` layout (little-endian): magic, version u16, dim_o u32, n u32,
//! entry count u64, CF fingerprint (32 raw bytes), LM fingerprint (32 raw
//! bytes); then per entry: qid byte length u16, qid bytes, `n * dim_o`
//! float32. Entries are sorted by qid. A JSON sidecar lists the excluded
//! (isolated) entities and the SHA-256 of the table file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{put_f32s, put_u16, put_u32, put_u64, sha256_hex, Reader};
use crate::conceptformer::{self, ConceptFormerParams};
use crate::error::{Error, Result};
use crate::graph_store::StarGraphs;
use crate::prompting::{concept_vectors, LabelEmbeddings};
use crate::tensor::Matrix;
use crate::toy_lm::{io as lm_io, LmParams};

const MAGIC: &[u8; 4] = b"CFLT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct ConceptTable {
    pub dim_o: usize,
    pub n: usize,
    pub cf_fingerprint: String,
    pub lm_fingerprint: String,
    pub entries: BTreeMap<String, Matrix<f32>>,
    /// SHA-256 of the serialized table.
    pub file_sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TableSidecar {
    pub version: u16,
    pub entries: usize,
    pub excluded: Vec<String>,
    pub top_m: usize,
    pub cf_fingerprint: String,
    pub lm_fingerprint: String,
    pub file_sha256: String,
}

fn hex32(what: &str, s: &str) -> Result<[u8; 32]> {
    let bytes = hex::decode(s).map_err(|e| Error::Format(format!("{what} fingerprint {s:?}: {e}")))?;
    bytes
        .try_into()
        .map_err(|_| Error::Format(format!("{what} fingerprint {s:?} is not 32 bytes")))
}

impl ConceptTable {
    pub fn lookup(&self, qid: &str) -> Option<&Matrix<f32>> {
        self.entries.get(qid)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u16(&mut out, VERSION);
        put_u32(&mut out, self.dim_o as u32);
        put_u32(&mut out, self.n as u32);
        put_u64(&mut out, self.entries.len() as u64);
        out.extend_from_slice(&hex32("CF", &self.cf_fingerprint)?);
        out.extend_from_slice(&hex32("LM", &self.lm_fingerprint)?);
        for (qid, m) in &self.entries {
            let len = u16::try_from(qid.len())
                .map_err(|_| Error::Format(format!("qid {qid} longer than 65535 bytes")))?;
            put_u16(&mut out, len);
            out.extend_from_slice(qid.as_bytes());
            put_f32s(&mut out, m.data.iter().copied());
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes, "CFLT table");
        r.expect_magic(MAGIC)?;
        let version = r.u16()?;
        if version != VERSION {
            return Err(Error::Format(format!("CFLT version {version}, expected {VERSION}")));
        }
        let dim_o = r.u32()? as usize;
        let n = r.u32()? as usize;
        let count = r.u64()?;
        let cf_fingerprint = hex::encode(r.take(32)?);
        let lm_fingerprint = hex::encode(r.take(32)?);
        let mut entries = BTreeMap::new();
        let width = n * dim_o;
        for _ in 0..count {
            let len = r.u16()? as usize;
            let qid = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("qid is not UTF-8".into()))?
                .to_string();
            if r.remaining() < 4 * width {
                return Err(Error::Integrity {
                    qid,
                    message: format!("entry holds {} bytes, expected {}", r.remaining(), 4 * width),
                });
            }
            let data = r.f32s(width)?;
            if entries.insert(qid.clone(), Matrix::from_vec(n, dim_o, data)).is_some() {
                return Err(Error::Integrity {
                    qid,
                    message: "duplicate entry".into(),
                });
            }
        }
        r.finish()?;
        Ok(Self {
            dim_o,
            n,
            cf_fingerprint,
            lm_fingerprint,
            entries,
            file_sha256: sha256_hex(bytes),
        })
    }

    /// Fails unless the table was built from these exact parameters.
    pub fn check_provenance(&self, cf_fingerprint: &str, lm_fingerprint: &str) -> Result<()> {
        for (what, have, want) in [
            ("ConceptFormer", &self.cf_fingerprint, cf_fingerprint),
            ("LM", &self.lm_fingerprint, lm_fingerprint),
        ] {
            if have != want {
                return Err(Error::Fingerprint {
                    what: format!("{what} parameters of concept table"),
                    expected: want.to_string(),
                    found: have.clone(),
                });
            }
        }
        Ok(())
    }
}

/// Concept vectors for every center with at least one neighbor, plus the
/// sorted list of isolated centers.
pub fn build_table(
    stars: &StarGraphs,
    cf: &ConceptFormerParams<f32>,
    lm: &LmParams<f32>,
    labels: &LabelEmbeddings,
    top_m: usize,
) -> Result<(ConceptTable, Vec<String>)> {
    if cf.dim_o != lm.dim() {
        return Err(Error::WidthMismatch {
            expected: lm.dim(),
            actual: cf.dim_o,
        });
    }
    if cf.dim_i != labels.dim {
        return Err(Error::WidthMismatch {
            expected: labels.dim,
            actual: cf.dim_i,
        });
    }
    let mut entries = BTreeMap::new();
    let mut excluded = Vec::new();
    for (qid, star) in stars {
        match concept_vectors(cf, star, labels, top_m)? {
            Some(v) => {
                entries.insert(qid.clone(), v);
            }
            None => excluded.push(qid.clone()),
        }
    }
    let mut table = ConceptTable {
        dim_o: cf.dim_o,
        n: cf.n(),
        cf_fingerprint: conceptformer::fingerprint(cf),
        lm_fingerprint: lm_io::fingerprint(lm),
        entries,
        file_sha256: String::new(),
    };
    table.file_sha256 = sha256_hex(&table.to_bytes()?);
    Ok((table, excluded))
}

pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    path.as_ref().with_extension("json")
}

/// Writes the table and its sidecar; returns the sidecar.
pub fn write_table(
    path: impl AsRef<Path>,
    table: &ConceptTable,
    excluded: &[String],
    top_m: usize,
) -> Result<TableSidecar> {
    let path = path.as_ref();
    let bytes = table.to_bytes()?;
    std::fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    let sidecar = TableSidecar {
        version: VERSION,
        entries: table.len(),
        excluded: excluded.to_vec(),
        top_m,
        cf_fingerprint: table.cf_fingerprint.clone(),
        lm_fingerprint: table.lm_fingerprint.clone(),
        file_sha256: sha256_hex(&bytes),
    };
    let side = sidecar_path(path);
    let mut text = serde_json::to_string_pretty(&sidecar)?;
    text.push('\n');
    std::fs::write(&side, text).map_err(|e| Error::io(&side, e))?;
    Ok(sidecar)
}

/// Loads a table, checking the file hash recorded in its sidecar.
pub fn load_table(path: impl AsRef<Path>) -> Result<(ConceptTable, TableSidecar)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let text = std::fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: TableSidecar = serde_json::from_str(&text)?;
    let found = sha256_hex(&bytes);
    if found != sidecar.file_sha256 {
        return Err(Error::Fingerprint {
            what: format!("table file {}", path.display()),
            expected: sidecar.file_sha256,
            found,
        });
    }
    Ok((ConceptTable::from_bytes(&bytes)?, sidecar))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ConceptTable {
        let mut entries = BTreeMap::new();
        entries.insert("Q2".to_string(), Matrix::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
        entries.insert("Q10".to_string(), Matrix::from_vec(2, 3, vec![0.5; 6]));
        ConceptTable {
            dim_o: 3,
            n: 2,
            cf_fingerprint: "ab".repeat(32),
            lm_fingerprint: "cd".repeat(32),
            entries,
            file_sha256: String::new(),
        }
    }

    #[test]
    fn round_trip() {
        let t = table();
        let bytes = t.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"CFLT");
        let back = ConceptTable::from_bytes(&bytes).unwrap();
        assert_eq!(back.entries, t.entries);
        assert_eq!(back.cf_fingerprint, t.cf_fingerprint);
        assert_eq!(back.lookup("Q2").unwrap().row(1), &[4.0, 5.0, 6.0]);
        assert!(back.lookup("Q99").is_none());
    }

    #[test]
    fn truncated_entry_names_the_qid() {
        let bytes = table().to_bytes().unwrap();
        let err = ConceptTable::from_bytes(&bytes[..bytes.len() - 4]).unwrap_err();
        // entries are sorted, so "Q2" is the last one
        match err {
            Error::Integrity { qid, .. } => assert_eq!(qid, "Q2"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn provenance_mismatch_fails() {
        let t = table();
        assert!(t.check_provenance(&"ab".repeat(32), &"cd".repeat(32)).is_ok());
        assert!(matches!(
            t.check_provenance(&"00".repeat(32), &"cd".repeat(32)),
            Err(Error::Fingerprint { .. })
        ));
    }

    #[test]
    fn sidecar_hash_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.cflt");
        write_table(&path, &table(), &["Q7".to_string()], 100).unwrap();
        let (loaded, side) = load_table(&path).unwrap();
        assert_eq!(side.excluded, vec!["Q7".to_string()]);
        assert_eq!(loaded.len(), 2);
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 1;
        std::fs::write(&path, bytes).unwrap();
        assert!(matches!(load_table(&path), Err(Error::Fingerprint { .. })));
    }
}
