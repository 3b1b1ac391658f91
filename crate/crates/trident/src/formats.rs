//! Little-endian binary containers: word embeddings (`TRIE1`) and image
//! feature stores (`TRIF1`). Values are stored as `f32`.

use std::fs;
use std::path::Path;

use trident_core::data::{FeatureStore, RawImageFeatures, StoreHeader};
use trident_core::tensor::Matrix;

use crate::error::{Error, Result};

pub const EMBEDDINGS_MAGIC: &[u8; 6] = b"TRIE1\0";
pub const STORE_MAGIC: &[u8; 6] = b"TRIF1\0";

/// Cursor over a byte buffer whose errors name what was being read.
pub(crate) struct Reader<'b> {
    buf: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    pub(crate) fn new(buf: &'b [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> std::result::Result<&'b [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        match end {
            Some(end) => {
                let s = &self.buf[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(format!("truncated file: {what} needs {n} bytes at offset {}", self.pos)),
        }
    }

    pub(crate) fn magic(&mut self, magic: &[u8; 6]) -> std::result::Result<(), String> {
        let got = self.take(6, "magic")?;
        if got != magic {
            return Err(format!("bad magic {:?}, expected {:?}", String::from_utf8_lossy(got), String::from_utf8_lossy(magic)));
        }
        Ok(())
    }

    pub(crate) fn u16(&mut self, what: &str) -> std::result::Result<u16, String> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    pub(crate) fn string(&mut self, what: &str) -> std::result::Result<String, String> {
        let n = self.u16(what)? as usize;
        String::from_utf8(self.take(n, what)?.to_vec()).map_err(|_| format!("{what} is not UTF-8"))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> std::result::Result<Vec<f64>, String> {
        let bytes = self.take(n.checked_mul(4).ok_or("size overflow")?, what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
    }

    pub(crate) fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

pub(crate) fn put_u32(out: &mut Vec<u8>, v: usize, what: &str) -> std::result::Result<(), String> {
    let v = u32::try_from(v).map_err(|_| format!("{what} {v} does not fit in u32"))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub(crate) fn put_string(out: &mut Vec<u8>, s: &str) -> std::result::Result<(), String> {
    let n = u16::try_from(s.len()).map_err(|_| format!("string of {} bytes is too long", s.len()))?;
    out.extend_from_slice(&n.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

pub(crate) fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub fn encode_embeddings(words: &[String], rows: &Matrix) -> std::result::Result<Vec<u8>, String> {
    if words.len() != rows.rows() {
        return Err(format!("{} words but {} rows", words.len(), rows.rows()));
    }
    let mut out = Vec::with_capacity(14 + rows.len() * 4);
    out.extend_from_slice(EMBEDDINGS_MAGIC);
    put_u32(&mut out, words.len(), "word count")?;
    put_u32(&mut out, rows.cols(), "dimension")?;
    for (i, w) in words.iter().enumerate() {
        put_string(&mut out, w)?;
        put_f32s(&mut out, rows.row(i));
    }
    Ok(out)
}

pub fn decode_embeddings(buf: &[u8]) -> std::result::Result<(Vec<String>, Matrix), String> {
    let mut r = Reader::new(buf);
    r.magic(EMBEDDINGS_MAGIC)?;
    let count = r.u32("word count")?;
    let dim = r.u32("dimension")?;
    let mut words = Vec::new();
    let mut data = Vec::new();
    for i in 0..count {
        words.push(r.string(&format!("word {i}"))?);
        data.extend(r.f32s(dim, &format!("vector {i}"))?);
    }
    r.finish()?;
    Ok((words, Matrix::from_vec(count, dim, data)))
}

pub fn write_embeddings(path: &Path, words: &[String], rows: &Matrix) -> Result<()> {
    let bytes = encode_embeddings(words, rows).map_err(|m| Error::format(path, m))?;
    write_file(path, &bytes)
}

pub fn read_embeddings(path: &Path) -> Result<(Vec<String>, Matrix)> {
    let bytes = fs::read(path).map_err(|e| Error::read(path, e))?;
    decode_embeddings(&bytes).map_err(|m| Error::format(path, m))
}

pub fn encode_store(store: &FeatureStore) -> std::result::Result<Vec<u8>, String> {
    let h = store.header();
    let mut out = Vec::new();
    out.extend_from_slice(STORE_MAGIC);
    put_u32(&mut out, store.len(), "image count")?;
    put_u32(&mut out, h.num_patches, "patch count")?;
    put_u32(&mut out, h.cls_dim, "class-token dimension")?;
    put_u32(&mut out, h.patch_dim, "patch dimension")?;
    for id in store.ids() {
        let f = store.get(id).map_err(|e| e.to_string())?;
        put_string(&mut out, id)?;
        put_f32s(&mut out, &f.cls);
        put_f32s(&mut out, f.patches.as_slice());
    }
    Ok(out)
}

pub fn decode_store(buf: &[u8]) -> std::result::Result<FeatureStore, String> {
    let mut r = Reader::new(buf);
    r.magic(STORE_MAGIC)?;
    let count = r.u32("image count")?;
    let header = StoreHeader { num_patches: r.u32("patch count")?, cls_dim: r.u32("class-token dimension")?, patch_dim: r.u32("patch dimension")? };
    let mut store = FeatureStore::new(header);
    for i in 0..count {
        let id = r.string(&format!("image id {i}"))?;
        let cls = r.f32s(header.cls_dim, &format!("class token of {id:?}"))?;
        let patches = r.f32s(header.num_patches * header.patch_dim, &format!("patches of {id:?}"))?;
        let patches = Matrix::from_vec(header.num_patches, header.patch_dim, patches);
        store.insert(id, RawImageFeatures { cls, patches }).map_err(|e| e.to_string())?;
    }
    r.finish()?;
    Ok(store)
}

pub fn write_store(path: &Path, store: &FeatureStore) -> Result<()> {
    let bytes = encode_store(store).map_err(|m| Error::format(path, m))?;
    write_file(path, &bytes)
}

pub fn read_store(path: &Path) -> Result<FeatureStore> {
    let bytes = fs::read(path).map_err(|e| Error::read(path, e))?;
    decode_store(&bytes).map_err(|m| Error::format(path, m))
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::write(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| Error::write(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::write(path, e))
}
