//! Encoder checkpoint serialization.
//!
//! Layout of a `PENW` file, all integers little-endian:
//!
//! ```text
//! magic   4 bytes  "PENW"
//! version u16      1
//! hlen    u32      length of the JSON header
//! header  hlen     arch, provenance, dictionary capacity, flags
//! count   u32      number of named f32 blobs
//! index   count ×  (u32 name length, name bytes, u32 f32 count)
//! data    ...      concatenated f32 payloads in index order
//! ```
//!
//! Values round-trip bit-exactly. Blob names are derived from the
//! parameter tree so a reader can verify a file against its declared
//! architecture before loading anything.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{init, Arch, EncoderState};

const MAGIC: &[u8; 4] = b"PENW";
const VERSION: u16 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: Arch,
    provenance: Vec<String>,
    dictionary_capacity: usize,
    dictionary_len: usize,
    has_momentum: bool,
}

fn blob_names(arch: &Arch, has_momentum: bool, dictionary_len: usize) -> Vec<String> {
    let mut names = Vec::new();
    let backbone = |prefix: &str, names: &mut Vec<String>| {
        for i in 0..arch.widths.len() {
            names.push(format!("{prefix}block{i}.conv.weight"));
            names.push(format!("{prefix}block{i}.norm.gamma"));
            names.push(format!("{prefix}block{i}.norm.beta"));
        }
        names.push(format!("{prefix}feat.weight"));
        names.push(format!("{prefix}feat.bias"));
    };
    backbone("", &mut names);
    names.push("head.l1.weight".into());
    names.push("head.l1.bias".into());
    names.push("head.l2.weight".into());
    names.push("head.l2.bias".into());
    if has_momentum {
        backbone("momentum.", &mut names);
    }
    if dictionary_len > 0 {
        names.push("dictionary.keys".into());
    }
    names
}

/// Writes the complete state to `path`, replacing any existing file.
pub fn save_checkpoint(state: &EncoderState, path: &Path) -> Result<()> {
    let header = Header {
        arch: state.arch.clone(),
        provenance: state.provenance.clone(),
        dictionary_capacity: state.dictionary.capacity(),
        dictionary_len: state.dictionary.len(),
        has_momentum: state.momentum_encoder.is_some(),
    };
    let header_json =
        serde_json::to_vec(&header).map_err(|e| Error::invalid(format!("encode header: {e}")))?;

    let mut blobs: Vec<&[f32]> = state.encoder.params();
    blobs.push(state.head.l1.weight.as_slice().expect("contiguous"));
    blobs.push(state.head.l1.bias.as_slice().expect("contiguous"));
    blobs.push(state.head.l2.weight.as_slice().expect("contiguous"));
    blobs.push(state.head.l2.bias.as_slice().expect("contiguous"));
    if let Some(m) = &state.momentum_encoder {
        blobs.extend(m.params());
    }
    let dict_flat: Vec<f32>;
    if state.dictionary.len() > 0 {
        dict_flat = state.dictionary.iter().flatten().copied().collect();
        blobs.push(&dict_flat);
    }
    let names = blob_names(&state.arch, header.has_momentum, header.dictionary_len);
    debug_assert_eq!(names.len(), blobs.len());

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_json);
    buf.extend_from_slice(&(blobs.len() as u32).to_le_bytes());
    for (name, blob) in names.iter().zip(&blobs) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(blob.len() as u32).to_le_bytes());
    }
    for blob in &blobs {
        for &v in *blob {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, &buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::format(
                self.path,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Loads a complete state. The file's blob index must match the layout
/// implied by the architecture in its header.
pub fn load_checkpoint(path: &Path) -> Result<EncoderState> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        pos: 0,
        path,
    };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(path, 0, "bad magic, expected PENW"));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported version {version}"),
        ));
    }
    let hlen = r.u32("header length")? as usize;
    let header_offset = r.pos as u64;
    let header_bytes = r.take(hlen, "header")?;
    let header: Header = serde_json::from_slice(header_bytes)
        .map_err(|e| Error::format(path, header_offset, format!("bad header: {e}")))?;
    header.arch.validate()?;

    let count = r.u32("blob count")? as usize;
    let expected = blob_names(&header.arch, header.has_momentum, header.dictionary_len);
    if count != expected.len() {
        return Err(Error::format(
            path,
            (r.pos - 4) as u64,
            format!("expected {} blobs, file declares {count}", expected.len()),
        ));
    }
    let mut sizes = Vec::with_capacity(count);
    for want in &expected {
        let nlen = r.u32("name length")? as usize;
        let name_offset = r.pos as u64;
        let name = std::str::from_utf8(r.take(nlen, "blob name")?)
            .map_err(|_| Error::format(path, name_offset, "blob name is not utf-8"))?;
        if name != want {
            return Err(Error::format(
                path,
                name_offset,
                format!("blob name {name:?} does not match expected {want:?}"),
            ));
        }
        sizes.push(r.u32("blob size")? as usize);
    }

    // Build a skeleton with the right shapes, then overwrite in place.
    let mut state = init(&header.arch, 0)?;
    if header.has_momentum {
        state.ensure_momentum();
    }
    state.provenance = header.provenance;
    state.dictionary.set_capacity(header.dictionary_capacity);

    let read_blob = |r: &mut Reader, len: usize, name: &str| -> Result<Vec<f32>> {
        let bytes = r.take(len * 4, name)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    };

    let mut idx = 0;
    {
        let mut targets = state.encoder.params_mut();
        targets.extend(state.head.params_mut());
        if let Some(m) = &mut state.momentum_encoder {
            targets.extend(m.params_mut());
        }
        for target in targets.iter_mut() {
            let name = &expected[idx];
            if sizes[idx] != target.len() {
                return Err(Error::format(
                    path,
                    r.pos as u64,
                    format!(
                        "blob {name:?} holds {} values, architecture needs {}",
                        sizes[idx],
                        target.len()
                    ),
                ));
            }
            let vals = read_blob(&mut r, sizes[idx], name)?;
            target.copy_from_slice(&vals);
            idx += 1;
        }
    }
    if header.dictionary_len > 0 {
        let want = header.dictionary_len * header.arch.proj_dim;
        if sizes[idx] != want {
            return Err(Error::format(
                path,
                r.pos as u64,
                format!(
                    "dictionary blob holds {} values, header implies {want}",
                    sizes[idx]
                ),
            ));
        }
        if header.dictionary_len > header.dictionary_capacity {
            return Err(Error::format(
                path,
                r.pos as u64,
                format!(
                    "dictionary holds {} keys, over its capacity {}",
                    header.dictionary_len, header.dictionary_capacity
                ),
            ));
        }
        let vals = read_blob(&mut r, sizes[idx], "dictionary.keys")?;
        let keys =
            Array2::from_shape_vec((header.dictionary_len, header.arch.proj_dim), vals)
                .expect("length checked");
        crate::model::enqueue_keys(&mut state, &keys)?;
    }
    if r.pos != buf.len() {
        return Err(Error::format(
            path,
            r.pos as u64,
            format!("{} trailing bytes after payload", buf.len() - r.pos),
        ));
    }
    Ok(state)
}
