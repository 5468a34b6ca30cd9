//! Dataset container file format.
//!
//! Layout: magic `PENC`, version u16 = 1, flags u16 (bit 0 = labeled),
//! counts N, H, W, C as little-endian u32, then N·H·W·C pixel bytes
//! row-major channel-last, then (if labeled) N little-endian u32 labels,
//! then a u32-length-prefixed UTF-8 JSON metadata trailer carrying class
//! names (labeled) or provenance tags (unlabeled). Round-trips are
//! byte-exact; every parse failure names the byte offset it occurred at.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{ImageTensor, LabeledDataset, Provenance, UnlabeledDataset};

const MAGIC: &[u8; 4] = b"PENC";
const VERSION: u16 = 1;
const FLAG_LABELED: u16 = 1;

/// Either dataset flavor, as stored in a container file.
#[derive(Debug, Clone, PartialEq)]
pub enum Dataset {
    Labeled(LabeledDataset),
    Unlabeled(UnlabeledDataset),
}

impl Dataset {
    pub fn len(&self) -> usize {
        match self {
            Dataset::Labeled(ds) => ds.len(),
            Dataset::Unlabeled(ds) => ds.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn into_labeled(self) -> Result<LabeledDataset> {
        match self {
            Dataset::Labeled(ds) => Ok(ds),
            Dataset::Unlabeled(_) => Err(Error::invalid(
                "container holds an unlabeled dataset where a labeled one is required",
            )),
        }
    }

    pub fn into_unlabeled(self) -> Result<UnlabeledDataset> {
        match self {
            Dataset::Unlabeled(ds) => Ok(ds),
            Dataset::Labeled(_) => Err(Error::invalid(
                "container holds a labeled dataset where an unlabeled one is required",
            )),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct ContainerMeta {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Vec<Provenance>>,
}

pub fn write_container(ds: &Dataset, path: &Path) -> Result<()> {
    let bytes = encode(ds)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn encode(ds: &Dataset) -> Result<Vec<u8>> {
    let (images, labeled) = match ds {
        Dataset::Labeled(l) => (&l.images, true),
        Dataset::Unlabeled(u) => (&u.images, false),
    };
    let (h, w, c) = images.first().map(|im| im.shape()).unwrap_or((0, 0, 0));
    let n = images.len();

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let flags = if labeled { FLAG_LABELED } else { 0 };
    out.extend_from_slice(&flags.to_le_bytes());
    for dim in [n, h, w, c] {
        out.extend_from_slice(&(dim as u32).to_le_bytes());
    }
    for im in images {
        out.extend_from_slice(im.bytes());
    }
    let meta = match ds {
        Dataset::Labeled(l) => {
            for &label in &l.labels {
                out.extend_from_slice(&label.to_le_bytes());
            }
            ContainerMeta {
                class_names: Some(l.class_names.clone()),
                provenance: None,
            }
        }
        Dataset::Unlabeled(u) => ContainerMeta {
            class_names: None,
            provenance: Some(u.provenance.clone()),
        },
    };
    let meta_bytes = serde_json::to_vec(&meta)
        .map_err(|e| Error::invalid(format!("metadata serialization failed: {e}")))?;
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    Ok(out)
}

pub fn read_container(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
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
                format!(
                    "truncated while reading {what}: need {n} bytes, {} remain",
                    self.buf.len() - self.pos
                ),
            ));
        }
        let slice = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
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

fn decode(bytes: &[u8], path: &Path) -> Result<Dataset> {
    let mut r = Reader {
        buf: bytes,
        pos: 0,
        path,
    };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(path, 0, format!("bad magic {magic:02x?}")));
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(Error::format(
            path,
            4,
            format!("unsupported version {version}, expected {VERSION}"),
        ));
    }
    let flags = r.u16("flags")?;
    if flags & !FLAG_LABELED != 0 {
        return Err(Error::format(path, 6, format!("unknown flag bits {flags:#06x}")));
    }
    let labeled = flags & FLAG_LABELED != 0;

    let n = r.u32("image count")? as usize;
    let shape_offset = r.pos as u64;
    let h = r.u32("image height")? as usize;
    let w = r.u32("image width")? as usize;
    let c = r.u32("channel count")? as usize;
    if n > 0 && (h == 0 || w == 0 || (c != 1 && c != 3)) {
        return Err(Error::format(
            path,
            shape_offset,
            format!("invalid image shape {h}x{w}x{c}"),
        ));
    }

    let mut images = Vec::with_capacity(n);
    let pixel_len = h * w * c;
    for i in 0..n {
        let px = r.take(pixel_len, &format!("pixels of image {i}"))?;
        images.push(
            ImageTensor::new(h, w, c, px.to_vec())
                .expect("shape validated against the header"),
        );
    }

    let mut labels = Vec::new();
    if labeled {
        for i in 0..n {
            labels.push(r.u32(&format!("label {i}"))?);
        }
    }

    let meta_len = r.u32("metadata length")? as usize;
    let meta_offset = r.pos as u64;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta: ContainerMeta = serde_json::from_slice(meta_bytes).map_err(|e| {
        Error::format(path, meta_offset, format!("metadata is not valid JSON: {e}"))
    })?;
    if r.pos != bytes.len() {
        return Err(Error::format(
            path,
            r.pos as u64,
            format!("{} trailing bytes after metadata", bytes.len() - r.pos),
        ));
    }

    if labeled {
        let class_names = meta.class_names.ok_or_else(|| {
            Error::format(path, meta_offset, "labeled container missing class_names")
        })?;
        LabeledDataset::new(images, labels, class_names)
            .map(Dataset::Labeled)
            .map_err(|e| Error::format(path, meta_offset, format!("inconsistent contents: {e}")))
    } else {
        let provenance = meta.provenance.ok_or_else(|| {
            Error::format(path, meta_offset, "unlabeled container missing provenance")
        })?;
        if provenance.len() != n {
            return Err(Error::format(
                path,
                meta_offset,
                format!("{} provenance tags for {n} images", provenance.len()),
            ));
        }
        Ok(Dataset::Unlabeled(UnlabeledDataset { images, provenance }))
    }
}
