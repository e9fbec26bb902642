//! On-disk dataset formats, decoded bit-exactly: IDX (big-endian magic and
//! dims), CIFAR-10 binary (1 label byte + 3072 channel-planar pixel bytes
//! per record), and a raw-tensor container reusing the checkpoint blob
//! convention.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Dataset, Split};
use crate::tensor::Tensor;

const IDX_UBYTE: u8 = 0x08;

fn read_all(path: &Path) -> Result<Vec<u8>, DataError> {
    let mut buf = Vec::new();
    BufReader::new(File::open(path)?).read_to_end(&mut buf)?;
    Ok(buf)
}

fn idx_header(bytes: &[u8], format: &'static str) -> Result<(u8, Vec<usize>), DataError> {
    if bytes.len() < 4 {
        return Err(DataError::Truncated {
            format,
            detail: "missing magic".into(),
        });
    }
    if bytes[0] != 0 || bytes[1] != 0 {
        return Err(DataError::BadMagic { format });
    }
    let dtype = bytes[2];
    let ndim = bytes[3] as usize;
    if bytes.len() < 4 + 4 * ndim {
        return Err(DataError::Truncated {
            format,
            detail: "missing dimension fields".into(),
        });
    }
    let dims = (0..ndim)
        .map(|i| {
            let o = 4 + 4 * i;
            u32::from_be_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    Ok((dtype, dims))
}

/// IDX image/label file pair (the MNIST container format).
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<Dataset, DataError> {
    let ib = read_all(images_path)?;
    let (dtype, dims) = idx_header(&ib, "idx images")?;
    if dtype != IDX_UBYTE {
        return Err(DataError::UnsupportedDtype {
            format: "idx images",
            dtype,
        });
    }
    let (n, c, h, w) = match dims.len() {
        3 => (dims[0], 1, dims[1], dims[2]),
        4 => (dims[0], dims[1], dims[2], dims[3]),
        d => {
            return Err(DataError::Header {
                format: "idx images",
                msg: format!("expected 3 or 4 dims, got {d}"),
            })
        }
    };
    let need = n * c * h * w;
    let payload = &ib[4 + 4 * dims.len()..];
    if payload.len() != need {
        return Err(DataError::Truncated {
            format: "idx images",
            detail: format!("expected {need} pixel bytes, found {}", payload.len()),
        });
    }
    let images = Tensor::new(
        vec![n, c, h, w],
        payload.iter().map(|&b| b as f32 / 255.0).collect(),
    )?;

    let lb = read_all(labels_path)?;
    let (ldtype, ldims) = idx_header(&lb, "idx labels")?;
    if ldtype != IDX_UBYTE {
        return Err(DataError::UnsupportedDtype {
            format: "idx labels",
            dtype: ldtype,
        });
    }
    if ldims.len() != 1 || ldims[0] != n {
        return Err(DataError::Header {
            format: "idx labels",
            msg: format!("labels dims {ldims:?} do not match {n} images"),
        });
    }
    let lpayload = &lb[8..];
    if lpayload.len() != n {
        return Err(DataError::Truncated {
            format: "idx labels",
            detail: format!("expected {n} label bytes, found {}", lpayload.len()),
        });
    }
    let labels: Vec<u32> = lpayload.iter().map(|&b| b as u32).collect();
    let classes = labels.iter().copied().max().unwrap_or(0) as usize + 1;
    Dataset::new(images, labels, Split::Train, classes)
}

const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// CIFAR-10 binary batches: concatenation of `<label><3072 planar pixels>`
/// records.
pub fn load_cifar_binary(paths: &[impl AsRef<Path>]) -> Result<Dataset, DataError> {
    let mut images = Vec::new();
    let mut labels: Vec<u32> = Vec::new();
    for p in paths {
        let bytes = read_all(p.as_ref())?;
        if bytes.is_empty() {
            return Err(DataError::Truncated {
                format: "cifar-binary",
                detail: "empty file".into(),
            });
        }
        if bytes.len() % CIFAR_RECORD != 0 {
            return Err(DataError::Truncated {
                format: "cifar-binary",
                detail: format!(
                    "{} bytes is not a whole number of {CIFAR_RECORD}-byte records",
                    bytes.len()
                ),
            });
        }
        for (ri, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
            let label = rec[0] as u32;
            if label > 9 {
                return Err(DataError::LabelOverflow {
                    index: labels.len() + ri,
                    label,
                    classes: 10,
                });
            }
            labels.push(label);
            images.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
        }
    }
    let n = labels.len();
    let images = Tensor::new(vec![n, 3, 32, 32], images)?;
    Dataset::new(images, labels, Split::Train, 10)
}

const RAW_MAGIC: &[u8; 7] = b"RCDATA\n";

/// Raw-tensor export: magic + text header + little-endian f32 image blob +
/// little-endian u32 labels. Round-trips bit-exactly.
pub fn save_raw(data: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(RAW_MAGIC)?;
    writeln!(w, "version 1")?;
    let s = data.images.shape();
    writeln!(w, "images {} {} {} {}", s[0], s[1], s[2], s[3])?;
    writeln!(w, "classes {}", data.num_classes)?;
    writeln!(w, "split {}", data.split.name())?;
    writeln!(w, "data")?;
    for v in data.images.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    for l in &data.labels {
        w.write_all(&l.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_raw(path: &Path) -> Result<Dataset, DataError> {
    let bytes = read_all(path)?;
    if bytes.len() < RAW_MAGIC.len() || &bytes[..RAW_MAGIC.len()] != RAW_MAGIC {
        return Err(DataError::BadMagic {
            format: "raw-tensor",
        });
    }
    let mut pos = RAW_MAGIC.len();
    let line = |pos: &mut usize| -> Result<String, DataError> {
        let start = *pos;
        while *pos < bytes.len() && bytes[*pos] != b'\n' {
            *pos += 1;
        }
        if *pos >= bytes.len() {
            return Err(DataError::Truncated {
                format: "raw-tensor",
                detail: "header ended early".into(),
            });
        }
        let s = String::from_utf8_lossy(&bytes[start..*pos]).into_owned();
        *pos += 1;
        Ok(s)
    };
    let header_err = |msg: String| DataError::Header {
        format: "raw-tensor",
        msg,
    };

    let v = line(&mut pos)?;
    if v != "version 1" {
        return Err(header_err(format!("unsupported `{v}`")));
    }
    let dims_line = line(&mut pos)?;
    let dims: Vec<usize> = dims_line
        .strip_prefix("images ")
        .ok_or_else(|| header_err(format!("expected images line, got `{dims_line}`")))?
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| header_err(format!("bad dims `{dims_line}`"))))
        .collect::<Result<_, _>>()?;
    if dims.len() != 4 {
        return Err(header_err("images needs 4 dims".into()));
    }
    let classes_line = line(&mut pos)?;
    let classes: usize = classes_line
        .strip_prefix("classes ")
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| header_err(format!("bad classes line `{classes_line}`")))?;
    let split_line = line(&mut pos)?;
    let split = match split_line.strip_prefix("split ") {
        Some("train") => Split::Train,
        Some("val") => Split::Val,
        Some("test") => Split::Test,
        _ => return Err(header_err(format!("bad split line `{split_line}`"))),
    };
    let d = line(&mut pos)?;
    if d != "data" {
        return Err(header_err(format!("expected `data`, got `{d}`")));
    }

    let n: usize = dims.iter().product();
    let need = n * 4 + dims[0] * 4;
    if bytes.len() - pos != need {
        return Err(DataError::Truncated {
            format: "raw-tensor",
            detail: format!("expected {need} payload bytes, found {}", bytes.len() - pos),
        });
    }
    let mut images = Vec::with_capacity(n);
    for ch in bytes[pos..pos + n * 4].chunks_exact(4) {
        images.push(f32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]));
    }
    pos += n * 4;
    let mut labels = Vec::with_capacity(dims[0]);
    for ch in bytes[pos..].chunks_exact(4) {
        labels.push(u32::from_le_bytes([ch[0], ch[1], ch[2], ch[3]]));
    }
    let images = Tensor::new(dims, images)?;
    Dataset::new(images, labels, split, classes)
}
