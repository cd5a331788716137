//! Little-endian binary formats: AFDS datasets and AFCK checkpoints.
//!
//! AFDS: `"AFDS" | version u32 | n u32 | D u32 | C u32 | has_labels u8 |
//! data f32[n·D·C] | labels u32[n]`.
//!
//! AFCK: `"AFCK" | version u32 | config length u32 | config UTF-8 |` then
//! records up to end of file, each `name length u32 | name | rank u32 |
//! extents u32[rank] | payload f32[product]`.

use std::fs;
use std::path::Path;

use afflow_core::data::Dataset;
use afflow_core::Tensor;

use crate::error::{CliError, CliResult, FormatError};

pub const DATASET_MAGIC: [u8; 4] = *b"AFDS";
pub const CHECKPOINT_MAGIC: [u8; 4] = *b"AFCK";
pub const FORMAT_VERSION: u32 = 1;

const DATASET_HEADER: usize = 21;

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], FormatError> {
        if self.remaining() < n {
            return Err(FormatError::Truncated { what, expected: self.pos + n, actual: self.buf.len() });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, FormatError> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, FormatError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn magic(&mut self, expected: [u8; 4]) -> Result<(), FormatError> {
        let b = self.take(4, "magic")?;
        let found = [b[0], b[1], b[2], b[3]];
        if found != expected {
            return Err(FormatError::BadMagic { expected, found });
        }
        let version = self.u32("header")?;
        if version != FORMAT_VERSION {
            return Err(FormatError::Version { expected: FORMAT_VERSION, found: version });
        }
        Ok(())
    }
}

fn to_u32(v: usize, what: &str) -> Result<u32, FormatError> {
    u32::try_from(v).map_err(|_| FormatError::Malformed(format!("{what} {v} does not fit in u32")))
}

pub fn encode_dataset(ds: &Dataset) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::with_capacity(DATASET_HEADER + 4 * ds.data.len() + 4 * ds.n);
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (v, what) in [(ds.n, "n"), (ds.positions, "D"), (ds.channels, "C")] {
        out.extend_from_slice(&to_u32(v, what)?.to_le_bytes());
    }
    out.push(ds.labels.is_some() as u8);
    for v in &ds.data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(labels) = &ds.labels {
        for l in labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_dataset(buf: &[u8]) -> Result<Dataset, FormatError> {
    let mut r = Reader::new(buf);
    r.magic(DATASET_MAGIC)?;
    let n = r.u32("header")? as usize;
    let positions = r.u32("header")? as usize;
    let channels = r.u32("header")? as usize;
    let has_labels = match r.u8("header")? {
        0 => false,
        1 => true,
        b => return Err(FormatError::Malformed(format!("has_labels byte {b}"))),
    };
    let values = n
        .checked_mul(positions)
        .and_then(|v| v.checked_mul(channels))
        .ok_or_else(|| FormatError::Malformed("dataset size overflows".into()))?;
    let expected = DATASET_HEADER + 4 * values + if has_labels { 4 * n } else { 0 };
    if buf.len() < expected {
        return Err(FormatError::Truncated { what: "dataset payload", expected, actual: buf.len() });
    }
    if buf.len() > expected {
        return Err(FormatError::Malformed(format!("{} trailing bytes after dataset payload", buf.len() - expected)));
    }
    let data = r.take(4 * values, "data")?.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
    let labels = if has_labels {
        Some(r.take(4 * n, "labels")?.chunks_exact(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect())
    } else {
        None
    };
    Dataset::new(positions, channels, data, labels).map_err(|e| FormatError::Malformed(e.to_string()))
}

pub fn save_dataset(ds: &Dataset, path: &Path) -> CliResult<()> {
    let bytes = encode_dataset(ds)?;
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

pub fn load_dataset(path: &Path) -> CliResult<Dataset> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(decode_dataset(&bytes)?)
}

/// Raw checkpoint contents: the run configuration text and named tensors
/// in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: String,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>, FormatError> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&to_u32(ck.config.len(), "config length")?.to_le_bytes());
    out.extend_from_slice(ck.config.as_bytes());
    for (name, t) in &ck.tensors {
        out.extend_from_slice(&to_u32(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&to_u32(t.shape().len(), "rank")?.to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&to_u32(e, "extent")?.to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(buf: &[u8]) -> Result<Checkpoint, FormatError> {
    let mut r = Reader::new(buf);
    r.magic(CHECKPOINT_MAGIC)?;
    let len = r.u32("config length")? as usize;
    let config = String::from_utf8(r.take(len, "config")?.to_vec()).map_err(|_| FormatError::Malformed("config is not UTF-8".into()))?;
    let mut tensors = Vec::new();
    while r.remaining() > 0 {
        let len = r.u32("record name length")? as usize;
        let name = String::from_utf8(r.take(len, "record name")?.to_vec()).map_err(|_| FormatError::Malformed("record name is not UTF-8".into()))?;
        let rank = r.u32("record rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u32("record extents")? as usize);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .and_then(|c| c.checked_mul(4))
            .ok_or_else(|| FormatError::Malformed(format!("record {name}: size overflows")))?;
        let data = r.take(count, "record payload")?.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
        let t = Tensor::new(shape, data).map_err(|e| FormatError::Malformed(format!("record {name}: {e}")))?;
        if tensors.iter().any(|(n, _)| *n == name) {
            return Err(FormatError::Malformed(format!("duplicate record {name}")));
        }
        tensors.push((name, t));
    }
    Ok(Checkpoint { config, tensors })
}

pub fn save_checkpoint(ck: &Checkpoint, path: &Path) -> CliResult<()> {
    let bytes = encode_checkpoint(ck)?;
    // Write then rename so an interrupted save never clobbers the last good file.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> CliResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(decode_checkpoint(&bytes)?)
}

/// Binary PGM (P5, maxval 255) of values in `[-1, 1]`.
pub fn encode_pgm(pixels: &[f64], width: usize, height: usize) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(pixels.iter().map(|&v| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_dataset(labels: bool) -> Dataset {
        let data: Vec<f32> = (0..24).map(|i| (i as f32 - 7.3) * 0.37).collect();
        Dataset::new(3, 2, data, labels.then(|| vec![0, 2, 1, 5])).unwrap()
    }

    #[test]
    fn dataset_round_trip_is_bitwise() {
        for labels in [false, true] {
            let ds = sample_dataset(labels);
            let bytes = encode_dataset(&ds).unwrap();
            let back = decode_dataset(&bytes).unwrap();
            assert_eq!(back.labels, ds.labels);
            let bits = |d: &Dataset| d.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&back), bits(&ds));
            assert_eq!(encode_dataset(&back).unwrap(), bytes);
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = Dataset::new(4, 1, vec![], None).unwrap();
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        assert_eq!((back.n, back.positions, back.channels), (0, 4, 1));
    }

    #[test]
    fn truncated_dataset_names_byte_counts() {
        let bytes = encode_dataset(&sample_dataset(true)).unwrap();
        let err = decode_dataset(&bytes[..bytes.len() - 3]).unwrap_err();
        let full = bytes.len();
        match err {
            FormatError::Truncated { expected, actual, .. } => assert_eq!((expected, actual), (full, full - 3)),
            e => panic!("unexpected {e}"),
        }
        assert!(err_text(&bytes[..bytes.len() - 3]).contains(&format!("expected {full} bytes, found {}", full - 3)));
    }

    fn err_text(b: &[u8]) -> String {
        decode_dataset(b).unwrap_err().to_string()
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let mut bytes = encode_dataset(&sample_dataset(false)).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode_dataset(&bytes), Err(FormatError::Version { found: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode_dataset(&bytes), Err(FormatError::BadMagic { .. })));
        assert!(matches!(decode_checkpoint(&bytes), Err(FormatError::BadMagic { .. })));
    }

    #[test]
    fn checkpoint_round_trip() {
        let ck = Checkpoint {
            config: "seed = 3\n".into(),
            tensors: vec![
                ("a".into(), Tensor::new(vec![2, 3], vec![0.5, -1.25, 3.0, 1e-3f32 as f64, 0.0, 7.0]).unwrap()),
                ("s".into(), Tensor::scalar(2.0)),
                ("e".into(), Tensor::zeros(&[0, 4])),
            ],
        };
        let bytes = encode_checkpoint(&ck).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), ck);
        let err = decode_checkpoint(&bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, FormatError::Truncated { .. }));
    }

    #[test]
    fn pgm_header_and_clamping() {
        let img = encode_pgm(&[-1.0, 0.0, 1.0, 3.0], 2, 2);
        assert_eq!(&img[..11], b"P5\n2 2\n255\n");
        assert_eq!(&img[11..], &[0, 128, 255, 255]);
    }
}
