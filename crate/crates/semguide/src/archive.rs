//! Tensor archive container used for CAM exports, prediction dumps, and
//! checkpoints.
//!
//! Layout: an 8-byte magic `TENARCH1`, then zero or more records. Each record
//! is a 4-byte little-endian header length, a UTF-8 JSON header
//! `{"key": <str>, "dtype": <str>, "shape": [<ints>]}`, and the raw payload
//! (little-endian, row-major). Tensors use dtype `f32`; auxiliary JSON
//! records use dtype `json` with `shape = [payload_len]`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"TENARCH1";

#[derive(Debug, Serialize, Deserialize)]
struct RecordHeader {
    key: String,
    dtype: String,
    shape: Vec<usize>,
}

/// One decoded archive record.
#[derive(Debug, Clone, PartialEq)]
pub enum Record {
    F32(ArrayD<f32>),
    Json(serde_json::Value),
}

/// Streaming writer; records are appended in call order.
pub struct ArchiveWriter<W: Write> {
    out: W,
}

impl ArchiveWriter<BufWriter<File>> {
    pub fn create(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::create(&path).map_err(|e| Error::io(&path, e))?;
        Self::new(BufWriter::new(file))
    }
}

impl<W: Write> ArchiveWriter<W> {
    pub fn new(mut out: W) -> Result<Self> {
        out.write_all(MAGIC).map_err(write_err)?;
        Ok(Self { out })
    }

    fn write_record(&mut self, header: &RecordHeader, payload: &[u8]) -> Result<()> {
        let header_bytes = serde_json::to_vec(header)?;
        let len = u32::try_from(header_bytes.len())
            .map_err(|_| Error::Format("record header exceeds u32 length".into()))?;
        self.out.write_all(&len.to_le_bytes()).map_err(write_err)?;
        self.out.write_all(&header_bytes).map_err(write_err)?;
        self.out.write_all(payload).map_err(write_err)?;
        Ok(())
    }

    pub fn put_f32(&mut self, key: &str, tensor: &ArrayD<f32>) -> Result<()> {
        let header = RecordHeader {
            key: key.to_string(),
            dtype: "f32".to_string(),
            shape: tensor.shape().to_vec(),
        };
        // Row-major little-endian payload; iterate logically so non-standard
        // layouts serialize correctly.
        let mut payload = Vec::with_capacity(tensor.len() * 4);
        match tensor.as_slice() {
            Some(data) => {
                for v in data {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
            None => {
                for v in tensor.iter() {
                    payload.extend_from_slice(&v.to_le_bytes());
                }
            }
        }
        self.write_record(&header, &payload)
    }

    pub fn put_json(&mut self, key: &str, value: &serde_json::Value) -> Result<()> {
        let payload = serde_json::to_vec(value)?;
        let header = RecordHeader {
            key: key.to_string(),
            dtype: "json".to_string(),
            shape: vec![payload.len()],
        };
        self.write_record(&header, &payload)
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(write_err)
    }
}

fn write_err(e: std::io::Error) -> Error {
    Error::Io {
        path: "<archive stream>".into(),
        source: e,
    }
}

/// Fully decoded archive. Key order is preserved from the file.
#[derive(Debug, Default)]
pub struct Archive {
    records: Vec<(String, Record)>,
}

impl Archive {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(&path).map_err(|e| Error::io(&path, e))?;
        Self::read(BufReader::new(file))
    }

    pub fn read(mut input: impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        input
            .read_exact(&mut magic)
            .map_err(|_| Error::Format("file shorter than magic".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(&magic),
                String::from_utf8_lossy(MAGIC)
            )));
        }
        let mut records = Vec::new();
        loop {
            let mut len_bytes = [0u8; 4];
            match input.read_exact(&mut len_bytes) {
                Ok(()) => {}
                Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
                Err(e) => return Err(Error::Format(format!("truncated record length: {e}"))),
            }
            let header_len = u32::from_le_bytes(len_bytes) as usize;
            let mut header_bytes = vec![0u8; header_len];
            input
                .read_exact(&mut header_bytes)
                .map_err(|_| Error::Format("truncated record header".into()))?;
            let header: RecordHeader = serde_json::from_slice(&header_bytes)?;
            let record = match header.dtype.as_str() {
                "f32" => {
                    let n: usize = header.shape.iter().product();
                    let mut payload = vec![0u8; n * 4];
                    input
                        .read_exact(&mut payload)
                        .map_err(|_| Error::Format(format!("truncated payload for {}", header.key)))?;
                    let values: Vec<f32> = payload
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    let arr = ArrayD::from_shape_vec(header.shape.clone(), values)
                        .map_err(|e| Error::Format(format!("bad shape for {}: {e}", header.key)))?;
                    Record::F32(arr)
                }
                "json" => {
                    let n = header.shape.first().copied().unwrap_or(0);
                    let mut payload = vec![0u8; n];
                    input
                        .read_exact(&mut payload)
                        .map_err(|_| Error::Format(format!("truncated payload for {}", header.key)))?;
                    Record::Json(serde_json::from_slice(&payload)?)
                }
                other => return Err(Error::Format(format!("unsupported dtype {other:?}"))),
            };
            records.push((header.key, record));
        }
        Ok(Self { records })
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.records.iter().map(|(k, _)| k.as_str())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, key: &str) -> Option<&Record> {
        self.records
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, r)| r)
    }

    pub fn get_f32(&self, key: &str) -> Result<&ArrayD<f32>> {
        match self.get(key) {
            Some(Record::F32(a)) => Ok(a),
            Some(_) => Err(Error::Format(format!("record {key:?} is not an f32 tensor"))),
            None => Err(Error::Format(format!("missing record {key:?}"))),
        }
    }

    pub fn get_json(&self, key: &str) -> Result<&serde_json::Value> {
        match self.get(key) {
            Some(Record::Json(v)) => Ok(v),
            Some(_) => Err(Error::Format(format!("record {key:?} is not json"))),
            None => Err(Error::Format(format!("missing record {key:?}"))),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Record)> {
        self.records.iter().map(|(k, r)| (k.as_str(), r))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};

    #[test]
    fn round_trip_is_bit_exact() {
        let mut buf = Vec::new();
        let a = ArrayD::from_shape_vec(
            IxDyn(&[2, 3]),
            vec![1.0f32, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 1e30],
        )
        .unwrap();
        let mut w = ArchiveWriter::new(&mut buf).unwrap();
        w.put_f32("weights", &a).unwrap();
        w.put_json("meta", &serde_json::json!({"epoch": 3})).unwrap();
        w.finish().unwrap();

        let arc = Archive::read(buf.as_slice()).unwrap();
        assert_eq!(arc.len(), 2);
        let b = arc.get_f32("weights").unwrap();
        assert_eq!(a, *b);
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(arc.get_json("meta").unwrap()["epoch"], 3);
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = b"NOTMAGIC".to_vec();
        bytes.extend_from_slice(&[0, 0, 0, 0]);
        let err = Archive::read(bytes.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let mut buf = Vec::new();
        let a = ArrayD::from_shape_vec(IxDyn(&[4]), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let mut w = ArchiveWriter::new(&mut buf).unwrap();
        w.put_f32("t", &a).unwrap();
        w.finish().unwrap();
        buf.truncate(buf.len() - 3);
        let err = Archive::read(buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn non_contiguous_arrays_serialize_row_major() {
        let mut t = ArrayD::from_shape_vec(IxDyn(&[2, 2]), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        t.swap_axes(0, 1);
        assert!(t.as_slice().is_none());
        let mut buf = Vec::new();
        let mut w = ArchiveWriter::new(&mut buf).unwrap();
        w.put_f32("t", &t).unwrap();
        w.finish().unwrap();
        let arc = Archive::read(buf.as_slice()).unwrap();
        assert_eq!(*arc.get_f32("t").unwrap(), t);
    }
}
