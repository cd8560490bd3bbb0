//! The FSVOL1 binary container.
//!
//! Layout: 8 magic bytes `FSVOL1\0\0`, a little-endian `u32` header length,
//! a UTF-8 JSON header, then the raw little-endian payload in C order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"FSVOL1\0\0";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "u8")]
    U8,
}

impl DType {
    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::U8 => 1,
        }
    }
}

/// JSON header. Field order is part of the format.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub spacing_mm: Option<Vec<f64>>,
    pub scheme: Option<String>,
}

impl Header {
    pub fn element_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn payload_len(&self) -> usize {
        self.element_count() * self.dtype.size()
    }
}

pub fn encode(header: &Header, payload: &[u8]) -> Result<Vec<u8>> {
    if payload.len() != header.payload_len() {
        return Err(Error::Format(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            header.payload_len()
        )));
    }
    let json = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(12 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(Header, &[u8])> {
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let hlen = u32::from_le_bytes([bytes[8], bytes[9], bytes[10], bytes[11]]) as usize;
    let body = &bytes[12..];
    if body.len() < hlen {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&body[..hlen])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    let payload = &body[hlen..];
    if payload.len() != header.payload_len() {
        return Err(Error::Format(format!(
            "payload has {} bytes, header declares {}",
            payload.len(),
            header.payload_len()
        )));
    }
    Ok((header, payload))
}

pub fn write_file(path: &Path, header: &Header, payload: &[u8]) -> Result<()> {
    let bytes = encode(header, payload)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<(Header, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let (header, payload) = decode(&bytes)?;
    Ok((header, payload.to_vec()))
}

pub fn f32_to_bytes(data: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * 4);
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn bytes_to_f32(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn header(shape: Vec<usize>) -> Header {
        Header {
            dtype: DType::F32,
            shape,
            spacing_mm: Some(vec![5.0, 2.0, 2.0]),
            scheme: None,
        }
    }

    #[test]
    fn header_json_is_ordered() {
        let json = serde_json::to_string(&header(vec![1, 2, 3])).unwrap();
        assert_eq!(
            json,
            r#"{"dtype":"f32","shape":[1,2,3],"spacing_mm":[5.0,2.0,2.0],"scheme":null}"#
        );
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = encode(&header(vec![1, 1, 1]), &[0; 4]).unwrap();
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_unknown_dtype() {
        let json = br#"{"dtype":"f64","shape":[1,1,1],"spacing_mm":null,"scheme":null}"#;
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(json);
        bytes.extend_from_slice(&[0; 8]);
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn rejects_short_payload() {
        // shape [2,2,2] needs 8 elements, give 7
        let h = header(vec![2, 2, 2]);
        let json = serde_json::to_vec(&h).unwrap();
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&(json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&json);
        bytes.extend_from_slice(&f32_to_bytes(&[0.0; 7]));
        assert!(matches!(decode(&bytes), Err(Error::Format(_))));
        assert!(encode(&h, &f32_to_bytes(&[0.0; 7])).is_err());
    }
}
