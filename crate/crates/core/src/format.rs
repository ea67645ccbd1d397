//! Binary container shared by checkpoints and trajectories: an 8-byte magic,
//! a little-endian `u64` header length, a JSON header, then little-endian
//! `f64` payload values.

use std::io::{Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub(crate) fn encode<H: Serialize>(magic: &[u8; 8], header: &H, payload: &[f64]) -> Result<Vec<u8>> {
    let head = serde_json::to_vec(header)?;
    let mut out = Vec::with_capacity(16 + head.len() + 8 * payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&(head.len() as u64).to_le_bytes());
    out.extend_from_slice(&head);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

/// Splits a container into its header and payload. The payload length must
/// be exactly `expected(&header)` values.
pub(crate) fn decode<H: DeserializeOwned>(
    magic: &[u8; 8],
    bytes: &[u8],
    expected: impl FnOnce(&H) -> Result<usize>,
) -> Result<(H, Vec<f64>)> {
    let kind = String::from_utf8_lossy(magic);
    if bytes.len() < 16 || &bytes[..8] != magic {
        return Err(Error::Format(format!("missing {kind} magic")));
    }
    let head_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let head_end = usize::try_from(head_len)
        .ok()
        .and_then(|n| n.checked_add(16))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| Error::Format(format!("{kind} header truncated")))?;
    let header: H = serde_json::from_slice(&bytes[16..head_end])?;
    let n = expected(&header)?;
    let body = &bytes[head_end..];
    if body.len() != n * 8 {
        return Err(Error::Format(format!(
            "{kind} payload holds {} bytes, expected {}",
            body.len(),
            n * 8
        )));
    }
    let payload = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, payload))
}

/// Writes through a temporary sibling and renames, so readers never see a
/// half-written file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    Ok(bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Head {
        n: usize,
    }

    const MAGIC: &[u8; 8] = b"TESTFMT1";

    #[test]
    fn round_trip_and_corruption() {
        let payload = [1.5, -0.0, f64::MIN_POSITIVE, 1e300];
        let bytes = encode(MAGIC, &Head { n: 4 }, &payload).unwrap();
        let (h, p): (Head, _) = decode(MAGIC, &bytes, |h: &Head| Ok(h.n)).unwrap();
        assert_eq!(h, Head { n: 4 });
        assert_eq!(
            p.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            payload.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        for cut in [0, 7, 15, 20, bytes.len() - 1] {
            assert!(decode::<Head>(MAGIC, &bytes[..cut], |h| Ok(h.n)).is_err());
        }
        assert!(decode::<Head>(b"OTHERFMT", &bytes, |h| Ok(h.n)).is_err());
        let mut long = bytes.clone();
        long.push(0);
        assert!(decode::<Head>(MAGIC, &long, |h| Ok(h.n)).is_err());
    }
}
