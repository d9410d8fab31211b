//! Little-endian binary containers.
//!
//! Volume (`VXR1`): magic, `u32` D, H, W, `u8` has_labels, `f32` spacing x3,
//! then D·H·W `f64` intensities (z-major, then y, then x), then, when
//! has_labels is 1, D·H·W `u32` labels.
//!
//! Displacement field (`VXF1`): magic, `u32` D, H, W, then 3·D·H·W `f64`
//! components ordered by axis (depth, height, width), each a z-major grid.

use std::fs;
use std::path::Path;

use super::{LabelGrid, Volume};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const VOLUME_MAGIC: &[u8; 4] = b"VXR1";
pub const FIELD_MAGIC: &[u8; 4] = b"VXF1";

/// Upper bound on voxels per grid accepted by the readers (1024³).
const MAX_VOXELS: u64 = 1 << 30;

pub(crate) fn format_err<T>(offset: u64, msg: impl Into<String>) -> Result<T> {
    Err(Error::Format {
        offset,
        msg: msg.into(),
    })
}

/// Cursor over a byte buffer that reports offsets on failure.
pub(crate) struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return format_err(
                self.pos as u64,
                format!(
                    "truncated {}: need {} bytes, {} remain",
                    what,
                    n,
                    self.buf.len() - self.pos
                ),
            );
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn magic(&mut self, expected: &[u8; 4]) -> Result<()> {
        let m = self.take(4, "magic")?;
        if m != expected {
            return format_err(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(m),
                    String::from_utf8_lossy(expected)
                ),
            );
        }
        Ok(())
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let bytes = self.take_array(n, 8, what)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let bytes = self.take_array(n, 4, what)?;
        Ok(bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn take_array(&mut self, n: usize, width: usize, what: &str) -> Result<&'a [u8]> {
        let len = n.checked_mul(width).ok_or(Error::Format {
            offset: self.offset(),
            msg: format!("{} length overflows", what),
        })?;
        self.take(len, what)
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.buf.len() {
            return format_err(
                self.pos as u64,
                format!("{} unexpected trailing bytes", self.buf.len() - self.pos),
            );
        }
        Ok(())
    }
}

fn read_extents(r: &mut Reader) -> Result<[usize; 3]> {
    let at = r.offset();
    let dims = [r.u32("depth")?, r.u32("height")?, r.u32("width")?];
    let voxels = dims.iter().map(|&d| d as u128).product::<u128>();
    if voxels == 0 || voxels > MAX_VOXELS as u128 {
        return format_err(at, format!("extent {:?} out of range", dims));
    }
    Ok(dims.map(|d| d as usize))
}

fn put_extents(out: &mut Vec<u8>, dims: [usize; 3]) {
    for d in dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let n = v.intensities.len();
    let mut out = Vec::with_capacity(29 + n * 12);
    out.extend_from_slice(VOLUME_MAGIC);
    put_extents(&mut out, v.dims);
    out.push(v.labels.is_some() as u8);
    for s in v.spacing {
        out.extend_from_slice(&s.to_le_bytes());
    }
    for x in &v.intensities {
        out.extend_from_slice(&x.to_le_bytes());
    }
    if let Some(l) = &v.labels {
        for x in &l.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

pub fn decode_volume(buf: &[u8]) -> Result<Volume> {
    let mut r = Reader::new(buf);
    r.magic(VOLUME_MAGIC)?;
    let dims = read_extents(&mut r)?;
    let flag_at = r.offset();
    let has_labels = match r.u8("label flag")? {
        0 => false,
        1 => true,
        other => return format_err(flag_at, format!("label flag {} is not 0 or 1", other)),
    };
    let spacing = [r.f32("spacing")?, r.f32("spacing")?, r.f32("spacing")?];
    let n = dims.iter().product();
    let intensities = r.f64s(n, "intensities")?;
    let labels = if has_labels {
        Some(LabelGrid::new(dims, r.u32s(n, "labels")?)?)
    } else {
        None
    };
    r.finish()?;
    Ok(Volume {
        dims,
        intensities,
        labels,
        spacing,
    })
}

pub fn save_volume(v: &Volume, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_volume(v))?;
    Ok(())
}

pub fn load_volume(path: impl AsRef<Path>) -> Result<Volume> {
    decode_volume(&fs::read(path)?)
}

/// Encodes a `[1, 3, D, H, W]` field.
pub fn encode_field(field: &Tensor) -> Result<Vec<u8>> {
    let [n, c, d, h, w] = field.dims5()?;
    if n != 1 || c != 3 {
        return Err(Error::Shape(format!(
            "displacement field must be [1,3,D,H,W], got {:?}",
            field.shape()
        )));
    }
    let mut out = Vec::with_capacity(16 + field.numel() * 8);
    out.extend_from_slice(FIELD_MAGIC);
    put_extents(&mut out, [d, h, w]);
    for x in field.data() {
        out.extend_from_slice(&x.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_field(buf: &[u8]) -> Result<Tensor> {
    let mut r = Reader::new(buf);
    r.magic(FIELD_MAGIC)?;
    let [d, h, w] = read_extents(&mut r)?;
    let data = r.f64s(3 * d * h * w, "field components")?;
    r.finish()?;
    Tensor::new(vec![1, 3, d, h, w], data)
}

pub fn save_field(field: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_field(field)?)?;
    Ok(())
}

pub fn load_field(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_field(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Volume {
        let dims = [2, 3, 4];
        let v = Volume::new(dims, (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut v = v
            .with_labels(LabelGrid::new(dims, (0..24).map(|i| i % 5).collect()).unwrap())
            .unwrap();
        v.spacing = [1.0, 1.5, 2.0];
        v
    }

    #[test]
    fn volume_round_trip() {
        let v = sample();
        let back = decode_volume(&encode_volume(&v)).unwrap();
        assert_eq!(back, v);
        let mut unlabeled = v.clone();
        unlabeled.labels = None;
        assert_eq!(decode_volume(&encode_volume(&unlabeled)).unwrap(), unlabeled);
    }

    #[test]
    fn header_layout() {
        let bytes = encode_volume(&sample());
        assert_eq!(&bytes[..4], b"VXR1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 2);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 4);
        assert_eq!(bytes[16], 1);
        assert_eq!(bytes.len(), 29 + 24 * 8 + 24 * 4);
    }

    #[test]
    fn corrupted_magic_names_offset_zero() {
        let mut bytes = encode_volume(&sample());
        bytes[1] = b'Y';
        match decode_volume(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn truncated_payload_is_reported() {
        let bytes = encode_volume(&sample());
        match decode_volume(&bytes[..bytes.len() - 3]) {
            Err(Error::Format { offset, msg }) => {
                assert_eq!(offset, 29 + 24 * 8);
                assert!(msg.contains("truncated"));
            }
            other => panic!("unexpected {:?}", other),
        }
        let mut longer = bytes.clone();
        longer.push(0);
        assert!(matches!(decode_volume(&longer), Err(Error::Format { .. })));
        // header claims a larger grid than the payload holds
        let mut lying = bytes;
        lying[4..8].copy_from_slice(&3u32.to_le_bytes());
        assert!(matches!(decode_volume(&lying), Err(Error::Format { .. })));
    }

    #[test]
    fn extent_overflow_rejected() {
        let mut bytes = encode_volume(&sample());
        for i in 0..3 {
            bytes[4 + 4 * i..8 + 4 * i].copy_from_slice(&u32::MAX.to_le_bytes());
        }
        match decode_volume(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("unexpected {:?}", other),
        }
    }

    #[test]
    fn field_round_trip_and_corruption() {
        let f = Tensor::from_fn(&[1, 3, 2, 2, 3], |i| i as f64 * 0.25 - 1.0);
        let bytes = encode_field(&f).unwrap();
        assert_eq!(decode_field(&bytes).unwrap(), f);
        let mut bad = bytes.clone();
        bad[0] = 0;
        assert!(matches!(decode_field(&bad), Err(Error::Format { offset: 0, .. })));
        assert!(matches!(
            decode_field(&bytes[..bytes.len() - 8]),
            Err(Error::Format { .. })
        ));
        assert!(encode_field(&Tensor::zeros(&[1, 2, 2, 2, 2])).is_err());
    }
}
