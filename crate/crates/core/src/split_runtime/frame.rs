//! Payload framing.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "ESPL"
//! 4       1     version (1)
//! 5       1     codec id: 0 entropic, 1 crbq-u8, 2 raw
//! 6       2     channels
//! 8       2     height
//! 10      2     width
//! 12      2     beta id
//! 14      2     escape count E
//! 16      6·E   escapes: u32 flat index, i16 value
//! 16+6E   4     bitstream length L
//! 20+6E   L     bitstream
//! 20+6E+L 4     CRC-32 (IEEE) of every preceding byte
//! ```
//!
//! All multi-byte fields are big-endian. The crbq bitstream is an 8-byte
//! header (f32 scale, f32 offset) followed by one byte per element; the raw
//! bitstream is the 8-bit input image.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ESPL";
pub const VERSION: u8 = 1;
/// Bytes before the escape block.
pub const HEADER_LEN: usize = 16;
/// Header, bitstream length and CRC.
pub const FIXED_OVERHEAD: usize = HEADER_LEN + 4 + 4;
const ESCAPE_LEN: usize = 6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Codec {
    Entropic = 0,
    CrbqU8 = 1,
    Raw = 2,
}

impl Codec {
    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn from_id(id: u8) -> Result<Self> {
        match id {
            0 => Ok(Codec::Entropic),
            1 => Ok(Codec::CrbqU8),
            2 => Ok(Codec::Raw),
            other => Err(Error::UnsupportedCodec(other)),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PayloadFrame {
    pub codec: Codec,
    pub channels: u16,
    pub height: u16,
    pub width: u16,
    pub beta_id: u16,
    pub escapes: Vec<(u32, i16)>,
    pub bitstream: Vec<u8>,
}

fn dim(v: usize, what: &str) -> Result<u16> {
    u16::try_from(v).map_err(|_| Error::Framing(format!("{what} {v} does not fit in u16")))
}

impl PayloadFrame {
    pub fn new(codec: Codec, shape: [usize; 3], beta_id: u16, escapes: Vec<(u32, i16)>, bitstream: Vec<u8>) -> Result<Self> {
        if escapes.len() > u16::MAX as usize {
            return Err(Error::Framing(format!("{} escapes exceed the u16 counter", escapes.len())));
        }
        if bitstream.len() > u32::MAX as usize {
            return Err(Error::Framing("bitstream longer than 4 GiB".into()));
        }
        Ok(Self {
            codec,
            channels: dim(shape[0], "channels")?,
            height: dim(shape[1], "height")?,
            width: dim(shape[2], "width")?,
            beta_id,
            escapes,
            bitstream,
        })
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels as usize, self.height as usize, self.width as usize]
    }

    /// Serialized size in bytes.
    pub fn payload_bytes(&self) -> usize {
        FIXED_OVERHEAD + ESCAPE_LEN * self.escapes.len() + self.bitstream.len()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.push(self.codec.id());
        for v in [self.channels, self.height, self.width, self.beta_id, self.escapes.len() as u16] {
            out.extend_from_slice(&v.to_be_bytes());
        }
        for &(i, v) in &self.escapes {
            out.extend_from_slice(&i.to_be_bytes());
            out.extend_from_slice(&v.to_be_bytes());
        }
        out.extend_from_slice(&(self.bitstream.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.bitstream);
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_be_bytes());
        out
    }

    /// Total length the header claims, if the header is readable.
    fn declared_len(bytes: &[u8]) -> Option<usize> {
        let n_esc = u16::from_be_bytes(bytes.get(14..16)?.try_into().ok()?) as usize;
        let at = HEADER_LEN + ESCAPE_LEN * n_esc;
        let len = u32::from_be_bytes(bytes.get(at..at + 4)?.try_into().ok()?) as usize;
        Some(FIXED_OVERHEAD + ESCAPE_LEN * n_esc + len)
    }

    /// Whether the trailing CRC matches the preceding bytes.
    pub fn crc_ok(bytes: &[u8]) -> bool {
        bytes.len() >= 4 && {
            let (body, tail) = bytes.split_at(bytes.len() - 4);
            crc32fast::hash(body) == u32::from_be_bytes(tail.try_into().unwrap())
        }
    }

    /// Parses one complete frame. The CRC is checked before any field is
    /// trusted; a CRC failure on a frame shorter than its header declares is
    /// reported as truncation.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < FIXED_OVERHEAD {
            return Err(Error::Framing(format!("truncated frame: {} bytes", bytes.len())));
        }
        if !Self::crc_ok(bytes) {
            if Self::declared_len(bytes).is_some_and(|d| d > bytes.len()) {
                return Err(Error::Framing(format!("truncated frame: {} bytes", bytes.len())));
            }
            let (body, tail) = bytes.split_at(bytes.len() - 4);
            return Err(Error::Crc {
                expected: u32::from_be_bytes(tail.try_into().unwrap()),
                actual: crc32fast::hash(body),
            });
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::Framing("bad magic".into()));
        }
        if bytes[4] != VERSION {
            return Err(Error::Framing(format!("unsupported frame version {}", bytes[4])));
        }
        let codec = Codec::from_id(bytes[5])?;
        let u16_at = |i: usize| u16::from_be_bytes([bytes[i], bytes[i + 1]]);
        let n_esc = u16_at(14) as usize;
        match Self::declared_len(bytes) {
            Some(d) if d == bytes.len() => {}
            Some(d) => return Err(Error::Framing(format!("frame declares {d} bytes, got {}", bytes.len()))),
            None => return Err(Error::Framing(format!("truncated frame: {} bytes", bytes.len()))),
        }
        let mut escapes = Vec::with_capacity(n_esc);
        for k in 0..n_esc {
            let at = HEADER_LEN + ESCAPE_LEN * k;
            let idx = u32::from_be_bytes(bytes[at..at + 4].try_into().unwrap());
            let v = i16::from_be_bytes([bytes[at + 4], bytes[at + 5]]);
            escapes.push((idx, v));
        }
        let start = HEADER_LEN + ESCAPE_LEN * n_esc + 4;
        Ok(Self {
            codec,
            channels: u16_at(6),
            height: u16_at(8),
            width: u16_at(10),
            beta_id: u16_at(12),
            escapes,
            bitstream: bytes[start..bytes.len() - 4].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame() -> PayloadFrame {
        PayloadFrame::new(Codec::Entropic, [16, 8, 8], 2, vec![(3, 70), (900, -300)], vec![1, 2, 3, 4, 5]).unwrap()
    }

    #[test]
    fn frozen_test_vector() {
        let f = PayloadFrame::new(Codec::Entropic, [2, 1, 1], 1, vec![(1, -65)], vec![0xAB]).unwrap();
        let bytes = f.to_bytes();
        let expected_body: Vec<u8> = vec![
            b'E', b'S', b'P', b'L', 1, 0, 0, 2, 0, 1, 0, 1, 0, 1, 0, 1, // header
            0, 0, 0, 1, 0xFF, 0xBF, // escape (1, -65)
            0, 0, 0, 1, 0xAB, // bitstream
        ];
        assert_eq!(&bytes[..bytes.len() - 4], expected_body.as_slice());
        // CRC-32 computed independently (zlib).
        assert_eq!(&bytes[bytes.len() - 4..], &[0xAE, 0x14, 0x0A, 0xDC]);
        assert_eq!(bytes.len(), f.payload_bytes());
    }

    #[test]
    fn round_trip() {
        let f = frame();
        let bytes = f.to_bytes();
        assert_eq!(bytes.len(), 16 + 12 + 4 + 5 + 4);
        assert_eq!(PayloadFrame::parse(&bytes).unwrap(), f);
    }

    #[test]
    fn corruption_truncation_and_unknown_codec() {
        let bytes = frame().to_bytes();
        let mut bad = bytes.clone();
        bad[33] ^= 1;
        assert!(matches!(PayloadFrame::parse(&bad), Err(Error::Crc { .. })));
        assert!(matches!(PayloadFrame::parse(&bytes[..bytes.len() - 3]), Err(Error::Framing(_))));
        assert!(matches!(PayloadFrame::parse(&bytes[..10]), Err(Error::Framing(_))));
        let mut f = frame().to_bytes();
        f[5] = 9;
        let n = f.len();
        let crc = crc32fast::hash(&f[..n - 4]).to_be_bytes();
        f[n - 4..].copy_from_slice(&crc);
        assert!(matches!(PayloadFrame::parse(&f), Err(Error::UnsupportedCodec(9))));
    }
}
