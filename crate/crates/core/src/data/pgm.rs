//! Binary greyscale PGM (`P5`, maxval 255).

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit greyscale image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(format!(
                "{width}x{height} image with {} bytes",
                data.len()
            )));
        }
        Ok(GrayImage {
            width,
            height,
            data,
        })
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    /// Rows `start..end`.
    pub fn rows(&self, start: usize, end: usize) -> GrayImage {
        GrayImage {
            width: self.width,
            height: end - start,
            data: self.data[start * self.width..end * self.width].to_vec(),
        }
    }
}

pub fn encode(img: &GrayImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space(&mut self) {
        loop {
            match self.bytes.get(self.pos) {
                Some(b) if b.is_ascii_whitespace() => self.pos += 1,
                Some(b'#') => {
                    while self.bytes.get(self.pos).is_some_and(|&b| b != b'\n') {
                        self.pos += 1;
                    }
                }
                _ => return,
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_space();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("bad PGM {what}")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<GrayImage> {
    match bytes.get(..2) {
        Some(b"P5") => {}
        Some(m) if m[0] == b'P' => {
            return Err(Error::Format(format!(
                "unsupported netpbm variant {}",
                String::from_utf8_lossy(m)
            )))
        }
        _ => return Err(Error::Format("missing P5 magic".into())),
    }
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!("empty PGM {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::Format(format!("maxval {maxval} (only 255 supported)")));
    }
    if !bytes.get(h.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("missing whitespace after maxval".into()));
    }
    let data = &bytes[h.pos + 1..];
    if data.len() != width * height {
        return Err(Error::Format(format!(
            "expected {} pixel bytes, found {}",
            width * height,
            data.len()
        )));
    }
    GrayImage::from_raw(width, height, data.to_vec())
}

pub fn load(path: impl AsRef<Path>) -> Result<GrayImage> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

pub fn save(img: &GrayImage, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_pixel() {
        let img = GrayImage::new(1, 1);
        let bytes = encode(&img);
        assert_eq!(bytes.len(), 12);
        assert_eq!(decode(&bytes).unwrap(), img);
    }

    #[test]
    fn comments_in_header() {
        let bytes = b"P5\n# made by hand\n2 1\n# max\n255\n\x07\x09";
        let img = decode(bytes).unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert_eq!(img.data, vec![7, 9]);
    }

    #[test]
    fn ascii_variant_rejected() {
        assert!(matches!(decode(b"P2\n1 1\n255\n0\n"), Err(Error::Format(_))));
    }

    #[test]
    fn malformed_headers() {
        assert!(matches!(decode(b"P5\n1\n"), Err(Error::Format(_))));
        assert!(matches!(decode(b"P5\n1 1\n65535\n\0\0"), Err(Error::Format(_))));
        assert!(matches!(decode(b"P5\n2 2\n255\n\0"), Err(Error::Format(_))));
        assert!(matches!(decode(b"hello"), Err(Error::Format(_))));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        let img = GrayImage::from_raw(3, 2, vec![0, 1, 2, 253, 254, 255]).unwrap();
        save(&img, &path).unwrap();
        assert_eq!(load(&path).unwrap(), img);
    }
}
