//! Binary netpbm: P6 for RGB frames, P5 for label maps. Only maxval 255.

use std::fs;
use std::path::Path;

use super::RgbImage;
use crate::error::{Error, Result};
use crate::label::LabelMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Magic {
    P5,
    P6,
}

impl Magic {
    fn channels(self) -> usize {
        match self {
            Magic::P5 => 1,
            Magic::P6 => 3,
        }
    }
}

struct Header {
    magic: Magic,
    width: usize,
    height: usize,
    /// Offset of the first raster byte.
    offset: usize,
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    /// Skips whitespace and `#` comments up to the next token.
    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' || c == b'\r' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, what: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(match self.bytes.get(self.pos) {
                None => format!("truncated header: missing {what}"),
                Some(b) => format!("expected {what}, found byte {b:#04x}"),
            }));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Format(format!("{what} is not a valid number")))
    }
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let magic = match bytes.get(..2) {
        Some(b"P5") => Magic::P5,
        Some(b"P6") => Magic::P6,
        Some(m) => {
            return Err(Error::Format(format!(
                "unsupported netpbm magic {:?}",
                String::from_utf8_lossy(m)
            )))
        }
        None => return Err(Error::Format("truncated header: missing magic".into())),
    };
    let mut cur = Cursor { bytes, pos: 2 };
    let width = cur.number("width")?;
    let height = cur.number("height")?;
    let maxval = cur.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Format(format!(
            "invalid dimensions {width}x{height}"
        )));
    }
    if maxval != 255 {
        return Err(Error::Format(format!(
            "maxval {maxval} unsupported (only 255)"
        )));
    }
    match bytes.get(cur.pos) {
        Some(b) if b.is_ascii_whitespace() => {}
        Some(_) => return Err(Error::Format("missing whitespace after maxval".into())),
        None => return Err(Error::Format("truncated file: no raster data".into())),
    }
    Ok(Header {
        magic,
        width,
        height,
        offset: cur.pos + 1,
    })
}

fn raster(bytes: &[u8], expect: Magic) -> Result<(usize, usize, Vec<u8>)> {
    let h = parse_header(bytes)?;
    if h.magic != expect {
        return Err(Error::Format(format!(
            "expected {expect:?} image, found {:?}",
            h.magic
        )));
    }
    let len = h.width * h.height * h.magic.channels();
    let data = bytes
        .get(h.offset..h.offset + len)
        .ok_or_else(|| {
            Error::Format(format!(
                "truncated raster: need {len} bytes, have {}",
                bytes.len().saturating_sub(h.offset)
            ))
        })?
        .to_vec();
    Ok((h.width, h.height, data))
}

pub fn decode_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let (w, h, data) = raster(bytes, Magic::P6)?;
    RgbImage::new(w, h, data)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<LabelMap> {
    let (w, h, data) = raster(bytes, Magic::P5)?;
    LabelMap::new(h, w, data)
}

pub fn encode_ppm(img: &RgbImage) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width(), img.height()).into_bytes();
    out.extend_from_slice(img.data());
    out
}

pub fn encode_pgm(map: &LabelMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend_from_slice(map.data());
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn annotate<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn read_ppm(path: impl AsRef<Path>) -> Result<RgbImage> {
    let path = path.as_ref();
    annotate(path, decode_ppm(&read(path)?))
}

pub fn read_pgm(path: impl AsRef<Path>) -> Result<LabelMap> {
    let path = path.as_ref();
    annotate(path, decode_pgm(&read(path)?))
}

pub fn write_ppm(path: impl AsRef<Path>, img: &RgbImage) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_ppm(img)).map_err(|e| Error::io(path, e))
}

pub fn write_pgm(path: impl AsRef<Path>, map: &LabelMap) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_pgm(map)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_with_comments() {
        let mut bytes = b"P5\n# created by hand\n3 # width\n2\n# maxval next\n255\n".to_vec();
        bytes.extend_from_slice(&[0, 1, 2, 3, 4, 255]);
        let map = decode_pgm(&bytes).unwrap();
        assert_eq!((map.width(), map.height()), (3, 2));
        assert_eq!(map.data(), &[0, 1, 2, 3, 4, 255]);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(decode_pgm(b"P2\n1 1\n255\n0").is_err());
        let deep = decode_pgm(b"P5\n1 1\n65535\n\0\0").unwrap_err();
        assert!(deep.to_string().contains("maxval"), "{deep}");
        assert!(decode_pgm(b"P5\n0 1\n255\n").is_err());
        let short = decode_ppm(b"P6\n2 2\n255\n\x01\x02").unwrap_err();
        assert!(short.to_string().contains("truncated"), "{short}");
        assert!(decode_ppm(b"P5\n1 1\n255\n\x00").is_err());
        assert!(decode_ppm(b"P6\n2").is_err());
    }

    #[test]
    fn raster_may_start_with_whitespace_bytes() {
        // the single separator after maxval is consumed; the rest is pixel data
        let bytes = b"P5 2 1 255 \x20\x0a";
        let map = decode_pgm(bytes).unwrap();
        assert_eq!(map.data(), &[0x20, 0x0a]);
    }
}
