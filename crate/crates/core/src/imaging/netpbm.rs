//! Binary Netpbm (P5 gray, P6 RGB) with maxval 255.

use std::fs;
use std::path::Path;

use super::ImageU8;
use crate::error::{Error, Result};

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n' && c != b'\r') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Format(format!("netpbm header: expected {field} at byte {start}")));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::Format(format!("netpbm header: {field} out of range")))
    }
}

pub fn decode_netpbm(bytes: &[u8]) -> Result<ImageU8> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Format("not a binary PGM/PPM (expected magic P5 or P6)".into())),
    };
    let mut c = Cursor { bytes, pos: 2 };
    if !c.bytes.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(Error::Format("netpbm header: magic must be followed by whitespace".into()));
    }
    let width = c.number("width")?;
    let height = c.number("height")?;
    let maxval = c.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Format(format!("unsupported depth: maxval {maxval}, only 255 is supported")));
    }
    if !c.bytes.get(c.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(Error::Format("netpbm header: maxval must be followed by one whitespace byte".into()));
    }
    c.pos += 1;
    let expected = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Error::Format(format!("netpbm header: {width}x{height} overflows")))?;
    let data = &bytes[c.pos..];
    if data.len() < expected {
        return Err(Error::Truncated {
            expected,
            found: data.len(),
        });
    }
    ImageU8::new(width, height, channels, data[..expected].to_vec())
}

pub fn encode_netpbm(img: &ImageU8) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.data);
    out
}

pub fn read_netpbm(path: &Path) -> Result<ImageU8> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_netpbm(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_netpbm(path: &Path, img: &ImageU8) -> Result<()> {
    fs::write(path, encode_netpbm(img)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_examples() {
        let img = decode_netpbm(b"P5 2 1 255\n\x00\xff").unwrap();
        assert_eq!((img.width, img.height, img.channels), (2, 1, 1));
        assert_eq!(img.data, [0, 255]);
        let rgb = decode_netpbm(b"P6\n1 1\n255\n\x0a\x14\x1e").unwrap();
        assert_eq!(rgb.data, [10, 20, 30]);
        let commented = decode_netpbm(b"P5\n# made by hand\n2 # width done\n1\n255\n\x00\xff").unwrap();
        assert_eq!(commented, img);
    }

    #[test]
    fn encoded_header_form() {
        let img = ImageU8::gray(3, 3, (0..9).collect()).unwrap();
        assert!(encode_netpbm(&img).starts_with(b"P5\n3 3\n255\n"));
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(matches!(decode_netpbm(b"P2 1 1 255\n1"), Err(Error::Format(_))));
        assert!(matches!(decode_netpbm(b"P5 1 1 65535\n\x00\x00"), Err(Error::Format(m)) if m.contains("depth")));
        assert!(matches!(
            decode_netpbm(b"P6 2 2 255\n\x00\x00\x00"),
            Err(Error::Truncated { expected: 12, found: 3 })
        ));
        assert!(matches!(decode_netpbm(b"P5 x 1 255\n"), Err(Error::Format(_))));
        assert!(matches!(decode_netpbm(b"P5"), Err(Error::Format(_))));
        assert!(decode_netpbm(b"P5 99999999999 99999999999 255\n").is_err());
    }
}
