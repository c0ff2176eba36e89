//! Binary PPM (P6) and PGM (P5) with maxval 255.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// An 8-bit image with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image8 {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image8 {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<u8>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Image(format!("{channels} channels; only 1 or 3 supported")));
        }
        if data.len() != width * height * channels {
            return Err(Error::Image(format!("{} bytes for {width}x{height}x{channels}", data.len())));
        }
        Ok(Self { width, height, channels, data })
    }

    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let magic = token(bytes, &mut pos)?;
        let channels = match magic.as_str() {
            "P6" => 3,
            "P5" => 1,
            m => return Err(Error::Image(format!("unsupported magic {m:?}"))),
        };
        let width = number(bytes, &mut pos)?;
        let height = number(bytes, &mut pos)?;
        let maxval = number(bytes, &mut pos)?;
        if maxval != 255 {
            return Err(Error::Image(format!("maxval {maxval}; only 255 supported")));
        }
        // exactly one whitespace byte separates the header from the raster
        pos += 1;
        let n = width * height * channels;
        if bytes.len() < pos + n {
            return Err(Error::Image(format!("truncated raster: {} of {n} bytes", bytes.len().saturating_sub(pos))));
        }
        Self::new(width, height, channels, bytes[pos..pos + n].to_vec())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut buf = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::decode(&buf)
    }
}

fn token(bytes: &[u8], pos: &mut usize) -> Result<String> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::Image("truncated header".into()));
    }
    Ok(String::from_utf8_lossy(&bytes[start..*pos]).into_owned())
}

fn number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let t = token(bytes, pos)?;
    t.parse().map_err(|_| Error::Image(format!("bad header number {t:?}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_both_kinds() {
        for c in [1, 3] {
            let img = Image8::new(3, 2, c, (0..6 * c as u8).collect()).unwrap();
            assert_eq!(Image8::decode(&img.encode()).unwrap(), img);
        }
    }

    #[test]
    fn header_comments() {
        let mut b = b"P5\n# made by hand\n2 1\n255\n".to_vec();
        b.extend([7, 9]);
        assert_eq!(Image8::decode(&b).unwrap().data, vec![7, 9]);
    }

    #[test]
    fn truncated() {
        assert!(Image8::decode(b"P6\n2 2\n255\n\x00").is_err());
        assert!(Image8::decode(b"P3\n1 1\n255\n0 0 0").is_err());
    }
}
