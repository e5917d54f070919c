//! Binary PPM (`P6`) and PGM (`P5`) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};

/// 8-bit raster, samples interleaved per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 for PGM, 3 for PPM.
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Raster {
    pub fn encode(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        let channels = match r.token()? {
            b"P6" => 3,
            b"P5" => 1,
            other => return Err(r.fail(0, format!("unsupported magic {:?}", String::from_utf8_lossy(other)))),
        };
        let width = r.number()?;
        let height = r.number()?;
        r.skip_space();
        let maxval_at = r.pos;
        let maxval = r.number()?;
        if maxval != 255 {
            return Err(r.fail(maxval_at, format!("maxval {maxval}, expected 255")));
        }
        // exactly one whitespace byte separates the header from the raster
        match bytes.get(r.pos) {
            Some(b) if b.is_ascii_whitespace() => r.pos += 1,
            _ => return Err(r.fail(r.pos, "missing whitespace after header")),
        }
        let len = width * height * channels;
        let data = bytes
            .get(r.pos..r.pos + len)
            .ok_or_else(|| r.fail(bytes.len(), format!("raster truncated, expected {len} bytes")))?;
        if r.pos + len != bytes.len() {
            return Err(r.fail(r.pos + len, "trailing bytes after raster"));
        }
        Ok(Self {
            width,
            height,
            channels,
            data: data.to_vec(),
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes, path)
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|e| Error::io(path, e))
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, offset: usize, msg: impl Into<String>) -> Error {
        Error::Malformed {
            path: self.path.to_path_buf(),
            offset,
            msg: msg.into(),
        }
    }

    fn skip_space(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while self.bytes.get(self.pos).is_some_and(|&c| c != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn token(&mut self) -> Result<&'a [u8]> {
        self.skip_space();
        let start = self.pos;
        while self
            .bytes
            .get(self.pos)
            .is_some_and(|b| !b.is_ascii_whitespace() && *b != b'#')
        {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.fail(start, "unexpected end of header"));
        }
        Ok(&self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Result<usize> {
        let tok = self.token()?;
        let start = self.pos - tok.len();
        std::str::from_utf8(tok)
            .ok()
            .filter(|s| s.bytes().all(|b| b.is_ascii_digit()))
            .and_then(|s| s.parse().ok())
            .filter(|&v| v > 0)
            .ok_or_else(|| {
                self.fail(
                    start,
                    format!("expected a positive integer, got {:?}", String::from_utf8_lossy(tok)),
                )
            })
    }
}
