//! Binary 8-bit PGM (P5).

use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{Grid, Image, LabelMask};

pub fn load_mask(path: impl AsRef<Path>) -> Result<LabelMask> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_pgm(&bytes, path)
}

pub fn save_mask(mask: &LabelMask, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, write_pgm(mask)).map_err(|e| Error::io(path, e))
}

/// Intensities are scaled by 255 and rounded.
pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    save_mask(&image_to_gray(image), path)
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    Ok(image_from_gray(&load_mask(path)?))
}

pub fn image_to_gray(image: &Image) -> Grid<u8> {
    image.map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
}

pub fn image_from_gray(gray: &Grid<u8>) -> Image {
    gray.map(|&v| v as f64 / 255.0)
}

pub fn write_pgm(mask: &Grid<u8>) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    out.extend_from_slice(mask.data());
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Pgm {
            path: self.path.to_path_buf(),
            offset: self.pos,
            message: message.into(),
        }
    }

    fn skip_whitespace_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn header_int(&mut self) -> Result<usize> {
        self.skip_whitespace_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err("malformed header"));
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| {
                self.pos = start;
                self.err("malformed header")
            })
    }
}

/// Parses a P5 buffer; `path` is only used for error reporting.
pub fn parse_pgm(bytes: &[u8], path: &Path) -> Result<LabelMask> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    if bytes.len() < 2 || &bytes[..2] != b"P5" {
        return Err(cur.err("malformed header"));
    }
    cur.pos = 2;
    let width = cur.header_int()?;
    let height = cur.header_int()?;
    cur.skip_whitespace_and_comments();
    let maxval_offset = cur.pos;
    let maxval = cur.header_int()?;
    if maxval == 0 || maxval > 255 {
        cur.pos = maxval_offset;
        return Err(cur.err(format!("unsupported bit depth (maxval {maxval})")));
    }
    // exactly one whitespace byte separates the header from the raster
    if cur.pos >= bytes.len() || !bytes[cur.pos].is_ascii_whitespace() {
        return Err(cur.err("malformed header"));
    }
    cur.pos += 1;
    if width == 0 || height == 0 {
        return Err(cur.err("malformed header"));
    }
    let n = width
        .checked_mul(height)
        .ok_or_else(|| cur.err("malformed header"))?;
    if bytes.len() - cur.pos < n {
        cur.pos = bytes.len();
        return Err(cur.err(format!("truncated pixel data, expected {n} bytes")));
    }
    let data = bytes[cur.pos..cur.pos + n].to_vec();
    Ok(Grid::from_vec(width, height, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn p() -> &'static Path {
        Path::new("mem.pgm")
    }

    #[test]
    fn all_zero_mask_has_no_labels() {
        let m = parse_pgm(&write_pgm(&Grid::new(4, 4)), p()).unwrap();
        assert_eq!((m.width(), m.height()), (4, 4));
        assert!(m.labels().is_empty());
    }

    #[test]
    fn binary_mask_reads_back_label_one() {
        let mut g: LabelMask = Grid::new(3, 2);
        g.set(1, 1, 1);
        let m = parse_pgm(&write_pgm(&g), p()).unwrap();
        assert_eq!(m.labels(), vec![1]);
        assert_eq!(m, g);
    }

    #[test]
    fn truncated_header_is_malformed() {
        let err = parse_pgm(b"P5\n4 ", p()).unwrap_err();
        assert!(err.to_string().contains("malformed header"), "{err}");
        assert!(err.to_string().contains("mem.pgm"));
        let err = parse_pgm(b"P", p()).unwrap_err();
        assert!(err.to_string().contains("malformed header"));
    }

    #[test]
    fn sixteen_bit_rejected_with_offset() {
        let err = parse_pgm(b"P5\n2 2\n65535\n", p()).unwrap_err();
        match err {
            Error::Pgm {
                offset, message, ..
            } => {
                assert!(message.contains("unsupported bit depth"));
                assert_eq!(offset, 7);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn truncated_raster_reported() {
        let err = parse_pgm(b"P5\n2 2\n255\n\x00\x01", p()).unwrap_err();
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn comments_in_header() {
        let m = parse_pgm(b"P5 # c\n2 # w\n1\n255\n\x01\x02", p()).unwrap();
        assert_eq!(m.data(), &[1, 2]);
    }

    #[test]
    fn missing_file_reports_path() {
        let err = load_mask("/nonexistent/x.pgm").unwrap_err();
        assert!(err.to_string().contains("/nonexistent/x.pgm"));
    }

    proptest! {
        #[test]
        fn canonical_files_round_trip(w in 1usize..20, h in 1usize..20, seed in any::<u64>()) {
            let data: Vec<u8> = (0..w * h).map(|i| ((seed >> (i % 61)) as u8) % 4).collect();
            let bytes = write_pgm(&Grid::from_vec(w, h, data));
            let again = write_pgm(&parse_pgm(&bytes, p()).unwrap());
            prop_assert_eq!(bytes, again);
        }
    }
}
