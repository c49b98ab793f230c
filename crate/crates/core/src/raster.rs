//! 8-bit RGB rasters and binary PPM (P6) encoding.

use thiserror::Error;

use crate::geometry::LetterboxTransform;
use crate::scalar::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum PpmError {
    #[error("not a binary PPM (P6) image")]
    BadMagic,
    #[error("malformed PPM header")]
    BadHeader,
    #[error("unsupported maxval {0}, expected 255")]
    UnsupportedMaxval(u32),
    #[error("pixel data truncated: expected {expected} bytes, found {found}")]
    Truncated { expected: usize, found: usize },
}

pub type Rgb = [u8; 3];

/// Letterbox padding color.
pub const PAD_COLOR: Rgb = [114, 114, 114];

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Raster {
    width: u32,
    height: u32,
    data: Vec<u8>,
}

impl Raster {
    pub fn filled(width: u32, height: u32, color: Rgb) -> Self {
        let n = width as usize * height as usize;
        let mut data = Vec::with_capacity(n * 3);
        for _ in 0..n {
            data.extend_from_slice(&color);
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn pixel(&self, x: u32, y: u32) -> Rgb {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: u32, y: u32, c: Rgb) {
        let i = (y as usize * self.width as usize + x as usize) * 3;
        self.data[i..i + 3].copy_from_slice(&c);
    }

    /// Fills `[x0, x1) x [y0, y1)`, clamped to the raster.
    pub fn fill_rect(&mut self, x0: u32, y0: u32, x1: u32, y1: u32, c: Rgb) {
        let x1 = x1.min(self.width);
        let y1 = y1.min(self.height);
        for y in y0..y1 {
            for x in x0..x1 {
                self.set_pixel(x, y, c);
            }
        }
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.data);
        out
    }

    pub fn decode_ppm(bytes: &[u8]) -> Result<Self, PpmError> {
        if bytes.len() < 2 || &bytes[..2] != b"P6" {
            return Err(PpmError::BadMagic);
        }
        let mut pos = 2;
        let mut fields = [0u32; 3];
        for field in fields.iter_mut() {
            skip_whitespace_and_comments(bytes, &mut pos);
            let start = pos;
            while pos < bytes.len() && bytes[pos].is_ascii_digit() {
                pos += 1;
            }
            if start == pos {
                return Err(PpmError::BadHeader);
            }
            *field = std::str::from_utf8(&bytes[start..pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .ok_or(PpmError::BadHeader)?;
        }
        // exactly one whitespace byte separates maxval from the pixel data
        if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
            return Err(PpmError::BadHeader);
        }
        pos += 1;
        let [width, height, maxval] = fields;
        if width == 0 || height == 0 {
            return Err(PpmError::BadHeader);
        }
        if maxval != 255 {
            return Err(PpmError::UnsupportedMaxval(maxval));
        }
        let expected = width as usize * height as usize * 3;
        let found = bytes.len() - pos;
        if found < expected {
            return Err(PpmError::Truncated { expected, found });
        }
        Ok(Self {
            width,
            height,
            data: bytes[pos..pos + expected].to_vec(),
        })
    }

    /// Nearest-neighbour resize into the letterbox canvas described by `t`.
    pub fn letterboxed<T: Scalar>(&self, t: &LetterboxTransform<T>) -> Raster {
        let size = t.input_size;
        let mut out = Raster::filled(size, size, PAD_COLOR);
        let pad_x = t.pad_x.to_f64_lossy() as u32;
        let pad_y = t.pad_y.to_f64_lossy() as u32;
        let (rw, rh) = (t.resized_w as u64, t.resized_h as u64);
        for oy in 0..t.resized_h {
            // sample the source pixel whose centre is nearest to the target centre
            let sy = ((2 * oy as u64 + 1) * self.height as u64 / (2 * rh)).min(self.height as u64 - 1);
            for ox in 0..t.resized_w {
                let sx =
                    ((2 * ox as u64 + 1) * self.width as u64 / (2 * rw)).min(self.width as u64 - 1);
                out.set_pixel(pad_x + ox, pad_y + oy, self.pixel(sx as u32, sy as u32));
            }
        }
        out
    }
}

fn skip_whitespace_and_comments(bytes: &[u8], pos: &mut usize) {
    while *pos < bytes.len() {
        match bytes[*pos] {
            b'#' => {
                while *pos < bytes.len() && bytes[*pos] != b'\n' {
                    *pos += 1;
                }
            }
            b if b.is_ascii_whitespace() => *pos += 1,
            _ => break,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::letterbox;

    #[test]
    fn ppm_round_trip() {
        let mut r = Raster::filled(3, 2, [1, 2, 3]);
        r.set_pixel(2, 1, [200, 100, 50]);
        let bytes = r.encode_ppm();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
        assert_eq!(Raster::decode_ppm(&bytes).unwrap(), r);
    }

    #[test]
    fn ppm_header_comments() {
        let mut bytes = b"P6 # comment\n1 1\n255\n".to_vec();
        bytes.extend_from_slice(&[9, 8, 7]);
        assert_eq!(Raster::decode_ppm(&bytes).unwrap().pixel(0, 0), [9, 8, 7]);
    }

    #[test]
    fn ppm_errors() {
        assert_eq!(Raster::decode_ppm(b"P3\n1 1\n255\n"), Err(PpmError::BadMagic));
        assert_eq!(Raster::decode_ppm(b"P6\n1\n"), Err(PpmError::BadHeader));
        assert_eq!(
            Raster::decode_ppm(b"P6\n1 1\n65535\n\0\0\0\0\0\0"),
            Err(PpmError::UnsupportedMaxval(65535))
        );
        assert_eq!(
            Raster::decode_ppm(b"P6\n2 1\n255\n\0\0\0"),
            Err(PpmError::Truncated { expected: 6, found: 3 })
        );
    }

    #[test]
    fn letterbox_resize_places_content() {
        let mut r = Raster::filled(200, 100, [10, 10, 10]);
        r.fill_rect(100, 0, 200, 100, [250, 0, 0]);
        let t = letterbox::<f64>(200, 100, 100).unwrap();
        let lb = r.letterboxed(&t);
        assert_eq!(lb.width(), 100);
        assert_eq!(lb.pixel(0, 0), PAD_COLOR);
        assert_eq!(lb.pixel(0, 24), PAD_COLOR);
        assert_eq!(lb.pixel(0, 25), [10, 10, 10]);
        assert_eq!(lb.pixel(49, 74), [10, 10, 10]);
        assert_eq!(lb.pixel(50, 74), [250, 0, 0]);
        assert_eq!(lb.pixel(99, 75), PAD_COLOR);
    }
}
