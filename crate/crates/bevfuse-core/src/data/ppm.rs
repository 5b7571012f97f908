//! 8-bit binary PPM (P6) images. The format is three header tokens and raw
//! RGB bytes — trivially bit-exact with no codec dependency. In memory the
//! image is `f32` RGB in `[0, 1]`, row-major, interleaved.

use std::io::{Read, Write};
use std::path::Path;

use super::{DataError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// `height * width * 3` values in `[0, 1]`, RGB interleaved.
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image { width, height, data: vec![0.0; width * height * 3] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Quantize to the on-disk 8-bit representation and back. Writing then
    /// reading an image reproduces exactly `self.quantized()`.
    pub fn quantized(&self) -> Image {
        Image {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|&v| to_byte(v) as f32 / 255.0).collect(),
        }
    }

    pub fn mean_luma(&self) -> f32 {
        if self.data.is_empty() {
            return 0.0;
        }
        self.data.iter().sum::<f32>() / self.data.len() as f32
    }
}

#[inline]
fn to_byte(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_ppm(image: &Image, path: &Path) -> Result<()> {
    if image.data.len() != image.width * image.height * 3 {
        return Err(DataError::BadImage(format!(
            "{}x{} image with {} values",
            image.width,
            image.height,
            image.data.len()
        )));
    }
    let mut out = Vec::with_capacity(20 + image.data.len());
    out.extend_from_slice(format!("P6\n{} {}\n255\n", image.width, image.height).as_bytes());
    out.extend(image.data.iter().map(|&v| to_byte(v)));
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_ppm(&bytes)
}

fn parse_ppm(bytes: &[u8]) -> Result<Image> {
    let bad = |msg: &str| DataError::BadImage(msg.to_string());
    if bytes.len() < 2 || &bytes[0..2] != b"P6" {
        return Err(bad("not a P6 file"));
    }
    // Three whitespace-separated tokens after the tag (comments allowed),
    // then a single whitespace byte, then the payload.
    let mut pos = 2usize;
    let mut tokens = [0usize; 3];
    for slot in tokens.iter_mut() {
        // skip whitespace and #-comments
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                break;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        *slot = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|t| t.parse().ok())
            .ok_or_else(|| bad("bad header token"))?;
    }
    let [width, height, maxval] = tokens;
    if maxval != 255 {
        return Err(bad("only maxval 255 supported"));
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(bad("missing header terminator"));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() - pos != need {
        return Err(bad(&format!("payload {} bytes, expected {need}", bytes.len() - pos)));
    }
    Ok(Image {
        width,
        height,
        data: bytes[pos..].iter().map(|&b| b as f32 / 255.0).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn write_read_round_trip_matches_quantized() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut img = Image::new(31, 17);
        for v in img.data.iter_mut() {
            *v = rng.gen_range(-0.1..1.1); // exercise clamping too
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back, img.quantized());
        // Second write is byte-identical (stable quantization).
        let path2 = dir.path().join("img2.ppm");
        write_ppm(&back, &path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn header_with_comment_parses() {
        let img = parse_ppm(b"P6\n# made by hand\n2 1\n255\nabcdef").unwrap();
        assert_eq!((img.width, img.height), (2, 1));
        assert!((img.get(0, 0)[0] - b'a' as f32 / 255.0).abs() < 1e-7);
    }

    #[test]
    fn malformed_files_are_rejected() {
        assert!(parse_ppm(b"P5\n2 1\n255\n__").is_err());
        assert!(parse_ppm(b"P6\n2 1\n255\nab").is_err()); // short payload
        assert!(parse_ppm(b"P6\n2 1\n65535\n" ).is_err());
        assert!(parse_ppm(b"P6\n2\n").is_err());
    }
}
