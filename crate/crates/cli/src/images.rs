//! Image inputs: binary PPM (`P6`) files or seeded synthetic scenes.

use std::path::{Path, PathBuf};

use elip_core::vit::ImageTensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq)]
pub struct NamedImage {
    pub name: String,
    pub image: ImageTensor,
}

/// Reads whitespace-separated header fields, skipping `#` comments.
struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn field(&mut self) -> Option<&[u8]> {
        loop {
            while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
                self.pos += 1;
            }
            if self.bytes.get(self.pos) == Some(&b'#') {
                while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                    self.pos += 1;
                }
                continue;
            }
            break;
        }
        let start = self.pos;
        while self.pos < self.bytes.len() && !self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
        (self.pos > start).then(|| &self.bytes[start..self.pos])
    }

    fn number(&mut self) -> Option<usize> {
        std::str::from_utf8(self.field()?).ok()?.parse().ok()
    }
}

/// Decodes a `P6` image, scaling samples by `maxval` into `[0, 1]`.
/// Samples are one byte for `maxval < 256`, big-endian pairs otherwise.
pub fn decode_ppm(bytes: &[u8]) -> Result<ImageTensor, String> {
    let mut h = Header { bytes, pos: 0 };
    if h.field() != Some(b"P6".as_slice()) {
        return Err("not a binary PPM (missing P6 magic)".into());
    }
    let width = h.number().ok_or("bad width")?;
    let height = h.number().ok_or("bad height")?;
    let maxval = h.number().ok_or("bad maxval")?;
    if !(1..=65535).contains(&maxval) {
        return Err(format!("maxval {maxval} outside 1..=65535"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = h.pos + 1;
    let sample_bytes = if maxval < 256 { 1 } else { 2 };
    let samples = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or("image dimensions overflow")?;
    let need = samples * sample_bytes;
    let raster = bytes.get(start..).unwrap_or(&[]);
    if raster.len() != need {
        return Err(format!("raster has {} bytes, expected {need}", raster.len()));
    }
    let scale = maxval as f64;
    let sample = |i: usize| -> f64 {
        let v = if sample_bytes == 1 {
            raster[i] as usize
        } else {
            (raster[2 * i] as usize) << 8 | raster[2 * i + 1] as usize
        };
        (v.min(maxval)) as f64 / scale
    };
    // Interleaved RGB to channel-major planes.
    let plane = width * height;
    let mut data = vec![0.0; samples];
    for p in 0..plane {
        for c in 0..3 {
            data[c * plane + p] = sample(3 * p + c);
        }
    }
    ImageTensor::new(height, width, data).map_err(|e| e.to_string())
}

/// Encodes an image as 8-bit `P6`.
pub fn encode_ppm(img: &ImageTensor) -> Vec<u8> {
    let (h, w) = (img.height(), img.width());
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.push((img.pixel(c, y, x) * 255.0).round() as u8);
            }
        }
    }
    out
}

/// Every `*.ppm` file of `dir`, sorted by file name.
pub fn load_dir(dir: &Path, expected_size: usize) -> CliResult<Vec<NamedImage>> {
    let entries = std::fs::read_dir(dir).map_err(|e| CliError::io(dir, e))?;
    let mut paths: Vec<PathBuf> = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| CliError::io(dir, e))?.path();
        if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("ppm")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(CliError::BadInput {
            path: dir.to_path_buf(),
            message: "no .ppm images found".into(),
        });
    }
    paths
        .into_iter()
        .map(|path| {
            let bytes = std::fs::read(&path).map_err(|e| CliError::io(&path, e))?;
            let bad = |message: String| CliError::BadInput {
                path: path.clone(),
                message,
            };
            let image = decode_ppm(&bytes).map_err(&bad)?;
            if image.height() != expected_size || image.width() != expected_size {
                return Err(bad(format!(
                    "image is {}x{}, config expects {expected_size}x{expected_size}",
                    image.width(),
                    image.height()
                )));
            }
            let name = path.file_stem().unwrap_or_default().to_string_lossy().into_owned();
            Ok(NamedImage { name, image })
        })
        .collect()
}

/// Dim noise with one bright, tinted square so that attention has
/// something to concentrate on. Image `index` uses its own stream.
pub fn synthetic_image(size: usize, seed: u64, index: u64) -> ImageTensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    let plane = size * size;
    let mut data: Vec<f64> = (0..3 * plane).map(|_| rng.gen_range(0.0..0.3)).collect();
    let side = rng.gen_range(size / 4..=size / 2).max(1);
    let (y0, x0) = (rng.gen_range(0..=size - side), rng.gen_range(0..=size - side));
    let tint: [f64; 3] = [rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)];
    for (c, t) in tint.iter().enumerate() {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                data[c * plane + y * size + x] = (t + rng.gen_range(-0.05..0.05f64)).clamp(0.0, 1.0);
            }
        }
    }
    ImageTensor::new(size, size, data).expect("synthetic pixels lie in [0, 1]")
}

pub fn synthetic_set(size: usize, seed: u64, count: usize) -> Vec<NamedImage> {
    (0..count)
        .map(|i| NamedImage {
            name: format!("synthetic_{i:03}"),
            image: synthetic_image(size, seed, i as u64),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_at_8_bits() {
        let img = synthetic_image(8, 3, 0);
        let back = decode_ppm(&encode_ppm(&img)).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-12);
        }
        assert_eq!(encode_ppm(&back), encode_ppm(&img));
    }

    #[test]
    fn ppm_header_comments_and_16_bit() {
        let mut bytes = b"P6 # comment\n1 1\n# another\n65535\n".to_vec();
        bytes.extend([0xff, 0xff, 0x00, 0x00, 0x80, 0x00]);
        let img = decode_ppm(&bytes).unwrap();
        assert_eq!(img.pixel(0, 0, 0), 1.0);
        assert_eq!(img.pixel(1, 0, 0), 0.0);
        assert!((img.pixel(2, 0, 0) - 32768.0 / 65535.0).abs() < 1e-15);
    }

    #[test]
    fn ppm_rejects_malformed() {
        assert!(decode_ppm(b"P3\n1 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n2 1\n255\n\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n1 1\n0\n\x00\x00\x00").is_err());
        assert!(decode_ppm(b"P6\n1 1\n255\n\x00\x00\x00\x00").is_err());
    }

    #[test]
    fn synthetic_is_seeded_and_distinct() {
        assert_eq!(synthetic_image(16, 7, 1), synthetic_image(16, 7, 1));
        assert_ne!(synthetic_image(16, 7, 1), synthetic_image(16, 7, 2));
        assert_ne!(synthetic_image(16, 7, 1), synthetic_image(16, 8, 1));
        let img = synthetic_image(16, 7, 0);
        assert!(img.data().iter().any(|&v| v > 0.5));
    }
}
