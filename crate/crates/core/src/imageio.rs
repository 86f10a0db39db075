//! Planar RGB images in `[0,1]`, binary netpbm I/O and pair manifests.

use std::io::Cursor;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ImageEncoder, ImageFormat};

use crate::{BinoError, Result};

/// Three-channel image stored channel-major (`3 × height × width`).
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || data.len() != Self::CHANNELS * height * width {
            return Err(BinoError::Geometry(format!(
                "image {height}x{width} needs {} values, got {}",
                Self::CHANNELS * height * width,
                data.len()
            )));
        }
        Ok(Image {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Image {
            height,
            width,
            data: vec![0.0; Self::CHANNELS * height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.index(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        let i = self.index(c, y, x);
        self.data[i] = v;
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.height == other.height && self.width == other.width
    }

    /// Copy of the rectangle `[y0, y0+h) × [x0, x0+w)`.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<Image> {
        if y0 + h > self.height || x0 + w > self.width || h == 0 || w == 0 {
            return Err(BinoError::Data(format!(
                "crop {h}x{w}+{y0}+{x0} outside {}x{}",
                self.height, self.width
            )));
        }
        let mut out = Image::zeros(h, w);
        for c in 0..Self::CHANNELS {
            for y in 0..h {
                for x in 0..w {
                    out.set(c, y, x, self.get(c, y0 + y, x0 + x));
                }
            }
        }
        Ok(out)
    }

    /// 8-bit interleaved RGB, rounding to nearest.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len());
        for y in 0..self.height {
            for x in 0..self.width {
                for c in 0..Self::CHANNELS {
                    out.push(quantize(self.get(c, y, x)));
                }
            }
        }
        out
    }

    pub fn from_rgb8(height: usize, width: usize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != 3 * height * width {
            return Err(BinoError::Data("rgb buffer size mismatch".into()));
        }
        let mut img = Image::zeros(height, width);
        for y in 0..height {
            for x in 0..width {
                for c in 0..Self::CHANNELS {
                    img.set(c, y, x, rgb[(y * width + x) * 3 + c] as f32 / 255.0);
                }
            }
        }
        Ok(img)
    }

    /// Rounds every value to the nearest 8-bit level, as a write/read cycle would.
    pub fn quantized(&self) -> Image {
        Image {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| quantize(v) as f32 / 255.0).collect(),
        }
    }
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Decodes binary PPM (P6) or PGM (P5) bytes; grey images are replicated to three channels.
pub fn decode_netpbm(bytes: &[u8]) -> Result<Image> {
    if bytes.len() < 2 || bytes[0] != b'P' || !matches!(bytes[1], b'5' | b'6') {
        return Err(BinoError::Data("expected a binary P5 or P6 netpbm stream".into()));
    }
    let img = image::load(Cursor::new(bytes), ImageFormat::Pnm)
        .map_err(|e| BinoError::Data(format!("netpbm decode: {e}")))?;
    let rgb = match img {
        DynamicImage::ImageLuma8(_) | DynamicImage::ImageRgb8(_) => img.to_rgb8(),
        other => {
            return Err(BinoError::Data(format!(
                "unsupported sample layout {:?}, expected 8-bit",
                other.color()
            )))
        }
    };
    Image::from_rgb8(rgb.height() as usize, rgb.width() as usize, rgb.as_raw())
}

/// Encodes as binary PPM (P6, maxval 255).
pub fn encode_ppm(img: &Image) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(
            &img.to_rgb8(),
            img.width() as u32,
            img.height() as u32,
            image::ExtendedColorType::Rgb8,
        )
        .map_err(|e| BinoError::Data(format!("ppm encode: {e}")))?;
    Ok(out)
}

pub fn read_image(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| BinoError::io(path, e))?;
    decode_netpbm(&bytes).map_err(|e| BinoError::Data(format!("{}: {e}", path.display())))
}

pub fn write_ppm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_ppm(img)?).map_err(|e| BinoError::io(path, e))
}

/// Parses a pair manifest: newline-separated paths relative to `base`,
/// alternating left and right. Blank lines are skipped.
pub fn parse_pair_manifest(text: &str, base: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let lines: Vec<&str> = text.lines().map(str::trim).filter(|l| !l.is_empty()).collect();
    if lines.len() % 2 != 0 {
        return Err(BinoError::Data(format!(
            "pair manifest has {} entries, expected an even count",
            lines.len()
        )));
    }
    Ok(lines
        .chunks_exact(2)
        .map(|p| (base.join(p[0]), base.join(p[1])))
        .collect())
}

pub fn read_pair_manifest(path: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    let text = std::fs::read_to_string(path).map_err(|e| BinoError::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_pair_manifest(&text, base)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_on_8bit_levels() {
        let rgb: Vec<u8> = (0..2 * 3 * 3).map(|i| (i * 13 % 256) as u8).collect();
        let img = Image::from_rgb8(2, 3, &rgb).unwrap();
        let bytes = encode_ppm(&img).unwrap();
        assert!(bytes.starts_with(b"P6"));
        assert_eq!(decode_netpbm(&bytes).unwrap(), img);
    }

    #[test]
    fn pgm_replicates_grey() {
        let mut bytes = b"P5\n2 1\n255\n".to_vec();
        bytes.extend([0u8, 255]);
        let img = decode_netpbm(&bytes).unwrap();
        for c in 0..3 {
            assert_eq!(img.get(c, 0, 0), 0.0);
            assert_eq!(img.get(c, 0, 1), 1.0);
        }
    }

    #[test]
    fn rejects_ascii_and_garbage() {
        assert!(decode_netpbm(b"P3\n1 1\n255\n0 0 0\n").is_err());
        assert!(decode_netpbm(b"hello").is_err());
    }

    #[test]
    fn manifest_pairs_alternate() {
        let m = parse_pair_manifest("a_L.ppm\na_R.ppm\n\nb_L.ppm\nb_R.ppm\n", Path::new("/d")).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[1].1, PathBuf::from("/d/b_R.ppm"));
        assert!(parse_pair_manifest("x\n", Path::new(".")).is_err());
    }
}
