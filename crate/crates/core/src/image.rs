//! RGB image buffers, Gaussian blur and reverse-blur visual prompting.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::mask::{check_shape, RleMask};

/// Blur scale used when prompting an image embedding model with a candidate mask.
pub const DEFAULT_PROMPT_SIGMA: f64 = 50.0;

/// Row-major interleaved RGB image with intensities in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ImageBuffer {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Image(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width * 3 {
            return Err(Error::Image(format!(
                "expected {} values for {height}x{width}x3, got {}",
                height * width * 3,
                data.len()
            )));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::Image(format!("intensity {v} outside [0, 1]")));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Result<Self> {
        let data = (0..height * width).flat_map(|_| rgb).collect();
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    #[inline]
    pub fn pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let i = (row * self.width + col) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect()
    }

    pub fn from_rgb8(height: usize, width: usize, bytes: &[u8]) -> Result<Self> {
        Self::new(
            height,
            width,
            bytes.iter().map(|&b| b as f32 / 255.0).collect(),
        )
    }

    /// Reads an 8-bit PNG (any colour type) or a binary PPM (`P6`, maxval 255).
    pub fn read(path: &Path) -> Result<Self> {
        let mut reader = BufReader::new(File::open(path)?);
        let magic = reader.fill_buf()?;
        if magic.starts_with(b"P6") {
            read_ppm(reader)
        } else if magic.starts_with(b"\x89PNG") {
            read_png(reader)
        } else {
            Err(Error::Image(format!(
                "{}: unrecognised image format (expected PNG or P6 PPM)",
                path.display()
            )))
        }
    }

    /// Writes PPM when the extension is `.ppm`, PNG otherwise.
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = BufWriter::new(File::create(path)?);
        self.write_to(&mut out, is_ppm(path))?;
        out.flush()?;
        Ok(())
    }

    pub fn write_to<W: Write>(&self, out: W, ppm: bool) -> Result<()> {
        if ppm {
            write_ppm(self, out)
        } else {
            write_png(self, out)
        }
    }
}

pub fn is_ppm(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

fn read_png<R: BufRead + std::io::Seek>(reader: R) -> Result<ImageBuffer> {
    let mut decoder = png::Decoder::new(reader);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Image(e.to_string()))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Image("png too large".into()))?;
    let mut buf = vec![0u8; size];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Image(e.to_string()))?;
    let (h, w) = (info.height as usize, info.width as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::Image("indexed png was not expanded".into()));
        }
    };
    let mut rgb = Vec::with_capacity(h * w * 3);
    for row in 0..h {
        let line = &buf[row * info.line_size..][..w * channels];
        for px in line.chunks_exact(channels) {
            if channels < 3 {
                rgb.extend_from_slice(&[px[0]; 3]);
            } else {
                rgb.extend_from_slice(&px[..3]);
            }
        }
    }
    ImageBuffer::from_rgb8(h, w, &rgb)
}

fn write_png<W: Write>(image: &ImageBuffer, out: W) -> Result<()> {
    let mut encoder = png::Encoder::new(out, image.width as u32, image.height as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| Error::Image(e.to_string()))?;
    writer
        .write_image_data(&image.to_rgb8())
        .map_err(|e| Error::Image(e.to_string()))?;
    writer.finish().map_err(|e| Error::Image(e.to_string()))?;
    Ok(())
}

fn read_ppm<R: Read>(mut reader: R) -> Result<ImageBuffer> {
    let mut bytes = Vec::new();
    reader.read_to_end(&mut bytes)?;
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Image("truncated ppm header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    // single whitespace byte separates header and raster
    pos += 1;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Image(format!("bad ppm header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval != 255 {
        return Err(Error::Image(format!("unsupported ppm maxval {maxval}")));
    }
    let raster = bytes
        .get(pos..pos + w * h * 3)
        .ok_or_else(|| Error::Image("truncated ppm raster".into()))?;
    ImageBuffer::from_rgb8(h, w, raster)
}

fn write_ppm<W: Write>(image: &ImageBuffer, mut out: W) -> Result<()> {
    write!(out, "P6\n{} {}\n255\n", image.width, image.height)?;
    out.write_all(&image.to_rgb8())?;
    Ok(())
}

/// Normalised 1-D Gaussian taps over `[-ceil(3σ), ceil(3σ)]`.
pub fn gaussian_kernel(sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Parameter(format!("sigma must be positive, got {sigma}")));
    }
    let radius = (3.0 * sigma).ceil() as i64;
    let mut taps: Vec<f64> = (-radius..=radius)
        .map(|x| (-(x * x) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = taps.iter().sum();
    taps.iter_mut().for_each(|t| *t /= sum);
    Ok(taps)
}

/// Separable Gaussian blur with edge-replicated borders.
///
/// Accumulation happens in `f64`; the result is rounded to `f32` once.
pub fn gaussian_blur(image: &ImageBuffer, sigma: f64) -> Result<ImageBuffer> {
    let taps = gaussian_kernel(sigma)?;
    let radius = (taps.len() / 2) as i64;
    let (h, w) = image.shape();
    let clamp = |i: i64, n: usize| i.clamp(0, n as i64 - 1) as usize;

    let mut horizontal = vec![0f64; h * w * 3];
    for row in 0..h {
        for col in 0..w {
            let mut acc = [0f64; 3];
            for (k, &t) in taps.iter().enumerate() {
                let src = clamp(col as i64 + k as i64 - radius, w);
                let i = (row * w + src) * 3;
                for (a, &v) in acc.iter_mut().zip(&image.data[i..i + 3]) {
                    *a += t * v as f64;
                }
            }
            horizontal[(row * w + col) * 3..][..3].copy_from_slice(&acc);
        }
    }

    let mut out = vec![0f32; h * w * 3];
    for row in 0..h {
        for col in 0..w {
            let mut acc = [0f64; 3];
            for (k, &t) in taps.iter().enumerate() {
                let src = clamp(row as i64 + k as i64 - radius, h);
                let i = (src * w + col) * 3;
                for c in 0..3 {
                    acc[c] += t * horizontal[i + c];
                }
            }
            for c in 0..3 {
                out[(row * w + col) * 3 + c] = (acc[c] as f32).clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(h, w, out)
}

/// Keeps pixels inside `mask` untouched and replaces everything else with a
/// Gaussian-blurred copy of the image.
pub fn reverse_blur_prompt(image: &ImageBuffer, mask: &RleMask, sigma: f64) -> Result<ImageBuffer> {
    check_shape(image.shape(), mask.shape())?;
    let blurred = gaussian_blur(image, sigma)?;
    let inside = mask.decode();
    let (h, w) = image.shape();
    let mut data = blurred.data;
    for row in 0..h {
        for col in 0..w {
            if *inside.get(row, col) != 0 {
                let i = (row * w + col) * 3;
                data[i..i + 3].copy_from_slice(&image.data[i..i + 3]);
            }
        }
    }
    ImageBuffer::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::Grid;

    fn ramp(h: usize, w: usize) -> ImageBuffer {
        let data = (0..h * w * 3)
            .map(|i| (i % 17) as f32 / 16.0)
            .collect();
        ImageBuffer::new(h, w, data).unwrap()
    }

    #[test]
    fn kernel_is_normalised_and_truncated() {
        let k = gaussian_kernel(1.5).unwrap();
        assert_eq!(k.len(), 2 * 5 + 1);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(gaussian_kernel(0.0).is_err());
        assert!(gaussian_kernel(-1.0).is_err());
    }

    #[test]
    fn full_mask_returns_input() {
        let img = ramp(6, 5);
        let full = RleMask::new(6, 5, vec![0, 30]).unwrap();
        assert_eq!(reverse_blur_prompt(&img, &full, 2.0).unwrap(), img);
    }

    #[test]
    fn constant_image_is_fixed_point() {
        let img = ImageBuffer::filled(9, 7, [0.3, 0.71, 0.05]).unwrap();
        let mask = RleMask::encode(&Grid::from_fn(9, 7, |r, c| u8::from(r > c))).unwrap();
        for sigma in [0.7, 3.0, DEFAULT_PROMPT_SIGMA] {
            assert_eq!(reverse_blur_prompt(&img, &mask, sigma).unwrap(), img);
        }
    }

    #[test]
    fn in_mask_pixels_bit_identical() {
        let img = ramp(8, 8);
        let grid = Grid::from_fn(8, 8, |r, c| u8::from((r + c) % 3 == 0));
        let mask = RleMask::encode(&grid).unwrap();
        let out = reverse_blur_prompt(&img, &mask, 1.0).unwrap();
        for r in 0..8 {
            for c in 0..8 {
                if *grid.get(r, c) == 1 {
                    assert_eq!(out.pixel(r, c), img.pixel(r, c));
                }
            }
        }
    }

    #[test]
    fn dimension_mismatch() {
        let img = ramp(4, 4);
        let mask = RleMask::empty(4, 5).unwrap();
        assert!(matches!(
            reverse_blur_prompt(&img, &mask, 1.0),
            Err(Error::Geometry { .. })
        ));
    }

    #[test]
    fn ppm_and_png_round_trip() {
        let img = ImageBuffer::from_rgb8(3, 2, &(0..18).map(|i| i * 13).collect::<Vec<u8>>()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for name in ["a.ppm", "a.png"] {
            let p = dir.path().join(name);
            img.write(&p).unwrap();
            assert_eq!(ImageBuffer::read(&p).unwrap(), img);
        }
    }
}
