//! Single-channel floating point images plus PGM/PNG input and output.
//!
//! 16-bit outputs are linearly scaled so that the image maximum maps to
//! 65535. The scale is written to a sidecar text file `<image>.norm` with
//! lines `max_value = <f64>` and `bit_depth = 16`, which the reader uses to
//! restore original intensities.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("malformed image {path}: {reason}")]
    Format { path: PathBuf, reason: String },
    #[error("image dimensions {found:?} do not match expected {expected:?}")]
    Dimensions {
        expected: (usize, usize),
        found: (usize, usize),
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageError + '_ {
    move |source| ImageError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn fmt_err(path: &Path, reason: impl Into<String>) -> ImageError {
    ImageError::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

/// Row-major `height x width` image; pixel `(x, y)` is `data[y * width + x]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), width * height, "pixel count mismatch");
        Self {
            width,
            height,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.width, self.height)
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Population standard deviation.
    pub fn std_dev(&self) -> f64 {
        let m = self.mean();
        (self.data.iter().map(|v| (v - m).powi(2)).sum::<f64>() / self.data.len() as f64).sqrt()
    }

    pub fn argmax(&self) -> (usize, usize) {
        let (i, _) = self
            .data
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| {
                if v > bv {
                    (i, v)
                } else {
                    (bi, bv)
                }
            });
        (i % self.width, i / self.width)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self::from_vec(self.width, self.height, self.data.iter().map(|v| v * factor).collect())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_vec(self.width, self.height, self.data.iter().map(|&v| f(v)).collect())
    }

    /// Mean over `factor x factor` blocks; trailing rows/columns that do not
    /// fill a block are dropped.
    pub fn downsample_mean(&self, factor: usize) -> Self {
        if factor <= 1 {
            return self.clone();
        }
        let w = self.width / factor;
        let h = self.height / factor;
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Image::zeros(w, h);
        for y in 0..h * factor {
            for x in 0..w * factor {
                out.data[(y / factor) * w + x / factor] += self.get(x, y) * norm;
            }
        }
        out
    }

    /// Adjoint of [`Image::downsample_mean`]: spreads a coarse gradient back
    /// onto a `width x height` grid.
    pub fn downsample_mean_adjoint(coarse: &Image, factor: usize, width: usize, height: usize) -> Self {
        if factor <= 1 {
            return coarse.clone();
        }
        let norm = 1.0 / (factor * factor) as f64;
        let mut out = Image::zeros(width, height);
        for y in 0..coarse.height * factor {
            for x in 0..coarse.width * factor {
                out.data[y * width + x] = coarse.get(x / factor, y / factor) * norm;
            }
        }
        out
    }
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".norm");
    PathBuf::from(s)
}

/// Scale used when writing an image to 16 bits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Normalization {
    pub max_value: f64,
}

fn quantize16(image: &Image) -> (Vec<u16>, Normalization) {
    let max = image.max().max(0.0);
    let scale = if max > 0.0 { 65535.0 / max } else { 0.0 };
    let px = image
        .data
        .iter()
        .map(|&v| (v.max(0.0) * scale).round().min(65535.0) as u16)
        .collect();
    (px, Normalization { max_value: max })
}

fn write_sidecar(path: &Path, norm: Normalization) -> Result<(), ImageError> {
    let side = sidecar_path(path);
    fs::write(
        &side,
        format!("max_value = {:e}\nbit_depth = 16\n", norm.max_value),
    )
    .map_err(io_err(&side))
}

fn read_sidecar(path: &Path) -> Option<Normalization> {
    let text = fs::read_to_string(sidecar_path(path)).ok()?;
    text.lines().find_map(|l| {
        let (k, v) = l.split_once('=')?;
        (k.trim() == "max_value")
            .then(|| v.trim().parse().ok())
            .flatten()
            .map(|max_value| Normalization { max_value })
    })
}

/// Writes a binary 16-bit PGM (P5, big-endian samples) plus its sidecar.
pub fn write_pgm16(path: &Path, image: &Image) -> Result<Normalization, ImageError> {
    let (px, norm) = quantize16(image);
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write!(w, "P5\n{} {}\n65535\n", image.width, image.height).map_err(io_err(path))?;
    for v in px {
        w.write_all(&v.to_be_bytes()).map_err(io_err(path))?;
    }
    w.flush().map_err(io_err(path))?;
    write_sidecar(path, norm)?;
    Ok(norm)
}

/// Writes a 16-bit grayscale PNG plus its sidecar.
pub fn write_png16(path: &Path, image: &Image) -> Result<Normalization, ImageError> {
    let (px, norm) = quantize16(image);
    let file = fs::File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let mut writer = enc
        .write_header()
        .map_err(|e| fmt_err(path, e.to_string()))?;
    let bytes: Vec<u8> = px.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer
        .write_image_data(&bytes)
        .map_err(|e| fmt_err(path, e.to_string()))?;
    writer.finish().map_err(|e| fmt_err(path, e.to_string()))?;
    write_sidecar(path, norm)?;
    Ok(norm)
}

/// Writes PNG when the extension is `.png`, PGM otherwise.
pub fn write_image(path: &Path, image: &Image) -> Result<Normalization, ImageError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => write_png16(path, image),
        _ => write_pgm16(path, image),
    }
}

fn pgm_tokens(bytes: &[u8], count: usize) -> Option<(Vec<String>, usize)> {
    let mut tokens = Vec::new();
    let mut i = 0;
    while tokens.len() < count && i < bytes.len() {
        match bytes[i] {
            b'#' => {
                while i < bytes.len() && bytes[i] != b'\n' {
                    i += 1;
                }
            }
            c if c.is_ascii_whitespace() => i += 1,
            _ => {
                let start = i;
                while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                    i += 1;
                }
                tokens.push(String::from_utf8_lossy(&bytes[start..i]).into_owned());
            }
        }
    }
    (tokens.len() == count).then_some((tokens, i))
}

/// Reads 8- or 16-bit PGM (binary P5 or ASCII P2). Intensities are raw
/// sample values unless a sidecar is present, in which case they are
/// rescaled to the recorded range.
pub fn read_pgm(path: &Path) -> Result<Image, ImageError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let (head, end) = pgm_tokens(&bytes, 4).ok_or_else(|| fmt_err(path, "truncated header"))?;
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| fmt_err(path, format!("bad header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&head[1])?, parse(&head[2])?, parse(&head[3])?);
    if maxval == 0 || maxval > 65535 {
        return Err(fmt_err(path, format!("unsupported maxval {maxval}")));
    }
    let n = w * h;
    let raw: Vec<f64> = match head[0].as_str() {
        "P5" => {
            let data = &bytes[end + 1..];
            if maxval < 256 {
                if data.len() < n {
                    return Err(fmt_err(path, "truncated pixel data"));
                }
                data[..n].iter().map(|&b| b as f64).collect()
            } else {
                if data.len() < 2 * n {
                    return Err(fmt_err(path, "truncated pixel data"));
                }
                data[..2 * n]
                    .chunks_exact(2)
                    .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
                    .collect()
            }
        }
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[end..]);
            let vals: Result<Vec<f64>, _> = text.split_whitespace().take(n).map(|t| t.parse::<f64>()).collect();
            let vals = vals.map_err(|_| fmt_err(path, "bad ASCII sample"))?;
            if vals.len() != n {
                return Err(fmt_err(path, "truncated pixel data"));
            }
            vals
        }
        m => return Err(fmt_err(path, format!("unsupported magic {m}"))),
    };
    Ok(apply_sidecar(path, Image::from_vec(w, h, raw), maxval as f64))
}

fn apply_sidecar(path: &Path, image: Image, maxval: f64) -> Image {
    match read_sidecar(path) {
        Some(norm) => image.scaled(norm.max_value / maxval),
        None => image,
    }
}

/// Reads an 8- or 16-bit grayscale PNG.
pub fn read_png(path: &Path) -> Result<Image, ImageError> {
    let file = fs::File::open(path).map_err(io_err(path))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| fmt_err(path, e.to_string()))?;
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| fmt_err(path, e.to_string()))?;
    if info.color_type != png::ColorType::Grayscale {
        return Err(fmt_err(path, "only grayscale PNG is supported"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let (raw, maxval): (Vec<f64>, f64) = match info.bit_depth {
        png::BitDepth::Eight => (buf[..w * h].iter().map(|&b| b as f64).collect(), 255.0),
        png::BitDepth::Sixteen => (
            buf[..2 * w * h]
                .chunks_exact(2)
                .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64)
                .collect(),
            65535.0,
        ),
        d => return Err(fmt_err(path, format!("unsupported bit depth {d:?}"))),
    };
    Ok(apply_sidecar(path, Image::from_vec(w, h, raw), maxval))
}

pub fn read_image(path: &Path) -> Result<Image, ImageError> {
    match path.extension().and_then(|e| e.to_str()) {
        Some(e) if e.eq_ignore_ascii_case("png") => read_png(path),
        _ => read_pgm(path),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp() -> Image {
        Image::from_vec(20, 17, (0..340).map(|i| (i as f64) * 0.37).collect())
    }

    #[test]
    fn pgm_round_trip_restores_scale() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.pgm");
        let img = ramp();
        let norm = write_pgm16(&p, &img).unwrap();
        assert_eq!(norm.max_value, img.max());
        let back = read_pgm(&p).unwrap();
        assert_eq!(back.dims(), img.dims());
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= img.max() / 65535.0);
        }
    }

    #[test]
    fn png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        let img = ramp();
        write_image(&p, &img).unwrap();
        let back = read_image(&p).unwrap();
        for (a, b) in img.data.iter().zip(&back.data) {
            assert!((a - b).abs() <= img.max() / 65535.0);
        }
    }

    #[test]
    fn reads_8bit_ascii_pgm_without_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.pgm");
        fs::write(&p, "P2\n# comment\n3 2\n255\n0 10 20\n30 40 255\n").unwrap();
        let img = read_pgm(&p).unwrap();
        assert_eq!(img.data, vec![0.0, 10.0, 20.0, 30.0, 40.0, 255.0]);
    }

    #[test]
    fn downsample_adjoint_identity() {
        let img = ramp();
        let coarse = img.downsample_mean(4);
        assert_eq!(coarse.dims(), (5, 4));
        let g = Image::from_vec(5, 4, (0..20).map(|i| i as f64 - 3.0).collect());
        let lhs: f64 = coarse.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let up = Image::downsample_mean_adjoint(&g, 4, 20, 17);
        let rhs: f64 = img.data.iter().zip(&up.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9 * lhs.abs().max(1.0));
    }
}
