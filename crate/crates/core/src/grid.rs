//! Planar `C × H × W` grids of reals and their PNG encodings.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Grid {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl Grid {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::dim(
                "grid data",
                format!("{channels}x{height}x{width}"),
                data.len(),
            ));
        }
        Ok(Self {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.height, self.width)
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[self.idx(c, y, x)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        let i = self.idx(c, y, x);
        self.data[i] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Box-filter downsampling by an integer factor.
    pub fn downsample(&self, factor: usize) -> Result<Self> {
        if factor == 0 || !self.height.is_multiple_of(factor) || !self.width.is_multiple_of(factor) {
            return Err(Error::Invalid(format!(
                "cannot downsample {}x{} by {factor}",
                self.height, self.width
            )));
        }
        let (h, w) = (self.height / factor, self.width / factor);
        let mut out = Self::zeros(self.channels, h, w);
        let norm = 1.0 / (factor * factor) as f64;
        for c in 0..self.channels {
            for y in 0..h {
                for x in 0..w {
                    let mut s = 0.0;
                    for dy in 0..factor {
                        for dx in 0..factor {
                            s += self.get(c, y * factor + dy, x * factor + dx);
                        }
                    }
                    out.set(c, y, x, s * norm);
                }
            }
        }
        Ok(out)
    }

    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        if self.shape() != other.shape() {
            return Err(Error::dim(
                "grid comparison",
                format!("{:?}", self.shape()),
                format!("{:?}", other.shape()),
            ));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).sum();
        Ok(s / self.data.len().max(1) as f64)
    }

    pub fn clamp01(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encoder<'a>(
    w: &'a mut BufWriter<File>,
    width: usize,
    height: usize,
    color: png::ColorType,
) -> png::Encoder<'a, &'a mut BufWriter<File>> {
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    enc
}

fn png_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        msg: e.to_string(),
    }
}

/// Encodes a 1- or 3-channel grid (values in `[0, 1]`) as 8-bit PNG bytes.
pub fn encode_png(grid: &Grid) -> Result<Vec<u8>> {
    let color = match grid.channels {
        1 => png::ColorType::Grayscale,
        3 => png::ColorType::Rgb,
        c => return Err(Error::Invalid(format!("cannot encode {c}-channel grid as PNG"))),
    };
    let n = grid.plane_len();
    let mut raw = Vec::with_capacity(n * grid.channels);
    for p in 0..n {
        for c in 0..grid.channels {
            raw.push(to_u8(grid.data[c * n + p]));
        }
    }
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, grid.width as u32, grid.height as u32);
        enc.set_color(color);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc
            .write_header()
            .map_err(|e| Error::Invalid(format!("png header: {e}")))?;
        writer
            .write_image_data(&raw)
            .map_err(|e| Error::Invalid(format!("png data: {e}")))?;
    }
    Ok(out)
}

pub fn write_png(grid: &Grid, path: &Path) -> Result<()> {
    let bytes = encode_png(grid)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Reads an 8-bit grayscale or RGB(A) PNG into a grid with values in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Grid> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    decode_from(BufReader::new(file), path)
}

/// In-memory counterpart of [`read_png`].
pub fn decode_png(bytes: &[u8]) -> Result<Grid> {
    decode_from(std::io::Cursor::new(bytes), Path::new("<memory>"))
}

fn decode_from<R: std::io::BufRead + std::io::Seek>(input: R, path: &Path) -> Result<Grid> {
    let mut decoder = png::Decoder::new(input);
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let (src_channels, channels) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        png::ColorType::Indexed => return Err(png_err(path, "unexpected indexed PNG")),
    };
    let mut grid = Grid::zeros(channels, h, w);
    let n = h * w;
    for p in 0..n {
        for c in 0..channels {
            grid.data[c * n + p] = buf[p * src_channels + c] as f64 / 255.0;
        }
    }
    Ok(grid)
}

/// Writes a label grid as an indexed PNG whose palette entries carry the
/// given colours; pixel values are the raw labels.
pub fn write_indexed_png(labels: &[u8], height: usize, width: usize, palette: &[[u8; 3]], path: &Path) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::dim("indexed png labels", height * width, labels.len()));
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut enc = encoder(&mut w, width, height, png::ColorType::Indexed);
    enc.set_palette(palette.iter().flatten().copied().collect::<Vec<u8>>());
    let mut writer = enc.write_header().map_err(|e| png_err(path, e))?;
    writer.write_image_data(labels).map_err(|e| png_err(path, e))?;
    Ok(())
}

/// Reads an 8-bit indexed PNG and returns its raw palette indices.
pub fn read_indexed_png(path: &Path) -> Result<(Vec<u8>, usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info().map_err(|e| png_err(path, e))?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| png_err(path, "image too large"))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf).map_err(|e| png_err(path, e))?;
    if info.bit_depth != png::BitDepth::Eight
        || !matches!(info.color_type, png::ColorType::Indexed | png::ColorType::Grayscale)
    {
        return Err(png_err(path, "expected an 8-bit indexed PNG"));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    buf.truncate(w * h);
    Ok((buf, h, w))
}
