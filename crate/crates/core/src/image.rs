//! 8-bit RGB images, PPM/PNG codecs and bilinear sampling.

use std::fs;
use std::io::{BufWriter, Cursor};
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    width: usize,
    height: usize,
    pixels: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::Input(format!("image has zero extent {width}×{height}")));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::Input(format!(
                "{width}×{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Result<Self> {
        Self::new(width, height, rgb.repeat(width * height))
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixels(&self) -> &[u8] {
        &self.pixels
    }

    pub fn pixels_mut(&mut self) -> &mut [u8] {
        &mut self.pixels
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Bilinear sample of channel `c` at continuous pixel coordinates,
    /// treating everything outside the image as 0.
    pub fn sample_zero_fill(&self, x: f64, y: f64, c: usize) -> f64 {
        let x0 = x.floor();
        let y0 = y.floor();
        let fx = x - x0;
        let fy = y - y0;
        let (x0, y0) = (x0 as i64, y0 as i64);
        let at = |xi: i64, yi: i64| -> f64 {
            if xi < 0 || yi < 0 || xi >= self.width as i64 || yi >= self.height as i64 {
                0.0
            } else {
                self.pixels[(yi as usize * self.width + xi as usize) * 3 + c] as f64
            }
        };
        let mut v = 0.0;
        for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
            for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                let w = wx * wy;
                if w != 0.0 {
                    v += w * at(x0 + dx, y0 + dy);
                }
            }
        }
        v
    }

    /// Per-channel mean intensity.
    pub fn channel_means(&self) -> [f64; 3] {
        let mut sums = [0.0; 3];
        for px in self.pixels.chunks_exact(3) {
            for c in 0..3 {
                sums[c] += px[c] as f64;
            }
        }
        let n = (self.width * self.height) as f64;
        sums.map(|s| s / n)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path)?;
        let decode_err = |reason: String| Error::Decode {
            path: path.to_path_buf(),
            reason,
        };
        match extension(path).as_deref() {
            Some("ppm") => decode_ppm(&bytes).map_err(decode_err),
            Some("png") => decode_png(&bytes).map_err(decode_err),
            _ => Err(decode_err("unsupported file extension (png, ppm)".into())),
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        match extension(path).as_deref() {
            Some("ppm") => fs::write(path, self.encode_ppm())?,
            Some("png") => {
                let file = fs::File::create(path)?;
                self.encode_png(BufWriter::new(file))?;
            }
            _ => {
                return Err(Error::Input(format!(
                    "cannot write {}: unsupported extension",
                    path.display()
                )))
            }
        }
        Ok(())
    }

    pub fn encode_ppm(&self) -> Vec<u8> {
        let mut out = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    pub fn encode_png<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut enc = png::Encoder::new(w, self.width as u32, self.height as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let to_io = |e: png::EncodingError| Error::Io(std::io::Error::other(e.to_string()));
        let mut writer = enc.write_header().map_err(to_io)?;
        writer.write_image_data(&self.pixels).map_err(to_io)?;
        writer.finish().map_err(to_io)?;
        Ok(())
    }

    pub fn png_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.encode_png(&mut out)?;
        Ok(out)
    }
}

fn extension(path: &Path) -> Option<String> {
    path.extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
}

pub fn is_supported(path: &Path) -> bool {
    matches!(extension(path).as_deref(), Some("png" | "ppm"))
}

/// Binary PPM (P6) with maxval 255. Header comments are skipped.
pub fn decode_ppm(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P6" {
        return Err("not a binary PPM (P6)".into());
    }
    let mut number = || -> std::result::Result<usize, String> {
        let t = token()?;
        t.parse().map_err(|_| format!("bad header field {t:?}"))
    };
    let (w, h, maxval) = (number()?, number()?, number()?);
    if maxval != 255 {
        return Err(format!("only maxval 255 is supported, got {maxval}"));
    }
    // Exactly one whitespace byte separates the header from the raster.
    let start = pos + 1;
    let need = w * h * 3;
    if bytes.len() < start + need {
        return Err("raster shorter than header dimensions".into());
    }
    Image::new(w, h, bytes[start..start + need].to_vec()).map_err(|e| e.to_string())
}

pub fn decode_png(bytes: &[u8]) -> std::result::Result<Image, String> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| e.to_string())?;
    let size = reader.output_buffer_size().ok_or("image too large")?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(|e| e.to_string())?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(format!("unsupported bit depth {:?}", info.bit_depth));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.line_size * h];
    let mut rgb = Vec::with_capacity(w * h * 3);
    for row in buf.chunks_exact(info.line_size) {
        let row = &row[..w * info.color_type.samples()];
        match info.color_type {
            png::ColorType::Rgb => rgb.extend_from_slice(row),
            png::ColorType::Rgba => row.chunks_exact(4).for_each(|p| rgb.extend_from_slice(&p[..3])),
            png::ColorType::Grayscale => row.iter().for_each(|&g| rgb.extend_from_slice(&[g, g, g])),
            png::ColorType::GrayscaleAlpha => row.chunks_exact(2).for_each(|p| rgb.extend_from_slice(&[p[0]; 3])),
            png::ColorType::Indexed => return Err("palette was not expanded".into()),
        }
    }
    Image::new(w, h, rgb).map_err(|e| e.to_string())
}

/// Bilinear resize with half-pixel centres, returning real-valued
/// channel-major planes (`3×h×w`) in the 0–255 range.
pub fn resize_bilinear(img: &Image, out_w: usize, out_h: usize) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    let sx = w as f64 / out_w as f64;
    let sy = h as f64 / out_h as f64;
    let axis = |i: usize, scale: f64, n: usize| -> (usize, usize, f64) {
        let s = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (n - 1) as f64);
        let i0 = s.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, s - i0 as f64)
    };
    let xs: Vec<_> = (0..out_w).map(|x| axis(x, sx, w)).collect();
    let mut out = vec![0f32; 3 * out_w * out_h];
    for y in 0..out_h {
        let (y0, y1, fy) = axis(y, sy, h);
        for (x, &(x0, x1, fx)) in xs.iter().enumerate() {
            for c in 0..3 {
                let p = |xx: usize, yy: usize| img.pixels[(yy * w + xx) * 3 + c] as f64;
                let top = p(x0, y0) * (1.0 - fx) + p(x1, y0) * fx;
                let bottom = p(x0, y1) * (1.0 - fx) + p(x1, y1) * fx;
                out[(c * out_h + y) * out_w + x] = (top * (1.0 - fy) + bottom * fy) as f32;
            }
        }
    }
    out
}

/// Resize to an 8-bit image (rounded).
pub fn resize_image(img: &Image, out_w: usize, out_h: usize) -> Image {
    let planes = resize_bilinear(img, out_w, out_h);
    let n = out_w * out_h;
    let mut pixels = vec![0u8; 3 * n];
    for i in 0..n {
        for c in 0..3 {
            pixels[i * 3 + c] = planes[c * n + i].round().clamp(0.0, 255.0) as u8;
        }
    }
    Image {
        width: out_w,
        height: out_h,
        pixels,
    }
}
