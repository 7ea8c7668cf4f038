use crate::error::{Error, Result};

/// 8-bit RGB image, row-major, 3 bytes per pixel.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Ppm,
    Png,
}

impl Image {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::dim(format!("image size {width}x{height}")));
        }
        if pixels.len() != 3 * width * height {
            return Err(Error::dim(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                3 * width * height,
                pixels.len()
            )));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let pixels = rgb.iter().copied().cycle().take(3 * width * height).collect();
        Self::new(width, height, pixels).expect("consistent size")
    }

    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.pixels[i], self.pixels[i + 1], self.pixels[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = 3 * (y * self.width + x);
        self.pixels[i..i + 3].copy_from_slice(&rgb);
    }

    /// Channel-mean intensity per pixel, row-major.
    pub fn gray(&self) -> Vec<f64> {
        self.pixels
            .chunks_exact(3)
            .map(|p| (p[0] as f64 + p[1] as f64 + p[2] as f64) / 3.0)
            .collect()
    }

    pub fn mirrored(&self) -> Self {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }
}

pub fn load_image(bytes: &[u8], format: ImageFormat) -> Result<Image> {
    match format {
        ImageFormat::Ppm => decode_ppm(bytes),
        ImageFormat::Png => decode_png(bytes),
    }
}

#[cfg(feature = "png")]
fn decode_png(bytes: &[u8]) -> Result<Image> {
    let img = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)
        .map_err(|e| Error::format("png", e.to_string()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    Image::new(w as usize, h as usize, img.into_raw())
}

#[cfg(not(feature = "png"))]
fn decode_png(_bytes: &[u8]) -> Result<Image> {
    Err(Error::format("png", "PNG support is not compiled in (enable the `png` feature)"))
}

/// Binary PPM (`P6`, maxval 255). Header comments are allowed.
pub fn decode_ppm(bytes: &[u8]) -> Result<Image> {
    let err = |d: String| Error::format("ppm", d);
    if bytes.len() < 2 || &bytes[..2] != b"P6" {
        return Err(err("bad magic (expected P6)".into()));
    }
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for (i, name) in ["width", "height", "maxval"].iter().enumerate() {
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
            return Err(err(format!("missing {name} at byte offset {start}")));
        }
        fields[i] = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|e| err(format!("{name}: {e}")))?;
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(err(format!("header not terminated at byte offset {pos}")));
    }
    pos += 1;
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(err(format!("maxval {maxval} unsupported (only 255)")));
    }
    let need = 3 * w * h;
    let have = bytes.len() - pos;
    if have < need {
        return Err(err(format!(
            "truncated pixel payload: data ends at byte offset {} but {need} bytes from offset {pos} are needed",
            bytes.len()
        )));
    }
    Image::new(w, h, bytes[pos..pos + need].to_vec())
}

pub fn encode_ppm(img: &Image) -> Vec<u8> {
    let mut out = format!("P6\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}
