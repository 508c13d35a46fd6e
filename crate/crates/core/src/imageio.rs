//! Float images and their two disk formats.
//!
//! The pipeline is linear-light end to end: PNGs map 8-bit values to [0,1]
//! with no transfer function applied, and PFM stores raw 32-bit floats for
//! lossless depth/normal/gradient maps (values written through a PFM round
//! trip are exactly recovered). Normal maps go to PNG as `(n+1)/2` and to PFM
//! unencoded.

use std::io::{Read, Write};
use std::path::Path;

use crate::math::Vec3;

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("io error on image: {0}")]
    Io(#[from] std::io::Error),
    #[error("png error: {0}")]
    Png(String),
    #[error("unsupported image: {0}")]
    Unsupported(String),
    #[error("pfm parse error at byte {offset}: {msg}")]
    Pfm { offset: usize, msg: String },
}

/// Row-major float image, channel index fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl Image {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Image {
        Image {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn at_mut(&mut self, x: usize, y: usize, c: usize) -> &mut f64 {
        &mut self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn same_shape(&self, o: &Image) -> bool {
        self.width == o.width && self.height == o.height && self.channels == o.channels
    }

    /// Bundle an rgb slice per pixel (channels must be 3).
    pub fn set_rgb(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        debug_assert_eq!(self.channels, 3);
        let i = (y * self.width + x) * 3;
        self.data[i] = rgb[0];
        self.data[i + 1] = rgb[1];
        self.data[i + 2] = rgb[2];
    }

    pub fn rgb(&self, x: usize, y: usize) -> [f64; 3] {
        debug_assert_eq!(self.channels, 3);
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn from_rgb_pixels(width: usize, height: usize, pixels: &[[f64; 3]]) -> Image {
        debug_assert_eq!(pixels.len(), width * height);
        let mut img = Image::zeros(width, height, 3);
        for (i, p) in pixels.iter().enumerate() {
            img.data[i * 3] = p[0];
            img.data[i * 3 + 1] = p[1];
            img.data[i * 3 + 2] = p[2];
        }
        img
    }

    /// Mean over all entries of |a - b|; shapes must match.
    pub fn mean_abs_diff(&self, o: &Image) -> f64 {
        debug_assert!(self.same_shape(o));
        let n = self.data.len().max(1);
        self.data
            .iter()
            .zip(o.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n as f64
    }
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Write an image as 8-bit PNG. 1 channel saves grayscale, 3 saves RGB.
pub fn save_png(path: &Path, img: &Image) -> Result<(), ImageIoError> {
    let w = img.width as u32;
    let h = img.height as u32;
    match img.channels {
        1 => {
            let buf: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
            let im: image::GrayImage = image::ImageBuffer::from_raw(w, h, buf)
                .ok_or_else(|| ImageIoError::Unsupported("bad buffer size".into()))?;
            im.save(path).map_err(|e| ImageIoError::Png(e.to_string()))
        }
        3 => {
            let buf: Vec<u8> = img.data.iter().map(|&v| to_u8(v)).collect();
            let im: image::RgbImage = image::ImageBuffer::from_raw(w, h, buf)
                .ok_or_else(|| ImageIoError::Unsupported("bad buffer size".into()))?;
            im.save(path).map_err(|e| ImageIoError::Png(e.to_string()))
        }
        c => Err(ImageIoError::Unsupported(format!(
            "{c}-channel PNG not supported"
        ))),
    }
}

/// Load an 8-bit PNG into [0,1] floats; 16-bit or other depths are rejected.
pub fn load_png(path: &Path) -> Result<Image, ImageIoError> {
    let dyn_img = image::ImageReader::open(path)
        .map_err(|e| ImageIoError::Png(e.to_string()))?
        .decode()
        .map_err(|e| ImageIoError::Png(e.to_string()))?;
    match dyn_img {
        image::DynamicImage::ImageLuma8(im) => {
            let (w, h) = im.dimensions();
            let mut img = Image::zeros(w as usize, h as usize, 1);
            for (i, p) in im.pixels().enumerate() {
                img.data[i] = p.0[0] as f64 / 255.0;
            }
            Ok(img)
        }
        image::DynamicImage::ImageRgb8(im) => {
            let (w, h) = im.dimensions();
            let mut img = Image::zeros(w as usize, h as usize, 3);
            for (i, p) in im.pixels().enumerate() {
                for c in 0..3 {
                    img.data[i * 3 + c] = p.0[c] as f64 / 255.0;
                }
            }
            Ok(img)
        }
        image::DynamicImage::ImageRgba8(im) => {
            let (w, h) = im.dimensions();
            let mut img = Image::zeros(w as usize, h as usize, 3);
            for (i, p) in im.pixels().enumerate() {
                for c in 0..3 {
                    img.data[i * 3 + c] = p.0[c] as f64 / 255.0;
                }
            }
            Ok(img)
        }
        other => Err(ImageIoError::Unsupported(format!(
            "unsupported PNG pixel layout {other:?}"
        ))),
    }
}

/// Write a PFM (`PF` color, `Pf` grayscale), little endian, rows bottom-up.
pub fn save_pfm(path: &Path, img: &Image) -> Result<(), ImageIoError> {
    if img.channels != 1 && img.channels != 3 {
        return Err(ImageIoError::Unsupported(format!(
            "{}-channel PFM not supported",
            img.channels
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let tag = if img.channels == 3 { "PF" } else { "Pf" };
    write!(f, "{tag}\n{} {}\n-1.0\n", img.width, img.height)?;
    // bottom row first, little endian (negative scale)
    for y in (0..img.height).rev() {
        for x in 0..img.width {
            for c in 0..img.channels {
                f.write_all(&(img.at(x, y, c) as f32).to_le_bytes())?;
            }
        }
    }
    Ok(())
}

pub fn load_pfm(path: &Path) -> Result<Image, ImageIoError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    parse_pfm(&bytes)
}

pub fn parse_pfm(bytes: &[u8]) -> Result<Image, ImageIoError> {
    let mut pos = 0usize;
    let mut token = |bytes: &[u8]| -> Result<(String, usize), ImageIoError> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(ImageIoError::Pfm {
                offset: start,
                msg: "unexpected end of header".into(),
            });
        }
        let tok = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        // single whitespace after token belongs to the header
        if pos < bytes.len() {
            pos += 1;
        }
        Ok((tok, start))
    };
    let (tag, off) = token(bytes)?;
    let channels = match tag.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => {
            return Err(ImageIoError::Pfm {
                offset: off,
                msg: format!("bad magic `{tag}`"),
            })
        }
    };
    let (w_tok, w_off) = token(bytes)?;
    let width: usize = w_tok.parse().map_err(|_| ImageIoError::Pfm {
        offset: w_off,
        msg: format!("bad width `{w_tok}`"),
    })?;
    let (h_tok, h_off) = token(bytes)?;
    let height: usize = h_tok.parse().map_err(|_| ImageIoError::Pfm {
        offset: h_off,
        msg: format!("bad height `{h_tok}`"),
    })?;
    let (s_tok, s_off) = token(bytes)?;
    let scale: f64 = s_tok.parse().map_err(|_| ImageIoError::Pfm {
        offset: s_off,
        msg: format!("bad scale `{s_tok}`"),
    })?;
    if scale >= 0.0 {
        return Err(ImageIoError::Pfm {
            offset: s_off,
            msg: "big-endian PFM not supported".into(),
        });
    }
    let need = width * height * channels * 4;
    if bytes.len() < pos + need {
        return Err(ImageIoError::Pfm {
            offset: bytes.len(),
            msg: format!(
                "payload truncated: need {need} bytes, have {}",
                bytes.len().saturating_sub(pos)
            ),
        });
    }
    let mut img = Image::zeros(width, height, channels);
    let mut p = pos;
    for y in (0..height).rev() {
        for x in 0..width {
            for c in 0..channels {
                let v = f32::from_le_bytes([bytes[p], bytes[p + 1], bytes[p + 2], bytes[p + 3]]);
                *img.at_mut(x, y, c) = v as f64;
                p += 4;
            }
        }
    }
    Ok(img)
}

/// Pack a per-pixel normal map into a 3-channel image with the `(n+1)/2` PNG
/// encoding left to the writer; values here stay raw.
pub fn normals_to_image(width: usize, height: usize, normals: &[Vec3]) -> Image {
    debug_assert_eq!(normals.len(), width * height);
    let mut img = Image::zeros(width, height, 3);
    for (i, n) in normals.iter().enumerate() {
        img.data[i * 3] = n.x;
        img.data[i * 3 + 1] = n.y;
        img.data[i * 3 + 2] = n.z;
    }
    img
}

pub fn image_to_normals(img: &Image) -> Vec<Vec3> {
    debug_assert_eq!(img.channels, 3);
    (0..img.pixel_count())
        .map(|i| {
            crate::math::vec3(
                img.data[i * 3],
                img.data[i * 3 + 1],
                img.data[i * 3 + 2],
            )
        })
        .collect()
}

/// Map raw normals to the [0,1] PNG encoding.
pub fn encode_normal_image(img: &Image) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        *v = (*v + 1.0) / 2.0;
    }
    out
}

/// Inverse of [`encode_normal_image`].
pub fn decode_normal_image(img: &Image) -> Image {
    let mut out = img.clone();
    for v in &mut out.data {
        *v = *v * 2.0 - 1.0;
    }
    out
}
