//! Binary PGM (P5) / PPM (P6) 8-bit images and square region cropping.

use std::path::Path;

use inbn_tensor::{Element, Tensor};

use crate::bbox::{BBox, BoxFrame};
use crate::error::{CoreError, Result};

/// Scales centered pixels to roughly unit spread; with `[0, 1]` inputs the
/// correlation (a product of two feature maps) otherwise starts near zero.
pub const INPUT_GAIN: f64 = 4.0;

/// Interleaved `H × W × C` image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 || !(channels == 1 || channels == 3) || data.len() != width * height * channels {
            return Err(CoreError::contract(
                "image",
                format!("{width}x{height}x{channels} image with {} values", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn at(&self, x: usize, y: usize, c: usize) -> f32 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    pub fn mean(&self, c: usize) -> f32 {
        let n = self.width * self.height;
        let s: f64 = self.data.iter().skip(c).step_by(self.channels).map(|&v| v as f64).sum();
        (s / n as f64) as f32
    }

    /// Luma (Rec. 601) for color images, identity for gray.
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let data = self
            .data
            .chunks(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        Image {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }

    pub fn with_channels(&self, channels: usize) -> Result<Image> {
        match (self.channels, channels) {
            (a, b) if a == b => Ok(self.clone()),
            (3, 1) => Ok(self.to_gray()),
            (1, 3) => Ok(Image {
                width: self.width,
                height: self.height,
                channels: 3,
                data: self.data.iter().flat_map(|&v| [v, v, v]).collect(),
            }),
            (a, b) => Err(CoreError::contract("image", format!("cannot convert {a} to {b} channels"))),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    /// Model input `[1, H, W, C]`: `(v − 0.5) · INPUT_GAIN`.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let data = self.data.iter().map(|&v| T::of((v as f64 - 0.5) * INPUT_GAIN)).collect();
        Tensor::new([1, self.height, self.width, self.channels], data).expect("image dims are positive")
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                c if c.is_ascii_whitespace() => self.pos += 1,
                _ => break,
            }
        }
    }

    fn number(&mut self) -> Option<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        std::str::from_utf8(&self.bytes[start..self.pos]).ok()?.parse().ok()
    }
}

pub fn decode_pnm(bytes: &[u8]) -> std::result::Result<Image, String> {
    if bytes.len() < 2 {
        return Err("file too short".into());
    }
    let channels = match &bytes[..2] {
        b"P5" => 1,
        b"P6" => 3,
        m => return Err(format!("unsupported magic {:?} (need binary P5 or P6)", String::from_utf8_lossy(m))),
    };
    let mut c = Cursor { bytes, pos: 2 };
    let width = c.number().ok_or("bad width")?;
    let height = c.number().ok_or("bad height")?;
    let maxval = c.number().ok_or("bad maxval")?;
    if maxval == 0 || maxval > 255 {
        return Err(format!("maxval {maxval} unsupported (8-bit only)"));
    }
    if c.pos >= bytes.len() || !bytes[c.pos].is_ascii_whitespace() {
        return Err("missing whitespace after header".into());
    }
    let start = c.pos + 1;
    let n = width * height * channels;
    if width == 0 || height == 0 {
        return Err("zero image dimension".into());
    }
    if bytes.len() < start + n {
        return Err(format!("pixel data truncated: need {n} bytes, have {}", bytes.len().saturating_sub(start)));
    }
    // correctly rounded b / maxval, matching the generator's 8-bit quantization
    let data = bytes[start..start + n].iter().map(|&b| (b as f64 / maxval as f64) as f32).collect();
    Ok(Image {
        width,
        height,
        channels,
        data,
    })
}

pub fn read_pnm(path: &Path) -> Result<Image> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::Image {
        path: path.display().to_string(),
        msg: e.to_string(),
    })?;
    decode_pnm(&bytes).map_err(|msg| CoreError::Image {
        path: path.display().to_string(),
        msg,
    })
}

pub fn encode_pnm(img: &Image) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.to_bytes());
    out
}

pub fn write_pnm(path: &Path, img: &Image) -> Result<()> {
    std::fs::write(path, encode_pnm(img))?;
    Ok(())
}

/// Affine map between a square crop (normalized `[0, 1]` coordinates) and the image.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CropMap {
    pub x0: f64,
    pub y0: f64,
    pub side: f64,
}

impl CropMap {
    pub fn centered(cx: f64, cy: f64, side: f64) -> Self {
        Self {
            x0: cx - side / 2.0,
            y0: cy - side / 2.0,
            side,
        }
    }

    pub fn to_image(&self, b: &BBox) -> BBox {
        BBox::new(
            self.x0 + b.cx * self.side,
            self.y0 + b.cy * self.side,
            b.w * self.side,
            b.h * self.side,
            BoxFrame::Image,
        )
    }

    pub fn to_crop(&self, b: &BBox) -> BBox {
        BBox::new(
            (b.cx - self.x0) / self.side,
            (b.cy - self.y0) / self.side,
            b.w / self.side,
            b.h / self.side,
            BoxFrame::CropNormalized,
        )
    }
}

/// Side of the context region around a box: `√((w + p)(h + p)) · context`, `p = (w + h)/2`.
pub fn context_side(w: f64, h: f64, context: f64) -> f64 {
    let p = (w + h) / 2.0;
    ((w + p) * (h + p)).sqrt() * context
}

/// Bilinear resampling of the square `map` region to `out × out`; pixels
/// outside the frame read as the per-channel frame mean.
pub fn sample_square(img: &Image, map: &CropMap, out: usize) -> Image {
    let means: Vec<f32> = (0..img.channels).map(|c| img.mean(c)).collect();
    let px = |x: isize, y: isize, c: usize| -> f32 {
        if x < 0 || y < 0 || x >= img.width as isize || y >= img.height as isize {
            means[c]
        } else {
            img.at(x as usize, y as usize, c)
        }
    };
    let scale = map.side / out as f64;
    let mut data = Vec::with_capacity(out * out * img.channels);
    for v in 0..out {
        // pixel k of the image covers [k, k + 1); sample at the crop pixel center
        let sy = map.y0 + (v as f64 + 0.5) * scale - 0.5;
        let y0 = sy.floor();
        let fy = (sy - y0) as f32;
        for u in 0..out {
            let sx = map.x0 + (u as f64 + 0.5) * scale - 0.5;
            let x0 = sx.floor();
            let fx = (sx - x0) as f32;
            let (xi, yi) = (x0 as isize, y0 as isize);
            for c in 0..img.channels {
                let top = px(xi, yi, c) * (1.0 - fx) + px(xi + 1, yi, c) * fx;
                let bot = px(xi, yi + 1, c) * (1.0 - fx) + px(xi + 1, yi + 1, c) * fx;
                data.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Image {
        width: out,
        height: out,
        channels: img.channels,
        data,
    }
}

/// Square context crop centered on `b`, resampled to `out × out`.
pub fn crop_region(img: &Image, b: &BBox, out: usize, context: f64) -> Result<(Image, CropMap)> {
    b.check("crop_region")?;
    if out == 0 || context <= 0.0 {
        return Err(CoreError::contract("crop_region", "output size and context factor must be positive"));
    }
    let map = CropMap::centered(b.cx, b.cy, context_side(b.w, b.h, context));
    Ok((sample_square(img, &map, out), map))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pnm_round_trip() {
        let img = Image::new(3, 2, 1, vec![0.0, 1.0, 0.2, 0.4, 0.6, 0.8]).unwrap();
        let back = decode_pnm(&encode_pnm(&img)).unwrap();
        assert_eq!(back.to_bytes(), img.to_bytes());
        let color = Image::filled(2, 2, 3, 0.5);
        let back = decode_pnm(&encode_pnm(&color)).unwrap();
        assert_eq!(back.channels, 3);
        assert!(decode_pnm(b"P2\n1 1\n255\n0").is_err());
        assert!(decode_pnm(b"P5\n4 4\n255\n\x00\x01").is_err());
    }

    #[test]
    fn header_comments_are_skipped() {
        let img = decode_pnm(b"P5\n# made by hand\n2 1\n255\n\x00\xff").unwrap();
        assert_eq!(img.data, vec![0.0, 1.0]);
    }

    #[test]
    fn every_8bit_level_reloads_bitwise() {
        let data: Vec<f32> = (0..256).map(|k| (k as f64 / 255.0) as f32).collect();
        let img = Image::new(256, 1, 1, data.clone()).unwrap();
        let back = decode_pnm(&encode_pnm(&img)).unwrap();
        assert!(back.data.iter().zip(&data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
