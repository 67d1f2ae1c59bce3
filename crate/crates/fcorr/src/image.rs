//! RGB images in [0,1] and PPM (P6) file I/O. PNG support is available
//! behind the `png` feature.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

/// Planar RGB image, values in [0,1], stored as 3 row-major planes.
#[derive(Debug, Clone)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    /// Layout (3, height, width).
    pub data: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize) -> Image {
        Image { width, height, data: vec![0.0; 3 * width * height] }
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    /// Bilinear sample at continuous pixel coordinates, edge-clamped.
    pub fn sample(&self, c: usize, x: f64, y: f64) -> f64 {
        let x = x.max(0.0).min((self.width - 1) as f64);
        let y = y.max(0.0).min((self.height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let tx = x - x0 as f64;
        let ty = y - y0 as f64;
        let v00 = self.get(c, y0, x0);
        let v01 = self.get(c, y0, x1);
        let v10 = self.get(c, y1, x0);
        let v11 = self.get(c, y1, x1);
        (1.0 - ty) * ((1.0 - tx) * v00 + tx * v01) + ty * ((1.0 - tx) * v10 + tx * v11)
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::from_vec(&[1, 3, self.height, self.width], self.data.clone())
            .expect("image layout matches tensor shape")
    }

    pub fn resize(&self, width: usize, height: usize) -> Image {
        if width == self.width && height == self.height {
            return self.clone();
        }
        let t = self.to_tensor();
        let r = t.bilinear_resize(height, width).expect("resize");
        Image { width, height, data: r.data().to_vec() }
    }

    /// Crop a square window in pixels; out-of-bounds area is black.
    pub fn crop(&self, x0: isize, y0: isize, side: usize) -> Image {
        let mut out = Image::new(side, side);
        for c in 0..3 {
            for y in 0..side {
                let sy = y0 + y as isize;
                if sy < 0 || sy >= self.height as isize {
                    continue;
                }
                for x in 0..side {
                    let sx = x0 + x as isize;
                    if sx >= 0 && sx < self.width as isize {
                        out.set(c, y, x, self.get(c, sy as usize, sx as usize));
                    }
                }
            }
        }
        out
    }

    pub fn load(path: &Path) -> Result<Image> {
        let ext = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .unwrap_or_default();
        match ext.as_str() {
            "ppm" | "pnm" => read_ppm(path),
            #[cfg(feature = "png")]
            "png" => read_png(path),
            #[cfg(not(feature = "png"))]
            "png" => Err(Error::Format(
                "png support requires building with the `png` feature".to_string(),
            )),
            other => Err(Error::Format(format!("unsupported image extension `{}`", other))),
        }
    }
}

/// Two same-size input images.
#[derive(Debug, Clone)]
pub struct ImagePair {
    pub a: Image,
    pub b: Image,
}

impl ImagePair {
    /// Load and resize both images to `size` x `size` (must be a multiple
    /// of 32 so the pyramid levels divide evenly).
    pub fn load(path_a: &Path, path_b: &Path, size: usize) -> Result<ImagePair> {
        if size % 32 != 0 {
            return Err(Error::Config(format!("image size {} not divisible by 32", size)));
        }
        let a = Image::load(path_a)?.resize(size, size);
        let b = Image::load(path_b)?.resize(size, size);
        Ok(ImagePair { a, b })
    }

    pub fn from_images(a: Image, b: Image) -> Result<ImagePair> {
        if a.width != b.width || a.height != b.height {
            return Err(Error::Invalid(format!(
                "image sizes differ: {}x{} vs {}x{}",
                a.width, a.height, b.width, b.height
            )));
        }
        if a.width % 32 != 0 || a.height % 32 != 0 {
            return Err(Error::Invalid(format!(
                "image dims must be divisible by 32, got {}x{}",
                a.width, a.height
            )));
        }
        Ok(ImagePair { a, b })
    }
}

fn read_token<R: BufRead>(reader: &mut R) -> Result<String> {
    // PPM tokens separated by whitespace; '#' starts a comment to EOL.
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    loop {
        if reader.read(&mut byte)? == 0 {
            if tok.is_empty() {
                return Err(Error::Format("unexpected end of PPM header".to_string()));
            }
            return Ok(tok);
        }
        let c = byte[0] as char;
        if c == '#' {
            let mut line = String::new();
            reader.read_line(&mut line)?;
            continue;
        }
        if c.is_ascii_whitespace() {
            if !tok.is_empty() {
                return Ok(tok);
            }
        } else {
            tok.push(c);
        }
    }
}

pub fn read_ppm(path: &Path) -> Result<Image> {
    let mut reader = BufReader::new(std::fs::File::open(path)?);
    let magic = read_token(&mut reader)?;
    if magic != "P6" {
        return Err(Error::Format(format!("expected P6 PPM, got `{}`", magic)));
    }
    let width: usize = read_token(&mut reader)?
        .parse()
        .map_err(|_| Error::Format("bad PPM width".to_string()))?;
    let height: usize = read_token(&mut reader)?
        .parse()
        .map_err(|_| Error::Format("bad PPM height".to_string()))?;
    let maxval: usize = read_token(&mut reader)?
        .parse()
        .map_err(|_| Error::Format("bad PPM maxval".to_string()))?;
    if maxval != 255 {
        return Err(Error::Format(format!("only 8-bit PPM supported, maxval {}", maxval)));
    }
    let mut raw = vec![0u8; width * height * 3];
    reader.read_exact(&mut raw)?;
    let mut img = Image::new(width, height);
    for y in 0..height {
        for x in 0..width {
            for c in 0..3 {
                img.set(c, y, x, raw[(y * width + x) * 3 + c] as f64 / 255.0);
            }
        }
    }
    Ok(img)
}

pub fn write_ppm(img: &Image, path: &Path) -> Result<()> {
    let mut buf = Vec::with_capacity(img.width * img.height * 3 + 32);
    buf.extend_from_slice(format!("P6\n{} {}\n255\n", img.width, img.height).as_bytes());
    for y in 0..img.height {
        for x in 0..img.width {
            for c in 0..3 {
                let v = (img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
                buf.push(v);
            }
        }
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

#[cfg(feature = "png")]
fn read_png(path: &Path) -> Result<Image> {
    let dynimg = image::open(path).map_err(|e| Error::Format(format!("png: {}", e)))?;
    let rgb = dynimg.to_rgb8();
    let (w, h) = (rgb.width() as usize, rgb.height() as usize);
    let mut img = Image::new(w, h);
    for (x, y, p) in rgb.enumerate_pixels() {
        for c in 0..3 {
            img.set(c, y as usize, x as usize, p.0[c] as f64 / 255.0);
        }
    }
    Ok(img)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let mut img = Image::new(5, 3);
        for y in 0..3 {
            for x in 0..5 {
                img.set(0, y, x, (x as f64) / 4.0);
                img.set(1, y, x, (y as f64) / 2.0);
                img.set(2, y, x, 0.25);
            }
        }
        let dir = std::env::temp_dir().join("fcorr_img_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("t.ppm");
        write_ppm(&img, &path).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.height, 3);
        for y in 0..3 {
            for x in 0..5 {
                for c in 0..3 {
                    assert!((back.get(c, y, x) - img.get(c, y, x)).abs() <= 0.5 / 255.0 + 1e-9);
                }
            }
        }
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn ppm_comment_handling() {
        let dir = std::env::temp_dir().join("fcorr_img_test2");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("c.ppm");
        let mut bytes = b"P6\n# a comment\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[255, 0, 0, 0, 255, 0]);
        std::fs::write(&path, bytes).unwrap();
        let img = read_ppm(&path).unwrap();
        assert_eq!(img.width, 2);
        assert!((img.get(0, 0, 0) - 1.0).abs() < 1e-9);
        assert!((img.get(1, 0, 1) - 1.0).abs() < 1e-9);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn pair_requires_multiple_of_32() {
        let a = Image::new(100, 100);
        let b = Image::new(100, 100);
        assert!(ImagePair::from_images(a, b).is_err());
    }
}
