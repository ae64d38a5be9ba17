//! Scene rasters: 8-bit RGB images persisted as binary PPM (P6), plus the
//! float view and patch flattening consumed by the image encoder.

use std::io::Read;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub rgb: Vec<u8>,
}

impl Raster {
    pub fn new(width: usize, height: usize, fill: [u8; 3]) -> Self {
        let mut rgb = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            rgb.extend_from_slice(&fill);
        }
        Raster { width, height, rgb }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, color: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.rgb[i..i + 3].copy_from_slice(&color);
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    pub fn write_ppm(&self, path: &str) -> Result<()> {
        let mut bytes = format!("P6\n{} {}\n255\n", self.width, self.height).into_bytes();
        bytes.extend_from_slice(&self.rgb);
        std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read_ppm(path: &str) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        parse_ppm(&bytes).map_err(|msg| Error::format(path, None, msg))
    }

    /// Channel-major float planes scaled to [0, 1].
    pub fn to_image(&self) -> ImageTensor {
        let plane = self.width * self.height;
        let mut data = vec![0.0; plane * 3];
        for p in 0..plane {
            for c in 0..3 {
                data[c * plane + p] = self.rgb[p * 3 + c] as f64 / 255.0;
            }
        }
        ImageTensor { channels: 3, height: self.height, width: self.width, data }
    }
}

fn parse_ppm(bytes: &[u8]) -> std::result::Result<Raster, String> {
    let mut pos = 0;
    let mut next_token = || -> std::result::Result<String, String> {
        while pos < bytes.len() && (bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !(bytes[pos] as char).is_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if next_token()? != "P6" {
        return Err("not a binary PPM (P6) file".into());
    }
    let width: usize = next_token()?.parse().map_err(|_| "bad width")?;
    let height: usize = next_token()?.parse().map_err(|_| "bad height")?;
    let maxval: usize = next_token()?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let data_start = pos + 1; // single whitespace after maxval
    let need = width * height * 3;
    if bytes.len() < data_start + need {
        return Err("truncated pixel data".into());
    }
    Ok(Raster { width, height, rgb: bytes[data_start..data_start + need].to_vec() })
}

/// C x H x W float image, channel-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Flatten non-overlapping patches into rows: one row per patch in row-major
/// grid order, columns ordered channel, then y, then x within the patch.
pub fn extract_patches(img: &ImageTensor, patch: usize) -> Result<Tensor> {
    if patch == 0 || img.height % patch != 0 || img.width % patch != 0 {
        return Err(Error::Config(format!(
            "image {}x{} not divisible by patch size {patch}",
            img.height, img.width,
        )));
    }
    let gh = img.height / patch;
    let gw = img.width / patch;
    let cols = img.channels * patch * patch;
    let mut out = Tensor::zeros(gh * gw, cols);
    for gy in 0..gh {
        for gx in 0..gw {
            let row = out.row_mut(gy * gw + gx);
            let mut k = 0;
            for c in 0..img.channels {
                for py in 0..patch {
                    for px in 0..patch {
                        row[k] = img.at(c, gy * patch + py, gx * patch + px);
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let mut r = Raster::new(4, 3, [10, 20, 30]);
        r.set(2, 1, [200, 100, 50]);
        r.write_ppm(path.to_str().unwrap()).unwrap();
        let back = Raster::read_ppm(path.to_str().unwrap()).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn patch_layout() {
        let mut raster = Raster::new(4, 4, [0, 0, 0]);
        raster.set(0, 0, [255, 0, 0]);
        raster.set(3, 3, [0, 0, 255]);
        let img = raster.to_image();
        let p = extract_patches(&img, 2).unwrap();
        assert_eq!(p.shape(), (4, 12));
        // top-left pixel red channel is the first column of patch 0
        assert_eq!(p.get(0, 0), 1.0);
        // bottom-right pixel blue channel is the last column of patch 3
        assert_eq!(p.get(3, 11), 1.0);
    }

    #[test]
    fn indivisible_patch_rejected() {
        let img = Raster::new(5, 5, [0, 0, 0]).to_image();
        assert!(extract_patches(&img, 2).is_err());
    }
}
