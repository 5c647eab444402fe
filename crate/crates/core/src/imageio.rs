//! PNG encode/decode with fixed byte conventions.
//!
//! - photos and garment images live in [-1, 1]; byte = round((v + 1) * 127.5),
//!   so exact mid-gray 0.0 stores as 128
//! - pose renders live in [0, 1]; byte = round(v * 255)
//! - label maps store id * 20 in an 8-bit gray channel
//! - binary masks store 0 or 255
//!
//! Each decoder inverts its encoder, and decoding followed by re-encoding is
//! byte-identical, so files survive pipeline round trips unchanged.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::element::Element;
use crate::error::{Error, Result};
use crate::label::{LabelMap, LABEL_BYTE_STEP, MISALIGN};
use crate::masks::Mask;
use crate::tensor::Tensor;

fn check_chw(t: &Tensor<impl Element>) -> Result<(usize, usize)> {
    let s = t.shape();
    if s.len() != 4 || s[0] != 1 || s[1] != 3 {
        return Err(Error::Shape(format!("expected [1, 3, H, W] image, got {s:?}")));
    }
    Ok((s[2], s[3]))
}

fn save_rgb(path: &Path, img: RgbImage) -> Result<()> {
    img.save(path).map_err(|e| Error::Image(format!("writing {}: {e}", path.display())))
}

fn load_rgb(path: &Path) -> Result<RgbImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .decode()
        .map_err(|e| Error::Image(format!("decoding {}: {e}", path.display())))?;
    Ok(img.into_rgb8())
}

fn load_gray(path: &Path) -> Result<GrayImage> {
    let img = ImageReader::open(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?
        .decode()
        .map_err(|e| Error::Image(format!("decoding {}: {e}", path.display())))?;
    Ok(img.into_luma8())
}

/// Write a [-1, 1] image tensor as an 8-bit RGB PNG.
pub fn save_signed<E: Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let (h, w) = check_chw(t)?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (c, b) in px.iter_mut().enumerate() {
                let v = t.plane(0, c)[y * w + x].to_f64();
                *b = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    save_rgb(path, img)
}

/// Read an RGB PNG back into a [-1, 1] tensor.
pub fn load_signed<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let img = load_rgb(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    for c in 0..3 {
        let plane = t.plane_mut(0, c);
        for y in 0..h {
            for x in 0..w {
                let b = img.get_pixel(x as u32, y as u32).0[c];
                plane[y * w + x] = E::from_f64(b as f64 / 127.5 - 1.0);
            }
        }
    }
    Ok(t)
}

/// Write a [0, 1] image tensor (pose render) as an 8-bit RGB PNG.
pub fn save_unit<E: Element>(path: &Path, t: &Tensor<E>) -> Result<()> {
    let (h, w) = check_chw(t)?;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let mut px = [0u8; 3];
            for (c, b) in px.iter_mut().enumerate() {
                let v = t.plane(0, c)[y * w + x].to_f64();
                *b = (v * 255.0).round().clamp(0.0, 255.0) as u8;
            }
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    save_rgb(path, img)
}

/// Read an RGB PNG back into a [0, 1] tensor.
pub fn load_unit<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let img = load_rgb(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[1, 3, h, w]);
    for c in 0..3 {
        let plane = t.plane_mut(0, c);
        for y in 0..h {
            for x in 0..w {
                let b = img.get_pixel(x as u32, y as u32).0[c];
                plane[y * w + x] = E::from_f64(b as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Write a label map as a gray PNG with byte = label * 20.
pub fn save_label(path: &Path, map: &LabelMap) -> Result<()> {
    let mut img = GrayImage::new(map.w() as u32, map.h() as u32);
    for y in 0..map.h() {
        for x in 0..map.w() {
            img.put_pixel(x as u32, y as u32, image::Luma([map.get(y, x) * LABEL_BYTE_STEP]));
        }
    }
    img.save(path).map_err(|e| Error::Image(format!("writing {}: {e}", path.display())))
}

/// Read a label-map PNG, rejecting any byte that is not a valid label times 20.
pub fn load_label(path: &Path) -> Result<LabelMap> {
    let img = load_gray(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            let b = img.get_pixel(x as u32, y as u32).0[0];
            if b % LABEL_BYTE_STEP != 0 || b / LABEL_BYTE_STEP > MISALIGN {
                return Err(Error::Image(format!(
                    "{}: byte {b} at ({x}, {y}) is not an encoded label",
                    path.display()
                )));
            }
            data[y * w + x] = b / LABEL_BYTE_STEP;
        }
    }
    LabelMap::new(h, w, data)
}

/// Write a binary mask as a gray PNG with bytes 0 / 255.
pub fn save_mask(path: &Path, mask: &Mask) -> Result<()> {
    let mut img = GrayImage::new(mask.w() as u32, mask.h() as u32);
    for y in 0..mask.h() {
        for x in 0..mask.w() {
            img.put_pixel(x as u32, y as u32, image::Luma([if mask.get(y, x) { 255 } else { 0 }]));
        }
    }
    img.save(path).map_err(|e| Error::Image(format!("writing {}: {e}", path.display())))
}

/// Read a mask PNG; any nonzero byte counts as inside.
pub fn load_mask(path: &Path) -> Result<Mask> {
    let img = load_gray(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = u8::from(img.get_pixel(x as u32, y as u32).0[0] != 0);
        }
    }
    Mask::new(h, w, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::label;
    use crate::person::synth_sample;

    fn tmp(name: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join("tryon-imageio-tests");
        std::fs::create_dir_all(&dir).unwrap();
        dir.join(name)
    }

    #[test]
    fn neutral_gray_encodes_to_byte_128() {
        let t = Tensor::<f64>::zeros(&[1, 3, 2, 2]);
        let p = tmp("gray.png");
        save_signed(&p, &t).unwrap();
        let img = load_rgb(&p).unwrap();
        assert!(img.pixels().all(|px| px.0 == [128, 128, 128]));
    }

    #[test]
    fn signed_roundtrip_is_byte_stable() {
        let s = synth_sample::<f32>(41, 64, 48);
        let p1 = tmp("rt1.png");
        let p2 = tmp("rt2.png");
        save_signed(&p1, &s.image).unwrap();
        let back = load_signed::<f32>(&p1).unwrap();
        save_signed(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn unit_roundtrip_recovers_pose_bytes() {
        let s = synth_sample::<f32>(42, 64, 48);
        let p1 = tmp("pose1.png");
        let p2 = tmp("pose2.png");
        save_unit(&p1, &s.pose).unwrap();
        let back = load_unit::<f32>(&p1).unwrap();
        save_unit(&p2, &back).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        // the synthetic pose palette is already byte-aligned nowhere near
        // rounding boundaries, so values survive one trip exactly for 0 and 1
        assert_eq!(back.data()[0], 0.0);
    }

    #[test]
    fn label_roundtrip_is_exact_and_bad_bytes_rejected() {
        let s = synth_sample::<f32>(43, 64, 48);
        let p = tmp("seg.png");
        save_label(&p, &s.seg).unwrap();
        let back = load_label(&p).unwrap();
        assert_eq!(back.data(), s.seg.data());

        let bad = tmp("bad_label.png");
        let mut img = GrayImage::new(2, 2);
        img.put_pixel(0, 0, image::Luma([7]));
        img.save(&bad).unwrap();
        assert!(load_label(&bad).is_err(), "byte 7 is not a label code");

        let big = tmp("big_label.png");
        let mut img = GrayImage::new(1, 1);
        img.put_pixel(0, 0, image::Luma([220]));
        img.save(&big).unwrap();
        assert!(load_label(&big).is_err(), "id 11 exceeds the label range");
    }

    #[test]
    fn mask_roundtrip_is_exact() {
        let s = synth_sample::<f32>(44, 64, 48);
        let p = tmp("mask.png");
        save_mask(&p, &s.cloth_mask).unwrap();
        let back = load_mask(&p).unwrap();
        assert_eq!(back.data(), s.cloth_mask.data());
    }

    #[test]
    fn every_label_value_survives_the_byte_mapping() {
        let mut m = LabelMap::filled(1, 11, label::BACKGROUND);
        for x in 0..11 {
            m.set(0, x, x as u8);
        }
        let p = tmp("all_labels.png");
        save_label(&p, &m).unwrap();
        assert_eq!(load_label(&p).unwrap().data(), m.data());
    }
}
