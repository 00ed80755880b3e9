//! 8-bit PNG input and output.

use std::path::Path;

use image::{ColorType, GrayImage, ImageReader, RgbImage};

use crate::{Error, ImageTensor, Result};

/// Loads an 8-bit grayscale or RGB PNG, mapping each byte `v` to `v / 255`.
pub fn load_png(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let reader = ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| Error::io(path, e))?;
    let format = reader.format();
    if format != Some(image::ImageFormat::Png) {
        return Err(Error::UnsupportedImage {
            path: path.to_path_buf(),
            reason: "not a PNG file".into(),
        });
    }
    let decoded = reader.decode().map_err(|source| Error::Codec {
        path: path.to_path_buf(),
        source,
    })?;
    let (width, height) = (decoded.width() as usize, decoded.height() as usize);
    let (channels, bytes) = match decoded.color() {
        ColorType::L8 => (1, decoded.into_bytes()),
        ColorType::Rgb8 => (3, decoded.into_bytes()),
        other => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: format!("expected 8-bit grayscale or RGB, found {other:?}"),
            })
        }
    };
    let data = bytes.iter().map(|&b| f64::from(b) / 255.0).collect();
    ImageTensor::new(height, width, channels, data)
}

/// Quantizes a value in `[0, 1]` to a byte with `round(v·255)`, clamped.
pub fn quantize(v: f64) -> u8 {
    (v * 255.0).round().clamp(0.0, 255.0) as u8
}

/// Writes a 1- or 3-channel image as an 8-bit PNG.
pub fn save_png(img: &ImageTensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (h, w, c) = img.shape();
    let bytes: Vec<u8> = img.data().iter().map(|&v| quantize(v)).collect();
    let result = match c {
        1 => GrayImage::from_raw(w as u32, h as u32, bytes).map(|buf| buf.save(path)),
        3 => RgbImage::from_raw(w as u32, h as u32, bytes).map(|buf| buf.save(path)),
        _ => {
            return Err(Error::UnsupportedImage {
                path: path.to_path_buf(),
                reason: format!("cannot write a {c}-channel image as PNG"),
            })
        }
    };
    match result {
        Some(Ok(())) => Ok(()),
        Some(Err(image::ImageError::IoError(e))) => Err(Error::io(path, e)),
        Some(Err(source)) => Err(Error::Codec {
            path: path.to_path_buf(),
            source,
        }),
        None => Err(Error::Shape(
            "pixel buffer does not match image size".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn white_and_black_pixels() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("w.png");
        RgbImage::from_raw(1, 1, vec![255, 255, 255])
            .unwrap()
            .save(&p)
            .unwrap();
        let img = load_png(&p).unwrap();
        assert_eq!(img.shape(), (1, 1, 3));
        assert_eq!(img.data(), &[1.0, 1.0, 1.0]);

        RgbImage::from_raw(1, 1, vec![0, 0, 0])
            .unwrap()
            .save(&p)
            .unwrap();
        assert!(load_png(&p).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn grayscale_bytes_map_to_unit_interval() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.png");
        GrayImage::from_raw(2, 2, vec![0, 128, 255, 64])
            .unwrap()
            .save(&p)
            .unwrap();
        let img = load_png(&p).unwrap();
        assert_eq!(img.shape(), (2, 2, 1));
        assert_eq!(img.data(), &[0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0]);
    }

    #[test]
    fn quantization_points() {
        assert_eq!(quantize(1.0), 255);
        assert_eq!(quantize(0.5), 128);
        assert_eq!(quantize(0.0), 0);
        assert_eq!(quantize(-3.0), 0);
        assert_eq!(quantize(7.0), 255);
    }

    #[test]
    fn round_trip_within_half_step() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("rt.png");
        for channels in [1, 3] {
            let mut rng = SeededRng::new(channels as u64);
            let data = rng.uniform(0.0, 1.0, 7 * 5 * channels).unwrap();
            let img = ImageTensor::new(7, 5, channels, data).unwrap();
            save_png(&img, &p).unwrap();
            let back = load_png(&p).unwrap();
            assert!(img.max_abs_diff(&back).unwrap() <= 1.0 / 510.0 + 1e-15);
        }
    }

    #[test]
    fn rejects_unsupported_inputs() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(
            load_png(dir.path().join("missing.png")),
            Err(Error::Io { .. })
        ));
        let p = dir.path().join("rgba.png");
        image::RgbaImage::from_raw(1, 1, vec![1, 2, 3, 4])
            .unwrap()
            .save(&p)
            .unwrap();
        assert!(matches!(load_png(&p), Err(Error::UnsupportedImage { .. })));
        let p16 = dir.path().join("g16.png");
        image::ImageBuffer::<image::Luma<u16>, _>::from_raw(1, 1, vec![1000u16])
            .unwrap()
            .save(&p16)
            .unwrap();
        assert!(matches!(
            load_png(&p16),
            Err(Error::UnsupportedImage { .. })
        ));
        let two = ImageTensor::zeros(1, 1, 2);
        assert!(save_png(&two, dir.path().join("x.png")).is_err());
    }
}
