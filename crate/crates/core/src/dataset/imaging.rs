use std::path::{Path, PathBuf};

use image::imageops::{self, FilterType};
use image::{DynamicImage, RgbImage};

use super::manifest::{ImageRecord, Roi};
use crate::backbone::BackboneSpec;
use crate::{Error, Result};

/// Result of a crop. `roi_applied` is false when the record had no ROI and
/// the full frame was passed through.
#[derive(Debug, Clone)]
pub struct Cropped {
    pub image: RgbImage,
    pub roi_applied: bool,
}

/// Cuts `roi` out of `image`. The output holds no pixel from outside the
/// rectangle.
pub fn crop_image(image: &RgbImage, roi: Option<Roi>) -> Result<Cropped> {
    match roi {
        None => Ok(Cropped { image: image.clone(), roi_applied: false }),
        Some(roi) => {
            roi.check_within(image.width(), image.height())?;
            let view = imageops::crop_imm(image, roi.x, roi.y, roi.w, roi.h);
            Ok(Cropped { image: view.to_image(), roi_applied: true })
        }
    }
}

/// Loads the record's canonical image (relative to `base_dir`) and crops it
/// to its ROI. The file on disk is left untouched.
pub fn crop_roi(record: &ImageRecord, base_dir: &Path) -> Result<Cropped> {
    let path = base_dir.join(&record.path);
    let image = image::open(&path)
        .map_err(|e| Error::Ingest { file: path.clone(), reason: e.to_string() })?
        .to_rgb8();
    let cropped = crop_image(&image, record.roi)?;
    if !cropped.roi_applied {
        log::warn!("record '{}' has no ROI; using the full frame", record.id);
    }
    Ok(cropped)
}

/// Path of the ROI crop stored next to a canonical image: `x.png` -> `x_roi.png`.
pub fn roi_path(canonical: &Path) -> PathBuf {
    let stem = canonical.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
    let ext = canonical.extension().and_then(|s| s.to_str()).unwrap_or("png");
    canonical.with_file_name(format!("{stem}_roi.{ext}"))
}

/// Direct bilinear resize to the backbone's input size. Grayscale and
/// alpha inputs are converted to 3-channel RGB.
pub fn resize_for(backbone: &BackboneSpec, image: &DynamicImage) -> Result<RgbImage> {
    if image.width() == 0 || image.height() == 0 {
        return Err(Error::Image("cannot resize a zero-dimension image".into()));
    }
    let rgb = image.to_rgb8();
    let (w, h) = (backbone.input.width, backbone.input.height);
    if rgb.dimensions() == (w, h) {
        return Ok(rgb);
    }
    Ok(imageops::resize(&rgb, w, h, FilterType::Triangle))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneName;
    use image::{GrayImage, Luma, Rgb};

    fn gradient(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x % 256) as u8, (y % 256) as u8, ((x + y) % 256) as u8]))
    }

    #[test]
    fn crop_dimensions_and_content() {
        let img = gradient(1000, 800);
        let c = crop_image(&img, Some(Roi::new(100, 100, 400, 300))).unwrap();
        assert!(c.roi_applied);
        assert_eq!(c.image.dimensions(), (400, 300));
        assert_eq!(c.image.get_pixel(0, 0), img.get_pixel(100, 100));
        assert_eq!(c.image.get_pixel(399, 299), img.get_pixel(499, 399));
    }

    #[test]
    fn full_frame_crop_is_identity_and_idempotent() {
        let img = gradient(120, 80);
        let roi = Some(Roi::full(120, 80));
        let once = crop_image(&img, roi).unwrap().image;
        assert_eq!(once, img);
        let twice = crop_image(&once, roi).unwrap().image;
        assert_eq!(twice, once);
    }

    #[test]
    fn out_of_bounds_crop_fails() {
        let img = gradient(1000, 800);
        assert!(matches!(
            crop_image(&img, Some(Roi::new(900, 700, 400, 300))),
            Err(Error::RoiOutOfBounds { .. })
        ));
    }

    #[test]
    fn missing_roi_passes_through_with_flag() {
        let img = gradient(10, 10);
        let c = crop_image(&img, None).unwrap();
        assert!(!c.roi_applied);
        assert_eq!(c.image, img);
    }

    #[test]
    fn resize_matches_backbone_input() {
        let img = DynamicImage::ImageRgb8(gradient(640, 480));
        let vgg = resize_for(&BackboneName::Vgg19.spec(), &img).unwrap();
        assert_eq!(vgg.dimensions(), (224, 224));
        let alex = resize_for(&BackboneName::AlexNet.spec(), &img).unwrap();
        assert_eq!(alex.dimensions(), (227, 227));
        let again = resize_for(&BackboneName::AlexNet.spec(), &img).unwrap();
        assert_eq!(alex.as_raw(), again.as_raw());
    }

    #[test]
    fn resize_at_native_size_is_identity() {
        let img = gradient(224, 224);
        let out = resize_for(&BackboneName::Vgg19.spec(), &DynamicImage::ImageRgb8(img.clone())).unwrap();
        assert_eq!(out, img);
    }

    #[test]
    fn grayscale_is_replicated() {
        let gray = GrayImage::from_pixel(50, 40, Luma([77]));
        let out = resize_for(&BackboneName::ResNet50.spec(), &DynamicImage::ImageLuma8(gray)).unwrap();
        assert_eq!(out.dimensions(), (224, 224));
        assert!(out.pixels().all(|p| p.0 == [77, 77, 77]));
    }

    #[test]
    fn zero_dimension_rejected() {
        let empty = DynamicImage::ImageRgb8(RgbImage::new(0, 5));
        assert!(resize_for(&BackboneName::Vgg19.spec(), &empty).is_err());
    }

    #[test]
    fn roi_path_suffix() {
        assert_eq!(roi_path(Path::new("images/a.png")), PathBuf::from("images/a_roi.png"));
    }
}
