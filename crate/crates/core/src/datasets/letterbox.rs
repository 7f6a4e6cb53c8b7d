use image::imageops::{self, FilterType};

use crate::bbox::BBox;
use crate::error::Result;
use crate::lowlight::PixelImage;

use super::{GroundTruthBox, LabeledImage};

/// Geometry of an aspect-preserving resize into a square canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Letterbox {
    pub scale_x: f64,
    pub scale_y: f64,
    pub pad_x: f64,
    pub pad_y: f64,
    pub side: u32,
}

impl Letterbox {
    pub fn new(width: u32, height: u32, side: u32) -> Self {
        let scale = side as f64 / width.max(height) as f64;
        let new_w = ((width as f64 * scale).round() as u32).clamp(1, side);
        let new_h = ((height as f64 * scale).round() as u32).clamp(1, side);
        Self {
            scale_x: new_w as f64 / width as f64,
            scale_y: new_h as f64 / height as f64,
            pad_x: ((side - new_w) / 2) as f64,
            pad_y: ((side - new_h) / 2) as f64,
            side,
        }
    }

    pub fn map_box(&self, b: &BBox) -> BBox {
        BBox::new_unchecked(
            b.x_min * self.scale_x + self.pad_x,
            b.y_min * self.scale_y + self.pad_y,
            b.x_max * self.scale_x + self.pad_x,
            b.y_max * self.scale_y + self.pad_y,
        )
    }

    /// Maps a canvas box back to original image coordinates.
    pub fn unmap_box(&self, b: &BBox) -> BBox {
        BBox::new_unchecked(
            (b.x_min - self.pad_x) / self.scale_x,
            (b.y_min - self.pad_y) / self.scale_y,
            (b.x_max - self.pad_x) / self.scale_x,
            (b.y_max - self.pad_y) / self.scale_y,
        )
    }
}

/// Resizes (bilinear) and centers `image` on a black `side`×`side` canvas.
pub fn letterbox(image: &PixelImage, side: u32) -> Result<(PixelImage, Letterbox)> {
    let lb = Letterbox::new(image.width(), image.height(), side);
    if image.width() == side && image.height() == side {
        return Ok((image.clone(), lb));
    }
    let src = image::RgbImage::from_raw(image.width(), image.height(), image.as_raw().to_vec())
        .expect("buffer length checked at construction");
    let new_w = (image.width() as f64 * lb.scale_x).round() as u32;
    let new_h = (image.height() as f64 * lb.scale_y).round() as u32;
    let resized = imageops::resize(&src, new_w, new_h, FilterType::Triangle);
    let mut canvas = image::RgbImage::new(side, side);
    imageops::replace(&mut canvas, &resized, lb.pad_x as i64, lb.pad_y as i64);
    Ok((PixelImage::new(side, side, canvas.into_raw())?, lb))
}

pub fn letterbox_sample(sample: &LabeledImage, side: u32) -> Result<(LabeledImage, Letterbox)> {
    let (image, lb) = letterbox(&sample.image, side)?;
    let boxes = sample
        .boxes
        .iter()
        .map(|b| GroundTruthBox {
            bbox: lb.map_box(&b.bbox),
            class_id: b.class_id,
        })
        .collect();
    Ok((
        LabeledImage {
            id: sample.id.clone(),
            image,
            boxes,
        },
        lb,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn wide_image_is_padded_vertically() {
        let img = PixelImage::filled(200, 100, [255, 255, 255]);
        let (out, lb) = letterbox(&img, 128).unwrap();
        assert_eq!((out.width(), out.height()), (128, 128));
        assert_eq!(lb.pad_x, 0.0);
        assert_eq!(lb.pad_y, 32.0);
        assert_eq!(out.pixel(64, 10), [0, 0, 0]);
        assert_eq!(out.pixel(64, 64), [255, 255, 255]);
    }

    proptest! {
        #[test]
        fn inverse_mapping_recovers_boxes(
            w in 16u32..2000, h in 16u32..2000, side in 64u32..1024,
            fx in 0.0..0.5f64, fy in 0.0..0.5f64, fw in 0.1..0.5f64, fh in 0.1..0.5f64,
        ) {
            let lb = Letterbox::new(w, h, side);
            let b = BBox::new_unchecked(fx * w as f64, fy * h as f64, (fx + fw) * w as f64, (fy + fh) * h as f64);
            let m = lb.map_box(&b);
            prop_assert!(m.within(side as f64 + 1e-9, side as f64 + 1e-9));
            let back = lb.unmap_box(&m);
            for (a, b) in [(back.x_min, b.x_min), (back.y_min, b.y_min), (back.x_max, b.x_max), (back.y_max, b.y_max)] {
                prop_assert!((a - b).abs() <= 1.0);
            }
            // aspect ratio within one canvas pixel of rounding
            let ar = w as f64 / h as f64;
            let ar_canvas = (w as f64 * lb.scale_x) / (h as f64 * lb.scale_y);
            prop_assert!((ar - ar_canvas).abs() / ar <= 2.0 / (w.min(h) as f64 * lb.scale_x.min(lb.scale_y)).max(1.0));
        }
    }
}
