//! Colored rectangles and ellipses on noise.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::lowlight::PixelImage;

use super::{ClassMap, GroundTruthBox, LabeledImage};

pub const SYNTH_MAX_CLASSES: usize = 8;
pub const SYNTH_MIN_RESOLUTION: u32 = 64;

#[derive(Clone, Copy)]
enum Shape {
    Rect,
    Ellipse,
}

// Consecutive classes differ in both shape and color.
const CLASSES: [(Shape, [u8; 3], &str); SYNTH_MAX_CLASSES] = [
    (Shape::Rect, [230, 60, 50], "red_rect"),
    (Shape::Ellipse, [60, 220, 70], "green_ellipse"),
    (Shape::Rect, [60, 90, 235], "blue_rect"),
    (Shape::Ellipse, [230, 220, 60], "yellow_ellipse"),
    (Shape::Ellipse, [230, 60, 50], "red_ellipse"),
    (Shape::Rect, [60, 220, 70], "green_rect"),
    (Shape::Ellipse, [60, 90, 235], "blue_ellipse"),
    (Shape::Rect, [230, 220, 60], "yellow_rect"),
];

const MAX_OBJECTS: usize = 3;
const PLACEMENT_TRIES: usize = 30;

/// Class map of `synth_shapes` with `num_classes` classes.
pub fn synth_class_map(num_classes: usize) -> Result<ClassMap> {
    check_classes(num_classes)?;
    ClassMap::new(CLASSES[..num_classes].iter().map(|c| c.2.to_string()).collect())
}

fn check_classes(num_classes: usize) -> Result<()> {
    if !(1..=SYNTH_MAX_CLASSES).contains(&num_classes) {
        return Err(Error::Domain(format!(
            "synthetic datasets support 1..={SYNTH_MAX_CLASSES} classes, got {num_classes}"
        )));
    }
    Ok(())
}

/// Generates `num_images` square images with 1 to 3 non-overlapping objects
/// each. Object sides span roughly 22% to 47% of the resolution. Output is a
/// pure function of the arguments.
pub fn synth_shapes(num_images: usize, resolution: u32, num_classes: usize, seed: u64) -> Result<Vec<LabeledImage>> {
    check_classes(num_classes)?;
    if resolution < SYNTH_MIN_RESOLUTION {
        return Err(Error::Domain(format!(
            "synthetic resolution must be >= {SYNTH_MIN_RESOLUTION}, got {resolution}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..num_images)
        .map(|i| render(&mut rng, resolution, num_classes, format!("synth_{seed}_{i:05}")))
        .collect())
}

fn render(rng: &mut ChaCha8Rng, r: u32, num_classes: usize, id: String) -> LabeledImage {
    let mut data = vec![0u8; (r * r * 3) as usize];
    let tint: [i32; 3] = [rng.random_range(-15..=15), rng.random_range(-15..=15), rng.random_range(-15..=15)];
    for px in data.chunks_exact_mut(3) {
        let base: i32 = rng.random_range(40..=120);
        for (v, t) in px.iter_mut().zip(tint) {
            *v = (base + t + rng.random_range(-10..=10)).clamp(0, 255) as u8;
        }
    }
    let mut image = PixelImage::new(r, r, data).expect("sized buffer");

    let min_side = (r as f64 * 0.22).round() as u32;
    let max_side = (r as f64 * 0.47).round() as u32;
    let n = rng.random_range(1..=MAX_OBJECTS);
    let mut boxes: Vec<GroundTruthBox> = Vec::with_capacity(n);
    for _ in 0..n {
        let class_id = rng.random_range(0..num_classes);
        for _ in 0..PLACEMENT_TRIES {
            let w = rng.random_range(min_side..=max_side);
            let h = rng.random_range(min_side..=max_side);
            let x0 = rng.random_range(0..=r - w);
            let y0 = rng.random_range(0..=r - h);
            let bbox = BBox::new_unchecked(x0 as f64, y0 as f64, (x0 + w) as f64, (y0 + h) as f64);
            if boxes.iter().any(|b| b.bbox.intersection_area(&bbox) > 0.0) {
                continue;
            }
            let (shape, color, _) = CLASSES[class_id];
            let color = color.map(|c| (c as i32 + rng.random_range(-20..=20)).clamp(0, 255) as u8);
            paint(&mut image, shape, color, x0, y0, w, h);
            boxes.push(GroundTruthBox { bbox, class_id });
            break;
        }
    }
    LabeledImage { id, image, boxes }
}

fn paint(image: &mut PixelImage, shape: Shape, color: [u8; 3], x0: u32, y0: u32, w: u32, h: u32) {
    let (rx, ry) = (w as f64 / 2.0, h as f64 / 2.0);
    for y in y0..y0 + h {
        for x in x0..x0 + w {
            let inside = match shape {
                Shape::Rect => true,
                Shape::Ellipse => {
                    let dx = (x - x0) as f64 + 0.5 - rx;
                    let dy = (y - y0) as f64 + 0.5 - ry;
                    (dx / rx).powi(2) + (dy / ry).powi(2) <= 1.0
                }
            };
            if inside {
                image.set_pixel(x, y, color);
            }
        }
    }
}
