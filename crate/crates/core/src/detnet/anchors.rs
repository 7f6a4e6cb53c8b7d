//! Dense anchor grid and box offset coding.

use crate::bbox::BBox;
use crate::scalecfg::ArchitectureConfig;

pub const MIN_LEVEL: u32 = 3;
pub const MAX_LEVEL: u32 = 7;
pub const NUM_LEVELS: usize = (MAX_LEVEL - MIN_LEVEL + 1) as usize;
pub const ANCHOR_SCALES: [f64; 3] = [1.0, 1.259_921_049_894_873_2, 1.587_401_051_968_199_4];
pub const ASPECT_RATIOS: [f64; 3] = [0.5, 1.0, 2.0];
pub const ANCHORS_PER_CELL: usize = ANCHOR_SCALES.len() * ASPECT_RATIOS.len();
/// Anchor side at scale 1 is this multiple of the level stride.
pub const ANCHOR_SIZE_FACTOR: f64 = 4.0;

/// Largest log-scale accepted when decoding, keeps `exp` finite.
const MAX_LOG_SCALE: f64 = 4.135_166_556_742_356; // ln(1000 / 16)

pub fn level_side(resolution: u32, level: u32) -> usize {
    (resolution >> level) as usize
}

/// Anchors ordered by level, then row, column, scale and aspect ratio. This
/// is the order in which the heads' per-cell channels are flattened.
pub fn generate_anchors(config: &ArchitectureConfig) -> Vec<BBox> {
    let r = config.input_resolution;
    let total: usize = (MIN_LEVEL..=MAX_LEVEL)
        .map(|l| level_side(r, l).pow(2) * ANCHORS_PER_CELL)
        .sum();
    let mut anchors = Vec::with_capacity(total);
    for level in MIN_LEVEL..=MAX_LEVEL {
        let stride = (1u32 << level) as f64;
        let side = level_side(r, level);
        for y in 0..side {
            for x in 0..side {
                let cx = (x as f64 + 0.5) * stride;
                let cy = (y as f64 + 0.5) * stride;
                for scale in ANCHOR_SCALES {
                    let base = ANCHOR_SIZE_FACTOR * stride * scale;
                    for ratio in ASPECT_RATIOS {
                        // ratio = width / height
                        let w = base * ratio.sqrt();
                        let h = base / ratio.sqrt();
                        anchors.push(BBox::from_center(cx, cy, w, h));
                    }
                }
            }
        }
    }
    anchors
}

/// `(dx, dy, dw, dh)` regression target of `target` relative to `anchor`.
pub fn encode(anchor: &BBox, target: &BBox) -> [f64; 4] {
    let (ax, ay) = anchor.center();
    let (tx, ty) = target.center();
    [
        (tx - ax) / anchor.width(),
        (ty - ay) / anchor.height(),
        (target.width() / anchor.width()).ln(),
        (target.height() / anchor.height()).ln(),
    ]
}

pub fn decode(anchor: &BBox, offsets: [f64; 4]) -> BBox {
    let (ax, ay) = anchor.center();
    let cx = ax + offsets[0] * anchor.width();
    let cy = ay + offsets[1] * anchor.height();
    let w = anchor.width() * offsets[2].min(MAX_LOG_SCALE).exp();
    let h = anchor.height() * offsets[3].min(MAX_LOG_SCALE).exp();
    BBox::from_center(cx, cy, w, h)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(r: u32) -> ArchitectureConfig {
        ArchitectureConfig::new(r, 0, 64, 3, 3).unwrap()
    }

    #[test]
    fn anchor_counts() {
        assert_eq!(generate_anchors(&cfg(512)).len(), 49104);
        assert_eq!(generate_anchors(&cfg(640)).len(), 76725);
        for r in [128, 256, 384, 896] {
            assert_eq!(generate_anchors(&cfg(r)).len() % 9, 0);
        }
    }

    #[test]
    fn first_anchor_geometry() {
        let anchors = generate_anchors(&cfg(128));
        // level 3, cell (0, 0), scale 1, ratio 1 sits at index 1
        let a = anchors[1];
        assert_eq!(a.center(), (4.0, 4.0));
        assert!((a.width() - 32.0).abs() < 1e-12 && (a.height() - 32.0).abs() < 1e-12);
        let wide = anchors[2];
        assert!((wide.width() / wide.height() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn encode_decode_roundtrip() {
        let anchor = BBox::new_unchecked(10.0, 10.0, 42.0, 42.0);
        let target = BBox::new_unchecked(5.0, 12.0, 60.0, 33.0);
        let back = decode(&anchor, encode(&anchor, &target));
        assert!((back.x_min - target.x_min).abs() < 1e-9);
        assert!((back.y_max - target.y_max).abs() < 1e-9);
    }
}
