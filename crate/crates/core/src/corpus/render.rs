//! Deterministic rasterizer for episodes and the reserved-color keypoint
//! extractor that inverts it.
//!
//! Each of the 21 hand keypoints is stamped last as a single pixel in a
//! color reserved for that keypoint alone. Reserved colors come from the
//! RGB lattice {0,85,170,255}³ with every scene color kept at L∞ distance
//! ≥ 48, so a tolerant nearest-color lookup recovers keypoints even from
//! imperfect generated frames.

use ndarray::{Array3, ArrayView3};

use crate::corpus::skeleton::{N_KEYPOINTS, PARENT};
use crate::corpus::{ObjectColor, ObjectShape};

pub const BACKGROUND: [u8; 3] = [40, 40, 40];
pub const HAND_COLOR: [u8; 3] = [210, 180, 150];

/// Maximum per-channel deviation at which a pixel still matches a reserved
/// marker color. Scene colors sit ≥ 48 away, markers 85 apart, so 40 is
/// unambiguous.
pub const MARKER_MATCH_TOL: i16 = 40;

pub fn object_color_rgb(c: ObjectColor) -> [u8; 3] {
    match c {
        ObjectColor::Red => [220, 60, 60],
        ObjectColor::Green => [60, 200, 60],
        ObjectColor::Blue => [70, 90, 230],
        ObjectColor::Yellow => [230, 220, 70],
    }
}

/// All colors a scene can paint, in fixed order: background, hand, then the
/// four object colors.
pub fn scene_palette() -> [[u8; 3]; 6] {
    [
        BACKGROUND,
        HAND_COLOR,
        object_color_rgb(ObjectColor::Red),
        object_color_rgb(ObjectColor::Green),
        object_color_rgb(ObjectColor::Blue),
        object_color_rgb(ObjectColor::Yellow),
    ]
}

fn linf(a: [u8; 3], b: [u8; 3]) -> i16 {
    (0..3)
        .map(|i| (a[i] as i16 - b[i] as i16).abs())
        .max()
        .unwrap()
}

/// The marker color assigned to each keypoint index.
pub fn marker_colors() -> [[u8; 3]; N_KEYPOINTS] {
    const L: [u8; 4] = [0, 85, 170, 255];
    let scene = scene_palette();
    let mut out = [[0u8; 3]; N_KEYPOINTS];
    let mut n = 0;
    'lattice: for &r in &L {
        for &g in &L {
            for &b in &L {
                let c = [r, g, b];
                if scene.iter().any(|&s| linf(c, s) < 48) {
                    continue;
                }
                out[n] = c;
                n += 1;
                if n == N_KEYPOINTS {
                    break 'lattice;
                }
            }
        }
    }
    assert_eq!(n, N_KEYPOINTS, "reserved-color lattice exhausted");
    out
}

/// Normalized [0,1] coordinates to integer pixel indices.
pub fn to_pixel(p: [f64; 2], w: usize, h: usize) -> (i64, i64) {
    (
        (p[0] * (w - 1) as f64).round() as i64,
        (p[1] * (h - 1) as f64).round() as i64,
    )
}

fn put(frame: &mut Array3<u8>, x: i64, y: i64, c: [u8; 3]) {
    let (h, w, _) = frame.dim();
    if x >= 0 && y >= 0 && (x as usize) < w && (y as usize) < h {
        for ch in 0..3 {
            frame[[y as usize, x as usize, ch]] = c[ch];
        }
    }
}

fn draw_line(frame: &mut Array3<u8>, a: (i64, i64), b: (i64, i64), c: [u8; 3]) {
    // Bresenham.
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(frame, x, y, c);
        if x == b.0 && y == b.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn draw_object(frame: &mut Array3<u8>, shape: ObjectShape, center: [f64; 2], radius_px: f64, c: [u8; 3]) {
    let (h, w, _) = frame.dim();
    let (cx, cy) = (center[0] * (w - 1) as f64, center[1] * (h - 1) as f64);
    let r = radius_px.ceil() as i64;
    let (px, py) = (cx.round() as i64, cy.round() as i64);
    for dy in -r..=r {
        for dx in -r..=r {
            let inside = match shape {
                ObjectShape::Circle => {
                    let fx = px as f64 + dx as f64 - cx;
                    let fy = py as f64 + dy as f64 - cy;
                    fx * fx + fy * fy <= radius_px * radius_px
                }
                ObjectShape::Square => dx.abs() <= r - 1 && dy.abs() <= r - 1,
                ObjectShape::Triangle => {
                    // Upward-pointing: width grows toward the bottom row.
                    let row = dy + r - 1;
                    row >= 0 && dx.abs() as f64 <= row as f64 * 0.75 && dy <= r - 1
                }
            };
            if inside {
                put(frame, px + dx, py + dy, c);
            }
        }
    }
}

/// One object's drawable state for a frame.
#[derive(Clone, Copy, Debug)]
pub struct DrawObject {
    pub shape: ObjectShape,
    pub color: ObjectColor,
    pub pos: [f64; 2],
    pub radius: f64,
}

/// Render one frame: background, objects, hand bones, then keypoint markers.
pub fn render_frame(h: usize, w: usize, objects: &[DrawObject], hand: &[[f64; 2]; N_KEYPOINTS]) -> Array3<u8> {
    let mut frame = Array3::from_elem((h, w, 3), 0u8);
    for ch in 0..3 {
        frame.slice_mut(ndarray::s![.., .., ch]).fill(BACKGROUND[ch]);
    }
    for o in objects {
        let radius_px = o.radius * (w - 1) as f64;
        draw_object(&mut frame, o.shape, o.pos, radius_px, object_color_rgb(o.color));
    }
    for k in 1..N_KEYPOINTS {
        let a = to_pixel(hand[PARENT[k]], w, h);
        let b = to_pixel(hand[k], w, h);
        draw_line(&mut frame, a, b, HAND_COLOR);
    }
    let colors = marker_colors();
    for k in 0..N_KEYPOINTS {
        let (x, y) = to_pixel(hand[k], w, h);
        put(&mut frame, x, y, colors[k]);
    }
    frame
}

/// Recover keypoint pixel centroids from a frame by reserved-color lookup.
///
/// Returns, per keypoint, the mean pixel position of all matching pixels, or
/// None when no pixel matches within tolerance.
pub fn recover_keypoints(frame: &ArrayView3<'_, u8>) -> [Option<[f64; 2]>; N_KEYPOINTS] {
    let (h, w, _) = frame.dim();
    let colors = marker_colors();
    let mut sums = [[0.0f64; 2]; N_KEYPOINTS];
    let mut counts = [0usize; N_KEYPOINTS];
    for y in 0..h {
        for x in 0..w {
            let px = [frame[[y, x, 0]], frame[[y, x, 1]], frame[[y, x, 2]]];
            // Unambiguous: reserved colors are ≥ 85 apart in L∞, tolerance 40.
            for (k, &c) in colors.iter().enumerate() {
                if linf(px, c) <= MARKER_MATCH_TOL {
                    sums[k][0] += x as f64;
                    sums[k][1] += y as f64;
                    counts[k] += 1;
                    break;
                }
            }
        }
    }
    let mut out = [None; N_KEYPOINTS];
    for k in 0..N_KEYPOINTS {
        if counts[k] > 0 {
            out[k] = Some([sums[k][0] / counts[k] as f64, sums[k][1] / counts[k] as f64]);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::skeleton::HandPose;
    use crate::corpus::GraspType;

    #[test]
    fn marker_colors_are_distinct_and_far_from_scene() {
        let colors = marker_colors();
        let scene = scene_palette();
        for i in 0..N_KEYPOINTS {
            for j in i + 1..N_KEYPOINTS {
                assert!(linf(colors[i], colors[j]) >= 85);
            }
            for &s in &scene {
                assert!(linf(colors[i], s) >= 48);
            }
        }
    }

    #[test]
    fn rendered_keypoints_recover_within_one_pixel() {
        let hand = HandPose::blended([0.5, 0.45], 0.7, GraspType::Wrap, 0.6).keypoints();
        let objects = [DrawObject {
            shape: ObjectShape::Circle,
            color: ObjectColor::Red,
            pos: [0.74, 0.74],
            radius: 0.065,
        }];
        let frame = render_frame(32, 32, &objects, &hand);
        let rec = recover_keypoints(&frame.view());
        for k in 0..N_KEYPOINTS {
            let got = rec[k].expect("keypoint visible");
            let want = [hand[k][0] * 31.0, hand[k][1] * 31.0];
            let d = ((got[0] - want[0]).powi(2) + (got[1] - want[1]).powi(2)).sqrt();
            assert!(d <= 1.0, "keypoint {k}: {d}");
        }
    }

    #[test]
    fn all_black_frame_recovers_nothing() {
        let frame = Array3::<u8>::zeros((32, 32, 3));
        let rec = recover_keypoints(&frame.view());
        assert!(rec.iter().all(|r| r.is_none()));
    }

    #[test]
    fn rendering_is_translation_equivariant_for_integer_shifts() {
        let base = HandPose::blended([0.35, 0.35], 0.3, GraspType::Flat, 0.0).keypoints();
        let mut shifted = base;
        let (dx, dy) = (3.0 / 31.0, 2.0 / 31.0);
        for kp in shifted.iter_mut() {
            kp[0] += dx;
            kp[1] += dy;
        }
        let f0 = render_frame(32, 32, &[], &base);
        let f1 = render_frame(32, 32, &[], &shifted);
        for y in 0..25 {
            for x in 0..25 {
                for c in 0..3 {
                    assert_eq!(f0[[y, x, c]], f1[[y + 2, x + 3, c]]);
                }
            }
        }
    }

    #[test]
    fn shapes_paint_disjoint_area_per_kind() {
        for shape in [ObjectShape::Circle, ObjectShape::Square, ObjectShape::Triangle] {
            let o = DrawObject { shape, color: ObjectColor::Blue, pos: [0.5, 0.5], radius: 0.065 };
            let hand = [[0.05, 0.05]; N_KEYPOINTS];
            let frame = render_frame(32, 32, &[o], &hand);
            let blue = object_color_rgb(ObjectColor::Blue);
            let count = frame
                .exact_chunks((1, 1, 3))
                .into_iter()
                .filter(|px| px[[0, 0, 0]] == blue[0] && px[[0, 0, 1]] == blue[1] && px[[0, 0, 2]] == blue[2])
                .count();
            assert!(count >= 9, "{shape:?} painted only {count} pixels");
        }
    }
}
