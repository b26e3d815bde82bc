//! Annotated-image rendering: draws detection boxes and labels onto a
//! pixel buffer and saves PNGs. Text uses an embedded 5x7 bitmap font so
//! no external assets are required.

use crate::geometry::BoundingBox;
use crate::util::derive_seed_str;
use crate::Result;
use ndarray::Array3;
use std::path::Path;

/// 5x7 glyphs; each byte is one row, low 5 bits left-to-right.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0e, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'B' => [0x0f, 0x11, 0x11, 0x0f, 0x11, 0x11, 0x0f],
        'C' => [0x0e, 0x11, 0x01, 0x01, 0x01, 0x11, 0x0e],
        'D' => [0x0f, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0f],
        'E' => [0x1f, 0x01, 0x01, 0x0f, 0x01, 0x01, 0x1f],
        'F' => [0x1f, 0x01, 0x01, 0x0f, 0x01, 0x01, 0x01],
        'G' => [0x0e, 0x11, 0x01, 0x19, 0x11, 0x11, 0x0e],
        'H' => [0x11, 0x11, 0x11, 0x1f, 0x11, 0x11, 0x11],
        'I' => [0x0e, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0e],
        'J' => [0x1c, 0x08, 0x08, 0x08, 0x08, 0x09, 0x06],
        'K' => [0x11, 0x09, 0x05, 0x03, 0x05, 0x09, 0x11],
        'L' => [0x01, 0x01, 0x01, 0x01, 0x01, 0x01, 0x1f],
        'M' => [0x11, 0x1b, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x13, 0x15, 0x19, 0x11, 0x11, 0x11],
        'O' => [0x0e, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'P' => [0x0f, 0x11, 0x11, 0x0f, 0x01, 0x01, 0x01],
        'Q' => [0x0e, 0x11, 0x11, 0x11, 0x15, 0x09, 0x16],
        'R' => [0x0f, 0x11, 0x11, 0x0f, 0x05, 0x09, 0x11],
        'S' => [0x0e, 0x11, 0x01, 0x0e, 0x10, 0x11, 0x0e],
        'T' => [0x1f, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0e],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0a, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x1b, 0x11],
        'X' => [0x11, 0x11, 0x0a, 0x04, 0x0a, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0a, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1f, 0x10, 0x08, 0x04, 0x02, 0x01, 0x1f],
        '0' => [0x0e, 0x19, 0x15, 0x15, 0x15, 0x13, 0x0e],
        '1' => [0x04, 0x06, 0x04, 0x04, 0x04, 0x04, 0x0e],
        '2' => [0x0e, 0x11, 0x10, 0x08, 0x04, 0x02, 0x1f],
        '3' => [0x0e, 0x11, 0x10, 0x0c, 0x10, 0x11, 0x0e],
        '4' => [0x08, 0x0c, 0x0a, 0x09, 0x1f, 0x08, 0x08],
        '5' => [0x1f, 0x01, 0x0f, 0x10, 0x10, 0x11, 0x0e],
        '6' => [0x0c, 0x02, 0x01, 0x0f, 0x11, 0x11, 0x0e],
        '7' => [0x1f, 0x10, 0x08, 0x04, 0x02, 0x02, 0x02],
        '8' => [0x0e, 0x11, 0x11, 0x0e, 0x11, 0x11, 0x0e],
        '9' => [0x0e, 0x11, 0x11, 0x1e, 0x10, 0x08, 0x06],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x06, 0x06],
        '-' => [0x00, 0x00, 0x00, 0x0e, 0x00, 0x00, 0x00],
        ':' => [0x00, 0x06, 0x06, 0x00, 0x06, 0x06, 0x00],
        '%' => [0x13, 0x0b, 0x08, 0x04, 0x02, 0x1a, 0x19],
        _ => [0x00; 7], // unsupported characters render as a space
    }
}

/// Deterministic saturated color for a label.
pub fn label_color(label: &str) -> [u8; 3] {
    let h = derive_seed_str(0x1abe1, label);
    let hue = (h % 360) as f64;
    // full-saturation HSV -> RGB with v = 0.9
    let c = 0.9;
    let x = c * (1.0 - ((hue / 60.0) % 2.0 - 1.0).abs());
    let (r, g, b) = match (hue / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [(r * 255.0) as u8, (g * 255.0) as u8, (b * 255.0) as u8]
}

fn put(img: &mut Array3<u8>, x: i64, y: i64, color: [u8; 3]) {
    let (_, h, w) = img.dim();
    if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
        return;
    }
    for (c, &v) in color.iter().enumerate() {
        img[[c, y as usize, x as usize]] = v;
    }
}

/// Draw a rectangle outline of the given stroke width, clamped to bounds.
pub fn draw_rect(img: &mut Array3<u8>, bbox: &BoundingBox, color: [u8; 3], stroke: i64) {
    let (x1, y1, x2, y2) = (bbox.x1 as i64, bbox.y1 as i64, bbox.x2 as i64, bbox.y2 as i64);
    for t in 0..stroke {
        for x in x1..=x2 {
            put(img, x, y1 + t, color);
            put(img, x, y2 - t, color);
        }
        for y in y1..=y2 {
            put(img, x1 + t, y, color);
            put(img, x2 - t, y, color);
        }
    }
}

/// Draw text with the embedded font at (x, y) = top-left, 6 px advance.
pub fn draw_text(img: &mut Array3<u8>, x: i64, y: i64, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for ch in text.chars() {
        let rows = glyph(ch);
        for (ry, row) in rows.iter().enumerate() {
            for rx in 0..5 {
                if row >> rx & 1 == 1 {
                    put(img, cx + rx as i64, y + ry as i64, color);
                }
            }
        }
        cx += 6;
    }
}

/// Overlay one labeled box: colored outline plus a filled tag above the
/// top-left corner carrying the label text (and score when given).
pub fn draw_detection(img: &mut Array3<u8>, bbox: &BoundingBox, label: &str, score: Option<f64>) {
    let color = label_color(label);
    draw_rect(img, bbox, color, 2);
    let text = match score {
        Some(s) => format!("{label} {:.0}%", s * 100.0),
        None => label.to_owned(),
    };
    let tag_w = 6 * text.chars().count() as i64 + 3;
    let tag_h = 11i64;
    let tx = bbox.x1 as i64;
    // place the tag above the box when it fits, else inside the top edge
    let ty = if bbox.y1 as i64 >= tag_h { bbox.y1 as i64 - tag_h } else { bbox.y1 as i64 };
    for y in ty..ty + tag_h {
        for x in tx..tx + tag_w {
            put(img, x, y, color);
        }
    }
    draw_text(img, tx + 2, ty + 2, &text, [255, 255, 255]);
}

/// Save a [3, H, W] u8 tensor as a PNG.
pub fn save_png(img: &Array3<u8>, path: &Path) -> Result<()> {
    let (_, h, w) = img.dim();
    let buf = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        image::Rgb([
            img[[0, y as usize, x as usize]],
            img[[1, y as usize, x as usize]],
            img[[2, y as usize, x as usize]],
        ])
    });
    buf.save(path).map_err(|e| crate::Error::Io(std::io::Error::other(e)))?;
    Ok(())
}

/// Render detections over an image and write the annotated PNG.
pub fn render_annotated(
    pixels: &Array3<u8>,
    boxes: &[(BoundingBox, String, Option<f64>)],
    path: &Path,
) -> Result<()> {
    let mut canvas = pixels.clone();
    for (bbox, label, score) in boxes {
        draw_detection(&mut canvas, bbox, label, *score);
    }
    save_png(&canvas, path)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_marks_the_border_and_clamps() {
        let mut img = Array3::<u8>::zeros((3, 20, 20));
        let bbox = BoundingBox::new(2.0, 3.0, 10.0, 12.0).unwrap();
        draw_rect(&mut img, &bbox, [255, 0, 0], 1);
        assert_eq!(img[[0, 3, 2]], 255);
        assert_eq!(img[[0, 12, 10]], 255);
        assert_eq!(img[[0, 7, 5]], 0, "interior untouched");
        // out-of-bounds boxes draw only the visible part and do not panic
        let big = BoundingBox::new(-5.0, -5.0, 40.0, 40.0).unwrap();
        draw_rect(&mut img, &big, [0, 255, 0], 2);
    }

    #[test]
    fn text_renders_known_glyph_pixels() {
        let mut img = Array3::<u8>::zeros((3, 10, 10));
        draw_text(&mut img, 0, 0, "T", [255, 255, 255]);
        // top row of 'T' is five lit pixels
        for x in 0..5 {
            assert_eq!(img[[0, 0, x]], 255);
        }
        assert_eq!(img[[0, 1, 0]], 0);
        assert_eq!(img[[0, 1, 2]], 255, "stem of T");
    }

    #[test]
    fn label_colors_are_deterministic_and_distinct() {
        let a = label_color("Navicula");
        assert_eq!(a, label_color("Navicula"));
        assert_ne!(a, label_color("Cymbella"));
    }

    #[test]
    fn annotated_png_round_trips_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("annotated.png");
        let img = Array3::<u8>::from_elem((3, 64, 64), 200u8);
        let bbox = BoundingBox::new(8.0, 20.0, 40.0, 50.0).unwrap();
        render_annotated(&img, &[(bbox, "Navicula".into(), Some(0.9))], &path).unwrap();
        let (w, h) = image::image_dimensions(&path).unwrap();
        assert_eq!((w, h), (64, 64));
        let loaded = image::open(&path).unwrap().to_rgb8();
        let c = label_color("Navicula");
        assert_eq!(loaded.get_pixel(8, 20).0, c, "outline color present");
    }
}
