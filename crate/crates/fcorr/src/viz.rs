//! Match visualization: the two images side by side with a line per
//! match, colored by uncertainty (green = confident, red = uncertain).
//! Dropped matches render as dimmed crosses without a line.

use crate::image::Image;
use crate::matchio::MatchRecord;

fn lerp(a: f64, b: f64, t: f64) -> f64 {
    a + (b - a) * t
}

/// Green-to-red by uncertainty.
fn color_for(u: f64) -> (f64, f64, f64) {
    let t = u.clamp(0.0, 1.0);
    (lerp(0.1, 0.9, t), lerp(0.85, 0.15, t), 0.1)
}

fn draw_line(img: &mut Image, from: (f64, f64), to: (f64, f64), color: (f64, f64, f64)) {
    let steps = ((to.0 - from.0).abs().max((to.1 - from.1).abs()).ceil() as usize).max(1);
    for s in 0..=steps {
        let t = s as f64 / steps as f64;
        let x = lerp(from.0, to.0, t).round() as isize;
        let y = lerp(from.1, to.1, t).round() as isize;
        put(img, x, y, color);
    }
}

fn put(img: &mut Image, x: isize, y: isize, color: (f64, f64, f64)) {
    if x < 0 || y < 0 || x >= img.width as isize || y >= img.height as isize {
        return;
    }
    img.set(0, y as usize, x as usize, color.0);
    img.set(1, y as usize, x as usize, color.1);
    img.set(2, y as usize, x as usize, color.2);
}

fn draw_dot(img: &mut Image, x: f64, y: f64, color: (f64, f64, f64)) {
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(img, cx + dx, cy + dy, color);
        }
    }
}

fn draw_cross(img: &mut Image, x: f64, y: f64, color: (f64, f64, f64)) {
    let (cx, cy) = (x.round() as isize, y.round() as isize);
    for d in -2..=2 {
        put(img, cx + d, cy + d, color);
        put(img, cx + d, cy - d, color);
    }
}

/// Render matches over the side-by-side pair.
pub fn render_matches(a: &Image, b: &Image, records: &[MatchRecord]) -> Image {
    let h = a.height.max(b.height);
    let w = a.width + b.width;
    let mut canvas = Image::new(w, h);
    for c in 0..3 {
        for y in 0..a.height {
            for x in 0..a.width {
                canvas.set(c, y, x, a.get(c, y, x));
            }
        }
        for y in 0..b.height {
            for x in 0..b.width {
                canvas.set(c, y, x + a.width, b.get(c, y, x));
            }
        }
    }
    for rec in records {
        let from = (rec.qx * a.width as f64, rec.qy * a.height as f64);
        let to = (rec.rx * b.width as f64 + a.width as f64, rec.ry * b.height as f64);
        let color = color_for(rec.u);
        if rec.kept {
            draw_line(&mut canvas, from, to, color);
            draw_dot(&mut canvas, from.0, from.1, color);
            draw_dot(&mut canvas, to.0, to.1, color);
        } else {
            let dim = (color.0 * 0.5, color.1 * 0.5, color.2 * 0.5);
            draw_cross(&mut canvas, from.0, from.1, dim);
            draw_cross(&mut canvas, to.0, to.1, dim);
        }
    }
    canvas
}
