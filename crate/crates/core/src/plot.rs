//! Minimal PNG line plots: axes, ticks, labels in a built-in 5x7 font, and
//! one polyline per series. No text shaping, no fonts on disk, byte-stable
//! output.

use std::path::Path;

use ndarray::Array3;

use crate::error::Result;
use crate::image::Image;

pub struct Series<'a> {
    pub label: &'a str,
    pub points: &'a [(f64, f64)],
    pub color: [f64; 3],
}

const WIDTH: usize = 520;
const HEIGHT: usize = 390;
const LEFT: usize = 62;
const RIGHT: usize = 18;
const TOP: usize = 34;
const BOTTOM: usize = 52;

struct Canvas {
    data: Array3<f64>,
}

impl Canvas {
    fn new() -> Self {
        Self {
            data: Array3::from_elem((HEIGHT, WIDTH, 3), 1.0),
        }
    }

    fn put(&mut self, y: isize, x: isize, color: [f64; 3]) {
        if y >= 0 && (y as usize) < HEIGHT && x >= 0 && (x as usize) < WIDTH {
            for c in 0..3 {
                self.data[[y as usize, x as usize, c]] = color[c];
            }
        }
    }

    fn line(&mut self, (y0, x0): (isize, isize), (y1, x1): (isize, isize), color: [f64; 3]) {
        let dx = (x1 - x0).abs();
        let dy = -(y1 - y0).abs();
        let sx = if x0 < x1 { 1 } else { -1 };
        let sy = if y0 < y1 { 1 } else { -1 };
        let mut err = dx + dy;
        let (mut x, mut y) = (x0, y0);
        loop {
            self.put(y, x, color);
            if x == x1 && y == y1 {
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

    fn thick_point(&mut self, y: isize, x: isize, color: [f64; 3]) {
        for dy in -1..=1 {
            for dx in -1..=1 {
                self.put(y + dy, x + dx, color);
            }
        }
    }

    fn text(&mut self, y: isize, x: isize, text: &str, color: [f64; 3]) {
        let mut cx = x;
        for ch in text.chars() {
            let glyph = glyph(ch);
            for (gy, row) in glyph.iter().enumerate() {
                for gx in 0..5 {
                    if row & (0b10000 >> gx) != 0 {
                        self.put(y + gy as isize, cx + gx as isize, color);
                    }
                }
            }
            cx += 6;
        }
    }
}

/// 5x7 glyphs for digits, lowercase letters, and basic punctuation.
fn glyph(ch: char) -> [u8; 7] {
    match ch {
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        'a' => [0x00, 0x00, 0x0E, 0x01, 0x0F, 0x11, 0x0F],
        'b' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x1E],
        'c' => [0x00, 0x00, 0x0E, 0x10, 0x10, 0x11, 0x0E],
        'd' => [0x01, 0x01, 0x0D, 0x13, 0x11, 0x11, 0x0F],
        'e' => [0x00, 0x00, 0x0E, 0x11, 0x1F, 0x10, 0x0E],
        'f' => [0x06, 0x09, 0x08, 0x1C, 0x08, 0x08, 0x08],
        'g' => [0x00, 0x0F, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'h' => [0x10, 0x10, 0x16, 0x19, 0x11, 0x11, 0x11],
        'i' => [0x04, 0x00, 0x0C, 0x04, 0x04, 0x04, 0x0E],
        'j' => [0x02, 0x00, 0x06, 0x02, 0x02, 0x12, 0x0C],
        'k' => [0x10, 0x10, 0x12, 0x14, 0x18, 0x14, 0x12],
        'l' => [0x0C, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'm' => [0x00, 0x00, 0x1A, 0x15, 0x15, 0x15, 0x15],
        'n' => [0x00, 0x00, 0x16, 0x19, 0x11, 0x11, 0x11],
        'o' => [0x00, 0x00, 0x0E, 0x11, 0x11, 0x11, 0x0E],
        'p' => [0x00, 0x00, 0x1E, 0x11, 0x1E, 0x10, 0x10],
        'q' => [0x00, 0x00, 0x0F, 0x11, 0x0F, 0x01, 0x01],
        'r' => [0x00, 0x00, 0x16, 0x19, 0x10, 0x10, 0x10],
        's' => [0x00, 0x00, 0x0F, 0x10, 0x0E, 0x01, 0x1E],
        't' => [0x08, 0x08, 0x1C, 0x08, 0x08, 0x09, 0x06],
        'u' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x13, 0x0D],
        'v' => [0x00, 0x00, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'w' => [0x00, 0x00, 0x11, 0x11, 0x15, 0x15, 0x0A],
        'x' => [0x00, 0x00, 0x11, 0x0A, 0x04, 0x0A, 0x11],
        'y' => [0x00, 0x00, 0x11, 0x11, 0x0F, 0x01, 0x0E],
        'z' => [0x00, 0x00, 0x1F, 0x02, 0x04, 0x08, 0x1F],
        _ => [0x00; 7],
    }
}

/// Renders a line plot to an 8-bit RGB PNG.
pub fn line_plot(
    path: impl AsRef<Path>,
    title: &str,
    x_label: &str,
    y_label: &str,
    series: &[Series<'_>],
    x_range: (f64, f64),
    y_range: (f64, f64),
) -> Result<()> {
    let mut canvas = Canvas::new();
    let black = [0.0, 0.0, 0.0];
    let grey = [0.85, 0.85, 0.85];

    let plot_w = (WIDTH - LEFT - RIGHT) as f64;
    let plot_h = (HEIGHT - TOP - BOTTOM) as f64;
    let to_px = |x: f64, y: f64| -> (isize, isize) {
        let fx = (x - x_range.0) / (x_range.1 - x_range.0);
        let fy = (y - y_range.0) / (y_range.1 - y_range.0);
        (
            (HEIGHT - BOTTOM) as isize - (fy * plot_h) as isize,
            LEFT as isize + (fx * plot_w) as isize,
        )
    };

    // gridlines + ticks: 6 x ticks, 6 y ticks
    for i in 0..=5 {
        let x = x_range.0 + (x_range.1 - x_range.0) * i as f64 / 5.0;
        let y = y_range.0 + (y_range.1 - y_range.0) * i as f64 / 5.0;
        let (py, px) = to_px(x, y_range.0);
        canvas.line((TOP as isize, px), (py, px), grey);
        canvas.line((py, px), (py + 4, px), black);
        canvas.text(py + 7, px - 8, &format!("{x:.1}"), black);
        let (qy, qx) = to_px(x_range.0, y);
        canvas.line((qy, qx), (qy, (WIDTH - RIGHT) as isize), grey);
        canvas.line((qy, qx - 4), (qy, qx), black);
        canvas.text(qy - 3, qx - 28, &format!("{y:.1}"), black);
    }
    // axes
    let (oy, ox) = to_px(x_range.0, y_range.0);
    let (ty, _) = to_px(x_range.0, y_range.1);
    let (_, rx) = to_px(x_range.1, y_range.0);
    canvas.line((oy, ox), (oy, rx), black);
    canvas.line((oy, ox), (ty, ox), black);

    canvas.text(8, LEFT as isize, title, black);
    canvas.text(
        (HEIGHT - 14) as isize,
        (WIDTH / 2 - 3 * x_label.len()) as isize,
        x_label,
        black,
    );
    // y label drawn horizontally in the top-left margin
    canvas.text(TOP as isize - 12, 2, y_label, black);

    for (si, s) in series.iter().enumerate() {
        let mut last: Option<(isize, isize)> = None;
        for &(x, y) in s.points {
            let p = to_px(x, y);
            canvas.thick_point(p.0, p.1, s.color);
            if let Some(prev) = last {
                canvas.line(prev, p, s.color);
            }
            last = Some(p);
        }
        // legend, top-right
        let ly = (TOP + 6 + 12 * si) as isize;
        let lx = (WIDTH - RIGHT - 120) as isize;
        for dy in 0..7 {
            for dx in 0..10 {
                canvas.put(ly + dy, lx + dx, s.color);
            }
        }
        canvas.text(ly, lx + 14, s.label, black);
    }

    Image::clamped(canvas.data).save_png(path)
}
