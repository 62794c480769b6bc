//! Static raster output: ROC plots, accuracy bars, training curves and
//! prediction overlays. Text uses a built-in 5x7 bitmap font.

use image::{Rgb, RgbImage};

use crate::metrics::RocCurve;
use crate::trainer::TrainingCurve;

pub const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
pub const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
pub const GREY: Rgb<u8> = Rgb([170, 170, 170]);
pub const BLUE: Rgb<u8> = Rgb([40, 90, 200]);
pub const SHADE: Rgb<u8> = Rgb([200, 215, 245]);
pub const ORANGE: Rgb<u8> = Rgb([230, 130, 30]);
pub const GREEN: Rgb<u8> = Rgb([40, 160, 80]);

const GLYPH_W: u32 = 5;
const GLYPH_H: u32 = 7;

// Rows top to bottom, low 5 bits, MSB on the left.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
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
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x11, 0x19, 0x15, 0x13, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x11, 0x0A, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        '/' => [0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '%' => [0x18, 0x19, 0x02, 0x04, 0x08, 0x13, 0x03],
        ' ' => [0; 7],
        _ => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x00, 0x04],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, color);
    }
}

/// Pixel width of `text` at `scale`.
pub fn text_width(text: &str, scale: u32) -> u32 {
    let n = text.chars().count() as u32;
    if n == 0 {
        0
    } else {
        (n * (GLYPH_W + 1) - 1) * scale
    }
}

pub fn draw_text(img: &mut RgbImage, x: i64, y: i64, text: &str, scale: u32, color: Rgb<u8>) {
    let s = scale.max(1) as i64;
    for (i, c) in text.chars().enumerate() {
        let ox = x + i as i64 * (GLYPH_W as i64 + 1) * s;
        for (row, bits) in glyph(c).iter().enumerate() {
            for col in 0..GLYPH_W as i64 {
                if bits & (1 << (GLYPH_W as i64 - 1 - col)) != 0 {
                    for dy in 0..s {
                        for dx in 0..s {
                            put(img, ox + col * s + dx, y + row as i64 * s + dy, color);
                        }
                    }
                }
            }
        }
    }
}

pub fn draw_line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), color: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, color);
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

pub fn fill_rect(img: &mut RgbImage, x: i64, y: i64, w: u32, h: u32, color: Rgb<u8>) {
    for yy in y..y + h as i64 {
        for xx in x..x + w as i64 {
            put(img, xx, yy, color);
        }
    }
}

pub fn draw_rect(img: &mut RgbImage, x: i64, y: i64, w: u32, h: u32, color: Rgb<u8>) {
    let (x1, y1) = (x + w as i64 - 1, y + h as i64 - 1);
    draw_line(img, (x, y), (x1, y), color);
    draw_line(img, (x, y1), (x1, y1), color);
    draw_line(img, (x, y), (x, y1), color);
    draw_line(img, (x1, y), (x1, y1), color);
}

/// Plot frame mapping data coordinates into a pixel box.
struct Frame {
    left: i64,
    top: i64,
    width: i64,
    height: i64,
    x_range: (f64, f64),
    y_range: (f64, f64),
}

impl Frame {
    fn px(&self, x: f64, y: f64) -> (i64, i64) {
        let fx = (x - self.x_range.0) / (self.x_range.1 - self.x_range.0).max(f64::EPSILON);
        let fy = (y - self.y_range.0) / (self.y_range.1 - self.y_range.0).max(f64::EPSILON);
        (
            self.left + (fx * self.width as f64).round() as i64,
            self.top + self.height - (fy * self.height as f64).round() as i64,
        )
    }

    fn axes(&self, img: &mut RgbImage, x_label: &str, y_label: &str) {
        draw_rect(img, self.left, self.top, self.width as u32 + 1, self.height as u32 + 1, BLACK);
        let bottom = self.top + self.height;
        for k in 0..=4 {
            let f = k as f64 / 4.0;
            let xv = self.x_range.0 + f * (self.x_range.1 - self.x_range.0);
            let yv = self.y_range.0 + f * (self.y_range.1 - self.y_range.0);
            let (px, _) = self.px(xv, self.y_range.0);
            let (_, py) = self.px(self.x_range.0, yv);
            draw_line(img, (px, bottom), (px, bottom + 4), BLACK);
            draw_line(img, (self.left - 4, py), (self.left, py), BLACK);
            let xt = tick(xv);
            draw_text(img, px - text_width(&xt, 1) as i64 / 2, bottom + 8, &xt, 1, BLACK);
            let yt = tick(yv);
            draw_text(img, self.left - 8 - text_width(&yt, 1) as i64, py - 3, &yt, 1, BLACK);
        }
        let xw = text_width(x_label, 2) as i64;
        draw_text(img, self.left + self.width / 2 - xw / 2, bottom + 22, x_label, 2, BLACK);
        draw_text(img, 4, self.top - 22, y_label, 2, BLACK);
    }
}

fn tick(v: f64) -> String {
    if v.fract() == 0.0 && v.abs() < 1e6 {
        format!("{v:.0}")
    } else {
        format!("{v:.2}")
    }
}

/// ROC curve with the area under it shaded and the chance diagonal.
pub fn roc_plot(curve: &RocCurve, title: &str) -> RgbImage {
    let mut img = RgbImage::from_pixel(480, 480, WHITE);
    let f = Frame { left: 60, top: 60, width: 380, height: 360, x_range: (0.0, 1.0), y_range: (0.0, 1.0) };
    // Shade column by column under the piecewise-linear curve.
    for px in 0..=f.width {
        let x = px as f64 / f.width as f64;
        let y = interpolate(&curve.points.iter().map(|p| (p.fpr, p.tpr)).collect::<Vec<_>>(), x);
        let (_, top) = f.px(x, y);
        draw_line(&mut img, (f.left + px, top), (f.left + px, f.top + f.height), SHADE);
    }
    draw_line(&mut img, f.px(0.0, 0.0), f.px(1.0, 1.0), GREY);
    for w in curve.points.windows(2) {
        let (a, b) = (f.px(w[0].fpr, w[0].tpr), f.px(w[1].fpr, w[1].tpr));
        draw_line(&mut img, a, b, BLUE);
        draw_line(&mut img, (a.0, a.1 - 1), (b.0, b.1 - 1), BLUE);
    }
    let op = curve.operating_point;
    let (ox, oy) = f.px(op.fpr, op.tpr);
    fill_rect(&mut img, ox - 3, oy - 3, 7, 7, ORANGE);
    f.axes(&mut img, "FPR", "TPR");
    draw_text(&mut img, 60, 8, title, 2, BLACK);
    let auc = format!("AUC = {:.3}", curve.auc);
    draw_text(&mut img, 440 - text_width(&auc, 2) as i64, 390, &auc, 2, BLACK);
    img
}

/// Max `y` at `x` along a polyline sorted by `x`.
fn interpolate(points: &[(f64, f64)], x: f64) -> f64 {
    let mut best: f64 = 0.0;
    for w in points.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x < x0 || x > x1 {
            continue;
        }
        let y = if x1 == x0 { y0.max(y1) } else { y0 + (y1 - y0) * (x - x0) / (x1 - x0) };
        best = best.max(y);
    }
    best
}

/// Side-by-side accuracy bars for the model alone and the AI + physician
/// ensemble.
pub fn accuracy_bars(base: f64, ensemble: Option<f64>, title: &str) -> RgbImage {
    let mut img = RgbImage::from_pixel(420, 360, WHITE);
    let f = Frame { left: 60, top: 50, width: 320, height: 240, x_range: (0.0, 1.0), y_range: (0.0, 1.0) };
    let bars = [("AI", Some(base), BLUE), ("AI+DR", ensemble, GREEN)];
    for (i, (label, value, color)) in bars.iter().enumerate() {
        let cx = f.left + f.width * (2 * i as i64 + 1) / 4;
        if let Some(v) = value {
            let (_, top) = f.px(0.0, v.clamp(0.0, 1.0));
            fill_rect(&mut img, cx - 40, top, 80, (f.top + f.height - top).max(0) as u32, *color);
            let txt = format!("{v:.2}");
            draw_text(&mut img, cx - text_width(&txt, 2) as i64 / 2, top - 18, &txt, 2, BLACK);
        } else {
            draw_text(&mut img, cx - text_width("PENDING", 1) as i64 / 2, f.top + f.height - 12, "PENDING", 1, GREY);
        }
        draw_text(&mut img, cx - text_width(label, 2) as i64 / 2, f.top + f.height + 24, label, 2, BLACK);
    }
    draw_rect(&mut img, f.left, f.top, f.width as u32 + 1, f.height as u32 + 1, BLACK);
    draw_text(&mut img, 10, 10, title, 2, BLACK);
    img
}

/// Minibatch loss and accuracy per iteration with validation points.
pub fn training_plot(curve: &TrainingCurve, title: &str) -> RgbImage {
    let mut img = RgbImage::from_pixel(640, 420, WHITE);
    let max_iter = curve.iterations.iter().map(|p| p.iteration).max().unwrap_or(1).max(1) as f64;
    let max_loss = curve
        .iterations
        .iter()
        .map(|p| p.minibatch_loss)
        .chain(curve.validation.iter().map(|p| p.loss))
        .filter(|v| v.is_finite())
        .fold(1e-9, f64::max);
    let f = Frame { left: 60, top: 50, width: 540, height: 300, x_range: (0.0, max_iter), y_range: (0.0, max_loss.max(1.0)) };
    let loss: Vec<_> = curve.iterations.iter().map(|p| f.px(p.iteration as f64, p.minibatch_loss)).collect();
    let acc: Vec<_> = curve
        .iterations
        .iter()
        .map(|p| f.px(p.iteration as f64, p.minibatch_accuracy * f.y_range.1))
        .collect();
    for w in loss.windows(2) {
        draw_line(&mut img, w[0], w[1], ORANGE);
    }
    for w in acc.windows(2) {
        draw_line(&mut img, w[0], w[1], BLUE);
    }
    for v in &curve.validation {
        let (x, y) = f.px(v.iteration as f64, v.accuracy * f.y_range.1);
        fill_rect(&mut img, x - 2, y - 2, 5, 5, BLACK);
    }
    f.axes(&mut img, "ITERATION", "");
    draw_text(&mut img, 60, 10, title, 2, BLACK);
    draw_text(&mut img, 380, 12, "LOSS", 1, ORANGE);
    draw_text(&mut img, 420, 12, "ACCURACY (SCALED)", 1, BLUE);
    img
}

/// Copy of `image` with a caption bar naming the predicted class and its
/// probability.
pub fn overlay_prediction(image: &RgbImage, label: &str, probability: f64) -> RgbImage {
    let mut out = image.clone();
    let text = format!("{label} {:.2}", probability);
    let scale = if out.width() >= 400 { 2 } else { 1 };
    let bar_h = GLYPH_H * scale + 8;
    let w = (text_width(&text, scale) + 8).min(out.width());
    let h = bar_h.min(out.height());
    fill_rect(&mut out, 0, 0, w, h, BLACK);
    draw_text(&mut out, 4, 4, &text, scale, WHITE);
    out
}
