//! Static difference plots: one PNG per metric, x = n per class (log-spaced
//! ticks at the observed values), y = SSL minus reference with ±std bars.

use image::{Rgb, RgbImage};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const LEFT: i64 = 70;
const RIGHT: i64 = 20;
const TOP: i64 = 40;
const BOTTOM: i64 = 50;

const WHITE: Rgb<u8> = Rgb([255, 255, 255]);
const BLACK: Rgb<u8> = Rgb([0, 0, 0]);
const GREY: Rgb<u8> = Rgb([170, 170, 170]);
const LINE: Rgb<u8> = Rgb([31, 119, 180]);
const BAR: Rgb<u8> = Rgb([120, 170, 210]);

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Point {
    pub n: usize,
    pub value: f64,
    pub spread: f64,
}

/// 5×7 glyphs, one byte per row, low five bits used (bit 4 = leftmost).
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
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '/' => [0x00, 0x01, 0x02, 0x04, 0x08, 0x10, 0x00],
        '_' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x00, 0x1F],
        _ => [0; 7],
    }
}

fn put(img: &mut RgbImage, x: i64, y: i64, c: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
        img.put_pixel(x as u32, y as u32, c);
    }
}

fn text_width(s: &str) -> i64 {
    s.chars().count() as i64 * 6
}

fn text(img: &mut RgbImage, x: i64, y: i64, s: &str, c: Rgb<u8>) {
    for (i, ch) in s.chars().enumerate() {
        for (row, bits) in glyph(ch).iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    put(img, x + i as i64 * 6 + col, y + row as i64, c);
                }
            }
        }
    }
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        put(img, x, y, c);
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

fn dashed_hline(img: &mut RgbImage, x0: i64, x1: i64, y: i64, c: Rgb<u8>) {
    for x in x0..=x1 {
        if (x / 4) % 2 == 0 {
            put(img, x, y, c);
        }
    }
}

fn nice_step(span: f64) -> f64 {
    let raw = span / 5.0;
    let mag = 10f64.powf(raw.log10().floor());
    [1.0, 2.0, 2.5, 5.0, 10.0]
        .into_iter()
        .map(|m| m * mag)
        .find(|s| *s >= raw)
        .unwrap_or(10.0 * mag)
}

/// Renders `points` (sorted by `n` inside) as a line chart with std bars and
/// a dashed zero line.
pub fn difference_plot(title: &str, points: &[Point]) -> RgbImage {
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, WHITE);
    let mut pts = points.to_vec();
    pts.sort_by_key(|p| p.n);
    let (x0, x1) = (LEFT, WIDTH as i64 - RIGHT);
    let (y0, y1) = (TOP, HEIGHT as i64 - BOTTOM);
    text(&mut img, (WIDTH as i64 - text_width(title)) / 2, 14, title, BLACK);
    text(&mut img, (x0 + x1 - text_width("N PER CLASS")) / 2, y1 + 30, "n per class", BLACK);

    let mut lo = 0.0f64;
    let mut hi = 0.0f64;
    for p in &pts {
        let s = if p.spread.is_finite() { p.spread } else { 0.0 };
        lo = lo.min(p.value - s);
        hi = hi.max(p.value + s);
    }
    if hi - lo < 1e-6 {
        lo -= 0.05;
        hi += 0.05;
    }
    let step = nice_step(hi - lo);
    lo = (lo / step).floor() * step;
    hi = (hi / step).ceil() * step;
    let to_y = |v: f64| y1 - ((v - lo) / (hi - lo) * (y1 - y0) as f64).round() as i64;

    line(&mut img, (x0, y0), (x0, y1), BLACK);
    line(&mut img, (x0, y1), (x1, y1), BLACK);
    let ticks = ((hi - lo) / step).round() as i64;
    for t in 0..=ticks {
        let v = lo + t as f64 * step;
        let y = to_y(v);
        line(&mut img, (x0 - 4, y), (x0, y), BLACK);
        let label = format!("{:+.2}", if v.abs() < step * 1e-6 { 0.0 } else { v });
        text(&mut img, x0 - 8 - text_width(&label), y - 3, &label, BLACK);
    }
    dashed_hline(&mut img, x0 + 1, x1, to_y(0.0), GREY);

    if pts.is_empty() {
        return img;
    }
    let log_n: Vec<f64> = pts.iter().map(|p| (p.n.max(1) as f64).ln()).collect();
    let (ln_lo, ln_hi) = (log_n[0], log_n[log_n.len() - 1]);
    let pad = 30;
    let to_x = |l: f64| {
        if ln_hi - ln_lo < 1e-12 {
            (x0 + x1) / 2
        } else {
            x0 + pad + ((l - ln_lo) / (ln_hi - ln_lo) * (x1 - x0 - 2 * pad) as f64).round() as i64
        }
    };
    let coords: Vec<(i64, i64)> = pts.iter().zip(&log_n).map(|(p, l)| (to_x(*l), to_y(p.value))).collect();
    for (p, &(x, _)) in pts.iter().zip(&coords) {
        line(&mut img, (x, y1), (x, y1 + 4), BLACK);
        let label = p.n.to_string();
        text(&mut img, x - text_width(&label) / 2, y1 + 10, &label, BLACK);
        if p.spread.is_finite() && p.spread > 0.0 {
            let (a, b) = (to_y(p.value - p.spread), to_y(p.value + p.spread));
            line(&mut img, (x, a), (x, b), BAR);
            line(&mut img, (x - 4, a), (x + 4, a), BAR);
            line(&mut img, (x - 4, b), (x + 4, b), BAR);
        }
    }
    for w in coords.windows(2) {
        line(&mut img, w[0], w[1], LINE);
    }
    for &(x, y) in &coords {
        for dx in -2..=2 {
            for dy in -2..=2 {
                put(&mut img, x + dx, y + dy, LINE);
            }
        }
    }
    img
}
