//! Procedural texture renderers, one per pattern label.
//!
//! Each renderer produces a `[3, size, size]` RGB patch in `[0, 1]`,
//! deterministic given its RNG stream. Textures are parameterized relative to
//! the patch side so patterns stay resolvable when patches shrink.

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type Rgb = [f32; 3];

pub fn hsv_to_rgb(h: f32, s: f32, v: f32) -> Rgb {
    let h = h.rem_euclid(360.0);
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [r + m, g + m, b + m]
}

/// A saturated base color plus a contrasting partner (hue offset 120..240).
pub fn contrasting_pair(rng: &mut ChaCha8Rng) -> (Rgb, Rgb) {
    let h = rng.gen_range(0.0..360.0);
    let s = rng.gen_range(0.45..0.9);
    let v = rng.gen_range(0.55..0.95);
    let dh = rng.gen_range(120.0..240.0);
    let v2 = if v > 0.6 {
        rng.gen_range(0.15..0.45)
    } else {
        rng.gen_range(0.7..0.95)
    };
    (hsv_to_rgb(h, s, v), hsv_to_rgb(h + dh, rng.gen_range(0.5..0.9), v2))
}

pub fn fill(buf: &mut Array3<f32>, color: Rgb) {
    for c in 0..3 {
        buf.index_axis_mut(ndarray::Axis(0), c).fill(color[c]);
    }
}

pub fn blend_px(buf: &mut Array3<f32>, y: usize, x: usize, color: Rgb, alpha: f32) {
    for c in 0..3 {
        let old = buf[[c, y, x]];
        buf[[c, y, x]] = old * (1.0 - alpha) + color[c] * alpha;
    }
}

pub fn disk(buf: &mut Array3<f32>, cy: f32, cx: f32, r: f32, color: Rgb, alpha: f32) {
    let size = buf.shape()[1] as isize;
    let (y0, y1) = (
        ((cy - r).floor() as isize).max(0),
        ((cy + r).ceil() as isize).min(size - 1),
    );
    let (x0, x1) = (
        ((cx - r).floor() as isize).max(0),
        ((cx + r).ceil() as isize).min(size - 1),
    );
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            if dy * dy + dx * dx <= r * r {
                blend_px(buf, y as usize, x as usize, color, alpha);
            }
        }
    }
}

pub fn rect(buf: &mut Array3<f32>, y0: usize, x0: usize, y1: usize, x1: usize, color: Rgb, alpha: f32) {
    let size = buf.shape()[1];
    for y in y0..y1.min(size) {
        for x in x0..x1.min(size) {
            blend_px(buf, y, x, color, alpha);
        }
    }
}

fn add_pixel_noise(buf: &mut Array3<f32>, amplitude: f32, rng: &mut ChaCha8Rng) {
    for v in buf.iter_mut() {
        *v = (*v + rng.gen_range(-amplitude..amplitude)).clamp(0.0, 1.0);
    }
}

fn solid(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut buf = Array3::zeros((3, size, size));
    let color = hsv_to_rgb(
        rng.gen_range(0.0..360.0),
        rng.gen_range(0.3..0.85),
        rng.gen_range(0.25..0.9),
    );
    fill(&mut buf, color);
    add_pixel_noise(&mut buf, 0.015, rng);
    buf
}

fn stripe(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut buf = Array3::zeros((3, size, size));
    let (a, b) = contrasting_pair(rng);
    let band = rng.gen_range((size as f32 / 12.0).max(2.0)..(size as f32 / 5.0).max(3.0));
    let vertical = rng.gen_bool(0.5);
    let phase = rng.gen_range(0.0..band * 2.0);
    for y in 0..size {
        for x in 0..size {
            let t = if vertical { x as f32 } else { y as f32 };
            let color = if ((t + phase) / band) as usize % 2 == 0 { a } else { b };
            for c in 0..3 {
                buf[[c, y, x]] = color[c];
            }
        }
    }
    add_pixel_noise(&mut buf, 0.02, rng);
    buf
}

fn check(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut buf = Array3::zeros((3, size, size));
    let (a, b) = contrasting_pair(rng);
    let tile = rng.gen_range((size as f32 / 10.0).max(2.0)..(size as f32 / 4.0).max(3.0));
    for y in 0..size {
        for x in 0..size {
            let ty = (y as f32 / tile) as usize;
            let tx = (x as f32 / tile) as usize;
            let color = if (ty + tx) % 2 == 0 { a } else { b };
            for c in 0..3 {
                buf[[c, y, x]] = color[c];
            }
        }
    }
    add_pixel_noise(&mut buf, 0.02, rng);
    buf
}

fn plaid(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut buf = Array3::zeros((3, size, size));
    let (base, cross) = contrasting_pair(rng);
    let accent = hsv_to_rgb(rng.gen_range(0.0..360.0), 0.8, 0.3);
    fill(&mut buf, base);
    let period_y = rng.gen_range((size as f32 / 8.0).max(3.0)..(size as f32 / 4.0).max(4.0));
    let period_x = rng.gen_range((size as f32 / 8.0).max(3.0)..(size as f32 / 4.0).max(4.0));
    let bw_y = period_y * rng.gen_range(0.3..0.5);
    let bw_x = period_x * rng.gen_range(0.3..0.5);
    for y in 0..size {
        if (y as f32 % period_y) < bw_y {
            rect(&mut buf, y, 0, y + 1, size, cross, 0.55);
        }
    }
    for x in 0..size {
        if (x as f32 % period_x) < bw_x {
            for y in 0..size {
                blend_px(&mut buf, y, x, cross, 0.55);
            }
        }
    }
    // thin accent lines on the band centers
    for y in (0..size).filter(|y| (*y as f32 % period_y) < 1.0) {
        rect(&mut buf, y, 0, y + 1, size, accent, 0.8);
    }
    for x in (0..size).filter(|x| (*x as f32 % period_x) < 1.0) {
        for y in 0..size {
            blend_px(&mut buf, y, x, accent, 0.8);
        }
    }
    add_pixel_noise(&mut buf, 0.015, rng);
    buf
}

fn dot(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut buf = Array3::zeros((3, size, size));
    let (base, ink) = contrasting_pair(rng);
    fill(&mut buf, base);
    let spacing = rng.gen_range((size as f32 / 8.0).max(4.0)..(size as f32 / 4.0).max(5.0));
    let radius = spacing * rng.gen_range(0.22..0.38);
    let stagger = rng.gen_bool(0.7);
    let mut row = 0;
    let mut cy = spacing / 2.0;
    while cy < size as f32 {
        let offset = if stagger && row % 2 == 1 { spacing / 2.0 } else { 0.0 };
        let mut cx = spacing / 2.0 + offset;
        while cx < size as f32 {
            disk(&mut buf, cy, cx, radius, ink, 1.0);
            cx += spacing;
        }
        cy += spacing;
        row += 1;
    }
    add_pixel_noise(&mut buf, 0.015, rng);
    buf
}

fn floral(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut buf = Array3::zeros((3, size, size));
    let (base, petal) = contrasting_pair(rng);
    let heart = hsv_to_rgb(rng.gen_range(30.0..70.0), 0.9, 0.9);
    fill(&mut buf, base);
    let n_flowers = rng.gen_range(3..7);
    for _ in 0..n_flowers {
        let cy = rng.gen_range(0.0..size as f32);
        let cx = rng.gen_range(0.0..size as f32);
        let r = rng.gen_range(size as f32 / 12.0..size as f32 / 6.0).max(2.0);
        let petals = rng.gen_range(5..8);
        for p in 0..petals {
            let ang = p as f32 / petals as f32 * std::f32::consts::TAU;
            disk(
                &mut buf,
                cy + ang.sin() * r,
                cx + ang.cos() * r,
                r * 0.55,
                petal,
                0.95,
            );
        }
        disk(&mut buf, cy, cx, r * 0.45, heart, 1.0);
    }
    add_pixel_noise(&mut buf, 0.015, rng);
    buf
}

fn graphic(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut buf = Array3::zeros((3, size, size));
    let (base, ink) = contrasting_pair(rng);
    fill(&mut buf, base);
    let s = size as f32;
    let n_shapes = rng.gen_range(1..4);
    for _ in 0..n_shapes {
        let cy = rng.gen_range(0.25 * s..0.75 * s);
        let cx = rng.gen_range(0.25 * s..0.75 * s);
        let half = rng.gen_range(0.15 * s..0.3 * s).max(2.0);
        match rng.gen_range(0..4) {
            0 => disk(&mut buf, cy, cx, half, ink, 1.0),
            1 => rect(
                &mut buf,
                (cy - half).max(0.0) as usize,
                (cx - half).max(0.0) as usize,
                (cy + half) as usize,
                (cx + half) as usize,
                ink,
                1.0,
            ),
            2 => {
                // triangle: rows narrow toward the apex
                let h = half * 2.0;
                for i in 0..h as usize {
                    let frac = i as f32 / h;
                    let w = half * frac;
                    let y = (cy - half) + i as f32;
                    if y >= 0.0 && (y as usize) < size {
                        let x0 = (cx - w).max(0.0) as usize;
                        let x1 = ((cx + w) as usize).min(size);
                        rect(&mut buf, y as usize, x0, y as usize + 1, x1, ink, 1.0);
                    }
                }
            }
            _ => {
                // cross
                let t = (half * 0.4).max(1.0);
                rect(
                    &mut buf,
                    (cy - t).max(0.0) as usize,
                    (cx - half).max(0.0) as usize,
                    (cy + t) as usize,
                    (cx + half) as usize,
                    ink,
                    1.0,
                );
                rect(
                    &mut buf,
                    (cy - half).max(0.0) as usize,
                    (cx - t).max(0.0) as usize,
                    (cy + half) as usize,
                    (cx + t) as usize,
                    ink,
                    1.0,
                );
            }
        }
    }
    add_pixel_noise(&mut buf, 0.015, rng);
    buf
}

fn tie_dye(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut buf = Array3::zeros((3, size, size));
    let h0 = rng.gen_range(0.0..360.0);
    let palette: Vec<Rgb> = (0..3)
        .map(|i| hsv_to_rgb(h0 + i as f32 * rng.gen_range(60.0..140.0), 0.85, 0.9))
        .collect();
    let cy = rng.gen_range(0.2..0.8) * size as f32;
    let cx = rng.gen_range(0.2..0.8) * size as f32;
    let wavelength = rng.gen_range(size as f32 / 8.0..size as f32 / 3.0).max(3.0);
    let swirl = rng.gen_range(1.0..3.5);
    let phase = rng.gen_range(0.0..std::f32::consts::TAU);
    for y in 0..size {
        for x in 0..size {
            let dy = y as f32 - cy;
            let dx = x as f32 - cx;
            let r = (dy * dy + dx * dx).sqrt();
            let ang = dy.atan2(dx);
            let t = (r / wavelength + swirl * ang / std::f32::consts::TAU + phase).rem_euclid(1.0);
            let seg = (t * palette.len() as f32) as usize % palette.len();
            let frac = (t * palette.len() as f32).fract();
            let next = (seg + 1) % palette.len();
            for c in 0..3 {
                buf[[c, y, x]] = palette[seg][c] * (1.0 - frac) + palette[next][c] * frac;
            }
        }
    }
    add_pixel_noise(&mut buf, 0.04, rng);
    buf
}

fn animal(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut buf = Array3::zeros((3, size, size));
    let base = hsv_to_rgb(rng.gen_range(30.0..50.0), rng.gen_range(0.4..0.7), rng.gen_range(0.6..0.85));
    let dark = hsv_to_rgb(rng.gen_range(20.0..40.0), 0.8, rng.gen_range(0.1..0.25));
    let mid = hsv_to_rgb(rng.gen_range(25.0..45.0), 0.75, 0.5);
    fill(&mut buf, base);
    let cell = (size as f32 / rng.gen_range(4.0..7.0)).max(4.0);
    let mut cy = cell / 2.0;
    while cy < size as f32 {
        let mut cx = cell / 2.0;
        while cx < size as f32 {
            let jy = cy + rng.gen_range(-0.3..0.3) * cell;
            let jx = cx + rng.gen_range(-0.3..0.3) * cell;
            let r = cell * rng.gen_range(0.18..0.3);
            // rosette: ring of dark blobs around a lighter heart
            let blobs = rng.gen_range(3..6);
            for bidx in 0..blobs {
                let ang = bidx as f32 / blobs as f32 * std::f32::consts::TAU
                    + rng.gen_range(-0.4..0.4);
                disk(
                    &mut buf,
                    jy + ang.sin() * r,
                    jx + ang.cos() * r,
                    r * rng.gen_range(0.5..0.8),
                    dark,
                    1.0,
                );
            }
            if rng.gen_bool(0.6) {
                disk(&mut buf, jy, jx, r * 0.5, mid, 1.0);
            }
            cx += cell;
        }
        cy += cell;
    }
    add_pixel_noise(&mut buf, 0.02, rng);
    buf
}

/// 5x7 block glyphs, one row per byte (low 5 bits used).
const GLYPHS: [[u8; 7]; 12] = [
    [0b01110, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // A
    [0b11110, 0b10001, 0b10001, 0b11110, 0b10001, 0b10001, 0b11110], // B
    [0b01110, 0b10001, 0b10000, 0b10000, 0b10000, 0b10001, 0b01110], // C
    [0b11111, 0b10000, 0b10000, 0b11110, 0b10000, 0b10000, 0b11111], // E
    [0b10001, 0b10001, 0b10001, 0b11111, 0b10001, 0b10001, 0b10001], // H
    [0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b10000, 0b11111], // L
    [0b01110, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110], // O
    [0b01111, 0b10000, 0b10000, 0b01110, 0b00001, 0b00001, 0b11110], // S
    [0b11111, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100], // T
    [0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b10001, 0b01110], // U
    [0b10001, 0b01010, 0b00100, 0b00100, 0b00100, 0b00100, 0b00100], // Y
    [0b10001, 0b01010, 0b00100, 0b00100, 0b01010, 0b10001, 0b10001], // X
];

fn words(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut buf = Array3::zeros((3, size, size));
    let (base, ink) = contrasting_pair(rng);
    fill(&mut buf, base);
    let px = (size as f32 / 28.0).max(1.0) as usize;
    let glyph_h = 7 * px;
    let glyph_w = 5 * px;
    let line_gap = glyph_h + px * 2;
    let mut y = px;
    while y + glyph_h <= size {
        let mut x = px;
        let word_len = rng.gen_range(2..6);
        let mut in_word = 0;
        while x + glyph_w <= size {
            if in_word >= word_len {
                x += glyph_w; // word gap
                in_word = 0;
                continue;
            }
            let glyph = &GLYPHS[rng.gen_range(0..GLYPHS.len())];
            for (gy, bits) in glyph.iter().enumerate() {
                for gx in 0..5 {
                    if bits & (1 << (4 - gx)) != 0 {
                        rect(
                            &mut buf,
                            y + gy * px,
                            x + gx * px,
                            y + (gy + 1) * px,
                            x + (gx + 1) * px,
                            ink,
                            1.0,
                        );
                    }
                }
            }
            x += glyph_w + px;
            in_word += 1;
        }
        y += line_gap;
    }
    add_pixel_noise(&mut buf, 0.015, rng);
    buf
}

fn paisley(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut buf = Array3::zeros((3, size, size));
    let (base, body) = contrasting_pair(rng);
    let outline = hsv_to_rgb(rng.gen_range(0.0..360.0), 0.9, 0.2);
    fill(&mut buf, base);
    let n = rng.gen_range(2..5);
    for _ in 0..n {
        let cy = rng.gen_range(0.2..0.8) * size as f32;
        let cx = rng.gen_range(0.2..0.8) * size as f32;
        let r = rng.gen_range(size as f32 / 8.0..size as f32 / 4.5).max(3.0);
        let ang = rng.gen_range(0.0..std::f32::consts::TAU);
        // teardrop: head disk plus a curved shrinking tail
        disk(&mut buf, cy, cx, r * 1.12, outline, 1.0);
        disk(&mut buf, cy, cx, r, body, 1.0);
        let steps = 9;
        for i in 1..=steps {
            let f = i as f32 / steps as f32;
            let bend = ang + f * rng.gen_range(1.2..2.2);
            let d = r * (1.0 + 1.3 * f);
            let rr = r * (1.0 - f * 0.85);
            disk(&mut buf, cy + bend.sin() * d, cx + bend.cos() * d, rr * 1.15, outline, 1.0);
            disk(&mut buf, cy + bend.sin() * d, cx + bend.cos() * d, rr, body, 1.0);
        }
        disk(&mut buf, cy, cx, r * 0.4, outline, 1.0);
    }
    add_pixel_noise(&mut buf, 0.015, rng);
    buf
}

/// Renders the texture for vocabulary index `label_index`.
///
/// Index order matches [`crate::dataset::LabelVocabulary::default`].
pub fn render(label_index: usize, size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    match label_index {
        0 => solid(size, rng),
        1 => plaid(size, rng),
        2 => floral(size, rng),
        3 => stripe(size, rng),
        4 => check(size, rng),
        5 => graphic(size, rng),
        6 => tie_dye(size, rng),
        7 => animal(size, rng),
        8 => words(size, rng),
        9 => dot(size, rng),
        10 => paisley(size, rng),
        _ => unreachable!("label index validated by caller"),
    }
}

pub const PATTERN_COUNT: usize = 11;
