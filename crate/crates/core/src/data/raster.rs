//! Integer-only drawing primitives on an RGB canvas.
//!
//! Geometry is expressed in fixed-point units of `1/SUB` pixel; pixel
//! `(x, y)` has its centre at `(SUB·x + SUB/2, SUB·y + SUB/2)`.

pub const SUB: i64 = 16;

pub type Pt = (i64, i64);

pub fn centre(x: usize, y: usize) -> Pt {
    (x as i64 * SUB + SUB / 2, y as i64 * SUB + SUB / 2)
}

/// Whether `p` lies within distance `r` (fixed-point) of segment `ab`.
pub fn near_segment(p: Pt, a: Pt, b: Pt, r: i64) -> bool {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let (px, py) = (p.0 - a.0, p.1 - a.1);
    let len2 = dx * dx + dy * dy;
    let dot = px * dx + py * dy;
    let r2 = r * r;
    if len2 == 0 || dot <= 0 {
        return px * px + py * py <= r2;
    }
    if dot >= len2 {
        let (qx, qy) = (p.0 - b.0, p.1 - b.1);
        return qx * qx + qy * qy <= r2;
    }
    let cross = px * dy - py * dx;
    (cross as i128) * (cross as i128) <= (r2 as i128) * (len2 as i128)
}

pub fn near_polyline(p: Pt, line: &[Pt], r: i64) -> bool {
    line.windows(2).any(|w| near_segment(p, w[0], w[1], r))
}

/// Even-odd point-in-polygon test.
pub fn inside_polygon(p: Pt, poly: &[Pt]) -> bool {
    let mut inside = false;
    let n = poly.len();
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        if (a.1 > p.1) != (b.1 > p.1) {
            // x of the edge at p.1, compared without division
            let lhs = (p.0 - a.0) * (b.1 - a.1);
            let rhs = (b.0 - a.0) * (p.1 - a.1);
            if (b.1 > a.1 && lhs < rhs) || (b.1 < a.1 && lhs > rhs) {
                inside = !inside;
            }
        }
    }
    inside
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub size: usize,
    pub rgb: Vec<u8>,
}

impl Canvas {
    pub fn new(size: usize, colour: [u8; 3]) -> Self {
        Canvas {
            size,
            rgb: colour.repeat(size * size),
        }
    }

    pub fn set(&mut self, x: usize, y: usize, c: [u8; 3]) {
        if x < self.size && y < self.size {
            let i = (y * self.size + x) * 3;
            self.rgb[i..i + 3].copy_from_slice(&c);
        }
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.size + x) * 3;
        [self.rgb[i], self.rgb[i + 1], self.rgb[i + 2]]
    }

    /// Adds a signed offset to every channel of a pixel, saturating.
    pub fn shift(&mut self, x: usize, y: usize, delta: i32) {
        let i = (y * self.size + x) * 3;
        for c in &mut self.rgb[i..i + 3] {
            *c = (*c as i32 + delta).clamp(0, 255) as u8;
        }
    }

    /// One-pixel Bresenham line between pixel coordinates.
    pub fn line(&mut self, from: (i64, i64), to: (i64, i64), c: [u8; 3]) {
        let (mut x, mut y) = from;
        let dx = (to.0 - x).abs();
        let dy = -(to.1 - y).abs();
        let sx = if x < to.0 { 1 } else { -1 };
        let sy = if y < to.1 { 1 } else { -1 };
        let mut err = dx + dy;
        loop {
            if x >= 0 && y >= 0 {
                self.set(x as usize, y as usize, c);
            }
            if x == to.0 && y == to.1 {
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

    /// Paints every pixel whose centre satisfies `pred`.
    pub fn fill_where(&mut self, c: [u8; 3], mut pred: impl FnMut(Pt) -> bool) {
        for y in 0..self.size {
            for x in 0..self.size {
                if pred(centre(x, y)) {
                    self.set(x, y, c);
                }
            }
        }
    }
}
