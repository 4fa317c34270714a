//! Procedural map-like tiles: railways, vineyards and plain textures.

use std::fmt;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::raster::{centre, inside_polygon, near_polyline, Canvas, Pt, SUB};
use crate::error::{Error, Result};

pub const MIN_TILE_SIZE: usize = 32;

/// Half distance between the two rails, fixed-point.
pub const RAIL_HALF_GAUGE: i64 = 9 * SUB / 2;
/// Stroke width of each rail, fixed-point.
pub const RAIL_WIDTH: i64 = 2 * SUB;

const INK: [u8; 3] = [28, 24, 22];

/// Unit vectors at 22.5° steps, scaled by 1000.
const DIRECTIONS: [(i64, i64); 16] = [
    (1000, 0),
    (924, 383),
    (707, 707),
    (383, 924),
    (0, 1000),
    (-383, 924),
    (-707, 707),
    (-924, 383),
    (-1000, 0),
    (-924, -383),
    (-707, -707),
    (-383, -924),
    (0, -1000),
    (383, -924),
    (707, -707),
    (924, -383),
];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FeatureClass {
    Railway,
    Vineyard,
}

impl FeatureClass {
    pub fn as_str(self) -> &'static str {
        match self {
            FeatureClass::Railway => "railway",
            FeatureClass::Vineyard => "vineyard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "railway" => Ok(FeatureClass::Railway),
            "vineyard" => Ok(FeatureClass::Vineyard),
            other => Err(Error::Data(format!("unknown feature class `{other}`"))),
        }
    }

    pub fn generate(self, seed: u64, size: usize) -> Result<Tile> {
        match self {
            FeatureClass::Railway => gen_railway(seed, size),
            FeatureClass::Vineyard => gen_vineyard(seed, size),
        }
    }
}

impl fmt::Display for FeatureClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Target geometry in fixed-point units.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Geometry {
    Railway {
        centreline: Vec<Pt>,
        half_gauge: i64,
        rail_width: i64,
    },
    Vineyard {
        polygon: Vec<Pt>,
        period: usize,
        offset: usize,
        dash: usize,
        gap: usize,
    },
}

impl Geometry {
    /// Pixels covered by the target footprint.
    pub fn rasterize(&self, size: usize) -> Vec<u8> {
        let mut gt = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                gt[y * size + x] = self.contains(centre(x, y)) as u8;
            }
        }
        gt
    }

    pub fn contains(&self, p: Pt) -> bool {
        match self {
            Geometry::Railway {
                centreline,
                half_gauge,
                ..
            } => near_polyline(p, centreline, *half_gauge),
            Geometry::Vineyard { polygon, .. } => inside_polygon(p, polygon),
        }
    }

    /// Pixels painted with ink for the feature itself.
    pub fn ink(&self, x: usize, y: usize) -> bool {
        let p = centre(x, y);
        match self {
            Geometry::Railway {
                centreline,
                half_gauge,
                rail_width,
            } => {
                near_polyline(p, centreline, *half_gauge)
                    && !near_polyline(p, centreline, half_gauge - rail_width)
            }
            Geometry::Vineyard {
                polygon,
                period,
                offset,
                dash,
                gap,
            } => {
                (x + offset) % period == 0
                    && (y + x / period * 3) % (dash + gap) < *dash
                    && inside_polygon(p, polygon)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tile {
    pub id: String,
    pub class: FeatureClass,
    pub seed: u64,
    pub size: usize,
    /// Row-major `size×size×3`.
    pub raster: Vec<u8>,
    /// Row-major `size×size`, values 0 or 1.
    pub gt: Vec<u8>,
    pub geometry: Geometry,
}

impl Tile {
    pub fn foreground_fraction(&self) -> f64 {
        self.gt.iter().map(|&v| v as usize).sum::<usize>() as f64 / self.gt.len() as f64
    }

    /// Raster as `[0,1]` floats, `size×size×3`.
    pub fn image(&self) -> crate::tensor::Tensor {
        image_tensor(self.size, &self.raster)
    }

    pub fn gt_tensor(&self) -> crate::tensor::Tensor {
        let data = self.gt.iter().map(|&v| v as f64).collect();
        crate::tensor::Tensor::new(vec![self.size, self.size], data).expect("gt dims")
    }
}

pub fn image_tensor(size: usize, raster: &[u8]) -> crate::tensor::Tensor {
    let data = raster.iter().map(|&v| v as f64 / 255.0).collect();
    crate::tensor::Tensor::new(vec![size, size, 3], data).expect("raster dims")
}

fn check_size(size: usize) -> Result<()> {
    if size < MIN_TILE_SIZE {
        return Err(Error::Data(format!(
            "tile size {size} below minimum {MIN_TILE_SIZE}"
        )));
    }
    Ok(())
}

fn background(rng: &mut ChaCha8Rng, size: usize) -> Canvas {
    let base = [
        rng.gen_range(224..=240u8),
        rng.gen_range(212..=228u8),
        rng.gen_range(182..=200u8),
    ];
    let mut c = Canvas::new(size, base);
    let stains = rng.gen_range(1..=3);
    for _ in 0..stains {
        let cx = rng.gen_range(0..size as i64);
        let cy = rng.gen_range(0..size as i64);
        let r = rng.gen_range(6..=size as i64 / 3);
        let delta = rng.gen_range(-12..=-4);
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as i64 - cx, y as i64 - cy);
                if dx * dx + dy * dy <= r * r {
                    c.shift(x, y, delta);
                }
            }
        }
    }
    for y in 0..size {
        for x in 0..size {
            c.shift(x, y, rng.gen_range(-6..=6));
        }
    }
    c
}

fn random_edge_point(rng: &mut ChaCha8Rng, size: i64, side: u8) -> (i64, i64) {
    let t = rng.gen_range(0..size);
    match side {
        0 => (t, -2),
        1 => (size + 1, t),
        2 => (t, size + 1),
        _ => (-2, t),
    }
}

fn thin_lines(rng: &mut ChaCha8Rng, c: &mut Canvas, count: usize) {
    let size = c.size as i64;
    for _ in 0..count {
        let colour = if rng.gen_bool(0.5) {
            INK
        } else {
            [rng.gen_range(90..=140), rng.gen_range(60..=90), rng.gen_range(30..=60)]
        };
        let a = rng.gen_range(0..4u8);
        let b = (a + rng.gen_range(1..4u8)) % 4;
        let mut pts = vec![random_edge_point(rng, size, a)];
        if rng.gen_bool(0.5) {
            pts.push((rng.gen_range(0..size), rng.gen_range(0..size)));
        }
        pts.push(random_edge_point(rng, size, b));
        for w in pts.windows(2) {
            c.line(w[0], w[1], colour);
        }
    }
}

fn glyphs(rng: &mut ChaCha8Rng, c: &mut Canvas, words: usize) {
    let size = c.size as i64;
    for _ in 0..words {
        let letters = rng.gen_range(2..=4);
        let x0 = rng.gen_range(0..size - 4);
        let y0 = rng.gen_range(0..size - 6);
        for l in 0..letters {
            let gx = x0 + l * 5;
            for dy in 0..6 {
                for dx in 0..4 {
                    if rng.gen_range(0..100) < 45 {
                        let (x, y) = (gx + dx, y0 + dy);
                        if x < size && y < size {
                            c.set(x as usize, y as usize, INK);
                        }
                    }
                }
            }
        }
    }
}

/// Roads: two one-pixel casings around a centreline, narrower than rails.
fn roads(rng: &mut ChaCha8Rng, c: &mut Canvas, count: usize) {
    let s = c.size as i64;
    for _ in 0..count {
        let a = rng.gen_range(0..4u8);
        let b = (a + rng.gen_range(1..4u8)) % 4;
        let (ax, ay) = random_edge_point(rng, s, a);
        let (bx, by) = random_edge_point(rng, s, b);
        let line = [
            (ax * SUB, ay * SUB),
            centre(rng.gen_range(0..s) as usize, rng.gen_range(0..s) as usize),
            (bx * SUB, by * SUB),
        ];
        let r = rng.gen_range(2 * SUB..=3 * SUB);
        let colour = [rng.gen_range(60..=110), rng.gen_range(50..=80), rng.gen_range(40..=60)];
        c.fill_where(colour, |p| near_polyline(p, &line, r) && !near_polyline(p, &line, r - SUB));
    }
}

fn distractors(rng: &mut ChaCha8Rng, c: &mut Canvas) {
    let n_roads = rng.gen_range(0..=1);
    roads(rng, c, n_roads);
    let lines = rng.gen_range(1..=3);
    thin_lines(rng, c, lines);
    let words = rng.gen_range(1..=2);
    glyphs(rng, c, words);
}

fn paint(c: &mut Canvas, geometry: &Geometry) {
    for y in 0..c.size {
        for x in 0..c.size {
            if geometry.ink(x, y) {
                c.set(x, y, INK);
            }
        }
    }
}

fn finish(
    class: FeatureClass,
    seed: u64,
    canvas: Canvas,
    geometry: Geometry,
) -> Tile {
    let size = canvas.size;
    Tile {
        id: String::new(),
        class,
        seed,
        size,
        gt: geometry.rasterize(size),
        raster: canvas.rgb,
        geometry,
    }
}

/// A tile crossed by a two-rail line over textured background.
pub fn gen_railway(seed: u64, size: usize) -> Result<Tile> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = background(&mut rng, size);
    distractors(&mut rng, &mut canvas);

    let s = size as i64;
    let a = rng.gen_range(0..4u8);
    let b = (a + rng.gen_range(1..4u8)) % 4;
    // endpoints sit well outside the tile so both rails run through
    let out = |p: (i64, i64)| {
        let (x, y) = p;
        let push = |v: i64| {
            if v < 0 {
                -8
            } else if v > s {
                s + 8
            } else {
                v
            }
        };
        (push(x) * SUB + SUB / 2, push(y) * SUB + SUB / 2)
    };
    let start = out(random_edge_point(&mut rng, s, a));
    let end = out(random_edge_point(&mut rng, s, b));
    // an interior waypoint guarantees the band crosses the tile
    let (lo, hi) = (s / 4, s - s / 4);
    let via = centre(
        rng.gen_range(lo..hi) as usize,
        rng.gen_range(lo..hi) as usize,
    );
    let centreline = vec![start, via, end];
    let geometry = Geometry::Railway {
        centreline,
        half_gauge: RAIL_HALF_GAUGE,
        rail_width: RAIL_WIDTH,
    };
    paint(&mut canvas, &geometry);
    Ok(finish(FeatureClass::Railway, seed, canvas, geometry))
}

/// A tile with a hatched star-shaped vineyard polygon.
pub fn gen_vineyard(seed: u64, size: usize) -> Result<Tile> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = background(&mut rng, size);
    distractors(&mut rng, &mut canvas);

    let s = size as i64;
    let cx = rng.gen_range(s / 3..=s - s / 3) * SUB;
    let cy = rng.gen_range(s / 3..=s - s / 3) * SUB;
    let vertices = rng.gen_range(5..=8);
    let n = DIRECTIONS.len();
    // one direction per angular sector keeps the polygon star-shaped and wide
    let polygon = (0..vertices)
        .map(|i| {
            let d = rng.gen_range(i * n / vertices..(i + 1) * n / vertices);
            let r = rng.gen_range(s / 4..=s / 2) * SUB;
            let (ux, uy) = DIRECTIONS[d];
            (cx + ux * r / 1000, cy + uy * r / 1000)
        })
        .collect();
    let period = rng.gen_range(3..=4);
    let geometry = Geometry::Vineyard {
        polygon,
        period,
        offset: rng.gen_range(0..period),
        dash: rng.gen_range(3..=5),
        gap: rng.gen_range(2..=3),
    };
    paint(&mut canvas, &geometry);
    Ok(finish(FeatureClass::Vineyard, seed, canvas, geometry))
}

/// Generic texture used for encoder pretraining: coloured blobs and noise,
/// with no map line work.
pub fn gen_texture(seed: u64, size: usize) -> Result<Vec<u8>> {
    check_size(size)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut canvas = background(&mut rng, size);
    let s = size as i64;
    let blobs = rng.gen_range(2..=6);
    for _ in 0..blobs {
        let colour = [rng.gen(), rng.gen(), rng.gen()];
        let cx = rng.gen_range(0..s);
        let cy = rng.gen_range(0..s);
        let rx = rng.gen_range(3..=s / 3);
        let ry = rng.gen_range(3..=s / 3);
        if rng.gen_bool(0.5) {
            for y in 0..size {
                for x in 0..size {
                    let (dx, dy) = (x as i64 - cx, y as i64 - cy);
                    if dx * dx * ry * ry + dy * dy * rx * rx <= rx * rx * ry * ry {
                        canvas.set(x, y, colour);
                    }
                }
            }
        } else {
            for y in (cy - ry).max(0)..(cy + ry).min(s) {
                for x in (cx - rx).max(0)..(cx + rx).min(s) {
                    canvas.set(x as usize, y as usize, colour);
                }
            }
        }
    }
    for y in 0..size {
        for x in 0..size {
            canvas.shift(x, y, rng.gen_range(-10..=10));
        }
    }
    Ok(canvas.rgb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        for class in [FeatureClass::Railway, FeatureClass::Vineyard] {
            let a = class.generate(42, 64).unwrap();
            let b = class.generate(42, 64).unwrap();
            assert_eq!(a, b);
            assert_ne!(a.raster, class.generate(43, 64).unwrap().raster);
        }
        assert_eq!(gen_texture(5, 64).unwrap(), gen_texture(5, 64).unwrap());
    }

    #[test]
    fn rejects_small_tiles() {
        assert!(gen_railway(0, 31).is_err());
        assert!(gen_vineyard(0, 16).is_err());
    }

    #[test]
    fn gt_matches_geometry() {
        for seed in 0..20 {
            for class in [FeatureClass::Railway, FeatureClass::Vineyard] {
                let t = class.generate(seed, 48).unwrap();
                assert_eq!(t.gt, t.geometry.rasterize(t.size));
                assert_eq!(t.raster.len(), t.gt.len() * 3);
            }
        }
    }

    #[test]
    fn ink_lies_inside_gt() {
        for seed in 0..50 {
            for class in [FeatureClass::Railway, FeatureClass::Vineyard] {
                let t = class.generate(seed, 64).unwrap();
                let mut inked = 0;
                for y in 0..t.size {
                    for x in 0..t.size {
                        if t.geometry.ink(x, y) {
                            inked += 1;
                            assert_eq!(t.gt[y * t.size + x], 1, "{class} seed {seed}");
                            let i = (y * t.size + x) * 3;
                            assert_eq!(&t.raster[i..i + 3], &INK);
                        }
                    }
                }
                assert!(inked > 0);
            }
        }
    }

    #[test]
    fn census_foreground_fractions() {
        let (mut rail_lo, mut rail_hi) = (1.0f64, 0.0f64);
        let (mut vine_lo, mut vine_hi) = (1.0f64, 0.0f64);
        for seed in 0..1000 {
            let f = gen_railway(seed, 64).unwrap().foreground_fraction();
            rail_lo = rail_lo.min(f);
            rail_hi = rail_hi.max(f);
            let f = gen_vineyard(seed, 64).unwrap().foreground_fraction();
            vine_lo = vine_lo.min(f);
            vine_hi = vine_hi.max(f);
        }
        assert!(rail_lo >= 0.02 && rail_hi <= 0.30, "railway [{rail_lo}, {rail_hi}]");
        assert!(vine_lo >= 0.05 && vine_hi <= 0.6, "vineyard [{vine_lo}, {vine_hi}]");
    }
}
