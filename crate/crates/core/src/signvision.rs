//! Synthetic sign vision: renders small grayscale scenes of trackside signs,
//! classifies them with a deliberately weak detector, and re-checks them with
//! a strict certifier built on blob moments. Images round-trip through plain
//! text PGM so scenes can be inspected and replayed.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::perception::DetectionClass;
use crate::rng::Rng;

pub const SCENE_SIZE: usize = 64;
const BACKGROUND: u8 = 20;
const BAR_VALUE: u8 = 230;
const DISC_VALUE: u8 = 200;
const BAR_HALF_LEN: f64 = 18.0;
const BAR_HALF_WIDTH: f64 = 4.0;

/// Weak classifier thresholds.
const WEAK_THRESHOLD: u8 = 150;
const WEAK_MIN_AREA: u32 = 30;
const WEAK_ANGLE_TOL: f64 = 22.5;

/// Certifier thresholds.
const CERT_THRESHOLD: u8 = 128;
const CERT_MIN_AREA: u32 = 60;
const CERT_MAX_AREA: u32 = 600;
const CERT_MIN_ELONGATION: f64 = 3.0;
const CERT_ANGLE_TOL: f64 = 15.0;

/// Row-major 8-bit grayscale image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, fill: u8) -> GrayImage {
        GrayImage {
            width,
            height,
            pixels: vec![fill; width * height],
        }
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.pixels[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.pixels[y * self.width + x] = v;
    }
}

/// Rendering knobs for the scene generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CvParams {
    /// Standard deviation of additive pixel noise.
    pub noise_sigma: f64,
    /// Probability that a sign scene is partially painted over.
    pub occlusion_prob: f64,
    /// Probability that an empty scene contains a bright disc.
    pub distractor_prob: f64,
}

impl Default for CvParams {
    fn default() -> CvParams {
        CvParams {
            noise_sigma: 8.0,
            occlusion_prob: 0.2,
            distractor_prob: 0.3,
        }
    }
}

impl CvParams {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.noise_sigma >= 0.0) {
            return Err(format!("noise_sigma must be >= 0, got {}", self.noise_sigma));
        }
        for (name, p) in [
            ("occlusion_prob", self.occlusion_prob),
            ("distractor_prob", self.distractor_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(format!("{name} must lie in [0, 1], got {p}"));
            }
        }
        Ok(())
    }
}

/// Bar angles are measured with y pointing up, so a permission bar rises to
/// the right even though raster rows grow downward.
fn draw_bar(img: &mut GrayImage, cx: f64, cy: f64, angle_deg: f64, value: u8) {
    let rad = angle_deg.to_radians();
    let (sin, cos) = rad.sin_cos();
    for y in 0..img.height {
        for x in 0..img.width {
            let dx = x as f64 - cx;
            let dy_up = -(y as f64 - cy);
            let along = dx * cos + dy_up * sin;
            let perp = -dx * sin + dy_up * cos;
            if along.abs() <= BAR_HALF_LEN && perp.abs() <= BAR_HALF_WIDTH {
                img.set(x, y, value);
            }
        }
    }
}

fn draw_disc(img: &mut GrayImage, cx: f64, cy: f64, r: f64, value: u8) {
    for y in 0..img.height {
        for x in 0..img.width {
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            if dx * dx + dy * dy <= r * r {
                img.set(x, y, value);
            }
        }
    }
}

fn fill_rect(img: &mut GrayImage, x0: usize, y0: usize, w: usize, h: usize, value: u8) {
    for y in y0..(y0 + h).min(img.height) {
        for x in x0..(x0 + w).min(img.width) {
            img.set(x, y, value);
        }
    }
}

/// One standard normal via Box-Muller; always consumes exactly two draws.
fn gauss(rng: &mut Rng) -> f64 {
    let u1 = 1.0 - rng.uniform01();
    let u2 = rng.uniform01();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Renders the scene for a true class. Draw order is fixed: distractor
/// decision (empty scenes), occlusion decision (sign scenes), then one noise
/// sample per pixel in row-major order.
pub fn render_sign(class: DetectionClass, params: &CvParams, rng: &mut Rng) -> GrayImage {
    let mut img = GrayImage::new(SCENE_SIZE, SCENE_SIZE, BACKGROUND);
    let center = (SCENE_SIZE / 2) as f64;
    match class {
        DetectionClass::NoSignal => {
            if rng.bernoulli(params.distractor_prob) {
                let r = rng.range_inclusive(5, 10) as f64;
                let cx = rng.range_inclusive(16, 48) as f64;
                let cy = rng.range_inclusive(16, 48) as f64;
                draw_disc(&mut img, cx, cy, r, DISC_VALUE);
            }
        }
        DetectionClass::Stop => draw_bar(&mut img, center, center, 0.0, BAR_VALUE),
        DetectionClass::Permission => draw_bar(&mut img, center, center, 45.0, BAR_VALUE),
    }
    if class != DetectionClass::NoSignal && rng.bernoulli(params.occlusion_prob) {
        let w = rng.range_inclusive(8, 20) as usize;
        let h = rng.range_inclusive(8, 20) as usize;
        let x = rng.range_inclusive(12, 44) as usize;
        let y = rng.range_inclusive(12, 44) as usize;
        fill_rect(&mut img, x, y, w, h, BACKGROUND);
    }
    if params.noise_sigma > 0.0 {
        for v in img.pixels.iter_mut() {
            let noisy = *v as f64 + gauss(rng) * params.noise_sigma;
            *v = noisy.round().clamp(0.0, 255.0) as u8;
        }
    }
    img
}

/// Connected components of pixels >= thresh under 4-connectivity, listed in
/// row-major discovery order. Each component lists its pixels as (x, y).
pub fn connected_components(img: &GrayImage, thresh: u8) -> Vec<Vec<(u32, u32)>> {
    let w = img.width;
    let h = img.height;
    let mut seen = vec![false; w * h];
    let mut components = Vec::new();
    for start in 0..w * h {
        if seen[start] || img.pixels[start] < thresh {
            continue;
        }
        let mut pixels = Vec::new();
        let mut queue = std::collections::VecDeque::from([start]);
        seen[start] = true;
        while let Some(idx) = queue.pop_front() {
            let (x, y) = (idx % w, idx / w);
            pixels.push((x as u32, y as u32));
            let mut push = |nx: usize, ny: usize| {
                let nidx = ny * w + nx;
                if !seen[nidx] && img.pixels[nidx] >= thresh {
                    seen[nidx] = true;
                    queue.push_back(nidx);
                }
            };
            if x > 0 {
                push(x - 1, y);
            }
            if x + 1 < w {
                push(x + 1, y);
            }
            if y > 0 {
                push(x, y - 1);
            }
            if y + 1 < h {
                push(x, y + 1);
            }
        }
        components.push(pixels);
    }
    components
}

/// Shape summary of one pixel blob.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BlobStats {
    pub area: u32,
    pub centroid: (f64, f64),
    /// Principal axis orientation in degrees, y up, in (-90, 90].
    pub angle_deg: f64,
    /// Ratio of the principal second moments; 1 for a disc, large for a bar.
    pub elongation: f64,
    pub mu20: f64,
    pub mu02: f64,
    pub mu11: f64,
}

/// Central second moments of a pixel set, with orientation converted from
/// raster rows (y down) to the y-up convention used for sign angles.
pub fn blob_stats(pixels: &[(u32, u32)]) -> BlobStats {
    let n = pixels.len() as f64;
    assert!(n > 0.0, "blob_stats needs at least one pixel");
    let (sx, sy) = pixels
        .iter()
        .fold((0.0, 0.0), |(ax, ay), &(x, y)| (ax + x as f64, ay + y as f64));
    let (cx, cy) = (sx / n, sy / n);
    let (mut mu20, mut mu02, mut mu11) = (0.0, 0.0, 0.0);
    for &(x, y) in pixels {
        let dx = x as f64 - cx;
        let dy = y as f64 - cy;
        mu20 += dx * dx;
        mu02 += dy * dy;
        mu11 += dx * dy;
    }
    // atan2 can land on -90 exactly (signed-zero mu11); report within (-90, 90].
    let mut angle_deg = 0.5 * (-2.0 * mu11).atan2(mu20 - mu02).to_degrees();
    if angle_deg <= -90.0 {
        angle_deg += 180.0;
    }
    let mean = (mu20 + mu02) / 2.0;
    let diff = ((mu20 - mu02) / 2.0).hypot(mu11);
    let (l1, l2) = (mean + diff, mean - diff);
    BlobStats {
        area: pixels.len() as u32,
        centroid: (cx, cy),
        angle_deg,
        elongation: l1 / l2.max(1e-9),
        mu20,
        mu02,
        mu11,
    }
}

/// Distance between two axis orientations, folded onto [0, 90].
fn axis_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(180.0);
    d.min(180.0 - d)
}

fn largest_component(img: &GrayImage, thresh: u8) -> Option<Vec<(u32, u32)>> {
    connected_components(img, thresh)
        .into_iter()
        .max_by_key(|c| c.len())
}

/// The production detector: bright-pixel blob, loose area and angle gates,
/// no shape check. Mistakes bright discs for signs and drops heavily
/// occluded bars.
pub fn weak_classify(img: &GrayImage) -> DetectionClass {
    let Some(pixels) = largest_component(img, WEAK_THRESHOLD) else {
        return DetectionClass::NoSignal;
    };
    if (pixels.len() as u32) < WEAK_MIN_AREA {
        return DetectionClass::NoSignal;
    }
    let stats = blob_stats(&pixels);
    if axis_distance(stats.angle_deg, 0.0) <= WEAK_ANGLE_TOL {
        DetectionClass::Stop
    } else if axis_distance(stats.angle_deg, 45.0) <= WEAK_ANGLE_TOL {
        DetectionClass::Permission
    } else {
        DetectionClass::NoSignal
    }
}

/// The certifier: lower threshold, tight area band, a minimum elongation
/// that discs cannot meet, and narrow angle windows. Returns the class it
/// can vouch for, if any.
pub fn certify(img: &GrayImage) -> Option<DetectionClass> {
    let pixels = largest_component(img, CERT_THRESHOLD)?;
    let area = pixels.len() as u32;
    if !(CERT_MIN_AREA..=CERT_MAX_AREA).contains(&area) {
        return None;
    }
    let stats = blob_stats(&pixels);
    if stats.elongation < CERT_MIN_ELONGATION {
        return None;
    }
    if axis_distance(stats.angle_deg, 0.0) <= CERT_ANGLE_TOL {
        Some(DetectionClass::Stop)
    } else if axis_distance(stats.angle_deg, 45.0) <= CERT_ANGLE_TOL {
        Some(DetectionClass::Permission)
    } else {
        None
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PgmError {
    #[error("not a plain PGM: expected magic P2, got {0:?}")]
    BadMagic(String),
    #[error("header token {0} is missing or malformed")]
    BadHeader(&'static str),
    #[error("expected {expected} pixel values, found {found}")]
    PixelCount { expected: usize, found: usize },
    #[error("pixel {index} has value {value}, exceeding maxval {maxval}")]
    PixelRange {
        index: usize,
        value: u32,
        maxval: u32,
    },
}

/// Plain (ASCII) PGM, one image row per text line.
pub fn write_pgm(img: &GrayImage) -> String {
    let mut out = format!("P2\n{} {}\n255\n", img.width, img.height);
    for y in 0..img.height {
        for x in 0..img.width {
            if x > 0 {
                out.push(' ');
            }
            out.push_str(&img.get(x, y).to_string());
        }
        out.push('\n');
    }
    out
}

pub fn parse_pgm(text: &str) -> Result<GrayImage, PgmError> {
    // Comments run from '#' to end of line anywhere in the file.
    let cleaned: String = text
        .lines()
        .map(|l| l.split('#').next().unwrap_or(""))
        .collect::<Vec<_>>()
        .join("\n");
    let mut tokens = cleaned.split_whitespace();
    let magic = tokens.next().unwrap_or("");
    if magic != "P2" {
        return Err(PgmError::BadMagic(magic.to_string()));
    }
    let mut dim = |name: &'static str| -> Result<usize, PgmError> {
        tokens
            .next()
            .and_then(|t| t.parse::<usize>().ok())
            .filter(|&v| v > 0)
            .ok_or(PgmError::BadHeader(name))
    };
    let width = dim("width")?;
    let height = dim("height")?;
    let maxval = dim("maxval")? as u32;
    if maxval > 255 {
        return Err(PgmError::BadHeader("maxval"));
    }
    let expected = width * height;
    let mut pixels = Vec::with_capacity(expected);
    for (index, token) in tokens.enumerate() {
        if pixels.len() == expected {
            return Err(PgmError::PixelCount {
                expected,
                found: index + 1,
            });
        }
        let value: u32 = token.parse().map_err(|_| PgmError::BadHeader("pixel"))?;
        if value > maxval {
            return Err(PgmError::PixelRange {
                index,
                value,
                maxval,
            });
        }
        pixels.push(value as u8);
    }
    if pixels.len() != expected {
        return Err(PgmError::PixelCount {
            expected,
            found: pixels.len(),
        });
    }
    Ok(GrayImage {
        width,
        height,
        pixels,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clean_params() -> CvParams {
        CvParams {
            noise_sigma: 0.0,
            occlusion_prob: 0.0,
            distractor_prob: 0.0,
        }
    }

    #[test]
    fn horizontal_line_moments() {
        // Five pixels in a row: mu20 = 4+1+0+1+4, mu02 = mu11 = 0.
        let pixels: Vec<(u32, u32)> = (10..15).map(|x| (x, 7)).collect();
        let s = blob_stats(&pixels);
        assert_eq!(s.area, 5);
        assert_eq!(s.centroid, (12.0, 7.0));
        assert_eq!(s.mu20, 10.0);
        assert_eq!(s.mu02, 0.0);
        assert_eq!(s.mu11, 0.0);
        assert_eq!(s.angle_deg, 0.0);
        assert!(s.elongation > 1e6);
    }

    #[test]
    fn vertical_line_reports_plus_90() {
        let pixels: Vec<(u32, u32)> = (10..15).map(|y| (7, y)).collect();
        let s = blob_stats(&pixels);
        assert_eq!(s.mu20, 0.0);
        assert_eq!(s.mu02, 10.0);
        assert_eq!(s.angle_deg, 90.0);
    }

    #[test]
    fn diagonal_line_measures_plus_45_up() {
        // Raster diagonal going up-right: x increases while y decreases.
        let pixels: Vec<(u32, u32)> = (0..9).map(|i| (20 + i, 30 - i)).collect();
        let s = blob_stats(&pixels);
        assert!((s.angle_deg - 45.0).abs() < 1e-9, "angle {}", s.angle_deg);
    }

    #[test]
    fn rendered_bars_hit_known_pixels() {
        let mut rng = Rng::new(1);
        let stop = render_sign(DetectionClass::Stop, &clean_params(), &mut rng);
        assert_eq!(stop.get(32, 32), 230);
        assert_eq!(stop.get(49, 32), 230); // 17 right of center, inside half length
        assert_eq!(stop.get(32, 40), 20); // 8 below center, outside half width

        let perm = render_sign(DetectionClass::Permission, &clean_params(), &mut rng);
        assert_eq!(perm.get(40, 24), 230); // up-right along the +45 axis
        assert_eq!(perm.get(40, 40), 20); // down-right is off the bar
    }

    #[test]
    fn clean_scenes_classify_correctly() {
        let mut rng = Rng::new(2);
        let p = clean_params();
        assert_eq!(
            weak_classify(&render_sign(DetectionClass::NoSignal, &p, &mut rng)),
            DetectionClass::NoSignal
        );
        assert_eq!(
            weak_classify(&render_sign(DetectionClass::Stop, &p, &mut rng)),
            DetectionClass::Stop
        );
        assert_eq!(
            weak_classify(&render_sign(DetectionClass::Permission, &p, &mut rng)),
            DetectionClass::Permission
        );
    }

    #[test]
    fn certifier_accepts_clean_bars_and_rejects_discs() {
        let mut rng = Rng::new(3);
        let p = clean_params();
        let stop = render_sign(DetectionClass::Stop, &p, &mut rng);
        assert_eq!(certify(&stop), Some(DetectionClass::Stop));
        let perm = render_sign(DetectionClass::Permission, &p, &mut rng);
        assert_eq!(certify(&perm), Some(DetectionClass::Permission));

        let mut disc = GrayImage::new(SCENE_SIZE, SCENE_SIZE, 20);
        draw_disc(&mut disc, 32.0, 32.0, 8.0, 200);
        assert_eq!(certify(&disc), None);
        assert_eq!(certify(&GrayImage::new(SCENE_SIZE, SCENE_SIZE, 20)), None);
    }

    #[test]
    fn noisy_scenes_still_classify() {
        let p = CvParams {
            noise_sigma: 8.0,
            occlusion_prob: 0.0,
            distractor_prob: 0.0,
        };
        let mut rng = Rng::new(4);
        for _ in 0..20 {
            let img = render_sign(DetectionClass::Stop, &p, &mut rng);
            assert_eq!(weak_classify(&img), DetectionClass::Stop);
            assert_eq!(certify(&img), Some(DetectionClass::Stop));
        }
    }

    #[test]
    fn rendering_is_deterministic_per_seed() {
        let p = CvParams::default();
        let mut a = Rng::new(99);
        let mut b = Rng::new(99);
        for class in [
            DetectionClass::NoSignal,
            DetectionClass::Stop,
            DetectionClass::Permission,
        ] {
            assert_eq!(
                render_sign(class, &p, &mut a),
                render_sign(class, &p, &mut b)
            );
        }
    }

    #[test]
    fn components_respect_4_connectivity() {
        let mut img = GrayImage::new(8, 8, 0);
        img.set(1, 1, 255);
        img.set(2, 2, 255); // diagonal neighbor: separate component
        img.set(5, 5, 255);
        img.set(5, 6, 255); // vertical neighbor: same component
        let comps = connected_components(&img, 128);
        assert_eq!(comps.len(), 3);
        // Row-major discovery order.
        assert_eq!(comps[0], vec![(1, 1)]);
        assert_eq!(comps[1], vec![(2, 2)]);
        assert_eq!(comps[2].len(), 2);
    }

    #[test]
    fn component_threshold_is_inclusive() {
        let mut img = GrayImage::new(4, 1, 0);
        img.set(0, 0, 127);
        img.set(1, 0, 128);
        let comps = connected_components(&img, 128);
        assert_eq!(comps, vec![vec![(1, 0)]]);
    }

    #[test]
    fn pgm_roundtrip_is_exact() {
        let mut rng = Rng::new(7);
        let img = render_sign(DetectionClass::Permission, &CvParams::default(), &mut rng);
        let text = write_pgm(&img);
        assert!(text.starts_with("P2\n64 64\n255\n"));
        let back = parse_pgm(&text).unwrap();
        assert_eq!(img, back);
    }

    #[test]
    fn pgm_parser_reports_malformed_input() {
        assert_eq!(
            parse_pgm("P5\n2 2\n255\n0 0 0 0"),
            Err(PgmError::BadMagic("P5".to_string()))
        );
        assert_eq!(
            parse_pgm("P2\n2 2\n255\n0 0 0"),
            Err(PgmError::PixelCount {
                expected: 4,
                found: 3
            })
        );
        assert_eq!(
            parse_pgm("P2\n2 1\n255\n0 300"),
            Err(PgmError::PixelRange {
                index: 1,
                value: 300,
                maxval: 255
            })
        );
        assert!(matches!(
            parse_pgm("P2\n0 2\n255\n"),
            Err(PgmError::BadHeader("width"))
        ));
    }

    #[test]
    fn pgm_parser_skips_comments() {
        let img = parse_pgm("P2 # plain pgm\n2 2 # size\n255\n1 2\n3 4\n").unwrap();
        assert_eq!(img.pixels, vec![1, 2, 3, 4]);
    }

    #[test]
    fn moments_are_translation_invariant() {
        let base: Vec<(u32, u32)> = vec![(3, 4), (4, 4), (5, 4), (5, 5), (6, 5)];
        let a = blob_stats(&base);
        let shifted: Vec<(u32, u32)> = base.iter().map(|&(x, y)| (x + 11, y + 23)).collect();
        let b = blob_stats(&shifted);
        // Summation order differs after the shift, so allow float rounding.
        assert!((a.mu20 - b.mu20).abs() < 1e-9);
        assert!((a.mu02 - b.mu02).abs() < 1e-9);
        assert!((a.mu11 - b.mu11).abs() < 1e-9);
        assert!((a.angle_deg - b.angle_deg).abs() < 1e-9);
        assert!((a.elongation - b.elongation).abs() < 1e-9);
    }

    #[test]
    fn axis_distance_folds_onto_half_circle() {
        assert_eq!(axis_distance(0.0, 0.0), 0.0);
        assert_eq!(axis_distance(90.0, -90.0), 0.0);
        assert_eq!(axis_distance(179.0, 0.0), 1.0);
        assert_eq!(axis_distance(45.0, 0.0), 45.0);
    }
}
