//! Procedural 32x32 product images.

use rand::Rng;

use super::schema::{default_schemas, AttributeSchema, Renderer};
use super::Evidence;
use crate::error::Result;
use crate::vision::ImageGrid;

pub const IMAGE_SIZE: usize = 32;

const PALETTE: [(&str, [u8; 3]); 4] = [
    ("red", [220, 40, 40]),
    ("green", [40, 190, 60]),
    ("blue", [40, 70, 220]),
    ("yellow", [230, 210, 40]),
];
const SHAPES: [&str; 4] = ["circle", "square", "triangle", "diamond"];
const PATTERNS: [&str; 4] = ["solid", "striped", "dotted", "checkered"];

/// Everything that varies between renders besides the target value.
#[derive(Clone, Debug, PartialEq)]
pub struct Nuisance {
    pub background: [u8; 3],
    pub center: (i32, i32),
    pub radius: i32,
    pub shape: &'static str,
    pub color: [u8; 3],
    pub pattern: &'static str,
    pub noise_seed: u64,
}

impl Nuisance {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Nuisance {
            background: [rng.gen_range(60..120), rng.gen_range(60..120), rng.gen_range(60..120)],
            center: (16 + rng.gen_range(-2..=2), 16 + rng.gen_range(-2..=2)),
            radius: 13 + rng.gen_range(-1..=1),
            shape: SHAPES[rng.gen_range(0..SHAPES.len())],
            color: PALETTE[rng.gen_range(0..PALETTE.len())].1,
            pattern: PATTERNS[rng.gen_range(0..PATTERNS.len())],
            noise_seed: rng.gen(),
        }
    }
}

fn inside(shape: &str, x: i32, y: i32, (cx, cy): (i32, i32), r: i32) -> bool {
    let (dx, dy) = (x - cx, y - cy);
    let rf = r as f64;
    match shape {
        "circle" => dx * dx + dy * dy <= r * r,
        "square" => (dx.abs() as f64) <= rf * 0.85 && (dy.abs() as f64) <= rf * 0.85,
        "triangle" => {
            let top = cy - r;
            (y as f64) <= cy as f64 + rf * 0.8 && y >= top && (dx.abs() as f64) <= (y - top) as f64 * 0.6
        }
        _ => dx.abs() + dy.abs() <= r,
    }
}

fn pattern_on(pattern: &str, x: i32, y: i32) -> bool {
    match pattern {
        "solid" => true,
        "striped" => (y / 2) % 2 == 0,
        "dotted" => x % 4 < 2 && y % 4 < 2,
        _ => ((x / 3) + (y / 3)) % 2 == 0,
    }
}

/// Cheap deterministic per-pixel hash used for obscuring textures.
fn noise(seed: u64, x: i32, y: i32) -> f64 {
    let mut h = seed ^ ((x as u64) << 32 | y as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    h ^= h >> 33;
    h = h.wrapping_mul(0xff51_afd7_ed55_8ccd);
    h ^= h >> 33;
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Renders `value` of `schema`. With text-cue-only evidence the attribute
/// is deliberately obscured: a noise blob instead of the shape, a noise
/// texture instead of the pattern, gray instead of the color.
pub fn render_with(schema: &AttributeSchema, value: &str, evidence: Evidence, n: &Nuisance) -> Result<ImageGrid> {
    let value = schema.value(value)?.name.as_str();
    let visible = evidence != Evidence::TextCue;
    let mut shape = n.shape;
    let mut color = n.color;
    let mut pattern = n.pattern;
    match schema.renderer {
        Renderer::Shape => shape = SHAPES.iter().copied().find(|s| *s == value).unwrap_or("circle"),
        Renderer::Pattern => pattern = PATTERNS.iter().copied().find(|p| *p == value).unwrap_or("solid"),
        Renderer::Color => {
            color = PALETTE
                .iter()
                .find(|(c, _)| *c == value)
                .map_or([128; 3], |(_, rgb)| *rgb);
            if !visible {
                let g = ((color[0] as u32 + color[1] as u32 + color[2] as u32) / 3) as u8;
                color = [g; 3];
            }
        }
    }
    let dim = color.map(|c| (c as f64 * 0.35) as u8);
    let mut img = ImageGrid::filled(IMAGE_SIZE, n.background);
    for y in 0..IMAGE_SIZE as i32 {
        for x in 0..IMAGE_SIZE as i32 {
            let covered = if schema.renderer == Renderer::Shape && !visible {
                noise(n.noise_seed, x, y) < 0.45
            } else {
                inside(shape, x, y, n.center, n.radius)
            };
            if !covered {
                continue;
            }
            let on = if schema.renderer == Renderer::Pattern && !visible {
                noise(n.noise_seed ^ 0xabcdef, x, y) < 0.5
            } else {
                pattern_on(pattern, x, y)
            };
            img.set(x as usize, y as usize, if on { color } else { dim });
        }
    }
    Ok(img)
}

pub fn render_image(
    schema: &AttributeSchema,
    value: &str,
    evidence: Evidence,
    rng: &mut impl Rng,
) -> Result<ImageGrid> {
    let n = Nuisance::sample(rng);
    render_with(schema, value, evidence, &n)
}

/// Schema by attribute name among the built-in ones.
pub fn builtin_schema(name: &str) -> Option<AttributeSchema> {
    default_schemas().into_iter().find(|s| s.name == name)
}
