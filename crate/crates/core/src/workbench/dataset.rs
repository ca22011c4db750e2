//! Procedural shape corpus.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::model::{NULL_WORD, SUBJECT_WORD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShapeClass {
    Circle,
    Square,
    Triangle,
    Cross,
}

impl ShapeClass {
    pub const ALL: [ShapeClass; 4] = [Self::Circle, Self::Square, Self::Triangle, Self::Cross];

    pub fn name(self) -> &'static str {
        match self {
            Self::Circle => "circle",
            Self::Square => "square",
            Self::Triangle => "triangle",
            Self::Cross => "cross",
        }
    }

    /// Inside test for a shape of half-size `r` centred at the origin.
    fn contains(self, dx: f64, dy: f64, r: f64) -> bool {
        match self {
            Self::Circle => dx * dx + dy * dy <= r * r,
            Self::Square => dx.abs().max(dy.abs()) <= 0.85 * r,
            Self::Triangle => {
                let (top, base) = (-r, 0.8 * r);
                if dy < top || dy > base {
                    return false;
                }
                let half = 0.95 * r * (dy - top) / (base - top);
                dx.abs() <= half
            }
            Self::Cross => {
                let arm = 0.3 * r;
                (dx.abs() <= arm && dy.abs() <= r) || (dy.abs() <= arm && dx.abs() <= r)
            }
        }
    }
}

/// Named colours available to specs.
pub fn color(name: &str) -> Option<[f64; 3]> {
    Some(match name {
        "red" => [0.85, 0.15, 0.15],
        "green" => [0.2, 0.7, 0.25],
        "blue" => [0.15, 0.3, 0.85],
        "yellow" => [0.95, 0.85, 0.2],
        "orange" => [0.95, 0.55, 0.1],
        "cyan" => [0.2, 0.8, 0.85],
        "magenta" => [0.85, 0.1, 0.75],
        "purple" => [0.5, 0.2, 0.65],
        "white" => [0.96, 0.96, 0.96],
        "gray" => [0.5, 0.5, 0.5],
        "black" => [0.05, 0.05, 0.05],
        "navy" => [0.08, 0.1, 0.35],
        "beige" => [0.9, 0.85, 0.7],
        _ => return None,
    })
}

/// The rare attribute tuple that defines the personalisation subject.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubjectSpec {
    pub class: ShapeClass,
    pub fill: String,
    pub background: String,
    /// Outline width in pixels.
    pub stroke: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub image_size: usize,
    pub classes: Vec<ShapeClass>,
    pub fills: Vec<String>,
    pub backgrounds: Vec<String>,
    /// Shape half-size as a fraction of the image side.
    pub radius: (f64, f64),
    /// Maximum centre offset in pixels.
    pub jitter: f64,
    /// Outline width range in pixels.
    pub stroke: (f64, f64),
    pub samples_per_class: usize,
    pub subject: SubjectSpec,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            image_size: 32,
            classes: ShapeClass::ALL.to_vec(),
            fills: ["red", "green", "blue", "yellow", "orange", "cyan"]
                .map(String::from)
                .to_vec(),
            backgrounds: ["white", "gray", "black", "navy"]
                .map(String::from)
                .to_vec(),
            radius: (0.22, 0.36),
            jitter: 3.0,
            stroke: (0.0, 1.0),
            samples_per_class: 200,
            subject: SubjectSpec {
                class: ShapeClass::Circle,
                fill: "magenta".into(),
                background: "white".into(),
                stroke: 2.0,
                count: 5,
            },
            seed: 0,
        }
    }
}

/// One corpus entry.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub prompt: String,
    pub class: ShapeClass,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub generic: Vec<Sample>,
    pub subject: Vec<Sample>,
}

impl Dataset {
    pub fn generic_images(&self) -> Vec<Image> {
        self.generic.iter().map(|s| s.image.clone()).collect()
    }

    pub fn subject_images(&self) -> Vec<Image> {
        self.subject.iter().map(|s| s.image.clone()).collect()
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 4 {
            return Err(Error::Spec("image_size must be at least 4".into()));
        }
        if self.classes.is_empty() || self.fills.is_empty() || self.backgrounds.is_empty() {
            return Err(Error::Spec(
                "classes, fills and backgrounds must be non-empty".into(),
            ));
        }
        for name in self
            .fills
            .iter()
            .chain(&self.backgrounds)
            .chain([&self.subject.fill, &self.subject.background])
        {
            if color(name).is_none() {
                return Err(Error::Spec(format!("unknown colour `{name}`")));
            }
        }
        let (lo, hi) = self.radius;
        if !(0.0 < lo && lo <= hi && hi < 0.5) {
            return Err(Error::Spec(
                "radius range must satisfy 0 < lo <= hi < 0.5".into(),
            ));
        }
        if !(self.stroke.0 >= 0.0 && self.stroke.0 <= self.stroke.1) || self.jitter < 0.0 {
            return Err(Error::Spec(
                "stroke and jitter ranges must be non-negative".into(),
            ));
        }
        if !self.classes.contains(&self.subject.class) {
            return Err(Error::Spec("subject class is not in the class list".into()));
        }
        if self.subject.count == 0 {
            return Err(Error::Spec("subject needs at least one image".into()));
        }
        if self.fills.contains(&self.subject.fill) {
            return Err(Error::Spec(format!(
                "subject fill `{}` is also drawn by the generic sampler",
                self.subject.fill
            )));
        }
        Ok(())
    }

    /// Prompt vocabulary: null word first, subject word last.
    pub fn vocabulary(&self) -> Vec<String> {
        let mut words = vec![NULL_WORD.to_string(), "a".into(), "on".into()];
        words.extend(ShapeClass::ALL.iter().map(|c| c.name().to_string()));
        let mut bgs: Vec<&String> = self.backgrounds.iter().collect();
        bgs.push(&self.subject.background);
        for b in bgs {
            if !words.contains(b) {
                words.push(b.clone());
            }
        }
        words.push(SUBJECT_WORD.into());
        words
    }

    pub fn class_prompt(&self) -> String {
        format!("a {}", self.subject.class.name())
    }

    pub fn subject_prompt(&self) -> String {
        format!(
            "{SUBJECT_WORD} {} on {}",
            self.subject.class.name(),
            self.subject.background
        )
    }
}

struct Draw {
    class: ShapeClass,
    fill: [f64; 3],
    background: [f64; 3],
    cx: f64,
    cy: f64,
    r: f64,
    stroke: f64,
}

/// 4x4 supersampled rasterisation.
fn render(size: usize, d: &Draw) -> Image {
    const SS: usize = 4;
    let outline = d.fill.map(|v| 0.45 * v);
    let mut img = Image::filled(size, size, d.background);
    for y in 0..size {
        for x in 0..size {
            let mut acc = [0.0; 3];
            for sy in 0..SS {
                for sx in 0..SS {
                    let px = x as f64 + (sx as f64 + 0.5) / SS as f64;
                    let py = y as f64 + (sy as f64 + 0.5) / SS as f64;
                    let (dx, dy) = (px - d.cx, py - d.cy);
                    let rgb = if !d.class.contains(dx, dy, d.r) {
                        d.background
                    } else if d.stroke > 0.0 && !d.class.contains(dx, dy, d.r - d.stroke) {
                        outline
                    } else {
                        d.fill
                    };
                    acc.iter_mut().zip(rgb).for_each(|(a, v)| *a += v);
                }
            }
            img.set_pixel(y, x, acc.map(|a| a / (SS * SS) as f64));
        }
    }
    img
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn uniform(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    }
}

/// Deterministic corpus; each image draws from its own RNG stream.
pub fn generate_synthetic_dataset(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let n = spec.image_size as f64;
    let centre = n / 2.0;
    let mut generic = Vec::with_capacity(spec.classes.len() * spec.samples_per_class);
    for (ci, &class) in spec.classes.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let mut rng = rng_for(spec.seed, (ci * spec.samples_per_class + i) as u64);
            let fill = &spec.fills[rng.random_range(0..spec.fills.len())];
            let bg = &spec.backgrounds[rng.random_range(0..spec.backgrounds.len())];
            let d = Draw {
                class,
                fill: color(fill).expect("validated"),
                background: color(bg).expect("validated"),
                cx: centre + uniform(&mut rng, (-spec.jitter, spec.jitter)),
                cy: centre + uniform(&mut rng, (-spec.jitter, spec.jitter)),
                r: n * uniform(&mut rng, spec.radius),
                stroke: uniform(&mut rng, spec.stroke),
            };
            generic.push(Sample {
                image: render(spec.image_size, &d),
                prompt: format!("a {} on {bg}", class.name()),
                class,
            });
        }
    }
    let s = &spec.subject;
    let base = (spec.classes.len() * spec.samples_per_class) as u64;
    let subject = (0..s.count)
        .map(|i| {
            let mut rng = rng_for(spec.seed, base + i as u64);
            let d = Draw {
                class: s.class,
                fill: color(&s.fill).expect("validated"),
                background: color(&s.background).expect("validated"),
                cx: centre + uniform(&mut rng, (-1.0, 1.0)),
                cy: centre + uniform(&mut rng, (-1.0, 1.0)),
                r: n * 0.5 * (spec.radius.0 + spec.radius.1),
                stroke: s.stroke,
            };
            Sample {
                image: render(spec.image_size, &d),
                prompt: spec.subject_prompt(),
                class: s.class,
            }
        })
        .collect();
    Ok(Dataset { generic, subject })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            samples_per_class: 3,
            ..SyntheticSpec::default()
        }
    }

    #[test]
    fn deterministic() {
        let a = generate_synthetic_dataset(&small()).unwrap();
        let b = generate_synthetic_dataset(&small()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn class_histogram_matches_counts() {
        let d = generate_synthetic_dataset(&small()).unwrap();
        for c in ShapeClass::ALL {
            assert_eq!(d.generic.iter().filter(|s| s.class == c).count(), 3);
        }
        assert_eq!(d.subject.len(), 5);
    }

    #[test]
    fn subject_fill_in_generic_palette_is_rejected() {
        let mut spec = small();
        spec.fills.push("magenta".into());
        assert!(matches!(
            generate_synthetic_dataset(&spec),
            Err(Error::Spec(_))
        ));
    }

    #[test]
    fn vocabulary_has_null_first_and_subject_last() {
        let v = SyntheticSpec::default().vocabulary();
        assert_eq!(v[0], NULL_WORD);
        assert_eq!(v.last().unwrap(), SUBJECT_WORD);
    }
}
