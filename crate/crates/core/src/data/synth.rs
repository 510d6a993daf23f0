//! Procedural corpus: one shape and hue per category, one background shade
//! per caption template, so the caption is a function of the image.

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::image_io::save_png;
use super::manifest::write_manifest;
use super::{derive_seed, CaptionSample, Dataset};
use crate::error::{Error, Result};
use crate::parallel::{map_range, Execution};
use crate::prompt::PromptCatalog;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Disk,
    Square,
    Triangle,
    Diamond,
    Ring,
    Cross,
    Bars,
}

impl Shape {
    /// Membership test in shape-local coordinates scaled to `[-1, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        let r2 = u * u + v * v;
        match self {
            Shape::Disk => r2 <= 1.0,
            Shape::Square => u.abs() <= 0.85 && v.abs() <= 0.85,
            Shape::Triangle => (-0.9..=0.9).contains(&v) && u.abs() <= (v + 0.9) / 1.8,
            Shape::Diamond => u.abs() + v.abs() <= 1.0,
            Shape::Ring => (0.3..=1.0).contains(&r2),
            Shape::Cross => (u.abs() <= 0.35 && v.abs() <= 1.0) || (v.abs() <= 0.35 && u.abs() <= 1.0),
            Shape::Bars => u.abs() <= 1.0 && v.abs() <= 1.0 && ((v + 1.0) * 2.5).floor() as i64 % 2 == 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthCategory {
    pub label: String,
    /// Subject/action text used in the prompt.
    pub text: String,
    pub shape: Shape,
    /// Hue in degrees.
    pub hue: f64,
    pub captions: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    pub resolution: usize,
    pub per_category: usize,
    /// When set, overrides `per_category` and assigns sample `i` to category `i mod k`.
    #[serde(default)]
    pub total_samples: Option<usize>,
    /// Uniform per-pixel noise amplitude.
    pub noise: f64,
    pub categories: Vec<SynthCategory>,
}

/// Background gray level for caption template `t`.
pub const BACKGROUND_SHADES: [f64; 4] = [0.12, 0.37, 0.62, 0.87];

fn category(label: &str, text: &str, shape: Shape, index: usize, captions: &[&str]) -> SynthCategory {
    SynthCategory {
        label: label.into(),
        text: text.into(),
        shape,
        hue: index as f64 * 360.0 / 7.0,
        captions: captions.iter().map(|c| c.to_string()).collect(),
    }
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            resolution: 32,
            per_category: 8,
            total_samples: None,
            noise: 0.03,
            categories: vec![
                category("deity", "a deity", Shape::Disk, 0, &[
                    "a deity sits on a lotus throne",
                    "the deity raises one hand in blessing",
                    "a crowned deity watches over the altar",
                ]),
                category("ghost", "a ghost", Shape::Triangle, 1, &[
                    "a ghost dances among red flames",
                    "the ghost of the underworld bares its teeth",
                    "a hungry ghost wanders near the gate",
                ]),
                category("beast", "a sacred beast", Shape::Square, 2, &[
                    "a yak beast guards the sacred altar",
                    "the white crane beast carries a message",
                ]),
                category("flora", "sacred flora", Shape::Diamond, 3, &[
                    "flora with green leaves climbs the scroll",
                    "sacred flora blooms beside the river",
                ]),
                category("fishing", "horseback riding and fishing", Shape::Bars, 4, &[
                    "a man casts a net while fishing in the river",
                    "riders return from fishing on horseback",
                    "fishing boats drift under the moon",
                ]),
                category("music", "music and dance", Shape::Ring, 5, &[
                    "dancers move to music from the flute",
                    "a drum keeps the music of the ritual",
                    "music and dance fill the festival",
                ]),
                category("pattern", "a religious pattern", Shape::Cross, 6, &[
                    "a pattern of the endless knot brings harmony",
                    "the vase pattern signals good fortune",
                    "twin fish form a pattern of freedom",
                    "a lotus pattern frames the scroll",
                ]),
            ],
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::Config(format!("synthetic resolution {} below 8", self.resolution)));
        }
        if self.categories.is_empty() {
            return Err(Error::Config("synthetic corpus needs at least one category".into()));
        }
        if !(0.0..0.1).contains(&self.noise) {
            return Err(Error::Config(format!("synthetic noise {} outside [0, 0.1)", self.noise)));
        }
        for c in &self.categories {
            if !(1..=BACKGROUND_SHADES.len()).contains(&c.captions.len()) {
                return Err(Error::Config(format!(
                    "category {:?} needs 1 to {} caption templates",
                    c.label,
                    BACKGROUND_SHADES.len()
                )));
            }
            let term = c.label.to_lowercase();
            if let Some(bad) = c.captions.iter().find(|t| !crate::metrics::tokenize(t).contains(&term)) {
                return Err(Error::Config(format!("caption {bad:?} does not mention {term:?}")));
            }
        }
        self.catalog().map(|_| ())
    }

    pub fn catalog(&self) -> Result<PromptCatalog> {
        PromptCatalog::new(
            self.categories.iter().map(|c| c.label.clone()).collect(),
            self.categories.iter().map(|c| c.text.clone()).collect(),
        )
    }

    pub fn sample_count(&self) -> usize {
        self.total_samples.unwrap_or(self.per_category * self.categories.len())
    }

    /// `(category, index within category)` of sample `i`.
    fn assignment(&self, i: usize) -> (usize, usize) {
        match self.total_samples {
            Some(_) => (i % self.categories.len(), i / self.categories.len()),
            None => (i / self.per_category, i % self.per_category),
        }
    }
}

pub fn hsv_to_rgb(hue: f64, s: f64, v: f64) -> [f64; 3] {
    let h = hue.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Renders one image: background shade from `template`, the category's shape
/// in its hue at a jittered position, plus uniform noise.
pub fn render(config: &SynthConfig, cat: &SynthCategory, template: usize, seed: u64) -> Tensor {
    let r = config.resolution;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let radius = r as f64 * 0.3;
    let slack = r as f64 / 2.0 - radius - 1.0;
    let cy = r as f64 / 2.0 + rng.random_range(-slack..=slack);
    let cx = r as f64 / 2.0 + rng.random_range(-slack..=slack);
    let fg = hsv_to_rgb(cat.hue, 0.8, 0.9);
    let bg = BACKGROUND_SHADES[template % BACKGROUND_SHADES.len()];
    let mut data = Vec::with_capacity(r * r * 3);
    for y in 0..r {
        for x in 0..r {
            let u = (x as f64 + 0.5 - cx) / radius;
            let v = (y as f64 + 0.5 - cy) / radius;
            let inside = cat.shape.contains(u, v);
            for &f in &fg {
                let base = if inside { f } else { bg };
                let n = if config.noise > 0.0 {
                    rng.random_range(-config.noise..config.noise)
                } else {
                    0.0
                };
                data.push((base + n).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![r, r, 3], data).expect("render shape")
}

/// Generates samples and images in memory. Pure and deterministic in `seed`.
pub fn generate(config: &SynthConfig, seed: u64, exec: Execution) -> Result<(Vec<(CaptionSample, Tensor)>, PromptCatalog)> {
    config.validate()?;
    let catalog = config.catalog()?;
    let items = map_range(config.sample_count(), exec, |i| {
        let (c, j) = config.assignment(i);
        let cat = &config.categories[c];
        let t = j % cat.captions.len();
        let img = render(config, cat, t, derive_seed(seed, c as u64, j as u64));
        let sample = CaptionSample::new(format!("images/{}_{j:03}.png", cat.label), cat.captions[t].clone(), cat.label.clone());
        (sample, img)
    });
    Ok((items, catalog))
}

/// Generates the corpus and writes images, `manifest.jsonl` and `catalog.json`.
pub fn generate_synthetic_corpus(config: &SynthConfig, seed: u64, out_dir: &Path, exec: Execution) -> Result<Dataset> {
    let (items, catalog) = generate(config, seed, exec)?;
    let written = crate::parallel::map_indexed(&items, exec, |_, (s, img)| save_png(img, &out_dir.join(&s.image)));
    written.into_iter().collect::<Result<Vec<_>>>()?;
    let samples: Vec<CaptionSample> = items.into_iter().map(|(s, _)| s).collect();
    write_manifest(out_dir, &samples, &catalog)?;
    Ok(Dataset {
        root: out_dir.to_path_buf(),
        samples,
        catalog,
    })
}

/// Mean colour projected on the plane orthogonal to gray.
pub fn chroma(img: &Tensor) -> [f64; 2] {
    let n = (img.numel() / 3) as f64;
    let mut m = [0.0; 3];
    for px in img.data().chunks_exact(3) {
        for c in 0..3 {
            m[c] += px[c] / n;
        }
    }
    [(m[0] - m[1]) / 2f64.sqrt(), (m[0] + m[1] - 2.0 * m[2]) / 6f64.sqrt()]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_and_catalog() {
        let cfg = SynthConfig::default();
        let (items, catalog) = generate(&cfg, 1, Execution::Sequential).unwrap();
        assert_eq!(items.len(), 56);
        assert_eq!(catalog.len(), 7);
        for (s, img) in &items {
            assert_eq!(img.shape(), &[32, 32, 3]);
            assert!(crate::metrics::tokenize(&s.caption).contains(&s.category));
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn deterministic_and_order_independent() {
        let cfg = SynthConfig {
            total_samples: Some(20),
            ..SynthConfig::default()
        };
        let a = generate(&cfg, 4, Execution::Sequential).unwrap();
        let b = generate(&cfg, 4, Execution::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.0.len(), 20);
        assert_eq!(a.0[8].0.category, "ghost");
        assert_ne!(a.0, generate(&cfg, 5, Execution::Sequential).unwrap().0);
    }

    #[test]
    fn caption_determined_by_category_and_background() {
        let cfg = SynthConfig::default();
        let (items, _) = generate(&cfg, 2, Execution::Sequential).unwrap();
        for (s, img) in &items {
            let cat = cfg.categories.iter().find(|c| c.label == s.category).unwrap();
            let t = cat.captions.iter().position(|c| *c == s.caption).unwrap();
            let corner = img.data()[0];
            assert!((corner - BACKGROUND_SHADES[t]).abs() <= cfg.noise + 1e-12);
        }
    }

    #[test]
    fn rejects_caption_without_term() {
        let mut cfg = SynthConfig::default();
        cfg.categories[0].captions.push("no subject here".into());
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [1.0, 0.0, 0.0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0.0, 1.0, 0.0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0.0, 0.0, 1.0]);
    }
}
