//! Image augmentation suite and dataset expansion.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::image_io::{load_png, resize_region, sample_bilinear, save_png};
use super::{derive_seed, CaptionSample, Dataset};
use crate::error::{Error, Result};
use crate::parallel::{map_indexed, Execution};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlipAxis {
    Horizontal,
    Vertical,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Transform {
    /// Exact for multiples of 90 degrees; bilinear for `|degrees| <= 45`.
    Rotate { degrees: f64 },
    Flip { axis: FlipAxis },
    /// Crops a random window of `fraction` of each side and resizes back.
    RandomCrop { fraction: f64 },
    GaussianNoise { sigma: f64 },
    ColorJitter { brightness: f64, contrast: f64, saturation: f64 },
    Sharpen { strength: f64 },
}

pub const DEFAULT_NOISE_SIGMA: f64 = 0.02;
pub const DEFAULT_CROP_FRACTION: f64 = 0.9;

const SMALL_ANGLE_LIMIT: f64 = 45.0;

impl Transform {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        match *self {
            Transform::Rotate { degrees } => {
                if !degrees.is_finite() {
                    return bad("rotation angle must be finite".into());
                }
                if quarter_turns(degrees).is_none() && degrees.abs() > SMALL_ANGLE_LIMIT {
                    return bad(format!(
                        "rotation {degrees} must be a multiple of 90 or within ±{SMALL_ANGLE_LIMIT}"
                    ));
                }
            }
            Transform::Flip { .. } => {}
            Transform::RandomCrop { fraction } => {
                if !(fraction > 0.0 && fraction <= 1.0) {
                    return bad(format!("crop fraction {fraction} outside (0, 1]"));
                }
            }
            Transform::GaussianNoise { sigma } => {
                if !(sigma >= 0.0 && sigma.is_finite()) {
                    return bad(format!("noise sigma {sigma} must be non-negative"));
                }
            }
            Transform::ColorJitter {
                brightness,
                contrast,
                saturation,
            } => {
                for (name, d) in [("brightness", brightness), ("contrast", contrast), ("saturation", saturation)] {
                    if !(0.0..1.0).contains(&d) {
                        return bad(format!("{name} jitter {d} outside [0, 1)"));
                    }
                }
            }
            Transform::Sharpen { strength } => {
                if !(strength >= 0.0 && strength.is_finite()) {
                    return bad(format!("sharpen strength {strength} must be non-negative"));
                }
            }
        }
        Ok(())
    }

    /// Lineage label, e.g. `rotate(90)` or `flip(horizontal)`.
    pub fn name(&self) -> String {
        match self {
            Transform::Rotate { degrees } => format!("rotate({degrees})"),
            Transform::Flip { axis } => match axis {
                FlipAxis::Horizontal => "flip(horizontal)".into(),
                FlipAxis::Vertical => "flip(vertical)".into(),
            },
            Transform::RandomCrop { fraction } => format!("random_crop({fraction})"),
            Transform::GaussianNoise { sigma } => format!("gaussian_noise({sigma})"),
            Transform::ColorJitter {
                brightness,
                contrast,
                saturation,
            } => format!("color_jitter({brightness},{contrast},{saturation})"),
            Transform::Sharpen { strength } => format!("sharpen({strength})"),
        }
    }

    /// The default transform list used when a plan names none.
    pub fn default_suite() -> Vec<Transform> {
        vec![
            Transform::Rotate { degrees: 90.0 },
            Transform::Flip { axis: FlipAxis::Horizontal },
            Transform::RandomCrop {
                fraction: DEFAULT_CROP_FRACTION,
            },
            Transform::GaussianNoise {
                sigma: DEFAULT_NOISE_SIGMA,
            },
            Transform::Rotate { degrees: 180.0 },
            Transform::Flip { axis: FlipAxis::Vertical },
            Transform::Rotate { degrees: 10.0 },
            Transform::ColorJitter {
                brightness: 0.1,
                contrast: 0.1,
                saturation: 0.1,
            },
            Transform::Sharpen { strength: 0.5 },
        ]
    }
}

fn quarter_turns(degrees: f64) -> Option<usize> {
    let q = degrees / 90.0;
    (q == q.round()).then(|| q.rem_euclid(4.0) as usize)
}

fn check_image(img: &Tensor) -> Result<(usize, usize)> {
    match *img.shape() {
        [h, w, 3] => Ok((h, w)),
        ref s => Err(Error::dim("augment", s, &[0, 0, 3])),
    }
}

fn clamp_unit(mut t: Tensor) -> Tensor {
    t.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    t
}

fn remap(img: &Tensor, h: usize, w: usize, src: impl Fn(usize, usize) -> (usize, usize)) -> Tensor {
    let d = img.data();
    let sw = img.shape()[1];
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = src(y, x);
            let i = (sy * sw + sx) * 3;
            out.extend_from_slice(&d[i..i + 3]);
        }
    }
    Tensor::new(vec![h, w, 3], out).expect("remap shape")
}

/// Clockwise rotation by `q` quarter turns.
fn rotate_quarter(img: &Tensor, q: usize) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    if q % 2 == 1 && h != w {
        return Err(Error::Config(format!("90-degree rotation needs a square image, got {h}x{w}")));
    }
    Ok(match q {
        0 => img.clone(),
        1 => remap(img, h, w, |y, x| (h - 1 - x, y)),
        2 => remap(img, h, w, |y, x| (h - 1 - y, w - 1 - x)),
        _ => remap(img, h, w, |y, x| (x, w - 1 - y)),
    })
}

fn rotate_small(img: &Tensor, degrees: f64) -> Result<Tensor> {
    let (h, w) = check_image(img)?;
    let (s, c) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut out = Vec::with_capacity(h * w * 3);
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sy = cy + c * dy - s * dx;
            let sx = cx + s * dy + c * dx;
            for ch in 0..3 {
                out.push(sample_bilinear(img, sy, sx, ch));
            }
        }
    }
    Tensor::new(vec![h, w, 3], out)
}

fn box_blur(img: &Tensor, h: usize, w: usize) -> Vec<f64> {
    let d = img.data();
    let mut out = vec![0.0; d.len()];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..3 {
                let mut acc = 0.0;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let yy = (y as i64 + dy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + dx).clamp(0, w as i64 - 1) as usize;
                        acc += d[(yy * w + xx) * 3 + ch];
                    }
                }
                out[(y * w + x) * 3 + ch] = acc / 9.0;
            }
        }
    }
    out
}

/// Applies one transform. Deterministic in `(transform, seed)`.
pub fn augment(img: &Tensor, transform: &Transform, seed: u64) -> Result<Tensor> {
    transform.validate()?;
    let (h, w) = check_image(img)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let out = match *transform {
        Transform::Rotate { degrees } => match quarter_turns(degrees) {
            Some(q) => rotate_quarter(img, q)?,
            None => rotate_small(img, degrees)?,
        },
        Transform::Flip { axis } => match axis {
            FlipAxis::Horizontal => remap(img, h, w, |y, x| (y, w - 1 - x)),
            FlipAxis::Vertical => remap(img, h, w, |y, x| (h - 1 - y, x)),
        },
        Transform::RandomCrop { fraction } => {
            let ch = ((h as f64 * fraction).round() as usize).clamp(1, h);
            let cw = ((w as f64 * fraction).round() as usize).clamp(1, w);
            let oy = rng.random_range(0..=h - ch);
            let ox = rng.random_range(0..=w - cw);
            resize_region(img, (oy as f64, ox as f64), (ch as f64, cw as f64), h, w)?
        }
        Transform::GaussianNoise { sigma } => {
            if sigma == 0.0 {
                return Ok(img.clone());
            }
            let normal = Normal::new(0.0, sigma).map_err(|e| Error::Config(e.to_string()))?;
            let mut t = img.clone();
            t.data_mut().iter_mut().for_each(|v| *v += normal.sample(&mut rng));
            t
        }
        Transform::ColorJitter {
            brightness,
            contrast,
            saturation,
        } => {
            let mut factor = |d: f64| if d > 0.0 { rng.random_range(-d..d) } else { 0.0 };
            let (b, c, s) = (factor(brightness), 1.0 + factor(contrast), 1.0 + factor(saturation));
            let mut t = img.clone();
            let d = t.data_mut();
            d.iter_mut().for_each(|v| *v += b);
            let mean = d.iter().sum::<f64>() / d.len() as f64;
            d.iter_mut().for_each(|v| *v = (*v - mean) * c + mean);
            for px in d.chunks_exact_mut(3) {
                let gray = 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2];
                px.iter_mut().for_each(|v| *v = gray + (*v - gray) * s);
            }
            t
        }
        Transform::Sharpen { strength } => {
            let blur = box_blur(img, h, w);
            let mut t = img.clone();
            t.data_mut()
                .iter_mut()
                .zip(blur)
                .for_each(|(v, b)| *v += strength * (*v - b));
            t
        }
    };
    Ok(clamp_unit(out))
}

/// How to expand a dataset: a multiplier and the transforms to cycle
/// through, optionally overridden per category.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentPlan {
    pub multiplier: usize,
    #[serde(default = "Transform::default_suite")]
    pub transforms: Vec<Transform>,
    #[serde(default)]
    pub per_category: BTreeMap<String, Vec<Transform>>,
}

impl Default for AugmentPlan {
    fn default() -> Self {
        Self {
            multiplier: 4,
            transforms: Transform::default_suite(),
            per_category: BTreeMap::new(),
        }
    }
}

impl AugmentPlan {
    pub fn validate(&self) -> Result<()> {
        if self.multiplier < 1 {
            return Err(Error::Config("augmentation multiplier must be at least 1".into()));
        }
        if self.multiplier > 1 && self.transforms.is_empty() {
            return Err(Error::Config("augmentation plan has no transforms".into()));
        }
        for t in self.transforms.iter().chain(self.per_category.values().flatten()) {
            t.validate()?;
        }
        if let Some((c, _)) = self.per_category.iter().find(|(_, v)| v.is_empty()) {
            return Err(Error::Config(format!("empty transform list for category {c:?}")));
        }
        Ok(())
    }

    fn transforms_for(&self, category: &str) -> &[Transform] {
        self.per_category.get(category).map_or(&self.transforms, Vec::as_slice)
    }
}

/// One derived copy: which source, which transform, which seed.
#[derive(Clone, Debug, PartialEq)]
pub struct DerivedCopy {
    pub source: usize,
    pub copy: usize,
    pub transform: Transform,
    pub seed: u64,
}

/// Lists every derived copy, source-major. Pure; no pixels touched.
pub fn plan_expansion(samples: &[CaptionSample], plan: &AugmentPlan, seed: u64) -> Result<Vec<DerivedCopy>> {
    plan.validate()?;
    let mut out = Vec::with_capacity(samples.len() * (plan.multiplier - 1));
    for (i, s) in samples.iter().enumerate() {
        let list = plan.transforms_for(&s.category);
        for k in 1..plan.multiplier {
            out.push(DerivedCopy {
                source: i,
                copy: k,
                transform: list[(i + k - 1) % list.len()].clone(),
                seed: derive_seed(seed, i as u64, k as u64),
            });
        }
    }
    Ok(out)
}

fn derived_sample(source: &CaptionSample, d: &DerivedCopy) -> CaptionSample {
    let stem = source.image.file_stem().map_or_else(|| "image".into(), |s| s.to_string_lossy().into_owned());
    let parent = source.image.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut lineage = source.lineage.clone();
    lineage.push(d.transform.name());
    CaptionSample {
        image: parent.join(format!("{stem}_aug{}.png", d.copy)),
        caption: source.caption.clone(),
        category: source.category.clone(),
        lineage,
        origin: Some(source.group_key().to_path_buf()),
    }
}

/// In-memory expansion. Output is each original followed by its copies.
pub fn expand_samples(
    items: &[(CaptionSample, Tensor)],
    plan: &AugmentPlan,
    seed: u64,
    exec: Execution,
) -> Result<Vec<(CaptionSample, Tensor)>> {
    let samples: Vec<CaptionSample> = items.iter().map(|(s, _)| s.clone()).collect();
    let copies = plan_expansion(&samples, plan, seed)?;
    let rendered = map_indexed(&copies, exec, |_, d| augment(&items[d.source].1, &d.transform, d.seed));
    let mut rendered = rendered.into_iter();
    let mut out = Vec::with_capacity(items.len() * plan.multiplier);
    let mut copies = copies.iter().peekable();
    for (i, item) in items.iter().enumerate() {
        out.push(item.clone());
        while let Some(d) = copies.next_if(|d| d.source == i) {
            let img = rendered.next().expect("one render per copy")?;
            out.push((derived_sample(&item.0, d), img));
        }
    }
    Ok(out)
}

/// Expands a dataset on disk: writes every original and derived image under
/// `out_dir` along with a new manifest and catalog.
pub fn expand_dataset(dataset: &Dataset, plan: &AugmentPlan, seed: u64, out_dir: &Path, exec: Execution) -> Result<Dataset> {
    plan.validate()?;
    let loaded = map_indexed(&dataset.samples, exec, |_, s| {
        load_png(&dataset.root.join(&s.image)).map(|img| (s.clone(), img))
    });
    let items = loaded.into_iter().collect::<Result<Vec<_>>>()?;
    let expanded = expand_samples(&items, plan, seed, exec)?;
    let written = map_indexed(&expanded, exec, |_, (s, img)| save_png(img, &out_dir.join(&s.image)));
    written.into_iter().collect::<Result<Vec<_>>>()?;
    let samples: Vec<CaptionSample> = expanded.into_iter().map(|(s, _)| s).collect();
    super::manifest::write_manifest(out_dir, &samples, &dataset.catalog)?;
    Ok(Dataset {
        root: PathBuf::from(out_dir),
        samples,
        catalog: dataset.catalog.clone(),
    })
}
