//! Dataset manifest, vocabulary, augmentation and the synthetic corpus.

pub mod augment;
pub mod image_io;
pub mod manifest;
pub mod synth;
pub mod vocab;

use std::collections::BTreeMap;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::prompt::PromptCatalog;

/// One (image, caption, category) triple with provenance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CaptionSample {
    /// Relative to the dataset root.
    pub image: PathBuf,
    pub caption: String,
    pub category: String,
    /// Transforms applied to derive this sample, oldest first.
    pub lineage: Vec<String>,
    /// Original image this sample was derived from, when augmented.
    pub origin: Option<PathBuf>,
}

impl CaptionSample {
    pub fn new(image: impl Into<PathBuf>, caption: impl Into<String>, category: impl Into<String>) -> Self {
        Self {
            image: image.into(),
            caption: caption.into(),
            category: category.into(),
            lineage: Vec::new(),
            origin: None,
        }
    }

    /// Key shared by an original image and all of its augmented copies.
    pub fn group_key(&self) -> &std::path::Path {
        self.origin.as_deref().unwrap_or(&self.image)
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub samples: Vec<CaptionSample>,
    pub catalog: PromptCatalog,
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// 80/10/10 split by seeded shuffle of original-image groups, so augmented
/// copies always land in the same partition as their source.
pub fn split_dataset(samples: &[CaptionSample], seed: u64) -> Split {
    let mut groups: BTreeMap<&std::path::Path, Vec<usize>> = BTreeMap::new();
    for (i, s) in samples.iter().enumerate() {
        groups.entry(s.group_key()).or_default().push(i);
    }
    let mut keys: Vec<_> = groups.keys().copied().collect();
    keys.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let g = keys.len();
    let n_train = ((g as f64) * 0.8).round() as usize;
    let n_val = ((g as f64) * 0.1).round() as usize;
    let mut split = Split::default();
    for (rank, key) in keys.into_iter().enumerate() {
        let bucket = if rank < n_train {
            &mut split.train
        } else if rank < n_train + n_val {
            &mut split.val
        } else {
            &mut split.test
        };
        bucket.extend(&groups[key]);
    }
    for b in [&mut split.train, &mut split.val, &mut split.test] {
        b.sort_unstable();
    }
    split
}

/// SplitMix64 finalizer, used to derive independent per-item seeds.
pub fn derive_seed(seed: u64, a: u64, b: u64) -> u64 {
    let mut z = seed
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
