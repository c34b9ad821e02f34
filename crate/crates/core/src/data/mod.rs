//! Samples, datasets and C-way K-shot episode sampling.
//!
//! A dataset is an immutable list of grayscale (or RGB) images with indexed
//! masks, all at a common square resolution. Episodes pick `shot` supports for
//! every class `1..=way`, each support showing its class, then
//! `queries_per_class` queries per class, all without replacement.

mod io;
mod synthetic;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numerics::{bilinear_resize, Tensor};
use crate::prototype::SegmentationMask;

pub use io::{
    load_dataset, load_dataset_resized, load_image, load_mask, overlay, save_dataset, save_image, save_mask,
    save_overlay, DatasetMeta, OVERLAY_COLORS,
};
pub use synthetic::{generate_synthetic, Crescent, ShapeLayout, SyntheticParams, CLASS_NAMES, NOISE_SIGMA};

/// Side length every sample is brought to on load.
pub const IMAGE_SIZE: usize = 224;

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    /// `[channels, H, W]`, values in `[0, 1]`.
    pub image: Tensor<f32>,
    pub mask: SegmentationMask,
    pub classes_present: BTreeSet<u8>,
}

impl Sample {
    pub fn new(id: impl Into<String>, image: Tensor<f32>, mask: SegmentationMask) -> Result<Self> {
        let id = id.into();
        let (_, h, w) = image.dims3()?;
        if (h, w) != (mask.height(), mask.width()) {
            return Err(Error::data(
                id,
                format!("image is {h}x{w}, mask is {}x{}", mask.height(), mask.width()),
            ));
        }
        if image.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::data(id, "image values must lie in [0, 1]"));
        }
        let classes_present = mask.classes_present();
        Ok(Self {
            id,
            image,
            mask,
            classes_present,
        })
    }

    pub fn channels(&self) -> usize {
        self.image.shape()[0]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    samples: Vec<Sample>,
    class_names: Vec<String>,
    /// Class id to indices of the samples that show it.
    class_index: BTreeMap<u8, Vec<usize>>,
}

impl Dataset {
    pub fn new(samples: Vec<Sample>, class_names: Vec<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::data("<dataset>", "no samples"));
        }
        if class_names.is_empty() || class_names.len() > 255 {
            return Err(Error::data("<dataset>", "between 1 and 255 classes are required"));
        }
        let channels = samples[0].channels();
        let mut ids = HashSet::new();
        let mut class_index: BTreeMap<u8, Vec<usize>> =
            (1..=class_names.len() as u8).map(|c| (c, Vec::new())).collect();
        for (i, s) in samples.iter().enumerate() {
            if !ids.insert(s.id.as_str()) {
                return Err(Error::data(&s.id, "duplicate sample id"));
            }
            if s.channels() != channels {
                return Err(Error::data(
                    &s.id,
                    format!("{} channels, expected {channels}", s.channels()),
                ));
            }
            for &c in &s.classes_present {
                class_index
                    .get_mut(&c)
                    .ok_or_else(|| {
                        Error::data(
                            &s.id,
                            format!("label {c} exceeds the {} declared classes", class_names.len()),
                        )
                    })?
                    .push(i);
            }
        }
        Ok(Self {
            samples,
            class_names,
            class_index,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn num_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn image_channels(&self) -> usize {
        self.samples[0].channels()
    }

    /// Indices of the samples showing `class_id`.
    pub fn with_class(&self, class_id: u8) -> &[usize] {
        self.class_index.get(&class_id).map_or(&[], Vec::as_slice)
    }

    pub fn class_index(&self) -> &BTreeMap<u8, Vec<usize>> {
        &self.class_index
    }
}

/// Bilinear image resize and nearest-neighbour mask resize to `size × size`.
pub fn resize_sample(
    image: &Tensor<f32>,
    mask: &SegmentationMask,
    size: usize,
) -> Result<(Tensor<f32>, SegmentationMask)> {
    let image = bilinear_resize(image, size, size)?.map(|v| v.clamp(0.0, 1.0));
    Ok((image, mask.resize_nearest(size, size)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EpisodeSpec {
    pub way: usize,
    pub shot: usize,
    pub queries_per_class: usize,
}

impl EpisodeSpec {
    pub fn new(way: usize, shot: usize) -> Self {
        Self {
            way,
            shot,
            queries_per_class: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.way == 0 || self.shot == 0 || self.queries_per_class == 0 || self.way > 255 {
            return Err(Error::Config(format!(
                "way, shot and queries per class must be positive (got {}/{}/{})",
                self.way, self.shot, self.queries_per_class
            )));
        }
        Ok(())
    }

    pub fn support_size(&self) -> usize {
        self.way * self.shot
    }

    pub fn query_size(&self) -> usize {
        self.way * self.queries_per_class
    }
}

/// One task: supports grouped by class in order `1..=way`, then queries.
#[derive(Clone, Debug, PartialEq)]
pub struct Episode<'a> {
    pub way: usize,
    pub support: Vec<(&'a Sample, u8)>,
    pub query: Vec<&'a Sample>,
}

impl Episode<'_> {
    /// Support masks with classes beyond the episode relabelled background.
    pub fn support_masks(&self) -> Vec<SegmentationMask> {
        self.support
            .iter()
            .map(|(s, _)| s.mask.restricted_to(self.way))
            .collect()
    }

    pub fn query_masks(&self) -> Vec<SegmentationMask> {
        self.query.iter().map(|s| s.mask.restricted_to(self.way)).collect()
    }
}

/// Random stream `stream` of the generator seeded by `seed`. Evaluation gives
/// every episode its own stream so episodes do not depend on each other.
pub fn episode_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Draws one episode. Classes are visited from the fewest eligible samples to
/// the most (ties by class id); each takes its supports and queries at once
/// from the samples showing it that are still unused, so a common class
/// cannot use up the samples a rarer one depends on.
pub fn sample_episode<'a, R: Rng + ?Sized>(
    dataset: &'a Dataset,
    spec: &EpisodeSpec,
    rng: &mut R,
) -> Result<Episode<'a>> {
    spec.validate()?;
    if spec.way > dataset.num_classes() {
        return Err(Error::data(
            "<dataset>",
            format!(
                "{}-way episodes need {} classes, dataset declares {}",
                spec.way,
                spec.way,
                dataset.num_classes()
            ),
        ));
    }
    let mut classes: Vec<u8> = (1..=spec.way as u8).collect();
    classes.sort_by_key(|&c| dataset.with_class(c).len());
    let per_class = spec.shot + spec.queries_per_class;
    let mut used = vec![false; dataset.len()];
    let mut drawn: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
    for class in classes {
        let eligible: Vec<usize> = dataset
            .with_class(class)
            .iter()
            .copied()
            .filter(|&i| !used[i])
            .collect();
        if eligible.len() < per_class {
            return Err(Error::data(
                "<dataset>",
                format!(
                    "class {class} has {} unused samples, episode needs {per_class}",
                    eligible.len()
                ),
            ));
        }
        let picked: Vec<usize> = index::sample(rng, eligible.len(), per_class)
            .into_iter()
            .map(|k| eligible[k])
            .collect();
        for &i in &picked {
            used[i] = true;
        }
        drawn.insert(class, picked);
    }
    let mut support = Vec::with_capacity(spec.support_size());
    let mut query = Vec::with_capacity(spec.query_size());
    for (&class, picked) in &drawn {
        let (s, q) = picked.split_at(spec.shot);
        support.extend(s.iter().map(|&i| (&dataset.samples[i], class)));
        query.extend(q.iter().map(|&i| &dataset.samples[i]));
    }
    Ok(Episode {
        way: spec.way,
        support,
        query,
    })
}
