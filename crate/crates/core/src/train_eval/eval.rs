use crate::data::{episode_rng, sample_episode, Dataset, Episode, EpisodeSpec};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::prototype::{classify_at, compute_prototypes, SegmentationMask};

/// Evaluation episodes used when none are requested.
pub const DEFAULT_EVAL_EPISODES: usize = 200;

/// Anything that turns an episode into one predicted mask per query.
pub trait EpisodePredictor {
    fn predict(&self, episode: &Episode) -> Result<Vec<SegmentationMask>>;
}

/// Prototype matching with a trained encoder, at mask resolution.
#[derive(Clone, Copy, Debug)]
pub struct PrototypePredictor<'a> {
    pub encoder: &'a Encoder<f32>,
    pub alpha: f32,
}

impl EpisodePredictor for PrototypePredictor<'_> {
    fn predict(&self, episode: &Episode) -> Result<Vec<SegmentationMask>> {
        let features = episode
            .support
            .iter()
            .map(|(s, _)| self.encoder.encode(&s.image))
            .collect::<Result<Vec<_>>>()?;
        let prototypes = compute_prototypes(&features, &episode.support_masks(), episode.way)?;
        episode
            .query
            .iter()
            .map(|q| {
                let f = self.encoder.encode(&q.image)?;
                Ok(classify_at(&f, &prototypes, self.alpha, q.mask.height(), q.mask.width())?.argmax())
            })
            .collect()
    }
}

/// Returns the query ground truth.
#[derive(Clone, Copy, Debug, Default)]
pub struct GroundTruth;

impl EpisodePredictor for GroundTruth {
    fn predict(&self, episode: &Episode) -> Result<Vec<SegmentationMask>> {
        Ok(episode.query_masks())
    }
}

/// Predicts background everywhere.
#[derive(Clone, Copy, Debug, Default)]
pub struct AllBackground;

impl EpisodePredictor for AllBackground {
    fn predict(&self, episode: &Episode) -> Result<Vec<SegmentationMask>> {
        Ok(episode
            .query
            .iter()
            .map(|q| SegmentationMask::filled(q.mask.height(), q.mask.width(), 0))
            .collect())
    }
}

fn counts(pred: &SegmentationMask, gt: &SegmentationMask, class_id: u8) -> Result<(usize, usize)> {
    if (pred.height(), pred.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "prediction is {}x{}, ground truth is {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(pred.labels().iter().zip(gt.labels()).fold((0, 0), |(i, u), (&p, &g)| {
        let (p, g) = (p == class_id, g == class_id);
        (i + (p && g) as usize, u + (p || g) as usize)
    }))
}

fn ratio(intersection: usize, union: usize) -> f64 {
    if union == 0 {
        1.0
    } else {
        intersection as f64 / union as f64
    }
}

/// Intersection over union of `class_id`; 1 when neither mask shows it.
pub fn iou(pred: &SegmentationMask, gt: &SegmentationMask, class_id: u8) -> Result<f64> {
    let (i, u) = counts(pred, gt, class_id)?;
    Ok(ratio(i, u))
}

#[derive(Clone, Debug, PartialEq)]
pub struct IoUReport {
    /// IoU of classes `1..=way`, in order.
    pub per_class: Vec<f64>,
    pub mean: f64,
    pub episodes: usize,
    pub learning_time_seconds: Option<f64>,
}

/// Mean IoU over `episodes` episodes. Each episode pools intersection and
/// union counts over its queries per class; episode IoUs are then averaged.
/// Episode `i` draws from stream `i` of `seed`, so any subset of episodes can
/// be recomputed independently.
pub fn evaluate(
    predictor: &impl EpisodePredictor,
    dataset: &Dataset,
    spec: &EpisodeSpec,
    episodes: usize,
    seed: u64,
) -> Result<IoUReport> {
    if episodes == 0 {
        return Err(Error::Config("evaluation needs at least one episode".into()));
    }
    let mut sums = vec![0.0; spec.way];
    for e in 0..episodes {
        let episode = sample_episode(dataset, spec, &mut episode_rng(seed, e as u64))?;
        let predictions = predictor.predict(&episode)?;
        let truths = episode.query_masks();
        if predictions.len() != truths.len() {
            return Err(Error::Contract(format!(
                "{} predictions for {} queries",
                predictions.len(),
                truths.len()
            )));
        }
        for (c, sum) in sums.iter_mut().enumerate() {
            let (mut i, mut u) = (0, 0);
            for (p, g) in predictions.iter().zip(&truths) {
                let (pi, pu) = counts(p, g, c as u8 + 1)?;
                i += pi;
                u += pu;
            }
            *sum += ratio(i, u);
        }
    }
    let per_class: Vec<f64> = sums.iter().map(|s| s / episodes as f64).collect();
    let mean = per_class.iter().sum::<f64>() / per_class.len() as f64;
    Ok(IoUReport {
        per_class,
        mean,
        episodes,
        learning_time_seconds: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use std::collections::HashSet;

    fn set(mask: &SegmentationMask, c: u8) -> HashSet<usize> {
        mask.labels()
            .iter()
            .enumerate()
            .filter(|(_, &l)| l == c)
            .map(|(i, _)| i)
            .collect()
    }

    #[test]
    fn analytic_cases() {
        let gt = SegmentationMask::new(2, 2, vec![1, 1, 0, 0]).unwrap();
        assert_eq!(iou(&gt, &gt, 1).unwrap(), 1.0);
        let disjoint = SegmentationMask::new(2, 2, vec![0, 0, 1, 1]).unwrap();
        assert_eq!(iou(&disjoint, &gt, 1).unwrap(), 0.0);
        let half = SegmentationMask::new(2, 2, vec![1, 0, 0, 0]).unwrap();
        assert_eq!(iou(&half, &gt, 1).unwrap(), 0.5);
        assert_eq!(iou(&gt, &gt, 2).unwrap(), 1.0);
        assert_eq!(iou(&SegmentationMask::filled(2, 2, 0), &gt, 1).unwrap(), 0.0);
        assert!(iou(&gt, &SegmentationMask::filled(3, 2, 0), 1).is_err());
    }

    #[test]
    fn matches_set_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        for _ in 0..100 {
            let a = SegmentationMask::from_fn(7, 5, |_, _| rng.random_range(0..3u8));
            let b = SegmentationMask::from_fn(7, 5, |_, _| rng.random_range(0..3u8));
            for c in 0..3 {
                let (sa, sb) = (set(&a, c), set(&b, c));
                let union = sa.union(&sb).count();
                let expected = if union == 0 {
                    1.0
                } else {
                    sa.intersection(&sb).count() as f64 / union as f64
                };
                assert_eq!(iou(&a, &b, c).unwrap(), expected);
            }
        }
    }

    #[test]
    fn oracle_predictors_bound_the_metric() {
        let data = generate_synthetic(12, 0, 96).unwrap();
        let spec = EpisodeSpec::new(2, 1);
        let perfect = evaluate(&GroundTruth, &data, &spec, 10, 0).unwrap();
        assert_eq!(perfect.mean, 1.0);
        let blank = evaluate(&AllBackground, &data, &spec, 10, 0).unwrap();
        assert_eq!(blank.per_class, vec![0.0, 0.0]);
    }

    #[test]
    fn evaluation_is_deterministic() {
        let data = generate_synthetic(12, 0, 96).unwrap();
        let enc = Encoder::build(crate::encoder::EncoderConfig::preset("tiny").unwrap(), 1).unwrap();
        let p = PrototypePredictor {
            encoder: &enc,
            alpha: 20.0,
        };
        let spec = EpisodeSpec::new(2, 1);
        let a = evaluate(&p, &data, &spec, 5, 3).unwrap();
        assert_eq!(a, evaluate(&p, &data, &spec, 5, 3).unwrap());
        assert!(a.per_class.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
