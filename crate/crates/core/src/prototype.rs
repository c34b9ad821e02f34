//! Prototype extraction and dense prototype matching.
//!
//! A class prototype is the masked average of an embedding over the cells the
//! class occupies, averaged again over every support image that shows the
//! class. Background (label 0) gets a prototype the same way, from the cells
//! no foreground class occupies. Each query cell is then scored against every
//! prototype by scaled cosine similarity and the scores go through a softmax
//! over classes.
//!
//! Masks live at image resolution and features at `1/stride` of it. Pooling
//! samples the mask at feature resolution by nearest neighbour; losses
//! bilinearly upsample the class scores to mask resolution before the softmax.
//!
//! The segmentation loss is the mean negative log-likelihood of the true label
//! over query pixels:
//!
//! ```text
//! L_seg = -(1/N) Σ_{x,y} Σ_j 1[M_q(x,y) = j] · log M̃_q;j(x,y)
//! ```
//!
//! The alignment loss runs the same pipeline in reverse: the query prediction
//! is hardened by argmax, prototypes are pooled from the query features under
//! that predicted mask, and those prototypes segment the support images. Its
//! value is the cross-entropy over all `C·K` support images and their `N`
//! pixels, normalised by `1/(C·K·N)`.

use std::collections::BTreeSet;

use crate::encoder::FeatureMap;
use crate::error::{Error, Result};
use crate::numerics::{nearest_index, Graph, Real, Tensor, Var};

/// Added to each norm in the cosine similarity so all-zero cells stay finite.
pub const COSINE_EPS: f64 = 1e-8;

/// Default multiplier applied to cosine similarities before the softmax.
pub const DEFAULT_ALPHA: f64 = 20.0;

/// Indexed label grid: 0 is background, `1..=C` are foreground classes.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height == 0 || width == 0 || labels.len() != height * width {
            return Err(Error::shape(format!(
                "{} labels do not form a {height}x{width} mask",
                labels.len()
            )));
        }
        Ok(Self { height, width, labels })
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(height > 0 && width > 0, "mask dimensions must be positive");
        let labels = (0..height * width).map(|i| f(i / width, i % width)).collect();
        Self { height, width, labels }
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self::from_fn(height, width, |_, _| label)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Foreground labels that occur in the mask.
    pub fn classes_present(&self) -> BTreeSet<u8> {
        self.labels.iter().copied().filter(|&l| l != 0).collect()
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Nearest-neighbour resampling; never invents labels.
    pub fn resize_nearest(&self, height: usize, width: usize) -> Self {
        if (height, width) == (self.height, self.width) {
            return self.clone();
        }
        Self::from_fn(height, width, |y, x| {
            self.get(
                nearest_index(y, self.height, height),
                nearest_index(x, self.width, width),
            )
        })
    }

    /// Relabels every class above `way` as background.
    pub fn restricted_to(&self, way: usize) -> Self {
        Self {
            height: self.height,
            width: self.width,
            labels: self
                .labels
                .iter()
                .map(|&l| if l as usize > way { 0 } else { l })
                .collect(),
        }
    }

    /// Binary indicator of `class_id`, sampled at `height × width` by nearest
    /// neighbour. Class 0 selects pixels outside every foreground class.
    pub fn indicator(&self, class_id: u8, height: usize, width: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(height * width);
        for y in 0..height {
            let sy = nearest_index(y, self.height, height);
            for x in 0..width {
                let sx = nearest_index(x, self.width, width);
                out.push(self.get(sy, sx) == class_id);
            }
        }
        out
    }
}

/// Uniform weights over the cells of the downsampled indicator, or `None` when
/// the class vanished.
fn pooling_weights<T: Real>(mask: &SegmentationMask, class_id: u8, height: usize, width: usize) -> Option<Vec<T>> {
    let ind = mask.indicator(class_id, height, width);
    let count = ind.iter().filter(|&&b| b).count();
    if count == 0 {
        return None;
    }
    let w = T::one() / T::of(count as f64);
    Some(ind.into_iter().map(|b| if b { w } else { T::zero() }).collect())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prototype<T> {
    pub class_id: u8,
    pub vector: Vec<T>,
}

/// One prototype per class id `0..=C`, in order.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeSet<T> {
    prototypes: Vec<Prototype<T>>,
}

impl<T: Real> PrototypeSet<T> {
    /// `vectors[c]` becomes the prototype of class `c`.
    pub fn new(vectors: Vec<Vec<T>>) -> Result<Self> {
        let Some(dim) = vectors.first().map(Vec::len) else {
            return Err(Error::Contract("a prototype set needs at least one class".into()));
        };
        if vectors.len() > 256 || vectors.iter().any(|v| v.len() != dim || v.is_empty()) {
            return Err(Error::shape("prototypes must share one positive dimension"));
        }
        Ok(Self {
            prototypes: vectors
                .into_iter()
                .enumerate()
                .map(|(c, vector)| Prototype {
                    class_id: c as u8,
                    vector,
                })
                .collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.prototypes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prototypes.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.prototypes[0].vector.len()
    }

    pub fn get(&self, class_id: u8) -> Option<&Prototype<T>> {
        self.prototypes.get(class_id as usize)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Prototype<T>> {
        self.prototypes.iter()
    }

    fn to_graph(&self, g: &mut Graph<T>) -> Vec<Var> {
        self.prototypes
            .iter()
            .map(|p| g.constant(Tensor::new(vec![p.vector.len()], p.vector.clone()).expect("non-empty")))
            .collect()
    }
}

/// Per-pixel class distribution `[C+1, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbabilityMap<T> {
    probs: Tensor<T>,
}

impl<T: Real> ProbabilityMap<T> {
    pub fn new(probs: Tensor<T>) -> Result<Self> {
        let (j, _, _) = probs.dims3()?;
        if j < 2 {
            return Err(Error::shape("a probability map needs at least two classes"));
        }
        Ok(Self { probs })
    }

    pub fn tensor(&self) -> &Tensor<T> {
        &self.probs
    }

    pub fn num_classes(&self) -> usize {
        self.probs.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.probs.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.probs.shape()[2]
    }

    pub fn prob(&self, class_id: usize, y: usize, x: usize) -> T {
        self.probs.data()[(class_id * self.height() + y) * self.width() + x]
    }

    /// Hard mask: most probable class per pixel, lowest class id on ties.
    pub fn argmax(&self) -> SegmentationMask {
        argmax_classes(&self.probs)
    }
}

pub(crate) fn argmax_classes<T: Real>(scores: &Tensor<T>) -> SegmentationMask {
    let (j, h, w) = scores.dims3().expect("class-major map");
    let plane = h * w;
    let s = scores.data();
    let labels = (0..plane)
        .map(|p| {
            let mut best = 0;
            for c in 1..j {
                if s[c * plane + p] > s[best * plane + p] {
                    best = c;
                }
            }
            best as u8
        })
        .collect();
    SegmentationMask::new(h, w, labels).expect("consistent dims")
}

fn check_mask_matches(features: &FeatureMap<impl Real>, mask: &SegmentationMask) -> Result<()> {
    let (h, w) = (features.height() * features.stride, features.width() * features.stride);
    if (mask.height(), mask.width()) != (h, w) {
        return Err(Error::shape(format!(
            "mask is {}x{}, features cover {h}x{w} input pixels",
            mask.height(),
            mask.width()
        )));
    }
    Ok(())
}

fn check_labels(mask: &SegmentationMask, way: usize) -> Result<()> {
    let max = mask.max_label() as usize;
    if max > way {
        return Err(Error::Contract(format!(
            "mask label {max} exceeds the {way} foreground classes of the episode"
        )));
    }
    Ok(())
}

/// Mean embedding over the cells where `mask` shows `class_id`.
pub fn masked_average_pool<T: Real>(features: &FeatureMap<T>, mask: &SegmentationMask, class_id: u8) -> Result<Vec<T>> {
    check_mask_matches(features, mask)?;
    let (h, w) = (features.height(), features.width());
    let weights = pooling_weights::<T>(mask, class_id, h, w).ok_or(Error::EmptyMask { class_id })?;
    Ok(features
        .tensor
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().zip(&weights).map(|(&f, &m)| f * m).sum())
        .collect())
}

/// Records prototype pooling for classes `0..=way` on `g`. A class absent
/// from every mask takes `fallback[class]` when given, and is an
/// [`Error::EmptyMask`] otherwise.
pub fn prototypes_on_graph<T: Real>(
    g: &mut Graph<T>,
    features: &[Var],
    masks: &[&SegmentationMask],
    way: usize,
    fallback: Option<&[Var]>,
) -> Result<Vec<Var>> {
    if features.len() != masks.len() || features.is_empty() {
        return Err(Error::Contract(format!(
            "{} feature maps for {} masks",
            features.len(),
            masks.len()
        )));
    }
    let mut protos = Vec::with_capacity(way + 1);
    for class in 0..=way as u8 {
        let mut pooled = Vec::new();
        for (&f, mask) in features.iter().zip(masks) {
            let (_, h, w) = g.value(f).dims3()?;
            if let Some(weights) = pooling_weights(mask, class, h, w) {
                pooled.push(g.masked_mean(f, weights)?);
            }
        }
        let proto = if pooled.is_empty() {
            match fallback {
                Some(fb) => fb[class as usize],
                None => return Err(Error::EmptyMask { class_id: class }),
            }
        } else {
            g.mean(&pooled)?
        };
        protos.push(proto);
    }
    Ok(protos)
}

/// Records `softmax(bilinear(alpha · cos(F, P)))` at `height × width` on `g`.
pub fn probabilities_on_graph<T: Real>(
    g: &mut Graph<T>,
    features: Var,
    prototypes: &[Var],
    alpha: T,
    height: usize,
    width: usize,
) -> Result<Var> {
    let scores = g.cosine_scores(features, prototypes, alpha, T::of(COSINE_EPS))?;
    let scores = g.bilinear_resize(scores, height, width)?;
    g.softmax(scores)
}

/// Records the alignment loss on `g`: prototypes pooled from the query
/// features under the argmax of `query_probs` segment each support image.
/// Classes the query prediction lost fall back to `support_prototypes`.
#[allow(clippy::too_many_arguments)]
pub fn par_loss_on_graph<T: Real>(
    g: &mut Graph<T>,
    support_features: &[Var],
    support_masks: &[&SegmentationMask],
    query_features: &[Var],
    query_probs: &[Var],
    support_prototypes: &[Var],
    way: usize,
    alpha: T,
) -> Result<Var> {
    if query_features.len() != query_probs.len() {
        return Err(Error::Contract("one probability map per query is required".into()));
    }
    let predicted: Vec<SegmentationMask> = query_probs.iter().map(|&p| argmax_classes(g.value(p))).collect();
    let predicted_refs: Vec<&SegmentationMask> = predicted.iter().collect();
    let query_protos = prototypes_on_graph(g, query_features, &predicted_refs, way, Some(support_prototypes))?;
    let mut losses = Vec::with_capacity(support_features.len());
    for (&f, mask) in support_features.iter().zip(support_masks) {
        let probs = probabilities_on_graph(g, f, &query_protos, alpha, mask.height(), mask.width())?;
        losses.push(g.nll(probs, mask.labels().to_vec())?);
    }
    g.mean(&losses)
}

/// Class prototypes from a support set: per-image masked pooling, then the
/// mean over images that show the class.
pub fn compute_prototypes<T: Real>(
    support_features: &[FeatureMap<T>],
    support_masks: &[SegmentationMask],
    way: usize,
) -> Result<PrototypeSet<T>> {
    if support_features.len() != support_masks.len() {
        return Err(Error::Contract(format!(
            "{} feature maps for {} masks",
            support_features.len(),
            support_masks.len()
        )));
    }
    for (f, m) in support_features.iter().zip(support_masks) {
        check_mask_matches(f, m)?;
        check_labels(m, way)?;
    }
    let mut g = Graph::new();
    let vars: Vec<Var> = support_features.iter().map(|f| g.constant(f.tensor.clone())).collect();
    let masks: Vec<&SegmentationMask> = support_masks.iter().collect();
    let protos = prototypes_on_graph(&mut g, &vars, &masks, way, None)?;
    PrototypeSet::new(protos.iter().map(|&p| g.value(p).data().to_vec()).collect())
}

fn check_alpha<T: Real>(alpha: T) -> Result<()> {
    if alpha <= T::zero() || !alpha.is_finite() {
        return Err(Error::Contract(format!(
            "alpha must be positive and finite, got {alpha}"
        )));
    }
    Ok(())
}

/// Class probabilities at feature resolution.
pub fn classify<T: Real>(
    features: &FeatureMap<T>,
    prototypes: &PrototypeSet<T>,
    alpha: T,
) -> Result<ProbabilityMap<T>> {
    classify_at(features, prototypes, alpha, features.height(), features.width())
}

/// Class probabilities with the scores bilinearly resampled to `height × width`
/// before the softmax.
pub fn classify_at<T: Real>(
    features: &FeatureMap<T>,
    prototypes: &PrototypeSet<T>,
    alpha: T,
    height: usize,
    width: usize,
) -> Result<ProbabilityMap<T>> {
    check_alpha(alpha)?;
    if prototypes.dim() != features.channels() {
        return Err(Error::shape(format!(
            "prototypes have {} dims, features have {} channels",
            prototypes.dim(),
            features.channels()
        )));
    }
    let mut g = Graph::new();
    let f = g.constant(features.tensor.clone());
    let protos = prototypes.to_graph(&mut g);
    let p = probabilities_on_graph(&mut g, f, &protos, alpha, height, width)?;
    ProbabilityMap::new(g.value(p).clone())
}

/// Mean negative log-probability of the ground-truth class per pixel.
pub fn segmentation_loss<T: Real>(prob_map: &ProbabilityMap<T>, gt: &SegmentationMask) -> Result<T> {
    if (prob_map.height(), prob_map.width()) != (gt.height(), gt.width()) {
        return Err(Error::shape(format!(
            "probabilities are {}x{}, mask is {}x{}",
            prob_map.height(),
            prob_map.width(),
            gt.height(),
            gt.width()
        )));
    }
    let j = prob_map.num_classes();
    let plane = gt.height() * gt.width();
    let p = prob_map.tensor().data();
    let mut total = T::zero();
    for (px, &label) in gt.labels().iter().enumerate() {
        if label as usize >= j {
            return Err(Error::shape(format!("label {label} outside {j} classes")));
        }
        total -= p[label as usize * plane + px].ln();
    }
    Ok(total / T::of(plane as f64))
}

/// Alignment loss from precomputed query probabilities.
pub fn par_loss<T: Real>(
    support_features: &[FeatureMap<T>],
    support_masks: &[SegmentationMask],
    query_features: &[FeatureMap<T>],
    query_probs: &[ProbabilityMap<T>],
    way: usize,
    alpha: T,
) -> Result<T> {
    check_alpha(alpha)?;
    for (f, m) in support_features.iter().zip(support_masks) {
        check_mask_matches(f, m)?;
        check_labels(m, way)?;
    }
    let mut g = Graph::new();
    let sf: Vec<Var> = support_features.iter().map(|f| g.constant(f.tensor.clone())).collect();
    let qf: Vec<Var> = query_features.iter().map(|f| g.constant(f.tensor.clone())).collect();
    let qp: Vec<Var> = query_probs.iter().map(|p| g.constant(p.tensor().clone())).collect();
    let masks: Vec<&SegmentationMask> = support_masks.iter().collect();
    let support_protos = prototypes_on_graph(&mut g, &sf, &masks, way, None)?;
    let loss = par_loss_on_graph(&mut g, &sf, &masks, &qf, &qp, &support_protos, way, alpha)?;
    Ok(g.value(loss).item())
}

/// `seg + par`, rejecting non-finite terms.
pub fn total_loss<T: Real>(seg: T, par: T) -> Result<T> {
    if !seg.is_finite() || !par.is_finite() {
        return Err(Error::numerical(format!("non-finite loss term (seg {seg}, par {par})")));
    }
    Ok(seg + par)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn feature_map(d: usize, h: usize, w: usize, stride: usize, rng: &mut ChaCha8Rng) -> FeatureMap<f64> {
        FeatureMap::new(Tensor::from_fn(&[d, h, w], |_| rng.random_range(-1.0..1.0)), stride).unwrap()
    }

    fn quadrant_mask(h: usize, w: usize, labels: [u8; 4]) -> SegmentationMask {
        SegmentationMask::from_fn(h, w, |y, x| labels[2 * (y * 2 / h) + x * 2 / w])
    }

    #[test]
    fn pooling_a_constant_map_returns_the_constant() {
        let v = [0.5, -1.0, 2.0];
        let f = FeatureMap::new(Tensor::from_fn(&[3, 4, 4], |i| v[i / 16]), 2).unwrap();
        let mask = quadrant_mask(8, 8, [0, 1, 1, 2]);
        for class in 0..=2 {
            assert_eq!(masked_average_pool(&f, &mask, class).unwrap(), v);
        }
    }

    #[test]
    fn pooling_a_full_mask_is_the_global_average() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let f = feature_map(4, 3, 5, 1, &mut rng);
        let pooled = masked_average_pool(&f, &SegmentationMask::filled(3, 5, 1), 1).unwrap();
        for (d, p) in pooled.iter().enumerate() {
            let mean = f.tensor.data()[d * 15..(d + 1) * 15].iter().sum::<f64>() / 15.0;
            assert!((p - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn pooling_selects_indicated_cells() {
        // 2×2 grid of vectors a b / c d; class 1 covers the left column
        let (a, b, c, d) = ([1.0, 2.0], [10.0, 20.0], [3.0, 5.0], [-7.0, 0.0]);
        let data = vec![a[0], b[0], c[0], d[0], a[1], b[1], c[1], d[1]];
        let f = FeatureMap::new(Tensor::new(vec![2, 2, 2], data).unwrap(), 1).unwrap();
        let mask = SegmentationMask::new(2, 2, vec![1, 0, 1, 0]).unwrap();
        assert_eq!(masked_average_pool(&f, &mask, 1).unwrap(), vec![2.0, 3.5]);
        assert_eq!(masked_average_pool(&f, &mask, 0).unwrap(), vec![1.5, 10.0]);
    }

    #[test]
    fn pooling_an_absent_class_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = feature_map(2, 2, 2, 4, &mut rng);
        // class 2 occupies pixels the nearest-neighbour sampling never visits
        let mask = SegmentationMask::from_fn(8, 8, |y, x| if y == 0 && x == 0 { 2 } else { 1 });
        assert!(matches!(
            masked_average_pool(&f, &mask, 2),
            Err(Error::EmptyMask { class_id: 2 })
        ));
        assert!(matches!(
            masked_average_pool(&f, &mask, 0),
            Err(Error::EmptyMask { class_id: 0 })
        ));
        let wrong_res = SegmentationMask::filled(4, 4, 1);
        assert!(matches!(masked_average_pool(&f, &wrong_res, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn one_shot_prototypes_equal_single_image_pooling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = feature_map(3, 4, 4, 2, &mut rng);
        let m = quadrant_mask(8, 8, [0, 1, 2, 1]);
        let set = compute_prototypes(std::slice::from_ref(&f), std::slice::from_ref(&m), 2).unwrap();
        for c in 0..=2u8 {
            assert_eq!(set.get(c).unwrap().vector, masked_average_pool(&f, &m, c).unwrap());
            assert_eq!(set.get(c).unwrap().class_id, c);
        }
    }

    #[test]
    fn repeated_supports_do_not_change_prototypes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = feature_map(3, 4, 4, 2, &mut rng);
        let m = quadrant_mask(8, 8, [0, 1, 2, 1]);
        let one = compute_prototypes(&[f.clone()], &[m.clone()], 2).unwrap();
        let five = compute_prototypes(&vec![f; 5], &vec![m; 5], 2).unwrap();
        for (a, b) in one.iter().zip(five.iter()) {
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn two_shot_prototypes_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<_> = (0..4).map(|_| feature_map(5, 4, 4, 2, &mut rng)).collect();
        let masks: Vec<_> = (0..4)
            .map(|_| SegmentationMask::from_fn(8, 8, |_, _| rng.random_range(0..3u8)))
            .collect();
        let set = compute_prototypes(&feats, &masks, 2).unwrap();
        for class in 0..=2u8 {
            let mut sum = vec![0.0; 5];
            let mut images = 0;
            for (f, m) in feats.iter().zip(&masks) {
                let mut acc = vec![0.0; 5];
                let mut n = 0;
                for y in 0..4 {
                    for x in 0..4 {
                        if m.get(2 * y + 1, 2 * x + 1) == class {
                            n += 1;
                            for d in 0..5 {
                                acc[d] += f.tensor.data()[(d * 4 + y) * 4 + x];
                            }
                        }
                    }
                }
                if n > 0 {
                    images += 1;
                    for d in 0..5 {
                        sum[d] += acc[d] / n as f64;
                    }
                }
            }
            for d in 0..5 {
                let expected = sum[d] / images as f64;
                assert!((set.get(class).unwrap().vector[d] - expected).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn absent_support_class_is_reported() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = feature_map(2, 2, 2, 1, &mut rng);
        let m = SegmentationMask::new(2, 2, vec![0, 1, 1, 0]).unwrap();
        assert!(matches!(
            compute_prototypes(&[f.clone()], &[m.clone()], 2),
            Err(Error::EmptyMask { class_id: 2 })
        ));
        let m3 = SegmentationMask::new(2, 2, vec![0, 1, 3, 0]).unwrap();
        assert!(matches!(compute_prototypes(&[f], &[m3], 2), Err(Error::Contract(_))));
    }

    #[test]
    fn classify_matching_prototype_takes_the_softmax_of_alpha() {
        let p1 = vec![1.0, 2.0, 0.0];
        let p0 = vec![-2.0, 1.0, 5.0]; // orthogonal to p1
        let f = FeatureMap::new(Tensor::from_fn(&[3, 2, 3], |i| p1[i / 6]), 1).unwrap();
        let set = PrototypeSet::new(vec![p0, p1]).unwrap();
        let probs = classify(&f, &set, 20.0).unwrap();
        let expected = 1.0 / (1.0 + (-20.0f64).exp());
        for y in 0..2 {
            for x in 0..3 {
                assert!((probs.prob(1, y, x) - expected).abs() < 1e-9);
                assert!((probs.prob(1, y, x) - 0.999999998).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn identical_prototypes_split_probability_evenly() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let f = feature_map(4, 3, 3, 1, &mut rng);
        let p = vec![0.3, -0.1, 0.8, 0.2];
        let set = PrototypeSet::new(vec![p.clone(), p]).unwrap();
        let probs = classify(&f, &set, 20.0).unwrap();
        assert!(probs.tensor().data().iter().all(|v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn classify_is_scale_invariant_in_the_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = feature_map(4, 5, 5, 1, &mut rng);
        let set = PrototypeSet::new(
            (0..3)
                .map(|_| (0..4).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap();
        let base = classify(&f, &set, 20.0).unwrap().argmax();
        for scale in [0.01, 3.0, 250.0] {
            let scaled = FeatureMap::new(f.tensor.map(|v| v * scale), 1).unwrap();
            assert_eq!(classify(&scaled, &set, 20.0).unwrap().argmax(), base);
        }
    }

    #[test]
    fn probability_maps_are_normalised() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = feature_map(6, 4, 4, 2, &mut rng);
        let set = PrototypeSet::new(
            (0..3)
                .map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap();
        let probs = classify_at(&f, &set, 20.0, 8, 8).unwrap();
        assert_eq!((probs.height(), probs.width()), (8, 8));
        for px in 0..64 {
            let s: f64 = (0..3).map(|c| probs.tensor().data()[c * 64 + px]).sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
        assert!(probs.tensor().data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn classify_rejects_bad_inputs() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let f = feature_map(4, 2, 2, 1, &mut rng);
        let set = PrototypeSet::new(vec![vec![1.0; 3], vec![0.5; 3]]).unwrap();
        assert!(matches!(classify(&f, &set, 20.0), Err(Error::Shape(_))));
        let ok = PrototypeSet::new(vec![vec![1.0; 4], vec![0.5; 4]]).unwrap();
        assert!(classify(&f, &ok, 0.0).is_err());
    }

    fn prob_map(classes: &[Vec<f64>], h: usize, w: usize) -> ProbabilityMap<f64> {
        let data = classes.iter().flatten().copied().collect();
        ProbabilityMap::new(Tensor::new(vec![classes.len(), h, w], data).unwrap()).unwrap()
    }

    #[test]
    fn segmentation_loss_examples() {
        let gt = SegmentationMask::new(1, 2, vec![1, 0]).unwrap();
        let perfect = prob_map(&[vec![0.0, 1.0], vec![1.0, 0.0]], 1, 2);
        assert_eq!(segmentation_loss(&perfect, &gt).unwrap(), 0.0);

        let uniform = prob_map(&[vec![1.0 / 3.0; 2], vec![1.0 / 3.0; 2], vec![1.0 / 3.0; 2]], 1, 2);
        assert!((segmentation_loss(&uniform, &gt).unwrap() - 3f64.ln()).abs() < 1e-12);

        let half = prob_map(&[vec![0.5], vec![0.5]], 1, 1);
        let one = SegmentationMask::new(1, 1, vec![1]).unwrap();
        assert!((segmentation_loss(&half, &one).unwrap() - 2f64.ln()).abs() < 1e-12);

        let wrong = SegmentationMask::filled(2, 2, 0);
        assert!(matches!(segmentation_loss(&perfect, &wrong), Err(Error::Shape(_))));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert_eq!(total_loss(0.5, 0.25).unwrap(), 0.75);
        assert_eq!(total_loss(0.4, 0.0).unwrap(), 0.4);
        assert!(matches!(total_loss(f64::NAN, 0.0), Err(Error::Numerical { .. })));
        assert!(total_loss(0.1, f64::INFINITY).is_err());
    }

    #[test]
    fn par_loss_is_ln2_when_supports_are_ambiguous() {
        // zero support features give cosine 0 against every prototype
        let zero = FeatureMap::new(Tensor::zeros(&[2, 1, 2]), 1).unwrap();
        let mask = SegmentationMask::new(1, 2, vec![1, 0]).unwrap();
        let query = FeatureMap::new(Tensor::new(vec![2, 1, 1], vec![1.0, 0.0]).unwrap(), 1).unwrap();
        let qprobs = prob_map(&[vec![0.2], vec![0.8]], 1, 1);
        let loss = par_loss(
            &[zero.clone(), zero],
            &[mask.clone(), mask],
            &[query],
            &[qprobs],
            1,
            20.0,
        )
        .unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn par_loss_vanishes_when_query_prototypes_separate_supports() {
        let bg = [1.0, 0.0, 0.0];
        let c1 = [0.0, 1.0, 0.0];
        let c2 = [0.0, 0.0, 1.0];
        let cells = |v: [[f64; 3]; 4]| FeatureMap::new(Tensor::from_fn(&[3, 2, 2], |i| v[i % 4][i / 4]), 1).unwrap();
        let support = cells([bg, c1, c2, c1]);
        let mask = SegmentationMask::new(2, 2, vec![0, 1, 2, 1]).unwrap();
        let query = cells([c2, bg, c1, bg]);
        let protos = compute_prototypes(&[support.clone()], &[mask.clone()], 2).unwrap();
        let qprobs = classify(&query, &protos, 50.0).unwrap();
        let loss = par_loss(&[support], &[mask], &[query], &[qprobs], 2, 50.0).unwrap();
        assert!(loss < 1e-12, "{loss}");
    }

    fn cosine(a: &[f64], b: &[f64]) -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        dot / ((na + COSINE_EPS) * (nb + COSINE_EPS))
    }

    fn cell(f: &FeatureMap<f64>, y: usize, x: usize) -> Vec<f64> {
        let (h, w) = (f.height(), f.width());
        (0..f.channels())
            .map(|d| f.tensor.data()[(d * h + y) * w + x])
            .collect()
    }

    /// Direct transcription of the alignment loss at stride 1.
    fn par_loss_oracle(
        supports: &[FeatureMap<f64>],
        masks: &[SegmentationMask],
        query: &FeatureMap<f64>,
        query_probs: &ProbabilityMap<f64>,
        way: usize,
        alpha: f64,
    ) -> f64 {
        let (h, w, d) = (query.height(), query.width(), query.channels());
        let predicted = query_probs.argmax();
        let support_protos = compute_prototypes(supports, masks, way).unwrap();
        let protos: Vec<Vec<f64>> = (0..=way)
            .map(|c| {
                let mut acc = vec![0.0; d];
                let mut n = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        if predicted.get(y, x) as usize == c {
                            n += 1.0;
                            for (a, v) in acc.iter_mut().zip(cell(query, y, x)) {
                                *a += v;
                            }
                        }
                    }
                }
                if n == 0.0 {
                    support_protos.get(c as u8).unwrap().vector.clone()
                } else {
                    acc.iter().map(|a| a / n).collect()
                }
            })
            .collect();
        let mut total = 0.0;
        let mut count = 0.0;
        for (f, m) in supports.iter().zip(masks) {
            for y in 0..f.height() {
                for x in 0..f.width() {
                    let v = cell(f, y, x);
                    let logits: Vec<f64> = protos.iter().map(|p| alpha * cosine(&v, p)).collect();
                    let z: f64 = logits.iter().map(|l| l.exp()).sum();
                    for (j, l) in logits.iter().enumerate() {
                        if m.get(y, x) as usize == j {
                            total -= (l.exp() / z).ln();
                        }
                    }
                    count += 1.0;
                }
            }
        }
        total / count
    }

    #[test]
    fn par_loss_matches_direct_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..6 {
            let way = 1 + trial % 2;
            let shot = 1 + trial / 3;
            let feats: Vec<_> = (0..way * shot).map(|_| feature_map(4, 5, 5, 1, &mut rng)).collect();
            let masks: Vec<_> = (0..way * shot)
                .map(|i| {
                    let mut m = SegmentationMask::from_fn(5, 5, |_, _| rng.random_range(0..=way as u8));
                    // every class present at least once per image
                    for c in 0..=way {
                        m.labels[c + 5 * (i % 3)] = c as u8;
                    }
                    m
                })
                .collect();
            let query = feature_map(4, 5, 5, 1, &mut rng);
            let protos = compute_prototypes(&feats, &masks, way).unwrap();
            let qprobs = classify(&query, &protos, 20.0).unwrap();
            let got = par_loss(
                &feats,
                &masks,
                std::slice::from_ref(&query),
                std::slice::from_ref(&qprobs),
                way,
                20.0,
            )
            .unwrap();
            let expected = par_loss_oracle(&feats, &masks, &query, &qprobs, way, 20.0);
            assert!((got - expected).abs() < 1e-10, "trial {trial}: {got} vs {expected}");
        }
    }

    #[test]
    fn segmentation_loss_matches_direct_transcription() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let f = feature_map(3, 4, 4, 1, &mut rng);
        let set = PrototypeSet::new(
            (0..3)
                .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect(),
        )
        .unwrap();
        let gt = SegmentationMask::from_fn(4, 4, |_, _| rng.random_range(0..3u8));
        let probs = classify(&f, &set, 20.0).unwrap();
        let mut expected = 0.0;
        for y in 0..4 {
            for x in 0..4 {
                let v = cell(&f, y, x);
                let logits: Vec<f64> = set.iter().map(|p| 20.0 * cosine(&v, &p.vector)).collect();
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                for (j, l) in logits.iter().enumerate() {
                    if gt.get(y, x) as usize == j {
                        expected -= (l.exp() / z).ln();
                    }
                }
            }
        }
        expected /= 16.0;
        assert!((segmentation_loss(&probs, &gt).unwrap() - expected).abs() < 1e-10);
    }

    #[test]
    fn nearest_mask_resizing_keeps_label_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let m = SegmentationMask::from_fn(9, 13, |_, _| [0u8, 2][rng.random_range(0..2)]);
        for (h, w) in [(4, 4), (20, 7), (1, 1)] {
            let r = m.resize_nearest(h, w);
            assert!(r.labels().iter().all(|l| [0u8, 2].contains(l)));
        }
        assert_eq!(m.resize_nearest(9, 13), m);
    }

    #[test]
    fn restricting_drops_higher_classes() {
        let m = SegmentationMask::new(1, 4, vec![0, 1, 2, 3]).unwrap();
        assert_eq!(m.restricted_to(1).labels(), &[0, 1, 0, 0]);
        assert_eq!(m.classes_present(), BTreeSet::from([1, 2, 3]));
    }
}
