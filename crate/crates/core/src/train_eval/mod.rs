//! Episodic training, IoU evaluation, checkpoints and report export.
//!
//! Training runs one episode per SGD step: encode the supports and queries,
//! pool prototypes from the supports, segment the queries, and add the
//! alignment loss (prototypes pooled from the predicted query masks segmenting
//! the supports) unless it is disabled.

mod checkpoint;
mod eval;
mod report;

use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{sample_episode, Dataset, Episode, EpisodeSpec};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::numerics::{sgd_step, zero_grad, Graph, Real, Tensor, Var};
use crate::prototype::{par_loss_on_graph, probabilities_on_graph, prototypes_on_graph, DEFAULT_ALPHA};

pub use checkpoint::{
    load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CheckpointMeta, CHECKPOINT_MAGIC,
    CHECKPOINT_VERSION,
};
pub use eval::{
    evaluate, iou, AllBackground, EpisodePredictor, GroundTruth, IoUReport, PrototypePredictor, DEFAULT_EVAL_EPISODES,
};
pub use report::{
    export_loss_csv, export_report, format_duration, method_name, read_report, render_table, scenario_name, ReportRow,
    LOSS_CSV_HEADER, REPORT_CSV_HEADER,
};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub momentum: f64,
    pub episode: EpisodeSpec,
    pub alpha: f64,
    pub par_enabled: bool,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 2000,
            lr: 1e-3,
            momentum: 0.9,
            episode: EpisodeSpec::new(2, 1),
            alpha: DEFAULT_ALPHA,
            par_enabled: true,
            seed: 0,
            log_every: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.episode.validate()?;
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if self.log_every == 0 {
            return Err(Error::Config("log_every must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub iteration: usize,
    pub seg_loss: f32,
    pub par_loss: f32,
    pub total_loss: f32,
    pub elapsed_seconds: f64,
}

/// Loss curve, one row per logged iteration in increasing order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsLog {
    rows: Vec<LogRow>,
}

impl MetricsLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, row: LogRow) -> Result<()> {
        if self.rows.last().is_some_and(|last| last.iteration >= row.iteration) {
            return Err(Error::Contract(format!(
                "iteration {} logged out of order",
                row.iteration
            )));
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn rows(&self) -> &[LogRow] {
        &self.rows
    }

    pub fn first(&self) -> Option<&LogRow> {
        self.rows.first()
    }

    pub fn last(&self) -> Option<&LogRow> {
        self.rows.last()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub log: MetricsLog,
    /// Wall-clock seconds spent in the training loop.
    pub learning_time_seconds: f64,
}

/// Loss terms of one episode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpisodeLosses<T> {
    pub seg: T,
    pub par: T,
    pub total: T,
}

struct EpisodeGraph {
    seg: Var,
    par: Option<Var>,
    total: Var,
}

fn image_var<T: Real>(g: &mut Graph<T>, image: &Tensor<f32>) -> Var {
    g.constant(image.cast())
}

/// Records an episode's forward pass and losses on `g`.
fn record_episode<T: Real>(
    g: &mut Graph<T>,
    encoder: &Encoder<T>,
    episode: &Episode,
    alpha: T,
    par_enabled: bool,
) -> Result<EpisodeGraph> {
    let vars = encoder.register(g);
    let mut support_features = Vec::with_capacity(episode.support.len());
    for (s, _) in &episode.support {
        let x = image_var(g, &s.image);
        support_features.push(encoder.forward(g, &vars, x)?);
    }
    let mut query_features = Vec::with_capacity(episode.query.len());
    for q in &episode.query {
        let x = image_var(g, &q.image);
        query_features.push(encoder.forward(g, &vars, x)?);
    }
    let support_masks = episode.support_masks();
    let query_masks = episode.query_masks();
    let masks: Vec<_> = support_masks.iter().collect();
    let protos = prototypes_on_graph(g, &support_features, &masks, episode.way, None)?;

    let mut query_probs = Vec::with_capacity(query_features.len());
    let mut nlls = Vec::with_capacity(query_features.len());
    for (&f, mask) in query_features.iter().zip(&query_masks) {
        let p = probabilities_on_graph(g, f, &protos, alpha, mask.height(), mask.width())?;
        nlls.push(g.nll(p, mask.labels().to_vec())?);
        query_probs.push(p);
    }
    let seg = g.mean(&nlls)?;
    let (par, total) = if par_enabled {
        let par = par_loss_on_graph(
            g,
            &support_features,
            &masks,
            &query_features,
            &query_probs,
            &protos,
            episode.way,
            alpha,
        )?;
        (Some(par), g.add(seg, par)?)
    } else {
        (None, seg)
    };
    Ok(EpisodeGraph { seg, par, total })
}

fn loss_values<T: Real>(g: &Graph<T>, eg: &EpisodeGraph) -> EpisodeLosses<T> {
    EpisodeLosses {
        seg: g.value(eg.seg).item(),
        par: eg.par.map_or(T::zero(), |p| g.value(p).item()),
        total: g.value(eg.total).item(),
    }
}

/// Loss terms of `episode` under `encoder`, without gradients.
pub fn episode_losses<T: Real>(
    encoder: &Encoder<T>,
    episode: &Episode,
    alpha: T,
    par_enabled: bool,
) -> Result<EpisodeLosses<T>> {
    let mut g = Graph::new();
    let eg = record_episode(&mut g, encoder, episode, alpha, par_enabled)?;
    Ok(loss_values(&g, &eg))
}

/// Loss terms of `episode`, with the gradient of the total loss added to the
/// encoder parameters' `grad` fields.
pub fn episode_gradients<T: Real>(
    encoder: &mut Encoder<T>,
    episode: &Episode,
    alpha: T,
    par_enabled: bool,
) -> Result<EpisodeLosses<T>> {
    let mut g = Graph::new();
    let eg = record_episode(&mut g, encoder, episode, alpha, par_enabled)?;
    let losses = loss_values(&g, &eg);
    if !losses.total.is_finite() {
        return Err(Error::numerical(format!(
            "non-finite loss (seg {}, par {})",
            losses.seg, losses.par
        )));
    }
    g.backward(eg.total, encoder.params_mut())?;
    Ok(losses)
}

/// Trains `encoder` in place; see [`train_with_observer`].
pub fn train(encoder: &mut Encoder<f32>, dataset: &Dataset, config: &TrainConfig) -> Result<TrainOutcome> {
    train_with_observer(encoder, dataset, config, |_| {})
}

/// Trains `encoder` in place, calling `observe` for every logged row. Rows are
/// logged at iteration 1, every `log_every` iterations and at the last one.
pub fn train_with_observer(
    encoder: &mut Encoder<f32>,
    dataset: &Dataset,
    config: &TrainConfig,
    mut observe: impl FnMut(&LogRow),
) -> Result<TrainOutcome> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut log = MetricsLog::new();
    let alpha = config.alpha as f32;
    zero_grad(encoder.params_mut());
    let start = Instant::now();
    for iteration in 1..=config.iterations {
        let at = |e: Error| match e {
            Error::Numerical { reason, .. } => Error::Numerical {
                iteration: Some(iteration),
                reason,
            },
            other => other,
        };
        let episode = sample_episode(dataset, &config.episode, &mut rng)?;
        let losses = episode_gradients(encoder, &episode, alpha, config.par_enabled).map_err(at)?;
        sgd_step(encoder.params_mut(), config.lr as f32, config.momentum as f32);
        if encoder.params().iter().any(|p| !p.value.all_finite()) {
            return Err(at(Error::numerical("parameters became non-finite")));
        }
        if iteration == 1 || iteration % config.log_every == 0 || iteration == config.iterations {
            let row = LogRow {
                iteration,
                seg_loss: losses.seg,
                par_loss: losses.par,
                total_loss: losses.total,
                elapsed_seconds: start.elapsed().as_secs_f64(),
            };
            observe(&row);
            log.push(row)?;
        }
    }
    Ok(TrainOutcome {
        log,
        learning_time_seconds: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic;
    use crate::encoder::EncoderConfig;

    fn tiny() -> Encoder<f32> {
        Encoder::build(EncoderConfig::preset("tiny").unwrap(), 0).unwrap()
    }

    fn config(iterations: usize) -> TrainConfig {
        TrainConfig {
            iterations,
            log_every: 1,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn one_iteration_updates_every_layer() {
        let data = generate_synthetic(8, 0, 96).unwrap();
        let mut enc = tiny();
        let before = enc.clone();
        let out = train(&mut enc, &data, &config(1)).unwrap();
        assert_eq!(out.log.rows().len(), 1);
        for (a, b) in enc.params().iter().zip(before.params()).step_by(2) {
            assert_ne!(a.value, b.value);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let data = generate_synthetic(8, 0, 96).unwrap();
        let run = || {
            let mut enc = tiny();
            let log = train(&mut enc, &data, &config(3)).unwrap().log;
            (
                enc,
                log.rows()
                    .iter()
                    .map(|r| (r.seg_loss, r.par_loss, r.total_loss))
                    .collect::<Vec<_>>(),
            )
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn log_rows_are_additive_and_par_off_logs_zero() {
        let data = generate_synthetic(8, 1, 96).unwrap();
        let mut enc = tiny();
        for row in train(&mut enc, &data, &config(3)).unwrap().log.rows() {
            assert!((row.total_loss - (row.seg_loss + row.par_loss)).abs() <= 1e-6);
        }
        let mut enc = tiny();
        let cfg = TrainConfig {
            par_enabled: false,
            ..config(3)
        };
        assert!(train(&mut enc, &data, &cfg)
            .unwrap()
            .log
            .rows()
            .iter()
            .all(|r| r.par_loss == 0.0));
    }

    #[test]
    fn log_schedule() {
        let data = generate_synthetic(6, 2, 96).unwrap();
        let mut enc = tiny();
        let cfg = TrainConfig {
            iterations: 7,
            log_every: 3,
            ..TrainConfig::default()
        };
        let its: Vec<usize> = train(&mut enc, &data, &cfg)
            .unwrap()
            .log
            .rows()
            .iter()
            .map(|r| r.iteration)
            .collect();
        assert_eq!(its, vec![1, 3, 6, 7]);
    }

    #[test]
    fn invalid_config_is_rejected() {
        for cfg in [
            TrainConfig {
                iterations: 0,
                ..TrainConfig::default()
            },
            TrainConfig {
                lr: 0.0,
                ..TrainConfig::default()
            },
            TrainConfig {
                momentum: 1.0,
                ..TrainConfig::default()
            },
        ] {
            assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        }
    }

    #[test]
    fn metrics_log_rejects_unordered_rows() {
        let row = |iteration| LogRow {
            iteration,
            seg_loss: 0.0,
            par_loss: 0.0,
            total_loss: 0.0,
            elapsed_seconds: 0.0,
        };
        let mut log = MetricsLog::new();
        log.push(row(2)).unwrap();
        assert!(log.push(row(2)).is_err());
        assert!(log.push(row(1)).is_err());
    }
}
