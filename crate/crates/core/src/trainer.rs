//! Pair sampling, Adam updates and the epoch loop.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GinError, Result};
use crate::exec::Exec;
use crate::loss::{LossBreakdown, LossConfig};
use crate::model::{loss_and_gradients, DropoutPlan, GinModel, Gradients, ImageSample, PairBatch};
use crate::numfmt::g9;
use crate::text_graph::{ClassId, TextGraph, TextSample};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub q1: usize,
    pub q2: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub total_pos: usize,
    pub total_neg: usize,
    /// Write a checkpoint every this many epochs (0: only at the end).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 200,
            q1: 100,
            q2: 100,
            epochs: 50,
            learning_rate: 0.001,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 42,
            total_pos: 40_000,
            total_neg: 40_000,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.q1 + self.q2 != self.batch_size {
            return Err(GinError::Config(format!(
                "train.q1 + train.q2 must equal train.batch_size ({} + {} != {})",
                self.q1, self.q2, self.batch_size
            )));
        }
        if self.q1 < 2 || self.q2 < 2 {
            return Err(GinError::Config(
                "train.q1 and train.q2 must be >= 2".into(),
            ));
        }
        if self.learning_rate < 0.0 || !self.learning_rate.is_finite() {
            return Err(GinError::Config("train.learning_rate must be >= 0".into()));
        }
        for (name, b) in [
            ("adam_beta1", self.adam_beta1),
            ("adam_beta2", self.adam_beta2),
        ] {
            if !(0.0..1.0).contains(&b) {
                return Err(GinError::Config(format!("train.{name} must be in [0, 1)")));
            }
        }
        if self.adam_eps.is_nan() || self.adam_eps <= 0.0 {
            return Err(GinError::Config("train.adam_eps must be > 0".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

/// First/second moment accumulators mirroring the model's tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(model: &GinModel) -> Self {
        let zeros: Vec<Vec<f64>> = model
            .params()
            .iter()
            .map(|p| vec![0.0; p.data.len()])
            .collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update.
///
/// Entries whose gradient is exactly zero keep their value; their moments
/// still decay. Any non-finite gradient aborts the step before anything is
/// modified.
pub fn adam_step(
    model: &mut GinModel,
    grads: &Gradients,
    state: &mut AdamState,
    hp: &AdamParams,
) -> Result<()> {
    let gp = grads.params();
    if gp.len() != state.m.len() {
        return Err(GinError::dim("Adam state tensors", state.m.len(), gp.len()));
    }
    for (p, m) in gp.iter().zip(&state.m) {
        if p.data.len() != m.len() {
            return Err(GinError::dim(
                format!("Adam state for {}", p.name),
                m.len(),
                p.data.len(),
            ));
        }
        if let Some(i) = p.data.iter().position(|g| !g.is_finite()) {
            return Err(GinError::Numeric(format!(
                "non-finite gradient in {} at index {i}",
                p.name
            )));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for (((param, g), m), v) in model
        .params_mut()
        .into_iter()
        .zip(gp.iter())
        .zip(state.m.iter_mut())
        .zip(state.v.iter_mut())
    {
        for i in 0..param.len() {
            let gi = g.data[i];
            m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * gi;
            v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * gi * gi;
            if gi == 0.0 {
                continue;
            }
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            param[i] -= hp.lr * m_hat / (v_hat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

/// Matching and non-matching `(text index, image index)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct PairPool {
    pub positive: Vec<(usize, usize)>,
    pub negative: Vec<(usize, usize)>,
}

/// Samples `total_pos` same-class and `total_neg` different-class pairs
/// uniformly with replacement: a text is drawn uniformly, then an image
/// uniformly among those with the same (resp. a different) label.
pub fn build_pair_pool(
    texts: &[TextSample],
    images: &[ImageSample],
    total_pos: usize,
    total_neg: usize,
    seed: u64,
) -> Result<PairPool> {
    if total_pos < 2 || total_neg < 2 {
        return Err(GinError::Config(format!(
            "pair pool needs at least 2 positive and 2 negative pairs, requested {total_pos} and {total_neg}"
        )));
    }
    let mut by_class: BTreeMap<ClassId, (usize, Vec<usize>)> = BTreeMap::new();
    for t in texts {
        by_class.entry(t.label).or_default().0 += 1;
    }
    for (i, img) in images.iter().enumerate() {
        by_class.entry(img.label).or_default().1.push(i);
    }
    let missing: Vec<String> = by_class
        .iter()
        .filter(|(_, (nt, imgs))| *nt == 0 || imgs.is_empty())
        .map(|(c, (nt, imgs))| format!("class {c} ({nt} texts, {} images)", imgs.len()))
        .collect();
    if !missing.is_empty() {
        return Err(GinError::Data(format!(
            "every class needs at least one text and one image: {}",
            missing.join(", ")
        )));
    }
    if by_class.len() < 2 {
        return Err(GinError::Data(
            "non-matching pairs need at least two classes".into(),
        ));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positive = (0..total_pos)
        .map(|_| {
            let t = rng.random_range(0..texts.len());
            let same = &by_class[&texts[t].label].1;
            (t, same[rng.random_range(0..same.len())])
        })
        .collect();
    let others: BTreeMap<ClassId, Vec<usize>> = by_class
        .keys()
        .map(|&c| {
            let v = (0..images.len())
                .filter(|&i| images[i].label != c)
                .collect();
            (c, v)
        })
        .collect();
    let negative = (0..total_neg)
        .map(|_| {
            let t = rng.random_range(0..texts.len());
            let other = &others[&texts[t].label];
            (t, other[rng.random_range(0..other.len())])
        })
        .collect();
    Ok(PairPool { positive, negative })
}

/// Receives training progress.
pub trait ProgressSink {
    fn on_batch(&mut self, epoch: usize, batch: usize, loss: &LossBreakdown) -> Result<()>;

    fn on_epoch_end(&mut self, _epoch: usize, _model: &GinModel) -> Result<()> {
        Ok(())
    }
}

/// Discards everything.
pub struct NullSink;

impl ProgressSink for NullSink {
    fn on_batch(&mut self, _: usize, _: usize, _: &LossBreakdown) -> Result<()> {
        Ok(())
    }
}

/// Keeps every batch breakdown in memory.
#[derive(Debug, Default)]
pub struct MemorySink {
    pub records: Vec<(usize, usize, LossBreakdown)>,
}

impl ProgressSink for MemorySink {
    fn on_batch(&mut self, epoch: usize, batch: usize, loss: &LossBreakdown) -> Result<()> {
        self.records.push((epoch, batch, *loss));
        Ok(())
    }
}

/// `epoch batch u+ u- var+ var- hinge total`, space separated.
pub fn progress_line(epoch: usize, batch: usize, b: &LossBreakdown) -> String {
    format!(
        "{epoch} {batch} {} {} {} {} {} {}",
        g9(b.u_plus),
        g9(b.u_minus),
        g9(b.var_plus),
        g9(b.var_minus),
        g9(b.hinge),
        g9(b.total)
    )
}

/// Writes one [`progress_line`] per batch.
pub struct LineSink<W: Write> {
    out: W,
}

impl<W: Write> LineSink<W> {
    pub fn new(out: W) -> Self {
        LineSink { out }
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

impl<W: Write> ProgressSink for LineSink<W> {
    fn on_batch(&mut self, epoch: usize, batch: usize, loss: &LossBreakdown) -> Result<()> {
        writeln!(self.out, "{}", progress_line(epoch, batch, loss))
            .map_err(|e| GinError::io("progress log", e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: GinModel,
    /// Mean total loss per epoch.
    pub epoch_loss: Vec<f64>,
    pub steps: u64,
}

/// Mini-batch training. Each epoch reshuffles both halves of the pool and
/// walks them sequentially, `q1` matching and `q2` non-matching pairs per
/// batch.
#[allow(clippy::too_many_arguments)]
pub fn train(
    mut model: GinModel,
    graph: &TextGraph,
    texts: &[TextSample],
    images: &[ImageSample],
    pool: &PairPool,
    cfg: &TrainConfig,
    loss_cfg: &LossConfig,
    exec: Exec,
    sink: &mut dyn ProgressSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let per_epoch = (pool.positive.len() / cfg.q1).min(pool.negative.len() / cfg.q2);
    if per_epoch == 0 {
        return Err(GinError::Config(format!(
            "pair pool ({} positive, {} negative) is smaller than one batch ({} + {})",
            pool.positive.len(),
            pool.negative.len(),
            cfg.q1,
            cfg.q2
        )));
    }
    let hp = cfg.adam();
    let mut state = AdamState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut pos = pool.positive.clone();
    let mut neg = pool.negative.clone();
    let mut epoch_loss = Vec::with_capacity(cfg.epochs);
    let mut step = 0u64;

    for epoch in 0..cfg.epochs {
        pos.shuffle(&mut rng);
        neg.shuffle(&mut rng);
        let mut sum = 0.0;
        for b in 0..per_epoch {
            let pairs = pos[b * cfg.q1..(b + 1) * cfg.q1]
                .iter()
                .map(|&(t, i)| (t, i, true))
                .chain(
                    neg[b * cfg.q2..(b + 1) * cfg.q2]
                        .iter()
                        .map(|&(t, i)| (t, i, false)),
                )
                .collect();
            let batch = PairBatch::new(pairs)?;
            let dropout = DropoutPlan::On {
                base: cfg.seed,
                step,
            };
            let (breakdown, grads) = loss_and_gradients(
                &model, graph, texts, images, &batch, loss_cfg, dropout, exec,
            )
            .map_err(|e| match e {
                GinError::Numeric(msg) => {
                    GinError::Numeric(format!("epoch {epoch} batch {b}: {msg}"))
                }
                other => other,
            })?;
            if !breakdown.is_finite() {
                return Err(GinError::Numeric(format!(
                    "non-finite loss at epoch {epoch} batch {b}: u+ {} u- {} var+ {} var- {} total {}",
                    breakdown.u_plus,
                    breakdown.u_minus,
                    breakdown.var_plus,
                    breakdown.var_minus,
                    breakdown.total
                )));
            }
            sink.on_batch(epoch, b, &breakdown)?;
            adam_step(&mut model, &grads, &mut state, &hp)?;
            sum += breakdown.total;
            step += 1;
        }
        epoch_loss.push(sum / per_epoch as f64);
        log::info!("epoch {epoch}: mean loss {}", g9(sum / per_epoch as f64));
        sink.on_epoch_end(epoch, &model)?;
    }
    Ok(TrainOutcome {
        model,
        epoch_loss,
        steps: step,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, ModelDims};

    fn text(label: ClassId, id: usize) -> TextSample {
        TextSample::from_dense(format!("t{id}"), label, &[1.0, 0.0, 2.0]).unwrap()
    }

    fn image(label: ClassId, id: usize) -> ImageSample {
        ImageSample {
            img_id: format!("i{id}"),
            label,
            features: vec![label as f64, 1.0],
        }
    }

    fn scalar_model() -> GinModel {
        let cfg = ModelConfig {
            conv1_channels: 1,
            conv2_channels: 1,
            common_dim: 1,
            ..ModelConfig::default()
        };
        GinModel::zeros(
            &cfg,
            ModelDims {
                vocab_size: 1,
                image_dim: 1,
                graph_k: 1,
            },
        )
        .unwrap()
    }

    #[test]
    fn pool_labels_are_correct() {
        let texts: Vec<_> = (0..4).map(|i| text(i / 2, i)).collect();
        let images: Vec<_> = (0..4).map(|i| image(i / 2, i)).collect();
        let pool = build_pair_pool(&texts, &images, 8, 8, 3).unwrap();
        assert_eq!(pool.positive.len(), 8);
        assert_eq!(pool.negative.len(), 8);
        for &(t, i) in &pool.positive {
            assert_eq!(texts[t].label, images[i].label);
        }
        for &(t, i) in &pool.negative {
            assert_ne!(texts[t].label, images[i].label);
        }
        assert_eq!(pool, build_pair_pool(&texts, &images, 8, 8, 3).unwrap());
        assert_ne!(pool, build_pair_pool(&texts, &images, 8, 8, 4).unwrap());
    }

    #[test]
    fn pool_errors() {
        let texts: Vec<_> = (0..4).map(|i| text(i / 2, i)).collect();
        let images: Vec<_> = (0..4).map(|i| image(i / 2, i)).collect();
        assert!(build_pair_pool(&texts, &images, 8, 0, 1).is_err());

        let mut lonely = texts.clone();
        lonely.push(text(7, 9));
        let err = build_pair_pool(&lonely, &images, 8, 8, 1).unwrap_err();
        assert!(err.to_string().contains("class 7"), "{err}");

        let one_class: Vec<_> = (0..4).map(|i| text(0, i)).collect();
        let one_class_img: Vec<_> = (0..4).map(|i| image(0, i)).collect();
        assert!(build_pair_pool(&one_class, &one_class_img, 8, 8, 1).is_err());
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut m = scalar_model();
        m.score_fc.weight = vec![0.7];
        let mut state = AdamState::new(&m);
        let mut g = m.zeros_like();
        g.score_fc.weight = vec![1.0];
        let hp = TrainConfig::default().adam();
        adam_step(&mut m, &g, &mut state, &hp).unwrap();
        let before = m.clone();
        let m_before = state.m.clone();
        let zero = m.zeros_like();
        adam_step(&mut m, &zero, &mut state, &hp).unwrap();
        assert_eq!(m, before);
        let idx = m
            .params()
            .iter()
            .position(|p| p.name == "score_fc.weight")
            .unwrap();
        assert!(state.m[idx][0].abs() < m_before[idx][0].abs());
        assert_eq!(state.step, 2);
    }

    #[test]
    fn constant_gradient_update_approaches_lr() {
        // Scalar simulation: with a constant gradient the bias-corrected
        // moments are exactly g and g^2, so every step is lr * g / (|g| + eps).
        let hp = TrainConfig::default().adam();
        let mut m = scalar_model();
        let mut state = AdamState::new(&m);
        let mut g = m.zeros_like();
        g.score_fc.bias = vec![0.37];
        let mut last = 0.0;
        for _ in 0..100 {
            let before = m.score_fc.bias[0];
            adam_step(&mut m, &g, &mut state, &hp).unwrap();
            last = before - m.score_fc.bias[0];
        }
        assert!(last > 0.0);
        assert!((0.9 * hp.lr..=hp.lr).contains(&last), "{last}");
    }

    #[test]
    fn identical_histories_identical_trajectories() {
        let hp = TrainConfig::default().adam();
        let mut m = scalar_model();
        let mut state = AdamState::new(&m);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let mut g = m.zeros_like();
            let v: f64 = rng.random_range(-1.0..1.0);
            g.score_fc.bias = vec![v];
            g.score_fc.weight = vec![v];
            adam_step(&mut m, &g, &mut state, &hp).unwrap();
            assert_eq!(m.score_fc.bias[0], m.score_fc.weight[0]);
        }
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut m = scalar_model();
        let mut state = AdamState::new(&m);
        let mut g = m.zeros_like();
        g.image_fc.bias = vec![f64::NAN];
        let err = adam_step(&mut m, &g, &mut state, &TrainConfig::default().adam()).unwrap_err();
        assert!(err.to_string().contains("image_fc.bias"));
        assert_eq!(state.step, 0);
    }

    #[test]
    fn config_validation() {
        let bad = TrainConfig {
            q1: 50,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        let bad = TrainConfig {
            batch_size: 3,
            q1: 1,
            q2: 2,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(TrainConfig::default().validate().is_ok());
    }

    #[test]
    fn progress_line_format() {
        let b = LossBreakdown {
            u_plus: 0.5,
            u_minus: 0.25,
            var_plus: 0.0,
            var_minus: 0.125,
            hinge: 0.35,
            l2_term: 0.0,
            total: 0.2475,
        };
        assert_eq!(progress_line(3, 7, &b), "3 7 0.5 0.25 0 0.125 0.35 0.2475");
    }
}
