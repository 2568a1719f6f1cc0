//! Central finite-difference check of the analytic batch gradient, reported
//! per parameter tensor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{GinError, Result};
use crate::exec::Exec;
use crate::loss::LossConfig;
use crate::model::{
    loss_and_gradients, DropoutPlan, GinModel, ImageSample, ModelConfig, ModelDims, PairBatch,
    ScoreMode,
};
use crate::numfmt::g9;
use crate::text_graph::{EmbeddingTable, TextGraph, TextSample, Vocabulary};

/// Problem size and perturbation of the self-contained check.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckSpec {
    pub vertices: usize,
    pub graph_k: usize,
    pub cheb_order: usize,
    pub conv1_channels: usize,
    pub conv2_channels: usize,
    pub common_dim: usize,
    pub image_dim: usize,
    pub image_hidden: Vec<usize>,
    pub score_mode: ScoreMode,
    pub dropout: f64,
    pub q1: usize,
    pub q2: usize,
    pub step: f64,
    pub seed: u64,
}

impl Default for GradCheckSpec {
    fn default() -> Self {
        GradCheckSpec {
            vertices: 12,
            graph_k: 3,
            cheb_order: 3,
            conv1_channels: 4,
            conv2_channels: 4,
            common_dim: 4,
            image_dim: 6,
            image_hidden: Vec::new(),
            score_mode: ScoreMode::Hadamard,
            dropout: 0.2,
            q1: 4,
            q2: 4,
            step: 1e-5,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupResult {
    pub name: String,
    pub entries: usize,
    /// `|analytic - numeric| / max(|analytic|, |numeric|)` over the tensor
    /// (Euclidean norms); 0 when both are zero.
    pub rel_error: f64,
    pub max_abs_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupResult>,
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.rel_error < tol)
    }

    pub fn worst(&self) -> f64 {
        self.groups.iter().map(|g| g.rel_error).fold(0.0, f64::max)
    }

    /// `name entries rel_error max_abs_error PASS|FAIL` per tensor.
    pub fn lines(&self, tol: f64) -> Vec<String> {
        self.groups
            .iter()
            .map(|g| {
                format!(
                    "{} {} {} {} {}",
                    g.name,
                    g.entries,
                    g9(g.rel_error),
                    g9(g.max_abs_error),
                    if g.rel_error < tol { "PASS" } else { "FAIL" }
                )
            })
            .collect()
    }
}

/// Compares [`loss_and_gradients`] with central differences of the same
/// objective. Dropout masks depend only on `dropout`, so they are identical
/// across the perturbed evaluations.
#[allow(clippy::too_many_arguments)]
pub fn check_gradients(
    model: &GinModel,
    graph: &TextGraph,
    texts: &[TextSample],
    images: &[ImageSample],
    batch: &PairBatch,
    loss_cfg: &LossConfig,
    dropout: DropoutPlan,
    step: f64,
) -> Result<GradCheckReport> {
    if step.is_nan() || step <= 0.0 {
        return Err(GinError::InvalidArgument(format!(
            "step must be > 0, got {step}"
        )));
    }
    let exec = Exec::SEQUENTIAL;
    let (_, grads) =
        loss_and_gradients(model, graph, texts, images, batch, loss_cfg, dropout, exec)?;
    let names: Vec<String> = model.params().into_iter().map(|p| p.name).collect();
    let analytic: Vec<Vec<f64>> = grads
        .params()
        .into_iter()
        .map(|p| p.data.to_vec())
        .collect();

    let mut probe = model.clone();
    let objective = |m: &GinModel| -> Result<f64> {
        Ok(
            loss_and_gradients(m, graph, texts, images, batch, loss_cfg, dropout, exec)?
                .0
                .total,
        )
    };
    let mut groups = Vec::with_capacity(names.len());
    for (g, name) in names.into_iter().enumerate() {
        let len = analytic[g].len();
        let mut numeric = vec![0.0; len];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = probe.params_mut()[g][e];
            probe.params_mut()[g][e] = orig + step;
            let up = objective(&probe)?;
            probe.params_mut()[g][e] = orig - step;
            let down = objective(&probe)?;
            probe.params_mut()[g][e] = orig;
            *slot = (up - down) / (2.0 * step);
        }
        let a = &analytic[g];
        let diff = a
            .iter()
            .zip(&numeric)
            .map(|(x, y)| (x - y).powi(2))
            .sum::<f64>()
            .sqrt();
        let scale = norm(a).max(norm(&numeric));
        groups.push(GroupResult {
            name,
            entries: len,
            rel_error: if scale == 0.0 { 0.0 } else { diff / scale },
            max_abs_error: a
                .iter()
                .zip(&numeric)
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max),
        });
    }
    Ok(GradCheckReport { groups })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Builds a random graph, corpus and model (with non-zero biases) of the
/// given size and checks every parameter tensor.
pub fn run_gradcheck(spec: &GradCheckSpec, loss_cfg: &LossConfig) -> Result<GradCheckReport> {
    if spec.q1 < 2 || spec.q2 < 2 {
        return Err(GinError::Config(
            "gradcheck needs q1 >= 2 and q2 >= 2".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.vertices;
    let emb = EmbeddingTable::new(
        5,
        (0..n)
            .map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect(),
    )?;
    let vocab = Vocabulary::new((0..n).map(|i| format!("w{i}")).collect(), vec![1; n])?;
    let graph = TextGraph::build(vocab, &emb, spec.graph_k, Exec::SEQUENTIAL)?;

    let pairs = spec.q1 + spec.q2;
    let texts: Vec<TextSample> = (0..pairs)
        .map(|t| {
            let dense: Vec<f64> = (0..n)
                .map(|_| {
                    if rng.random_bool(0.5) {
                        rng.random_range(1..4) as f64
                    } else {
                        0.0
                    }
                })
                .collect();
            TextSample::from_dense(format!("t{t}"), t % 2, &dense)
        })
        .collect::<Result<_>>()?;
    let images: Vec<ImageSample> = (0..pairs)
        .map(|i| ImageSample {
            img_id: format!("i{i}"),
            label: i % 2,
            features: (0..spec.image_dim)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        })
        .collect();
    let batch = PairBatch::new(
        (0..pairs)
            .map(|p| (p, (p + 1) % pairs, p < spec.q1))
            .collect(),
    )?;
    let config = ModelConfig {
        cheb_order: spec.cheb_order,
        conv1_channels: spec.conv1_channels,
        conv2_channels: spec.conv2_channels,
        common_dim: spec.common_dim,
        dropout: spec.dropout,
        score_mode: spec.score_mode,
        image_hidden: spec.image_hidden.clone(),
        init_seed: spec.seed,
    };
    let mut model = GinModel::init(
        &config,
        ModelDims {
            vocab_size: n,
            image_dim: spec.image_dim,
            graph_k: spec.graph_k,
        },
    )?;
    // Zero biases put dead-input units exactly on a ReLU kink.
    let bias_slots: Vec<bool> = model
        .params()
        .iter()
        .map(|p| p.name.ends_with(".bias"))
        .collect();
    for (t, is_bias) in model.params_mut().into_iter().zip(bias_slots) {
        if is_bias {
            t.iter_mut().for_each(|b| *b = rng.random_range(-0.1..0.1));
        }
    }
    let dropout = DropoutPlan::On {
        base: spec.seed,
        step: 0,
    };
    check_gradients(
        &model, &graph, &texts, &images, &batch, loss_cfg, dropout, spec.step,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_tiny_model_passes() {
        let r = run_gradcheck(&GradCheckSpec::default(), &LossConfig::default()).unwrap();
        assert_eq!(r.groups.len(), 10);
        assert!(r.passes(1e-4), "{:#?}", r.groups);
        assert!(!r.passes(0.0) || r.worst() == 0.0);
    }

    #[test]
    fn hidden_image_layers_and_scalar_scorer_pass() {
        let spec = GradCheckSpec {
            image_hidden: vec![3, 5],
            score_mode: ScoreMode::Scalar,
            seed: 5,
            ..GradCheckSpec::default()
        };
        let r = run_gradcheck(&spec, &LossConfig::default()).unwrap();
        assert!(r.passes(1e-4), "{:#?}", r.groups);
    }

    #[test]
    fn deterministic() {
        let spec = GradCheckSpec::default();
        let a = run_gradcheck(&spec, &LossConfig::default()).unwrap();
        let b = run_gradcheck(&spec, &LossConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_lines() {
        let r = GradCheckReport {
            groups: vec![GroupResult {
                name: "score_fc.bias".into(),
                entries: 1,
                rel_error: 2e-5,
                max_abs_error: 1e-9,
            }],
        };
        assert_eq!(r.lines(1e-4), vec!["score_fc.bias 1 2e-05 1e-09 PASS"]);
        assert_eq!(r.lines(1e-5), vec!["score_fc.bias 1 2e-05 1e-09 FAIL"]);
        assert!(!r.passes(0.0));
    }
}
