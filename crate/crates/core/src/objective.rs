//! The combined training objective and its gradient with respect to every
//! trainable quantity: network, attention branches, and class centers.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{attend_batch, elementwise_backward, AttentionMode, AttentionOutput, AttentionParams};
use crate::centers::ClassCenters;
use crate::error::{Error, Result};
use crate::losses::{amtc3l, ce_loss, multitask, tc3l_fixed, LossBreakdown, MetricOutput};
use crate::model::{backward, forward_with, Batch, ForwardTrace, ModelConfig, ModelParams, Upstream};
use crate::nss::NegativeAssignment;
use crate::numeric::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum MarginMode {
    /// Attention-derived per-sample margin, no hinge.
    #[default]
    Adaptive,
    /// Constant margin with a per-sample hinge.
    Fixed,
}

impl fmt::Display for MarginMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            MarginMode::Adaptive => "adaptive",
            MarginMode::Fixed => "fixed",
        })
    }
}

impl FromStr for MarginMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(MarginMode::Adaptive),
            "fixed" => Ok(MarginMode::Fixed),
            other => Err(Error::InvalidConfig(format!(
                "margin_mode must be adaptive|fixed, got {other:?}"
            ))),
        }
    }
}

/// Network parameters together with the attention branches.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub model: ModelParams,
    pub attention: AttentionParams,
    pub attention_mode: AttentionMode,
}

impl Network {
    pub fn init(
        config: ModelConfig,
        attention_mode: AttentionMode,
        reduction: usize,
        rng: &Rng,
    ) -> Result<Self> {
        let model = ModelParams::init(config, &mut rng.fork(1))?;
        let attention = AttentionParams::init(config.c_d, reduction, &mut rng.fork(2))?;
        Ok(Self {
            model,
            attention,
            attention_mode,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    fn pixel(&self) -> Option<&AttentionParams> {
        self.attention_mode.pixel().then_some(&self.attention)
    }

    pub fn forward(&self, batch: &Batch) -> Result<Vec<ForwardTrace>> {
        forward_with(&self.model, batch, self.pixel())
    }
}

/// What the combined loss looks like for one training configuration.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub lambda: f64,
    pub margin_mode: MarginMode,
    pub fixed_margin: f64,
}

/// Gradients of the combined loss, shaped like the trainable state.
#[derive(Debug, Clone, PartialEq)]
pub struct FullGrads {
    pub model: ModelParams,
    pub attention: AttentionParams,
    pub centers: Vec<f64>,
    /// Whether the metric term produced gradients (false when it is off or
    /// `lambda == 0`).
    pub metric_active: bool,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub breakdown: LossBreakdown,
    pub attention: Option<AttentionOutput>,
    pub grads: FullGrads,
    pub clamped: usize,
}

impl Objective {
    /// Loss value and gradients for a traced batch. `negatives == None`
    /// disables the metric term.
    pub fn evaluate(
        &self,
        net: &Network,
        centers: &ClassCenters,
        batch: &Batch,
        traces: &[ForwardTrace],
        negatives: Option<&NegativeAssignment>,
    ) -> Result<Evaluation> {
        let cfg = *net.config();
        let probabilities: Vec<Vec<f64>> = traces.iter().map(|t| t.probabilities.clone()).collect();
        let ce = ce_loss(&probabilities, &batch.labels)?;
        let embeddings: Vec<&[f64]> = traces.iter().map(|t| t.embedding.as_slice()).collect();

        let mut attention_out = None;
        let metric: Option<MetricOutput> = match negatives {
            None => None,
            Some(neg) => Some(match self.margin_mode {
                MarginMode::Fixed => {
                    tc3l_fixed(&embeddings, &batch.labels, centers, neg, self.fixed_margin)?
                }
                MarginMode::Adaptive => {
                    let weights = if net.attention_mode.element() {
                        let out = attend_batch(&net.attention, traces);
                        let w = out.weights.clone();
                        attention_out = Some(out);
                        w
                    } else {
                        vec![vec![1.0; cfg.c_d]; traces.len()]
                    };
                    amtc3l(&embeddings, &weights, &batch.labels, centers, neg)?
                }
            }),
        };
        let breakdown = multitask(ce.loss, metric.as_ref().map_or(0.0, |m| m.value), self.lambda)?;

        let mut attention_grads = net.attention.zeros_like();
        let mut center_grads = vec![0.0; centers.values.len()];
        let mut upstream: Vec<Upstream> = ce
            .d_logits
            .into_iter()
            .map(|d_logits| Upstream {
                d_logits,
                d_embedding: vec![0.0; cfg.c_d],
                d_context: None,
            })
            .collect();

        let metric_active = metric.is_some() && self.lambda > 0.0;
        if let (true, Some(metric), Some(neg)) = (metric_active, &metric, negatives) {
            let lambda = self.lambda;
            for (up, d) in upstream.iter_mut().zip(&metric.d_embeddings) {
                for (u, g) in up.d_embedding.iter_mut().zip(d) {
                    *u += lambda * g;
                }
            }
            if let Some(att) = &attention_out {
                let d_weights: Vec<Vec<f64>> = metric
                    .d_weights
                    .iter()
                    .map(|row| row.iter().map(|g| lambda * g).collect())
                    .collect();
                let d_emb =
                    elementwise_backward(&net.attention, &embeddings, att, &d_weights, &mut attention_grads)?;
                for (up, d) in upstream.iter_mut().zip(&d_emb) {
                    for (u, g) in up.d_embedding.iter_mut().zip(d) {
                        *u += g;
                    }
                }
            }
            center_grads = metric.center_grads(centers.k(), &batch.labels, neg)?;
            center_grads.iter_mut().for_each(|g| *g *= lambda);
        }

        let model_grads = backward(&net.model, traces, &upstream, net.pixel())?;
        if net.attention_mode.pixel() {
            attention_grads.pix_w = model_grads.pixel_weight;
            attention_grads.pix_b = vec![model_grads.pixel_bias];
        }

        Ok(Evaluation {
            breakdown,
            attention: attention_out,
            grads: FullGrads {
                model: model_grads.params,
                attention: attention_grads,
                centers: center_grads,
                metric_active,
            },
            clamped: ce.clamped,
        })
    }

    /// Loss value only, re-reading negative elements from `centers` through
    /// the fixed source classes of `negatives`. Used by gradient checks.
    pub fn value(
        &self,
        net: &Network,
        centers: &ClassCenters,
        batch: &Batch,
        negatives: Option<&NegativeAssignment>,
    ) -> Result<LossBreakdown> {
        let traces = net.forward(batch)?;
        let regathered = negatives.map(|n| n.regather(centers));
        Ok(self
            .evaluate(net, centers, batch, &traces, regathered.as_ref())?
            .breakdown)
    }
}
