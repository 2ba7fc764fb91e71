//! Loss functions with their analytic gradients.
//!
//! Metric losses work in sigmoid-squashed embedding space: each dimension
//! contributes `(sigmoid(e_j) - sigmoid(c_j))^2`, a value in `[0, 1)`.

use crate::centers::{accumulate_center_grads, ClassCenters};
use crate::error::{check_len, Error, Result};
use crate::nss::NegativeAssignment;
use crate::numeric::{sigmoid, sigmoid_grad_from_output};

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct CeOutput {
    pub loss: f64,
    /// `(p - onehot) / m` per sample.
    pub d_logits: Vec<Vec<f64>>,
    /// How many samples hit [`PROB_FLOOR`].
    pub clamped: usize,
}

/// Mean categorical cross-entropy `-log p(y)`.
pub fn ce_loss(probabilities: &[Vec<f64>], labels: &[usize]) -> Result<CeOutput> {
    check_len("ce_loss labels", probabilities.len(), labels.len())?;
    if labels.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let inv_m = 1.0 / labels.len() as f64;
    let mut loss = 0.0;
    let mut clamped = 0;
    let mut d_logits = Vec::with_capacity(labels.len());
    for (p, &y) in probabilities.iter().zip(labels) {
        if y >= p.len() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: p.len(),
            });
        }
        let py = if p[y] < PROB_FLOOR {
            clamped += 1;
            PROB_FLOOR
        } else {
            p[y]
        };
        loss -= py.ln();
        let mut g: Vec<f64> = p.iter().map(|&v| v * inv_m).collect();
        g[y] -= inv_m;
        d_logits.push(g);
    }
    Ok(CeOutput {
        loss: loss * inv_m,
        d_logits,
        clamped,
    })
}

/// Value and per-sample gradients of a center-based metric loss.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricOutput {
    pub value: f64,
    pub d_embeddings: Vec<Vec<f64>>,
    /// Gradient with respect to the attention weights (zero for the
    /// fixed-margin loss).
    pub d_weights: Vec<Vec<f64>>,
    /// Gradient with respect to each sample's positive center elements.
    pub d_positive: Vec<Vec<f64>>,
    /// Gradient with respect to each sample's negative elements.
    pub d_negative: Vec<Vec<f64>>,
}

impl MetricOutput {
    /// Scatters the positive/negative element gradients into a `K x c_d`
    /// center gradient.
    pub fn center_grads(
        &self,
        k: usize,
        labels: &[usize],
        negatives: &NegativeAssignment,
    ) -> Result<Vec<f64>> {
        accumulate_center_grads(k, labels, &self.d_positive, &self.d_negative, negatives)
    }

    fn zeros(m: usize, dim: usize) -> Self {
        Self {
            value: 0.0,
            d_embeddings: vec![vec![0.0; dim]; m],
            d_weights: vec![vec![0.0; dim]; m],
            d_positive: vec![vec![0.0; dim]; m],
            d_negative: vec![vec![0.0; dim]; m],
        }
    }
}

fn check_metric_inputs(
    embeddings: &[&[f64]],
    labels: &[usize],
    centers: &ClassCenters,
    negatives: &NegativeAssignment,
) -> Result<()> {
    if embeddings.is_empty() {
        return Err(Error::EmptyDataset);
    }
    check_len("metric labels", embeddings.len(), labels.len())?;
    check_len("metric negatives", embeddings.len(), negatives.len())?;
    for (e, &y) in embeddings.iter().zip(labels) {
        check_len("metric embedding", centers.dim(), e.len())?;
        if y >= centers.k() {
            return Err(Error::LabelOutOfRange {
                label: y,
                classes: centers.k(),
            });
        }
    }
    Ok(())
}

/// Squashed per-dimension quantities for one sample element.
struct Squashed {
    s: f64,
    sp: f64,
    sn: f64,
}

impl Squashed {
    fn new(e: f64, cp: f64, cn: f64) -> Self {
        Self {
            s: sigmoid(e),
            sp: sigmoid(cp),
            sn: sigmoid(cn),
        }
    }

    fn d_pos(&self) -> f64 {
        (self.s - self.sp) * (self.s - self.sp)
    }

    fn d_neg(&self) -> f64 {
        (self.s - self.sn) * (self.s - self.sn)
    }

    /// Writes `scale * d(d_pos - d_neg)/d(e, cp, cn)` into the three slots.
    fn grads(&self, scale: f64, de: &mut f64, dcp: &mut f64, dcn: &mut f64) {
        *de = scale * 2.0 * (self.sn - self.sp) * sigmoid_grad_from_output(self.s);
        *dcp = -scale * 2.0 * (self.s - self.sp) * sigmoid_grad_from_output(self.sp);
        *dcn = scale * 2.0 * (self.s - self.sn) * sigmoid_grad_from_output(self.sn);
    }
}

/// Fixed-margin triplet center loss with a per-sample hinge:
/// `1/(2m) sum_i max(0, sum_j [d_pos - d_neg] + margin)`.
pub fn tc3l_fixed(
    embeddings: &[&[f64]],
    labels: &[usize],
    centers: &ClassCenters,
    negatives: &NegativeAssignment,
    margin: f64,
) -> Result<MetricOutput> {
    check_metric_inputs(embeddings, labels, centers, negatives)?;
    let dim = centers.dim();
    if !(margin > 0.0 && margin <= dim as f64) {
        return Err(Error::InvalidConfig(format!(
            "fixed margin must lie in (0, {dim}], got {margin}"
        )));
    }
    let m = embeddings.len();
    let half_inv_m = 0.5 / m as f64;
    let mut out = MetricOutput::zeros(m, dim);
    for (i, (e, &y)) in embeddings.iter().zip(labels).enumerate() {
        let cp = centers.row(y);
        let cn = negatives.vector(i);
        let terms: Vec<Squashed> = (0..dim).map(|j| Squashed::new(e[j], cp[j], cn[j])).collect();
        let arg = terms.iter().map(|t| t.d_pos() - t.d_neg()).sum::<f64>() + margin;
        if arg <= 0.0 {
            continue;
        }
        out.value += arg;
        for (j, t) in terms.iter().enumerate() {
            t.grads(
                half_inv_m,
                &mut out.d_embeddings[i][j],
                &mut out.d_positive[i][j],
                &mut out.d_negative[i][j],
            );
        }
    }
    out.value *= half_inv_m;
    Ok(out)
}

/// Adaptive-margin loss-less triplet center loss:
/// `1/(2m) sum_i [sum_j w_ij (d_pos - d_neg) + alpha_i]`, `alpha_i = sum_j w_ij`.
///
/// No hinge. Each dimension contributes `w_ij (d_pos + (1 - d_neg)) > 0`, so
/// the value is strictly positive for any finite input.
pub fn amtc3l(
    embeddings: &[&[f64]],
    weights: &[Vec<f64>],
    labels: &[usize],
    centers: &ClassCenters,
    negatives: &NegativeAssignment,
) -> Result<MetricOutput> {
    check_metric_inputs(embeddings, labels, centers, negatives)?;
    check_len("amtc3l weights", embeddings.len(), weights.len())?;
    let dim = centers.dim();
    let m = embeddings.len();
    let half_inv_m = 0.5 / m as f64;
    let mut out = MetricOutput::zeros(m, dim);
    for (i, (e, &y)) in embeddings.iter().zip(labels).enumerate() {
        check_len("amtc3l weight row", dim, weights[i].len())?;
        let cp = centers.row(y);
        let cn = negatives.vector(i);
        let mut sample = 0.0;
        for j in 0..dim {
            let w = weights[i][j];
            let t = Squashed::new(e[j], cp[j], cn[j]);
            // the +1 is this dimension's share of the margin
            let bracket = t.d_pos() + (1.0 - t.d_neg());
            sample += w * bracket;
            out.d_weights[i][j] = half_inv_m * bracket;
            t.grads(
                half_inv_m * w,
                &mut out.d_embeddings[i][j],
                &mut out.d_positive[i][j],
                &mut out.d_negative[i][j],
            );
        }
        out.value += sample;
    }
    out.value *= half_inv_m;
    Ok(out)
}

/// `total = ce + lambda * metric`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub ce: f64,
    pub metric: f64,
    pub total: f64,
    pub lambda: f64,
}

pub fn multitask(ce: f64, metric: f64, lambda: f64) -> Result<LossBreakdown> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    let total = if lambda == 0.0 { ce } else { ce + lambda * metric };
    Ok(LossBreakdown {
        ce,
        metric,
        total,
        lambda,
    })
}

/// Gradients of the combined loss with respect to everything the losses
/// touch directly.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrads {
    pub d_logits: Vec<Vec<f64>>,
    pub d_embeddings: Vec<Vec<f64>>,
    pub d_weights: Vec<Vec<f64>>,
    pub d_centers: Vec<f64>,
}
