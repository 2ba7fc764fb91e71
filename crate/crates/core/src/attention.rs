//! Selective inclusion/exclusion attention.
//!
//! The element-wise branch squeezes a sample's embedding through a
//! `c_d -> c_d/r -> c_d` bottleneck ending in a sigmoid, giving one weight in
//! `(0, 1)` per embedding dimension. The sample's adaptive margin is the sum
//! of its weights. The pixel-wise branch gates each spatial position of the
//! context map before pooling.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::model::ForwardTrace;
use crate::numeric::{
    add_outer, add_transposed_product, affine, dot, gaussian_vec, sigmoid,
    sigmoid_grad_from_output, Rng, Tensor3,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    None,
    #[default]
    Element,
    Pixel,
    Both,
}

impl AttentionMode {
    pub fn element(self) -> bool {
        matches!(self, AttentionMode::Element | AttentionMode::Both)
    }

    pub fn pixel(self) -> bool {
        matches!(self, AttentionMode::Pixel | AttentionMode::Both)
    }

    pub fn code(self) -> u32 {
        match self {
            AttentionMode::None => 0,
            AttentionMode::Element => 1,
            AttentionMode::Pixel => 2,
            AttentionMode::Both => 3,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        Some(match code {
            0 => AttentionMode::None,
            1 => AttentionMode::Element,
            2 => AttentionMode::Pixel,
            3 => AttentionMode::Both,
            _ => return None,
        })
    }
}

impl fmt::Display for AttentionMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AttentionMode::None => "none",
            AttentionMode::Element => "element",
            AttentionMode::Pixel => "pixel",
            AttentionMode::Both => "both",
        })
    }
}

impl FromStr for AttentionMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AttentionMode::None),
            "element" => Ok(AttentionMode::Element),
            "pixel" => Ok(AttentionMode::Pixel),
            "both" => Ok(AttentionMode::Both),
            other => Err(Error::InvalidConfig(format!(
                "attention must be one of none|element|pixel|both, got {other:?}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub c_d: usize,
    pub reduction: usize,
    /// `(c_d / r) x c_d`
    pub elem_w1: Vec<f64>,
    pub elem_b1: Vec<f64>,
    /// `c_d x (c_d / r)`
    pub elem_w2: Vec<f64>,
    pub elem_b2: Vec<f64>,
    /// Pixel gate weights over context channels.
    pub pix_w: Vec<f64>,
    /// Single pixel gate bias, stored as a one-element array.
    pub pix_b: Vec<f64>,
}

pub const ATTENTION_ARRAY_NAMES: [&str; 6] =
    ["elem_w1", "elem_b1", "elem_w2", "elem_b2", "pix_w", "pix_b"];

impl AttentionParams {
    pub fn zeros(c_d: usize, reduction: usize) -> Result<Self> {
        if reduction == 0 || c_d == 0 || c_d / reduction == 0 {
            return Err(Error::InvalidConfig(format!(
                "attention_reduction {reduction} leaves no bottleneck width for c_d {c_d}"
            )));
        }
        let squeezed = c_d / reduction;
        Ok(Self {
            c_d,
            reduction,
            elem_w1: vec![0.0; squeezed * c_d],
            elem_b1: vec![0.0; squeezed],
            elem_w2: vec![0.0; c_d * squeezed],
            elem_b2: vec![0.0; c_d],
            pix_w: vec![0.0; c_d],
            pix_b: vec![0.0],
        })
    }

    pub fn init(c_d: usize, reduction: usize, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(c_d, reduction)?;
        let squeezed = p.squeezed();
        p.elem_w1 = gaussian_vec(rng, p.elem_w1.len(), 1.0 / (c_d as f64).sqrt());
        p.elem_w2 = gaussian_vec(rng, p.elem_w2.len(), 1.0 / (squeezed as f64).sqrt());
        p.pix_w = gaussian_vec(rng, c_d, 1.0 / (c_d as f64).sqrt());
        Ok(p)
    }

    pub fn squeezed(&self) -> usize {
        self.c_d / self.reduction
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.c_d, self.reduction).expect("shape already validated")
    }

    pub fn arrays(&self) -> [&Vec<f64>; 6] {
        [
            &self.elem_w1,
            &self.elem_b1,
            &self.elem_w2,
            &self.elem_b2,
            &self.pix_w,
            &self.pix_b,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Vec<f64>; 6] {
        [
            &mut self.elem_w1,
            &mut self.elem_b1,
            &mut self.elem_w2,
            &mut self.elem_b2,
            &mut self.pix_w,
            &mut self.pix_b,
        ]
    }
}

/// Element-wise weights for one sample, with the bottleneck activations kept
/// for the backward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ElementTrace {
    pub squeezed: Vec<f64>,
    pub weights: Vec<f64>,
}

/// `w = sigmoid(W2 tanh(W1 e + b1) + b2)`.
pub fn attend_embedding(params: &AttentionParams, embedding: &[f64]) -> ElementTrace {
    let mut squeezed = vec![0.0; params.squeezed()];
    affine(&params.elem_w1, &params.elem_b1, embedding, &mut squeezed);
    squeezed.iter_mut().for_each(|v| *v = v.tanh());
    let mut weights = vec![0.0; params.c_d];
    affine(&params.elem_w2, &params.elem_b2, &squeezed, &mut weights);
    weights.iter_mut().for_each(|v| *v = sigmoid(*v));
    ElementTrace { squeezed, weights }
}

/// Element-wise inclusion/exclusion weights for one traced sample.
pub fn attend_elementwise(params: &AttentionParams, trace: &ForwardTrace) -> Vec<f64> {
    attend_embedding(params, &trace.embedding).weights
}

/// Spatial gate `sigmoid(u . x^d[:, h, w] + b)` for every position.
pub fn attend_pixelwise(params: &AttentionParams, context: &Tensor3) -> Vec<f64> {
    (0..context.positions())
        .map(|p| sigmoid(dot(&params.pix_w, &context.position(p)) + params.pix_b[0]))
        .collect()
}

/// Adaptive margins: the row sums of the weight matrix.
pub fn margins(weights: &[Vec<f64>]) -> Vec<f64> {
    weights.iter().map(|row| row.iter().sum()).collect()
}

/// Thresholds weights at 0.5 (inclusive). Reporting only.
pub fn binarize_for_eval(weights: &[f64]) -> Vec<f64> {
    weights
        .iter()
        .map(|&w| if w >= 0.5 { 1.0 } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttentionOutput {
    /// One row of `c_d` weights per sample.
    pub weights: Vec<Vec<f64>>,
    pub margins: Vec<f64>,
    pub spatial_mask: Option<Vec<Vec<f64>>>,
    squeezed: Vec<Vec<f64>>,
}

/// Runs the element-wise branch over a batch of traces.
pub fn attend_batch(params: &AttentionParams, traces: &[ForwardTrace]) -> AttentionOutput {
    let (squeezed, weights): (Vec<_>, Vec<_>) = traces
        .iter()
        .map(|t| {
            let et = attend_embedding(params, &t.embedding);
            (et.squeezed, et.weights)
        })
        .unzip();
    let spatial_mask = if traces.iter().all(|t| t.mask.is_some()) && !traces.is_empty() {
        Some(traces.iter().map(|t| t.mask.clone().unwrap()).collect())
    } else {
        None
    };
    AttentionOutput {
        margins: margins(&weights),
        weights,
        spatial_mask,
        squeezed,
    }
}

/// Back-propagates per-sample weight gradients through the element-wise
/// branch. Accumulates into `grads` and returns the gradient with respect to
/// each sample's embedding.
pub fn elementwise_backward(
    params: &AttentionParams,
    embeddings: &[&[f64]],
    output: &AttentionOutput,
    d_weights: &[Vec<f64>],
    grads: &mut AttentionParams,
) -> Result<Vec<Vec<f64>>> {
    check_len("attention backward", output.weights.len(), d_weights.len())?;
    check_len("attention backward", output.weights.len(), embeddings.len())?;
    let mut d_embeddings = Vec::with_capacity(embeddings.len());
    for (i, (&emb, d_w)) in embeddings.iter().zip(d_weights).enumerate() {
        check_len("attention backward weights", params.c_d, d_w.len())?;
        let w = &output.weights[i];
        let s = &output.squeezed[i];
        let d_z2: Vec<f64> = d_w
            .iter()
            .zip(w)
            .map(|(d, &wv)| d * sigmoid_grad_from_output(wv))
            .collect();
        add_outer(&mut grads.elem_w2, &d_z2, s);
        for (b, d) in grads.elem_b2.iter_mut().zip(&d_z2) {
            *b += d;
        }
        let mut d_s = vec![0.0; s.len()];
        add_transposed_product(&params.elem_w2, &d_z2, &mut d_s);
        for (d, &sv) in d_s.iter_mut().zip(s) {
            *d *= 1.0 - sv * sv;
        }
        add_outer(&mut grads.elem_w1, &d_s, emb);
        for (b, d) in grads.elem_b1.iter_mut().zip(&d_s) {
            *b += d;
        }
        let mut d_e = vec![0.0; params.c_d];
        add_transposed_product(&params.elem_w1, &d_s, &mut d_e);
        d_embeddings.push(d_e);
    }
    Ok(d_embeddings)
}
