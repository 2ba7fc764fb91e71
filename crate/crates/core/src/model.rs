//! The trainable network.
//!
//! A two-layer encoder produces a `c_f x h_f x w_f` feature map. The
//! classifier head applies two pointwise channel maps (`c_f -> c_mid -> c_d`)
//! at every spatial position, global-average-pools the resulting context map
//! into a `c_d` embedding, and maps the embedding to `K` logits. Forward
//! traces keep every intermediate so [`backward`] can run the exact chain
//! rule.

use serde::{Deserialize, Serialize};

use crate::attention::AttentionParams;
use crate::error::{check_len, Error, Result};
use crate::numeric::{
    add_outer, add_transposed_product, affine, argmax, gaussian_vec, sigmoid_grad_from_output,
    softmax, Rng, Tensor3,
};

/// Pointwise nonlinearity used by the encoder and the reduction layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    /// Only meant for tests that need linear composition.
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Identity => x,
        }
    }

    /// Derivative expressed through the activation output.
    #[inline]
    pub fn grad_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Identity => 1.0,
        }
    }

    pub fn code(self) -> u32 {
        match self {
            Activation::Tanh => 0,
            Activation::Identity => 1,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Identity),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub c_f: usize,
    pub h_f: usize,
    pub w_f: usize,
    /// Embedding dimension.
    pub c_d: usize,
    pub k_classes: usize,
    /// Encoder hidden width.
    pub hidden: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_in: 32,
            c_f: 16,
            h_f: 2,
            w_f: 2,
            c_d: 8,
            k_classes: 7,
            hidden: 32,
            activation: Activation::Tanh,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_in", self.d_in),
            ("c_f", self.c_f),
            ("h_f", self.h_f),
            ("w_f", self.w_f),
            ("c_d", self.c_d),
            ("hidden", self.hidden),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be positive")));
            }
        }
        if self.c_d > self.c_f {
            return Err(Error::InvalidConfig(format!(
                "c_d ({}) must not exceed c_f ({})",
                self.c_d, self.c_f
            )));
        }
        if self.k_classes < 2 {
            return Err(Error::InvalidConfig("k_classes must be at least 2".into()));
        }
        Ok(())
    }

    /// Width between the two reduction layers: `ceil(sqrt(c_f * c_d))`.
    pub fn c_mid(&self) -> usize {
        let product = self.c_f * self.c_d;
        let mut mid = (product as f64).sqrt().floor() as usize;
        while mid * mid < product {
            mid += 1;
        }
        mid
    }

    pub fn positions(&self) -> usize {
        self.h_f * self.w_f
    }

    pub fn feature_len(&self) -> usize {
        self.c_f * self.positions()
    }
}

/// Network parameters. Also used, with identical shapes, for gradients and
/// optimizer velocities.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    /// `hidden x d_in`
    pub enc_w1: Vec<f64>,
    pub enc_b1: Vec<f64>,
    /// `(c_f * h_f * w_f) x hidden`
    pub enc_w2: Vec<f64>,
    pub enc_b2: Vec<f64>,
    /// `c_mid x c_f`
    pub red_w1: Vec<f64>,
    pub red_b1: Vec<f64>,
    /// `c_d x c_mid`
    pub red_w2: Vec<f64>,
    pub red_b2: Vec<f64>,
    /// `K x c_d`
    pub cls_w: Vec<f64>,
    pub cls_b: Vec<f64>,
}

pub const MODEL_ARRAY_NAMES: [&str; 10] = [
    "enc_w1", "enc_b1", "enc_w2", "enc_b2", "red_w1", "red_b1", "red_w2", "red_b2", "cls_w",
    "cls_b",
];

impl ModelParams {
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c_mid = config.c_mid();
        let feat = config.feature_len();
        Ok(Self {
            config,
            enc_w1: vec![0.0; config.hidden * config.d_in],
            enc_b1: vec![0.0; config.hidden],
            enc_w2: vec![0.0; feat * config.hidden],
            enc_b2: vec![0.0; feat],
            red_w1: vec![0.0; c_mid * config.c_f],
            red_b1: vec![0.0; c_mid],
            red_w2: vec![0.0; config.c_d * c_mid],
            red_b2: vec![0.0; config.c_d],
            cls_w: vec![0.0; config.k_classes * config.c_d],
            cls_b: vec![0.0; config.k_classes],
        })
    }

    /// Zero biases, weights drawn from `N(0, 1/fan_in)`.
    pub fn init(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let c_mid = config.c_mid();
        let scale = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        p.enc_w1 = gaussian_vec(rng, p.enc_w1.len(), scale(config.d_in));
        p.enc_w2 = gaussian_vec(rng, p.enc_w2.len(), scale(config.hidden));
        p.red_w1 = gaussian_vec(rng, p.red_w1.len(), scale(config.c_f));
        p.red_w2 = gaussian_vec(rng, p.red_w2.len(), scale(c_mid));
        p.cls_w = gaussian_vec(rng, p.cls_w.len(), scale(config.c_d));
        Ok(p)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.config).expect("config already validated")
    }

    pub fn arrays(&self) -> [&Vec<f64>; 10] {
        [
            &self.enc_w1,
            &self.enc_b1,
            &self.enc_w2,
            &self.enc_b2,
            &self.red_w1,
            &self.red_b1,
            &self.red_w2,
            &self.red_b2,
            &self.cls_w,
            &self.cls_b,
        ]
    }

    pub fn arrays_mut(&mut self) -> [&mut Vec<f64>; 10] {
        [
            &mut self.enc_w1,
            &mut self.enc_b1,
            &mut self.enc_w2,
            &mut self.enc_b2,
            &mut self.red_w1,
            &mut self.red_b1,
            &mut self.red_w2,
            &mut self.red_b2,
            &mut self.cls_w,
            &mut self.cls_b,
        ]
    }

    pub fn is_finite(&self) -> bool {
        self.arrays().iter().all(|a| a.iter().all(|v| v.is_finite()))
    }
}

/// A mini-batch of feature vectors with class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, k_classes: usize) -> Result<Self> {
        if inputs.is_empty() {
            return Err(Error::EmptyDataset);
        }
        check_len("Batch labels", inputs.len(), labels.len())?;
        if let Some(&label) = labels.iter().find(|&&l| l >= k_classes) {
            return Err(Error::LabelOutOfRange {
                label,
                classes: k_classes,
            });
        }
        Ok(Self { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Every intermediate of one sample's forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Vec<f64>,
    /// Encoder hidden activations.
    pub hidden: Vec<f64>,
    /// `x*`, shape `c_f x h_f x w_f`.
    pub features: Tensor3,
    /// Output of the first reduction layer, shape `c_mid x h_f x w_f`.
    pub reduced: Tensor3,
    /// `x^d`, shape `c_d x h_f x w_f`.
    pub context: Tensor3,
    /// Pixel-wise attention mask over `h_f x w_f`, when enabled.
    pub mask: Option<Vec<f64>>,
    pub embedding: Vec<f64>,
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub prediction: usize,
}

/// Input -> feature map.
pub fn encode(params: &ModelParams, input: &[f64]) -> Result<(Vec<f64>, Tensor3)> {
    let cfg = &params.config;
    check_len("encode input", cfg.d_in, input.len())?;
    let act = cfg.activation;
    let mut hidden = vec![0.0; cfg.hidden];
    affine(&params.enc_w1, &params.enc_b1, input, &mut hidden);
    hidden.iter_mut().for_each(|h| *h = act.apply(*h));
    let mut flat = vec![0.0; cfg.feature_len()];
    affine(&params.enc_w2, &params.enc_b2, &hidden, &mut flat);
    flat.iter_mut().for_each(|f| *f = act.apply(*f));
    let features = Tensor3::new(cfg.c_f, cfg.h_f, cfg.w_f, flat)
        .map_err(|_| Error::NonFinite("encode"))?;
    Ok((hidden, features))
}

/// Feature map -> context map through the two pointwise reduction layers.
/// Returns `(reduced, context)`.
pub fn contextualize(params: &ModelParams, features: &Tensor3) -> Result<(Tensor3, Tensor3)> {
    let cfg = &params.config;
    check_len("contextualize channels", cfg.c_f, features.channels())?;
    check_len("contextualize positions", cfg.positions(), features.positions())?;
    let c_mid = cfg.c_mid();
    let mut reduced = Tensor3::zeros(c_mid, features.rows(), features.cols());
    let mut context = Tensor3::zeros(cfg.c_d, features.rows(), features.cols());
    let mut mid = vec![0.0; c_mid];
    let mut out = vec![0.0; cfg.c_d];
    for p in 0..features.positions() {
        let x = features.position(p);
        affine(&params.red_w1, &params.red_b1, &x, &mut mid);
        mid.iter_mut()
            .for_each(|v| *v = cfg.activation.apply(*v));
        affine(&params.red_w2, &params.red_b2, &mid, &mut out);
        reduced.set_position(p, &mid);
        context.set_position(p, &out);
    }
    Ok((reduced, context))
}

/// Global average pooling, optionally weighting each position by `mask`.
pub fn pool(context: &Tensor3, mask: Option<&[f64]>) -> Vec<f64> {
    let positions = context.positions();
    let inv = 1.0 / positions as f64;
    (0..context.channels())
        .map(|c| {
            let channel = context.channel(c);
            let sum: f64 = match mask {
                Some(m) => channel.iter().zip(m).map(|(v, w)| v * w).sum(),
                None => channel.iter().sum(),
            };
            sum * inv
        })
        .collect()
}

/// Embedding -> logits.
pub fn classify(params: &ModelParams, embedding: &[f64]) -> Result<Vec<f64>> {
    check_len("classify embedding", params.config.c_d, embedding.len())?;
    let mut logits = vec![0.0; params.config.k_classes];
    affine(&params.cls_w, &params.cls_b, embedding, &mut logits);
    Ok(logits)
}

fn forward_one(
    params: &ModelParams,
    pixel: Option<&AttentionParams>,
    input: &[f64],
) -> Result<ForwardTrace> {
    let (hidden, features) = encode(params, input)?;
    let (reduced, context) = contextualize(params, &features)?;
    let mask = pixel.map(|a| crate::attention::attend_pixelwise(a, &context));
    let embedding = pool(&context, mask.as_deref());
    let logits = classify(params, &embedding)?;
    let probabilities = softmax(&logits);
    let prediction = argmax(&logits);
    Ok(ForwardTrace {
        input: input.to_vec(),
        hidden,
        features,
        reduced,
        context,
        mask,
        embedding,
        logits,
        probabilities,
        prediction,
    })
}

pub fn forward(params: &ModelParams, batch: &Batch) -> Result<Vec<ForwardTrace>> {
    forward_with(params, batch, None)
}

/// Forward pass with an optional pixel-wise mask applied before pooling.
pub fn forward_with(
    params: &ModelParams,
    batch: &Batch,
    pixel: Option<&AttentionParams>,
) -> Result<Vec<ForwardTrace>> {
    batch
        .inputs
        .iter()
        .map(|x| forward_one(params, pixel, x))
        .collect()
}

/// Gradients arriving at one sample's trace from the losses downstream.
#[derive(Debug, Clone, PartialEq)]
pub struct Upstream {
    pub d_logits: Vec<f64>,
    pub d_embedding: Vec<f64>,
    /// Extra gradient on the context map (`c_d x h_f x w_f`), if any.
    pub d_context: Option<Vec<f64>>,
}

impl Upstream {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            d_logits: vec![0.0; config.k_classes],
            d_embedding: vec![0.0; config.c_d],
            d_context: None,
        }
    }
}

/// Parameter gradients of the network plus, when the pixel mask was active,
/// of the pixel-wise attention branch.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub params: ModelParams,
    pub pixel_weight: Vec<f64>,
    pub pixel_bias: f64,
}

/// Exact reverse-mode gradients, accumulated in ascending sample order.
pub fn backward(
    params: &ModelParams,
    traces: &[ForwardTrace],
    upstream: &[Upstream],
    pixel: Option<&AttentionParams>,
) -> Result<ModelGrads> {
    check_len("backward upstream", traces.len(), upstream.len())?;
    let cfg = &params.config;
    let act = cfg.activation;
    let c_mid = cfg.c_mid();
    let positions = cfg.positions();
    let inv_pos = 1.0 / positions as f64;

    let mut g = params.zeros_like();
    let mut pixel_weight = vec![0.0; if pixel.is_some() { cfg.c_d } else { 0 }];
    let mut pixel_bias = 0.0;

    for (trace, up) in traces.iter().zip(upstream) {
        check_len("backward d_logits", cfg.k_classes, up.d_logits.len())?;
        check_len("backward d_embedding", cfg.c_d, up.d_embedding.len())?;
        if let Some(dc) = &up.d_context {
            check_len("backward d_context", cfg.c_d * positions, dc.len())?;
        }
        if pixel.is_some() != trace.mask.is_some() {
            return Err(Error::InvalidConfig(
                "pixel attention must match between forward and backward".into(),
            ));
        }

        // classifier
        add_outer(&mut g.cls_w, &up.d_logits, &trace.embedding);
        for (b, d) in g.cls_b.iter_mut().zip(&up.d_logits) {
            *b += d;
        }
        let mut d_emb = up.d_embedding.clone();
        add_transposed_product(&params.cls_w, &up.d_logits, &mut d_emb);

        // pooling (and mask)
        let mut d_ctx = match &up.d_context {
            Some(dc) => dc.clone(),
            None => vec![0.0; cfg.c_d * positions],
        };
        match (&trace.mask, pixel) {
            (Some(mask), Some(attn)) => {
                for p in 0..positions {
                    let ctx_p = trace.context.position(p);
                    let mut d_mask = 0.0;
                    for c in 0..cfg.c_d {
                        d_ctx[c * positions + p] += d_emb[c] * mask[p] * inv_pos;
                        d_mask += d_emb[c] * ctx_p[c] * inv_pos;
                    }
                    let d_z = d_mask * sigmoid_grad_from_output(mask[p]);
                    for c in 0..cfg.c_d {
                        pixel_weight[c] += d_z * ctx_p[c];
                        d_ctx[c * positions + p] += d_z * attn.pix_w[c];
                    }
                    pixel_bias += d_z;
                }
            }
            _ => {
                for c in 0..cfg.c_d {
                    for p in 0..positions {
                        d_ctx[c * positions + p] += d_emb[c] * inv_pos;
                    }
                }
            }
        }

        // reduction layers, position by position
        let mut d_feat = vec![0.0; cfg.feature_len()];
        let mut d_mid = vec![0.0; c_mid];
        let mut d_ctx_p = vec![0.0; cfg.c_d];
        for p in 0..positions {
            for c in 0..cfg.c_d {
                d_ctx_p[c] = d_ctx[c * positions + p];
            }
            let mid_p = trace.reduced.position(p);
            add_outer(&mut g.red_w2, &d_ctx_p, &mid_p);
            for (b, d) in g.red_b2.iter_mut().zip(&d_ctx_p) {
                *b += d;
            }
            d_mid.iter_mut().for_each(|v| *v = 0.0);
            add_transposed_product(&params.red_w2, &d_ctx_p, &mut d_mid);
            for (d, &m) in d_mid.iter_mut().zip(&mid_p) {
                *d *= act.grad_from_output(m);
            }
            let feat_p = trace.features.position(p);
            add_outer(&mut g.red_w1, &d_mid, &feat_p);
            for (b, d) in g.red_b1.iter_mut().zip(&d_mid) {
                *b += d;
            }
            let mut d_feat_p = vec![0.0; cfg.c_f];
            add_transposed_product(&params.red_w1, &d_mid, &mut d_feat_p);
            for (c, v) in d_feat_p.into_iter().enumerate() {
                d_feat[c * positions + p] = v;
            }
        }

        // encoder
        for (d, &f) in d_feat.iter_mut().zip(trace.features.data()) {
            *d *= act.grad_from_output(f);
        }
        add_outer(&mut g.enc_w2, &d_feat, &trace.hidden);
        for (b, d) in g.enc_b2.iter_mut().zip(&d_feat) {
            *b += d;
        }
        let mut d_hidden = vec![0.0; cfg.hidden];
        add_transposed_product(&params.enc_w2, &d_feat, &mut d_hidden);
        for (d, &h) in d_hidden.iter_mut().zip(&trace.hidden) {
            *d *= act.grad_from_output(h);
        }
        add_outer(&mut g.enc_w1, &d_hidden, &trace.input);
        for (b, d) in g.enc_b1.iter_mut().zip(&d_hidden) {
            *b += d;
        }
    }

    Ok(ModelGrads {
        params: g,
        pixel_weight,
        pixel_bias,
    })
}
