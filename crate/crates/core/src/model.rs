//! The multi-branch detector: per-feature encoders, branch fusion and a logit head.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureRecord, DEFAULT_L_MAX};
use crate::nn::{
    axpy, conv1d, conv1d_backward, dense, dense_backward, dot, kaiming_uniform, mean_rows, relu_backward_inplace,
    relu_inplace, sigmoid, softmax, xavier_uniform, ParamStore, Real, Tensor,
};
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Feature {
    Ll,
    Ent,
    Emb,
}

impl Feature {
    pub const ALL: [Feature; 3] = [Feature::Ll, Feature::Ent, Feature::Emb];

    pub fn name(self) -> &'static str {
        match self {
            Feature::Ll => "ll",
            Feature::Ent => "ent",
            Feature::Emb => "emb",
        }
    }

    pub fn is_scalar(self) -> bool {
        !matches!(self, Feature::Emb)
    }
}

impl fmt::Display for Feature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Feature {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "ll" => Ok(Feature::Ll),
            "ent" => Ok(Feature::Ent),
            "emb" => Ok(Feature::Emb),
            other => Err(Error::Config(format!("unknown feature `{other}`"))),
        }
    }
}

/// How a single feature sequence becomes a `d_h` vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    /// Mean over tokens, then a two-layer MLP.
    MlpPool,
    /// Two kernel-3 convolutions with ReLU, then mean over tokens.
    Cnn,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderPreset {
    AllCnn,
    /// Scalar features use `MlpPool`, embeddings use `Cnn`.
    Mixed,
    AllMlp,
}

impl EncoderPreset {
    pub fn encoder_for(self, feature: Feature) -> EncoderKind {
        match (self, feature) {
            (EncoderPreset::AllCnn, _) => EncoderKind::Cnn,
            (EncoderPreset::AllMlp, _) => EncoderKind::MlpPool,
            (EncoderPreset::Mixed, f) if f.is_scalar() => EncoderKind::MlpPool,
            (EncoderPreset::Mixed, _) => EncoderKind::Cnn,
        }
    }
}

impl FromStr for EncoderPreset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all-cnn" => Ok(EncoderPreset::AllCnn),
            "mixed" => Ok(EncoderPreset::Mixed),
            "all-mlp" => Ok(EncoderPreset::AllMlp),
            other => Err(Error::Config(format!(
                "unknown encoder preset `{other}` (expected all-cnn, mixed or all-mlp)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Attention,
    ConcatMlp,
}

impl FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "attention" => Ok(FusionKind::Attention),
            "concat" | "concat_mlp" | "concat-mlp" => Ok(FusionKind::ConcatMlp),
            other => Err(Error::Config(format!(
                "unknown fusion `{other}` (expected attention or concat)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BranchConfig {
    pub feature: Feature,
    pub encoder: EncoderKind,
}

/// Everything needed to rebuild the network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub branches: Vec<BranchConfig>,
    pub fusion: FusionKind,
    pub d_emb: usize,
    pub l_max: usize,
    pub d_conv: usize,
    pub d_h: usize,
    pub d_mlp: usize,
    /// Attention projection width.
    pub d_a: usize,
    /// Average over real tokens only (otherwise over all `l_max` positions).
    pub pooling_masked: bool,
}

impl ModelConfig {
    /// All features, CNN encoders everywhere, concatenation fusion.
    pub fn new(d_emb: usize) -> Self {
        Self::with_preset(&Feature::ALL, EncoderPreset::AllCnn, FusionKind::ConcatMlp, d_emb)
    }

    pub fn with_preset(features: &[Feature], preset: EncoderPreset, fusion: FusionKind, d_emb: usize) -> Self {
        Self {
            branches: features
                .iter()
                .map(|&feature| BranchConfig {
                    feature,
                    encoder: preset.encoder_for(feature),
                })
                .collect(),
            fusion,
            d_emb,
            l_max: DEFAULT_L_MAX,
            d_conv: 64,
            d_h: 64,
            d_mlp: 64,
            d_a: 64,
            pooling_masked: true,
        }
    }

    pub fn features(&self) -> Vec<Feature> {
        self.branches.iter().map(|b| b.feature).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.branches.is_empty() {
            return fail("at least one feature must be enabled".into());
        }
        for (i, b) in self.branches.iter().enumerate() {
            if self.branches[..i].iter().any(|o| o.feature == b.feature) {
                return fail(format!("feature `{}` listed twice", b.feature));
            }
        }
        if self.branches.iter().any(|b| b.feature == Feature::Emb) && self.d_emb == 0 {
            return fail("the emb branch needs d_emb > 0".into());
        }
        for (name, v) in [
            ("l_max", self.l_max),
            ("d_conv", self.d_conv),
            ("d_h", self.d_h),
            ("d_mlp", self.d_mlp),
            ("d_a", self.d_a),
        ] {
            if v == 0 {
                return fail(format!("{name} must be positive"));
            }
        }
        if self.branches.iter().any(|b| b.encoder == EncoderKind::Cnn) && self.d_conv != self.d_h {
            return fail(format!(
                "CNN branches pool conv channels directly, so d_conv ({}) must equal d_h ({})",
                self.d_conv, self.d_h
            ));
        }
        Ok(())
    }

    fn input_width(&self, feature: Feature) -> usize {
        if feature.is_scalar() {
            1
        } else {
            self.d_emb
        }
    }
}

/// Gain applied to the Xavier-uniform draw of `head.weight`.
pub const HEAD_INIT_GAIN: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
enum Init {
    Kaiming { fan_in: usize },
    Xavier { fan_in: usize, fan_out: usize, gain: f64 },
    Zero,
}

/// Name, shape and initializer of one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    #[serde(skip, default = "zero_init")]
    init: Init,
}

fn zero_init() -> Init {
    Init::Zero
}

#[derive(Debug, Clone, Copy)]
struct DenseIdx {
    w: usize,
    b: usize,
    n_out: usize,
}

#[derive(Debug, Clone, Copy)]
struct ConvIdx {
    w: usize,
    b: usize,
    c_in: usize,
    c_out: usize,
}

#[derive(Debug, Clone, Copy)]
enum EncoderIdx {
    MlpPool { l1: DenseIdx, l2: DenseIdx },
    Cnn { c1: ConvIdx, c2: ConvIdx },
}

#[derive(Debug, Clone, Copy)]
enum FusionIdx {
    Attention { wa: usize, w: usize },
    Concat { l1: DenseIdx, l2: DenseIdx },
}

#[derive(Debug, Clone)]
struct Layout {
    specs: Vec<ParamSpec>,
    branches: Vec<(Feature, EncoderIdx)>,
    fusion: FusionIdx,
    head: DenseIdx,
}

impl Layout {
    fn build(cfg: &ModelConfig) -> Self {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| {
            specs.push(ParamSpec { name, shape, init });
            specs.len() - 1
        };
        let dense = |push: &mut dyn FnMut(String, Vec<usize>, Init) -> usize,
                     prefix: &str,
                     n_in: usize,
                     n_out: usize,
                     init: Init| DenseIdx {
            w: push(format!("{prefix}.weight"), vec![n_out, n_in], init),
            b: push(format!("{prefix}.bias"), vec![n_out], Init::Zero),
            n_out,
        };

        let mut branches = Vec::new();
        for b in &cfg.branches {
            let f = b.feature.name();
            let c_in = cfg.input_width(b.feature);
            let enc = match b.encoder {
                EncoderKind::MlpPool => EncoderIdx::MlpPool {
                    l1: dense(
                        &mut push,
                        &format!("{f}.mlp1"),
                        c_in,
                        cfg.d_mlp,
                        Init::Kaiming { fan_in: c_in },
                    ),
                    l2: dense(
                        &mut push,
                        &format!("{f}.mlp2"),
                        cfg.d_mlp,
                        cfg.d_h,
                        Init::Kaiming { fan_in: cfg.d_mlp },
                    ),
                },
                EncoderKind::Cnn => {
                    let mut conv = |name: &str, c_in: usize, c_out: usize| ConvIdx {
                        w: push(
                            format!("{f}.{name}.weight"),
                            vec![c_out, c_in, 3],
                            Init::Kaiming { fan_in: c_in * 3 },
                        ),
                        b: push(format!("{f}.{name}.bias"), vec![c_out], Init::Zero),
                        c_in,
                        c_out,
                    };
                    EncoderIdx::Cnn {
                        c1: conv("conv1", c_in, cfg.d_conv),
                        c2: conv("conv2", cfg.d_conv, cfg.d_conv),
                    }
                }
            };
            branches.push((b.feature, enc));
        }

        let fusion = match cfg.fusion {
            FusionKind::Attention => FusionIdx::Attention {
                wa: push(
                    "fusion.attn.proj".into(),
                    vec![cfg.d_a, cfg.d_h],
                    Init::Xavier {
                        fan_in: cfg.d_h,
                        fan_out: cfg.d_a,
                        gain: 1.0,
                    },
                ),
                w: push(
                    "fusion.attn.score".into(),
                    vec![cfg.d_a],
                    Init::Xavier {
                        fan_in: cfg.d_a,
                        fan_out: 1,
                        gain: 1.0,
                    },
                ),
            },
            FusionKind::ConcatMlp => {
                let width = cfg.branches.len() * cfg.d_h;
                FusionIdx::Concat {
                    l1: dense(
                        &mut push,
                        "fusion.mlp1",
                        width,
                        cfg.d_mlp,
                        Init::Kaiming { fan_in: width },
                    ),
                    l2: dense(
                        &mut push,
                        "fusion.mlp2",
                        cfg.d_mlp,
                        cfg.d_h,
                        Init::Kaiming { fan_in: cfg.d_mlp },
                    ),
                }
            }
        };
        // A small gain keeps initial logits near zero: the fused features are
        // post-ReLU with a shared positive mean, which a full-scale head turns
        // into a common logit offset of several units.
        let head = dense(
            &mut push,
            "head",
            cfg.d_h,
            1,
            Init::Xavier {
                fan_in: cfg.d_h,
                fan_out: 1,
                gain: HEAD_INIT_GAIN,
            },
        );
        Self {
            specs,
            branches,
            fusion,
            head,
        }
    }
}

/// Parameter names and shapes in canonical (checkpoint) order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    Layout::build(cfg).specs
}

/// Kaiming-uniform for convolutions and hidden dense layers, Xavier-uniform
/// for the attention vectors and the logit head, zero biases. Tensors are
/// drawn in canonical order from `rng`.
pub fn init_params<T: Real>(cfg: &ModelConfig, rng: &mut Rng) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut store = ParamStore::new();
    for spec in Layout::build(cfg).specs {
        let value = match spec.init {
            Init::Kaiming { fan_in } => kaiming_uniform(&spec.shape, fan_in, rng),
            Init::Xavier { fan_in, fan_out, gain } => {
                let mut t = xavier_uniform(&spec.shape, fan_in, fan_out, rng);
                t.data_mut().iter_mut().for_each(|v| *v = *v * T::of(gain));
                t
            }
            Init::Zero => Tensor::zeros(&spec.shape),
        };
        store.insert(spec.name, value)?;
    }
    Ok(store)
}

/// Result of a forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    pub logit: T,
    pub p: T,
    /// Branch weights, present under attention fusion (in branch order).
    pub attention: Option<Vec<T>>,
}

/// Hallucination decision; inclusive at 0.5.
pub fn predict(p: f64) -> u8 {
    u8::from(p >= 0.5)
}

#[derive(Debug, Clone)]
enum BranchTape<T> {
    MlpPool {
        pooled: Vec<T>,
        hidden: Vec<T>,
    },
    Cnn {
        input: Vec<T>,
        span: usize,
        act1: Vec<T>,
        act2: Vec<T>,
    },
}

#[derive(Debug, Clone)]
enum FusionTape<T> {
    Attention { proj: Vec<Vec<T>>, alpha: Vec<T> },
    Concat { joined: Vec<T>, hidden: Vec<T> },
}

/// Intermediate values of one forward pass, consumed by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Tape<T> {
    branches: Vec<BranchTape<T>>,
    hs: Vec<Vec<T>>,
    fusion: FusionTape<T>,
    fused: Vec<T>,
    pub logit: T,
}

/// A network topology derived from a [`ModelConfig`].
#[derive(Debug, Clone)]
pub struct Network {
    cfg: ModelConfig,
    layout: Layout,
}

impl Network {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = Layout::build(&cfg);
        Ok(Self { cfg, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.layout.specs
    }

    pub fn init_params<T: Real>(&self, rng: &mut Rng) -> Result<ParamStore<T>> {
        init_params(&self.cfg, rng)
    }

    /// Checks that `params` has the layout this network expects.
    pub fn check_params<T: Real>(&self, params: &ParamStore<T>) -> Result<()> {
        if params.len() != self.layout.specs.len() {
            return Err(Error::Shape(format!(
                "expected {} parameter tensors, found {}",
                self.layout.specs.len(),
                params.len()
            )));
        }
        for (spec, p) in self.layout.specs.iter().zip(params.iter()) {
            if spec.name != p.name || spec.shape != p.value.shape() {
                return Err(Error::Shape(format!(
                    "expected `{}` {:?}, found `{}` {:?}",
                    spec.name,
                    spec.shape,
                    p.name,
                    p.value.shape()
                )));
            }
        }
        Ok(())
    }

    fn check_record(&self, record: &FeatureRecord) -> Result<()> {
        let uses_emb = self.cfg.branches.iter().any(|b| b.feature == Feature::Emb);
        if record.l_max() != self.cfg.l_max
            || (uses_emb && record.d_emb() != self.cfg.d_emb)
            || record.true_len == 0
            || record.true_len > record.l_max()
        {
            return Err(Error::Shape(format!(
                "record `{}` (l_max {}, d_emb {}, true_len {}) does not fit the model (l_max {}, d_emb {})",
                record.id,
                record.l_max(),
                record.d_emb(),
                record.true_len,
                self.cfg.l_max,
                self.cfg.d_emb
            )));
        }
        Ok(())
    }

    pub fn forward<T: Real>(&self, params: &ParamStore<T>, record: &FeatureRecord) -> Result<Prediction<T>> {
        self.forward_tape(params, record).map(|(p, _)| p)
    }

    pub fn forward_tape<T: Real>(
        &self,
        params: &ParamStore<T>,
        record: &FeatureRecord,
    ) -> Result<(Prediction<T>, Tape<T>)> {
        self.check_record(record)?;
        let cfg = &self.cfg;
        let span = if cfg.pooling_masked { record.true_len } else { cfg.l_max };

        let mut branches = Vec::with_capacity(self.layout.branches.len());
        let mut hs = Vec::with_capacity(self.layout.branches.len());
        for &(feature, enc) in &self.layout.branches {
            let raw: &[f32] = match feature {
                Feature::Ll => &record.log_likelihoods,
                Feature::Ent => &record.entropies,
                Feature::Emb => &record.embeddings,
            };
            let width = cfg.input_width(feature);
            let input: Vec<T> = raw[..span * width].iter().map(|&v| T::of(v as f64)).collect();
            let mut h = vec![T::zero(); cfg.d_h];
            match enc {
                EncoderIdx::MlpPool { l1, l2 } => {
                    let mut pooled = vec![T::zero(); width];
                    mean_rows(&input, width, span, &mut pooled);
                    let mut hidden = vec![T::zero(); l1.n_out];
                    dense(&pooled, params.value(l1.w), params.value(l1.b), &mut hidden);
                    relu_inplace(&mut hidden);
                    dense(&hidden, params.value(l2.w), params.value(l2.b), &mut h);
                    branches.push(BranchTape::MlpPool { pooled, hidden });
                }
                EncoderIdx::Cnn { c1, c2 } => {
                    let mut act1 = vec![T::zero(); span * c1.c_out];
                    conv1d(&input, span, c1.c_in, params.value(c1.w), params.value(c1.b), &mut act1);
                    relu_inplace(&mut act1);
                    let mut act2 = vec![T::zero(); span * c2.c_out];
                    conv1d(&act1, span, c2.c_in, params.value(c2.w), params.value(c2.b), &mut act2);
                    relu_inplace(&mut act2);
                    mean_rows(&act2, c2.c_out, span, &mut h);
                    branches.push(BranchTape::Cnn {
                        input,
                        span,
                        act1,
                        act2,
                    });
                }
            }
            hs.push(h);
        }

        let mut fused = vec![T::zero(); cfg.d_h];
        let (fusion, attention) = match self.layout.fusion {
            FusionIdx::Attention { wa, w } => {
                let zero_bias = vec![T::zero(); cfg.d_a];
                let mut proj = Vec::with_capacity(hs.len());
                let mut scores = Vec::with_capacity(hs.len());
                for h in &hs {
                    let mut u = vec![T::zero(); cfg.d_a];
                    dense(h, params.value(wa), &zero_bias, &mut u);
                    u.iter_mut().for_each(|v| *v = v.tanh());
                    scores.push(dot(params.value(w), &u));
                    proj.push(u);
                }
                let alpha = softmax(&scores);
                for (h, &a) in hs.iter().zip(&alpha) {
                    axpy(a, h, &mut fused);
                }
                let attention = Some(alpha.clone());
                (FusionTape::Attention { proj, alpha }, attention)
            }
            FusionIdx::Concat { l1, l2 } => {
                let joined: Vec<T> = hs.iter().flatten().copied().collect();
                let mut hidden = vec![T::zero(); l1.n_out];
                dense(&joined, params.value(l1.w), params.value(l1.b), &mut hidden);
                relu_inplace(&mut hidden);
                dense(&hidden, params.value(l2.w), params.value(l2.b), &mut fused);
                (FusionTape::Concat { joined, hidden }, None)
            }
        };

        let head = self.layout.head;
        let logit = dot(params.value(head.w), &fused) + params.value(head.b)[0];
        let prediction = Prediction {
            logit,
            p: sigmoid(logit),
            attention,
        };
        let tape = Tape {
            branches,
            hs,
            fusion,
            fused,
            logit,
        };
        Ok((prediction, tape))
    }

    /// Accumulates `upstream * d(logit)/d(param)` into every gradient buffer.
    pub fn backward<T: Real>(&self, tape: &Tape<T>, params: &mut ParamStore<T>, upstream: T) {
        let cfg = &self.cfg;
        let head = self.layout.head;
        let mut d_fused = vec![T::zero(); cfg.d_h];
        {
            let w = params.value(head.w).to_vec();
            d_fused.iter_mut().zip(&w).for_each(|(d, &wv)| *d = upstream * wv);
            let p = params.param_mut(head.w);
            axpy(upstream, &tape.fused, p.grad.data_mut());
            let pb = params.param_mut(head.b);
            pb.grad.data_mut()[0] = pb.grad.data()[0] + upstream;
        }

        let mut d_hs: Vec<Vec<T>> = vec![vec![T::zero(); cfg.d_h]; tape.hs.len()];
        match (&self.layout.fusion, &tape.fusion) {
            (FusionIdx::Attention { wa, w }, FusionTape::Attention { proj, alpha }) => {
                let d_alpha: Vec<T> = tape.hs.iter().map(|h| dot(&d_fused, h)).collect();
                let mean = alpha.iter().zip(&d_alpha).fold(T::zero(), |acc, (&a, &d)| acc + a * d);
                let wa_val = params.value(*wa).to_vec();
                let w_val = params.value(*w).to_vec();
                for (f, h) in tape.hs.iter().enumerate() {
                    axpy(alpha[f], &d_fused, &mut d_hs[f]);
                    let d_score = alpha[f] * (d_alpha[f] - mean);
                    if d_score == T::zero() {
                        continue;
                    }
                    let u = &proj[f];
                    axpy(d_score, u, params.param_mut(*w).grad.data_mut());
                    let d_pre: Vec<T> = u
                        .iter()
                        .zip(&w_val)
                        .map(|(&uv, &wv)| d_score * wv * (T::one() - uv * uv))
                        .collect();
                    let mut d_h = vec![T::zero(); cfg.d_h];
                    let mut unused_db = vec![T::zero(); cfg.d_a];
                    dense_backward(
                        h,
                        &wa_val,
                        &d_pre,
                        Some(&mut d_h),
                        params.param_mut(*wa).grad.data_mut(),
                        &mut unused_db,
                    );
                    axpy(T::one(), &d_h, &mut d_hs[f]);
                }
            }
            (FusionIdx::Concat { l1, l2 }, FusionTape::Concat { joined, hidden }) => {
                let mut d_hidden = vec![T::zero(); l1.n_out];
                dense_layer_backward(params, *l2, hidden, &d_fused, Some(&mut d_hidden));
                relu_backward_inplace(hidden, &mut d_hidden);
                let mut d_joined = vec![T::zero(); joined.len()];
                dense_layer_backward(params, *l1, joined, &d_hidden, Some(&mut d_joined));
                for (d_h, chunk) in d_hs.iter_mut().zip(d_joined.chunks_exact(cfg.d_h)) {
                    d_h.copy_from_slice(chunk);
                }
            }
            _ => unreachable!("tape produced by a different network"),
        }

        for ((&(_, enc), bt), d_h) in self.layout.branches.iter().zip(&tape.branches).zip(&d_hs) {
            match (enc, bt) {
                (EncoderIdx::MlpPool { l1, l2 }, BranchTape::MlpPool { pooled, hidden }) => {
                    let mut d_hidden = vec![T::zero(); l1.n_out];
                    dense_layer_backward(params, l2, hidden, d_h, Some(&mut d_hidden));
                    relu_backward_inplace(hidden, &mut d_hidden);
                    dense_layer_backward(params, l1, pooled, &d_hidden, None);
                }
                (
                    EncoderIdx::Cnn { c1, c2 },
                    BranchTape::Cnn {
                        input,
                        span,
                        act1,
                        act2,
                    },
                ) => {
                    let span = *span;
                    let scale = T::one() / T::of(span as f64);
                    let mut d_act2 = vec![T::zero(); span * c2.c_out];
                    for row in d_act2.chunks_exact_mut(c2.c_out) {
                        row.iter_mut().zip(d_h).for_each(|(d, &g)| *d = g * scale);
                    }
                    relu_backward_inplace(act2, &mut d_act2);
                    let mut d_act1 = vec![T::zero(); span * c1.c_out];
                    conv_layer_backward(params, c2, act1, span, &d_act2, Some(&mut d_act1));
                    relu_backward_inplace(act1, &mut d_act1);
                    conv_layer_backward(params, c1, input, span, &d_act1, None);
                }
                _ => unreachable!("tape produced by a different network"),
            }
        }
    }
}

fn dense_layer_backward<T: Real>(params: &mut ParamStore<T>, idx: DenseIdx, x: &[T], dy: &[T], dx: Option<&mut [T]>) {
    let w = params.value(idx.w).to_vec();
    let mut db = params.param(idx.b).grad.data().to_vec();
    dense_backward(x, &w, dy, dx, params.param_mut(idx.w).grad.data_mut(), &mut db);
    params.param_mut(idx.b).grad.data_mut().copy_from_slice(&db);
}

fn conv_layer_backward<T: Real>(
    params: &mut ParamStore<T>,
    idx: ConvIdx,
    x: &[T],
    span: usize,
    dy: &[T],
    dx: Option<&mut [T]>,
) {
    let k = params.value(idx.w).to_vec();
    let mut db = params.param(idx.b).grad.data().to_vec();
    conv1d_backward(
        x,
        span,
        idx.c_in,
        &k,
        dy,
        dx,
        params.param_mut(idx.w).grad.data_mut(),
        &mut db,
    );
    params.param_mut(idx.b).grad.data_mut().copy_from_slice(&db);
}

impl<T: Real> Tape<T> {
    /// Which ReLU units were active; used to detect kink crossings in finite differences.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for b in &self.branches {
            match b {
                BranchTape::MlpPool { hidden, .. } => out.extend(hidden.iter().map(|&v| v > T::zero())),
                BranchTape::Cnn { act1, act2, .. } => out.extend(act1.iter().chain(act2).map(|&v| v > T::zero())),
            }
        }
        if let FusionTape::Concat { hidden, .. } = &self.fusion {
            out.extend(hidden.iter().map(|&v| v > T::zero()));
        }
        out
    }

    /// Per-branch latent vectors in branch order.
    pub fn branch_outputs(&self) -> &[Vec<T>] {
        &self.hs
    }
}

/// A configured network with 32-bit parameters.
#[derive(Debug, Clone)]
pub struct HaluNet {
    network: Network,
    pub params: ParamStore<f32>,
}

impl HaluNet {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        let network = Network::new(cfg)?;
        let params = network.init_params(&mut Rng::new(seed))?;
        Ok(Self { network, params })
    }

    pub fn from_parts(cfg: ModelConfig, params: ParamStore<f32>) -> Result<Self> {
        let network = Network::new(cfg)?;
        network.check_params(&params)?;
        Ok(Self { network, params })
    }

    pub fn config(&self) -> &ModelConfig {
        self.network.config()
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn forward(&self, record: &FeatureRecord) -> Result<Prediction<f32>> {
        self.network.forward(&self.params, record)
    }

    /// Hallucination probability for each record.
    pub fn score_all(&self, records: &[FeatureRecord]) -> Result<Vec<f64>> {
        records.iter().map(|r| self.forward(r).map(|p| p.p as f64)).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.params, self.config(), path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let (params, cfg) = load_checkpoint(path)?;
        Self::from_parts(cfg, params)
    }
}

pub const CHECKPOINT_FORMAT: &str = "halunet-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<ParamSpec>,
}

/// Writes a JSON header line (format, version, config, tensor manifest)
/// followed by every tensor as little-endian f32 in manifest order.
pub fn write_checkpoint(params: &ParamStore<f32>, cfg: &ModelConfig, mut out: impl Write) -> Result<()> {
    let network = Network::new(cfg.clone())?;
    network.check_params(params)?;
    let header = CheckpointHeader {
        format: CHECKPOINT_FORMAT.into(),
        version: CHECKPOINT_VERSION,
        config: cfg.clone(),
        tensors: network.param_specs().to_vec(),
    };
    let io = |e: std::io::Error| Error::io("<checkpoint>", e);
    serde_json::to_writer(&mut out, &header).map_err(|e| io(e.into()))?;
    out.write_all(b"\n").map_err(io)?;
    for p in params.iter() {
        for v in p.value.data() {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    Ok(())
}

pub fn read_checkpoint(reader: impl Read) -> Result<(ParamStore<f32>, ModelConfig)> {
    let mut reader = BufReader::new(reader);
    let mut line = Vec::new();
    reader
        .read_until(b'\n', &mut line)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let header: CheckpointHeader =
        serde_json::from_slice(&line).map_err(|e| Error::Checkpoint(format!("unreadable header: {e}")))?;
    if header.format != CHECKPOINT_FORMAT {
        return Err(Error::Checkpoint(format!("unknown format `{}`", header.format)));
    }
    if header.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} is not supported (expected {CHECKPOINT_VERSION})",
            header.version
        )));
    }
    let network = Network::new(header.config.clone())?;
    let expected = network.param_specs();
    let manifest_ok = expected.len() == header.tensors.len()
        && expected
            .iter()
            .zip(&header.tensors)
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !manifest_ok {
        return Err(Error::Checkpoint(
            "tensor manifest does not match the embedded model configuration".into(),
        ));
    }

    let mut blob = Vec::new();
    reader
        .read_to_end(&mut blob)
        .map_err(|e| Error::io("<checkpoint>", e))?;
    let total: usize = expected.iter().map(|s| s.shape.iter().product::<usize>()).sum();
    if blob.len() != total * 4 {
        return Err(Error::Checkpoint(format!(
            "expected {} bytes of tensor data, found {} (truncated or corrupt)",
            total * 4,
            blob.len()
        )));
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
    let mut store = ParamStore::new();
    for spec in expected {
        let n = spec.shape.iter().product();
        let data: Vec<f32> = values.by_ref().take(n).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Checkpoint(format!("non-finite value in `{}`", spec.name)));
        }
        store.insert(spec.name.clone(), Tensor::from_vec(&spec.shape, data)?)?;
    }
    Ok((store, header.config))
}

pub fn save_checkpoint(params: &ParamStore<f32>, cfg: &ModelConfig, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    write_checkpoint(params, cfg, &mut out)?;
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ParamStore<f32>, ModelConfig)> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(file)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate, SynthConfig};

    fn sample_records(n: usize, d_emb: usize, seed: u64) -> Vec<FeatureRecord> {
        let cfg = SynthConfig {
            n_records: n,
            d_emb,
            separability: 0.5,
            seed,
            ..SynthConfig::default()
        };
        generate(&cfg).unwrap().records
    }

    fn all_configs(d_emb: usize) -> Vec<ModelConfig> {
        let mut out = Vec::new();
        for preset in [EncoderPreset::AllCnn, EncoderPreset::Mixed, EncoderPreset::AllMlp] {
            for fusion in [FusionKind::Attention, FusionKind::ConcatMlp] {
                let mut cfg = ModelConfig::with_preset(&Feature::ALL, preset, fusion, d_emb);
                cfg.d_conv = 8;
                cfg.d_h = 8;
                cfg.d_mlp = 6;
                cfg.d_a = 5;
                out.push(cfg);
            }
        }
        out
    }

    #[test]
    fn config_validation() {
        let mut cfg = ModelConfig::new(4);
        assert!(cfg.validate().is_ok());
        cfg.d_conv = 32;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(4);
        cfg.branches.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::new(4);
        cfg.branches.push(cfg.branches[0]);
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::new(0).validate().is_err());
    }

    #[test]
    fn presets() {
        let mixed = ModelConfig::with_preset(&Feature::ALL, EncoderPreset::Mixed, FusionKind::Attention, 4);
        let kinds: Vec<_> = mixed.branches.iter().map(|b| b.encoder).collect();
        assert_eq!(kinds, [EncoderKind::MlpPool, EncoderKind::MlpPool, EncoderKind::Cnn]);
        assert_eq!("all-mlp".parse::<EncoderPreset>().unwrap(), EncoderPreset::AllMlp);
        assert!("cnn".parse::<EncoderPreset>().is_err());
        assert_eq!("concat".parse::<FusionKind>().unwrap(), FusionKind::ConcatMlp);
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let records = sample_records(6, 4, 1);
        for cfg in all_configs(4).into_iter().filter(|c| c.fusion == FusionKind::Attention) {
            let net = HaluNet::new(cfg, 3).unwrap();
            for r in &records {
                let a = net.forward(r).unwrap().attention.unwrap();
                assert_eq!(a.len(), 3);
                assert!((a.iter().sum::<f32>() - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn single_feature_attention_is_identity() {
        let records = sample_records(3, 4, 2);
        let mut cfg = ModelConfig::with_preset(&[Feature::Emb], EncoderPreset::AllCnn, FusionKind::Attention, 4);
        cfg.d_conv = 8;
        cfg.d_h = 8;
        let net = Network::new(cfg).unwrap();
        let params: ParamStore<f64> = net.init_params(&mut Rng::new(4)).unwrap();
        for r in &records {
            let (pred, tape) = net.forward_tape(&params, r).unwrap();
            assert_eq!(pred.attention.unwrap(), vec![1.0]);
            assert_eq!(tape.fused, tape.hs[0]);
        }
    }

    #[test]
    fn padding_garbage_does_not_change_logits() {
        let records = sample_records(8, 4, 5);
        let mut rng = Rng::new(99);
        for cfg in all_configs(4) {
            let net = HaluNet::new(cfg, 7).unwrap();
            for r in &records {
                let mut dirty = r.clone();
                let d = dirty.d_emb();
                for t in dirty.true_len..dirty.l_max() {
                    dirty.log_likelihoods[t] = rng.normal() as f32 * 100.0;
                    dirty.entropies[t] = rng.normal() as f32 * 100.0;
                    for j in 0..d {
                        dirty.embeddings[t * d + j] = rng.normal() as f32 * 100.0;
                    }
                }
                let a = net.forward(r).unwrap();
                let b = net.forward(&dirty).unwrap();
                assert_eq!(a.logit.to_bits(), b.logit.to_bits());
            }
        }
    }

    #[test]
    fn unmasked_pooling_sees_padding() {
        let records = sample_records(4, 4, 6);
        let mut cfg = all_configs(4).remove(0);
        cfg.pooling_masked = false;
        let net = HaluNet::new(cfg, 1).unwrap();
        let r = records.iter().find(|r| r.true_len < r.l_max()).unwrap();
        let mut dirty = r.clone();
        dirty.entropies[r.l_max() - 1] = 5.0;
        assert_ne!(net.forward(r).unwrap().logit, net.forward(&dirty).unwrap().logit);
    }

    #[test]
    fn branch_permutation_under_attention() {
        let records = sample_records(5, 4, 8);
        let base = all_configs(4)
            .into_iter()
            .find(|c| c.fusion == FusionKind::Attention)
            .unwrap();
        let mut permuted = base.clone();
        permuted.branches = vec![base.branches[2], base.branches[0], base.branches[1]];
        let net_a = Network::new(base).unwrap();
        let net_b = Network::new(permuted).unwrap();
        let pa: ParamStore<f64> = net_a.init_params(&mut Rng::new(10)).unwrap();
        let mut pb: ParamStore<f64> = net_b.init_params(&mut Rng::new(11)).unwrap();
        for p in pb.iter_mut() {
            let src = pa.get(&p.name).unwrap();
            p.value.data_mut().copy_from_slice(src.value.data());
        }
        for r in &records {
            let a = net_a.forward(&pa, r).unwrap().logit;
            let b = net_b.forward(&pb, r).unwrap().logit;
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn deterministic_forward_and_init() {
        let r = &sample_records(1, 4, 9)[0];
        let cfg = all_configs(4).remove(1);
        let a = HaluNet::new(cfg.clone(), 5).unwrap();
        let b = HaluNet::new(cfg.clone(), 5).unwrap();
        let c = HaluNet::new(cfg, 6).unwrap();
        assert!(a.params.same_values(&b.params));
        assert!(!a.params.same_values(&c.params));
        assert_eq!(
            a.forward(r).unwrap().logit.to_bits(),
            b.forward(r).unwrap().logit.to_bits()
        );
    }

    #[test]
    fn biases_start_at_zero() {
        let net = HaluNet::new(ModelConfig::new(4), 0).unwrap();
        for p in net.params.iter().filter(|p| p.name.ends_with(".bias")) {
            assert!(p.value.data().iter().all(|&v| v == 0.0), "{}", p.name);
        }
    }

    #[test]
    fn predict_threshold() {
        assert_eq!(predict(0.5), 1);
        assert_eq!(predict(0.4999), 0);
        assert_eq!(predict(1.0), 1);
        assert_eq!(predict(0.0), 0);
    }

    #[test]
    fn record_mismatch_is_an_error() {
        let r = &sample_records(1, 4, 9)[0];
        let net = HaluNet::new(ModelConfig::new(8), 0).unwrap();
        assert!(matches!(net.forward(r), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_roundtrip() {
        let records = sample_records(4, 4, 12);
        for cfg in all_configs(4) {
            let net = HaluNet::new(cfg, 13).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&net.params, net.config(), &mut buf).unwrap();
            let (params, cfg) = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(&cfg, net.config());
            assert!(params.same_values(&net.params));
            let back = HaluNet::from_parts(cfg, params).unwrap();
            for r in &records {
                assert_eq!(
                    net.forward(r).unwrap().logit.to_bits(),
                    back.forward(r).unwrap().logit.to_bits()
                );
            }
        }
    }

    #[test]
    fn checkpoint_errors() {
        let net = HaluNet::new(all_configs(4).remove(0), 1).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&net.params, net.config(), &mut buf).unwrap();
        let split = buf.iter().position(|&b| b == b'\n').unwrap();
        let header = String::from_utf8(buf[..split].to_vec()).unwrap();
        let blob = &buf[split..];

        let truncated = &buf[..buf.len() - 3];
        assert!(matches!(read_checkpoint(truncated), Err(Error::Checkpoint(_))));

        let tampered = header.replacen("[8,1,3]", "[8,2,3]", 1);
        assert_ne!(tampered, header);
        let mut bad = tampered.into_bytes();
        bad.extend_from_slice(blob);
        let err = read_checkpoint(bad.as_slice()).unwrap_err();
        assert!(err.to_string().contains("manifest"), "{err}");

        let mut bad = header.replacen("\"version\":1", "\"version\":9", 1).into_bytes();
        bad.extend_from_slice(blob);
        assert!(read_checkpoint(bad.as_slice())
            .unwrap_err()
            .to_string()
            .contains("version"));
    }
}
