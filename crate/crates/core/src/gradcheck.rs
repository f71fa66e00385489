//! Central finite-difference verification of the analytic gradients, run at 64-bit.

use crate::error::Result;
use crate::features::FeatureRecord;
use crate::model::{BranchConfig, EncoderKind, EncoderPreset, Feature, FusionKind, ModelConfig, Network};
use crate::nn::{bce_grad, bce_loss, ParamStore};
use crate::rng::Rng;
use crate::synth::{generate, SynthConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tolerance: f64,
    /// Denominator floor for the relative error, so gradients that are zero
    /// analytically compare on an absolute scale.
    pub abs_floor: f64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-3,
            tolerance: 1e-4,
            abs_floor: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Coordinates whose perturbation flipped a ReLU and so has no valid central difference.
    pub skipped: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub config: ModelConfig,
    pub tensors: Vec<TensorCheck>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.tensors.iter().map(|t| t.max_rel_error).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.tensors.iter().map(|t| t.checked).sum()
    }

    pub fn skipped(&self) -> usize {
        self.tensors.iter().map(|t| t.skipped).sum()
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// A small random architecture. Fusion alternates with `index` and the
/// encoder preset cycles every two indices, so consecutive indices cover every
/// preset/fusion pair; features, widths and pooling are drawn from `rng`.
pub fn random_small_config(index: usize, rng: &mut Rng) -> ModelConfig {
    let fusion = if index.is_multiple_of(2) {
        FusionKind::Attention
    } else {
        FusionKind::ConcatMlp
    };
    let preset = [EncoderPreset::AllCnn, EncoderPreset::Mixed, EncoderPreset::AllMlp][(index / 2) % 3];
    let mut features: Vec<Feature> = Feature::ALL.into_iter().filter(|_| rng.bernoulli(0.6)).collect();
    if features.is_empty() {
        features.push(Feature::ALL[rng.below(3) as usize]);
    }
    rng.shuffle(&mut features);
    let d_h = 2 + rng.below(4) as usize;
    ModelConfig {
        branches: features
            .iter()
            .map(|&feature| BranchConfig {
                feature,
                encoder: preset.encoder_for(feature),
            })
            .collect(),
        fusion,
        d_emb: 3,
        l_max: 6,
        d_conv: d_h,
        d_h,
        d_mlp: 2 + rng.below(4) as usize,
        d_a: 2 + rng.below(3) as usize,
        pooling_masked: rng.bernoulli(0.8),
    }
}

/// Records shaped for `cfg`.
pub fn sample_records(cfg: &ModelConfig, n: usize, seed: u64) -> Result<Vec<FeatureRecord>> {
    let ds = generate(&SynthConfig {
        n_records: n,
        d_emb: cfg.d_emb.max(1),
        l_max: cfg.l_max,
        separability: 1.0,
        hallucination_rate: 0.5,
        seed,
    })?;
    Ok(ds.records)
}

struct Evaluation {
    loss: f64,
    pattern: Vec<bool>,
}

fn evaluate(net: &Network, params: &ParamStore<f64>, records: &[FeatureRecord]) -> Result<Evaluation> {
    let mut loss = 0.0;
    let mut pattern = Vec::new();
    for r in records {
        let (pred, tape) = net.forward_tape(params, r)?;
        loss += bce_loss(pred.logit, r.label);
        pattern.extend(tape.relu_pattern());
    }
    Ok(Evaluation { loss, pattern })
}

/// Compares backprop against central differences of the summed BCE over `records`
/// for every scalar parameter.
pub fn check_gradients(
    cfg: &ModelConfig,
    records: &[FeatureRecord],
    seed: u64,
    check: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let net = Network::new(cfg.clone())?;
    let mut params: ParamStore<f64> = net.init_params(&mut Rng::new(seed))?;

    params.zero_grad();
    for r in records {
        let (pred, tape) = net.forward_tape(&params, r)?;
        net.backward(&tape, &mut params, bce_grad(pred.logit, r.label));
    }
    let base = evaluate(&net, &params, records)?;

    let mut tensors = Vec::with_capacity(params.len());
    for idx in 0..params.len() {
        let analytic = params.param(idx).grad.data().to_vec();
        let mut result = TensorCheck {
            name: params.param(idx).name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            skipped: 0,
        };
        for (j, &a) in analytic.iter().enumerate() {
            let original = params.param(idx).value.data()[j];
            params.param_mut(idx).value.data_mut()[j] = original + check.eps;
            let plus = evaluate(&net, &params, records)?;
            params.param_mut(idx).value.data_mut()[j] = original - check.eps;
            let minus = evaluate(&net, &params, records)?;
            params.param_mut(idx).value.data_mut()[j] = original;

            if plus.pattern != base.pattern || minus.pattern != base.pattern {
                result.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * check.eps);
            result.max_rel_error = result.max_rel_error.max(relative_error(a, numeric, check.abs_floor));
            result.checked += 1;
        }
        tensors.push(result);
    }
    Ok(GradCheckReport {
        config: cfg.clone(),
        tensors,
        tolerance: check.tolerance,
    })
}

/// Checks `n_configs` random small architectures derived from `seed`.
pub fn check_random_configs(n_configs: usize, seed: u64, check: &GradCheckConfig) -> Result<Vec<GradCheckReport>> {
    let mut rng = Rng::new(seed);
    (0..n_configs)
        .map(|i| {
            let cfg = random_small_config(i, &mut rng);
            let records = sample_records(&cfg, 3, seed.wrapping_add(i as u64))?;
            check_gradients(&cfg, &records, seed.wrapping_add(1000 + i as u64), check)
        })
        .collect()
}

/// Whether the config exercises each encoder kind.
pub fn encoder_kinds(cfg: &ModelConfig) -> (bool, bool) {
    (
        cfg.branches.iter().any(|b| b.encoder == EncoderKind::MlpPool),
        cfg.branches.iter().any(|b| b.encoder == EncoderKind::Cnn),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(0.0, 0.0, 1e-8), 0.0);
        assert_eq!(relative_error(1.0, 0.5, 1e-8), 0.5);
        assert!(relative_error(0.0, 1e-12, 1e-8) < 1e-3);
    }

    #[test]
    fn default_presets_pass() {
        let check = GradCheckConfig::default();
        for report in check_random_configs(6, 42, &check).unwrap() {
            assert!(report.passed(), "{:?}", report);
            assert!(report.checked() > 0);
        }
    }

    #[test]
    fn detects_a_wrong_gradient() {
        // A scaled analytic gradient must be flagged.
        let mut rng = Rng::new(3);
        let cfg = random_small_config(1, &mut rng);
        let records = sample_records(&cfg, 2, 3).unwrap();
        let net = Network::new(cfg).unwrap();
        let mut params: ParamStore<f64> = net.init_params(&mut Rng::new(5)).unwrap();
        let (pred, tape) = net.forward_tape(&params, &records[0]).unwrap();
        net.backward(&tape, &mut params, 1.1 * bce_grad(pred.logit, records[0].label));
        let head = params.index_of("head.bias").unwrap();
        let analytic = params.param(head).grad.data()[0];
        let numeric = {
            let eps = 1e-3;
            let loss = |p: &ParamStore<f64>| {
                let pred = net.forward(p, &records[0]).unwrap();
                bce_loss(pred.logit, records[0].label)
            };
            let mut plus = params.clone();
            plus.param_mut(head).value.data_mut()[0] += eps;
            let mut minus = params.clone();
            minus.param_mut(head).value.data_mut()[0] -= eps;
            (loss(&plus) - loss(&minus)) / (2.0 * eps)
        };
        assert!(relative_error(analytic, numeric, 1e-8) > 0.05);
    }
}
