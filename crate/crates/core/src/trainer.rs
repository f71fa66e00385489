//! Mini-batch AdamW training with early stopping on validation AUROC.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::Dataset;
use crate::metrics::auroc;
use crate::model::{ModelConfig, Network};
use crate::nn::{bce_grad, bce_loss, ParamStore, Real};
use crate::rng::Rng;

const INIT_STREAM: u64 = 0;
const SPLIT_STREAM: u64 = 1;
const EPOCH_STREAM_BASE: u64 = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub val_fraction: f64,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            batch_size: 32,
            max_epochs: 20,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            val_fraction: 0.1,
            patience: 5,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.into()));
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return fail("val_fraction must lie in (0, 1)");
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return fail("batch_size, max_epochs and patience must be positive");
        }
        if self.weight_decay.is_nan() || self.weight_decay < 0.0 || self.eps.is_nan() || self.eps <= 0.0 {
            return fail("weight_decay must be non-negative and eps positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("betas must lie in [0, 1)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_auroc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Index into `epochs` of the first maximum validation AUROC.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn best_val_auroc(&self) -> f64 {
        self.epochs[self.best_epoch].val_auroc
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

/// Stratified split: each label class is shuffled and `round(n_c * val_fraction)`
/// of it (at least one, leaving at least one) goes to validation. Both halves
/// keep the dataset's record order.
pub fn split_train_val(ds: &Dataset, val_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::Config("val_fraction must lie in (0, 1)".into()));
    }
    let mut rng = Rng::derive(seed, SPLIT_STREAM);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for label in [0u8, 1] {
        let mut class: Vec<usize> = (0..ds.len()).filter(|&i| ds.records[i].label == label).collect();
        if class.len() < 2 {
            return Err(Error::Data(format!(
                "label {label} has {} records; a stratified split needs at least 2",
                class.len()
            )));
        }
        rng.shuffle(&mut class);
        let n_val = ((class.len() as f64 * val_fraction).round() as usize).clamp(1, class.len() - 1);
        val.extend_from_slice(&class[..n_val]);
        train.extend_from_slice(&class[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&val)))
}

/// One decoupled-weight-decay Adam update at step `t` (1-based); zeroes the gradients.
pub fn adamw_step<T: Real>(params: &mut ParamStore<T>, cfg: &TrainConfig, t: u64) -> Result<()> {
    if t < 1 {
        return Err(Error::Config("AdamW step index starts at 1".into()));
    }
    let b1 = T::of(cfg.beta1);
    let b2 = T::of(cfg.beta2);
    let one = T::one();
    let correction1 = T::of(1.0 - cfg.beta1.powf(t as f64));
    let correction2 = T::of(1.0 - cfg.beta2.powf(t as f64));
    let lr = T::of(cfg.lr);
    let wd = T::of(cfg.weight_decay);
    let eps = T::of(cfg.eps);
    for p in params.iter_mut() {
        let (value, grad, m, v) = (p.value.data_mut(), p.grad.data_mut(), p.m.data_mut(), p.v.data_mut());
        for i in 0..value.len() {
            let g = grad[i];
            m[i] = b1 * m[i] + (one - b1) * g;
            v[i] = b2 * v[i] + (one - b2) * g * g;
            let m_hat = m[i] / correction1;
            let v_hat = v[i] / correction2;
            value[i] = value[i] - lr * (m_hat / (v_hat.sqrt() + eps) + wd * value[i]);
            grad[i] = T::zero();
        }
    }
    Ok(())
}

/// Parameters the trainer starts from.
pub fn initial_params(mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<ParamStore<f32>> {
    Network::new(mcfg.clone())?.init_params(&mut Rng::derive(tcfg.seed, INIT_STREAM))
}

/// Visiting order of the training split in `epoch` (0-based).
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    Rng::derive(seed, EPOCH_STREAM_BASE + epoch as u64).shuffle(&mut order);
    order
}

pub fn validation_auroc(net: &Network, params: &ParamStore<f32>, val: &Dataset) -> Result<f64> {
    let scores = val
        .records
        .iter()
        .map(|r| net.forward(params, r).map(|p| p.p as f64))
        .collect::<Result<Vec<_>>>()?;
    auroc(&scores, &val.labels())
}

pub fn train(ds: &Dataset, mcfg: &ModelConfig, tcfg: &TrainConfig) -> Result<(ParamStore<f32>, TrainReport)> {
    train_with_callback(ds, mcfg, tcfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after each epoch is scored.
pub fn train_with_callback(
    ds: &Dataset,
    mcfg: &ModelConfig,
    tcfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ParamStore<f32>, TrainReport)> {
    tcfg.validate()?;
    let net = Network::new(mcfg.clone())?;
    if ds.l_max != mcfg.l_max || ds.d_emb != mcfg.d_emb {
        return Err(Error::Config(format!(
            "dataset has l_max {} and d_emb {}, model expects {} and {}",
            ds.l_max, ds.d_emb, mcfg.l_max, mcfg.d_emb
        )));
    }
    ds.validate()?;
    let (train_set, val_set) = split_train_val(ds, tcfg.val_fraction, tcfg.seed)?;
    let mut params = initial_params(mcfg, tcfg)?;
    let mut best = params.clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: 0,
        stopped_early: false,
    };
    let mut step = 0u64;
    let mut since_best = 0;

    for epoch in 0..tcfg.max_epochs {
        let order = epoch_order(train_set.len(), tcfg.seed, epoch);
        let mut epoch_loss = 0.0;
        for (batch_idx, batch) in order.chunks(tcfg.batch_size).enumerate() {
            params.zero_grad();
            let scale = 1.0 / batch.len() as f32;
            let mut batch_loss = 0.0f64;
            for &i in batch {
                let r = &train_set.records[i];
                let (pred, tape) = net.forward_tape(&params, r)?;
                batch_loss += bce_loss(pred.logit, r.label) as f64;
                net.backward(&tape, &mut params, bce_grad(pred.logit, r.label) * scale);
            }
            if !batch_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    batch: batch_idx,
                    loss: batch_loss / batch.len() as f64,
                });
            }
            epoch_loss += batch_loss;
            step += 1;
            adamw_step(&mut params, tcfg, step)?;
        }
        if params.iter().any(|p| !p.value.is_finite()) {
            return Err(Error::Divergence {
                epoch,
                batch: order.len().div_ceil(tcfg.batch_size) - 1,
                loss: f64::NAN,
            });
        }

        let val_auroc = validation_auroc(&net, &params, &val_set).map_err(|e| match e {
            Error::Metric(_) => Error::Divergence {
                epoch,
                batch: order.len().div_ceil(tcfg.batch_size) - 1,
                loss: f64::NAN,
            },
            other => other,
        })?;
        let stats = EpochStats {
            epoch,
            train_loss: epoch_loss / train_set.len() as f64,
            val_auroc,
        };
        on_epoch(&stats);
        let improved = report.epochs.is_empty() || stats.val_auroc > report.best_val_auroc();
        report.epochs.push(stats);
        if improved {
            report.best_epoch = epoch;
            best.copy_values_from(&params);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= tcfg.patience {
                report.stopped_early = epoch + 1 < tcfg.max_epochs;
                break;
            }
        }
    }
    Ok((best.cast(), report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureRecord;
    use crate::model::{EncoderPreset, Feature, FusionKind};
    use crate::nn::Tensor;
    use crate::synth::{generate, SynthConfig};

    fn labelled(n0: usize, n1: usize) -> Dataset {
        let records = (0..n0 + n1)
            .map(|i| {
                FeatureRecord::from_tokens(format!("r{i}"), false, u8::from(i >= n0), &[-0.1], &[0.1], &[], 0, 5)
                    .unwrap()
            })
            .collect();
        Dataset::new(records, 0, 5).unwrap()
    }

    fn scalar_store(theta: f32, g: f32) -> ParamStore<f32> {
        let mut store = ParamStore::new();
        store
            .insert("theta", Tensor::from_vec(&[1], vec![theta]).unwrap())
            .unwrap();
        store.param_mut(0).grad.data_mut()[0] = g;
        store
    }

    #[test]
    fn stratified_split() {
        let ds = labelled(50, 50);
        let (train, val) = split_train_val(&ds, 0.1, 3).unwrap();
        assert_eq!(val.records.iter().filter(|r| r.label == 0).count(), 5);
        assert_eq!(val.records.iter().filter(|r| r.label == 1).count(), 5);
        let mut ids: Vec<_> = train.records.iter().chain(&val.records).map(|r| r.id.clone()).collect();
        ids.sort();
        let mut all: Vec<_> = ds.records.iter().map(|r| r.id.clone()).collect();
        all.sort();
        assert_eq!(ids, all);
        let (train2, val2) = split_train_val(&ds, 0.1, 3).unwrap();
        assert_eq!((train, val), (train2, val2));
    }

    #[test]
    fn split_needs_two_per_class() {
        assert!(split_train_val(&labelled(10, 1), 0.1, 0).is_err());
        assert!(split_train_val(&labelled(10, 0), 0.1, 0).is_err());
        assert!(split_train_val(&labelled(2, 2), 0.1, 0).is_ok());
    }

    #[test]
    fn adamw_pure_decay() {
        let cfg = TrainConfig::default();
        let mut store = scalar_store(2.0, 0.0);
        adamw_step(&mut store, &cfg, 1).unwrap();
        let expected = 2.0f32 - (cfg.lr as f32) * (cfg.weight_decay as f32) * 2.0;
        assert!((store.value(0)[0] - expected).abs() < 1e-7);
        assert!(adamw_step(&mut store, &cfg, 0).is_err());
    }

    #[test]
    fn adamw_constant_gradient_moves_by_lr() {
        let cfg = TrainConfig {
            weight_decay: 0.0,
            lr: 1e-3,
            ..TrainConfig::default()
        };
        let mut store = scalar_store(0.0, 0.0);
        let mut prev = 0.0f32;
        for t in 1..=200 {
            store.param_mut(0).grad.data_mut()[0] = -3.0;
            adamw_step(&mut store, &cfg, t).unwrap();
            let step = store.value(0)[0] - prev;
            prev = store.value(0)[0];
            assert!((step - 1e-3).abs() < 1e-6, "t {t}: {step}");
        }
        assert_eq!(store.param(0).grad.data()[0], 0.0);
    }

    #[test]
    fn adamw_three_steps_match_recurrence() {
        let cfg = TrainConfig {
            lr: 0.1,
            weight_decay: 0.01,
            ..TrainConfig::default()
        };
        // Independent f64 recurrence.
        let (mut theta, mut m, mut v) = (1.0f64, 0.0f64, 0.0f64);
        let mut expected = Vec::new();
        for t in 1..=3 {
            let g = 1.0;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(t));
            let v_hat = v / (1.0 - 0.999f64.powi(t));
            theta -= 0.1 * (m_hat / (v_hat.sqrt() + 1e-8) + 0.01 * theta);
            expected.push(theta);
        }
        let mut store: ParamStore<f64> = ParamStore::new();
        store
            .insert("theta", Tensor::from_vec(&[1], vec![1.0]).unwrap())
            .unwrap();
        for (t, want) in (1..=3).zip(expected) {
            store.param_mut(0).grad.data_mut()[0] = 1.0;
            adamw_step(&mut store, &cfg, t).unwrap();
            assert!((store.value(0)[0] - want).abs() < 1e-12);
        }
    }

    fn small_model(d_emb: usize) -> ModelConfig {
        let mut cfg = ModelConfig::with_preset(&Feature::ALL, EncoderPreset::Mixed, FusionKind::ConcatMlp, d_emb);
        cfg.d_conv = 16;
        cfg.d_h = 16;
        cfg.d_mlp = 16;
        cfg.d_a = 16;
        cfg
    }

    fn synth(n: usize, seed: u64) -> Dataset {
        generate(&SynthConfig {
            n_records: n,
            d_emb: 8,
            separability: 1.0,
            seed,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn first_batch_loss_near_ln2() {
        let ds = generate(&SynthConfig {
            n_records: 400,
            seed: 8,
            ..SynthConfig::default()
        })
        .unwrap();
        for preset in [EncoderPreset::AllCnn, EncoderPreset::Mixed, EncoderPreset::AllMlp] {
            for fusion in [FusionKind::Attention, FusionKind::ConcatMlp] {
                let mcfg = ModelConfig::with_preset(&Feature::ALL, preset, fusion, ds.d_emb);
                let net = Network::new(mcfg.clone()).unwrap();
                for seed in 0..5 {
                    let tcfg = TrainConfig {
                        seed,
                        ..TrainConfig::default()
                    };
                    let (train_set, _) = split_train_val(&ds, tcfg.val_fraction, seed).unwrap();
                    let params = initial_params(&mcfg, &tcfg).unwrap();
                    let batch = &epoch_order(train_set.len(), seed, 0)[..tcfg.batch_size];
                    let loss = batch
                        .iter()
                        .map(|&i| {
                            let r = &train_set.records[i];
                            bce_loss(net.forward(&params, r).unwrap().logit, r.label) as f64
                        })
                        .sum::<f64>()
                        / batch.len() as f64;
                    assert!(
                        (loss - std::f64::consts::LN_2).abs() < 0.15,
                        "{preset:?}/{fusion:?} seed {seed}: {loss}"
                    );
                }
            }
        }
    }

    #[test]
    fn training_is_deterministic_and_returns_best_epoch() {
        let ds = synth(300, 1);
        let mcfg = small_model(8);
        let tcfg = TrainConfig {
            lr: 3e-3,
            max_epochs: 6,
            seed: 4,
            ..TrainConfig::default()
        };
        let (pa, ra) = train(&ds, &mcfg, &tcfg).unwrap();
        let (pb, rb) = train(&ds, &mcfg, &tcfg).unwrap();
        assert_eq!(ra, rb);
        assert!(pa.same_values(&pb));

        let max = ra.epochs.iter().map(|e| e.val_auroc).fold(f64::NEG_INFINITY, f64::max);
        let first_max = ra.epochs.iter().position(|e| e.val_auroc == max).unwrap();
        assert_eq!(ra.best_epoch, first_max);

        let (_, val) = split_train_val(&ds, tcfg.val_fraction, tcfg.seed).unwrap();
        let net = Network::new(mcfg).unwrap();
        assert_eq!(validation_auroc(&net, &pa, &val).unwrap(), max);
    }

    #[test]
    fn early_stopping_with_patience() {
        let ds = synth(200, 2);
        let tcfg = TrainConfig {
            lr: 1e-9,
            weight_decay: 0.0,
            max_epochs: 20,
            patience: 1,
            ..TrainConfig::default()
        };
        let (_, report) = train(&ds, &small_model(8), &tcfg).unwrap();
        assert!(report.stopped_early);
        assert!(report.epochs.len() < 20);
    }

    #[test]
    fn divergence_is_reported() {
        let ds = synth(100, 3);
        let tcfg = TrainConfig {
            lr: 1e30,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        match train(&ds, &small_model(8), &tcfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn nan_validation_scores_are_divergence() {
        // Finite batch losses but NaN validation probabilities.
        let ds = generate(&SynthConfig {
            n_records: 20,
            d_emb: 4,
            seed: 1,
            ..SynthConfig::default()
        })
        .unwrap();
        let tcfg = TrainConfig {
            lr: 1e30,
            max_epochs: 3,
            ..TrainConfig::default()
        };
        match train(&ds, &ModelConfig::new(4), &tcfg) {
            Err(Error::Divergence { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn rejects_mismatched_dataset() {
        let ds = synth(50, 3);
        assert!(train(&ds, &small_model(4), &TrainConfig::default()).is_err());
        let bad = TrainConfig {
            val_fraction: 1.0,
            ..TrainConfig::default()
        };
        assert!(train(&ds, &small_model(8), &bad).is_err());
    }
}
