//! Synthetic feature datasets with a tunable amount of label signal.
//!
//! Each record draws its label first, then three conditionally independent
//! views of it:
//!
//! * token NLLs, log-normal around a record scale that grows by
//!   `1 + 2s` for hallucinated answers,
//! * token entropies, log-normal around a record scale that grows by
//!   `1 + 1.5s`,
//! * embeddings `prototype + noise + shift * direction`, where `direction` is
//!   a fixed unit vector, `shift = s + 0.5 z` and the noise widens by
//!   `1 + 0.5s`.
//!
//! Here `s = separability * label`, and every record-level scale also gets
//! its own log-normal jitter so no single view separates perfectly. The
//! number of random draws never depends on the label, so at
//! `separability = 0` labels are independent of features.

use crate::error::{Error, Result};
use crate::features::{Dataset, FeatureRecord, DEFAULT_L_MAX};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_records: usize,
    pub d_emb: usize,
    pub l_max: usize,
    pub separability: f64,
    pub hallucination_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_records: 1000,
            d_emb: 32,
            l_max: DEFAULT_L_MAX,
            separability: 1.0,
            hallucination_rate: 0.5,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.separability) {
            return Err(Error::Config(format!(
                "separability {} outside [0, 1]",
                self.separability
            )));
        }
        if !(self.hallucination_rate > 0.0 && self.hallucination_rate < 1.0) {
            return Err(Error::Config(format!(
                "hallucination_rate {} outside (0, 1)",
                self.hallucination_rate
            )));
        }
        if self.l_max < 3 {
            return Err(Error::Config("l_max must be at least 3".into()));
        }
        if self.d_emb == 0 {
            return Err(Error::Config("d_emb must be positive".into()));
        }
        Ok(())
    }
}

const NLL_BASE: f64 = 0.25;
const NLL_GAIN: f64 = 2.0;
const ENT_BASE: f64 = 0.6;
const ENT_GAIN: f64 = 1.5;
const RECORD_JITTER: f64 = 0.5;
const NLL_TOKEN_SD: f64 = 0.8;
const ENT_TOKEN_SD: f64 = 0.6;
const PROTOTYPE_SD: f64 = 0.5;
const EMB_NOISE_SD: f64 = 0.5;
const EMB_SHIFT_JITTER: f64 = 0.5;

/// Log-normal factor with unit mean.
fn lognormal(rng: &mut Rng, sd: f64) -> f64 {
    (sd * rng.normal() - 0.5 * sd * sd).exp()
}

pub fn generate(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = Rng::new(cfg.seed);
    let d = cfg.d_emb;
    let prototype: Vec<f64> = (0..d).map(|_| PROTOTYPE_SD * rng.normal()).collect();
    let mut direction: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
    let norm = direction
        .iter()
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt()
        .max(f64::MIN_POSITIVE);
    direction.iter_mut().for_each(|v| *v /= norm);

    let mut records = Vec::with_capacity(cfg.n_records);
    for i in 0..cfg.n_records {
        let label = u8::from(rng.bernoulli(cfg.hallucination_rate));
        let len = 3 + rng.below((cfg.l_max - 2) as u64) as usize;
        let context_present = rng.bernoulli(0.5);
        let s = cfg.separability * label as f64;

        let nll_scale = NLL_BASE * (1.0 + NLL_GAIN * s) * lognormal(&mut rng, RECORD_JITTER);
        let ent_scale = ENT_BASE * (1.0 + ENT_GAIN * s) * lognormal(&mut rng, RECORD_JITTER);
        let shift = s + EMB_SHIFT_JITTER * rng.normal();
        let noise_sd = EMB_NOISE_SD * (1.0 + 0.5 * s);

        let mut ll = Vec::with_capacity(len);
        let mut ent = Vec::with_capacity(len);
        let mut emb = Vec::with_capacity(len * d);
        for _ in 0..len {
            ll.push((-nll_scale * lognormal(&mut rng, NLL_TOKEN_SD)) as f32);
            ent.push((ent_scale * lognormal(&mut rng, ENT_TOKEN_SD)) as f32);
            for j in 0..d {
                let v = prototype[j] + noise_sd * rng.normal() + shift * direction[j];
                emb.push(v as f32);
            }
        }
        records.push(FeatureRecord::from_tokens(
            format!("r{i:06}"),
            context_present,
            label,
            &ll,
            &ent,
            &emb,
            d,
            cfg.l_max,
        )?);
    }
    Dataset::new(records, d, cfg.l_max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::write_dataset;

    fn bytes(ds: &Dataset) -> Vec<u8> {
        let mut buf = Vec::new();
        write_dataset(ds, &mut buf).unwrap();
        buf
    }

    #[test]
    fn deterministic() {
        let cfg = SynthConfig {
            n_records: 50,
            seed: 3,
            ..SynthConfig::default()
        };
        assert_eq!(bytes(&generate(&cfg).unwrap()), bytes(&generate(&cfg).unwrap()));
        let other = SynthConfig { seed: 4, ..cfg.clone() };
        assert_ne!(bytes(&generate(&other).unwrap()), bytes(&generate(&cfg).unwrap()));
    }

    #[test]
    fn lengths_and_validity() {
        let cfg = SynthConfig {
            n_records: 500,
            d_emb: 4,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        ds.validate().unwrap();
        assert!(ds.records.iter().all(|r| (3..=50).contains(&r.true_len)));
        assert!(ds.records.iter().any(|r| r.true_len == 3));
        assert!(ds.records.iter().any(|r| r.true_len == 50));
    }

    #[test]
    fn hallucination_rate_tracks_config() {
        for rate in [0.2, 0.5, 0.7] {
            let cfg = SynthConfig {
                n_records: 2000,
                d_emb: 2,
                hallucination_rate: rate,
                seed: 17,
                ..SynthConfig::default()
            };
            let ds = generate(&cfg).unwrap();
            let observed = ds.labels().iter().map(|&y| y as f64).sum::<f64>() / ds.len() as f64;
            assert!((observed - rate).abs() < 0.03, "rate {rate}: {observed}");
        }
    }

    fn baseline_aurocs(sep: f64, seed: u64, n: usize) -> [f64; 3] {
        use crate::baselines::{logistic_train, predictive_entropy, token_nll};
        use crate::metrics::auroc;
        let cfg = SynthConfig {
            n_records: n,
            d_emb: 4,
            separability: sep,
            seed,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        let y = ds.labels();
        let model = logistic_train(&ds, seed).unwrap();
        let score = |f: &dyn Fn(&FeatureRecord) -> f64| {
            let s: Vec<f64> = ds.records.iter().map(f).collect();
            auroc(&s, &y).unwrap()
        };
        [
            score(&predictive_entropy),
            score(&token_nll),
            score(&|r| model.predict_proba(r)),
        ]
    }

    #[test]
    fn separable_set_is_learnable_by_logistic() {
        let [_, _, logistic] = baseline_aurocs(1.0, 0, 2000);
        assert!(logistic >= 0.9, "{logistic}");
    }

    #[test]
    fn baseline_auroc_grows_with_separability() {
        let grid = [0.0, 0.25, 0.5, 0.75, 1.0];
        let means: Vec<[f64; 3]> = grid
            .iter()
            .map(|&sep| {
                let mut acc = [0.0; 3];
                for seed in 0..5 {
                    for (a, v) in acc.iter_mut().zip(baseline_aurocs(sep, seed, 400)) {
                        *a += v / 5.0;
                    }
                }
                acc
            })
            .collect();
        for w in means.windows(2) {
            for (k, (lo, hi)) in w[0].iter().zip(&w[1]).enumerate() {
                assert!(hi >= lo, "scorer {k}: {means:?}");
            }
        }
    }

    #[test]
    fn rejects_bad_config() {
        let bad = [
            SynthConfig {
                separability: 1.5,
                ..SynthConfig::default()
            },
            SynthConfig {
                hallucination_rate: 0.0,
                ..SynthConfig::default()
            },
            SynthConfig {
                l_max: 2,
                ..SynthConfig::default()
            },
            SynthConfig {
                d_emb: 0,
                ..SynthConfig::default()
            },
        ];
        for cfg in bad {
            assert!(generate(&cfg).is_err(), "{cfg:?}");
        }
    }
}
