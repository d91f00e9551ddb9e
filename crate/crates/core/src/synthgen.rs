//! Synthetic classifier scores and Monte-Carlo coverage checks.
//!
//! Labels are drawn from `class_priors`. Given label `y`, the score vector is
//! Dirichlet with concentration `1` on every class plus `sharpness` on `y`,
//! so larger sharpness means a more confident and more accurate classifier.
//! An optional shift is applied to test records only: the label prior can be
//! replaced, and the label-conditional score distribution is tempered.
//! Raising the Dirichlet density to the power `1 / temperature` gives another
//! Dirichlet whose true-class boost is `sharpness / temperature`, so a
//! temperature above one yields flatter, less accurate scores.
//!
//! Trial `t` draws from ChaCha8 stream `t` of `seed` (see [`crate::rng`]).

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{calibrate, predict_batch, ScoreRecord};
use crate::error::{Error, Result};
use crate::metrics::coverage_audit;
use crate::rng::substream;

/// Group attribute written on records when cohorts are configured.
pub const COHORT_ATTRIBUTE: &str = "cohort";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub temperature: f64,
    #[serde(default)]
    pub prior_shift: Option<Vec<f64>>,
}

/// A named sub-population with its own difficulty. Records are assigned to
/// cohorts round-robin, so each cohort gets an exact share.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cohort {
    pub name: String,
    pub sharpness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_classes: usize,
    pub class_priors: Vec<f64>,
    pub sharpness: f64,
    #[serde(default)]
    pub shift: Option<ShiftSpec>,
    pub seed: u64,
    pub m_cal: usize,
    pub n_test: usize,
    pub n_trials: usize,
    #[serde(default)]
    pub cohorts: Vec<Cohort>,
}

impl SynthConfig {
    /// Uniform priors, moderate sharpness, no shift.
    pub fn new(n_classes: usize) -> Self {
        SynthConfig {
            n_classes,
            class_priors: vec![1.0 / n_classes as f64; n_classes],
            sharpness: 4.0,
            shift: None,
            seed: 0,
            m_cal: 99,
            n_test: 1000,
            n_trials: 1000,
            cohorts: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::InvalidClassCount(self.n_classes));
        }
        check_simplex(&self.class_priors, self.n_classes)?;
        check_positive("sharpness", self.sharpness)?;
        if let Some(shift) = &self.shift {
            check_positive("temperature", shift.temperature)?;
            if let Some(p) = &shift.prior_shift {
                check_simplex(p, self.n_classes)?;
            }
        }
        for c in &self.cohorts {
            check_positive("cohort sharpness", c.sharpness)?;
        }
        if self.m_cal == 0 {
            return Err(Error::InvalidConfig("m_cal must be at least 1".into()));
        }
        Ok(())
    }
}

fn check_simplex(p: &[f64], n_classes: usize) -> Result<()> {
    if p.len() != n_classes {
        return Err(Error::InvalidPriors(format!("{} entries for {n_classes} classes", p.len())));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::InvalidPriors("entries must be non-negative".into()));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidPriors(format!("entries sum to {sum}")));
    }
    Ok(())
}

fn check_positive(name: &str, v: f64) -> Result<()> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!("{name} must be positive, got {v}")))
    }
}

struct Sampler {
    labels: WeightedIndex<f64>,
    base: Gamma<f64>,
    /// `(cohort name, boosted gamma)`; a single unnamed entry without cohorts.
    boosted: Vec<(Option<String>, Gamma<f64>)>,
}

impl Sampler {
    fn new(config: &SynthConfig, priors: &[f64], temperature: f64) -> Result<Self> {
        let gamma = |shape: f64| {
            Gamma::new(shape, 1.0).map_err(|e| Error::InvalidConfig(format!("gamma({shape}): {e}")))
        };
        let boosted = if config.cohorts.is_empty() {
            vec![(None, gamma(1.0 + config.sharpness / temperature)?)]
        } else {
            config
                .cohorts
                .iter()
                .map(|c| Ok((Some(c.name.clone()), gamma(1.0 + c.sharpness / temperature)?)))
                .collect::<Result<_>>()?
        };
        Ok(Sampler {
            labels: WeightedIndex::new(priors).map_err(|e| Error::InvalidPriors(e.to_string()))?,
            base: gamma(1.0)?,
            boosted,
        })
    }

    fn draw<R: Rng>(&self, rng: &mut R, id: String, index: usize, n_classes: usize) -> ScoreRecord {
        let label = self.labels.sample(rng);
        let (cohort, boosted) = &self.boosted[index % self.boosted.len()];
        let mut scores: Vec<f64> = (0..n_classes)
            .map(|j| if j == label { boosted.sample(rng) } else { self.base.sample(rng) })
            .collect();
        let total: f64 = scores.iter().sum();
        scores.iter_mut().for_each(|s| *s /= total);
        let mut record = ScoreRecord::new(id, Some(label), scores);
        if let Some(name) = cohort {
            record.groups.insert(COHORT_ATTRIBUTE.to_string(), name.clone());
        }
        record
    }
}

/// Calibration and test records for one trial.
pub fn generate_trial(config: &SynthConfig, trial: u64) -> Result<(Vec<ScoreRecord>, Vec<ScoreRecord>)> {
    config.validate()?;
    let k = config.n_classes;
    let cal_sampler = Sampler::new(config, &config.class_priors, 1.0)?;
    let test_sampler = match &config.shift {
        None => None,
        Some(shift) => Some(Sampler::new(
            config,
            shift.prior_shift.as_deref().unwrap_or(&config.class_priors),
            shift.temperature,
        )?),
    };
    let test_sampler = test_sampler.as_ref().unwrap_or(&cal_sampler);

    let mut rng = substream(config.seed, trial);
    let cal = (0..config.m_cal)
        .map(|i| cal_sampler.draw(&mut rng, format!("cal-{i}"), i, k))
        .collect();
    let test = (0..config.n_test)
        .map(|i| test_sampler.draw(&mut rng, format!("test-{i}"), i, k))
        .collect();
    Ok((cal, test))
}

/// Trial 0 of `config`.
pub fn generate(config: &SynthConfig) -> Result<(Vec<ScoreRecord>, Vec<ScoreRecord>)> {
    generate_trial(config, 0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoverageExperiment {
    pub alpha: f64,
    pub m: usize,
    pub k: usize,
    pub full_set_mode: bool,
    /// `k / (m + 1)`, or 1 in full-set mode.
    pub expected: f64,
    pub n_trials: usize,
    pub mean_coverage: f64,
    /// Standard error of `mean_coverage` across trials.
    pub mc_stderr: f64,
    pub mean_set_size: f64,
    pub coverage_samples: Vec<f64>,
    pub set_size_samples: Vec<f64>,
}

/// Repeats generate, calibrate, predict and audit `n_trials` times.
pub fn coverage_experiment(config: &SynthConfig, alpha: f64) -> Result<CoverageExperiment> {
    config.validate()?;
    if config.n_trials == 0 {
        return Err(Error::InvalidConfig("n_trials must be at least 1".into()));
    }
    if config.n_test == 0 {
        return Err(Error::InvalidConfig("n_test must be at least 1".into()));
    }
    let per_trial = (0..config.n_trials as u64)
        .into_par_iter()
        .map(|t| {
            let (cal, test) = generate_trial(config, t)?;
            let model = calibrate(&cal, alpha)?;
            let sets = predict_batch(&test, &model)?;
            let audit = coverage_audit(&sets, &test, model.n_classes, alpha)?;
            Ok((model, audit.coverage, audit.avg_set_size))
        })
        .collect::<Result<Vec<_>>>()?;

    let n = per_trial.len() as f64;
    let coverage_samples: Vec<f64> = per_trial.iter().map(|t| t.1).collect();
    let set_size_samples: Vec<f64> = per_trial.iter().map(|t| t.2).collect();
    let mean_coverage = coverage_samples.iter().sum::<f64>() / n;
    let var = if per_trial.len() > 1 {
        coverage_samples
            .iter()
            .map(|c| (c - mean_coverage).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };
    let model = &per_trial[0].0;
    Ok(CoverageExperiment {
        alpha,
        m: model.m,
        k: model.k,
        full_set_mode: model.full_set_mode,
        expected: model.expected_coverage(),
        n_trials: per_trial.len(),
        mean_coverage,
        mc_stderr: (var / n).sqrt(),
        mean_set_size: set_size_samples.iter().sum::<f64>() / n,
        coverage_samples,
        set_size_samples,
    })
}
