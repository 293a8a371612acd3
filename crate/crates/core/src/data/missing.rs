use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Modality, MultimodalSample};
use crate::error::{HammError, Result};

/// Per-sample, per-epoch modality dropout used while fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MissingnessConfig {
    pub p_full: f64,
    pub p_drop_one: f64,
    pub p_drop_two: f64,
}

impl Default for MissingnessConfig {
    fn default() -> Self {
        Self {
            p_full: 0.5,
            p_drop_one: 0.25,
            p_drop_two: 0.25,
        }
    }
}

impl MissingnessConfig {
    pub fn validate(&self) -> Result<()> {
        let ps = [self.p_full, self.p_drop_one, self.p_drop_two];
        if ps.iter().any(|p| !p.is_finite() || *p < 0.0 || *p > 1.0) {
            return Err(HammError::Config(format!("missingness probabilities {ps:?} out of [0,1]")));
        }
        let total: f64 = ps.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(HammError::Config(format!(
                "missingness probabilities sum to {total}, expected 1"
            )));
        }
        Ok(())
    }
}

/// Which modalities a sample keeps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum DropPattern {
    Full,
    /// One modality removed.
    DropOne(Modality),
    /// Two modalities removed; only this one remains.
    KeepOne(Modality),
}

impl DropPattern {
    pub fn missing_count(self) -> usize {
        match self {
            DropPattern::Full => 0,
            DropPattern::DropOne(_) => 1,
            DropPattern::KeepOne(_) => 2,
        }
    }

    pub fn draw<R: Rng>(config: &MissingnessConfig, rng: &mut R) -> Self {
        let u: f64 = rng.random();
        let m = Modality::ALL[rng.random_range(0..3)];
        if u < config.p_full {
            DropPattern::Full
        } else if u < config.p_full + config.p_drop_one {
            DropPattern::DropOne(m)
        } else {
            DropPattern::KeepOne(m)
        }
    }

    pub fn apply(self, sample: &mut MultimodalSample) {
        match self {
            DropPattern::Full => {}
            DropPattern::DropOne(m) => sample.drop_modality(m),
            DropPattern::KeepOne(keep) => {
                for m in Modality::ALL {
                    if m != keep {
                        sample.drop_modality(m);
                    }
                }
            }
        }
    }

    pub fn tag(self) -> String {
        match self {
            DropPattern::Full => "full".into(),
            DropPattern::DropOne(m) => format!("drop-{}", m.name()),
            DropPattern::KeepOne(m) => format!("only-{}", m.name()),
        }
    }
}

/// Randomly removes zero, one or two modalities according to `config`.
pub fn sample_missingness<R: Rng>(
    sample: &MultimodalSample,
    config: &MissingnessConfig,
    rng: &mut R,
) -> Result<(MultimodalSample, DropPattern)> {
    config.validate()?;
    if !sample.is_full() {
        return Err(HammError::Data(format!(
            "sample {} already has missing modalities",
            sample.id
        )));
    }
    let pattern = DropPattern::draw(config, rng);
    let mut out = sample.clone();
    pattern.apply(&mut out);
    Ok((out, pattern))
}

/// How the evaluation set with missing modalities is derived from a full split.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MissingEvalConfig {
    /// Fraction of originals that receive a modified copy.
    pub modified_fraction: f64,
    /// Share of the modified copies with one modality missing; the rest miss two.
    pub one_missing_share: f64,
}

impl Default for MissingEvalConfig {
    fn default() -> Self {
        Self {
            modified_fraction: 1.0,
            one_missing_share: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct MissingEvalSet {
    pub samples: Vec<MultimodalSample>,
    pub pattern_counts: BTreeMap<DropPattern, usize>,
    /// False when the modified copies could not be spread evenly over modalities.
    pub balanced: bool,
}

impl MissingEvalSet {
    pub fn count_missing(&self, n: usize) -> usize {
        self.pattern_counts
            .iter()
            .filter(|(p, _)| p.missing_count() == n)
            .map(|(_, c)| c)
            .sum()
    }
}

/// Originals followed by modified copies: one-missing copies cycle through the
/// dropped modality and two-missing copies cycle through the kept modality.
pub fn build_missing_eval_set(
    split: &[MultimodalSample],
    config: &MissingEvalConfig,
    seed: u64,
) -> Result<MissingEvalSet> {
    if !(0.0..=1.0).contains(&config.modified_fraction)
        || !(0.0..=1.0).contains(&config.one_missing_share)
    {
        return Err(HammError::Config(format!("invalid missing-eval config {config:?}")));
    }
    if let Some(s) = split.iter().find(|s| !s.is_full()) {
        return Err(HammError::Data(format!(
            "missing-eval input must be full-modality; {} is not",
            s.id
        )));
    }
    let n_modified = (config.modified_fraction * split.len() as f64).round() as usize;
    let n_one = (config.one_missing_share * n_modified as f64).round() as usize;
    let n_two = n_modified - n_one;

    let mut order: Vec<usize> = (0..split.len()).collect();
    order.sort_by(|&a, &b| split[a].id.cmp(&split[b].id));
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));

    let mut samples: Vec<MultimodalSample> = split.to_vec();
    let mut pattern_counts = BTreeMap::new();
    pattern_counts.insert(DropPattern::Full, split.len());
    for (k, &idx) in order.iter().take(n_modified).enumerate() {
        let pattern = if k < n_one {
            DropPattern::DropOne(Modality::ALL[k % 3])
        } else {
            DropPattern::KeepOne(Modality::ALL[(k - n_one) % 3])
        };
        let mut copy = split[idx].clone();
        pattern.apply(&mut copy);
        copy.id = format!("{}~{}", copy.id, pattern.tag());
        *pattern_counts.entry(pattern).or_insert(0) += 1;
        samples.push(copy);
    }
    let balanced = n_one % 3 == 0 && n_two % 3 == 0;
    Ok(MissingEvalSet {
        samples,
        pattern_counts,
        balanced,
    })
}
