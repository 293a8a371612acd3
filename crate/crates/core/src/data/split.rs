use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{class_counts, MultimodalSample, NUM_CLASSES, STAGE_NAMES};
use crate::error::{HammError, Result};

/// Minimum number of samples a class needs before it can be split three ways.
pub const MIN_CLASS_SIZE: usize = 5;

/// Train/val/test partition of sample ids.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitManifest {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
    pub ratios: [f64; 3],
    /// `class_counts[c] = [train, val, test]`.
    pub class_counts: [[usize; 3]; NUM_CLASSES],
}

impl SplitManifest {
    pub fn parts(&self) -> [&[String]; 3] {
        [&self.train, &self.val, &self.test]
    }

    pub fn totals(&self) -> [usize; 3] {
        [self.train.len(), self.val.len(), self.test.len()]
    }

    /// Plain-text summary written next to the per-split manifests.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "ratios\t{}\t{}\t{}",
            self.ratios[0], self.ratios[1], self.ratios[2]
        );
        let _ = writeln!(s, "# class\ttrain\tval\ttest");
        for (c, counts) in self.class_counts.iter().enumerate() {
            let _ = writeln!(
                s,
                "class\t{}\t{}\t{}\t{}",
                STAGE_NAMES[c], counts[0], counts[1], counts[2]
            );
        }
        let [a, b, t] = self.totals();
        let _ = writeln!(s, "total\t{a}\t{b}\t{t}");
        s
    }
}

/// Largest-remainder apportionment of `n` items to the given ratios.
pub(crate) fn apportion(n: usize, ratios: &[f64; 3]) -> [usize; 3] {
    let quotas: Vec<f64> = ratios.iter().map(|r| r * n as f64).collect();
    let mut counts = [0usize; 3];
    for (c, q) in counts.iter_mut().zip(&quotas) {
        *c = q.floor() as usize;
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..3).collect();
    // Stable sort keeps the train/val/test order on equal remainders.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap_or(std::cmp::Ordering::Equal)
    });
    for &j in order.iter().take(n.saturating_sub(assigned)) {
        counts[j] += 1;
    }
    counts
}

/// Stratified random split: each class is shuffled independently and cut by
/// largest-remainder rounding of `ratios`.
pub fn stratified_split(
    samples: &[MultimodalSample],
    ratios: [f64; 3],
    seed: u64,
) -> Result<SplitManifest> {
    if ratios.iter().any(|r| !r.is_finite() || *r < 0.0) {
        return Err(HammError::Config(format!("invalid split ratios {ratios:?}")));
    }
    if (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(HammError::Config(format!(
            "split ratios {ratios:?} do not sum to 1"
        )));
    }
    let counts = class_counts(samples);
    for (c, &n) in counts.iter().enumerate() {
        if n < MIN_CLASS_SIZE {
            return Err(HammError::Data(format!(
                "class {} ({}) has {n} samples; at least {MIN_CLASS_SIZE} are required",
                c, STAGE_NAMES[c]
            )));
        }
    }
    let mut seen = std::collections::HashSet::new();
    for s in samples {
        if !seen.insert(s.id.as_str()) {
            return Err(HammError::Data(format!("duplicate sample id {}", s.id)));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts: [Vec<String>; 3] = Default::default();
    let mut class_counts = [[0usize; 3]; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        let mut ids: Vec<String> = samples
            .iter()
            .filter(|s| s.label as usize == c)
            .map(|s| s.id.clone())
            .collect();
        ids.sort();
        ids.shuffle(&mut rng);
        let cut = apportion(ids.len(), &ratios);
        let mut it = ids.into_iter();
        for (j, &k) in cut.iter().enumerate() {
            parts[j].extend(it.by_ref().take(k));
        }
        class_counts[c] = cut;
    }
    for p in parts.iter_mut() {
        p.sort();
    }
    let [train, val, test] = parts;
    Ok(SplitManifest {
        train,
        val,
        test,
        ratios,
        class_counts,
    })
}
