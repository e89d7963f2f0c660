//! The three evaluation split schemes with 60/10/30 proportions.
//!
//! All splitting is deterministic given a seed. Signatures are addressed by
//! index into a [`SignatureSet`], whose order is itself canonical.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::SignatureSet;
use crate::error::{CoreError, Result};

pub const DEFAULT_RATIOS: Ratios = Ratios { train: 0.6, val: 0.1, test: 0.3 };
pub const DEFAULT_VAL_TEST: (f64, f64) = (0.25, 0.75);
pub const DEFAULT_BATCH_SIZE: usize = 32;
pub const DEFAULT_FOLDS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitScheme {
    Signature,
    ParentalFamily,
    TargetFamily,
}

impl SplitScheme {
    pub fn parse(s: &str) -> Option<SplitScheme> {
        match s {
            "signature" => Some(SplitScheme::Signature),
            "family" => Some(SplitScheme::ParentalFamily),
            "target" => Some(SplitScheme::TargetFamily),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SplitScheme::Signature => "signature",
            SplitScheme::ParentalFamily => "family",
            SplitScheme::TargetFamily => "target",
        }
    }
}

/// Train/val/test proportions; must sum to 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Ratios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Ratios {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !r.is_finite() || *r < 0.0) {
            return Err(CoreError::config("split ratios must be non-negative"));
        }
        let sum: f64 = parts.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(CoreError::config(format!("split ratios must sum to 1, got {sum}")));
        }
        Ok(())
    }
}

/// Train/val/test index assignment for one fold.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub scheme: SplitScheme,
    pub fold_seed: u64,
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub target_family: Option<String>,
    pub batch_size: Option<usize>,
}

impl SplitPlan {
    /// Verify the three partitions are pairwise disjoint.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::BTreeSet::new();
        for idx in self.train.iter().chain(&self.val).chain(&self.test) {
            if !seen.insert(*idx) {
                return Err(CoreError::Conflict(format!("index {idx} in two partitions")));
            }
        }
        Ok(())
    }
}

/// Apportion `m` items over three bins by largest remainder.
///
/// Ties in the fractional part break toward the earlier bin.
fn apportion(m: usize, ratios: Ratios) -> [usize; 3] {
    let targets = [ratios.train * m as f64, ratios.val * m as f64, ratios.test * m as f64];
    let mut counts = [0usize; 3];
    let mut fracs = [0f64; 3];
    for i in 0..3 {
        counts[i] = targets[i].floor() as usize;
        fracs[i] = targets[i] - targets[i].floor();
    }
    let assigned: usize = counts.iter().sum();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| fracs[b].partial_cmp(&fracs[a]).unwrap().then(a.cmp(&b)));
    for k in 0..(m - assigned) {
        counts[order[k % 3]] += 1;
    }
    counts
}

/// Random split over signatures, stratified per family.
///
/// Every family with at least 3 members contributes to all partitions in
/// approximately the requested proportions; smaller families go wholly to
/// train, since they cannot span three partitions.
pub fn signature_split(sigs: &SignatureSet, ratios: Ratios, seed: u64) -> Result<SplitPlan> {
    ratios.validate()?;
    if sigs.len() < 10 {
        return Err(CoreError::config(format!(
            "signature split needs at least 10 signatures, got {}",
            sigs.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();

    for indices in sigs.family_index.values() {
        if indices.len() < 3 {
            train.extend_from_slice(indices);
            continue;
        }
        let mut shuffled = indices.clone();
        shuffled.shuffle(&mut rng);
        let [n_train, n_val, _] = apportion(shuffled.len(), ratios);
        train.extend_from_slice(&shuffled[..n_train]);
        val.extend_from_slice(&shuffled[n_train..n_train + n_val]);
        test.extend_from_slice(&shuffled[n_train + n_val..]);
    }

    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        scheme: SplitScheme::Signature,
        fold_seed: seed,
        train,
        val,
        test,
        target_family: None,
        batch_size: None,
    })
}

/// Split holding out entire parental families.
///
/// Families are shuffled by seed, then assigned largest-first to the
/// partition with the largest signature-count deficit against its target.
/// When as many families remain as there are still-empty partitions, the
/// remaining families are routed to those partitions so that no partition
/// ends up empty.
pub fn parental_family_split(sigs: &SignatureSet, ratios: Ratios, seed: u64) -> Result<SplitPlan> {
    ratios.validate()?;
    let n_families = sigs.family_index.len();
    if n_families < 3 {
        return Err(CoreError::config(format!(
            "parental-family split needs at least 3 families, got {n_families}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut families: Vec<(&String, &Vec<usize>)> = sigs.family_index.iter().collect();
    families.shuffle(&mut rng);
    // Stable sort keeps the shuffled order among equal-sized families.
    families.sort_by_key(|(_, members)| std::cmp::Reverse(members.len()));

    let total = sigs.len() as f64;
    let targets = [ratios.train * total, ratios.val * total, ratios.test * total];
    let mut assigned = [0usize; 3];
    let mut partitions: [Vec<usize>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut families_placed = [0usize; 3];

    for (rank, (_, members)) in families.iter().enumerate() {
        let remaining = families.len() - rank;
        let empty: Vec<usize> = (0..3).filter(|&p| families_placed[p] == 0).collect();
        let candidates: Vec<usize> = if remaining <= empty.len() && !empty.is_empty() {
            empty
        } else {
            (0..3).collect()
        };
        let chosen = *candidates
            .iter()
            .max_by(|&&a, &&b| {
                let da = targets[a] - assigned[a] as f64;
                let db = targets[b] - assigned[b] as f64;
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        partitions[chosen].extend_from_slice(members);
        assigned[chosen] += members.len();
        families_placed[chosen] += 1;
    }

    let [mut train, mut val, mut test] = partitions;
    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        scheme: SplitScheme::ParentalFamily,
        fold_seed: seed,
        train,
        val,
        test,
        target_family: None,
        batch_size: None,
    })
}

/// Split simulating one measured batch from a new antibody family.
///
/// Train holds every non-target signature plus `batch_size` randomly chosen
/// target-family members; the remaining target members split val:test at
/// the given ratio (1:3 by default).
pub fn target_family_split(
    sigs: &SignatureSet,
    target_family: &str,
    batch_size: usize,
    val_test_ratio: (f64, f64),
    seed: u64,
) -> Result<SplitPlan> {
    let (vr, tr) = val_test_ratio;
    if !(vr >= 0.0 && tr >= 0.0 && (vr + tr - 1.0).abs() <= 1e-9) {
        return Err(CoreError::config("val/test ratio must be non-negative and sum to 1"));
    }
    let members = sigs
        .family_index
        .get(target_family)
        .ok_or_else(|| CoreError::config(format!("unknown target family `{target_family}`")))?;
    if batch_size == 0 {
        return Err(CoreError::config("batch_size must be positive"));
    }
    if batch_size >= members.len() {
        return Err(CoreError::config(format!(
            "batch_size {batch_size} must be smaller than target family size {}",
            members.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = members.clone();
    shuffled.shuffle(&mut rng);

    let mut train: Vec<usize> = sigs
        .family_index
        .iter()
        .filter(|(fam, _)| fam.as_str() != target_family)
        .flat_map(|(_, idx)| idx.iter().copied())
        .collect();
    train.extend_from_slice(&shuffled[..batch_size]);

    let rest = &shuffled[batch_size..];
    let n_val = ((vr * rest.len() as f64).round() as usize).min(rest.len());
    let mut val: Vec<usize> = rest[..n_val].to_vec();
    let mut test: Vec<usize> = rest[n_val..].to_vec();

    train.sort_unstable();
    val.sort_unstable();
    test.sort_unstable();
    Ok(SplitPlan {
        scheme: SplitScheme::TargetFamily,
        fold_seed: seed,
        train,
        val,
        test,
        target_family: Some(target_family.to_string()),
        batch_size: Some(batch_size),
    })
}

/// Everything needed to produce one split, independent of the fold seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldSpec {
    pub scheme: SplitScheme,
    pub ratios: Ratios,
    pub target_family: Option<String>,
    pub batch_size: usize,
    pub val_test_ratio: (f64, f64),
}

impl FoldSpec {
    pub fn new(scheme: SplitScheme) -> FoldSpec {
        FoldSpec {
            scheme,
            ratios: DEFAULT_RATIOS,
            target_family: None,
            batch_size: DEFAULT_BATCH_SIZE,
            val_test_ratio: DEFAULT_VAL_TEST,
        }
    }

    pub fn split(&self, sigs: &SignatureSet, seed: u64) -> Result<SplitPlan> {
        match self.scheme {
            SplitScheme::Signature => signature_split(sigs, self.ratios, seed),
            SplitScheme::ParentalFamily => parental_family_split(sigs, self.ratios, seed),
            SplitScheme::TargetFamily => {
                let family = self.target_family.as_deref().ok_or_else(|| {
                    CoreError::config("target-family split requires a target family")
                })?;
                target_family_split(sigs, family, self.batch_size, self.val_test_ratio, seed)
            }
        }
    }
}

/// Repeated folds: fold `k` uses seed `base_seed + k`.
pub fn make_folds(
    spec: &FoldSpec,
    sigs: &SignatureSet,
    n_folds: usize,
    base_seed: u64,
) -> Result<Vec<SplitPlan>> {
    if n_folds == 0 {
        return Err(CoreError::config("n_folds must be at least 1"));
    }
    (0..n_folds).map(|k| spec.split(sigs, base_seed.wrapping_add(k as u64))).collect()
}

/// Toy fixture builders shared across the crate's unit tests.
#[cfg(test)]
pub(crate) mod tests_support {
    use super::SignatureSet;
    use crate::dataset::{aggregate_by_signature, Orientation, ReformatRecord, AMINO_ACIDS};

    fn seq_tag(mut n: usize) -> String {
        let mut tag = String::new();
        for _ in 0..4 {
            tag.push(AMINO_ACIDS[n % 20]);
            n /= 20;
        }
        tag
    }

    fn toy_records(family_sizes: &[usize], with_yields: bool) -> Vec<ReformatRecord> {
        let mut records = Vec::new();
        for (f, &size) in family_sizes.iter().enumerate() {
            for m in 0..size {
                records.push(ReformatRecord {
                    record_id: format!("f{f}m{m}"),
                    vh_seq: format!("ACDEF{}", seq_tag(f * 1000 + m)),
                    vl_seq: "GHIKL".to_string(),
                    linker_id: "L1".to_string(),
                    orientation: Orientation::VhVl,
                    parental_family: format!("fam{f:03}"),
                    campaign: "c".to_string(),
                    qc_pass: Some(1),
                    yield_ng_per_ul: with_yields.then(|| 5.0 + (f * 31 + m * 7) as f64),
                    sec_main_peak_pct: None,
                });
            }
        }
        records
    }

    /// Build a signature set with the given family sizes.
    pub(crate) fn toy_sigs(family_sizes: &[usize]) -> SignatureSet {
        aggregate_by_signature(&toy_records(family_sizes, false)).unwrap()
    }

    /// Same, with a deterministic yield value per signature.
    pub(crate) fn toy_sigs_with_yields(family_sizes: &[usize]) -> SignatureSet {
        aggregate_by_signature(&toy_records(family_sizes, true)).unwrap()
    }
}
