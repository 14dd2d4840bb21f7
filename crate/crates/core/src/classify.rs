//! Reproducibility classification of outputs and derivations.
//!
//! Divergence is proof, agreement is evidence: two different content hashes
//! for the same output make it non-reproducible no matter who submitted them,
//! while a single hash only counts as reproducible once at least two distinct
//! builders have reported it.

use std::collections::{BTreeMap, BTreeSet};

use chrono::{DateTime, Utc};
use serde::Serialize;
use thiserror::Error;

use crate::attestation::{Attestation, ReproStatus};
use crate::hash::OutputHash;
use crate::store_path::{DrvId, StorePath};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ClassifyError {
    #[error("attestations for different (derivation, output) pairs were mixed")]
    MixedKeyInput,
    #[error("a derivation needs at least one observed output")]
    EmptyInput,
}

/// Classifies the attestations of a single (derivation, output path) pair.
pub fn classify_output<'a, I>(attestations: I) -> Result<ReproStatus, ClassifyError>
where
    I: IntoIterator<Item = &'a Attestation>,
{
    let mut key: Option<(&DrvId, &StorePath)> = None;
    let mut hashes: BTreeSet<&OutputHash> = BTreeSet::new();
    let mut builders: BTreeSet<&str> = BTreeSet::new();
    for a in attestations {
        match key {
            None => key = Some((&a.drv_id, &a.output_path)),
            Some((d, o)) if d == &a.drv_id && o == &a.output_path => {}
            Some(_) => return Err(ClassifyError::MixedKeyInput),
        }
        hashes.insert(&a.output_hash);
        builders.insert(&a.user_id);
    }
    Ok(status_from_counts(hashes.len(), builders.len()))
}

fn status_from_counts(distinct_hashes: usize, distinct_builders: usize) -> ReproStatus {
    match (distinct_hashes, distinct_builders) {
        (0, _) => ReproStatus::Unknown,
        (1, 1) => ReproStatus::Unconfirmed,
        (1, _) => ReproStatus::Reproducible,
        _ => ReproStatus::Nonreproducible,
    }
}

/// Folds per-output statuses into a verdict for the whole derivation.
pub fn classify_derivation<I>(statuses: I) -> Result<ReproStatus, ClassifyError>
where
    I: IntoIterator<Item = ReproStatus>,
{
    let mut seen = false;
    let mut any_weak = false;
    for s in statuses {
        seen = true;
        match s {
            ReproStatus::Nonreproducible => return Ok(ReproStatus::Nonreproducible),
            ReproStatus::Unknown | ReproStatus::Unconfirmed => any_weak = true,
            ReproStatus::Reproducible => {}
        }
    }
    match (seen, any_weak) {
        (false, _) => Err(ClassifyError::EmptyInput),
        (true, true) => Ok(ReproStatus::Unconfirmed),
        (true, false) => Ok(ReproStatus::Reproducible),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OutputSummary {
    pub output_path: StorePath,
    pub status: ReproStatus,
    pub distinct_builders: usize,
    pub distinct_hashes: usize,
    pub attestation_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DerivationSummary {
    pub drv_id: DrvId,
    pub status: ReproStatus,
    pub outputs: Vec<OutputSummary>,
    pub builders: BTreeSet<String>,
    pub attestation_count: usize,
    pub first_seen: DateTime<Utc>,
    pub last_seen: DateTime<Utc>,
}

impl DerivationSummary {
    pub fn drv_hash(&self) -> &str {
        self.drv_id.drv_hash()
    }

    pub fn distinct_builders(&self) -> usize {
        self.builders.len()
    }
}

/// Groups attestations by derivation and classifies each one. Output is
/// ordered by (drv_hash, drv path).
pub fn summarize_derivations<'a, I>(attestations: I) -> Vec<DerivationSummary>
where
    I: IntoIterator<Item = &'a Attestation>,
{
    let mut by_drv: BTreeMap<(&str, &DrvId), BTreeMap<&StorePath, Vec<&Attestation>>> =
        BTreeMap::new();
    for a in attestations {
        by_drv
            .entry((a.drv_id.drv_hash(), &a.drv_id))
            .or_default()
            .entry(&a.output_path)
            .or_default()
            .push(a);
    }
    by_drv
        .into_iter()
        .map(|((_, drv_id), outputs)| summarize_one(drv_id, outputs))
        .collect()
}

fn summarize_one(
    drv_id: &DrvId,
    outputs: BTreeMap<&StorePath, Vec<&Attestation>>,
) -> DerivationSummary {
    let mut builders = BTreeSet::new();
    let mut attestation_count = 0;
    let mut first_seen = DateTime::<Utc>::MAX_UTC;
    let mut last_seen = DateTime::<Utc>::MIN_UTC;
    let outputs: Vec<OutputSummary> = outputs
        .into_iter()
        .map(|(path, atts)| {
            let hashes: BTreeSet<_> = atts.iter().map(|a| a.output_hash).collect();
            let out_builders: BTreeSet<_> = atts.iter().map(|a| a.user_id.as_str()).collect();
            for a in &atts {
                builders.insert(a.user_id.clone());
                first_seen = first_seen.min(a.received_at);
                last_seen = last_seen.max(a.received_at);
            }
            attestation_count += atts.len();
            OutputSummary {
                output_path: path.clone(),
                // grouping guarantees a single key
                status: classify_output(atts.iter().copied()).expect("grouped by output"),
                distinct_builders: out_builders.len(),
                distinct_hashes: hashes.len(),
                attestation_count: atts.len(),
            }
        })
        .collect();
    let status = classify_derivation(outputs.iter().map(|o| o.status))
        .expect("a grouped derivation has at least one output");
    DerivationSummary {
        drv_id: drv_id.clone(),
        status,
        outputs,
        builders,
        attestation_count,
        first_seen,
        last_seen,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::signing::keygen;
    use proptest::prelude::*;
    use ReproStatus::*;

    const DRV: &str = "/nix/store/0cc175b9c0f1b6a831c399f269771c0b-jq-1.8.1.drv";
    const OUT: &str = "/nix/store/8a9f6b2c8a9f6b2c8a9f6b2c8a9f6b2c-jq-1.8.1";
    const DEV: &str = "/nix/store/9a9f6b2c8a9f6b2c8a9f6b2c8a9f6b2c-jq-1.8.1-dev";

    fn att(id: u64, user: &str, out: &str, content: u8) -> Attestation {
        let key = keygen(user, Some([content; 32])).unwrap();
        let drv_id = DrvId::parse_any(DRV).unwrap();
        let output_path = StorePath::parse_any(out).unwrap();
        let output_hash = OutputHash::from_bytes([content; 32]);
        Attestation {
            id,
            output_sig: key.sign(&drv_id, &output_path, &output_hash).unwrap(),
            output_path,
            user_id: user.to_owned(),
            drv_id,
            output_hash,
            received_at: DateTime::from_timestamp(1_700_000_000 + id as i64, 0).unwrap(),
        }
    }

    #[test]
    fn output_rules() {
        assert_eq!(classify_output([]), Ok(Unknown));
        assert_eq!(
            classify_output(&[att(1, "a", OUT, 1), att(2, "b", OUT, 1)]),
            Ok(Reproducible)
        );
        assert_eq!(
            classify_output(&[att(1, "a", OUT, 1), att(2, "a", OUT, 2)]),
            Ok(Nonreproducible)
        );
        assert_eq!(classify_output(&[att(1, "a", OUT, 1)]), Ok(Unconfirmed));
        assert_eq!(
            classify_output(&[att(1, "a", OUT, 1), att(2, "b", DEV, 1)]),
            Err(ClassifyError::MixedKeyInput)
        );
    }

    #[test]
    fn derivation_rules() {
        assert_eq!(classify_derivation([Reproducible, Reproducible]), Ok(Reproducible));
        assert_eq!(
            classify_derivation([Reproducible, Nonreproducible]),
            Ok(Nonreproducible)
        );
        assert_eq!(classify_derivation([Reproducible, Unconfirmed]), Ok(Unconfirmed));
        assert_eq!(classify_derivation([Unknown]), Ok(Unconfirmed));
        assert_eq!(classify_derivation([]), Err(ClassifyError::EmptyInput));
    }

    #[test]
    fn summary_of_out_and_dev() {
        let atts = [att(1, "a", OUT, 1), att(2, "b", OUT, 1), att(3, "a", DEV, 5)];
        let s = summarize_derivations(&atts);
        assert_eq!(s.len(), 1);
        let d = &s[0];
        assert_eq!(d.status, Unconfirmed);
        assert_eq!(d.distinct_builders(), 2);
        assert_eq!(d.attestation_count, 3);
        let by_path: BTreeMap<_, _> = d
            .outputs
            .iter()
            .map(|o| (o.output_path.to_string(), o.status))
            .collect();
        assert_eq!(by_path[OUT], Reproducible);
        assert_eq!(by_path[DEV], Unconfirmed);
        assert_eq!(d.first_seen.timestamp(), 1_700_000_001);
        assert_eq!(d.last_seen.timestamp(), 1_700_000_003);
    }

    fn obs() -> impl Strategy<Value = Vec<(u8, u8)>> {
        proptest::collection::vec((0u8..4, 0u8..3), 0..8)
    }

    fn build(obs: &[(u8, u8)]) -> Vec<Attestation> {
        obs.iter()
            .enumerate()
            .map(|(i, (u, h))| att(i as u64, &format!("u{u}"), OUT, *h))
            .collect()
    }

    proptest! {
        #[test]
        fn permutation_invariant(o in obs(), seed in any::<u64>()) {
            let atts = build(&o);
            let mut shuffled = atts.clone();
            let n = shuffled.len();
            if n > 1 {
                let mut s = seed;
                for i in (1..n).rev() {
                    s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                    shuffled.swap(i, (s >> 33) as usize % (i + 1));
                }
            }
            prop_assert_eq!(classify_output(&atts), classify_output(&shuffled));
        }

        #[test]
        fn divergence_is_permanent(o in obs(), extra in obs()) {
            let mut atts = build(&o);
            if classify_output(&atts) == Ok(Nonreproducible) {
                atts.extend(build(&extra));
                prop_assert_eq!(classify_output(&atts), Ok(Nonreproducible));
            }
        }
    }
}
