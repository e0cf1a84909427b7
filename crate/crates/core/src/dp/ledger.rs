use std::collections::BTreeMap;
use std::fmt;

use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Rewrite,
    KeywordRelease,
    PostProcess,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Rewrite => "rewrite",
            Stage::KeywordRelease => "keyword_release",
            Stage::PostProcess => "post_process",
        })
    }
}

/// Privacy loss per unit; `Infinite` marks releases whose guarantee comes
/// from post-processing rather than from their own noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Epsilon {
    Finite(f64),
    Infinite,
}

impl Epsilon {
    pub fn finite(self) -> Option<f64> {
        match self {
            Epsilon::Finite(e) => Some(e),
            Epsilon::Infinite => None,
        }
    }
}

impl fmt::Display for Epsilon {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Epsilon::Finite(e) => write!(f, "{e}"),
            Epsilon::Infinite => f.write_str("inf"),
        }
    }
}

impl Serialize for Epsilon {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Epsilon::Finite(e) => s.serialize_f64(*e),
            Epsilon::Infinite => s.serialize_str("INFINITE"),
        }
    }
}

impl<'de> Deserialize<'de> for Epsilon {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        struct EpsVisitor;

        impl Visitor<'_> for EpsVisitor {
            type Value = Epsilon;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a nonnegative number or \"INFINITE\"")
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<Epsilon, E> {
                Ok(Epsilon::Finite(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<Epsilon, E> {
                Ok(Epsilon::Finite(v as f64))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<Epsilon, E> {
                Ok(Epsilon::Finite(v as f64))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<Epsilon, E> {
                if v.eq_ignore_ascii_case("infinite") || v.eq_ignore_ascii_case("inf") {
                    Ok(Epsilon::Infinite)
                } else {
                    Err(E::invalid_value(de::Unexpected::Str(v), &self))
                }
            }
        }

        d.deserialize_any(EpsVisitor)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEntry {
    pub stage: Stage,
    pub mechanism: String,
    pub epsilon_per_unit: Epsilon,
    pub units: u64,
    /// Sampling temperature, when the mechanism is a temperature-controlled decoder.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Set when the loss is computed from operator-supplied bounds the
    /// mechanism itself could not enforce (remote decoding).
    #[serde(default)]
    pub nominal: bool,
    #[serde(default)]
    pub note: String,
}

impl LedgerEntry {
    pub fn new(stage: Stage, mechanism: impl Into<String>, epsilon_per_unit: Epsilon, units: u64) -> Self {
        Self {
            stage,
            mechanism: mechanism.into(),
            epsilon_per_unit,
            units,
            temperature: None,
            nominal: false,
            note: String::new(),
        }
    }

    /// A zero-cost post-processing record.
    pub fn post_process(mechanism: impl Into<String>) -> Self {
        Self::new(Stage::PostProcess, mechanism, Epsilon::Infinite, 1)
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = Some(t);
        self
    }

    pub fn with_note(mut self, note: impl Into<String>) -> Self {
        self.note = note.into();
        self
    }

    pub fn nominal(mut self, nominal: bool) -> Self {
        self.nominal = nominal;
        self
    }

    /// Contribution to the composed total; 0 for post-processing.
    pub fn subtotal(&self) -> f64 {
        match (self.stage, self.epsilon_per_unit) {
            (Stage::PostProcess, _) | (_, Epsilon::Infinite) => 0.0,
            (_, Epsilon::Finite(e)) => e * self.units as f64,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LedgerError {
    #[error("ledger entry must cover at least one unit")]
    ZeroUnits,
    #[error("epsilon must be finite and nonnegative, got {0}")]
    BadEpsilon(f64),
    #[error("only post-processing entries may carry an infinite epsilon (stage {0})")]
    InfiniteOutsidePostProcess(Stage),
}

/// Sequential-composition accountant under pure DP.
///
/// Appends must be externally serialized; totals are recomputed on demand.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PrivacyLedger {
    entries: Vec<LedgerEntry>,
}

impl PrivacyLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, entry: LedgerEntry) -> Result<(), LedgerError> {
        if entry.units == 0 {
            return Err(LedgerError::ZeroUnits);
        }
        match entry.epsilon_per_unit {
            Epsilon::Finite(e) if !(e.is_finite() && e >= 0.0) => {
                return Err(LedgerError::BadEpsilon(e));
            }
            Epsilon::Infinite if entry.stage != Stage::PostProcess => {
                return Err(LedgerError::InfiniteOutsidePostProcess(entry.stage));
            }
            _ => {}
        }
        self.entries.push(entry);
        Ok(())
    }

    pub fn extend(&mut self, other: PrivacyLedger) -> Result<(), LedgerError> {
        other.entries.into_iter().try_for_each(|e| self.append(e))
    }

    pub fn entries(&self) -> &[LedgerEntry] {
        &self.entries
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    /// Composed loss over all entries.
    pub fn total(&self) -> f64 {
        compose(self.entries.iter())
    }

    /// Composed loss restricted to one stage.
    pub fn total_for(&self, stage: Stage) -> f64 {
        compose(self.entries.iter().filter(|e| e.stage == stage))
    }
}

/// Entries sharing a per-unit epsilon are merged by summing their integer
/// units first, so `m` rewrites of `n` tokens at `eps` total exactly
/// `(m * n) as f64 * eps`. Group products are summed in sorted order, which
/// makes the result independent of append order.
fn compose<'a>(entries: impl Iterator<Item = &'a LedgerEntry>) -> f64 {
    let mut units_by_eps: BTreeMap<u64, u128> = BTreeMap::new();
    for e in entries {
        if e.stage == Stage::PostProcess {
            continue;
        }
        if let Epsilon::Finite(eps) = e.epsilon_per_unit {
            *units_by_eps.entry(eps.to_bits()).or_default() += e.units as u128;
        }
    }
    let mut terms: Vec<f64> = units_by_eps
        .into_iter()
        .map(|(bits, units)| units as f64 * f64::from_bits(bits))
        .collect();
    terms.sort_by(f64::total_cmp);
    terms.iter().sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rewrite(eps: f64, units: u64) -> LedgerEntry {
        LedgerEntry::new(Stage::Rewrite, "em_decode", Epsilon::Finite(eps), units)
    }

    #[test]
    fn empty_total_is_zero() {
        assert_eq!(PrivacyLedger::new().total(), 0.0);
    }

    #[test]
    fn ndp_and_jem_closed_forms() {
        let mut l = PrivacyLedger::new();
        for _ in 0..10 {
            l.append(rewrite(19.4, 20)).unwrap();
        }
        l.append(LedgerEntry::post_process("topk_ndp")).unwrap();
        assert_eq!(l.total(), 200.0 * 19.4);
        assert!((l.total() - 3880.0).abs() < 1e-9);
        l.append(LedgerEntry::new(Stage::KeywordRelease, "topk_peel", Epsilon::Finite(1.0), 1))
            .unwrap();
        assert_eq!(l.total(), 200.0 * 19.4 + 1.0);
        assert!((l.total() - 3881.0).abs() < 1e-9);
        assert_eq!(l.total_for(Stage::KeywordRelease), 1.0);
    }

    #[test]
    fn rejects_bad_entries() {
        let mut l = PrivacyLedger::new();
        assert_eq!(l.append(rewrite(1.0, 0)), Err(LedgerError::ZeroUnits));
        assert!(l.append(rewrite(-1.0, 1)).is_err());
        assert!(l.append(rewrite(f64::NAN, 1)).is_err());
        assert_eq!(
            l.append(LedgerEntry::new(Stage::Rewrite, "x", Epsilon::Infinite, 1)),
            Err(LedgerError::InfiniteOutsidePostProcess(Stage::Rewrite))
        );
        assert!(l.is_empty());
    }

    #[test]
    fn post_process_with_finite_eps_still_free() {
        let mut l = PrivacyLedger::new();
        l.append(LedgerEntry::new(Stage::PostProcess, "x", Epsilon::Finite(5.0), 3)).unwrap();
        assert_eq!(l.total(), 0.0);
    }

    #[test]
    fn epsilon_serde() {
        assert_eq!(serde_json::to_string(&Epsilon::Infinite).unwrap(), "\"INFINITE\"");
        assert_eq!(serde_json::to_string(&Epsilon::Finite(2.5)).unwrap(), "2.5");
        let e: Epsilon = serde_json::from_str("3").unwrap();
        assert_eq!(e, Epsilon::Finite(3.0));
        let l: PrivacyLedger = serde_json::from_str(
            &serde_json::to_string(&{
                let mut l = PrivacyLedger::new();
                l.append(rewrite(2.0, 4)).unwrap();
                l.append(LedgerEntry::post_process("p")).unwrap();
                l
            })
            .unwrap(),
        )
        .unwrap();
        assert_eq!(l.total(), 8.0);
    }

    fn arb_entries() -> impl Strategy<Value = Vec<LedgerEntry>> {
        prop::collection::vec((0.0f64..200.0, 1u64..50, 0u8..3), 0..30).prop_map(|items| {
            items
                .into_iter()
                .map(|(e, n, s)| match s {
                    0 => rewrite(e, n),
                    1 => LedgerEntry::new(Stage::KeywordRelease, "k", Epsilon::Finite(e), n),
                    _ => LedgerEntry::post_process("p"),
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn total_is_monotone_and_order_free(
            (entries, shuffled) in arb_entries()
                .prop_flat_map(|v| (Just(v.clone()), Just(v).prop_shuffle()))
        ) {
            let mut l = PrivacyLedger::new();
            let mut prev = 0.0;
            for e in &entries {
                l.append(e.clone()).unwrap();
                prop_assert!(l.total() >= prev);
                prev = l.total();
            }
            let mut l2 = PrivacyLedger::new();
            for e in shuffled {
                l2.append(e).unwrap();
            }
            prop_assert_eq!(l.total(), l2.total());
            let naive: f64 = entries.iter().map(|e| e.subtotal()).sum();
            prop_assert!((l.total() - naive).abs() <= 1e-9 * naive.max(1.0));
        }
    }
}
