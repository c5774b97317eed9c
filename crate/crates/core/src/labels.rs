//! Event taxonomy and per-clip targets.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};

/// Fine-grained event names, coarse-grained class names, and the total map
/// from each fine event to its coarse class.
#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Taxonomy {
    fae_names: Vec<String>,
    cae_names: Vec<String>,
    mapping: Vec<usize>,
}

impl Taxonomy {
    /// Validates that both name lists are duplicate-free and that `mapping`
    /// assigns every fine event to an existing coarse class.
    pub fn new(fae_names: Vec<String>, cae_names: Vec<String>, mapping: Vec<usize>) -> Result<Self> {
        if fae_names.is_empty() || cae_names.is_empty() {
            return Err(Error::Input("taxonomy needs at least one event per level".into()));
        }
        for (level, names) in [("fine", &fae_names), ("coarse", &cae_names)] {
            for (i, n) in names.iter().enumerate() {
                if names[..i].contains(n) {
                    return Err(Error::Input(alloc::format!(
                        "duplicate {level} event name {n:?}"
                    )));
                }
            }
        }
        if mapping.len() != fae_names.len() {
            return Err(Error::Input(alloc::format!(
                "mapping covers {} of {} fine events",
                mapping.len(),
                fae_names.len()
            )));
        }
        if let Some((i, &c)) = mapping.iter().enumerate().find(|(_, &c)| c >= cae_names.len()) {
            return Err(Error::Input(alloc::format!(
                "fine event {:?} maps to coarse index {c} (only {} classes)",
                fae_names[i],
                cae_names.len()
            )));
        }
        Ok(Taxonomy {
            fae_names,
            cae_names,
            mapping,
        })
    }

    pub fn fae_names(&self) -> &[String] {
        &self.fae_names
    }

    pub fn cae_names(&self) -> &[String] {
        &self.cae_names
    }

    pub fn n_fae(&self) -> usize {
        self.fae_names.len()
    }

    pub fn n_cae(&self) -> usize {
        self.cae_names.len()
    }

    /// Coarse class index of fine event `fae`.
    pub fn coarse_of(&self, fae: usize) -> usize {
        self.mapping[fae]
    }

    /// Coarse labels by OR-aggregating the fine labels of each coarse class.
    pub fn derive_cae(&self, y_fae: &[bool]) -> Vec<bool> {
        let mut out = alloc::vec![false; self.cae_names.len()];
        for (i, &on) in y_fae.iter().enumerate() {
            if on {
                out[self.mapping[i]] = true;
            }
        }
        out
    }
}

/// Ground truth of one clip.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LabelSet {
    pub fae: Vec<bool>,
    pub cae: Vec<bool>,
    /// Annoyance rating in `[1, 10]`.
    pub ar: f64,
}

/// Valid annoyance-rating range.
pub const AR_RANGE: (f64, f64) = (1.0, 10.0);

impl LabelSet {
    /// Builds labels with coarse events derived through `taxonomy`.
    pub fn new(taxonomy: &Taxonomy, fae: Vec<bool>, ar: f64) -> Result<Self> {
        if fae.len() != taxonomy.n_fae() {
            return Err(Error::shape("labels", &[fae.len()], &[taxonomy.n_fae()]));
        }
        if !(AR_RANGE.0..=AR_RANGE.1).contains(&ar) {
            return Err(Error::Input(alloc::format!(
                "annoyance rating {ar} outside [1, 10]"
            )));
        }
        let cae = taxonomy.derive_cae(&fae);
        Ok(LabelSet { fae, cae, ar })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;
    use proptest::prelude::*;

    fn tax() -> Taxonomy {
        let fae = (0..24).map(|i| alloc::format!("f{i}")).collect();
        let cae = (0..7).map(|i| alloc::format!("c{i}")).collect();
        Taxonomy::new(fae, cae, (0..24).map(|i| (i * 5) % 7).collect()).unwrap()
    }

    #[test]
    fn rejects_bad_taxonomies() {
        let two = || alloc::vec!["a".to_string(), "b".to_string()];
        assert!(Taxonomy::new(two(), two(), alloc::vec![0, 2]).is_err());
        assert!(Taxonomy::new(two(), two(), alloc::vec![0]).is_err());
        let dup = alloc::vec!["a".to_string(), "a".to_string()];
        assert!(Taxonomy::new(dup, two(), alloc::vec![0, 1]).is_err());
    }

    #[test]
    fn all_zero_fine_gives_all_zero_coarse() {
        assert_eq!(tax().derive_cae(&[false; 24]), alloc::vec![false; 7]);
    }

    #[test]
    fn single_fine_event_activates_its_coarse_class() {
        let t = tax();
        for k in 0..24 {
            let mut y = [false; 24];
            y[k] = true;
            let c = t.derive_cae(&y);
            for (j, &on) in c.iter().enumerate() {
                assert_eq!(on, j == t.coarse_of(k));
            }
        }
    }

    #[test]
    fn ar_outside_range_rejected() {
        assert!(LabelSet::new(&tax(), alloc::vec![false; 24], 10.5).is_err());
        assert!(LabelSet::new(&tax(), alloc::vec![false; 24], 1.0).is_ok());
    }

    proptest! {
        #[test]
        fn derive_matches_brute_force_or(bits in proptest::collection::vec(any::<bool>(), 24)) {
            let t = tax();
            let got = t.derive_cae(&bits);
            for j in 0..7 {
                let mut expect = false;
                for k in 0..24 {
                    if t.coarse_of(k) == j && bits[k] {
                        expect = true;
                    }
                }
                prop_assert_eq!(got[j], expect);
            }
        }

        #[test]
        fn derive_is_monotone(bits in proptest::collection::vec(any::<bool>(), 24), extra in 0usize..24) {
            let t = tax();
            let before = t.derive_cae(&bits);
            let mut more = bits.clone();
            more[extra] = true;
            let after = t.derive_cae(&more);
            for j in 0..7 {
                prop_assert!(!before[j] || after[j]);
            }
        }
    }
}
