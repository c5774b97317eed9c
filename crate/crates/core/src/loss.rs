//! The nine-term objective `L = Σ λ_i L_i`.
//!
//! Per level `l` the terms are, in order: fine-event BCE, annoyance MSE,
//! coarse-event BCE. So `L1, L2, L3` belong to level 1, `L4..L6` to level 2
//! and `L7..L9` to level 3.

use alloc::format;
use alloc::vec::Vec;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::NodeKind;
use crate::labels::LabelSet;
use crate::model::ForwardOutput;
use crate::real::Real;

pub const N_TERMS: usize = 9;

/// Clamp applied to probabilities before BCE.
pub const BCE_EPS: f64 = 1e-7;

/// `(level, head)` of term `i` (0-based).
pub fn term_head(i: usize) -> (usize, NodeKind) {
    let kind = match i % 3 {
        0 => NodeKind::Fae,
        1 => NodeKind::Ar,
        _ => NodeKind::Cae,
    };
    (i / 3 + 1, kind)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct Objective {
    pub lambdas: [f64; N_TERMS],
    pub eps: f64,
}

impl Default for Objective {
    fn default() -> Self {
        Objective {
            lambdas: [1.0; N_TERMS],
            eps: BCE_EPS,
        }
    }
}

/// Stacked targets of a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchTargets<T> {
    pub batch: usize,
    /// `[N * n_fae]`, row-major.
    pub fae: Vec<T>,
    /// `[N * n_cae]`.
    pub cae: Vec<T>,
    /// `[N]`.
    pub ar: Vec<T>,
}

impl<T: Real> BatchTargets<T> {
    pub fn from_labels<'a>(labels: impl IntoIterator<Item = &'a LabelSet>) -> Self {
        let bit = |b: &bool| if *b { T::one() } else { T::zero() };
        let mut out = BatchTargets {
            batch: 0,
            fae: Vec::new(),
            cae: Vec::new(),
            ar: Vec::new(),
        };
        for l in labels {
            out.batch += 1;
            out.fae.extend(l.fae.iter().map(bit));
            out.cae.extend(l.cae.iter().map(bit));
            out.ar.push(T::of(l.ar));
        }
        out
    }

    pub fn get(&self, kind: NodeKind) -> &[T] {
        match kind {
            NodeKind::Fae => &self.fae,
            NodeKind::Cae => &self.cae,
            NodeKind::Ar => &self.ar,
        }
    }
}

/// Recorded loss vars. Terms with `λ_i = 0` are not recorded.
#[derive(Debug, Clone)]
pub struct LossVars {
    pub terms: [Option<Var>; N_TERMS],
    pub total: Var,
}

/// Scalar values of one evaluation of the objective.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossValues {
    /// Unweighted `L_i`; 0 for skipped terms.
    pub terms: [f64; N_TERMS],
    pub total: f64,
}

impl LossValues {
    pub fn read<T: Real>(tape: &Tape<T>, vars: &LossVars) -> Self {
        LossValues {
            terms: vars.terms.map(|v| v.map_or(0.0, |v| tape.item(v).f64())),
            total: tape.item(vars.total).f64(),
        }
    }
}

impl Objective {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambdas.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
            return Err(Error::Input(format!("loss weight {l} must be finite and non-negative")));
        }
        if !(self.eps > 0.0 && self.eps < 0.5) {
            return Err(Error::Input(format!("BCE clamp {} outside (0, 0.5)", self.eps)));
        }
        Ok(())
    }

    /// Records all weighted terms on `tape`. Fails with [`Error::NonFinite`]
    /// naming the first head that produced NaN or infinity.
    pub fn record<T: Real>(
        &self,
        tape: &mut Tape<T>,
        out: &ForwardOutput,
        targets: &BatchTargets<T>,
    ) -> Result<LossVars> {
        for (i, level) in out.levels.iter().enumerate() {
            for kind in NodeKind::ALL {
                if tape.value(level.get(kind)).data().iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite {
                        head: format!("level{}.{}", i + 1, kind.name()),
                    });
                }
            }
        }
        let mut terms = [None; N_TERMS];
        let mut total: Option<Var> = None;
        for (i, term) in terms.iter_mut().enumerate() {
            let lambda = self.lambdas[i];
            if lambda == 0.0 {
                continue;
            }
            let (level, kind) = term_head(i);
            let pred = out.levels[level - 1].get(kind);
            let target = targets.get(kind);
            let l = match kind {
                NodeKind::Ar => tape.mse(pred, target)?,
                _ => tape.bce_mean(pred, target, self.eps)?,
            };
            *term = Some(l);
            let weighted = if lambda == 1.0 { l } else { tape.scale(l, T::of(lambda)) };
            total = Some(match total {
                None => weighted,
                Some(t) => tape.add(t, weighted)?,
            });
        }
        let total = match total {
            Some(t) => t,
            None => return Err(Error::Input("every loss weight is zero".into())),
        };
        Ok(LossVars { terms, total })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn term_order() {
        assert_eq!(term_head(0), (1, NodeKind::Fae));
        assert_eq!(term_head(1), (1, NodeKind::Ar));
        assert_eq!(term_head(2), (1, NodeKind::Cae));
        assert_eq!(term_head(4), (2, NodeKind::Ar));
        assert_eq!(term_head(8), (3, NodeKind::Cae));
    }

    #[test]
    fn rejects_negative_weight() {
        let mut o = Objective::default();
        o.lambdas[3] = -1.0;
        assert!(o.validate().is_err());
        assert!(Objective::default().validate().is_ok());
    }
}
