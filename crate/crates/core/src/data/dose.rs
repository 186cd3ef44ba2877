//! Norepinephrine-equivalent vasopressor dose.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Drug {
    Norepinephrine,
    Epinephrine,
    Dopamine,
    Phenylephrine,
    Vasopressin,
}

impl Drug {
    pub const ALL: [Drug; 5] = [
        Drug::Norepinephrine,
        Drug::Epinephrine,
        Drug::Dopamine,
        Drug::Phenylephrine,
        Drug::Vasopressin,
    ];

    /// Multiplier converting this drug's rate to norepinephrine units.
    pub fn ne_factor(self) -> f64 {
        match self {
            Drug::Norepinephrine | Drug::Epinephrine => 1.0,
            Drug::Dopamine => 1.0 / 150.0,
            Drug::Phenylephrine => 0.1,
            Drug::Vasopressin => 2.5,
        }
    }
}

/// Infusion rates of the five vasopressors at one time point; `None` means
/// not recorded.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct VasopressorRates {
    pub norepinephrine: Option<f64>,
    pub epinephrine: Option<f64>,
    pub dopamine: Option<f64>,
    pub phenylephrine: Option<f64>,
    pub vasopressin: Option<f64>,
}

impl VasopressorRates {
    pub fn get(&self, drug: Drug) -> Option<f64> {
        match drug {
            Drug::Norepinephrine => self.norepinephrine,
            Drug::Epinephrine => self.epinephrine,
            Drug::Dopamine => self.dopamine,
            Drug::Phenylephrine => self.phenylephrine,
            Drug::Vasopressin => self.vasopressin,
        }
    }

    pub fn set(&mut self, drug: Drug, rate: Option<f64>) {
        let slot = match drug {
            Drug::Norepinephrine => &mut self.norepinephrine,
            Drug::Epinephrine => &mut self.epinephrine,
            Drug::Dopamine => &mut self.dopamine,
            Drug::Phenylephrine => &mut self.phenylephrine,
            Drug::Vasopressin => &mut self.vasopressin,
        };
        *slot = rate;
    }
}

/// `NE + Epi + Dop/150 + Phen/10 + 2.5 Vas`.
///
/// Unrecorded drugs count as zero as long as at least one is recorded; with
/// nothing recorded the result is `None`.
pub fn ne_equivalent(rates: &VasopressorRates) -> Result<Option<f64>> {
    let mut total = None;
    for drug in Drug::ALL {
        if let Some(r) = rates.get(drug) {
            if !r.is_finite() || r < 0.0 {
                return Err(Error::Data(format!("invalid {drug:?} rate {r}")));
            }
            *total.get_or_insert(0.0) += drug.ne_factor() * r;
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rates(v: [f64; 5]) -> VasopressorRates {
        VasopressorRates {
            norepinephrine: Some(v[0]),
            epinephrine: Some(v[1]),
            dopamine: Some(v[2]),
            phenylephrine: Some(v[3]),
            vasopressin: Some(v[4]),
        }
    }

    #[test]
    fn worked_examples() {
        assert_eq!(ne_equivalent(&rates([0.0; 5])).unwrap(), Some(0.0));
        let v = ne_equivalent(&rates([0.1, 0.05, 15.0, 2.0, 0.04])).unwrap().unwrap();
        assert!((v - 0.55).abs() < 1e-15);
        let only_vas = VasopressorRates {
            vasopressin: Some(0.02),
            ..Default::default()
        };
        assert_eq!(ne_equivalent(&only_vas).unwrap(), Some(0.05));
        assert_eq!(ne_equivalent(&VasopressorRates::default()).unwrap(), None);
    }

    #[test]
    fn negative_dose_is_a_data_error() {
        let bad = VasopressorRates {
            epinephrine: Some(-0.1),
            ..Default::default()
        };
        assert!(matches!(ne_equivalent(&bad), Err(Error::Data(_))));
    }

    proptest! {
        #[test]
        fn linear_in_each_argument(
            a in prop::array::uniform5(0.0f64..10.0),
            b in prop::array::uniform5(0.0f64..10.0),
            k in 0.0f64..5.0,
        ) {
            let sum: [f64; 5] = std::array::from_fn(|i| a[i] + k * b[i]);
            let lhs = ne_equivalent(&rates(sum)).unwrap().unwrap();
            let rhs = ne_equivalent(&rates(a)).unwrap().unwrap()
                + k * ne_equivalent(&rates(b)).unwrap().unwrap();
            prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
        }
    }
}
