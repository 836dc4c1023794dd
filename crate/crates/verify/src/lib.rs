//! Verification batteries for the `cyllevy-core` numerics, with experiment
//! configuration and machine-readable reports.

pub mod checks;
pub mod config;
pub mod report;

use std::fmt;
use std::str::FromStr;

pub use config::ExperimentConfig;
pub use report::{CheckOutput, CheckRow, Report, Status, Summary};

#[derive(Debug, thiserror::Error)]
pub enum VerifyError {
    #[error("unknown check id `{0}`")]
    UnknownCheck(String),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite intermediate in {0}")]
    NonFinite(String),
    #[error("malformed report: {0}")]
    MalformedReport(String),
    #[error(transparent)]
    Core(#[from] cyllevy_core::CoreError),
}

pub type Result<T> = std::result::Result<T, VerifyError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum CheckId {
    LimitCharacteristics,
    PushforwardConsistency,
    ContractionComposition,
    ModularGrowth,
    MetrizationSandwich,
    StableEquivalence,
    IntegrationEquivalence,
    SupremumEquivalency,
    PredictableEquivalence,
    TangentLaws,
    DecouplingRatio,
    SemimartingaleBound,
    DominatedConvergence,
}

impl CheckId {
    pub const ALL: [CheckId; 13] = [
        CheckId::LimitCharacteristics,
        CheckId::PushforwardConsistency,
        CheckId::ContractionComposition,
        CheckId::ModularGrowth,
        CheckId::MetrizationSandwich,
        CheckId::StableEquivalence,
        CheckId::IntegrationEquivalence,
        CheckId::SupremumEquivalency,
        CheckId::PredictableEquivalence,
        CheckId::TangentLaws,
        CheckId::DecouplingRatio,
        CheckId::SemimartingaleBound,
        CheckId::DominatedConvergence,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CheckId::LimitCharacteristics => "limit-characteristics",
            CheckId::PushforwardConsistency => "pushforward-consistency",
            CheckId::ContractionComposition => "contraction-composition",
            CheckId::ModularGrowth => "modular-growth",
            CheckId::MetrizationSandwich => "metrization-sandwich",
            CheckId::StableEquivalence => "stable-equivalence",
            CheckId::IntegrationEquivalence => "integration-equivalence",
            CheckId::SupremumEquivalency => "supremum-equivalency",
            CheckId::PredictableEquivalence => "predictable-equivalence",
            CheckId::TangentLaws => "tangent-laws",
            CheckId::DecouplingRatio => "decoupling-ratio",
            CheckId::SemimartingaleBound => "semimartingale-bound",
            CheckId::DominatedConvergence => "dominated-convergence",
        }
    }

    /// The statement a check exercises.
    pub fn anchor(self) -> &'static str {
        match self {
            CheckId::LimitCharacteristics => {
                "sums of theta(d_in) and ||d_in||^2 ^ 1 over d_in = L(p_in) - L(p_(i-1)n) converge to b^theta and k"
            }
            CheckId::PushforwardConsistency => {
                "Phi(L) is an H-valued Levy process with characteristic function exp(t S(Phi* u))"
            }
            CheckId::ContractionComposition => "b_(O Phi) = O b_Phi + int (theta(O h) - O theta(h)) lambda_Phi(dh)",
            CheckId::ModularGrowth => "m_L(psi1 + psi2) <= 4 (m_L(psi1) + m_L(psi2))",
            CheckId::MetrizationSandwich => "d_L(psi1, psi2) <= m_L(psi1 - psi2)^p <= 2 d_L(psi1, psi2)",
            CheckId::StableEquivalence => {
                "for the canonical alpha-stable process the deterministic integrands are L^alpha([0,T], L_2(G,H))"
            }
            CheckId::IntegrationEquivalence => {
                "m_L(psi_n) -> 0 iff sup over contractions gamma of E[||int gamma psi_n dL|| ^ 1] -> 0"
            }
            CheckId::SupremumEquivalency => {
                "contractions aligning the drifts b_(O Phi) make the sup over gamma control int l_L(psi) dt"
            }
            CheckId::PredictableEquivalence => {
                "lim |||Psi_n|||_L = 0 iff int Gamma Psi_n dL -> 0 uniformly over predictable contractions"
            }
            CheckId::TangentLaws => {
                "conditional characteristic functions of X_n and Y_n both equal exp((t_n - t_(n-1)) S(Theta_n* h))"
            }
            CheckId::DecouplingRatio => {
                "E[||sum X_n|| ^ 1] <= c1 E[||sum Y_n|| ^ 1], and E[||sum Y_n|| ^ 1] <= c2 max over signs of E[||sum eps_n X_n|| ^ 1]"
            }
            CheckId::SemimartingaleBound => "{int Gamma dI(Psi) : Gamma predictable contraction} is bounded in probability",
            CheckId::DominatedConvergence => {
                "Psi_n -> Psi with ||Psi_n|| <= Upsilon integrable implies int Psi_n dL -> int Psi dL"
            }
        }
    }

    pub fn run(self, cfg: &ExperimentConfig) -> Result<CheckOutput> {
        use checks::*;
        match self {
            CheckId::LimitCharacteristics => characteristics::limit_characteristics(cfg),
            CheckId::PushforwardConsistency => characteristics::pushforward_consistency(cfg),
            CheckId::ContractionComposition => characteristics::contraction_composition(cfg),
            CheckId::ModularGrowth => modular::modular_growth(cfg),
            CheckId::MetrizationSandwich => modular::metrization_sandwich(cfg),
            CheckId::StableEquivalence => modular::stable_equivalence(cfg),
            CheckId::IntegrationEquivalence => integration::integration_equivalence(cfg),
            CheckId::SupremumEquivalency => integration::supremum_equivalency(cfg),
            CheckId::PredictableEquivalence => integration::predictable_equivalence(cfg),
            CheckId::TangentLaws => tangent::tangent_laws(cfg),
            CheckId::DecouplingRatio => tangent::decoupling_ratio(cfg),
            CheckId::SemimartingaleBound => integration::semimartingale_bound(cfg),
            CheckId::DominatedConvergence => integration::dominated_convergence(cfg),
        }
    }
}

impl fmt::Display for CheckId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CheckId {
    type Err = VerifyError;

    fn from_str(s: &str) -> Result<Self> {
        CheckId::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| VerifyError::UnknownCheck(s.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_has_an_anchor_and_round_trips() {
        for c in CheckId::ALL {
            assert!(!c.anchor().trim().is_empty(), "{c}");
            assert_eq!(c.name().parse::<CheckId>().unwrap(), c);
        }
        assert!(matches!(
            "nope".parse::<CheckId>(),
            Err(VerifyError::UnknownCheck(_))
        ));
    }
}
