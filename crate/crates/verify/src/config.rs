use std::path::PathBuf;

use cyllevy_core::driver::Driver;
use cyllevy_core::linalg::{HsMap, Partition};
use cyllevy_core::modular::StepFunction;
use cyllevy_core::rng::RngStream;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::VerifyError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Budgets {
    pub n_mc: usize,
    pub gamma_search: usize,
    pub l_search: usize,
}

impl Default for Budgets {
    fn default() -> Self {
        Self {
            n_mc: 10_000,
            gamma_search: 24,
            l_search: 200,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case", deny_unknown_fields)]
pub enum IntegrandSpec {
    /// Explicit step function.
    Step { function: StepFunction },
    /// Independent Gaussian values on `pieces` equal intervals of `[0, 1]`,
    /// rescaled to the given HS norm.
    RandomStep { pieces: usize, hs_norm: f64 },
    /// `hs_norm / sqrt(d) * I` on `[0, 1]`.
    Constant { hs_norm: f64 },
}

impl Default for IntegrandSpec {
    fn default() -> Self {
        IntegrandSpec::RandomStep {
            pieces: 4,
            hs_norm: 1.0,
        }
    }
}

/// Time grid for `simulate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub horizon: f64,
    pub intervals: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            intervals: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// `d_G = d_H`.
    #[serde(default = "default_dims")]
    pub dims: usize,
    /// Overrides the standard driver set of a battery when present.
    #[serde(default)]
    pub driver: Option<Driver>,
    #[serde(default)]
    pub integrand: IntegrandSpec,
    #[serde(default)]
    pub budgets: Budgets,
    pub seed: u64,
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub grid: Option<GridSpec>,
}

fn default_dims() -> usize {
    8
}

fn default_out() -> PathBuf {
    PathBuf::from("out")
}

impl ExperimentConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self {
            dims: default_dims(),
            driver: None,
            integrand: IntegrandSpec::default(),
            budgets: Budgets::default(),
            seed,
            out_dir: default_out(),
            grid: None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, VerifyError> {
        let cfg: Self =
            serde_json::from_str(text).map_err(|e| VerifyError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), VerifyError> {
        let b = &self.budgets;
        if self.dims == 0 {
            return Err(VerifyError::Config("dims must be positive".into()));
        }
        if b.n_mc == 0 || b.gamma_search == 0 || b.l_search == 0 {
            return Err(VerifyError::Config("budgets must be positive".into()));
        }
        if let Some(d) = &self.driver {
            if d.d_g() != self.dims {
                return Err(VerifyError::Config(format!(
                    "driver dimension {} differs from dims {}",
                    d.d_g(),
                    self.dims
                )));
            }
        }
        match &self.integrand {
            IntegrandSpec::Step { function }
                if function.d_g() != self.dims || function.d_h() != self.dims =>
            {
                return Err(VerifyError::Config(
                    "step integrand dimensions differ from dims".into(),
                ));
            }
            IntegrandSpec::RandomStep { pieces, hs_norm }
                if *pieces == 0 || !(hs_norm.is_finite() && *hs_norm >= 0.0) =>
            {
                return Err(VerifyError::Config(
                    "random-step needs pieces > 0 and a finite norm".into(),
                ));
            }
            IntegrandSpec::Constant { hs_norm } if !(hs_norm.is_finite() && *hs_norm >= 0.0) => {
                return Err(VerifyError::Config(
                    "constant integrand needs a finite norm".into(),
                ));
            }
            _ => {}
        }
        if let Some(g) = &self.grid {
            if !(g.horizon > 0.0 && g.horizon.is_finite()) || g.intervals == 0 {
                return Err(VerifyError::Config(
                    "grid needs a positive horizon and intervals".into(),
                ));
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    pub fn stream(&self, module: u64) -> RngStream {
        RngStream::for_module(self.seed, module)
    }

    pub fn integrand(&self) -> StepFunction {
        let d = self.dims;
        match &self.integrand {
            IntegrandSpec::Step { function } => function.clone(),
            IntegrandSpec::RandomStep { pieces, hs_norm } => {
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.stream(cyllevy_core::rng::module::VERIFY)
                        .child(0x1f)
                        .key(),
                );
                let p = Partition::uniform(0.0, 1.0, *pieces).expect("positive piece count");
                let vals = (0..*pieces)
                    .map(|_| HsMap::random(&mut rng, d, d, *hs_norm))
                    .collect();
                StepFunction::from_intervals(p, vals).expect("matching lengths")
            }
            IntegrandSpec::Constant { hs_norm } => StepFunction::constant(
                Partition::uniform(0.0, 1.0, 1).expect("unit interval"),
                HsMap::identity(d).scale(hs_norm / (d as f64).sqrt()),
            ),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seed_is_mandatory_and_unknown_fields_rejected() {
        assert!(ExperimentConfig::from_json("{}").is_err());
        assert!(ExperimentConfig::from_json(r#"{"seed": 1, "colour": "red"}"#).is_err());
        assert!(ExperimentConfig::from_json(
            r#"{"seed": 1, "budgets": {"n_mc": 5, "gamma_search": 1, "l_search": 1, "x": 2}}"#
        )
        .is_err());
        let cfg = ExperimentConfig::from_json(r#"{"seed": 7}"#).unwrap();
        assert_eq!(cfg, ExperimentConfig::with_seed(7));
    }

    #[test]
    fn budgets_must_be_positive() {
        let r = ExperimentConfig::from_json(
            r#"{"seed": 1, "budgets": {"n_mc": 0, "gamma_search": 1, "l_search": 1}}"#,
        );
        assert!(matches!(r, Err(VerifyError::Config(_))));
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::with_seed(1);
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.budgets.n_mc += 1;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 64);
    }

    #[test]
    fn driver_and_integrand_round_trip() {
        let mut cfg = ExperimentConfig::with_seed(3);
        cfg.dims = 2;
        cfg.driver = Some(Driver::canonical_stable(2, 1.2).unwrap());
        cfg.integrand = IntegrandSpec::Step {
            function: ExperimentConfig {
                dims: 2,
                ..ExperimentConfig::with_seed(3)
            }
            .integrand(),
        };
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ExperimentConfig::from_json(&text).unwrap(), cfg);
        let mut bad = cfg.clone();
        bad.dims = 3;
        assert!(ExperimentConfig::from_json(&serde_json::to_string(&bad).unwrap()).is_err());
    }
}
