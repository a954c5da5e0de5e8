//! Run configuration: TOML with one section per concern, unknown keys
//! rejected, and a content hash over the canonical JSON form.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::equilibrium::{KappaRule, MarketOptions, TRUNCATION_TOLERANCE};
use crate::flow::TimeGrid;
use crate::oracle::Confidence;
use crate::scenarios::{
    Example51Spec, Example53Spec, FlowSpec, IncomeSpec, PopulationSpec, PreferenceSpec, ScenarioKind, ScenarioSpec,
    TabulatedSpec,
};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSection {
    pub kind: ScenarioKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    #[serde(default)]
    pub t0: f64,
    pub horizon: f64,
    pub steps: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EnsembleSection {
    pub paths: usize,
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KappaChoice {
    /// Structural for closed forms, estimated for tabulated endowments.
    Auto,
    Structural,
    Estimated,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EquilibriumSection {
    pub truncation_tolerance: f64,
    pub kappa: KappaChoice,
}

impl Default for EquilibriumSection {
    fn default() -> Self {
        Self {
            truncation_tolerance: TRUNCATION_TOLERANCE,
            kappa: KappaChoice::Auto,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerificationSection {
    pub z: f64,
    pub required_fraction: f64,
    pub cocycle: bool,
    pub ito: bool,
    pub clearing: bool,
    pub no_arbitrage: bool,
    pub sigma_w: bool,
    pub martingale: bool,
    pub joneses: bool,
    pub duality: bool,
    pub time_consistency: bool,
    pub smooth_market: bool,
    /// Random preference cases for the duality check.
    pub duality_cases: usize,
}

impl Default for VerificationSection {
    fn default() -> Self {
        Self {
            z: 3.0,
            required_fraction: 0.95,
            cocycle: true,
            ito: true,
            clearing: true,
            no_arbitrage: true,
            sigma_w: true,
            martingale: true,
            joneses: true,
            duality: true,
            time_consistency: true,
            smooth_market: true,
            duality_cases: 100,
        }
    }
}

impl VerificationSection {
    pub fn confidence(&self) -> Confidence {
        Confidence {
            z: self.z,
            required_fraction: self.required_fraction,
            floor: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSection {
    pub dir: PathBuf,
}

impl Default for OutputSection {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub scenario: ScenarioSection,
    pub grid: GridSection,
    pub ensemble: EnsembleSection,
    pub flow: FlowSpec,
    pub preferences: PreferenceSpec,
    pub income: IncomeSpec,
    pub population: PopulationSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example51: Option<Example51Spec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub example53: Option<Example53Spec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tabulated: Option<TabulatedSpec>,
    #[serde(default)]
    pub equilibrium: EquilibriumSection,
    #[serde(default)]
    pub verification: VerificationSection,
    #[serde(default)]
    pub output: OutputSection,
}

/// 1-based line of `key` inside `[section]`, for error messages.
fn locate(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, line) in text.lines().enumerate() {
        let l = line.trim();
        if l.starts_with('[') {
            current = l.trim_matches(|c| c == '[' || c == ']').trim().to_string();
            if key.is_empty() && current == section {
                return Some(i + 1);
            }
        } else if current == section && !key.is_empty() {
            if let Some((k, _)) = l.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

fn invalid(text: &str, section: &str, key: &str, msg: impl std::fmt::Display) -> Error {
    match locate(text, section, key).or_else(|| locate(text, section, "")) {
        Some(line) => Error::Config(format!("line {line}: {section}.{key}: {msg}")),
        None => Error::Config(format!("{section}.{key}: {msg}")),
    }
}

impl RunConfig {
    /// Parse and validate; messages carry the offending line.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            let line = e.span().map(|s| text[..s.start].matches('\n').count() + 1);
            match line {
                Some(l) => Error::Config(format!("line {l}: {}", e.message())),
                None => Error::Config(e.message().to_string()),
            }
        })?;
        cfg.validate_with(text)?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.validate_with("")
    }

    fn validate_with(&self, text: &str) -> Result<()> {
        let g = &self.grid;
        if g.steps == 0 {
            return Err(invalid(text, "grid", "steps", "must be at least 1"));
        }
        if !(g.horizon > g.t0) || !g.horizon.is_finite() || !g.t0.is_finite() {
            return Err(invalid(text, "grid", "horizon", "must be finite and exceed t0"));
        }
        if self.ensemble.paths == 0 {
            return Err(invalid(text, "ensemble", "paths", "must be at least 1"));
        }
        let p = &self.preferences;
        if !(p.gamma_min > 0.0) {
            return Err(invalid(text, "preferences", "gamma_min", "impatience lower bound must be > 0"));
        }
        if !(p.gamma_max >= p.gamma_min) || !p.gamma_max.is_finite() {
            return Err(invalid(text, "preferences", "gamma_max", "must be finite and ≥ gamma_min"));
        }
        let tol = self.equilibrium.truncation_tolerance;
        if !(tol > 0.0 && tol < 1.0) {
            return Err(invalid(text, "equilibrium", "truncation_tolerance", "must lie in (0, 1)"));
        }
        let v = &self.verification;
        if !(v.z > 0.0) || !(v.required_fraction > 0.0 && v.required_fraction <= 1.0) {
            return Err(invalid(text, "verification", "z", "need z > 0 and required_fraction in (0, 1]"));
        }
        let need = |present: bool, section: &str| {
            if present {
                Ok(())
            } else {
                Err(invalid(text, "scenario", "kind", format!("kind {} needs a [{section}] section", self.scenario.kind.name())))
            }
        };
        match self.scenario.kind {
            ScenarioKind::Rentier => {}
            ScenarioKind::Example51 => need(self.example51.is_some(), "example51")?,
            ScenarioKind::Example53 => need(self.example53.is_some(), "example53")?,
            ScenarioKind::Tabulated => need(self.tabulated.is_some(), "tabulated")?,
        }
        // Shape checks live with the flow model.
        self.scenario_spec()
            .flow_model()
            .map_err(|e| invalid(text, "flow", "vol", e))?;
        Ok(())
    }

    pub fn scenario_spec(&self) -> ScenarioSpec {
        ScenarioSpec {
            kind: self.scenario.kind,
            flow: self.flow.clone(),
            preferences: self.preferences.clone(),
            income: self.income.clone(),
            population: self.population.clone(),
            example51: self.example51.clone(),
            example53: self.example53.clone(),
            tabulated: self.tabulated.clone(),
        }
    }

    pub fn time_grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.grid.t0, self.grid.horizon, self.grid.steps)
    }

    pub fn market_options(&self) -> MarketOptions {
        MarketOptions {
            truncation_tolerance: self.equilibrium.truncation_tolerance,
            kappa: match self.equilibrium.kappa {
                KappaChoice::Auto => None,
                KappaChoice::Structural => Some(KappaRule::Structural),
                KappaChoice::Estimated => Some(KappaRule::Estimated),
            },
            nested_seed: self.ensemble.seed,
        }
    }

    /// Config echo without the output location, which does not affect results.
    pub fn canonical_json(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output");
        }
        v
    }

    /// SHA-256 of the canonical JSON (sorted keys, output section removed).
    pub fn config_hash(&self) -> String {
        let text = serde_json::to_string(&self.canonical_json()).expect("value serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }

    /// Desk configuration for a scenario kind.
    pub fn desk(kind: ScenarioKind) -> Self {
        let s = ScenarioSpec::desk(kind);
        Self {
            scenario: ScenarioSection { kind },
            grid: GridSection {
                t0: 0.0,
                horizon: 10.0,
                steps: 200,
            },
            ensemble: EnsembleSection { paths: 1000, seed: 42 },
            flow: s.flow,
            preferences: s.preferences,
            income: s.income,
            population: s.population,
            example51: s.example51,
            example53: s.example53,
            tabulated: s.tabulated,
            equilibrium: EquilibriumSection::default(),
            verification: VerificationSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_round_trip() {
        let c = RunConfig::desk(ScenarioKind::Example51);
        let text = toml::to_string(&c).unwrap();
        let back = RunConfig::from_toml_str(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.config_hash(), c.config_hash());
    }

    #[test]
    fn hash_ignores_output_and_tracks_seed() {
        let a = RunConfig::desk(ScenarioKind::Rentier);
        let mut b = a.clone();
        b.output.dir = PathBuf::from("elsewhere");
        assert_eq!(a.config_hash(), b.config_hash());
        b.ensemble.seed = 43;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn unknown_key_reports_line() {
        let mut text = toml::to_string(&RunConfig::desk(ScenarioKind::Rentier)).unwrap();
        text = text.replace("[grid]\n", "[grid]\nbogus = 1\n");
        let line = text.lines().position(|l| l.starts_with("bogus")).unwrap() + 1;
        let err = RunConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains(&format!("line {line}")) && err.contains("bogus"), "{err}");
    }

    #[test]
    fn zero_gamma_min_rejected_with_line() {
        let mut c = RunConfig::desk(ScenarioKind::Rentier);
        c.preferences.gamma_min = 0.0;
        let text = toml::to_string(&c).unwrap();
        let line = text.lines().position(|l| l.starts_with("gamma_min")).unwrap() + 1;
        let err = RunConfig::from_toml_str(&text).unwrap_err().to_string();
        assert!(err.contains(&format!("line {line}")) && err.contains("gamma_min"), "{err}");
    }

    #[test]
    fn missing_kind_section_rejected() {
        let mut c = RunConfig::desk(ScenarioKind::Example51);
        c.example51 = None;
        assert!(c.validate().is_err());
        let mut c = RunConfig::desk(ScenarioKind::Rentier);
        c.grid.steps = 0;
        assert!(c.validate().is_err());
        c.grid.steps = 10;
        c.ensemble.paths = 0;
        assert!(c.validate().is_err());
    }
}
