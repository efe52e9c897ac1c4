//! Run configuration: a JSON document with model, scheme and task sections,
//! leaf overrides of the form `path.to.key=value`, and the pipeline that
//! turns a configuration into a [`Scheme`].

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fluidq::{FluidModel, ModelSpec};
use crate::medist::{cme_load, erlang, CmeCatalog, EpsilonPolicy, MeDistribution, ResidualBasis};
use crate::qbdrap::{Scheme, TransientOptions, TransientSolver};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeFamily {
    Erlang,
    Cme,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SolverKind {
    Taylor,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SchemeConfig {
    #[serde(rename = "K")]
    pub k: usize,
    pub me_family: MeFamily,
    pub me_order: usize,
    pub epsilon_policy: EpsilonPolicy,
    /// Takes precedence over `epsilon_policy` when set.
    pub epsilon_override: Option<f64>,
    /// Directory of CME parameter files; falls back to the environment.
    pub cme_catalog: Option<PathBuf>,
    pub solver: SolverKind,
    pub solver_tol: f64,
    /// Multiplies the jump matrix; anything but 1 breaks conservation and
    /// exists to exercise the checks.
    pub jump_scale: f64,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        SchemeConfig {
            k: 16,
            me_family: MeFamily::Erlang,
            me_order: 16,
            epsilon_policy: EpsilonPolicy::Auto,
            epsilon_override: None,
            cme_catalog: None,
            solver: SolverKind::Taylor,
            solver_tol: TransientOptions::default().tol,
            jump_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyToggles {
    pub conservation: bool,
    pub phase_law: bool,
    pub exponential_equivalence: bool,
    pub closing: bool,
    pub derivative: bool,
    pub jump: bool,
    pub generator: bool,
    pub well_formedness: bool,
    pub oracle: bool,
    /// Orders of the bound sweeps (same family and `K` as the scheme).
    pub orders: Vec<usize>,
}

impl Default for VerifyToggles {
    fn default() -> Self {
        VerifyToggles {
            conservation: true,
            phase_law: true,
            exponential_equivalence: true,
            closing: true,
            derivative: true,
            jump: true,
            generator: true,
            well_formedness: true,
            oracle: false,
            orders: vec![4, 16, 64],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TaskConfig {
    pub times: Vec<f64>,
    pub x0: f64,
    pub i0: usize,
    pub verify: VerifyToggles,
    pub mc_paths: usize,
    pub seed: u64,
    /// Points per cell of density and distribution dumps.
    pub density_points: usize,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            times: vec![1.0],
            x0: 0.0,
            i0: 0,
            verify: VerifyToggles::default(),
            mc_paths: 100_000,
            seed: 1,
            density_points: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub scheme: SchemeConfig,
    #[serde(default)]
    pub task: TaskConfig,
    /// Parent directory of run directories.
    #[serde(default = "default_output")]
    pub output: PathBuf,
}

fn default_output() -> PathBuf {
    PathBuf::from("runs")
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))
    }

    /// Reads a config file and applies `key=value` overrides.
    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        serde_json::from_value(value).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// First 16 hex digits of the SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let digest = Sha256::digest(canonical.as_bytes());
        hex::encode(&digest[..8])
    }

    pub fn run_dir(&self) -> PathBuf {
        self.output.join(self.hash())
    }

    pub fn model(&self) -> Result<FluidModel> {
        FluidModel::from_spec(&self.model)
    }

    pub fn transient_options(&self) -> TransientOptions {
        TransientOptions {
            tol: self.scheme.solver_tol,
            solver: match self.scheme.solver {
                SolverKind::Taylor => TransientSolver::Taylor,
                SolverKind::Dense => TransientSolver::Dense,
            },
            ..Default::default()
        }
    }

    fn catalog(&self) -> Result<CmeCatalog> {
        match &self.scheme.cme_catalog {
            Some(dir) => Ok(CmeCatalog::new(dir)),
            None => CmeCatalog::from_env().ok_or_else(|| Error::MissingCatalogEntry {
                order: self.scheme.me_order,
                detail: "no catalog directory configured".into(),
            }),
        }
    }

    /// The level-time distribution of the given order, with mean `b / K`.
    pub fn distribution(&self, order: usize) -> Result<MeDistribution> {
        if self.scheme.k == 0 {
            return Err(Error::InvalidParameter("K must be at least 1".into()));
        }
        let delta = self.model.b / self.scheme.k as f64;
        match self.scheme.me_family {
            MeFamily::Erlang => erlang(order, delta),
            MeFamily::Cme if order == 1 => erlang(1, delta),
            MeFamily::Cme => cme_load(order, &self.catalog()?, delta),
        }
    }

    pub fn epsilon(&self, dist: &MeDistribution) -> Result<f64> {
        match self.scheme.epsilon_override {
            Some(e) => EpsilonPolicy::Fixed(e).resolve(dist),
            None => self.scheme.epsilon_policy.resolve(dist),
        }
    }

    pub fn basis(&self, order: usize) -> Result<ResidualBasis> {
        let dist = self.distribution(order)?;
        let eps = self.epsilon(&dist)?;
        ResidualBasis::build(dist, eps)
    }

    /// The scheme at the configured order.
    pub fn scheme(&self) -> Result<Scheme> {
        self.scheme_with_order(self.scheme.me_order)
    }

    pub fn scheme_with_order(&self, order: usize) -> Result<Scheme> {
        let model = self.model()?;
        let basis = self.basis(order)?;
        if self.scheme.jump_scale == 1.0 {
            Scheme::new(model, basis, self.scheme.k)
        } else {
            let mut d = crate::qbdrap::build_d(&basis)?;
            d.d *= self.scheme.jump_scale;
            Scheme::with_jump(model, basis, d, self.scheme.k)
        }
    }
}

/// Sets the leaf at a dotted path. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(root: &mut Value, assignment: &str) -> Result<()> {
    let (path, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not of the form key=value")))?;
    let value: Value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut node = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (depth, key) in keys.iter().enumerate() {
        let last = depth + 1 == keys.len();
        let obj = node
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override `{path}`: `{key}` is not inside an object")))?;
        if last {
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        node = obj.entry(key.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    Err(Error::Config(format!("override `{assignment}` has an empty key")))
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"model": {"T": [[-1, 1], [1, -1]], "c": [1, -1], "b": 1}}"#;

    #[test]
    fn defaults_fill_in() {
        let c = RunConfig::from_json(MINIMAL).unwrap();
        assert_eq!(c.scheme.k, 16);
        assert_eq!(c.scheme.me_family, MeFamily::Erlang);
        assert_eq!(c.task.verify.orders, vec![4, 16, 64]);
        assert!(c.model().is_ok());
    }

    #[test]
    fn overrides_set_leaves() {
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        apply_override(&mut v, "scheme.K=4").unwrap();
        apply_override(&mut v, "scheme.me_family=cme").unwrap();
        apply_override(&mut v, "task.times=[0.5,2]").unwrap();
        let c: RunConfig = serde_json::from_value(v).unwrap();
        assert_eq!(c.scheme.k, 4);
        assert_eq!(c.scheme.me_family, MeFamily::Cme);
        assert_eq!(c.task.times, vec![0.5, 2.0]);
        let mut v: Value = serde_json::from_str(MINIMAL).unwrap();
        assert!(apply_override(&mut v, "model.b").is_err());
        assert!(apply_override(&mut v, "model.c.x=1").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::from_json(MINIMAL).unwrap();
        let mut b = a.clone();
        assert_eq!(a.hash(), b.hash());
        b.scheme.k = 8;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }

    #[test]
    fn unknown_keys_rejected() {
        let text = r#"{"model": {"T": [[-1, 1], [1, -1]], "c": [1, -1], "b": 1}, "scheme": {"k": 3}}"#;
        assert!(matches!(RunConfig::from_json(text), Err(Error::Config(_))));
    }

    #[test]
    fn missing_catalog_is_reported() {
        let mut c = RunConfig::from_json(MINIMAL).unwrap();
        c.scheme.me_family = MeFamily::Cme;
        c.scheme.cme_catalog = Some(PathBuf::from("/nonexistent/catalog"));
        assert!(matches!(c.distribution(5), Err(Error::MissingCatalogEntry { .. })));
    }
}
