//! Run configuration: JSON file values overridden by command-line flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use seqpar::simnet::{LatencyModel, Mesh};
use seqpar::strategies::{strategy_mesh, RingVariant, Strategy};
use seqpar::Shape4;

/// A configuration problem; maps to exit status 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl std::fmt::Display for ConfigError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<seqpar::Error> for ConfigError {
    fn from(e: seqpar::Error) -> Self {
        ConfigError(e.to_string())
    }
}

/// Latency model fields; unset fields keep their defaults.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub alpha_intra: Option<f64>,
    pub beta_intra: Option<f64>,
    pub alpha_inter: Option<f64>,
    pub beta_inter: Option<f64>,
    pub compute_rate: Option<f64>,
}

impl ModelOverrides {
    fn merge(&mut self, other: &ModelOverrides) {
        let pairs = [
            (&mut self.alpha_intra, other.alpha_intra),
            (&mut self.beta_intra, other.beta_intra),
            (&mut self.alpha_inter, other.alpha_inter),
            (&mut self.beta_inter, other.beta_inter),
            (&mut self.compute_rate, other.compute_rate),
        ];
        for (slot, v) in pairs {
            if v.is_some() {
                *slot = v;
            }
        }
    }

    fn apply(&self, base: LatencyModel) -> LatencyModel {
        LatencyModel {
            alpha_intra: self.alpha_intra.unwrap_or(base.alpha_intra),
            beta_intra: self.beta_intra.unwrap_or(base.beta_intra),
            alpha_inter: self.alpha_inter.unwrap_or(base.alpha_inter),
            beta_inter: self.beta_inter.unwrap_or(base.beta_inter),
            compute_rate: self.compute_rate.unwrap_or(base.compute_rate),
        }
    }
}

/// Contents of a `--config` file. Every field is optional.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub n: Option<usize>,
    pub m: Option<usize>,
    pub t: Option<usize>,
    pub u: Option<usize>,
    pub r: Option<usize>,
    pub b: Option<usize>,
    pub l: Option<usize>,
    pub h: Option<usize>,
    pub d: Option<usize>,
    pub strategies: Option<Vec<String>>,
    pub seed: Option<u64>,
    pub numeric: Option<String>,
    pub ring_variant: Option<RingVariant>,
    pub model: Option<ModelOverrides>,
    pub model_file: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub max_n: Option<usize>,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| ConfigError(format!("invalid config {}: {e}", path.display())))
    }

    /// Values in `flags` win over values already present.
    pub fn overlay(mut self, flags: FileConfig) -> Self {
        macro_rules! take {
            ($($f:ident),*) => { $( if flags.$f.is_some() { self.$f = flags.$f; } )* };
        }
        take!(n, m, t, u, r, b, l, h, d, strategies, seed, numeric, ring_variant, model_file, out, max_n);
        if let Some(m) = flags.model {
            self.model.get_or_insert_with(ModelOverrides::default).merge(&m);
        }
        self
    }
}

/// Fully resolved configuration of one command.
#[derive(Debug, Clone, Serialize)]
pub struct RunConfig {
    pub n: usize,
    pub m: usize,
    /// Explicit `(T, U, R)` for the torus-based strategies; `None` plans via gcd.
    pub explicit_mesh: Option<[usize; 3]>,
    pub b: usize,
    pub l: usize,
    pub h: usize,
    pub d: usize,
    pub strategies: Vec<Strategy>,
    pub seed: u64,
    pub numeric: String,
    pub ring_variant: RingVariant,
    pub model: LatencyModel,
}

impl RunConfig {
    pub fn resolve(cfg: FileConfig, default_strategies: &[Strategy]) -> Result<Self, ConfigError> {
        let n = cfg.n.unwrap_or(2);
        let m = cfg.m.unwrap_or(2);
        if n == 0 || m == 0 {
            return Err(ConfigError(format!("N={n} and M={m} must be >= 1")));
        }
        let explicit_mesh = match (cfg.t, cfg.u, cfg.r) {
            (None, None, None) => None,
            (Some(t), Some(u), Some(r)) => {
                Mesh::new(n, m, t, u, r)?;
                Some([t, u, r])
            }
            _ => {
                return Err(ConfigError(
                    "explicit mesh needs all of --t, --u, --r (or none of them to plan via gcd)".into(),
                ))
            }
        };
        let p = n * m;
        let (b, h, d) = (cfg.b.unwrap_or(1), cfg.h.unwrap_or(8), cfg.d.unwrap_or(16));
        let l = cfg.l.unwrap_or(16 * p);
        Shape4::new(b, l, h, d)?;
        if l % p != 0 {
            return Err(ConfigError(format!("L={l} not divisible by P=N*M={p}")));
        }
        let strategies = match cfg.strategies {
            None => default_strategies.to_vec(),
            Some(names) => parse_strategies(&names)?,
        };
        let numeric = cfg.numeric.unwrap_or_else(|| "f64".to_string());
        if numeric != "f64" {
            return Err(ConfigError(format!("numeric mode {numeric:?} is not supported; only f64")));
        }
        // Inline model values (config file, then flags) win over a model file.
        let mut overrides = ModelOverrides::default();
        if let Some(path) = &cfg.model_file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| ConfigError(format!("cannot read model file {}: {e}", path.display())))?;
            overrides = serde_json::from_str(&text)
                .map_err(|e| ConfigError(format!("invalid model file {}: {e}", path.display())))?;
        }
        if let Some(inline) = &cfg.model {
            overrides.merge(inline);
        }
        let model = overrides.apply(LatencyModel::default());
        model.validate()?;
        Ok(Self {
            n,
            m,
            explicit_mesh,
            b,
            l,
            h,
            d,
            strategies,
            seed: cfg.seed.unwrap_or(0),
            numeric,
            ring_variant: cfg.ring_variant.unwrap_or_default(),
            model,
        })
    }

    pub fn world_size(&self) -> usize {
        self.n * self.m
    }

    pub fn shape(&self) -> Shape4 {
        Shape4::new(self.b, self.l, self.h, self.d).expect("validated in resolve")
    }

    /// Mesh for `strategy`, honouring an explicit `(T, U, R)` for TAS and torus.
    pub fn mesh_for(&self, strategy: Strategy) -> Result<Mesh, ConfigError> {
        let mesh = match (strategy, self.explicit_mesh) {
            (Strategy::Tas | Strategy::Torus, Some([t, u, r])) => {
                let mesh = Mesh::new(self.n, self.m, t, u, r)?;
                if self.h % (t * u) != 0 {
                    return Err(ConfigError(format!("{strategy}: H={} not divisible by T*U={t}*{u}", self.h)));
                }
                if strategy == Strategy::Torus {
                    seqpar::strategies::check_torus_mesh(&mesh, self.h)?;
                }
                mesh
            }
            _ => strategy_mesh(strategy, self.n, self.m, self.h)?,
        };
        Ok(mesh)
    }

    /// Meshes for every requested strategy; all violated constraints are reported together.
    pub fn meshes(&self) -> Result<Vec<(Strategy, Mesh)>, ConfigError> {
        let mut ok = Vec::new();
        let mut errors = Vec::new();
        for &s in &self.strategies {
            match self.mesh_for(s) {
                Ok(mesh) => ok.push((s, mesh)),
                Err(e) => errors.push(e.0),
            }
        }
        if errors.is_empty() {
            Ok(ok)
        } else {
            Err(ConfigError(errors.join("; ")))
        }
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

fn parse_strategies(names: &[String]) -> Result<Vec<Strategy>, ConfigError> {
    let mut out: Vec<Strategy> = Vec::new();
    for name in names.iter().flat_map(|s| s.split(',')).filter(|s| !s.trim().is_empty()) {
        let s: Strategy = name.parse().map_err(|e: seqpar::Error| ConfigError(e.to_string()))?;
        if !out.contains(&s) {
            out.push(s);
        }
    }
    if out.is_empty() {
        return Err(ConfigError("no strategies selected".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let file = FileConfig {
            n: Some(4),
            h: Some(24),
            model: Some(ModelOverrides {
                alpha_inter: Some(2e-5),
                ..Default::default()
            }),
            ..Default::default()
        };
        let flags = FileConfig {
            n: Some(2),
            model: Some(ModelOverrides {
                beta_inter: Some(1e9),
                ..Default::default()
            }),
            ..Default::default()
        };
        let cfg = RunConfig::resolve(file.overlay(flags), &Strategy::ALL).unwrap();
        assert_eq!((cfg.n, cfg.h, cfg.l), (2, 24, 64));
        assert_eq!(cfg.model.alpha_inter, 2e-5);
        assert_eq!(cfg.model.beta_inter, 1e9);
    }

    #[test]
    fn partial_explicit_mesh_rejected() {
        let cfg = FileConfig {
            t: Some(2),
            ..Default::default()
        };
        assert!(RunConfig::resolve(cfg, &Strategy::ALL).is_err());
    }

    #[test]
    fn explicit_mesh_must_cover_cluster() {
        let cfg = FileConfig {
            t: Some(2),
            u: Some(2),
            r: Some(2),
            ..Default::default()
        };
        let e = RunConfig::resolve(cfg, &Strategy::ALL).unwrap_err();
        assert!(e.0.contains("T*U*R"), "{e}");
    }

    #[test]
    fn hash_depends_on_values() {
        let a = RunConfig::resolve(FileConfig::default(), &Strategy::ALL).unwrap();
        let b = RunConfig::resolve(
            FileConfig {
                seed: Some(1),
                ..Default::default()
            },
            &Strategy::ALL,
        )
        .unwrap();
        let hash = |c: &RunConfig| crate::report::config_hash(&c.to_value());
        assert_eq!(hash(&a), hash(&a.clone()));
        assert_ne!(hash(&a), hash(&b));
    }

    #[test]
    fn strategy_lists_split_on_commas() {
        let names = vec!["ring,usp".to_string(), "torus".to_string()];
        assert_eq!(
            parse_strategies(&names).unwrap(),
            vec![Strategy::Ring, Strategy::Usp, Strategy::Torus]
        );
        assert!(parse_strategies(&["nope".to_string()]).is_err());
    }
}
