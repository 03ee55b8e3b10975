//! Run configuration: a TOML file with nested sections whose defaults
//! reproduce the standard protocol (120x60 grid on the 2:1 domain, C^3
//! smoothstep of half-width 0.05, order-3 quadrature, minimum segment
//! length 0.05, three-stage schedule with radius inflation 0.2/0.1/0.0 and
//! tolerances 1e-2/1e-3/1e-7, 100 iterations per stage). Unknown keys are
//! rejected.

use serde::{Deserialize, Serialize};

use crate::aggregation::AggregatorSpec;
use crate::grid::GridSpec;
use crate::objective::{ConstraintSet, ObjectiveKind};
use crate::pipeline::{HeuristicConfig, Proximity, RefinementConfig, StageConfig};
use crate::solver::{HessianMode, SolveOptions};
use crate::transition::{TransitionKind, TransitionSpec};
use crate::{Error, Result};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub grid: GridConfig,
    pub transition: TransitionConfig,
    pub aggregator: AggregatorConfig,
    pub constraints: ConstraintConfig,
    pub init: InitConfig,
    pub target: TargetConfig,
    pub stages: Vec<StageTomlConfig>,
    pub heuristics: HeuristicTomlConfig,
    pub refine: RefineTomlConfig,
    pub solver: SolverTomlConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            threads: 1,
            grid: GridConfig::default(),
            transition: TransitionConfig::default(),
            aggregator: AggregatorConfig::default(),
            constraints: ConstraintConfig::default(),
            init: InitConfig::default(),
            target: TargetConfig::default(),
            stages: Vec::new(),
            heuristics: HeuristicTomlConfig::default(),
            refine: RefineTomlConfig::default(),
            solver: SolverTomlConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub lx: f64,
    pub ly: f64,
    pub pad: f64,
    pub quad_order: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        GridConfig {
            nx: 120,
            ny: 60,
            x0: 0.0,
            y0: 0.0,
            lx: 2.0,
            ly: 1.0,
            pad: 0.0,
            quad_order: 3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransitionConfig {
    /// "smoothstep" | "tanh" | "asymmetric"
    pub kind: String,
    pub k: usize,
    pub beta: f64,
    pub ext: f64,
    pub delta: f64,
}

impl Default for TransitionConfig {
    fn default() -> Self {
        TransitionConfig {
            kind: "smoothstep".into(),
            k: 3,
            beta: 8.0,
            ext: 0.0,
            delta: 0.05,
        }
    }
}

impl TransitionConfig {
    pub fn build(&self) -> Result<TransitionSpec> {
        let kind = match self.kind.as_str() {
            "smoothstep" => TransitionKind::Smoothstep { k: self.k },
            "tanh" => TransitionKind::Tanh { beta: self.beta },
            "asymmetric" => TransitionKind::Asymmetric {
                k: self.k,
                ext: self.ext,
            },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown transition kind {other:?} (smoothstep|tanh|asymmetric)"
                )))
            }
        };
        TransitionSpec::new(kind, self.delta)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AggregatorConfig {
    /// "sum" | "pnorm" | "softmax" | "sum_softcap" | "cosine"
    pub kind: String,
    pub p: f64,
    pub beta: f64,
    pub tau: f64,
    pub beta_c: f64,
    pub n_cap: f64,
}

impl Default for AggregatorConfig {
    fn default() -> Self {
        AggregatorConfig {
            kind: "pnorm".into(),
            p: 7.0,
            beta: 14.0,
            tau: 1.1,
            beta_c: 18.0,
            n_cap: 2.0,
        }
    }
}

impl AggregatorConfig {
    pub fn build(&self) -> Result<AggregatorSpec> {
        let spec = match self.kind.as_str() {
            "sum" => AggregatorSpec::Sum,
            "pnorm" => AggregatorSpec::PNorm { p: self.p },
            "softmax" => AggregatorSpec::Softmax { beta: self.beta },
            "sum_softcap" => AggregatorSpec::SumSoftcap {
                tau: self.tau,
                beta_c: self.beta_c,
            },
            "cosine" => AggregatorSpec::Cosine { n: self.n_cap },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown aggregator kind {other:?} (sum|pnorm|softmax|sum_softcap|cosine)"
                )))
            }
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstraintConfig {
    pub r_min: f64,
    pub r_max: Option<f64>,
    pub l_min: f64,
    pub l_max: Option<f64>,
}

impl Default for ConstraintConfig {
    fn default() -> Self {
        ConstraintConfig {
            r_min: 0.005,
            r_max: Some(0.5),
            l_min: 0.05,
            l_max: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitMode {
    Cross,
    Randcross,
    Pills,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InitConfig {
    pub mode: InitMode,
    pub n: usize,
    pub rows: usize,
    pub cols: usize,
    pub r0: f64,
    /// Rotation range of the randomized variant, radians.
    pub theta_max: f64,
    /// Pill table path for `mode = "pills"`.
    pub pills: Option<String>,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            mode: InitMode::Cross,
            n: 8,
            rows: 2,
            cols: 2,
            r0: 0.05,
            theta_max: 0.0,
            pills: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    /// Field file (CSV or PGM, by extension unless `format` says).
    pub path: Option<String>,
    pub format: Option<String>,
    /// Pill table rasterized into a synthetic target.
    pub pills: Option<String>,
    /// Built-in synthetic target; currently "five_bar".
    pub builtin: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StageTomlConfig {
    /// "reward" | "tracking"
    pub objective: String,
    pub ext: f64,
    pub tol: f64,
    pub max_iter: usize,
    pub radius_frozen: Option<bool>,
    pub transition: Option<TransitionConfig>,
    pub aggregator: Option<AggregatorConfig>,
}

impl Default for StageTomlConfig {
    fn default() -> Self {
        StageTomlConfig {
            objective: "tracking".into(),
            ext: 0.0,
            tol: 1e-7,
            max_iter: 100,
            radius_frozen: None,
            transition: None,
            aggregator: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeuristicTomlConfig {
    pub ar_min: f64,
    pub ur_min: f64,
    pub theta_lim_deg: f64,
    pub d_min: f64,
    /// "center" | "segment"
    pub proximity: String,
}

impl Default for HeuristicTomlConfig {
    fn default() -> Self {
        HeuristicTomlConfig {
            ar_min: 0.15,
            ur_min: 1e-4,
            theta_lim_deg: 10.0,
            d_min: 0.15,
            proximity: "center".into(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RefineTomlConfig {
    pub tau_res: f64,
    pub r_seed: f64,
    pub fixed_r: Option<f64>,
    pub k_max: usize,
    pub eps_abs: f64,
    pub eps_rel: f64,
}

impl Default for RefineTomlConfig {
    fn default() -> Self {
        RefineTomlConfig {
            tau_res: 0.2,
            r_seed: 0.05,
            fixed_r: None,
            k_max: 5,
            eps_abs: 0.0,
            eps_rel: 1e-3,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverTomlConfig {
    /// "exact" | "lbfgs"
    pub hessian: String,
    pub history: usize,
    pub barrier_mu0: f64,
    pub ls_max_backtracks: usize,
}

impl Default for SolverTomlConfig {
    fn default() -> Self {
        SolverTomlConfig {
            hessian: "exact".into(),
            history: 3,
            barrier_mu0: 1e-2,
            ls_max_backtracks: 30,
        }
    }
}

impl RunConfig {
    /// Parses a TOML string; unknown keys anywhere are rejected.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)
            .map_err(|e| Error::InvalidConfig(format!("config parse failure: {e}")))?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Validates the configuration and returns non-fatal warnings.
    pub fn validate(&self) -> Result<Vec<String>> {
        let mut warnings = Vec::new();
        self.grid_spec()?.validate()?;
        let tspec = self.transition.build()?;
        self.aggregator.build()?;
        let cons = self.constraint_set()?;
        cons.validate()?;
        self.stage_configs()?;
        self.heuristic_config()?;
        self.refinement_config()?;
        self.solve_options()?;
        if cons.r_min < tspec.delta() {
            warnings.push(format!(
                "r_min = {} allows radii below the transition half-width {}; oversized \
                 symmetric transitions cannot reach full density on the medial axis",
                cons.r_min,
                tspec.delta()
            ));
        }
        Ok(warnings)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        let g = &self.grid;
        let mut spec = GridSpec::new(g.nx, g.ny, g.x0, g.y0, g.lx, g.ly)?;
        spec.pad = g.pad;
        spec.quad_order = g.quad_order;
        spec.validate()?;
        Ok(spec)
    }

    pub fn constraint_set(&self) -> Result<ConstraintSet> {
        let g = &self.grid;
        let c = &self.constraints;
        let set = ConstraintSet {
            x_min: g.x0,
            x_max: g.x0 + g.lx,
            y_min: g.y0,
            y_max: g.y0 + g.ly,
            r_min: c.r_min,
            r_max: c.r_max,
            l_min: c.l_min,
            l_max: c.l_max,
        };
        set.validate()?;
        Ok(set)
    }

    /// The stage list; an empty `[[stages]]` section resolves to the
    /// default three-stage schedule under the top-level field model.
    pub fn stage_configs(&self) -> Result<Vec<StageConfig>> {
        let tspec = self.transition.build()?;
        let aspec = self.aggregator.build()?;
        if self.stages.is_empty() {
            return Ok(crate::pipeline::default_stages(&tspec, &aspec));
        }
        let mut out = Vec::with_capacity(self.stages.len());
        for s in &self.stages {
            let objective = match s.objective.as_str() {
                "reward" => ObjectiveKind::Reward,
                "tracking" => ObjectiveKind::Tracking,
                other => {
                    return Err(Error::InvalidConfig(format!(
                        "unknown stage objective {other:?} (reward|tracking)"
                    )))
                }
            };
            let tspec = match &s.transition {
                Some(t) => t.build()?,
                None => tspec.clone(),
            };
            let aspec = match &s.aggregator {
                Some(a) => a.build()?,
                None => aspec,
            };
            out.push(StageConfig {
                objective,
                ext: s.ext,
                tol: s.tol,
                max_iter: s.max_iter,
                radius_frozen: s
                    .radius_frozen
                    .unwrap_or(objective == ObjectiveKind::Reward),
                tspec,
                aspec,
            });
        }
        Ok(out)
    }

    pub fn heuristic_config(&self) -> Result<HeuristicConfig> {
        let h = &self.heuristics;
        let proximity = match h.proximity.as_str() {
            "center" => Proximity::CenterDistance,
            "segment" => Proximity::SegmentDistance,
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown proximity {other:?} (center|segment)"
                )))
            }
        };
        if h.ar_min < 0.0 || h.ur_min < 0.0 || h.theta_lim_deg < 0.0 || h.d_min < 0.0 {
            return Err(Error::InvalidConfig("heuristic thresholds must be >= 0".into()));
        }
        Ok(HeuristicConfig {
            ar_min: h.ar_min,
            ur_min: h.ur_min,
            theta_lim_deg: h.theta_lim_deg,
            d_min: h.d_min,
            proximity,
        })
    }

    pub fn refinement_config(&self) -> Result<RefinementConfig> {
        let r = &self.refine;
        if r.k_max == 0 {
            return Err(Error::InvalidConfig("refine.k_max must be >= 1".into()));
        }
        if !(r.tau_res > 0.0 && r.tau_res < 1.0) {
            return Err(Error::InvalidConfig("refine.tau_res must lie in (0, 1)".into()));
        }
        Ok(RefinementConfig {
            tau_res: r.tau_res,
            r_seed: r.r_seed,
            fixed_r: r.fixed_r,
            k_max: r.k_max,
            eps_abs: r.eps_abs,
            eps_rel: r.eps_rel,
        })
    }

    pub fn solve_options(&self) -> Result<SolveOptions> {
        let s = &self.solver;
        let hessian_mode = match s.hessian.as_str() {
            "exact" => HessianMode::Exact,
            "lbfgs" => HessianMode::Lbfgs { history: s.history },
            other => {
                return Err(Error::InvalidConfig(format!(
                    "unknown hessian mode {other:?} (exact|lbfgs)"
                )))
            }
        };
        let opts = SolveOptions {
            tol: 1e-7,
            max_iter: 100,
            hessian_mode,
            barrier_mu0: s.barrier_mu0,
            ls_max_backtracks: s.ls_max_backtracks,
            rng_seed: self.seed,
        };
        opts.validate()?;
        Ok(opts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml();
        let back = RunConfig::from_toml(&text).unwrap();
        assert_eq!(back.grid.nx, 120);
        assert_eq!(back.grid.ny, 60);
        assert_eq!(back.transition.k, 3);
        assert_eq!(back.constraints.l_min, 0.05);
        let stages = back.stage_configs().unwrap();
        assert_eq!(stages.len(), 3);
        assert_eq!(stages[0].ext, 0.2);
        assert_eq!(stages[1].ext, 0.1);
        assert_eq!(stages[2].ext, 0.0);
        assert!(stages[0].radius_frozen);
        assert!(back.validate().is_ok());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(RunConfig::from_toml("definitely_not_a_key = 1").is_err());
        assert!(RunConfig::from_toml("[grid]\nnx = 4\nbogus = 2").is_err());
    }

    #[test]
    fn oversized_transition_warning() {
        let mut cfg = RunConfig::default();
        cfg.constraints.r_min = 0.01;
        cfg.transition.delta = 0.05;
        let warnings = cfg.validate().unwrap();
        assert_eq!(warnings.len(), 1);
        cfg.constraints.r_min = 0.05;
        assert!(cfg.validate().unwrap().is_empty());
    }

    #[test]
    fn stage_overrides() {
        let text = r#"
            [[stages]]
            objective = "reward"
            ext = 0.3
            tol = 1e-2
            max_iter = 50

            [[stages]]
            objective = "tracking"
            ext = 0.0
            tol = 1e-6
            max_iter = 80
            aggregator = { kind = "softmax", beta = 10.0 }
        "#;
        let cfg = RunConfig::from_toml(text).unwrap();
        let stages = cfg.stage_configs().unwrap();
        assert_eq!(stages.len(), 2);
        assert!(stages[0].radius_frozen);
        assert!(!stages[1].radius_frozen);
        assert!(matches!(
            stages[1].aspec,
            AggregatorSpec::Softmax { beta } if beta == 10.0
        ));
    }
}
