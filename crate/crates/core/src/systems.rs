//! Named systems and their shared run configuration.

use crate::baselines::{
    self, BaselineError, CascadeConfig, CoarseConfig, ConfidenceAggregate, SpecializedConfig,
};
use crate::estimator::{self, EpEstimator, EstimatorError, TrainConfig};
use crate::executor::{execute_with, RunReport};
use crate::inference::{InferenceCache, Phase};
use crate::par::{self, ExecMode};
use crate::planner::{plan_with_cache, EpSet, PlanError, PlannerConfig, ReuseRule, SelectionMode};
use crate::query::Query;
use crate::trace::TraceStore;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SystemError {
    #[error(transparent)]
    Plan(#[from] PlanError),
    #[error(transparent)]
    Baseline(#[from] BaselineError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Config(#[from] ConfigError),
}

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("config key {key}: cannot parse {value:?} as {expected}")]
    Value {
        key: String,
        value: String,
        expected: &'static str,
    },
    #[error("line {line}: expected key=value, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown system {0:?}")]
    UnknownSystem(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum System {
    /// Fine-grained planning with exit point estimation.
    Thia,
    /// Fine-grained planning evaluating every exit point.
    ThiaEi,
    /// Fine-grained planning restricted to the oracle.
    ThiaSingle,
    /// Separate models of increasing depth with confidence escalation.
    Cascade,
    Naive,
    Coarse,
    Filter,
    Specialized,
    Optimal,
}

impl System {
    pub const ALL: [System; 9] = [
        System::Thia,
        System::ThiaEi,
        System::ThiaSingle,
        System::Cascade,
        System::Naive,
        System::Coarse,
        System::Filter,
        System::Specialized,
        System::Optimal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            System::Thia => "thia",
            System::ThiaEi => "thia_ei",
            System::ThiaSingle => "thia_single",
            System::Cascade => "cascade",
            System::Naive => "naive",
            System::Coarse => "coarse",
            System::Filter => "filter",
            System::Specialized => "specialized",
            System::Optimal => "optimal",
        }
    }
}

impl fmt::Display for System {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for System {
    type Err = ConfigError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        if norm == "thia_multi" {
            return Ok(System::Cascade);
        }
        System::ALL
            .into_iter()
            .find(|sys| sys.name() == norm)
            .ok_or_else(|| ConfigError::UnknownSystem(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimatorSettings {
    pub training_frames: usize,
    pub epochs: u32,
    pub learning_rate: f64,
    /// Hidden layer width; 0 disables the hidden layer.
    pub hidden: usize,
}

impl Default for EstimatorSettings {
    fn default() -> Self {
        EstimatorSettings {
            training_frames: estimator::DEFAULT_TRAINING_FRAMES,
            epochs: estimator::DEFAULT_EPOCHS,
            learning_rate: estimator::DEFAULT_LEARNING_RATE,
            hidden: 0,
        }
    }
}

/// Everything a run needs besides the trace and query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub planner: PlannerConfig,
    pub coarse: CoarseConfig,
    pub filter_threshold: f64,
    pub specialized: SpecializedConfig,
    pub cascade: CascadeConfig,
    pub optimal_allow_skip: bool,
    pub estimator: EstimatorSettings,
    pub det_confidence_min: f64,
    pub mode: ExecMode,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            planner: PlannerConfig::default(),
            coarse: CoarseConfig::default(),
            filter_threshold: 0.5,
            specialized: SpecializedConfig::default(),
            cascade: CascadeConfig::default(),
            optimal_allow_skip: true,
            estimator: EstimatorSettings::default(),
            det_confidence_min: crate::query::DEFAULT_CONFIDENCE_MIN,
            mode: ExecMode::default(),
            seed: 0,
        }
    }
}

fn parse_value<T: FromStr>(
    key: &str,
    value: &str,
    expected: &'static str,
) -> Result<T, ConfigError> {
    value.trim().parse().map_err(|_| ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        expected,
    })
}

fn parse_reuse(key: &str, value: &str) -> Result<ReuseRule, ConfigError> {
    let v = value.trim();
    let bad = || ConfigError::Value {
        key: key.to_string(),
        value: value.to_string(),
        expected: "off, stride/<n> or fixed:<n>",
    };
    if v == "off" {
        return Ok(ReuseRule::Off);
    }
    if let Some(n) = v.strip_prefix("stride/") {
        return n
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .map(ReuseRule::StrideFraction)
            .ok_or_else(bad);
    }
    if let Some(n) = v.strip_prefix("fixed:") {
        return n.parse().map(ReuseRule::Fixed).map_err(|_| bad());
    }
    Err(bad())
}

impl RunConfig {
    pub const KEYS: [&'static str; 26] = [
        "precision_min",
        "recall_min",
        "min_chunk",
        "max_final_rate",
        "posi_sufficient",
        "branching",
        "selection_mode",
        "reuse",
        "ep_set",
        "estimator_cost",
        "coarse.sample_frac",
        "coarse.share_cache",
        "filter.pass_threshold",
        "specialized.holdout_frac",
        "specialized.f1_floor",
        "cascade.confidence_threshold",
        "cascade.switch_cost",
        "cascade.aggregate",
        "optimal.allow_skip",
        "estimator.training_frames",
        "estimator.epochs",
        "estimator.learning_rate",
        "estimator.hidden",
        "det_confidence_min",
        "mode",
        "seed",
    ];

    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        let key = key.trim();
        let p = &mut self.planner;
        match key {
            "precision_min" => p.precision_min = parse_value(key, value, "a real")?,
            "recall_min" => p.recall_min = parse_value(key, value, "a real")?,
            "min_chunk" => p.min_chunk = parse_value(key, value, "an integer")?,
            "max_final_rate" => p.max_final_rate = parse_value(key, value, "a real")?,
            "posi_sufficient" => p.posi_sufficient = parse_value(key, value, "a real")?,
            "branching" => p.branching = parse_value(key, value, "an integer")?,
            "selection_mode" => {
                p.selection_mode = match value.trim() {
                    "evaluate" => SelectionMode::Evaluate,
                    "estimate" => SelectionMode::Estimate,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                            expected: "evaluate or estimate",
                        })
                    }
                }
            }
            "reuse" => p.reuse = parse_reuse(key, value)?,
            "ep_set" => {
                p.ep_set = match value.trim() {
                    "all" => EpSet::All,
                    "oracle_only" => EpSet::OracleOnly,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                            expected: "all or oracle_only",
                        })
                    }
                }
            }
            "estimator_cost" => p.estimator_cost = parse_value(key, value, "a real")?,
            "coarse.sample_frac" => self.coarse.sample_frac = parse_value(key, value, "a real")?,
            "coarse.share_cache" => {
                self.coarse.share_cache = parse_value(key, value, "true or false")?
            }
            "filter.pass_threshold" => self.filter_threshold = parse_value(key, value, "a real")?,
            "specialized.holdout_frac" => {
                self.specialized.holdout_frac = parse_value(key, value, "a real")?
            }
            "specialized.f1_floor" => {
                self.specialized.f1_floor = parse_value(key, value, "a real")?
            }
            "cascade.confidence_threshold" => {
                self.cascade.confidence_threshold = parse_value(key, value, "a real")?
            }
            "cascade.switch_cost" => self.cascade.switch_cost = parse_value(key, value, "a real")?,
            "cascade.aggregate" => {
                self.cascade.aggregate = match value.trim() {
                    "min" => ConfidenceAggregate::Min,
                    "mean" => ConfidenceAggregate::Mean,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                            expected: "min or mean",
                        })
                    }
                }
            }
            "optimal.allow_skip" => {
                self.optimal_allow_skip = parse_value(key, value, "true or false")?
            }
            "estimator.training_frames" => {
                self.estimator.training_frames = parse_value(key, value, "an integer")?
            }
            "estimator.epochs" => self.estimator.epochs = parse_value(key, value, "an integer")?,
            "estimator.learning_rate" => {
                self.estimator.learning_rate = parse_value(key, value, "a real")?
            }
            "estimator.hidden" => self.estimator.hidden = parse_value(key, value, "an integer")?,
            "det_confidence_min" => self.det_confidence_min = parse_value(key, value, "a real")?,
            "mode" => {
                self.mode = match value.trim() {
                    "parallel" => ExecMode::Parallel,
                    "sequential" => ExecMode::Sequential,
                    _ => {
                        return Err(ConfigError::Value {
                            key: key.into(),
                            value: value.into(),
                            expected: "parallel or sequential",
                        })
                    }
                }
            }
            "seed" => self.seed = parse_value(key, value, "an integer")?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Applies one `key=value` pair given as a single string.
    pub fn set_pair(&mut self, pair: &str) -> Result<(), ConfigError> {
        let (k, v) = pair.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: 1,
            text: pair.to_string(),
        })?;
        self.set(k, v)
    }

    /// Applies a config file of `key=value` lines; blank lines and lines
    /// starting with `#` are ignored.
    pub fn apply_lines(&mut self, text: &str) -> Result<(), ConfigError> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: line.to_string(),
            })?;
            self.set(k, v)?;
        }
        Ok(())
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.estimator.epochs,
            learning_rate: self.estimator.learning_rate,
            hidden: (self.estimator.hidden > 0).then_some(self.estimator.hidden),
            seed: self.seed,
        }
    }

    /// Planner settings as used by `system`.
    pub fn planner_for(&self, system: System) -> PlannerConfig {
        let mut p = self.planner.clone();
        match system {
            System::Thia => {
                p.selection_mode = SelectionMode::Estimate;
                p.ep_set = EpSet::All;
            }
            System::ThiaEi => {
                p.selection_mode = SelectionMode::Evaluate;
                p.ep_set = EpSet::All;
            }
            System::ThiaSingle => {
                p.selection_mode = SelectionMode::Evaluate;
                p.ep_set = EpSet::OracleOnly;
            }
            _ => {}
        }
        p
    }
}

/// Trains the per-query estimator. Labels come straight from the trace and
/// training is not charged to the query.
pub fn train_estimator(
    store: &TraceStore,
    query: &Query,
    config: &RunConfig,
) -> Result<EpEstimator, EstimatorError> {
    estimator::train_for_query(
        store,
        query,
        config.estimator.training_frames,
        &config.train_config(),
    )
}

/// Fine-grained planning then execution on one shared cache.
pub fn run_fine(
    name: &str,
    store: &TraceStore,
    query: &Query,
    planner: &PlannerConfig,
    est: Option<&EpEstimator>,
    mode: ExecMode,
) -> Result<RunReport, SystemError> {
    let mut cache = InferenceCache::new(store);
    let (plan, planning) = plan_with_cache(store, &mut cache, query, planner, est)?;
    let ex = execute_with(store, &mut cache, &plan, query, mode)?;
    let mut report = RunReport::assemble(
        name,
        store,
        query,
        cache.cost(Phase::Planning),
        ex.exec_cost,
        ex.result_frames,
        ex.ep_usage,
        cache.calls(),
    );
    report.chunk_costs = ex.chunk_costs;
    report.plan = Some(plan);
    report.extra.insert(
        "samples_evaluated".into(),
        planning.samples_evaluated as f64,
    );
    report.extra.insert(
        "recursion_depth_max".into(),
        planning.recursion_depth_max as f64,
    );
    report
        .extra
        .insert("max_realized_rate".into(), planning.max_realized_rate);
    report
        .extra
        .insert("planning_calls".into(), planning.inference_calls as f64);
    Ok(report)
}

pub fn run_system(
    store: &TraceStore,
    query: &Query,
    system: System,
    config: &RunConfig,
) -> Result<RunReport, SystemError> {
    let query = query.clone().with_confidence_min(config.det_confidence_min);
    let query = &query;
    let mode = config.mode;
    let mut report = match system {
        System::Thia => {
            let est = train_estimator(store, query, config)?;
            run_fine(
                system.name(),
                store,
                query,
                &config.planner_for(system),
                Some(&est),
                mode,
            )?
        }
        System::ThiaEi | System::ThiaSingle => run_fine(
            system.name(),
            store,
            query,
            &config.planner_for(system),
            None,
            mode,
        )?,
        System::Cascade => baselines::run_cascade(store, query, &config.cascade)?,
        System::Naive => baselines::run_naive(store, query, mode)?,
        System::Coarse => {
            baselines::run_coarse(store, query, &config.planner, &config.coarse, mode)?
        }
        System::Filter => baselines::run_filter(store, query, config.filter_threshold, mode)?,
        System::Specialized => baselines::run_specialized(store, query, &config.specialized, mode)?,
        System::Optimal => {
            baselines::optimal_plan(store, query, config.optimal_allow_skip, mode)?.1
        }
    };
    report.config = serde_json::to_value(config).ok();
    Ok(report)
}

/// Runs each system independently, in parallel when the mode allows it.
/// Reports come back in the order of `systems`.
pub fn compare(
    store: &TraceStore,
    query: &Query,
    systems: &[System],
    config: &RunConfig,
) -> Result<Vec<RunReport>, SystemError> {
    par::try_map(config.mode, systems, |&s| {
        run_system(store, query, s, config)
    })
}
