//! Job specifications, the flow registry and schema validation.

use std::fmt;
use std::path::PathBuf;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

use crate::calibration::{FailureInjection, Recipe, RecipeRegistry};
use crate::http::EndpointConfig;
use crate::model::{LoadPattern, RuntimeConfig, ValidationError};
use crate::sim::SimProfile;
use crate::slo::SloSpec;
use crate::sweep::SweepConfig;
use crate::tuner::{SearchSpace, TunerConfig};

/// Pipeline stages a flow may include, in execution order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    Compression,
    Evaluation,
    Benchmark,
    Tuning,
}

#[derive(Debug)]
pub struct FlowDescriptor {
    pub name: &'static str,
    pub required_params: &'static [&'static str],
    pub stages: &'static [StageKind],
}

impl FlowDescriptor {
    pub fn has(&self, stage: StageKind) -> bool {
        self.stages.contains(&stage)
    }
}

pub const FLOWS: &[FlowDescriptor] = &[
    FlowDescriptor {
        name: "quantization",
        required_params: &["quantization_recipe", "num_trials"],
        stages: &[StageKind::Compression, StageKind::Evaluation],
    },
    FlowDescriptor {
        name: "quantize_tune",
        required_params: &["quantization_recipe", "num_trials", "load_pattern"],
        stages: &[StageKind::Compression, StageKind::Evaluation, StageKind::Benchmark, StageKind::Tuning],
    },
    FlowDescriptor {
        name: "benchmark",
        required_params: &["load_pattern"],
        stages: &[StageKind::Benchmark],
    },
];

pub fn lookup_flow(name: &str) -> Option<&'static FlowDescriptor> {
    FLOWS.iter().find(|f| f.name == name)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRef {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version: Option<String>,
    /// Local directory holding the weights; when absent the model is a
    /// reference only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
}

impl ModelRef {
    pub fn reference(&self) -> String {
        match &self.version {
            Some(v) => format!("{}/{v}", self.name),
            None => self.name.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Sim(SimProfile),
    Http(EndpointConfig),
}

impl Default for BackendSpec {
    fn default() -> Self {
        BackendSpec::Sim(SimProfile::default())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Resources {
    /// Abstract compute slots standing in for GPUs.
    pub slots: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FlowParams {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub quantization_recipe: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_trials: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_retry_budget")]
    pub retry_budget: u32,
    /// Also sweep the uncompressed model in the benchmark stage.
    #[serde(default)]
    pub include_baseline: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub load_pattern: Option<LoadPattern>,
    #[serde(default)]
    pub slos: SloSpec,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub tuner: TunerConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub search_space: Option<SearchSpace>,
    /// Configuration for the benchmark stage; defaults from the load pattern.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime: Option<RuntimeConfig>,
    #[serde(default)]
    pub mock_failures: FailureInjection,
}

fn default_retry_budget() -> u32 {
    2
}

impl Default for FlowParams {
    fn default() -> Self {
        serde_json::from_value(Value::Object(Map::new())).expect("all flow params have defaults")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobSpec {
    pub name: String,
    pub flow: String,
    pub model: ModelRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub corpus: Option<PathBuf>,
    pub flow_params: FlowParams,
    pub resources: Resources,
    /// Extra recipes on top of the built-ins.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub recipes: Vec<Recipe>,
    #[serde(default)]
    pub backend: BackendSpec,
}

impl JobSpec {
    pub fn descriptor(&self) -> &'static FlowDescriptor {
        lookup_flow(&self.flow).expect("validated specs name a registered flow")
    }

    pub fn recipe_registry(&self) -> RecipeRegistry {
        let mut registry = RecipeRegistry::default();
        for r in &self.recipes {
            // validated before submission
            let _ = registry.register(r.clone());
        }
        registry
    }

    pub fn pattern(&self) -> LoadPattern {
        self.flow_params.load_pattern.clone().unwrap_or_else(|| LoadPattern::new(512, 128))
    }

    pub fn benchmark_config(&self) -> RuntimeConfig {
        self.flow_params.runtime.unwrap_or_else(|| RuntimeConfig::default_for(&self.pattern()))
    }

    pub fn search_space(&self) -> SearchSpace {
        self.flow_params
            .search_space
            .clone()
            .unwrap_or_else(|| SearchSpace::for_pattern(&self.pattern(), self.resources.slots as u32))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

#[derive(Debug, Error)]
pub enum SpecError {
    #[error("unknown flow {0:?}")]
    UnknownFlow(String),
    #[error("job spec violates the schema:\n{}", list(.0))]
    SchemaViolation(Vec<Violation>),
    #[error("job spec is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("reading job spec: {0}")]
    Io(#[from] std::io::Error),
}

fn list(v: &[Violation]) -> String {
    v.iter().map(|x| format!("  {x}")).collect::<Vec<_>>().join("\n")
}

struct Checker {
    violations: Vec<Violation>,
}

impl Checker {
    fn push(&mut self, field: impl Into<String>, reason: impl Into<String>) {
        self.violations.push(Violation { field: field.into(), reason: reason.into() });
    }

    fn invalid(&mut self, prefix: &str, e: ValidationError) {
        self.push(format!("{prefix}.{}", e.field), e.reason);
    }

    /// Deserialises `obj[key]` if present, recording a violation on failure.
    fn field<T: DeserializeOwned>(&mut self, obj: &Map<String, Value>, key: &str, path: &str) -> Option<T> {
        let v = obj.get(key)?;
        match serde_json::from_value(v.clone()) {
            Ok(x) => Some(x),
            Err(e) => {
                self.push(path, e.to_string());
                None
            }
        }
    }

    fn required<T: DeserializeOwned>(&mut self, obj: &Map<String, Value>, key: &str) -> Option<T> {
        if !obj.contains_key(key) {
            self.push(key, "required");
            return None;
        }
        self.field(obj, key, key)
    }
}

const PARAM_KEYS: &[&str] = &[
    "quantization_recipe",
    "num_trials",
    "seed",
    "retry_budget",
    "include_baseline",
    "load_pattern",
    "slos",
    "sweep",
    "tuner",
    "search_space",
    "runtime",
    "mock_failures",
];

fn parse_params(c: &mut Checker, obj: &Map<String, Value>) -> FlowParams {
    let mut p = FlowParams::default();
    for key in obj.keys().filter(|k| !PARAM_KEYS.contains(&k.as_str())) {
        c.push(format!("flow_params.{key}"), "unknown parameter");
    }
    macro_rules! take {
        ($key:ident) => {
            take!($key, |v| v)
        };
        ($key:ident, $wrap:expr) => {
            if let Some(v) = c.field(obj, stringify!($key), concat!("flow_params.", stringify!($key))) {
                p.$key = $wrap(v);
            }
        };
    }
    take!(quantization_recipe, Some);
    take!(num_trials, Some);
    take!(seed);
    take!(retry_budget);
    take!(include_baseline);
    take!(load_pattern, Some);
    take!(slos);
    take!(sweep);
    take!(tuner);
    take!(search_space, Some);
    take!(runtime, Some);
    take!(mock_failures);
    p
}

/// Checks `value` against the job schema and returns the typed spec, or
/// every violation found.
pub fn validate_spec(value: &Value) -> Result<JobSpec, SpecError> {
    let mut c = Checker { violations: Vec::new() };
    let Some(obj) = value.as_object() else {
        return Err(SpecError::SchemaViolation(vec![Violation { field: "$".into(), reason: "must be an object".into() }]));
    };

    let flow_name: Option<String> = c.required(obj, "flow");
    let descriptor = match &flow_name {
        Some(name) => Some(lookup_flow(name).ok_or_else(|| SpecError::UnknownFlow(name.clone()))?),
        None => None,
    };

    let name: Option<String> = c.required(obj, "name");
    if name.as_deref().is_some_and(|n| n.trim().is_empty()) {
        c.push("name", "must not be empty");
    }
    let model: Option<ModelRef> = c.required(obj, "model");
    let resources: Option<Resources> = c.required(obj, "resources");
    if resources.is_some_and(|r| r.slots == 0) {
        c.push("resources.slots", "must be at least 1");
    }
    let corpus: Option<PathBuf> = c.field(obj, "corpus", "corpus");
    let recipes: Vec<Recipe> = c.field(obj, "recipes", "recipes").unwrap_or_default();
    let backend: BackendSpec = c.field(obj, "backend", "backend").unwrap_or_default();
    for key in obj.keys() {
        if !["name", "flow", "model", "corpus", "flow_params", "resources", "recipes", "backend"].contains(&key.as_str()) {
            c.push(key.clone(), "unknown field");
        }
    }

    let params = match obj.get("flow_params") {
        Some(Value::Object(p)) => {
            if let Some(d) = descriptor {
                for key in d.required_params.iter().filter(|k| !p.contains_key(**k)) {
                    c.push(format!("flow_params.{key}"), format!("required by flow {:?}", d.name));
                }
            }
            parse_params(&mut c, p)
        }
        Some(_) => {
            c.push("flow_params", "must be an object");
            FlowParams::default()
        }
        None => {
            c.push("flow_params", "required");
            FlowParams::default()
        }
    };

    let mut registry = RecipeRegistry::default();
    for (i, r) in recipes.iter().enumerate() {
        if let Err(e) = registry.register(r.clone()) {
            c.push(format!("recipes[{i}]"), e.to_string());
        }
    }
    if let Some(recipe) = &params.quantization_recipe {
        if registry.get(recipe).is_err() {
            c.push("flow_params.quantization_recipe", format!("unknown recipe {recipe:?}"));
        }
    }
    if params.num_trials == Some(0) {
        c.push("flow_params.num_trials", "must be at least 1");
    }
    let pattern = params.load_pattern.clone().unwrap_or_else(|| LoadPattern::new(512, 128));
    if let Err(e) = pattern.validate() {
        c.invalid("flow_params.load_pattern", e);
    }
    if let Err(e) = params.slos.validate() {
        c.invalid("flow_params.slos", e);
    }
    if let Err(e) = params.sweep.validate() {
        c.invalid("flow_params.sweep", e);
    }
    if let Err(e) = params.tuner.validate() {
        c.invalid("flow_params.tuner", e);
    }
    let slots = resources.map_or(1, |r| r.slots.max(1));
    if let Some(space) = &params.search_space {
        if let Err(e) = space.validate(&pattern, Some(slots as u32)) {
            c.invalid("flow_params.search_space", e);
        }
    }
    if let Some(rc) = &params.runtime {
        if let Err(e) = rc.validate(&pattern) {
            c.invalid("flow_params.runtime", e);
        } else if rc.gpus() as usize > slots {
            c.push("flow_params.runtime", format!("needs {} slots, budget is {slots}", rc.gpus()));
        }
    }
    match &backend {
        BackendSpec::Http(endpoint) => {
            if let Err(e) = endpoint.validate() {
                c.invalid("backend", e);
            }
            if descriptor.is_some_and(|d| d.has(StageKind::Tuning) || d.has(StageKind::Compression)) {
                c.push("backend", "compression and tuning flows need a simulated backend");
            }
        }
        BackendSpec::Sim(profile) => {
            if let Err(e) = profile.model(RuntimeConfig::default_for(&pattern)).validate() {
                c.invalid("backend", e);
            }
        }
    }

    if !c.violations.is_empty() {
        return Err(SpecError::SchemaViolation(c.violations));
    }
    Ok(JobSpec {
        name: name.expect("checked"),
        flow: flow_name.expect("checked"),
        model: model.expect("checked"),
        corpus,
        flow_params: params,
        resources: resources.expect("checked"),
        recipes,
        backend,
    })
}

pub fn parse_spec(text: &str) -> Result<JobSpec, SpecError> {
    validate_spec(&serde_json::from_str(text)?)
}

pub fn load_spec(path: &std::path::Path) -> Result<JobSpec, SpecError> {
    parse_spec(&std::fs::read_to_string(path)?)
}
