//! Experiment configuration: one JSON document per run. Unknown fields are
//! rejected everywhere, and every check reports the dotted path of the
//! offending field.

use ntk_lab_core::network::Activation;
use ntk_lab_core::trainer::FlowConfig;
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Kind {
    Simulate,
    TheoryCompare,
    Sweep,
    GenCurves,
    AlignDemo,
    ModelKernel,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: Kind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<DatasetSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub network: Option<NetworkSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowConfig>,
    #[serde(default)]
    pub grid: Grid,
    #[serde(default)]
    pub probe: ProbeSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub learning_curves: Option<LearningCurveSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model_kernel: Option<ModelKernelConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
    /// CSV with header `x1..xD,y1..yC`, one sample per row. Relative paths
    /// resolve against the config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv: Option<String>,
    /// Whitening exponent: singular values `S → S^γ`. 1 leaves the data as is;
    /// below 1 the result is rescaled to unit mean correlation spectrum.
    #[serde(default = "one")]
    pub gamma: f64,
    /// Held-out rows taken from the end of a CSV dataset.
    #[serde(default)]
    pub test_fraction: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub dim: usize,
    pub samples: usize,
    #[serde(default)]
    pub test_samples: usize,
    /// Ratio of largest to smallest covariance eigenvalue (geometric spectrum
    /// with mean one). 1 is isotropic.
    #[serde(default = "one")]
    pub condition: f64,
    /// Singular values of the linear teacher, one per output class.
    #[serde(default = "unit_teacher")]
    pub teacher: Vec<f64>,
    /// Apply the teacher before (`raw`) or after (`transformed`) whitening.
    #[serde(default)]
    pub teacher_on: TeacherOn,
    /// Nonlinearity applied to each teacher output, which is then centred on
    /// its training mean. Linear keeps the teacher a plain matrix.
    #[serde(default = "linear")]
    pub teacher_activation: Activation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TeacherOn {
    Raw,
    #[default]
    Transformed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    /// Hidden widths. A `grid.depth` entry `L` repeats `hidden[0]` `L − 1` times.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub sigma: f64,
    /// Initialization seed; defaults to the run seed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Grid axes expanded by the runner. An empty axis keeps the base value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grid {
    #[serde(default)]
    pub sigma: Vec<f64>,
    #[serde(default)]
    pub depth: Vec<usize>,
    #[serde(default)]
    pub gamma: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    /// Keep nets, kernel snapshots and the test set so `compare` can run.
    #[serde(default)]
    pub save_artifacts: bool,
    /// Record the first-layer alignment with the teacher.
    #[serde(default = "yes")]
    pub first_layer_alignment: bool,
}

impl Default for ProbeSpec {
    fn default() -> Self {
        Self {
            save_artifacts: false,
            first_layer_alignment: true,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Measure {
    /// Laziness ratio at initialization across the σ and depth grid.
    Laziness,
    /// Distance of the converged end-to-end map from the min-norm solution.
    MinNorm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub measure: Measure,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearningCurveSpec {
    pub a: Vec<f64>,
    pub alpha: Vec<f64>,
    pub p: Vec<usize>,
    pub dim: usize,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_trials")]
    pub trials: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelKernelConfig {
    pub epsilon: Vec<f64>,
    pub tau: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Knots of the random early-kernel path.
    #[serde(default = "default_knots")]
    pub knots: usize,
    #[serde(default = "one")]
    pub growth_rate: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
}

fn linear() -> Activation {
    Activation::Linear
}
fn one() -> f64 {
    1.0
}
fn yes() -> bool {
    true
}
fn unit_teacher() -> Vec<f64> {
    vec![1.0]
}
fn default_lambda() -> f64 {
    1e-6
}
fn default_trials() -> usize {
    500
}
fn default_knots() -> usize {
    4
}
fn default_steps() -> usize {
    200
}

/// Parse with field-path reporting, then run the semantic checks.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::schema(if path == "." { String::new() } else { path }, e.inner().to_string())
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn need<'a, T>(v: &'a Option<T>, path: &str, kind: Kind) -> Result<&'a T, CliError> {
    v.as_ref()
        .ok_or_else(|| CliError::schema(path, format!("required for kind {}", kind_name(kind))))
}

pub fn kind_name(kind: Kind) -> &'static str {
    match kind {
        Kind::Simulate => "simulate",
        Kind::TheoryCompare => "theory-compare",
        Kind::Sweep => "sweep",
        Kind::GenCurves => "gen-curves",
        Kind::AlignDemo => "align-demo",
        Kind::ModelKernel => "model-kernel",
    }
}

fn check(ok: bool, path: &str, msg: &str) -> Result<(), CliError> {
    if ok {
        Ok(())
    } else {
        Err(CliError::schema(path, msg))
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        match self.kind {
            Kind::Simulate | Kind::TheoryCompare | Kind::AlignDemo | Kind::Sweep => {
                self.validate_dataset(need(&self.dataset, "dataset", self.kind)?)?;
                self.validate_network(need(&self.network, "network", self.kind)?)?;
                if self.kind != Kind::Sweep || self.sweep.as_ref().map(|s| s.measure) == Some(Measure::MinNorm) {
                    let flow = need(&self.flow, "flow", self.kind)?;
                    flow.validate().map_err(|e| CliError::schema("flow", e.to_string()))?;
                }
                self.validate_grid()?;
            }
            Kind::GenCurves | Kind::ModelKernel => {}
        }
        match self.kind {
            Kind::Sweep => {
                need(&self.sweep, "sweep", self.kind)?;
            }
            Kind::TheoryCompare => {
                let net = self.network.as_ref().expect("checked above");
                check(net.activation == Activation::Linear, "network.activation", "theory-compare needs a linear network")?;
                let ds = self.dataset.as_ref().expect("checked above");
                let syn = ds.synthetic.as_ref();
                check(syn.is_some(), "dataset.synthetic", "theory-compare needs a synthetic teacher")?;
                let syn = syn.unwrap();
                check(
                    syn.teacher_on == TeacherOn::Transformed,
                    "dataset.synthetic.teacher_on",
                    "theory-compare needs the teacher on the transformed inputs",
                )?;
                check(
                    syn.teacher_activation == Activation::Linear,
                    "dataset.synthetic.teacher_activation",
                    "theory-compare needs a linear teacher",
                )?;
            }
            Kind::AlignDemo => {
                check(
                    self.grid.sigma.is_empty() && self.grid.depth.is_empty() && self.grid.gamma.is_empty(),
                    "grid",
                    "align-demo runs a single cell",
                )?;
            }
            Kind::GenCurves => {
                let lc = need(&self.learning_curves, "learning_curves", self.kind)?;
                check(!lc.a.is_empty() && !lc.alpha.is_empty() && !lc.p.is_empty(), "learning_curves", "grid axes must be non-empty")?;
                check(lc.a.iter().all(|&a| a >= 0.0), "learning_curves.a", "spike strengths must be non-negative")?;
                check(lc.alpha.iter().all(|a| a.abs() <= 1.0), "learning_curves.alpha", "|alpha| must be at most 1")?;
                check(lc.dim >= 2, "learning_curves.dim", "dimension must be at least 2")?;
                check(lc.lambda >= 0.0, "learning_curves.lambda", "ridge must be non-negative")?;
            }
            Kind::ModelKernel => {
                let mk = need(&self.model_kernel, "model_kernel", self.kind)?;
                check(!mk.epsilon.is_empty() && mk.epsilon.iter().all(|&e| e > 0.0), "model_kernel.epsilon", "need positive epsilons")?;
                check(mk.tau > 0.0, "model_kernel.tau", "tau must be positive")?;
                check(mk.n_train > 0 && mk.n_test > 0, "model_kernel.n_train", "sizes must be positive")?;
                check(mk.knots > 0, "model_kernel.knots", "need at least one knot")?;
                check(mk.growth_rate > 0.0, "model_kernel.growth_rate", "growth rate must be positive")?;
                check(mk.steps > 0, "model_kernel.steps", "steps must be positive")?;
            }
            Kind::Simulate => {}
        }
        Ok(())
    }

    fn validate_dataset(&self, ds: &DatasetSpec) -> Result<(), CliError> {
        check(
            ds.synthetic.is_some() != ds.csv.is_some(),
            "dataset",
            "exactly one of dataset.synthetic and dataset.csv is required",
        )?;
        check((0.0..=1.0).contains(&ds.gamma), "dataset.gamma", "gamma must lie in [0, 1]")?;
        check((0.0..1.0).contains(&ds.test_fraction), "dataset.test_fraction", "test_fraction must lie in [0, 1)")?;
        if let Some(s) = &ds.synthetic {
            check(s.dim > 0, "dataset.synthetic.dim", "dimension must be positive")?;
            check(s.samples > 0, "dataset.synthetic.samples", "need at least one sample")?;
            check(s.condition >= 1.0, "dataset.synthetic.condition", "condition number must be at least 1")?;
            check(!s.teacher.is_empty(), "dataset.synthetic.teacher", "need at least one teacher singular value")?;
            check(s.teacher.len() <= s.dim, "dataset.synthetic.teacher", "more teacher modes than input dimensions")?;
        }
        Ok(())
    }

    fn validate_network(&self, net: &NetworkSpec) -> Result<(), CliError> {
        check(!net.hidden.is_empty(), "network.hidden", "need at least one hidden layer")?;
        check(net.hidden.iter().all(|&w| w > 0), "network.hidden", "widths must be positive")?;
        check(net.sigma > 0.0 && net.sigma.is_finite(), "network.sigma", "sigma must be positive")?;
        Ok(())
    }

    fn validate_grid(&self) -> Result<(), CliError> {
        check(self.grid.sigma.iter().all(|&s| s > 0.0 && s.is_finite()), "grid.sigma", "sigma values must be positive")?;
        check(self.grid.depth.iter().all(|&d| d >= 2), "grid.depth", "depth must be at least 2")?;
        check(self.grid.gamma.iter().all(|g| (0.0..=1.0).contains(g)), "grid.gamma", "gamma values must lie in [0, 1]")?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::Value;

    fn schema_properties<'a>(schema: &'a Value, node: &'a Value) -> &'a serde_json::Map<String, Value> {
        let node = match node.get("$ref").and_then(Value::as_str) {
            Some(r) => &schema["definitions"][r.trim_start_matches("#/definitions/")],
            None => node,
        };
        node["properties"].as_object().expect("object schema")
    }

    fn assert_keys_match(schema: &Value, node: &Value, value: &Value, at: &str) {
        let props = schema_properties(schema, node);
        let obj = value.as_object().unwrap();
        let mut have: Vec<_> = obj.keys().cloned().collect();
        let mut want: Vec<_> = props.keys().cloned().collect();
        have.sort();
        want.sort();
        assert_eq!(have, want, "keys at {at}");
        for (k, v) in obj {
            if v.is_object() {
                assert_keys_match(schema, &props[k], v, &format!("{at}.{k}"));
            }
        }
    }

    #[test]
    fn schema_lists_exactly_the_config_fields() {
        let schema: Value = serde_json::from_str(crate::SCHEMA).unwrap();
        let full = ExperimentConfig {
            kind: Kind::Simulate,
            seed: 1,
            output_dir: Some("out".into()),
            dataset: Some(DatasetSpec {
                synthetic: Some(SyntheticSpec {
                    dim: 2,
                    samples: 3,
                    test_samples: 1,
                    condition: 1.0,
                    teacher: vec![1.0],
                    teacher_on: TeacherOn::Raw,
                    teacher_activation: Activation::Relu,
                }),
                csv: Some("x.csv".into()),
                gamma: 1.0,
                test_fraction: 0.0,
            }),
            network: Some(NetworkSpec {
                hidden: vec![4],
                activation: Activation::Relu,
                sigma: 0.1,
                seed: Some(2),
            }),
            flow: Some(FlowConfig::new(1.0, 0.1, 1.0, ntk_lab_core::trainer::Integrator::Rk4)),
            grid: Grid::default(),
            probe: ProbeSpec::default(),
            sweep: Some(SweepSpec { measure: Measure::Laziness }),
            learning_curves: Some(LearningCurveSpec {
                a: vec![1.0],
                alpha: vec![0.0],
                p: vec![1],
                dim: 2,
                lambda: 1e-6,
                trials: 1,
            }),
            model_kernel: Some(ModelKernelConfig {
                epsilon: vec![0.1],
                tau: 1.0,
                n_train: 2,
                n_test: 2,
                knots: 4,
                growth_rate: 1.0,
                steps: 10,
            }),
        };
        let value = serde_json::to_value(&full).unwrap();
        assert_keys_match(&schema, &schema, &value, "config");
    }

    #[test]
    fn unknown_field_names_its_path() {
        let text = r#"{"kind":"simulate","flow":{"eta":1,"dt":0.1,"max_time":1,"integrator":"rk4","bogus":1}}"#;
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert_eq!(err.path(), Some("flow.bogus"));
        assert!(err.to_string().contains("bogus"));
    }

    #[test]
    fn wrong_type_names_nested_path() {
        let text = r#"{"kind":"simulate","network":{"hidden":[4],"activation":"linear","sigma":"big"}}"#;
        let err = parse_config(text).unwrap_err();
        assert_eq!(err.path(), Some("network.sigma"));
    }

    #[test]
    fn missing_section_is_reported() {
        let err = parse_config(r#"{"kind":"gen-curves"}"#).unwrap_err();
        assert_eq!(err.path(), Some("learning_curves"));
        let err = parse_config(r#"{"kind":"model-kernel","model_kernel":{"epsilon":[],"tau":1,"n_train":3,"n_test":2}}"#).unwrap_err();
        assert_eq!(err.path(), Some("model_kernel.epsilon"));
    }

    #[test]
    fn semantic_range_check() {
        let text = r#"{"kind":"simulate",
            "dataset":{"synthetic":{"dim":3,"samples":5},"gamma":2},
            "network":{"hidden":[4],"activation":"linear","sigma":0.1},
            "flow":{"eta":1,"dt":0.1,"max_time":1,"integrator":"rk4"}}"#;
        assert_eq!(parse_config(text).unwrap_err().path(), Some("dataset.gamma"));
    }
}
