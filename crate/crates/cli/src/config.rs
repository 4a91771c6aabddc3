use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use signgru::dataio::{Normalization, SynthSpec};
use signgru::graphnet::SkeletonTopology;
use signgru::model::ModelConfig;
use signgru::training::{AdamWConfig, LrSchedule, TrainPlan};

use crate::CliError;

/// Everything a run needs, read from a TOML file and then patched by
/// `--set key=value` flags.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds synthesis, splitting, initialization, shuffling and dropout.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub optim: AdamWConfig,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub data: DataSection,
    #[serde(default)]
    pub synth: SynthSection,
    #[serde(default)]
    pub output: OutputSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig {
                stages: 16,
                ..ModelConfig::default()
            },
            optim: AdamWConfig::default(),
            train: TrainSection::default(),
            data: DataSection::default(),
            synth: SynthSection::default(),
            output: OutputSection::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub schedule: LrSchedule,
    pub patience: Option<usize>,
    /// Checkpoint to continue from instead of a fresh initialization.
    pub resume: Option<PathBuf>,
}

impl Default for TrainSection {
    fn default() -> Self {
        let plan = TrainPlan::default();
        TrainSection {
            epochs: plan.epochs,
            batch_size: plan.batch_size,
            schedule: plan.schedule,
            patience: plan.patience,
            resume: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train_path: PathBuf,
    pub val_path: PathBuf,
    pub test_path: PathBuf,
    /// `posenet17`, `chain`, or a path to a topology JSON file.
    pub topology: String,
    pub normalization: Normalization,
    /// Train / validation / test fractions used by `synth`.
    pub split: [f64; 3],
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            train_path: "data/train.jsonl".into(),
            val_path: "data/val.jsonl".into(),
            test_path: "data/test.jsonl".into(),
            topology: "posenet17".into(),
            normalization: Normalization::Bbox,
            split: [0.7, 0.15, 0.15],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub classes: usize,
    pub samples_per_class: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise_sigma: f64,
}

impl Default for SynthSection {
    fn default() -> Self {
        let s = SynthSpec::default();
        SynthSection {
            classes: s.classes,
            samples_per_class: s.samples_per_class,
            min_len: s.min_len,
            max_len: s.max_len,
            noise_sigma: s.noise_sigma,
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
        OutputSection { dir: "runs/default".into() }
    }
}

impl RunConfig {
    /// Reads `path` (or starts from defaults), applies the overrides in
    /// order and validates the result.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, CliError> {
        let mut table: toml::Table = RunConfig::default().to_toml().parse().expect("defaults parse");
        if let Some(p) = path {
            let text = fs::read_to_string(p).map_err(|e| io_err(p, e))?;
            let file = text
                .parse::<toml::Table>()
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            merge(&mut table, file);
        }
        for entry in overrides {
            apply_override(&mut table, entry)?;
        }
        let config: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| CliError::Config(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.model.validate()?;
        self.optim.validate()?;
        self.plan().validate()?;
        self.synth_spec().validate()?;
        let [a, b, c] = self.data.split;
        if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
            return Err(CliError::Config(format!("data.split {:?} must be fractions summing to 1", self.data.split)));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn plan(&self) -> TrainPlan {
        TrainPlan {
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            seed: self.seed,
            schedule: self.train.schedule,
            patience: self.train.patience,
        }
    }

    /// Synthetic data uses the model's node count.
    pub fn synth_spec(&self) -> SynthSpec {
        SynthSpec {
            classes: self.synth.classes,
            samples_per_class: self.synth.samples_per_class,
            n_nodes: self.model.n_nodes,
            min_len: self.synth.min_len,
            max_len: self.synth.max_len,
            noise_sigma: self.synth.noise_sigma,
            seed: self.seed,
        }
    }

    pub fn topology(&self) -> Result<SkeletonTopology, CliError> {
        let topo = match self.data.topology.as_str() {
            "posenet17" => SkeletonTopology::posenet17(),
            "chain" => SkeletonTopology::chain(self.model.n_nodes)?,
            path => {
                require_file(Path::new(path), "data.topology")?;
                SkeletonTopology::load(Path::new(path))?
            }
        };
        if topo.n_nodes != self.model.n_nodes {
            return Err(CliError::Config(format!(
                "topology has {} nodes but model.n_nodes = {}",
                topo.n_nodes, self.model.n_nodes
            )));
        }
        Ok(topo)
    }

    /// Writes the effective configuration next to a command's artifacts.
    pub fn echo(&self, name: &str) -> Result<PathBuf, CliError> {
        fs::create_dir_all(&self.output.dir).map_err(|e| io_err(&self.output.dir, e))?;
        let path = self.output.dir.join(format!("{name}.config.toml"));
        fs::write(&path, self.to_toml()).map_err(|e| io_err(&path, e))?;
        Ok(path)
    }
}

fn merge(base: &mut toml::Table, top: toml::Table) {
    for (key, value) in top {
        match (base.get_mut(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(t)) => merge(b, t),
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
}

/// Sets one dotted key. The value is read as a TOML value when it parses as
/// one, else taken as a bare string.
fn apply_override(table: &mut toml::Table, entry: &str) -> Result<(), CliError> {
    let (key, raw) = entry
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{entry}` is not key=value")))?;
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(CliError::Config(format!("bad override key `{key}`")));
    }
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let slot = cur
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = slot
            .as_table_mut()
            .ok_or_else(|| CliError::Config(format!("override `{key}`: `{part}` is not a section")))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

pub fn require_file(path: &Path, what: &str) -> Result<(), CliError> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what}: {} does not exist", path.display())))
    }
}

pub fn io_err(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip() {
        let config = RunConfig::default();
        let back: RunConfig = toml::from_str(&config.to_toml()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn overrides_win_and_round_trip() {
        let config = RunConfig::load(
            None,
            &[
                "model.stages=2".into(),
                "optim.lr=0.0".into(),
                "data.topology=chain".into(),
                "model.n_nodes=5".into(),
                "seed=11".into(),
            ],
        )
        .unwrap();
        assert_eq!(config.model.stages, 2);
        assert_eq!(config.optim.lr, 0.0);
        assert_eq!(config.seed, 11);
        assert_eq!(config.topology().unwrap().n_nodes, 5);
        let back: RunConfig = toml::from_str(&config.to_toml()).unwrap();
        assert_eq!(back, config);
    }

    #[test]
    fn shipped_configs_parse() {
        let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
        let desk = RunConfig::load(Some(&root.join("desk.toml")), &[]).unwrap();
        assert_eq!((desk.model.stages, desk.model.hidden, desk.train.epochs), (4, 32, 30));
        let full = RunConfig::load(Some(&root.join("full.toml")), &[]).unwrap();
        assert_eq!((full.model.stages, full.model.heads, full.train.batch_size), (16, 8, 64));
        assert_eq!((full.optim.lr, full.optim.weight_decay, full.train.epochs), (1e-3, 1e-5, 100));
        let shipped = SkeletonTopology::load(&root.join("posenet17.json")).unwrap();
        assert_eq!(shipped, SkeletonTopology::posenet17());
    }

    #[test]
    fn bad_input_is_a_config_error() {
        for set in ["model.stages", "model.nope=1", "synth.classes=1", "model.stages.x=1", "data.split=[0.5,0.5,0.5]"] {
            assert!(matches!(RunConfig::load(None, &[set.into()]), Err(CliError::Config(_))), "{set}");
        }
    }
}
