//! Run configuration: JSON on disk, strict field checking, and the content
//! hash that names every output file.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use iassl_core::active_loop::{EvalConfig, IasslConfig, LoopConfig, OracleConfig, SamplingConfig};
use iassl_core::data::{self, Dataset, GenSpec};
use iassl_core::model::{DatasetStore, Partition};
use iassl_core::optim::OptimizerConfig;

use crate::error::{as_config, CliError, Result};

/// Hex characters of the config digest used in file names.
pub const HASH_LEN: usize = 12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    #[default]
    Collaborative,
    UncertaintyOnly,
    Random,
    /// Collaborative selection with the oracle switched off.
    SslOnly,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::Collaborative,
        Strategy::UncertaintyOnly,
        Strategy::Random,
        Strategy::SslOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::Collaborative => "collaborative",
            Strategy::UncertaintyOnly => "uncertainty_only",
            Strategy::Random => "random",
            Strategy::SslOnly => "ssl_only",
        }
    }

    fn selector(self) -> &'static str {
        match self {
            Strategy::SslOnly => "collaborative",
            s => s.as_str(),
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Annotation directory plus feature table, joined into one sample per object.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSpec {
    pub annotations: PathBuf,
    pub features: PathBuf,
    pub classes: Vec<String>,
    /// Source name to partition; unlisted sources are tentative.
    #[serde(default)]
    pub splits: BTreeMap<String, Partition>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Generate(GenSpec),
    /// The bundled benchmark, generated from the run seed.
    Benchmark {
        #[serde(default)]
        label_noise: Option<f64>,
    },
    Dataset(PathBuf),
    Ingest(IngestSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepGrid {
    pub triples: Vec<[f64; 3]>,
    pub strategies: Vec<Strategy>,
    /// Empty means the config seed alone.
    pub seeds: Vec<u64>,
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            triples: vec![[0.8, 0.6, 0.8]],
            strategies: Strategy::ALL.to_vec(),
            seeds: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: DataSource,
    #[serde(default)]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub strategy: Strategy,
    #[serde(default)]
    pub sampling: SamplingConfig,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default, rename = "loop")]
    pub loop_: LoopConfig,
    #[serde(default)]
    pub oracle: OracleConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default)]
    pub record_wall_time: bool,
    #[serde(default)]
    pub sweep: SweepGrid,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

/// A loaded dataset and how many classes the detector needs.
#[derive(Debug, Clone)]
pub struct LoadedData {
    pub spec: Option<GenSpec>,
    pub store: DatasetStore,
    pub num_classes: usize,
}

impl RunConfig {
    /// Reads and validates a config. Relative data paths are resolved
    /// against the config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            if path == "." || path == "?" {
                CliError::config(e.into_inner().to_string())
            } else {
                CliError::config(format!("at `{path}`: {}", e.into_inner()))
            }
        })?;
        config.validate()?;
        Ok(config)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let join = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.data {
            DataSource::Dataset(p) => join(p),
            DataSource::Ingest(spec) => {
                join(&mut spec.annotations);
                join(&mut spec.features);
            }
            _ => {}
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.core_config().validate().map_err(as_config("invalid config"))?;
        match &self.data {
            DataSource::Generate(spec) => spec.validate().map_err(as_config("at `data.generate`"))?,
            DataSource::Benchmark { label_noise } => {
                if let Some(noise) = label_noise {
                    let mut spec = GenSpec::benchmark(self.seed);
                    spec.label_noise = *noise;
                    spec.validate().map_err(as_config("at `data.benchmark`"))?;
                }
            }
            DataSource::Ingest(spec) if spec.classes.is_empty() => {
                return Err(CliError::config("at `data.ingest.classes`: at least one class is required"));
            }
            _ => {}
        }
        if self.num_classes == Some(0) {
            return Err(CliError::config("at `num_classes`: must be at least 1"));
        }
        for (i, t) in self.sweep.triples.iter().enumerate() {
            SamplingConfig {
                u: t[0],
                d: t[1],
                c: t[2],
                ..self.sampling.clone()
            }
            .params()
            .map_err(|e| CliError::config(format!("at `sweep.triples[{i}]`: {e}")))?;
        }
        Ok(())
    }

    /// Applies a seed override to the run and to generated data.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        if let DataSource::Generate(spec) = &mut self.data {
            spec.seed = seed;
        }
        self
    }

    pub fn with_params(mut self, triple: [f64; 3]) -> Self {
        self.sampling.u = triple[0];
        self.sampling.d = triple[1];
        self.sampling.c = triple[2];
        self
    }

    pub fn with_strategy(mut self, strategy: Strategy) -> Self {
        self.strategy = strategy;
        self
    }

    /// The engine configuration this run executes.
    pub fn core_config(&self) -> IasslConfig {
        let mut oracle = self.oracle.clone();
        if self.strategy == Strategy::SslOnly {
            oracle.enabled = false;
        }
        IasslConfig {
            seed: self.seed,
            selector: self.strategy.selector().into(),
            sampling: self.sampling.clone(),
            optimizer: self.optimizer.clone(),
            loop_: self.loop_.clone(),
            oracle,
            eval: self.eval.clone(),
            record_wall_time: self.record_wall_time,
        }
    }

    /// Digest of everything that affects results. The output directory and
    /// the sweep grid are left out.
    pub fn hash(&self) -> String {
        let mut identity = self.clone();
        identity.output_dir = None;
        identity.sweep = SweepGrid::default();
        let canonical = serde_json::to_value(&identity).expect("configs serialize");
        hash_bytes(canonical.to_string().as_bytes())
    }

    pub fn load_data(&self) -> Result<LoadedData> {
        let (spec, store) = match &self.data {
            DataSource::Generate(spec) => (Some(spec.clone()), data::generate(spec).map_err(as_config("data.generate"))?),
            DataSource::Benchmark { label_noise } => {
                let mut spec = GenSpec::benchmark(self.seed);
                if let Some(noise) = label_noise {
                    spec.label_noise = *noise;
                }
                let store = data::generate(&spec).map_err(as_config("data.benchmark"))?;
                (Some(spec), store)
            }
            DataSource::Dataset(path) => {
                let file = fs::File::open(path).map_err(|e| CliError::io(path, e))?;
                let ds = Dataset::read_json(std::io::BufReader::new(file))
                    .map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
                (ds.spec, ds.store)
            }
            DataSource::Ingest(spec) => (None, ingest(spec)?),
        };
        store.check_invariants().map_err(as_config("dataset"))?;
        let num_classes = match (&self.num_classes, &spec, &self.data) {
            (Some(n), _, _) => *n,
            (None, Some(spec), _) => spec.classes.len(),
            (None, None, DataSource::Ingest(ingest)) => ingest.classes.len(),
            _ => return Err(CliError::config("at `num_classes`: required for datasets without a generator spec")),
        };
        Ok(LoadedData {
            spec,
            store,
            num_classes,
        })
    }
}

pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(digest)[..HASH_LEN].to_string()
}

fn ingest(spec: &IngestSpec) -> Result<DatasetStore> {
    let mut entries: Vec<PathBuf> = fs::read_dir(&spec.annotations)
        .map_err(|e| CliError::io(&spec.annotations, e))?
        .map(|entry| entry.map(|e| e.path()))
        .collect::<std::io::Result<_>>()
        .map_err(|e| CliError::io(&spec.annotations, e))?;
    entries.retain(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("xml")));
    entries.sort();
    let mut records = Vec::with_capacity(entries.len());
    for path in &entries {
        let text = fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let record = data::parse_voc_xml(&text).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
        records.push(record);
    }
    let file = fs::File::open(&spec.features).map_err(|e| CliError::io(&spec.features, e))?;
    let table = data::read_feature_csv(file).map_err(|e| CliError::config(format!("{}: {e}", spec.features.display())))?;
    data::join_features(&records, &table, &spec.classes, &spec.splits).map_err(as_config("data.ingest"))
}
