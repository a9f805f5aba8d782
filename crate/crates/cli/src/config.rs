use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thinkgen_core::backends::mock::{MockExtractor, MockFeatures, MockGenerator, MockPerceptual, MockScorer};
use thinkgen_core::backends::{
    ControlExtractorBackend, FeatureExtractor, GeneratorBackend, ImageTextScorer, MockPolicy, MockPolicyConfig, OracleClient,
    PerceptualDistance, RetryPolicy, RetryingOracle, ScriptedOracle, SyntheticOracle,
};
use thinkgen_core::control::{CannyParams, ExtractorRegistry};
use thinkgen_core::curation::{Blocklist, Provenance};
use thinkgen_core::digest::sha256_hex;
use thinkgen_core::grpo::{RftConfig, SftConfig};
use thinkgen_core::metrics::{EvalSettings, SsimParams};
use thinkgen_core::rewards::OrmWeights;
use thinkgen_core::selection::InferenceConfig;
use thinkgen_core::{ControlType, Error, TOOL_VERSION};

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    /// Root seed; `--seed` overrides it.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub backends: BackendsConfig,
    #[serde(default)]
    pub curation: CurationConfig,
    #[serde(default)]
    pub training: TrainingConfig,
    #[serde(default)]
    pub inference: InferenceSection,
    #[serde(default)]
    pub metrics: MetricsConfig,
    #[serde(default)]
    pub paths: PathsConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "adapter", rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicyAdapter {
    Mock {
        #[serde(default)]
        seed: u64,
        #[serde(default)]
        model: Option<MockPolicyConfig>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "adapter", rename_all = "snake_case", deny_unknown_fields)]
pub enum OracleAdapter {
    Synthetic {
        #[serde(default = "default_flaw_rate")]
        flaw_rate: f64,
    },
    /// Replays responses from a JSON-Lines file of strings, in call order.
    Scripted { responses: PathBuf },
}

fn default_flaw_rate() -> f64 {
    0.1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "adapter", rename_all = "snake_case", deny_unknown_fields)]
pub enum MockOnly {
    Mock,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "adapter", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExtractorAdapter {
    Mock {
        #[serde(default = "default_seg_classes")]
        seg_classes: u32,
        /// Use the built-in Canny detector for CANNY maps.
        #[serde(default)]
        native_canny: Option<CannyParams>,
    },
}

fn default_seg_classes() -> u32 {
    4
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "adapter", rename_all = "snake_case", deny_unknown_fields)]
pub enum FeaturesAdapter {
    Mock {
        #[serde(default = "default_feature_dim")]
        dimension: usize,
    },
}

fn default_feature_dim() -> usize {
    8
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackendsConfig {
    pub policy: PolicyAdapter,
    pub oracle: OracleAdapter,
    pub generator: MockOnly,
    pub scorer: MockOnly,
    pub perceptual: MockOnly,
    pub extractor: ExtractorAdapter,
    pub features: FeaturesAdapter,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            policy: PolicyAdapter::Mock { seed: 0, model: None },
            oracle: OracleAdapter::Synthetic { flaw_rate: default_flaw_rate() },
            generator: MockOnly::Mock,
            scorer: MockOnly::Mock,
            perceptual: MockOnly::Mock,
            extractor: ExtractorAdapter::Mock { seg_classes: default_seg_classes(), native_canny: None },
            features: FeaturesAdapter::Mock { dimension: default_feature_dim() },
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CurationConfig {
    /// Control type of the pipeline; `--control-type` overrides it.
    pub control_type: ControlType,
    /// Replaces the built-in phrase list when set.
    pub blocklist: Option<Vec<String>>,
    pub concurrency: usize,
    /// Curate at most this many manifest rows.
    pub target_count: Option<usize>,
    pub retry: RetryPolicy,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            control_type: ControlType::Canny,
            blocklist: None,
            concurrency: 4,
            target_count: None,
            retry: RetryPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case", deny_unknown_fields)]
pub enum ReferenceSource {
    /// Freeze the policy as loaded when reinforcement fine-tuning starts.
    RftStart,
    /// Load the reference from a checkpoint metadata file.
    Checkpoint { path: PathBuf },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardKind {
    #[default]
    AlignmentFormat,
    FormatOnly,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingConfig {
    pub sft: SftConfig,
    pub rft: RftConfig,
    pub reference: Option<ReferenceSource>,
    pub reward: RewardKind,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceSection {
    pub k: usize,
    pub temperature: f64,
    pub max_resamples: usize,
    pub fallback_to_original: bool,
    pub weights: OrmWeights,
}

impl Default for InferenceSection {
    fn default() -> Self {
        let d = InferenceConfig::default();
        InferenceSection {
            k: d.k,
            temperature: d.temperature,
            max_resamples: d.max_resamples,
            fallback_to_original: d.fallback_to_original,
            weights: d.weights,
        }
    }
}

impl InferenceSection {
    pub fn to_core(&self) -> InferenceConfig {
        InferenceConfig {
            k: self.k,
            temperature: self.temperature,
            max_resamples: self.max_resamples,
            fallback_to_original: self.fallback_to_original,
            weights: self.weights,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsConfig {
    pub ssim: SsimParams,
    pub edge_tolerance: u32,
    pub fid: bool,
    /// Print unit-scale metrics multiplied by 100.
    pub scale_100: bool,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        MetricsConfig { ssim: SsimParams::default(), edge_tolerance: 0, fid: true, scale_100: false }
    }
}

impl MetricsConfig {
    pub fn settings(&self) -> EvalSettings {
        EvalSettings { ssim: self.ssim, edge_tolerance: self.edge_tolerance }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub manifest: Option<PathBuf>,
    /// Defaults to `<out>/dataset.jsonl`.
    pub dataset: Option<PathBuf>,
    pub generated: Option<PathBuf>,
    pub references: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

pub struct LoadedConfig {
    pub config: PipelineConfig,
    pub digest: String,
    base_dir: PathBuf,
}

impl LoadedConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, Error> {
        let Some(path) = path else {
            let table = toml::Table::new();
            return Self::from_table(table, PathBuf::from("."));
        };
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let table: toml::Table = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new(".")).to_owned();
        Self::from_table(table, base)
    }

    fn from_table(mut table: toml::Table, base_dir: PathBuf) -> Result<Self, Error> {
        // Digest the file as written, before secrets are interpolated.
        let canonical = serde_json::to_string(&table).map_err(|e| Error::Config(e.to_string()))?;
        let digest = sha256_hex(canonical.as_bytes());
        for (_, value) in table.iter_mut() {
            interpolate(value)?;
        }
        let config: PipelineConfig =
            toml::Value::Table(table).try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        validate(&config)?;
        Ok(LoadedConfig { config, digest, base_dir })
    }

    pub fn provenance(&self) -> Provenance {
        Provenance { config_digest: self.digest.clone(), tool_version: TOOL_VERSION.to_owned() }
    }

    /// Resolves a config path relative to the config file's directory.
    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn blocklist(&self) -> Blocklist {
        match &self.config.curation.blocklist {
            Some(phrases) => Blocklist::new(phrases),
            None => Blocklist::default(),
        }
    }

    pub fn policy(&self) -> MockPolicy {
        match &self.config.backends.policy {
            PolicyAdapter::Mock { seed, model: Some(m) } => MockPolicy::with_config(*seed, m),
            PolicyAdapter::Mock { seed, model: None } => MockPolicy::new(*seed),
        }
    }

    pub fn oracle(&self) -> Result<Arc<dyn OracleClient>, Error> {
        let inner: Arc<dyn OracleClient> = match &self.config.backends.oracle {
            OracleAdapter::Synthetic { flaw_rate } => Arc::new(SyntheticOracle::new(*flaw_rate)),
            OracleAdapter::Scripted { responses } => {
                let path = self.resolve(responses);
                let lines: Vec<String> = thinkgen_core::jsonl::read_lines(&path)?;
                Arc::new(ScriptedOracle::new(lines))
            }
        };
        Ok(Arc::new(RetryingOracle::new(inner, self.config.curation.retry)))
    }

    pub fn generator(&self) -> Box<dyn GeneratorBackend> {
        Box::new(MockGenerator)
    }

    pub fn scorer(&self) -> Arc<dyn ImageTextScorer> {
        Arc::new(MockScorer)
    }

    pub fn perceptual(&self) -> Box<dyn PerceptualDistance> {
        Box::new(MockPerceptual)
    }

    pub fn seg_classes(&self) -> u32 {
        match &self.config.backends.extractor {
            ExtractorAdapter::Mock { seg_classes, .. } => *seg_classes,
        }
    }

    pub fn extractor(&self) -> Arc<dyn ControlExtractorBackend> {
        match &self.config.backends.extractor {
            ExtractorAdapter::Mock { seg_classes, native_canny } => {
                let mock: Arc<dyn ControlExtractorBackend> = Arc::new(MockExtractor { seg_classes: *seg_classes });
                match native_canny {
                    None => mock,
                    Some(params) => {
                        let registry = ControlType::ALL
                            .into_iter()
                            .filter(|t| *t != ControlType::Canny)
                            .fold(ExtractorRegistry::new().with_native_canny(*params), |r, t| r.register(t, mock.clone()));
                        Arc::new(registry)
                    }
                }
            }
        }
    }

    pub fn features(&self) -> Box<dyn FeatureExtractor> {
        match &self.config.backends.features {
            FeaturesAdapter::Mock { dimension } => Box::new(MockFeatures::new(*dimension)),
        }
    }
}

fn validate(config: &PipelineConfig) -> Result<(), Error> {
    config.training.rft.validate()?;
    if config.training.sft.batch_size == 0 {
        return Err(Error::Config("training.sft.batch_size must be positive".into()));
    }
    if config.inference.k == 0 {
        return Err(Error::Config("inference.k must be at least 1".into()));
    }
    if config.curation.concurrency == 0 {
        return Err(Error::Config("curation.concurrency must be at least 1".into()));
    }
    if let OracleAdapter::Synthetic { flaw_rate } = config.backends.oracle {
        if !(0.0..=1.0).contains(&flaw_rate) {
            return Err(Error::Config("backends.oracle.flaw_rate must lie in [0, 1]".into()));
        }
    }
    if let ExtractorAdapter::Mock { native_canny: Some(p), .. } = &config.backends.extractor {
        p.validate().map_err(|e| Error::Config(format!("backends.extractor.native_canny: {e}")))?;
    }
    Ok(())
}

/// Replaces `${NAME}` in string values with the environment variable `NAME`.
fn interpolate(value: &mut toml::Value) -> Result<(), Error> {
    match value {
        toml::Value::String(s) => *s = expand(s)?,
        toml::Value::Array(items) => items.iter_mut().try_for_each(interpolate)?,
        toml::Value::Table(t) => t.iter_mut().try_for_each(|(_, v)| interpolate(v))?,
        _ => {}
    }
    Ok(())
}

fn expand(s: &str) -> Result<String, Error> {
    let mut out = String::with_capacity(s.len());
    let mut rest = s;
    while let Some(start) = rest.find("${") {
        out.push_str(&rest[..start]);
        let after = &rest[start + 2..];
        let end = after.find('}').ok_or_else(|| Error::Config(format!("unterminated `${{` in `{s}`")))?;
        let name = &after[..end];
        let v = std::env::var(name).map_err(|_| Error::Config(format!("environment variable `{name}` is not set")))?;
        out.push_str(&v);
        rest = &after[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}
