//! Flat key-value configuration. Precedence: command-line flags, then the
//! config file, then built-in defaults. The resolved configuration is
//! written into every manifest, and a manifest can be passed back with
//! `--config` to replay a run.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use mapinv_core::inversion::{InitMode, OptimizerConfig, Priors, StepRule};
use mapinv_core::LayerId;
use serde::{Deserialize, Serialize};

/// Flags shared by every optimising command. All optional so that unset
/// flags fall through to the config file.
#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct CommonArgs {
    /// Flat JSON config file, or a manifest.json from an earlier run.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Weights file (safetensors). Also read from MAPINV_WEIGHTS.
    /// `synthetic:<seed>` builds a randomly initialised trunk, `toy:<seed>`
    /// a tiny test network.
    #[arg(long)]
    pub weights: Option<String>,
    /// Resize inputs so the longer side is this many pixels (0 keeps size).
    #[arg(long)]
    pub size: Option<u32>,
    #[arg(long)]
    pub iters: Option<usize>,
    #[arg(long)]
    pub init: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub tv_weight: Option<f64>,
    #[arg(long)]
    pub l2_weight: Option<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// `lbfgs` or `fixed`.
    #[arg(long)]
    pub optimizer: Option<String>,
    /// Step length of the fixed-step optimiser.
    #[arg(long)]
    pub step: Option<f64>,
    #[arg(long)]
    pub lbfgs_memory: Option<usize>,
    #[arg(long)]
    pub tolerance: Option<f64>,
    #[arg(long)]
    pub noise_sigma: Option<f64>,
    #[arg(long)]
    pub initial_step: Option<f64>,
    /// Keep pixels inside the valid 8-bit range.
    #[arg(long)]
    pub clamp: Option<bool>,
    /// Cells to run concurrently.
    #[arg(long)]
    pub jobs: Option<usize>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct FmiArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Comma separated relu layers.
    #[arg(long)]
    pub layers: Option<String>,
    /// Comma separated filter indices.
    #[arg(long)]
    pub filters: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomStyleArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub layers: Option<String>,
    /// Comma separated seeds of the reallocation vectors.
    #[arg(long)]
    pub seeds: Option<String>,
}

#[derive(Debug, Clone, Default, Args, Serialize, Deserialize)]
#[serde(default)]
pub struct StyleTransferArgs {
    #[arg(long)]
    pub content: Option<PathBuf>,
    #[arg(long)]
    pub style: Option<PathBuf>,
    /// `channel_sum` or `gram`.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub content_layer: Option<String>,
    #[arg(long)]
    pub style_layers: Option<String>,
    /// Divide style statistics by their spatial size.
    #[arg(long)]
    pub normalize_style: Option<bool>,
    /// Style image size as `WxH`; default matches the content image area.
    #[arg(long)]
    pub style_size: Option<String>,
}

/// Loads a config file. A manifest is accepted too; its `config` object is
/// used.
pub fn read_config_file(path: &Path) -> Result<serde_json::Value> {
    let text = fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let mut value: serde_json::Value =
        serde_json::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
    if let Some(inner) = value.get_mut("config") {
        value = inner.take();
    }
    if !value.is_object() {
        bail!("config {} is not a JSON object", path.display());
    }
    Ok(value)
}

/// Fills every unset field of `flags` from `file`.
pub fn merge<T>(flags: &T, file: &serde_json::Value) -> Result<T>
where
    T: Serialize + for<'de> Deserialize<'de>,
{
    let mut merged = file.clone();
    let flags = serde_json::to_value(flags)?;
    let (Some(m), Some(f)) = (merged.as_object_mut(), flags.as_object()) else {
        bail!("config must be a flat object");
    };
    for (k, v) in f {
        if !v.is_null() {
            m.insert(k.clone(), v.clone());
        }
    }
    Ok(serde_json::from_value(merged)?)
}

/// Where the trunk comes from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightsSource {
    File(PathBuf),
    Synthetic(u64),
    /// Seven-layer test network; only its own layer names are valid.
    Toy(u64),
}

impl WeightsSource {
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(seed) = s.strip_prefix("synthetic:") {
            Ok(Self::Synthetic(seed.parse().context("synthetic weights seed")?))
        } else if let Some(seed) = s.strip_prefix("toy:") {
            Ok(Self::Toy(seed.parse().context("toy weights seed")?))
        } else {
            Ok(Self::File(PathBuf::from(s)))
        }
    }
}

/// Fully resolved common settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Common {
    pub weights: String,
    pub size: u32,
    pub iters: usize,
    pub init: InitMode,
    pub seed: u64,
    pub tv_weight: f64,
    pub l2_weight: f64,
    pub out: PathBuf,
    pub optimizer: String,
    pub step: f64,
    pub lbfgs_memory: usize,
    pub tolerance: f64,
    pub noise_sigma: f64,
    pub initial_step: f64,
    pub clamp: bool,
    pub jobs: usize,
}

fn parse_init(s: &str) -> Result<InitMode> {
    match s {
        "noise" => Ok(InitMode::Noise),
        "content" => Ok(InitMode::Content),
        other => bail!("unknown init mode `{other}` (expected noise or content)"),
    }
}

impl Common {
    pub fn resolve(a: &CommonArgs, command: &str) -> Result<Self> {
        let weights = match &a.weights {
            Some(w) => w.clone(),
            None => std::env::var("MAPINV_WEIGHTS")
                .context("no weights given: pass --weights, set it in the config file, or set MAPINV_WEIGHTS")?,
        };
        WeightsSource::parse(&weights)?;
        let c = Self {
            weights,
            size: a.size.unwrap_or(224),
            iters: a.iters.unwrap_or(300),
            init: parse_init(a.init.as_deref().unwrap_or("noise"))?,
            seed: a.seed.unwrap_or(0),
            tv_weight: a.tv_weight.unwrap_or(Priors::default().tv),
            l2_weight: a.l2_weight.unwrap_or(Priors::default().l2),
            out: a.out.clone().unwrap_or_else(|| PathBuf::from(format!("out/{command}"))),
            optimizer: a.optimizer.clone().unwrap_or_else(|| "lbfgs".into()),
            step: a.step.unwrap_or(1.0),
            lbfgs_memory: a.lbfgs_memory.unwrap_or(10),
            tolerance: a.tolerance.unwrap_or(1e-5),
            noise_sigma: a.noise_sigma.unwrap_or(10.0),
            initial_step: a.initial_step.unwrap_or(1.0),
            clamp: a.clamp.unwrap_or(true),
            jobs: a.jobs.unwrap_or(1),
        };
        if c.jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        if !(c.tv_weight >= 0.0 && c.l2_weight >= 0.0) {
            bail!("prior weights must be non-negative");
        }
        c.optimizer_config()?.validate()?;
        Ok(c)
    }

    pub fn weights_source(&self) -> WeightsSource {
        WeightsSource::parse(&self.weights).expect("validated in resolve")
    }

    pub fn priors(&self) -> Priors {
        Priors {
            tv: self.tv_weight,
            l2: self.l2_weight,
        }
    }

    pub fn optimizer_config(&self) -> Result<OptimizerConfig> {
        let step_rule = match self.optimizer.as_str() {
            "lbfgs" => StepRule::Lbfgs {
                memory: self.lbfgs_memory,
            },
            "fixed" => StepRule::Fixed { step: self.step },
            other => bail!("unknown optimizer `{other}` (expected lbfgs or fixed)"),
        };
        Ok(OptimizerConfig {
            max_iters: self.iters,
            step_rule,
            init: self.init,
            seed: self.seed,
            noise_sigma: self.noise_sigma,
            tolerance: self.tolerance,
            window: 10,
            clamp_pixels: self.clamp,
            initial_step: self.initial_step,
        })
    }
}

pub fn parse_layers(s: &str) -> Result<Vec<LayerId>> {
    let layers = LayerId::parse_list(s)?;
    if layers.is_empty() {
        bail!("no layers given");
    }
    Ok(layers)
}

pub fn parse_indices<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>>
where
    T::Err: std::error::Error + Send + Sync + 'static,
{
    s.split(',')
        .map(str::trim)
        .filter(|t| !t.is_empty())
        .map(|t| t.parse::<T>().with_context(|| format!("invalid {what} `{t}`")))
        .collect()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FmiConfig {
    #[serde(flatten)]
    pub common: Common,
    pub image: PathBuf,
    pub layers: String,
    pub filters: String,
}

impl FmiConfig {
    pub const DEFAULT_LAYERS: &'static str = "relu1_2,relu2_2,relu3_2,relu4_2,relu5_2";

    pub fn resolve(common: &CommonArgs, a: &FmiArgs) -> Result<Self> {
        Ok(Self {
            common: Common::resolve(common, "fmi")?,
            image: a.image.clone().context("--image is required")?,
            layers: a.layers.clone().unwrap_or_else(|| Self::DEFAULT_LAYERS.into()),
            filters: a.filters.clone().unwrap_or_else(|| "0,1,2,3,4".into()),
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomStyleConfig {
    #[serde(flatten)]
    pub common: Common,
    pub image: PathBuf,
    pub layers: String,
    pub seeds: String,
}

impl RandomStyleConfig {
    pub const DEFAULT_LAYERS: &'static str = "relu1_1,relu2_1,relu3_1,relu4_1,relu5_1";

    pub fn resolve(common: &CommonArgs, a: &RandomStyleArgs) -> Result<Self> {
        Ok(Self {
            common: Common::resolve(common, "random-style")?,
            image: a.image.clone().context("--image is required")?,
            layers: a.layers.clone().unwrap_or_else(|| Self::DEFAULT_LAYERS.into()),
            seeds: a.seeds.clone().unwrap_or_else(|| "1,2".into()),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StyleMode {
    ChannelSum,
    Gram,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleTransferConfig {
    #[serde(flatten)]
    pub common: Common,
    pub content: PathBuf,
    pub style: PathBuf,
    pub mode: StyleMode,
    pub alpha: f64,
    pub beta: f64,
    pub content_layer: String,
    pub style_layers: String,
    pub normalize_style: bool,
    pub style_size: Option<String>,
}

impl StyleTransferConfig {
    pub fn resolve(common: &CommonArgs, a: &StyleTransferArgs) -> Result<Self> {
        let mode = match a.mode.as_deref().unwrap_or("channel_sum") {
            "channel_sum" => StyleMode::ChannelSum,
            "gram" => StyleMode::Gram,
            other => bail!("unknown mode `{other}` (expected channel_sum or gram)"),
        };
        Ok(Self {
            common: Common::resolve(common, "style-transfer")?,
            content: a.content.clone().context("--content is required")?,
            style: a.style.clone().context("--style is required")?,
            mode,
            alpha: a.alpha.unwrap_or(10.0),
            beta: a.beta.unwrap_or(1.0),
            content_layer: a.content_layer.clone().unwrap_or_else(|| "relu2_2".into()),
            style_layers: a
                .style_layers
                .clone()
                .unwrap_or_else(|| RandomStyleConfig::DEFAULT_LAYERS.into()),
            normalize_style: a.normalize_style.unwrap_or(false),
            style_size: a.style_size.clone(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_and_file_overrides_defaults() {
        let file = serde_json::json!({"iters": 50, "seed": 9, "weights": "synthetic:1", "command": "fmi"});
        let flags = CommonArgs {
            seed: Some(3),
            ..CommonArgs::default()
        };
        let merged: CommonArgs = merge(&flags, &file).unwrap();
        let c = Common::resolve(&merged, "fmi").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.iters, 50);
        assert_eq!(c.size, 224);
        assert_eq!(c.weights_source(), WeightsSource::Synthetic(1));
    }

    #[test]
    fn manifest_config_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        fs::write(&p, r#"{"command": "fmi", "config": {"iters": 7}, "runs": []}"#).unwrap();
        assert_eq!(read_config_file(&p).unwrap()["iters"], 7);
    }

    #[test]
    fn rejects_bad_values() {
        let base = CommonArgs {
            weights: Some("synthetic:0".into()),
            ..CommonArgs::default()
        };
        for bad in [
            CommonArgs {
                init: Some("zeros".into()),
                ..base.clone()
            },
            CommonArgs {
                iters: Some(0),
                ..base.clone()
            },
            CommonArgs {
                optimizer: Some("adam".into()),
                ..base.clone()
            },
            CommonArgs {
                jobs: Some(0),
                ..base.clone()
            },
            CommonArgs {
                tolerance: Some(0.0),
                ..base.clone()
            },
        ] {
            assert!(Common::resolve(&bad, "fmi").is_err());
        }
    }

    #[test]
    fn list_parsing() {
        assert_eq!(parse_indices::<usize>("0, 1,4", "filter").unwrap(), vec![0, 1, 4]);
        assert!(parse_indices::<usize>("0,x", "filter").is_err());
        assert!(parse_layers("").is_err());
        assert!(parse_layers("relu9_9").is_err());
    }
}
