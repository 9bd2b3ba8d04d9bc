//! Run configuration: TOML file, then `EDITDIFF_*` environment variables,
//! then command-line flags.

use std::path::{Path, PathBuf};

use editdiff_core::datagen::{
    OpBalance, Stage2Params, DEFAULT_EDIT_IOU, DEFAULT_MAX_CLASS_DIFF, DEFAULT_MIN_SIDE_PX, DEFAULT_SIM_THRESHOLD,
};
use editdiff_core::evalcomp::CorrelationUnit;
use editdiff_gateway::{Endpoint, Endpoints, GatewayConfig, OverlayStyle, RetryPolicy};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{CliError, Result};
use crate::io::{canonical_json, sha256_hex};

pub const API_KEY_ENV: &str = "EDITDIFF_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Thresholds {
    pub edit_iou: f64,
    pub confidence_floor: f64,
    pub sim_threshold: f64,
    pub max_class_diff: usize,
    pub min_side_px: u32,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            edit_iou: DEFAULT_EDIT_IOU,
            confidence_floor: 0.0,
            sim_threshold: DEFAULT_SIM_THRESHOLD,
            max_class_diff: DEFAULT_MAX_CLASS_DIFF,
            min_side_px: DEFAULT_MIN_SIDE_PX,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    pub stage2: u64,
    pub random_mask: u64,
}

/// Endpoints per role. A role without its own table uses `base_url` with
/// the chat or embedding model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EndpointSettings {
    pub base_url: Option<String>,
    pub chat_model: String,
    pub embedding_model: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detector: Option<Endpoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coherence: Option<Endpoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub captioner: Option<Endpoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub composer: Option<Endpoint>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub embeddings: Option<Endpoint>,
}

impl Default for EndpointSettings {
    fn default() -> Self {
        Self {
            base_url: None,
            chat_model: "difference-detector".into(),
            embedding_model: "image-text-embedder".into(),
            detector: None,
            coherence: None,
            captioner: None,
            composer: None,
            embeddings: None,
        }
    }
}

impl EndpointSettings {
    pub fn resolve(&self) -> Result<Endpoints> {
        let pick = |role: &str, explicit: &Option<Endpoint>, model: &str| -> Result<Endpoint> {
            match (explicit, &self.base_url) {
                (Some(e), _) => Ok(e.clone()),
                (None, Some(url)) => Ok(Endpoint::new(url.clone(), model)),
                (None, None) => Err(CliError::Config(format!(
                    "no endpoint for {role}: set endpoints.base_url or endpoints.{role}"
                ))),
            }
        };
        Ok(Endpoints {
            detector: pick("detector", &self.detector, &self.chat_model)?,
            coherence: pick("coherence", &self.coherence, &self.chat_model)?,
            captioner: pick("captioner", &self.captioner, &self.chat_model)?,
            composer: pick("composer", &self.composer, &self.chat_model)?,
            embeddings: pick("embeddings", &self.embeddings, &self.embedding_model)?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Evaluation cases, one JSON object per line.
    pub dataset: Option<PathBuf>,
    /// Annotated image corpus for data construction.
    pub annotations: Option<PathBuf>,
    pub masks_dir: Option<PathBuf>,
    pub output_dir: PathBuf,
    /// Response cache; disabled when unset.
    pub cache_dir: Option<PathBuf>,
    pub concurrency: usize,
    pub endpoints: EndpointSettings,
    pub thresholds: Thresholds,
    pub seeds: Seeds,
    pub mask_fill: [u8; 3],
    pub correlation_unit: CorrelationUnit,
    pub op_balance: OpBalance,
    pub stage2: Stage2Params,
    pub augmentation_probability: f64,
    pub retry_delays_ms: Vec<u64>,
    pub timeout_secs: u64,
    pub overlay_thickness: u32,
    pub top_k_alternatives: u8,
    pub max_tokens: u32,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            annotations: None,
            masks_dir: None,
            output_dir: PathBuf::from("out"),
            cache_dir: None,
            concurrency: 4,
            endpoints: EndpointSettings::default(),
            thresholds: Thresholds::default(),
            seeds: Seeds::default(),
            mask_fill: [0, 0, 0],
            correlation_unit: CorrelationUnit::PerCase,
            op_balance: OpBalance::default(),
            stage2: Stage2Params::default(),
            augmentation_probability: 0.5,
            retry_delays_ms: RetryPolicy::default().delays_ms,
            timeout_secs: 120,
            overlay_thickness: OverlayStyle::default().thickness,
            top_k_alternatives: 5,
            max_tokens: 512,
        }
    }
}

impl RunConfig {
    /// Reads a TOML file. Relative paths inside it are taken relative to the
    /// file's directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut cfg.dataset,
            &mut cfg.annotations,
            &mut cfg.masks_dir,
            &mut cfg.cache_dir,
        ]
        .into_iter()
        .flatten()
        {
            rebase(p);
        }
        rebase(&mut cfg.output_dir);
        Ok(cfg)
    }

    /// Applies `EDITDIFF_*` overrides read through `var`.
    pub fn apply_env(&mut self, var: impl Fn(&str) -> Option<String>) -> Result<()> {
        if let Some(v) = var("EDITDIFF_DATASET") {
            self.dataset = Some(v.into());
        }
        if let Some(v) = var("EDITDIFF_ANNOTATIONS") {
            self.annotations = Some(v.into());
        }
        if let Some(v) = var("EDITDIFF_OUTPUT_DIR") {
            self.output_dir = v.into();
        }
        if let Some(v) = var("EDITDIFF_CACHE_DIR") {
            self.cache_dir = Some(v.into());
        }
        if let Some(v) = var("EDITDIFF_BASE_URL") {
            self.endpoints.base_url = Some(v);
        }
        if let Some(v) = var("EDITDIFF_CHAT_MODEL") {
            self.endpoints.chat_model = v;
        }
        if let Some(v) = var("EDITDIFF_EMBEDDING_MODEL") {
            self.endpoints.embedding_model = v;
        }
        if let Some(v) = var("EDITDIFF_CONCURRENCY") {
            self.concurrency = v
                .parse()
                .map_err(|_| CliError::Config(format!("EDITDIFF_CONCURRENCY={v} is not a count")))?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(CliError::Config(m));
        let t = &self.thresholds;
        if self.concurrency == 0 {
            return bad("concurrency must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&t.edit_iou) {
            return bad(format!("thresholds.edit_iou {} outside [0, 1]", t.edit_iou));
        }
        if !(0.0..=1.0).contains(&t.confidence_floor) {
            return bad(format!(
                "thresholds.confidence_floor {} outside [0, 1]",
                t.confidence_floor
            ));
        }
        if !(-1.0..=1.0).contains(&t.sim_threshold) {
            return bad(format!("thresholds.sim_threshold {} outside [-1, 1]", t.sim_threshold));
        }
        if self.overlay_thickness == 0 {
            return bad("overlay_thickness must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.augmentation_probability) {
            return bad(format!(
                "augmentation_probability {} outside [0, 1]",
                self.augmentation_probability
            ));
        }
        self.op_balance
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }

    pub fn gateway_config(&self) -> Result<GatewayConfig> {
        let mut g = GatewayConfig::new(self.endpoints.resolve()?);
        g.api_key = std::env::var(API_KEY_ENV).ok().filter(|k| !k.is_empty());
        g.retry = RetryPolicy {
            delays_ms: self.retry_delays_ms.clone(),
        };
        g.timeout = std::time::Duration::from_secs(self.timeout_secs);
        g.cache_dir = self.cache_dir.clone();
        g.overlay = OverlayStyle {
            thickness: self.overlay_thickness,
            ..OverlayStyle::default()
        };
        g.top_k_alternatives = self.top_k_alternatives;
        g.max_tokens = self.max_tokens;
        Ok(g)
    }

    /// Hash of the settings that can change results. File locations,
    /// endpoint URLs, parallelism and transport settings are left out, so
    /// the same evaluation against a relocated server hashes the same.
    pub fn config_hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let obj = v.as_object_mut().expect("config is an object");
        for k in [
            "dataset",
            "annotations",
            "masks_dir",
            "output_dir",
            "cache_dir",
            "concurrency",
            "retry_delays_ms",
            "timeout_secs",
        ] {
            obj.remove(k);
        }
        if let Some(Value::Object(eps)) = obj.get_mut("endpoints") {
            eps.remove("base_url");
            for (_, e) in eps.iter_mut() {
                if let Value::Object(e) = e {
                    e.remove("url");
                }
            }
        }
        sha256_hex(canonical_json(&v).as_bytes())
    }
}
