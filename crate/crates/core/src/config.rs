//! Model, optimizer and provider configuration.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Where a frozen encoder gets its vectors from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProviderSpec {
    /// Deterministic hash-seeded provider; needs no external assets.
    #[default]
    Synthetic,
    /// Vectors precomputed by the `embed` job, looked up by content digest.
    File {
        path: PathBuf,
        /// Tag of the provider that produced the vectors.
        tag: String,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProviderConfig {
    pub text: ProviderSpec,
    pub image: ProviderSpec,
    /// Seed of the synthetic providers. Independent from the model seed so
    /// that features stay fixed while model initialization varies.
    pub seed: u64,
    /// Upper bound on segmentation masks rendered into an overlay.
    pub max_masks: usize,
}

impl Default for ProviderConfig {
    fn default() -> Self {
        Self {
            text: ProviderSpec::Synthetic,
            image: ProviderSpec::Synthetic,
            seed: 0x5eed,
            max_masks: 32,
        }
    }
}

/// Every knob of the ranker. Defaults follow the published experimental
/// settings where those exist.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Config {
    pub vocab_size: usize,
    pub max_token_len: usize,
    pub max_noun_phrases: usize,
    /// Output width of the text encoder.
    pub text_feat_dim: usize,
    /// Output width of the image encoder.
    pub image_feat_dim: usize,
    /// Width of the shared text/image embedding space.
    pub joint_dim: usize,
    pub transformer_layers: usize,
    pub transformer_hidden: usize,
    pub attention_heads: usize,
    /// Hidden width of the two fusion MLPs.
    pub mlp_hidden: usize,
    pub dropout: f64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub temperature: f64,
    pub seed: u64,
    /// Prefix the mode token and select the mode phrase. Turning this off
    /// gives the mode-free ablation, where both modes see identical text.
    pub mode_switching: bool,
    pub providers: ProviderConfig,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            vocab_size: 49_408,
            max_token_len: 77,
            max_noun_phrases: 6,
            text_feat_dim: 768,
            image_feat_dim: 768,
            joint_dim: 512,
            transformer_layers: 5,
            transformer_hidden: 768,
            attention_heads: 4,
            mlp_hidden: 768,
            dropout: 0.4,
            learning_rate: 1e-4,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            batch_size: 128,
            epochs: 20,
            temperature: 1.0,
            seed: 0,
            mode_switching: true,
            providers: ProviderConfig::default(),
        }
    }
}

/// A single broken invariant found by [`validate_config`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub field: &'static str,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    fn push(&mut self, field: &'static str, message: impl Into<String>) {
        self.violations.push(Violation {
            field,
            message: message.into(),
        });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.violations.iter().map(|v| v.to_string()).collect();
        f.write_str(&parts.join("; "))
    }
}

/// Checks every invariant of [`Config`] and reports all violations at once.
pub fn validate_config(config: &Config) -> ValidationReport {
    let mut report = ValidationReport::default();
    let positive = [
        ("vocab_size", config.vocab_size),
        ("max_token_len", config.max_token_len),
        ("max_noun_phrases", config.max_noun_phrases),
        ("text_feat_dim", config.text_feat_dim),
        ("image_feat_dim", config.image_feat_dim),
        ("joint_dim", config.joint_dim),
        ("transformer_layers", config.transformer_layers),
        ("transformer_hidden", config.transformer_hidden),
        ("attention_heads", config.attention_heads),
        ("mlp_hidden", config.mlp_hidden),
        ("batch_size", config.batch_size),
        ("epochs", config.epochs),
        ("providers.max_masks", config.providers.max_masks),
    ];
    for (field, value) in positive {
        if value == 0 {
            report.push(field, "must be positive");
        }
    }
    if config.attention_heads > 0
        && !config
            .transformer_hidden
            .is_multiple_of(config.attention_heads)
    {
        report.push(
            "transformer_hidden",
            format!(
                "hidden not divisible by heads ({} % {} != 0)",
                config.transformer_hidden, config.attention_heads
            ),
        );
    }
    if !(0.0..1.0).contains(&config.dropout) {
        report.push("dropout", "must lie in [0, 1)");
    }
    if !(config.learning_rate >= 0.0 && config.learning_rate.is_finite()) {
        report.push("learning_rate", "must be finite and non-negative");
    }
    for (field, beta) in [
        ("adam_beta1", config.adam_beta1),
        ("adam_beta2", config.adam_beta2),
    ] {
        if !(0.0..1.0).contains(&beta) {
            report.push(field, "must lie in [0, 1)");
        }
    }
    if !(config.adam_eps > 0.0 && config.adam_eps.is_finite()) {
        report.push("adam_eps", "must be positive");
    }
    if !(config.temperature > 0.0 && config.temperature.is_finite()) {
        report.push("temperature", "must be positive");
    }
    report
}

impl Config {
    /// SHA-256 over the canonical JSON form, hex encoded.
    pub fn digest(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Width of the position-wise feed-forward block inside each encoder layer.
    pub fn transformer_ffn(&self) -> usize {
        4 * self.transformer_hidden
    }

    /// Small configuration used by unit tests.
    pub fn tiny() -> Self {
        Self {
            vocab_size: 4096,
            max_noun_phrases: 4,
            text_feat_dim: 16,
            image_feat_dim: 16,
            joint_dim: 8,
            transformer_layers: 2,
            transformer_hidden: 16,
            attention_heads: 4,
            mlp_hidden: 16,
            batch_size: 8,
            ..Self::default()
        }
    }

    /// Desk-scale configuration for the synthetic benchmark: small widths,
    /// a larger step size and a sharper softmax than the published settings.
    pub fn benchmark() -> Self {
        Self {
            vocab_size: 4096,
            max_noun_phrases: 4,
            text_feat_dim: 64,
            image_feat_dim: 64,
            joint_dim: 32,
            transformer_layers: 2,
            transformer_hidden: 32,
            attention_heads: 4,
            mlp_hidden: 64,
            dropout: 0.1,
            learning_rate: 1e-3,
            batch_size: 32,
            temperature: 0.1,
            ..Self::default()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        let report = validate_config(&Config::default());
        assert!(report.is_valid(), "{report}");
    }

    #[test]
    fn defaults_match_published_settings() {
        let c = Config::default();
        assert_eq!((c.adam_beta1, c.adam_beta2), (0.9, 0.98));
        assert_eq!(c.learning_rate, 1e-4);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.epochs, 20);
        assert_eq!(c.dropout, 0.4);
        assert_eq!(
            (
                c.transformer_layers,
                c.transformer_hidden,
                c.attention_heads
            ),
            (5, 768, 4)
        );
        assert_eq!(c.temperature, 1.0);
    }

    #[test]
    fn indivisible_heads_reported() {
        let c = Config {
            attention_heads: 5,
            ..Config::default()
        };
        let report = validate_config(&c);
        assert_eq!(report.violations.len(), 1);
        assert!(report.violations[0]
            .message
            .contains("hidden not divisible by heads"));
    }

    #[test]
    fn zero_joint_dim_reported() {
        let c = Config {
            joint_dim: 0,
            ..Config::default()
        };
        let report = validate_config(&c);
        assert!(report.violations.iter().any(|v| v.field == "joint_dim"));
    }

    #[test]
    fn partial_json_fills_defaults() {
        let c: Config = serde_json::from_str(r#"{"joint_dim": 32, "seed": 9}"#).unwrap();
        assert_eq!(c.joint_dim, 32);
        assert_eq!(c.seed, 9);
        assert_eq!(c.transformer_layers, 5);
    }

    #[test]
    fn digest_tracks_content() {
        let a = Config::default();
        let b = Config {
            seed: 1,
            ..Config::default()
        };
        assert_eq!(a.digest(), Config::default().digest());
        assert_ne!(a.digest(), b.digest());
    }
}
