//! Run configuration: a TOML file with full defaulting, echoed back into every
//! output directory after flags are applied.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use dtm_core::data::SyntheticSpec;
use dtm_core::embed::TsneConfig;
use dtm_core::xai::{Method, OcclusionConfig};
use dtm_core::{Error, NetworkSpec, Result, TrainConfig, Variant};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum MethodChoice {
    Gradcam,
    Occlusion,
    Both,
}

impl MethodChoice {
    pub fn methods(self) -> Vec<Method> {
        match self {
            MethodChoice::Gradcam => vec![Method::Gradcam],
            MethodChoice::Occlusion => vec![Method::Occlusion],
            MethodChoice::Both => vec![Method::Gradcam, Method::Occlusion],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExplainConfig {
    /// Variant whose trained ensemble is explained.
    pub variant: Variant,
    pub method: MethodChoice,
    /// Explain only the first `limit` patients.
    pub limit: Option<usize>,
}

impl Default for ExplainConfig {
    fn default() -> Self {
        ExplainConfig {
            variant: Variant::Ci,
            method: MethodChoice::Gradcam,
            limit: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedConfig {
    pub method: Method,
    pub perplexity: f64,
    pub thumbnail: usize,
    pub tsne: TsneConfig,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        EmbedConfig {
            method: Method::Gradcam,
            perplexity: 30.0,
            thumbnail: 64,
            tsne: TsneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset manifest.
    pub dataset: Option<PathBuf>,
    pub out: PathBuf,
    pub variants: Vec<Variant>,
    pub k: usize,
    /// Ensemble size for image variants.
    pub members: usize,
    /// Ensemble size for SI and SI-LS, whose fits do not depend on the seed.
    pub image_free_members: usize,
    /// Base seed for member seeds, folds, synthesis and t-SNE.
    pub seed: u64,
    /// Explicit member seeds; derived from `seed` when absent.
    pub seeds: Option<Vec<u64>>,
    pub bootstrap: usize,
    /// Refit-bootstrap replicates for SI-LS coefficient intervals.
    pub coefficient_bootstrap: usize,
    pub network: Option<NetworkSpec>,
    pub train: TrainConfig,
    pub occlusion: OcclusionConfig,
    pub synth: SyntheticSpec,
    pub explain: ExplainConfig,
    pub embed: EmbedConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            out: PathBuf::from("run"),
            variants: vec![Variant::Si, Variant::SiLs, Variant::Ci, Variant::CiLs],
            k: 10,
            members: 5,
            image_free_members: 1,
            seed: 1,
            seeds: None,
            bootstrap: 2000,
            coefficient_bootstrap: 200,
            network: None,
            train: TrainConfig::default(),
            occlusion: OcclusionConfig::default(),
            synth: SyntheticSpec::default(),
            explain: ExplainConfig::default(),
            embed: EmbedConfig::default(),
        }
    }
}

/// Flag values that override the file.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub method: Option<MethodChoice>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Config(format!("cannot read config {}: {e}", p.display())))?;
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?
            }
            None => RunConfig::default(),
        };
        if let Some(out) = &overrides.out {
            cfg.out = out.clone();
        }
        if let Some(seed) = overrides.seed {
            cfg.seed = seed;
            cfg.synth.seed = seed;
            cfg.embed.tsne.seed = seed;
        }
        if let Some(m) = overrides.method {
            cfg.explain.method = m;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 2 {
            return Err(Error::Config(format!("k must be at least 2, got {}", self.k)));
        }
        if self.members == 0 || self.image_free_members == 0 {
            return Err(Error::Config("ensembles need at least one member".into()));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("no variants selected".into()));
        }
        if let Some(seeds) = &self.seeds {
            if seeds.len() != self.members {
                return Err(Error::Config(format!(
                    "{} seeds listed for {} members",
                    seeds.len(),
                    self.members
                )));
            }
            if seeds.iter().collect::<BTreeSet<_>>().len() != seeds.len() {
                return Err(Error::Config("member seeds must be distinct".into()));
            }
        }
        if let Some(n) = &self.network {
            n.validate()?;
        }
        self.train.validate()?;
        Ok(())
    }

    /// Member seeds for `variant`.
    pub fn member_seeds(&self, variant: Variant) -> Vec<u64> {
        let m = if variant.uses_image() {
            self.members
        } else {
            self.image_free_members
        };
        match &self.seeds {
            Some(s) if variant.uses_image() => s.clone(),
            _ => (1..=m as u64)
                .map(|i| self.seed.wrapping_mul(1000).wrapping_add(i))
                .collect(),
        }
    }

    /// The dataset manifest, which must exist. Checked here rather than in
    /// [`validate`](Self::validate) because `synth` is what creates it.
    pub fn dataset(&self) -> Result<&Path> {
        let d = self
            .dataset
            .as_deref()
            .ok_or_else(|| Error::Config("no dataset manifest configured (set `dataset` in the config)".into()))?;
        if !d.exists() {
            return Err(Error::Config(format!(
                "dataset manifest {} does not exist",
                d.display()
            )));
        }
        Ok(d)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("run config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back: RunConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_file_is_defaulted() {
        let cfg: RunConfig = toml::from_str("k = 5\n[train]\nepochs = 3\n").unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.train.epochs, 3);
        assert_eq!(cfg.train.batch_size, 16);
        assert_eq!(cfg.members, 5);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("kk = 5").is_err());
    }

    #[test]
    fn duplicate_seeds_rejected() {
        let cfg = RunConfig {
            members: 2,
            seeds: Some(vec![4, 4]),
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn seed_override_reaches_every_stage() {
        let cfg = RunConfig::load(
            None,
            &Overrides {
                seed: Some(9),
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!((cfg.seed, cfg.synth.seed, cfg.embed.tsne.seed), (9, 9, 9));
        assert_eq!(cfg.member_seeds(Variant::Ci), vec![9001, 9002, 9003, 9004, 9005]);
        assert_eq!(cfg.member_seeds(Variant::Si), vec![9001]);
    }
}
