//! Run configuration: TOML file, environment overrides, then flags.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use fairproto_core::backend::remote::RemoteConfig;
use fairproto_core::pipeline::{PrototypeMode, TextPolicy};
use fairproto_core::{AxisId, Taxonomy};
use serde::{Deserialize, Serialize};

pub const ENV_ENDPOINT: &str = "FAIRPROTO_ENDPOINT";
pub const ENV_CACHE_DIR: &str = "FAIRPROTO_CACHE_DIR";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum BackendConfig {
    /// Seeded synthetic geometry; the file holds a full geometry or a
    /// `GeometrySpec` to realize.
    Synthetic { geometry: PathBuf },
    /// Precomputed embeddings; no generation.
    Store { dir: PathBuf },
    Remote(RemoteConfig),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub dataset_name: Option<String>,
    #[serde(default = "default_target")]
    pub target_axis: String,
    /// Defaults to every registered strategy for the target.
    #[serde(default)]
    pub augment_axes: Option<Vec<String>>,
    #[serde(default = "default_methods")]
    pub methods: Vec<PrototypeMode>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub text_policy: TextPolicy,
    #[serde(default)]
    pub taxonomy: Option<PathBuf>,
    /// Written into report metadata verbatim when set.
    #[serde(default)]
    pub timestamp: Option<String>,
    #[serde(default)]
    pub backend: Option<BackendConfig>,
}

fn default_target() -> String {
    "profession".into()
}

fn default_methods() -> Vec<PrototypeMode> {
    PrototypeMode::ALL.to_vec()
}

fn default_output() -> PathBuf {
    PathBuf::from("out")
}

impl Default for RunConfig {
    fn default() -> Self {
        toml::from_str("").expect("defaults")
    }
}

/// Flags mirroring [`RunConfig`]; any flag given wins over file and env.
#[derive(Debug, Clone, Default, Args)]
pub struct RunFlags {
    /// TOML run configuration
    #[arg(long, short)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    #[arg(long)]
    pub target_axis: Option<String>,
    /// Comma-separated augmenting axes
    #[arg(long, value_delimiter = ',')]
    pub augment_axes: Option<Vec<String>>,
    /// Comma-separated methods: clip_baseline, standard_d3g, average_image_d3g
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<String>>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub cache_dir: Option<PathBuf>,
    /// Disable the embedding cache even if configured
    #[arg(long)]
    pub no_cache: bool,
    #[arg(long)]
    pub output_dir: Option<PathBuf>,
    /// plain-prompt or averaged-prompts
    #[arg(long)]
    pub text_policy: Option<String>,
    #[arg(long)]
    pub taxonomy: Option<PathBuf>,
    /// Remote service base URL (selects the remote backend)
    #[arg(long)]
    pub endpoint: Option<String>,
    #[arg(long)]
    pub timestamp: Option<String>,
}

/// A fully merged configuration with paths made absolute and axes checked.
#[derive(Debug, Clone)]
pub struct Resolved {
    pub config: RunConfig,
    pub taxonomy: Taxonomy,
    pub target_axis: AxisId,
    pub augment_axes: Vec<AxisId>,
}

fn resolve_path(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config `{}`", path.display()))?;
        let mut cfg: RunConfig =
            toml::from_str(&text).with_context(|| format!("parsing config `{}`", path.display()))?;
        let base = path
            .parent()
            .map(Path::to_path_buf)
            .unwrap_or_else(|| PathBuf::from("."));
        cfg.rebase(&base);
        Ok(cfg)
    }

    fn rebase(&mut self, base: &Path) {
        for p in [&mut self.manifest, &mut self.cache_dir, &mut self.taxonomy]
            .into_iter()
            .flatten()
        {
            *p = resolve_path(base, p);
        }
        self.output_dir = resolve_path(base, &self.output_dir);
        match &mut self.backend {
            Some(BackendConfig::Synthetic { geometry }) => *geometry = resolve_path(base, geometry),
            Some(BackendConfig::Store { dir }) => *dir = resolve_path(base, dir),
            _ => {}
        }
    }

    /// Layers environment values under explicit flags.
    pub fn apply_env(&mut self, endpoint: Option<String>, cache_dir: Option<String>) {
        if let Some(ep) = endpoint.filter(|s| !s.is_empty()) {
            self.set_endpoint(ep);
        }
        if let Some(dir) = cache_dir.filter(|s| !s.is_empty()) {
            self.cache_dir = Some(PathBuf::from(dir));
        }
    }

    fn set_endpoint(&mut self, endpoint: String) {
        // Only a remote (or absent) backend takes an endpoint. A bare endpoint
        // still needs `backend.dim`, which `resolve` checks.
        match &mut self.backend {
            Some(BackendConfig::Remote(r)) => r.endpoint = endpoint,
            None => self.backend = Some(BackendConfig::Remote(RemoteConfig::new("remote", endpoint, 0))),
            Some(_) => log::warn!("ignoring endpoint override for a non-remote backend"),
        }
    }

    pub fn apply_flags(&mut self, f: &RunFlags) -> Result<()> {
        if let Some(v) = &f.manifest {
            self.manifest = Some(v.clone());
        }
        if let Some(v) = &f.target_axis {
            self.target_axis = v.clone();
        }
        if let Some(v) = &f.augment_axes {
            self.augment_axes = Some(v.clone());
        }
        if let Some(v) = &f.methods {
            self.methods = v
                .iter()
                .map(|m| m.parse::<PrototypeMode>())
                .collect::<Result<_, _>>()
                .context("field `methods`")?;
        }
        if let Some(v) = f.seed {
            self.seed = v;
        }
        if let Some(v) = &f.cache_dir {
            self.cache_dir = Some(v.clone());
        }
        if f.no_cache {
            self.cache_dir = None;
        }
        if let Some(v) = &f.output_dir {
            self.output_dir = v.clone();
        }
        if let Some(v) = &f.text_policy {
            self.text_policy = v.parse().context("field `text_policy`")?;
        }
        if let Some(v) = &f.taxonomy {
            self.taxonomy = Some(v.clone());
        }
        if let Some(v) = &f.endpoint {
            self.set_endpoint(v.clone());
        }
        if let Some(v) = &f.timestamp {
            self.timestamp = Some(v.clone());
        }
        Ok(())
    }

    /// Checks axes, methods and referenced paths.
    pub fn resolve(self) -> Result<Resolved> {
        let taxonomy = match &self.taxonomy {
            Some(p) => Taxonomy::load(p).with_context(|| format!("field `taxonomy` ({})", p.display()))?,
            None => Taxonomy::default(),
        };
        let target_axis = AxisId::new(self.target_axis.clone());
        taxonomy.axis(&target_axis).context("field `target_axis`")?;
        let augment_axes = match &self.augment_axes {
            Some(list) => {
                let axes: Vec<AxisId> = list.iter().map(|a| AxisId::new(a.as_str())).collect();
                for a in &axes {
                    taxonomy.axis(a).context("field `augment_axes`")?;
                    taxonomy
                        .template(&target_axis, a)
                        .context("field `augment_axes`")?;
                }
                axes
            }
            None => taxonomy.strategies(&target_axis),
        };
        if augment_axes.is_empty() {
            bail!("field `augment_axes`: no strategies for `{target_axis}`");
        }
        if self.methods.is_empty() {
            bail!("field `methods`: at least one method is required");
        }
        if let Some(m) = &self.manifest {
            if !m.is_file() {
                bail!("field `manifest`: `{}` does not exist", m.display());
            }
        }
        match &self.backend {
            Some(BackendConfig::Synthetic { geometry }) if !geometry.is_file() => {
                bail!("field `backend.geometry`: `{}` does not exist", geometry.display())
            }
            Some(BackendConfig::Store { dir }) if !dir.is_dir() => {
                bail!("field `backend.dir`: `{}` does not exist", dir.display())
            }
            Some(BackendConfig::Remote(r)) if r.dim == 0 => {
                bail!("field `backend.dim`: the remote backend needs its embedding dimension")
            }
            _ => {}
        }
        Ok(Resolved {
            config: self,
            taxonomy,
            target_axis,
            augment_axes,
        })
    }
}

impl RunFlags {
    /// File, then environment, then flags.
    pub fn load(&self) -> Result<Resolved> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        cfg.apply_env(
            std::env::var(ENV_ENDPOINT).ok(),
            std::env::var(ENV_CACHE_DIR).ok(),
        );
        cfg.apply_flags(self)?;
        cfg.resolve()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!(c.target_axis, "profession");
        assert_eq!(c.methods.len(), 3);
        assert_eq!(c.text_policy, TextPolicy::AveragedPrompts);
        let r = c.resolve().unwrap();
        assert_eq!(r.augment_axes.len(), 5);
    }

    #[test]
    fn precedence_file_env_flag() {
        let mut c: RunConfig = toml::from_str(
            "seed = 3\ncache_dir = \"/a\"\n[backend]\nkind = \"remote\"\nid = \"svc\"\nendpoint = \"http://file\"\ndim = 8\n",
        )
        .unwrap();
        c.apply_env(Some("http://env".into()), Some("/b".into()));
        assert_eq!(c.cache_dir.as_deref(), Some(Path::new("/b")));
        let flags = RunFlags {
            seed: Some(9),
            endpoint: Some("http://flag".into()),
            ..Default::default()
        };
        c.apply_flags(&flags).unwrap();
        assert_eq!(c.seed, 9);
        match c.backend {
            Some(BackendConfig::Remote(r)) => {
                assert_eq!(r.endpoint, "http://flag");
                assert_eq!(r.dim, 8);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_axis_names_field() {
        let c = RunConfig {
            target_axis: "religion".into(),
            ..Default::default()
        };
        let err = format!("{:#}", c.resolve().unwrap_err());
        assert!(err.contains("target_axis"), "{err}");
        let c = RunConfig {
            augment_axes: Some(vec!["hair".into()]),
            ..Default::default()
        };
        let err = format!("{:#}", c.resolve().unwrap_err());
        assert!(err.contains("augment_axes"), "{err}");
    }

    #[test]
    fn unregistered_pair_rejected() {
        let c = RunConfig {
            target_axis: "race7".into(),
            augment_axes: Some(vec!["race4".into()]),
            ..Default::default()
        };
        assert!(c.resolve().is_err());
    }
}
