//! Subcommand implementations. Each returns data for the caller to print so
//! tests can drive them without a subprocess.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use fairproto_core::backend::remote::RemoteBackend;
use fairproto_core::backend::store::{import_lines, FileStore};
use fairproto_core::backend::synthetic::{GeometrySpec, SyntheticBackend, SyntheticConfig};
use fairproto_core::cache::Cache;
use fairproto_core::dataset::{ingest, DatasetManifest};
use fairproto_core::pipeline::{build_all_parts, embed_queries, run_with_parts, BuildOptions, PrototypeParts};
use fairproto_core::report::{
    parse_jsonl, render_report, EvaluationReport, ReportFormat, ReportMetadata, WEIGHT_SELECTION_NOTE,
};
use fairproto_core::{AxisId, Backends, CallCounter, PrototypeMode, Taxonomy};
use serde::Serialize;

use crate::config::{BackendConfig, Resolved};

/// Reads a synthetic geometry file holding either explicit class geometry or
/// a spec to realize.
pub fn load_geometry(path: &Path) -> Result<SyntheticConfig> {
    let text = fs::read_to_string(path).with_context(|| format!("reading geometry `{}`", path.display()))?;
    match SyntheticConfig::from_toml_str(&text) {
        Ok(cfg) => Ok(cfg),
        Err(explicit) => {
            let spec: GeometrySpec = toml::from_str(&text).map_err(|_| explicit).with_context(|| {
                format!("parsing geometry `{}`", path.display())
            })?;
            Ok(spec.realize()?)
        }
    }
}

/// Providers for a run, wrapped with a call counter and, when configured,
/// the cache (hits never reach the counter).
pub struct OpenBackends {
    pub backends: Backends,
    pub counter: CallCounter,
}

pub fn open_backends(r: &Resolved, manifest: Option<&DatasetManifest>) -> Result<OpenBackends> {
    let raw = match &r.config.backend {
        None => bail!("field `backend`: no backend configured"),
        Some(BackendConfig::Synthetic { geometry }) => {
            let b = Arc::new(SyntheticBackend::new(load_geometry(geometry)?).context("synthetic backend")?);
            if let Some(m) = manifest {
                b.register_dataset(m);
            }
            Backends::from_full(b)
        }
        Some(BackendConfig::Store { dir }) => Backends::embed_only(Arc::new(
            FileStore::open(dir).with_context(|| format!("opening store `{}`", dir.display()))?,
        )),
        Some(BackendConfig::Remote(cfg)) => {
            Backends::from_full(Arc::new(RemoteBackend::new(cfg.clone()).context("remote backend")?))
        }
    };
    let counter = CallCounter::default();
    let mut backends = raw.counted(counter.clone());
    if let Some(dir) = &r.config.cache_dir {
        let cache = Cache::open(dir).with_context(|| format!("opening cache `{}`", dir.display()))?;
        backends = backends.cached(Arc::new(cache));
    }
    Ok(OpenBackends { backends, counter })
}

fn needs_generation(r: &Resolved) -> bool {
    r.config.methods.iter().any(|m| m.uses_images())
}

fn fail_fast(r: &Resolved, b: &Backends) -> Result<()> {
    if needs_generation(r) {
        b.generator().context("configured methods need image generation")?;
    }
    Ok(())
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating `{}`", parent.display()))?;
    }
    fs::write(path, bytes).with_context(|| format!("writing `{}`", path.display()))
}

pub const PROMPTS_FILE: &str = "prompts.tsv";

/// Renders every prompt for the target under each augmenting axis.
pub fn render_prompt_listing(taxonomy: &Taxonomy, target: &AxisId, augments: &[AxisId]) -> Result<(String, usize)> {
    let mut out = String::from("#template\ttarget\taugment\ttext\n");
    let mut n = 0;
    for augment in augments {
        for cv in taxonomy.axis(target)?.class_values() {
            for p in taxonomy.render_prompts(&cv, augment)? {
                let aug = p.augment_value.as_ref().map(|a| a.label.as_str()).unwrap_or("");
                let _ = writeln!(out, "{}\t{}\t{}\t{}", p.template_id, p.target_value.label, aug, p.text);
                n += 1;
            }
        }
    }
    Ok((out, n))
}

pub struct PromptsOutcome {
    pub path: PathBuf,
    pub count: usize,
}

pub fn cmd_prompts(r: &Resolved) -> Result<PromptsOutcome> {
    let (text, count) = render_prompt_listing(&r.taxonomy, &r.target_axis, &r.augment_axes)?;
    let path = r.config.output_dir.join(PROMPTS_FILE);
    write_file(&path, text.as_bytes())?;
    Ok(PromptsOutcome { path, count })
}

#[derive(Serialize)]
struct ArchiveRecord<'a> {
    method: PrototypeMode,
    augment_axis: &'a AxisId,
    seed: u64,
    #[serde(flatten)]
    parts: &'a PrototypeParts,
}

pub const PROTOTYPES_FILE: &str = "prototypes.jsonl";

pub struct BuildOutcome {
    pub path: PathBuf,
    pub prototypes: usize,
    pub backend_calls: u64,
}

fn options(r: &Resolved, mode: PrototypeMode) -> BuildOptions {
    let mut opts = BuildOptions::new(mode, r.config.seed);
    opts.text_policy = r.config.text_policy;
    opts
}

fn build_grid(r: &Resolved, b: &Backends) -> Result<Vec<(PrototypeMode, AxisId, Vec<PrototypeParts>)>> {
    let mut out = Vec::new();
    for &mode in &r.config.methods {
        for augment in &r.augment_axes {
            let parts = build_all_parts(&r.taxonomy, &r.target_axis, augment, &options(r, mode), b)
                .with_context(|| format!("building {mode} prototypes for strategy `{augment}`"))?;
            out.push((mode, augment.clone(), parts));
        }
    }
    Ok(out)
}

/// Builds every (method, strategy) prototype set and archives the unfused
/// parts with provenance.
pub fn cmd_build(r: &Resolved) -> Result<BuildOutcome> {
    let ob = open_backends(r, None)?;
    fail_fast(r, &ob.backends)?;
    let grid = build_grid(r, &ob.backends)?;
    let mut text = String::new();
    let mut n = 0;
    for (mode, augment, parts) in &grid {
        for p in parts {
            text.push_str(&serde_json::to_string(&ArchiveRecord {
                method: *mode,
                augment_axis: augment,
                seed: r.config.seed,
                parts: p,
            })?);
            text.push('\n');
            n += 1;
        }
    }
    let path = r.config.output_dir.join(PROTOTYPES_FILE);
    write_file(&path, text.as_bytes())?;
    Ok(BuildOutcome {
        path,
        prototypes: n,
        backend_calls: ob.counter.get(),
    })
}

pub struct EvaluateOutcome {
    pub report: EvaluationReport,
    pub files: Vec<PathBuf>,
    pub backend_calls: u64,
}

/// Full grid evaluation. Writes `report.txt`, `report.csv` and `report.jsonl`
/// into the output directory.
pub fn cmd_evaluate(r: &Resolved) -> Result<EvaluateOutcome> {
    let Some(manifest_path) = &r.config.manifest else {
        bail!("field `manifest`: evaluate needs a dataset manifest");
    };
    let manifest = ingest(manifest_path, &r.taxonomy)
        .with_context(|| format!("loading manifest `{}`", manifest_path.display()))?;
    let ob = open_backends(r, Some(&manifest))?;
    fail_fast(r, &ob.backends)?;
    let b = &ob.backends;

    let queries = embed_queries(&manifest, &r.target_axis, b).context("embedding dataset images")?;
    let truths: Vec<_> = queries.iter().map(|q| q.truth.clone()).collect();

    let mut report = EvaluationReport::new(ReportMetadata {
        dataset: r.config.dataset_name.clone().unwrap_or_else(|| manifest.name.clone()),
        target_axis: r.target_axis.clone(),
        text_policy: r.config.text_policy,
        seed: r.config.seed,
        backends: b.descriptors(),
        timestamp: r.config.timestamp.clone(),
        columns: r.augment_axes.clone(),
        weight_selection: WEIGHT_SELECTION_NOTE.into(),
    });
    for (mode, augment, parts) in build_grid(r, b)? {
        let run = run_with_parts(&queries, &r.target_axis, &augment, mode, &parts)
            .with_context(|| format!("evaluating {mode} with strategy `{augment}`"))?;
        report.push_run(&run, &truths, &r.taxonomy)?;
    }

    let mut files = Vec::new();
    for format in ReportFormat::ALL {
        let path = r.config.output_dir.join(format!("report.{}", format.extension()));
        write_file(&path, &render_report(&report, format)?)?;
        files.push(path);
    }
    Ok(EvaluateOutcome {
        report,
        files,
        backend_calls: ob.counter.get(),
    })
}

/// Re-renders a JSON-lines report in another format.
pub fn cmd_report(input: &Path, format: ReportFormat) -> Result<Vec<u8>> {
    let text = fs::read_to_string(input).with_context(|| format!("reading report `{}`", input.display()))?;
    let report = parse_jsonl(&text).with_context(|| format!("parsing report `{}`", input.display()))?;
    Ok(render_report(&report, format)?)
}

/// One line per (backend, version, kind) with its record count.
pub fn cmd_cache_inspect(dir: &Path) -> Result<String> {
    let cache = Cache::open(dir)?;
    let mut counts: std::collections::BTreeMap<(String, String, String), usize> = Default::default();
    for e in cache.entries()? {
        *counts
            .entry((e.key.backend.clone(), e.key.version.clone(), e.kind.clone()))
            .or_default() += 1;
    }
    let mut out = format!("cache: {}\n", dir.display());
    if counts.is_empty() {
        out.push_str("empty\n");
    }
    for ((backend, version, kind), n) in counts {
        let _ = writeln!(out, "{backend}\t{version}\t{kind}\t{n}");
    }
    Ok(out)
}

pub fn cmd_cache_purge(dir: &Path, backend: Option<&str>) -> Result<usize> {
    Ok(Cache::open(dir)?.purge(backend)?)
}

pub struct FixtureOptions {
    pub per_class: usize,
    pub seed: u64,
    pub bias: f64,
    pub sigma: f64,
}

impl Default for FixtureOptions {
    fn default() -> Self {
        Self {
            per_class: 100,
            seed: 7,
            bias: 0.4,
            sigma: 0.1,
        }
    }
}

/// The geometry used by the bundled biased scenario: ten professions whose
/// text embeddings lean toward one race4 subgroup.
pub fn bias_geometry(opts: &FixtureOptions) -> GeometrySpec {
    let taxonomy = Taxonomy::default();
    GeometrySpec {
        id: "synthetic".into(),
        dim: 16,
        seed: opts.seed,
        sigma: opts.sigma,
        bias: opts.bias,
        majority: "White".into(),
        target_axis: "profession".into(),
        subgroup_axis: "race4".into(),
        classes: taxonomy.axis(&"profession".into()).expect("profession axis").values.clone(),
        subgroups: taxonomy.axis(&"race4".into()).expect("race4 axis").values.clone(),
        class_similarity: 0.8,
        offset_scale: 0.8,
    }
}

/// Writes `geometry.toml`, `manifest.tsv` and `config.toml` for a runnable
/// synthetic scenario.
pub fn cmd_fixture(out: &Path, opts: &FixtureOptions) -> Result<Vec<PathBuf>> {
    let spec = bias_geometry(opts);
    let taxonomy = Taxonomy::default();
    let backend = SyntheticBackend::new(spec.realize()?)?;
    let n = backend.config().subgroups.len();
    let manifest = backend.sample_dataset(&taxonomy, "synthetic", opts.per_class, &vec![1.0; n])?;

    let geometry = out.join("geometry.toml");
    write_file(&geometry, toml::to_string(&spec)?.as_bytes())?;
    let manifest_path = out.join("manifest.tsv");
    write_file(&manifest_path, manifest.to_manifest_string(&taxonomy).as_bytes())?;
    let config = out.join("config.toml");
    let cfg = format!(
        "manifest = \"manifest.tsv\"\n\
         target_axis = \"profession\"\n\
         augment_axes = [\"profession\", \"race4\"]\n\
         seed = {}\n\
         cache_dir = \"cache\"\n\
         output_dir = \"out\"\n\n\
         [backend]\n\
         kind = \"synthetic\"\n\
         geometry = \"geometry.toml\"\n",
        opts.seed
    );
    write_file(&config, cfg.as_bytes())?;
    Ok(vec![geometry, manifest_path, config])
}

pub fn cmd_import_store(input: &Path, out: &Path, id: &str, version: &str) -> Result<usize> {
    let text = fs::read_to_string(input).with_context(|| format!("reading `{}`", input.display()))?;
    import_lines(&text, out, id, version).with_context(|| format!("importing `{}`", input.display()))
}
