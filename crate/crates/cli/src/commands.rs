use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::Ordering;
use std::time::Duration;

use anyhow::{anyhow, bail, Context as _, Result};
use maplabel::baselines::{place_anchor, place_annealed, place_centroid, Anchor};
use maplabel::eval::{comparison_table, report, split, EvalReport};
use maplabel::groundtruth::{coverage, derive_dataset_labels};
use maplabel::guidelines::{parse_sections, Embedder, GuidelineStore, HashingEmbedder, HttpEmbedder, Retriever};
use maplabel::ingest::{build_map_record, load_dataset, save_dataset, write_ground_truth, GeoBBox, OverpassClient, MANIFEST_FILE};
use maplabel::llm::{place_batch, HttpChatClient, LlmPlacement};
use maplabel::prompting::TEMPLATE_VERSION;
use maplabel::render::render_svg;
use maplabel::{Dataset, GroundTruthLabel, PlacementMethod, PlacementResult};
use serde_json::json;

use crate::config::{Config, EmbedderBackend, ENV_EMBEDDING_API_KEY, ENV_LLM_API_KEY};
use crate::manifest::{hash_dataset, hash_file, ErrorRecord, RunManifest, RunStatus};
use crate::{error_kind, Cancelled, Context, EvalArgs, ExportArgs, GroundTruthArgs, IndexArgs, IngestArgs, PlaceArgs, RenderArgs, SplitName, UsageError};

/// A started run: the manifest is on disk before any result is written and is
/// rewritten with the outcome when the run ends.
struct Run {
    manifest: RunManifest,
    path: PathBuf,
}

impl Run {
    fn new(ctx: &Context, command: &str, default_path: PathBuf) -> Self {
        Self {
            manifest: RunManifest::new(command, ctx.args.clone(), ctx.config.clone()),
            path: ctx.manifest_override.clone().unwrap_or(default_path),
        }
    }

    fn begin(&self) -> Result<()> {
        self.manifest.write(&self.path)
    }

    fn output(&mut self, path: &Path) {
        self.manifest.outputs.push(path.to_path_buf());
    }

    fn finish(mut self, result: Result<()>) -> Result<()> {
        let status = match &result {
            Ok(()) => RunStatus::Ok,
            Err(e) => {
                self.manifest.errors.push(ErrorRecord {
                    kind: error_kind(e).to_string(),
                    message: format!("{e:#}"),
                });
                if e.is::<Cancelled>() {
                    RunStatus::Cancelled
                } else {
                    RunStatus::Error
                }
            }
        };
        self.manifest.finish(status);
        match (self.manifest.write(&self.path), result) {
            (Ok(()), r) => r,
            (Err(w), Ok(())) => Err(w),
            (Err(w), Err(e)) => {
                log::error!("{w:#}");
                Err(e)
            }
        }
    }
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    Ok(())
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

pub fn read_results(path: &Path) -> Result<Vec<PlacementResult>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading results {}", path.display()))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).with_context(|| format!("{}: line {}", path.display(), i + 1)))
        .collect()
}

/// One JSON object per line, sorted by landmark id so reruns are identical.
pub fn write_results(path: &Path, results: &[PlacementResult]) -> Result<()> {
    let mut sorted: Vec<&PlacementResult> = results.iter().collect();
    sorted.sort_by(|a, b| a.landmark_id.cmp(&b.landmark_id));
    let mut text = String::new();
    for r in sorted {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(path, &text)
}

fn load(dataset: &Path) -> Result<Dataset> {
    load_dataset(dataset).with_context(|| format!("loading dataset {}", dataset.display()))
}

/// Landmark ids in the named split, or `None` for every landmark.
fn selection(ds: &Dataset, cfg: &Config, name: SplitName, run: &mut Run) -> Result<Option<BTreeSet<String>>> {
    if name == SplitName::All {
        return Ok(None);
    }
    run.manifest.seeds.insert("split".into(), cfg.split.seed);
    let s = split(ds, &cfg.split)?;
    Ok(s.get(name.as_str()).cloned())
}

fn api_key(var: &str) -> Option<String> {
    std::env::var(var).ok().filter(|k| !k.is_empty())
}

/// The embedder that built `store_id`, or the configured one when building.
fn embedder(cfg: &Config, store_id: Option<&str>) -> Result<Box<dyn Embedder>> {
    if let Some(dim) = store_id.and_then(|id| id.strip_prefix("hashing-")).and_then(|d| d.parse().ok()) {
        return Ok(Box::new(HashingEmbedder::new(dim)));
    }
    let e = &cfg.embedding;
    Ok(match e.backend {
        EmbedderBackend::Hashing if store_id.is_none() => Box::new(HashingEmbedder::new(e.hashing_dim)),
        _ => Box::new(HttpEmbedder::new(
            e.endpoint.clone(),
            e.model.clone(),
            api_key(ENV_EMBEDDING_API_KEY),
            Duration::from_secs_f64(e.timeout_secs),
            e.batch_size,
        )?),
    })
}

fn load_store(path: &Path, run: &mut Run) -> Result<GuidelineStore> {
    let store = GuidelineStore::load(path, None).with_context(|| format!("loading guideline index {}", path.display()))?;
    run.manifest.store_hash = Some(hash_file(path)?);
    Ok(store)
}

pub fn ingest(ctx: &Context, a: &IngestArgs) -> Result<()> {
    let cfg = &ctx.config.ingest;
    let region = GeoBBox::parse(&a.bbox)?;
    if a.width == 0 || a.height == 0 {
        bail!(UsageError("--width and --height must be positive".into()));
    }
    let mut ds = if a.out.join(MANIFEST_FILE).exists() {
        load(&a.out)?
    } else {
        Dataset {
            name: a.name.clone().unwrap_or_else(|| dir_name(&a.out)),
            ..Dataset::default()
        }
    };
    let client = OverpassClient::new(
        cfg.endpoint.clone(),
        Duration::from_secs_f64(cfg.timeout_secs),
        Duration::from_millis(cfg.min_interval_ms),
    )?;

    let mut run = Run::new(ctx, "ingest", a.out.join("ingest.manifest.json"));
    if a.out.join(MANIFEST_FILE).exists() {
        run.manifest.dataset_hash = Some(hash_dataset(&a.out)?);
    }
    run.begin()?;
    let result = (|| -> Result<()> {
        let features = client.fetch_landmarks(&region)?;
        let map = build_map_record(&a.map_id, &a.city, &region, a.width, a.height, &features)?;
        let n = map.landmarks.len();
        let kept: HashSet<String> = map.landmarks.iter().map(|l| l.id.clone()).collect();
        let before: HashSet<String> = ds.map(&a.map_id).map(|m| m.landmarks.iter().map(|l| l.id.clone()).collect()).unwrap_or_default();
        ds.labels.retain(|l| !before.contains(&l.landmark_id) || kept.contains(&l.landmark_id));
        ds.maps.retain(|m| m.id != a.map_id);
        ds.maps.push(map);
        if !ds.cities.contains(&a.city) {
            ds.cities.push(a.city.clone());
        }
        save_dataset(&ds, &a.out)?;
        run.output(&a.out);
        run.manifest.summary = Some(json!({ "map_id": a.map_id, "features": features.len(), "landmarks": n }));
        println!("{}: {n} landmarks from {} features", a.map_id, features.len());
        Ok(())
    })();
    run.finish(result)
}

fn dir_name(p: &Path) -> String {
    p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "dataset".into())
}

pub fn ground_truth(ctx: &Context, a: &GroundTruthArgs) -> Result<()> {
    let mut ds = load(&a.dataset)?;
    let report_path = a.report.clone().unwrap_or_else(|| a.dataset.join("coverage.json"));
    let mut run = Run::new(ctx, "ground-truth", a.dataset.join("ground_truth.manifest.json"));
    run.manifest.dataset_hash = Some(hash_dataset(&a.dataset)?);
    run.begin()?;
    let result = (|| -> Result<()> {
        ds.labels = derive_dataset_labels(&ds, &ctx.config.groundtruth);
        for map in &ds.maps {
            let labels: Vec<&GroundTruthLabel> = ds.labels.iter().filter(|l| map.landmark(&l.landmark_id).is_some()).collect();
            write_ground_truth(&a.dataset, &map.id, &labels)?;
        }
        run.output(&a.dataset);
        let cov = coverage(&ds)?;
        write_json(&report_path, &cov)?;
        run.output(&report_path);
        run.manifest.summary = Some(serde_json::to_value(&cov)?);
        print!("{}", cov.to_table());
        Ok(())
    })();
    run.finish(result)
}

pub fn index(ctx: &Context, a: &IndexArgs) -> Result<()> {
    let doc = fs::read_to_string(&a.guidelines).with_context(|| format!("reading {}", a.guidelines.display()))?;
    let parsed = parse_sections(&doc);
    for w in &parsed.warnings {
        log::warn!("{}: {w}", a.guidelines.display());
    }
    if parsed.sections.is_empty() {
        bail!("{}: no guideline sections found", a.guidelines.display());
    }
    let emb = embedder(&ctx.config, None)?;
    let mut run = Run::new(ctx, "index", with_suffix(&a.out, ".manifest.json"));
    run.manifest.model_id = Some(emb.id());
    run.begin()?;
    let result = (|| -> Result<()> {
        let store = GuidelineStore::build(parsed.sections, emb.as_ref())?;
        ensure_parent(&a.out)?;
        store.save(&a.out)?;
        run.output(&a.out);
        run.manifest.store_hash = Some(hash_file(&a.out)?);
        run.manifest.summary = Some(json!({ "sections": store.sections.len(), "warnings": parsed.warnings }));
        println!("{} sections indexed with {}", store.sections.len(), store.embedder_id);
        Ok(())
    })();
    run.finish(result)
}

pub fn place(ctx: &Context, a: &PlaceArgs) -> Result<()> {
    let cfg = &ctx.config;
    let ds = load(&a.dataset)?;
    if a.method == PlacementMethod::Llm && a.store.is_none() {
        bail!(UsageError("--store is required for --method llm".into()));
    }
    let mut run = Run::new(ctx, "place", with_suffix(&a.out, ".manifest.json"));
    run.manifest.dataset_hash = Some(hash_dataset(&a.dataset)?);
    let selected = selection(&ds, cfg, a.split, &mut run)?;
    let wanted = |id: &str| selected.as_ref().is_none_or(|s| s.contains(id));
    let store = match (&a.store, a.method) {
        (Some(p), PlacementMethod::Llm) => Some(load_store(p, &mut run)?),
        _ => None,
    };
    match a.method {
        PlacementMethod::Llm => {
            run.manifest.model_id = Some(cfg.llm.model_id.clone());
            run.manifest.template_version = Some(TEMPLATE_VERSION.into());
        }
        PlacementMethod::Annealed => {
            run.manifest.seeds.insert("anneal".into(), cfg.anneal.seed);
        }
        _ => {}
    }
    let anchor: Anchor = cfg.anchor.anchor.parse().map_err(|e: String| anyhow!(e))?;
    run.begin()?;

    let result = (|| -> Result<()> {
        let items: Vec<_> = ds
            .maps
            .iter()
            .flat_map(|m| m.landmarks.iter().map(move |l| (m, l)))
            .filter(|(_, l)| wanted(&l.id))
            .collect();
        let mut cancelled = false;
        let results: Vec<PlacementResult> = match a.method {
            PlacementMethod::Centroid => items
                .iter()
                .map(|(_, l)| PlacementResult::placed(&l.id, a.method, place_centroid(l)))
                .collect(),
            PlacementMethod::Anchor => items
                .iter()
                .map(|(_, l)| PlacementResult::placed(&l.id, a.method, place_anchor(l, anchor, cfg.anchor.offset_px)))
                .collect(),
            PlacementMethod::Annealed => {
                let mut out = Vec::new();
                for map in &ds.maps {
                    if !map.landmarks.iter().any(|l| wanted(&l.id)) {
                        continue;
                    }
                    let outcome = place_annealed(map, &cfg.anneal)?;
                    out.extend(
                        outcome
                            .placements
                            .into_iter()
                            .filter(|(id, _)| wanted(id))
                            .map(|(id, p)| PlacementResult::placed(id, a.method, p)),
                    );
                }
                out
            }
            PlacementMethod::Llm => {
                let store = store.as_ref().expect("checked above");
                let emb = embedder(cfg, Some(&store.embedder_id))?;
                let retriever = Retriever::new(store, emb.as_ref(), cfg.retrieval.k, cfg.retrieval.weights())?;
                let client = HttpChatClient::new(cfg.llm.clone(), api_key(ENV_LLM_API_KEY))?;
                let opts = LlmPlacement {
                    retriever: &retriever,
                    client: &client,
                    cfg: &cfg.llm,
                    format: a.format,
                    neighbor_threshold: a.neighbors.then_some(cfg.prompt.neighbor_threshold_px),
                };
                let done = place_batch(&items, &opts, &ctx.cancel);
                cancelled = ctx.cancel.load(Ordering::SeqCst) && done.len() < items.len();
                done.into_values().collect()
            }
        };
        write_results(&a.out, &results)?;
        run.output(&a.out);

        let mut failures: BTreeMap<String, usize> = BTreeMap::new();
        for r in results.iter().filter_map(|r| r.error.as_ref()) {
            *failures.entry(r.kind.clone()).or_default() += 1;
        }
        let n_failed: usize = failures.values().sum();
        run.manifest.summary = Some(json!({
            "method": a.method,
            "format": (a.method == PlacementMethod::Llm).then_some(a.format),
            "neighbors": a.neighbors,
            "split": a.split.as_str(),
            "requested": items.len(),
            "placed": results.len() - n_failed,
            "failed": n_failed,
            "failures_by_kind": failures,
        }));
        println!("{}: {} placed, {} failed, {} requested", a.out.display(), results.len() - n_failed, n_failed, items.len());
        if cancelled {
            return Err(anyhow::Error::new(Cancelled).context(format!("{} of {} landmarks placed", results.len(), items.len())));
        }
        if !results.is_empty() && n_failed == results.len() {
            bail!("all {n_failed} placements failed");
        }
        Ok(())
    })();
    run.finish(result)
}

fn run_labels(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default())
        .collect();
    let unique: HashSet<&String> = stems.iter().collect();
    if unique.len() == stems.len() {
        stems
    } else {
        paths.iter().map(|p| p.display().to_string()).collect()
    }
}

pub fn eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    if a.csv.is_some() && a.results.len() > 1 {
        bail!(UsageError("--csv takes a single results file".into()));
    }
    let ds = load(&a.dataset)?;
    let runs: Vec<(PathBuf, Vec<PlacementResult>)> =
        a.results.iter().map(|p| Ok((p.clone(), read_results(p)?))).collect::<Result<_>>()?;
    let default_manifest = match &a.json {
        Some(j) => with_suffix(j, ".manifest.json"),
        None => with_suffix(&a.results[0], ".eval.manifest.json"),
    };
    let mut run = Run::new(ctx, "eval", default_manifest);
    run.manifest.dataset_hash = Some(hash_dataset(&a.dataset)?);
    let selected = selection(&ds, &ctx.config, a.split, &mut run)?;
    run.begin()?;

    let result = (|| -> Result<()> {
        let labels = run_labels(&a.results);
        let mut reports: Vec<(String, EvalReport)> = Vec::new();
        for ((path, results), label) in runs.iter().zip(labels) {
            let r = report(&ds, results, selected.as_ref()).with_context(|| format!("scoring {}", path.display()))?;
            reports.push((label, r));
        }
        if reports.len() == 1 {
            print!("{}", reports[0].1.to_table());
        } else {
            print!("{}", comparison_table(&reports));
        }
        let entries: Vec<_> = reports
            .iter()
            .zip(&a.results)
            .map(|((label, r), path)| json!({ "label": label, "results": path, "report": r }))
            .collect();
        if let Some(path) = &a.json {
            if reports.len() == 1 {
                write_json(path, &reports[0].1)?;
            } else {
                write_json(path, &json!({ "split": a.split.as_str(), "runs": entries }))?;
            }
            run.output(path);
        }
        if let Some(path) = &a.csv {
            write_text(path, &reports[0].1.to_csv())?;
            run.output(path);
        }
        run.manifest.summary = Some(json!({ "split": a.split.as_str(), "runs": entries }));
        Ok(())
    })();
    run.finish(result)
}

pub fn export_tuning(ctx: &Context, a: &ExportArgs) -> Result<()> {
    let cfg = &ctx.config;
    let ds = load(&a.dataset)?;
    let mut run = Run::new(ctx, "export-tuning", with_suffix(&a.out, ".manifest.json"));
    run.manifest.dataset_hash = Some(hash_dataset(&a.dataset)?);
    run.manifest.template_version = Some(TEMPLATE_VERSION.into());
    let store = load_store(&a.store, &mut run)?;
    let emb = embedder(cfg, Some(&store.embedder_id))?;
    let retriever = Retriever::new(&store, emb.as_ref(), cfg.retrieval.k, cfg.retrieval.weights())?;
    let ids: HashSet<String> = match selection(&ds, cfg, a.split, &mut run)? {
        Some(s) => s.into_iter().collect(),
        None => ds.landmarks().map(|l| l.id.clone()).collect(),
    };
    run.begin()?;

    let result = (|| -> Result<()> {
        ensure_parent(&a.out)?;
        let file = fs::File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
        let mut out = BufWriter::new(file);
        let rep = maplabel::prompting::export_tuning(
            &ds,
            &ids,
            a.format,
            &retriever,
            a.neighbors.then_some(cfg.prompt.neighbor_threshold_px),
            &mut out,
        )?;
        out.flush()?;
        run.output(&a.out);
        for id in &rep.skipped_missing_ground_truth {
            log::warn!("{id}: no ground truth, skipped");
        }
        run.manifest.summary = Some(json!({ "split": a.split.as_str(), "format": a.format, "export": rep }));
        println!(
            "{}: {} pairs written, {} skipped without ground truth",
            a.out.display(),
            rep.written,
            rep.skipped_missing_ground_truth.len()
        );
        Ok(())
    })();
    run.finish(result)
}

pub fn render(ctx: &Context, a: &RenderArgs) -> Result<()> {
    let ds = load(&a.dataset)?;
    let results = match &a.results {
        Some(p) => read_results(p)?,
        None => Vec::new(),
    };
    let known = ds.landmark_index();
    if let Some(bad) = results.iter().find(|r| !known.contains_key(r.landmark_id.as_str())) {
        bail!("result references unknown landmark `{}`", bad.landmark_id);
    }
    let mut run = Run::new(ctx, "render", a.out_dir.join("render.manifest.json"));
    run.manifest.dataset_hash = Some(hash_dataset(&a.dataset)?);
    run.begin()?;

    let result = (|| -> Result<()> {
        for map in &ds.maps {
            let mine: Vec<PlacementResult> = results.iter().filter(|r| map.landmark(&r.landmark_id).is_some()).cloned().collect();
            let svg = render_svg(map, &ds.labels, &mine, &ctx.config.render);
            let path = a.out_dir.join(format!("{}.svg", map.id));
            write_text(&path, &svg)?;
            run.output(&path);
        }
        println!("{} maps rendered to {}", ds.maps.len(), a.out_dir.display());
        Ok(())
    })();
    run.finish(result)
}
