use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context as _, Result};
use serde::Serialize;
use thinkgen_core::backends::{PolicyBackend, ReferencePolicy};
use thinkgen_core::curation::{curate_all, filter_dataset, load_rgb, read_dataset, write_dataset, CurationInput, Provenance};
use thinkgen_core::grpo::{train_rft, train_sft, AlignmentFormatReward, CheckpointMeta, FormatOnlyReward, RewardFn};
use thinkgen_core::jsonl;
use thinkgen_core::metrics::{evaluate_suite, write_report, Metric, References};
use thinkgen_core::selection::{run_inference, InferenceBackends, InferenceRequest};
use thinkgen_core::{ControlMap, ControlType, Error};

use crate::config::{LoadedConfig, ReferenceSource, RewardKind};

pub struct Context {
    pub loaded: LoadedConfig,
    pub seed: u64,
    pub out: PathBuf,
    pub control_type: ControlType,
}

impl Context {
    fn provenance(&self) -> Provenance {
        self.loaded.provenance()
    }

    fn dataset_path(&self) -> PathBuf {
        match &self.loaded.config.paths.dataset {
            Some(p) => self.loaded.resolve(p),
            None => self.out.join("dataset.jsonl"),
        }
    }
}

#[derive(Serialize)]
struct Header<'a> {
    provenance: &'a Provenance,
}

/// JSON-Lines writer whose first line carries the provenance header.
struct LogWriter {
    path: PathBuf,
    inner: BufWriter<File>,
}

impl LogWriter {
    fn create(path: &Path, provenance: &Provenance, append: bool) -> Result<Self, Error> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let fresh = !append || !path.exists();
        let file = if fresh { File::create(path) } else { OpenOptions::new().append(true).open(path) }
            .map_err(|e| Error::io(path, e))?;
        let mut w = LogWriter { path: path.to_owned(), inner: BufWriter::new(file) };
        if fresh {
            w.row(&Header { provenance })?;
        }
        Ok(w)
    }

    fn row<T: Serialize>(&mut self, value: &T) -> Result<(), Error> {
        let line = jsonl::to_line(value)?;
        writeln!(self.inner, "{line}").map_err(|e| Error::io(&self.path, e))
    }

    fn finish(mut self) -> Result<(), Error> {
        self.inner.flush().map_err(|e| Error::io(&self.path, e))
    }
}

fn write_rows<T: Serialize>(path: &Path, provenance: &Provenance, rows: &[T]) -> Result<(), Error> {
    let mut w = LogWriter::create(path, provenance, false)?;
    rows.iter().try_for_each(|r| w.row(r))?;
    w.finish()
}

#[derive(Serialize, serde::Deserialize)]
struct StateFile {
    provenance: Provenance,
    state: serde_json::Value,
}

fn save_checkpoint(
    dir: &Path,
    phase: &str,
    step: usize,
    policy: &dyn PolicyBackend,
    provenance: &Provenance,
) -> Result<PathBuf, Error> {
    let state = StateFile { provenance: provenance.clone(), state: policy.export_state()? };
    let mut text = jsonl::to_line(&state)?;
    text.push('\n');
    jsonl::write_text(&dir.join("policy.json"), &text)?;
    let meta = CheckpointMeta {
        phase: phase.to_owned(),
        step,
        config_digest: provenance.config_digest.clone(),
        tool_version: provenance.tool_version.clone(),
        policy_digest: policy.state().digest,
        state_file: "policy.json".into(),
    };
    let meta_path = dir.join("checkpoint.json");
    meta.write(&meta_path)?;
    Ok(meta_path)
}

fn read_state(path: &Path) -> Result<serde_json::Value, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: StateFile = jsonl::parse_line(1, &text)?;
    Ok(file.state)
}

/// Loads a checkpoint into a fresh policy built from the config.
fn load_checkpoint(ctx: &Context, meta_path: &Path) -> Result<(thinkgen_core::backends::MockPolicy, CheckpointMeta), Error> {
    let meta = CheckpointMeta::read(meta_path)?;
    if meta.config_digest != ctx.loaded.digest {
        log::warn!("checkpoint {} was written under a different config", meta_path.display());
    }
    let mut policy = ctx.loaded.policy();
    policy.import_state(&read_state(&meta.state_path(meta_path))?)?;
    Ok((policy, meta))
}

pub fn curate(ctx: &Context, manifest: Option<&Path>) -> Result<()> {
    let manifest = match (manifest, &ctx.loaded.config.paths.manifest) {
        (Some(p), _) => p.to_owned(),
        (None, Some(p)) => ctx.loaded.resolve(p),
        (None, None) => return Err(Error::Config("no manifest: pass --manifest or set paths.manifest".into()).into()),
    };
    let base = manifest.parent().unwrap_or(Path::new(".")).to_owned();
    let mut inputs: Vec<CurationInput> =
        jsonl::read_lines(&manifest).with_context(|| format!("reading {}", manifest.display()))?;
    for input in &mut inputs {
        input.control_image = resolve_from(&base, &input.control_image);
        input.gt_image = input.gt_image.as_deref().map(|p| resolve_from(&base, p));
    }
    if let Some(n) = ctx.loaded.config.curation.target_count {
        inputs.truncate(n);
    }
    let oracle = ctx.loaded.oracle()?;
    let outcome = curate_all(&inputs, ctx.control_type, oracle.as_ref(), ctx.loaded.config.curation.concurrency, ctx.seed)
        .map_err(|e| e.in_stage("curate"))?;
    let (dataset, rejected) = filter_dataset(outcome.records, &ctx.loaded.blocklist(), ctx.provenance())?;
    write_dataset(&dataset, &ctx.dataset_path())?;
    write_rows(&ctx.out.join("rejected.jsonl"), &ctx.provenance(), &rejected)?;
    write_rows(&ctx.out.join("failures.jsonl"), &ctx.provenance(), &outcome.failures)?;
    println!(
        "curated {} inputs: {} kept, {} rejected, {} failed -> {}",
        inputs.len(),
        dataset.len(),
        rejected.len(),
        outcome.failures.len(),
        ctx.dataset_path().display()
    );
    Ok(())
}

fn resolve_from(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_owned()
    } else {
        base.join(p)
    }
}

pub fn train_sft_cmd(ctx: &Context, resume: Option<&Path>) -> Result<()> {
    let dataset = read_dataset(&ctx.dataset_path()).with_context(|| format!("reading {}", ctx.dataset_path().display()))?;
    let (mut policy, start) = match resume {
        Some(meta) => {
            let (p, m) = load_checkpoint(ctx, meta)?;
            if m.phase != "sft" {
                bail!(Error::Config(format!("cannot resume supervised training from a `{}` checkpoint", m.phase)));
            }
            (p, m.step)
        }
        None => (ctx.loaded.policy(), 0),
    };
    let dir = ctx.out.join("sft");
    let mut log = LogWriter::create(&dir.join("log.jsonl"), &ctx.provenance(), resume.is_some())?;
    let summary =
        train_sft(dataset.records(), &mut policy, &ctx.loaded.config.training.sft, ctx.seed, start, &mut |row| log.row(row))
            .map_err(|e| e.in_stage("train-sft"))?;
    log.finish()?;
    let meta = save_checkpoint(&dir, "sft", summary.end_step, &policy, &ctx.provenance())?;
    println!(
        "sft steps {}..{}: final loss {:.4} -> {}",
        summary.start_step,
        summary.end_step,
        summary.losses.last().copied().unwrap_or(f64::NAN),
        meta.display()
    );
    Ok(())
}

fn default_checkpoint(ctx: &Context, phases: &[&str]) -> Option<PathBuf> {
    phases.iter().map(|p| ctx.out.join(p).join("checkpoint.json")).find(|p| p.exists())
}

pub fn train_rft_cmd(ctx: &Context, init: Option<&Path>, resume: Option<&Path>) -> Result<()> {
    let Some(reference_source) = ctx.loaded.config.training.reference.clone() else {
        bail!(Error::Config(
            "training.reference is not set; use { source = \"rft_start\" } or { source = \"checkpoint\", path = ... }".into()
        ));
    };
    let dataset = read_dataset(&ctx.dataset_path()).with_context(|| format!("reading {}", ctx.dataset_path().display()))?;
    let dir = ctx.out.join("rft");
    let (mut policy, start) = if let Some(meta) = resume {
        let (p, m) = load_checkpoint(ctx, meta)?;
        if m.phase != "rft" {
            bail!(Error::Config(format!("cannot resume reinforcement training from a `{}` checkpoint", m.phase)));
        }
        (p, m.step)
    } else {
        match init.map(Path::to_owned).or_else(|| default_checkpoint(ctx, &["sft"])) {
            Some(meta) => (load_checkpoint(ctx, &meta)?.0, 0),
            None => {
                log::warn!("no supervised checkpoint found; starting from the initial policy");
                (ctx.loaded.policy(), 0)
            }
        }
    };

    let reference: Arc<dyn ReferencePolicy> = match &reference_source {
        ReferenceSource::Checkpoint { path } => Arc::new(load_checkpoint(ctx, &ctx.loaded.resolve(path))?.0),
        ReferenceSource::RftStart => {
            let frozen = dir.join("reference.json");
            if resume.is_some() {
                let mut p = ctx.loaded.policy();
                p.import_state(&read_state(&frozen)?)?;
                Arc::new(p)
            } else {
                let state = StateFile { provenance: ctx.provenance(), state: policy.export_state()? };
                jsonl::write_text(&frozen, &(jsonl::to_line(&state)? + "\n"))?;
                policy.snapshot()
            }
        }
    };

    let reward: Box<dyn RewardFn> = match ctx.loaded.config.training.reward {
        RewardKind::AlignmentFormat => Box::new(AlignmentFormatReward::load(dataset.records(), ctx.loaded.scorer())?),
        RewardKind::FormatOnly => Box::new(FormatOnlyReward),
    };
    let mut log = LogWriter::create(&dir.join("log.jsonl"), &ctx.provenance(), resume.is_some())?;
    let summary = train_rft(
        dataset.records(),
        &mut policy,
        reference,
        reward.as_ref(),
        &ctx.loaded.config.training.rft,
        ctx.seed,
        start,
        &mut |row| log.row(row),
    )
    .map_err(|e| e.in_stage("train-rft"))?;
    log.finish()?;
    let meta = save_checkpoint(&dir, "rft", summary.end_step, &policy, &ctx.provenance())?;
    println!(
        "rft steps {}..{}: final loss {:.4} -> {}",
        summary.start_step,
        summary.end_step,
        summary.losses.last().copied().unwrap_or(f64::NAN),
        meta.display()
    );
    Ok(())
}

pub struct InferArgs<'a> {
    pub prompt: &'a str,
    pub control: &'a Path,
    pub k: Option<usize>,
    pub no_scaling: bool,
    pub policy: Option<&'a Path>,
}

pub fn infer(ctx: &Context, args: &InferArgs<'_>) -> Result<()> {
    let class_count = (ctx.control_type == ControlType::Seg).then(|| ctx.loaded.seg_classes());
    let control_map = ControlMap::load_png(args.control, ctx.control_type, class_count)
        .with_context(|| format!("loading control image {}", args.control.display()))?;
    let policy = match args.policy.map(Path::to_owned).or_else(|| default_checkpoint(ctx, &["rft", "sft"])) {
        Some(meta) => load_checkpoint(ctx, &meta)?.0,
        None => {
            log::warn!("no checkpoint found; inferring with the initial policy");
            ctx.loaded.policy()
        }
    };
    let k = if args.no_scaling { 1 } else { args.k.unwrap_or(ctx.loaded.config.inference.k) };
    if k == 0 {
        bail!(Error::Config("--k must be at least 1".into()));
    }
    let (generator, scorer, perceptual, extractor) =
        (ctx.loaded.generator(), ctx.loaded.scorer(), ctx.loaded.perceptual(), ctx.loaded.extractor());
    let backends = InferenceBackends {
        policy: &policy,
        generator: generator.as_ref(),
        scorer: scorer.as_ref(),
        perceptual: perceptual.as_ref(),
        extractor: extractor.as_ref(),
    };
    let request = InferenceRequest { original_prompt: args.prompt.to_owned(), control_map, k, seed: ctx.seed };
    let outcome = run_inference(&request, &backends, &ctx.loaded.config.inference.to_core(), &ctx.provenance())?;
    let dir = ctx.out.join("infer");
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let image_path = dir.join("image.png");
    outcome.image.save(&image_path).map_err(|e| Error::Image { path: image_path.clone(), message: e.to_string() })?;
    jsonl::write_lines(&dir.join("audit.jsonl"), &[&outcome.audit])?;
    let w = outcome.selection.winner();
    println!(
        "winner {}/{} (total {:.4}): {} -> {}",
        w.index,
        outcome.selection.candidates.len(),
        w.reward.map_or(f64::NAN, |r| r.total),
        w.enhanced_prompt,
        image_path.display()
    );
    Ok(())
}

fn png_files(dir: &Path) -> Result<Vec<PathBuf>, Error> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    Ok(files)
}

pub struct EvaluateArgs<'a> {
    pub generated: Option<&'a Path>,
    pub references: Option<&'a Path>,
    pub reference_maps: bool,
}

pub fn evaluate(ctx: &Context, args: &EvaluateArgs<'_>) -> Result<()> {
    let pick = |flag: Option<&Path>, cfg: &Option<PathBuf>, name: &str| -> Result<PathBuf, Error> {
        match (flag, cfg) {
            (Some(p), _) => Ok(p.to_owned()),
            (None, Some(p)) => Ok(ctx.loaded.resolve(p)),
            (None, None) => Err(Error::Config(format!("no {name} directory: pass --{name} or set paths.{name}"))),
        }
    };
    let generated_dir = pick(args.generated, &ctx.loaded.config.paths.generated, "generated")?;
    let reference_dir = pick(args.references, &ctx.loaded.config.paths.references, "references")?;
    let generated = png_files(&generated_dir)?.iter().map(|p| load_rgb(p)).collect::<Result<Vec<_>, _>>()?;
    let reference_files = png_files(&reference_dir)?;
    let references = if args.reference_maps {
        let classes = (ctx.control_type == ControlType::Seg).then(|| ctx.loaded.seg_classes());
        References::Maps(
            reference_files.iter().map(|p| ControlMap::load_png(p, ctx.control_type, classes)).collect::<Result<_, _>>()?,
        )
    } else {
        References::Images(reference_files.iter().map(|p| load_rgb(p)).collect::<Result<_, _>>()?)
    };
    let extractor = ctx.loaded.extractor();
    let features = ctx.loaded.features();
    let metrics = &ctx.loaded.config.metrics;
    let report = evaluate_suite(
        &generated,
        &references,
        ctx.control_type,
        extractor.as_ref(),
        metrics.fid.then_some(features.as_ref()),
        &metrics.settings(),
        &ctx.provenance(),
    )
    .map_err(|e| e.in_stage("evaluate"))?;
    let path = ctx.out.join("eval").join("report.jsonl");
    write_report(&report, &path)?;

    let scale = if metrics.scale_100 && report.metric != Metric::Rmse { 100.0 } else { 1.0 };
    let arrow = if report.metric.higher_is_better() { "↑" } else { "↓" };
    println!("{:<8} {:>12} {:>10}", "type", format!("{:?}{arrow}", report.metric), "FID↓");
    println!(
        "{:<8} {:>12.4} {:>10}",
        report.control_type.name(),
        report.aggregate * scale,
        report.fid.map_or("-".to_owned(), |f| format!("{f:.4}"))
    );
    println!("{} images -> {}", report.generated_count, path.display());
    Ok(())
}
