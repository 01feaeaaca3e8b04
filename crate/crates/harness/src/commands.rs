//! One function per subcommand. Each validates its whole config before
//! doing any work and writes human-readable progress to `log`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use synmoe_core::csqa::{
    emit_jsonl, gen_object_qa, gen_relation_qa, interleave_capped, read_jsonl, synthetic_pair,
    validate_qa, PairedSceneGraph, QAPair, Verdict,
};
use synmoe_core::data::{captioning, coarse_task, copy_task, instruction_mix, Sample};
use synmoe_core::geometry::{lift_to_world, CameraFrame};
use synmoe_core::gradsuite::{run_suite, SuiteReport};
use synmoe_core::model::ToyModel;
use synmoe_core::moe::{build_schedule, shares_loss, write_shares_csv, ExpertShare, PlacementMode};
use synmoe_core::rng::derive_seed;
use synmoe_core::synergy::TeacherFeatures;
use synmoe_core::train::{read_telemetry, train_stage, StageName, StageReport, TelemetryRow};

use crate::config::{AblationAxis, RunConfig};
use crate::error::{HarnessError, Result};

/// Largest object count per side for synthetic CSQA pairs.
const SYNTHETIC_MAX_OBJECTS: usize = 6;

/// Depth of the reference stack the placement grid is also reported for.
pub const REFERENCE_DEPTH: usize = 28;

fn say(log: &mut dyn Write, line: std::fmt::Arguments<'_>) -> Result<()> {
    log.write_fmt(line)
        .and_then(|_| log.write_all(b"\n"))
        .map_err(|e| HarnessError::io("<stdout>", e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| HarnessError::Internal(format!("serializing {}: {e}", path.display())))?;
    std::fs::write(path, text + "\n").map_err(|e| HarnessError::io(path, e))
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)
        .map_err(|e| HarnessError::Config(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r)
            .map_err(|e| HarnessError::Internal(format!("{}: {e}", path.display())))?;
    }
    w.flush().map_err(|e| HarnessError::io(path, e))
}

fn required<'a>(value: &'a Option<PathBuf>, flag: &str, what: &str) -> Result<&'a Path> {
    value
        .as_deref()
        .ok_or_else(|| HarnessError::Missing(format!("{what}: pass --{flag} <path>")))
}

// grad-check

pub fn grad_check(cfg: &RunConfig, log: &mut dyn Write) -> Result<SuiteReport> {
    cfg.validate()?;
    let report = run_suite(&cfg.suite_options())?;
    create_dir(&cfg.out)?;
    write_json(&cfg.out.join("grad_check.json"), &report)?;
    say(
        log,
        format_args!(
            "{:<22} {:>10} {:>12} {:>6}  result",
            "path", "tolerance", "worst", "seed"
        ),
    )?;
    for p in &report.paths {
        say(
            log,
            format_args!(
                "{:<22} {:>10.0e} {:>12.3e} {:>6}  {}",
                p.path,
                p.tolerance,
                p.worst_rel_err,
                p.worst_seed,
                if p.passed() { "ok" } else { "FAIL" }
            ),
        )?;
    }
    let failures = report.failures();
    if !failures.is_empty() {
        let list = failures
            .iter()
            .map(|p| {
                format!(
                    "{} (rel err {:.3e} > {:.0e} at seed {})",
                    p.path, p.worst_rel_err, p.tolerance, p.worst_seed
                )
            })
            .collect::<Vec<_>>()
            .join(", ");
        return Err(HarnessError::GradCheck(list));
    }
    Ok(report)
}

// train

/// Completed stage of a run directory.
#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub stage: StageName,
    pub dir: PathBuf,
    pub report: StageReport,
    /// loaded from disk instead of retrained
    pub resumed: bool,
}

fn teacher_class_dir(root: &Path, class: usize) -> PathBuf {
    root.join(format!("class{class}"))
}

/// Artifacts the requested stages need before anything runs.
fn check_prerequisites(cfg: &RunConfig) -> Result<()> {
    if cfg.stages.contains(&StageName::Stage2_2) {
        let path = required(
            &cfg.csqa,
            "csqa",
            "stage_2_2 trains on CSQA pairs (generate a file with `synmoe gen-csqa`)",
        )?;
        if !path.is_file() {
            return Err(HarnessError::Missing(format!(
                "stage_2_2 needs the CSQA file {}, which does not exist (generate it with `synmoe gen-csqa`)",
                path.display()
            )));
        }
    }
    if let Some(root) = &cfg.teacher_dir {
        for c in 0..cfg.classes {
            let dir = teacher_class_dir(root, c);
            for f in ["temporal.txt", "spatial.txt"] {
                if !dir.join(f).is_file() {
                    return Err(HarnessError::Missing(format!(
                        "teacher features {} not found; teacher_dir needs class0..class{} each holding temporal.txt and spatial.txt",
                        dir.join(f).display(),
                        cfg.classes - 1
                    )));
                }
            }
        }
    }
    Ok(())
}

fn load_teachers(cfg: &RunConfig) -> Result<Option<Vec<TeacherFeatures>>> {
    let Some(root) = &cfg.teacher_dir else {
        return Ok(None);
    };
    let mc = cfg.model_config();
    let mut out = Vec::with_capacity(cfg.classes);
    for c in 0..cfg.classes {
        let t = TeacherFeatures::read_dir(&teacher_class_dir(root, c))?;
        let shape_ok = t.temporal.shape() == [mc.synergy_tokens, mc.d_align_temporal]
            && t.spatial.shape() == [mc.synergy_tokens, mc.d_align_spatial];
        if !shape_ok {
            return Err(HarnessError::Config(format!(
                "teacher features for class {c} must be {}x{} and {}x{}, got {:?} and {:?}",
                mc.synergy_tokens,
                mc.d_align_temporal,
                mc.synergy_tokens,
                mc.d_align_spatial,
                t.temporal.shape(),
                t.spatial.shape()
            )));
        }
        out.push(t);
    }
    Ok(Some(out))
}

fn load_csqa_pairs(path: &Path) -> Result<Vec<(String, String)>> {
    let qa = read_jsonl(path)?;
    if qa.is_empty() {
        return Err(HarnessError::Missing(format!(
            "{} holds no QA pairs",
            path.display()
        )));
    }
    Ok(qa.into_iter().map(|q| (q.question, q.answer)).collect())
}

fn stage_data(cfg: &RunConfig, stage: StageName) -> Result<Vec<Sample>> {
    let mc = cfg.model_config();
    let dc = cfg.data_config();
    let seed = derive_seed(cfg.seed, &format!("data/{stage}"));
    Ok(match stage {
        StageName::Stage1_1 => captioning(&dc, &mc, seed)?,
        StageName::Stage1_2 => copy_task(&dc, &mc, seed)?,
        StageName::Stage2_1 => {
            let mut data = coarse_task(&dc, &mc, seed)?;
            if let Some(teachers) = load_teachers(cfg)? {
                for (i, s) in data.iter_mut().enumerate() {
                    s.teachers = Some(teachers[i % cfg.classes].clone());
                }
            }
            data
        }
        StageName::Stage2_2 => {
            let path = required(&cfg.csqa, "csqa", "stage_2_2 trains on CSQA pairs")?;
            instruction_mix(&load_csqa_pairs(path)?, &dc, &mc, seed)?
        }
    })
}

fn read_report(path: &Path) -> Result<StageReport> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        HarnessError::Core(synmoe_core::Error::Parse(format!(
            "{}: {e}",
            path.display()
        )))
    })
}

/// Runs the requested stages in order into `cfg.out`.
///
/// A stage is reused when `config.json` matches the current config and the
/// stage directory holds both `model.json` and `report.json`; reuse stops at
/// the first stage that has to be retrained.
pub fn train(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<StageOutcome>> {
    cfg.validate()?;
    check_prerequisites(cfg)?;
    create_dir(&cfg.out)?;
    let config_path = cfg.out.join("config.json");
    let mut resumable = std::fs::read_to_string(&config_path)
        .ok()
        .and_then(|t| serde_json::from_str::<RunConfig>(&t).ok())
        .is_some_and(|prev| &prev == cfg);
    write_json(&config_path, cfg)?;

    let mut model = ToyModel::random(cfg.model_config(), derive_seed(cfg.seed, "model"))?;
    let mut outcomes = Vec::with_capacity(cfg.stages.len());
    for &stage in &cfg.stages {
        let dir = cfg.out.join(stage.as_str());
        let model_path = dir.join("model.json");
        let report_path = dir.join("report.json");
        resumable = resumable && model_path.is_file() && report_path.is_file();
        if resumable {
            model = ToyModel::load(&model_path)?;
            let report = read_report(&report_path)?;
            say(log, format_args!("{stage}: reused {}", dir.display()))?;
            outcomes.push(StageOutcome {
                stage,
                dir,
                report,
                resumed: true,
            });
            continue;
        }
        if stage.is_sparse() && !model.is_upcycled() {
            model.upcycle(cfg.upcycle_noise, derive_seed(cfg.seed, "upcycle"))?;
        }
        let data = stage_data(cfg, stage)?;
        let sc = cfg.stage_config(stage);
        let report = train_stage(
            &mut model,
            &sc,
            &data,
            derive_seed(cfg.seed, &format!("train/{stage}")),
        )?;
        create_dir(&dir)?;
        model.save(&model_path)?;
        report.write_dir(&dir)?;
        say(
            log,
            format_args!(
                "{stage}: loss {:.6} -> {:.6} over {} steps",
                report.initial.total, report.final_.total, report.steps_run
            ),
        )?;
        outcomes.push(StageOutcome {
            stage,
            dir,
            report,
            resumed: false,
        });
    }
    if cfg.stages.is_empty() {
        say(
            log,
            format_args!("no stages requested; wrote {}", config_path.display()),
        )?;
    }
    Ok(outcomes)
}

// route-stats

#[derive(Clone, Debug, PartialEq)]
pub struct RouteStats {
    pub source: PathBuf,
    /// logged steps aggregated, ascending
    pub steps: Vec<usize>,
    pub shares: Vec<ExpertShare>,
    /// load-balance value per MoE layer
    pub layer_loss: BTreeMap<usize, f64>,
    pub max_share: ExpertShare,
    pub min_share: ExpertShare,
    /// mean of `layer_loss`
    pub load_balance_loss: f64,
}

/// `routing.csv` inside `run`: the file itself, the directory's own file, or
/// the latest stage of a run directory that logged telemetry.
fn find_telemetry(run: &Path) -> Result<PathBuf> {
    if run.is_file() {
        return Ok(run.to_path_buf());
    }
    if !run.is_dir() {
        return Err(HarnessError::Missing(format!(
            "{} does not exist",
            run.display()
        )));
    }
    let own = run.join("routing.csv");
    if own.is_file() {
        return Ok(own);
    }
    for stage in StageName::ALL.iter().rev() {
        let p = run.join(stage.as_str()).join("routing.csv");
        if p.is_file() && !read_telemetry(&p)?.is_empty() {
            return Ok(p);
        }
    }
    Err(HarnessError::Missing(format!(
        "no routing telemetry under {} (only sparse stages log routing.csv)",
        run.display()
    )))
}

/// Checks that token fractions of every (step, layer) sum to one.
pub fn check_conservation(rows: &[TelemetryRow]) -> std::result::Result<(), String> {
    let mut sums: BTreeMap<(usize, usize), f64> = BTreeMap::new();
    for r in rows {
        *sums.entry((r.step, r.layer)).or_default() += r.token_fraction;
    }
    for ((step, layer), s) in sums {
        if (s - 1.0).abs() > 1e-9 {
            return Err(format!(
                "token fractions at step {step} layer {layer} sum to {s}"
            ));
        }
    }
    Ok(())
}

/// Averages the final `window` logged steps of a telemetry file.
pub fn route_stats_from(path: &Path, window: usize) -> Result<RouteStats> {
    let rows = read_telemetry(path)?;
    if rows.is_empty() {
        return Err(HarnessError::Missing(format!(
            "{} holds no routing telemetry",
            path.display()
        )));
    }
    check_conservation(&rows).map_err(|m| {
        HarnessError::Core(synmoe_core::Error::Data(format!("{}: {m}", path.display())))
    })?;
    let mut steps: Vec<usize> = rows.iter().map(|r| r.step).collect();
    steps.sort_unstable();
    steps.dedup();
    let steps = steps.split_off(steps.len().saturating_sub(window));

    let mut acc: BTreeMap<(usize, usize), (f64, f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| steps.binary_search(&r.step).is_ok()) {
        let e = acc.entry((r.layer, r.expert)).or_default();
        e.0 += r.token_fraction;
        e.1 += r.mean_prob;
        e.2 += 1;
    }
    let shares: Vec<ExpertShare> = acc
        .into_iter()
        .map(|((layer, expert), (f, g, n))| ExpertShare {
            layer,
            expert,
            token_fraction: f / n as f64,
            mean_prob: g / n as f64,
        })
        .collect();

    let mut by_layer: BTreeMap<usize, Vec<ExpertShare>> = BTreeMap::new();
    for s in &shares {
        by_layer.entry(s.layer).or_default().push(s.clone());
    }
    let layer_loss: BTreeMap<usize, f64> =
        by_layer.iter().map(|(&l, s)| (l, shares_loss(s))).collect();
    let load_balance_loss = layer_loss.values().sum::<f64>() / layer_loss.len() as f64;
    let pick = |better: fn(f64, f64) -> bool| {
        shares
            .iter()
            .fold(None::<&ExpertShare>, |best, s| match best {
                Some(b) if !better(s.token_fraction, b.token_fraction) => Some(b),
                _ => Some(s),
            })
            .cloned()
            .expect("non-empty shares")
    };
    Ok(RouteStats {
        source: path.to_path_buf(),
        steps,
        max_share: pick(|a, b| a > b),
        min_share: pick(|a, b| a < b),
        shares,
        layer_loss,
        load_balance_loss,
    })
}

pub fn route_stats(cfg: &RunConfig, log: &mut dyn Write) -> Result<RouteStats> {
    cfg.validate()?;
    let run = required(
        &cfg.run,
        "run",
        "route-stats reads a run directory or routing.csv",
    )?;
    let path = find_telemetry(run)?;
    let stats = route_stats_from(&path, cfg.window)?;
    create_dir(&cfg.out)?;
    write_shares_csv(&cfg.out.join("route_stats.csv"), &stats.shares)?;
    say(
        log,
        format_args!(
            "source {} (steps {}..={})",
            path.display(),
            stats.steps[0],
            stats.steps[stats.steps.len() - 1]
        ),
    )?;
    for (layer, loss) in &stats.layer_loss {
        let row = stats
            .shares
            .iter()
            .filter(|s| s.layer == *layer)
            .map(|s| format!("{:.4}", s.token_fraction))
            .collect::<Vec<_>>()
            .join(" ");
        say(
            log,
            format_args!("layer {layer}: shares [{row}] load-balance {loss:.6}"),
        )?;
    }
    say(
        log,
        format_args!(
            "max share {:.6} (layer {} expert {})",
            stats.max_share.token_fraction, stats.max_share.layer, stats.max_share.expert
        ),
    )?;
    say(
        log,
        format_args!(
            "min share {:.6} (layer {} expert {})",
            stats.min_share.token_fraction, stats.min_share.layer, stats.min_share.expert
        ),
    )?;
    say(
        log,
        format_args!(
            "load-balance loss {:.6} (mean over layers)",
            stats.load_balance_loss
        ),
    )?;
    Ok(stats)
}

// ablate

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub experts: usize,
    pub top_k: usize,
    pub placement: String,
    pub moe_layers: usize,
    /// MoE layer count the same placement yields on a 28-layer stack
    pub moe_layers_at_28: usize,
    pub final_total: f64,
    pub final_cross_entropy: Option<f64>,
    pub final_coarse: Option<f64>,
    pub final_aux: Option<f64>,
    pub max_share: Option<f64>,
    pub min_share: Option<f64>,
    pub load_balance_loss: Option<f64>,
}

fn variants(cfg: &RunConfig) -> Vec<(String, RunConfig)> {
    let dir = cfg.out.join(match cfg.axis {
        AblationAxis::Experts => "ablate_experts",
        AblationAxis::Placement => "ablate_placement",
    });
    let mut out = Vec::new();
    match cfg.axis {
        AblationAxis::Experts => {
            for m in [2, 3, 4] {
                let label = format!("experts_{m}");
                let mut v = cfg.clone();
                v.experts = m;
                v.top_k = cfg.top_k.min(m);
                v.out = dir.join(&label);
                out.push((label, v));
            }
        }
        AblationAxis::Placement => {
            for mode in PlacementMode::ABLATION {
                let label = mode
                    .to_string()
                    .replace(['(', ')'], "")
                    .replace("interval", "interval_");
                let mut v = cfg.clone();
                v.placement = mode;
                v.out = dir.join(&label);
                out.push((mode.to_string(), v));
            }
        }
    }
    out
}

/// Trains every variant of the chosen axis and tabulates final losses and
/// routing statistics into `ablate_<axis>.csv`.
pub fn ablate(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<AblationRow>> {
    cfg.validate()?;
    let grid = variants(cfg);
    for (_, v) in &grid {
        v.validate()?;
        check_prerequisites(v)?;
    }
    let mut rows = Vec::with_capacity(grid.len());
    for (label, v) in grid {
        say(log, format_args!("variant {label}"))?;
        let outcomes = train(&v, log)?;
        let last = outcomes.last().map(|o| &o.report);
        let stats = outcomes
            .iter()
            .rev()
            .map(|o| o.dir.join("routing.csv"))
            .find(|p| read_telemetry(p).is_ok_and(|r| !r.is_empty()))
            .map(|p| route_stats_from(&p, v.window))
            .transpose()?;
        rows.push(AblationRow {
            variant: label,
            experts: v.experts,
            top_k: v.top_k,
            placement: v.placement.to_string(),
            moe_layers: build_schedule(v.layers, v.placement)?
                .moe_layer_indices
                .len(),
            moe_layers_at_28: build_schedule(REFERENCE_DEPTH, v.placement)?
                .moe_layer_indices
                .len(),
            final_total: last.map_or(f64::NAN, |r| r.final_.total),
            final_cross_entropy: last.and_then(|r| r.final_.cross_entropy),
            final_coarse: last.and_then(|r| r.final_.coarse),
            final_aux: last.and_then(|r| r.final_.aux),
            max_share: stats.as_ref().map(|s| s.max_share.token_fraction),
            min_share: stats.as_ref().map(|s| s.min_share.token_fraction),
            load_balance_loss: stats.as_ref().map(|s| s.load_balance_loss),
        });
    }
    let name = match cfg.axis {
        AblationAxis::Experts => "ablate_experts.csv",
        AblationAxis::Placement => "ablate_placement.csv",
    };
    let path = cfg.out.join(name);
    write_csv(&path, &rows)?;
    say(
        log,
        format_args!("wrote {} ({} rows)", path.display(), rows.len()),
    )?;
    Ok(rows)
}

// lift

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointRow {
    pub i: usize,
    pub j: usize,
    pub x: f64,
    pub y: f64,
    pub z: f64,
}

pub fn lift(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<PointRow>> {
    cfg.validate()?;
    let path = required(&cfg.frame, "frame", "lift reads a camera frame JSON")?;
    let frame = CameraFrame::load(path)?;
    let points = lift_to_world(&frame)?;
    let mut rows = Vec::with_capacity(points.height() * points.width());
    for i in 0..points.height() {
        for j in 0..points.width() {
            let [x, y, z] = points.at(i, j);
            rows.push(PointRow { i, j, x, y, z });
        }
    }
    create_dir(&cfg.out)?;
    let out = cfg.out.join("points.csv");
    write_csv(&out, &rows)?;
    say(
        log,
        format_args!(
            "lifted {}x{} frame to {}",
            points.height(),
            points.width(),
            out.display()
        ),
    )?;
    Ok(rows)
}

// gen-csqa

fn pair_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let entries = std::fs::read_dir(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut files = Vec::new();
    for entry in entries {
        let path = entry.map_err(|e| HarnessError::io(dir, e))?.path();
        if path.is_file() && path.extension().is_some_and(|x| x == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn generate_checked(
    pair: &PairedSceneGraph,
    seed: u64,
    cap: usize,
    name: &str,
) -> Result<Vec<QAPair>> {
    let qa = interleave_capped(
        gen_object_qa(pair, seed)?,
        gen_relation_qa(pair, seed)?,
        cap,
    );
    for q in &qa {
        if let Verdict::Reject(reason) = validate_qa(pair, q) {
            return Err(HarnessError::Internal(format!(
                "generated QA for {name} failed grounding ({reason}): {:?}",
                q.question
            )));
        }
    }
    Ok(qa)
}

/// Scene-graph pairs from `pairs` (sorted by file name) plus seeded synthetic
/// pairs, each capped at `pair_cap` QAs, written to `csqa.jsonl`.
pub fn gen_csqa(cfg: &RunConfig, log: &mut dyn Write) -> Result<Vec<QAPair>> {
    cfg.validate()?;
    if cfg.pairs.is_none() && cfg.synthetic_pairs == 0 {
        return Err(HarnessError::Missing(
            "gen-csqa needs input: pass --pairs <dir> and/or --synthetic_pairs <n>".into(),
        ));
    }
    let mut inputs: Vec<(String, PairedSceneGraph)> = Vec::new();
    if let Some(dir) = &cfg.pairs {
        let files = pair_files(dir)?;
        if files.is_empty() && cfg.synthetic_pairs == 0 {
            return Err(HarnessError::Missing(format!(
                "no *.json scene-graph pairs in {}",
                dir.display()
            )));
        }
        for f in files {
            let name = f
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            inputs.push((name, PairedSceneGraph::load(&f)?));
        }
    }
    for i in 0..cfg.synthetic_pairs {
        let pair = synthetic_pair(
            derive_seed(cfg.seed, &format!("synthetic/{i}")),
            SYNTHETIC_MAX_OBJECTS,
        );
        inputs.push((format!("synthetic/{i}"), pair));
    }

    let mut all = Vec::new();
    for (name, pair) in &inputs {
        let seed = derive_seed(cfg.seed, &format!("templates/{name}"));
        all.extend(generate_checked(pair, seed, cfg.pair_cap, name)?);
    }
    create_dir(&cfg.out)?;
    let out = cfg.out.join("csqa.jsonl");
    emit_jsonl(&all, &out)?;
    let mut by_kind: BTreeMap<String, usize> = BTreeMap::new();
    for q in &all {
        *by_kind
            .entry(format!("{:?}/{:?}", q.level, q.category))
            .or_default() += 1;
    }
    say(
        log,
        format_args!(
            "{} QAs from {} pairs -> {}",
            all.len(),
            inputs.len(),
            out.display()
        ),
    )?;
    for (k, n) in by_kind {
        say(log, format_args!("  {k}: {n}"))?;
    }
    Ok(all)
}
