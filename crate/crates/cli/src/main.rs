//! `jcdnet` command-line tool.
//!
//! Exit codes: 0 success, 1 validation error, 2 runtime failure, 3 gradient check failure.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use jcdnet::checkpoint::Checkpoint;
use jcdnet::data::{
    resolve, synth_generate_split, write_atomic, Dataset, Manifest, Split, SynthConfig,
};
use jcdnet::eval::{
    activitynet_grid, conjoint_subset_filter, map_report, remap_proposals, thumos_grid, MapReport,
};
use jcdnet::gradcheck::run_suite;
use jcdnet::inference::{write_csv, write_jsonl, Proposal, ProposalRecord};
use jcdnet::model::infer;
use jcdnet::train::{
    apply_overrides, predict, run_ablation, train_to_dir, AblationFlags, RunConfig,
    CHECKPOINT_FILE, LOG_FILE,
};

#[derive(Parser)]
#[command(
    name = "jcdnet",
    version,
    about = "Weakly-supervised temporal action localization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and write a checkpoint plus a per-step loss log.
    Train(TrainArgs),
    /// Localize actions with a checkpoint and report mAP.
    Eval(EvalArgs),
    /// Train and evaluate the experiment matrix.
    Ablate(AblateArgs),
    /// Finite-difference check of every op and loss.
    Gradcheck(GradcheckArgs),
    /// Generate a synthetic conjoint-action dataset.
    Synth(SynthArgs),
}

#[derive(Args)]
struct Common {
    /// JSON config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a config field, e.g. `--set model.hidden_dim=64`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Subset {
    Conjoint,
}

#[derive(Clone, Copy, ValueEnum)]
enum Grid {
    /// 0.3 to 0.9 step 0.1.
    Thumos,
    /// 0.5 to 0.95 step 0.05.
    Activitynet,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum)]
    subset: Option<Subset>,
    #[arg(long, value_enum, default_value = "thumos")]
    grid: Grid,
    /// Also write per-snippet action-ness and suppressed class scores.
    #[arg(long)]
    traces: bool,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: Common,
    /// Training manifest.
    #[arg(long)]
    manifest: PathBuf,
    /// Evaluation manifest; defaults to the training manifest.
    #[arg(long)]
    eval_manifest: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated experiment ids.
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4,5,6,7,8,9,10")]
    experiments: Vec<usize>,
    /// Number of consecutive seeds starting at the config seed.
    #[arg(long, default_value_t = 3)]
    num_seeds: u64,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Corrupt one op's backward rule to exercise the failure path.
    #[arg(long, hide = true)]
    fault: Option<String>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    out: PathBuf,
}

enum Failure {
    Validation(String),
    Runtime(String),
    GradCheck,
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
            Failure::GradCheck => 3,
        }
    }
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Validation(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let res = match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Ablate(a) => cmd_ablate(a),
        Command::Gradcheck(a) => cmd_gradcheck(a),
        Command::Synth(a) => cmd_synth(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            match &f {
                Failure::Validation(m) => eprintln!("error: {}", m),
                Failure::Runtime(m) => eprintln!("runtime error: {}", m),
                Failure::GradCheck => eprintln!("gradient check failed"),
            }
            ExitCode::from(f.code())
        }
    }
}

fn emit(v: serde_json::Value) {
    println!("{}", v);
}

fn read_json(path: &Path) -> Result<serde_json::Value, Failure> {
    let text =
        std::fs::read_to_string(path).map_err(|e| invalid(format!("{}: {}", path.display(), e)))?;
    serde_json::from_str(&text).map_err(|e| invalid(format!("{}: {}", path.display(), e)))
}

fn run_config(c: &Common, base: RunConfig) -> Result<RunConfig, Failure> {
    let cfg = match &c.config {
        Some(p) => serde_json::from_value(read_json(p)?)
            .map_err(|e| invalid(format!("{}: {}", p.display(), e)))?,
        None => base,
    };
    let mut cfg: RunConfig = apply_overrides(&cfg, &c.sets).map_err(invalid)?;
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(invalid)?;
    Ok(cfg)
}

fn save_json(path: &Path, v: &impl serde::Serialize) -> Result<(), Failure> {
    let mut text = serde_json::to_string_pretty(v).map_err(runtime)?;
    text.push('\n');
    write_atomic(path, text.as_bytes()).map_err(runtime)
}

fn cmd_train(a: TrainArgs) -> Result<(), Failure> {
    let cfg = run_config(&a.common, RunConfig::default())?;
    let data = Dataset::load(&a.manifest).map_err(invalid)?;
    cfg.validate_dataset(&data).map_err(invalid)?;
    let ck = train_to_dir(&cfg, &data, &a.out, |epoch, recs| {
        let mean = recs.iter().map(|r| r.losses.total).sum::<f64>() / recs.len().max(1) as f64;
        eprintln!(
            "{}",
            json!({"event": "epoch", "epoch": epoch, "mean_total": mean})
        );
    })
    .map_err(|e| {
        if e.is_validation() {
            invalid(e)
        } else {
            runtime(e)
        }
    })?;
    save_json(&a.out.join("config.json"), &cfg)?;
    emit(json!({
        "event": "trained",
        "epochs": ck.epoch,
        "checkpoint": a.out.join(CHECKPOINT_FILE),
        "log": a.out.join(LOG_FILE),
    }));
    Ok(())
}

/// Config used when evaluating a checkpoint without `--config`: its model settings with
/// branch flags matching the stored parameters.
fn config_for_checkpoint(ck: &Checkpoint) -> RunConfig {
    let m = &ck.config;
    RunConfig {
        model: m.clone(),
        ablation: AblationFlags {
            use_cad: m.use_cad,
            cad_supervised: m.use_cad,
            use_tea: m.use_tea,
            use_l_supp_mil: false,
            use_l_supp_coarse: false,
            use_l_norm: false,
            use_l_guide: false,
            use_l_cas: false,
        },
        ..RunConfig::default()
    }
}

fn report_json(report: &MapReport, sanity: &MapReport, classes: &[String]) -> serde_json::Value {
    let mut v = report.to_json();
    v["classes"] = json!(report
        .evaluated_classes
        .iter()
        .map(|&c| classes[c].clone())
        .collect::<Vec<_>>());
    v["per_class_ap"] = json!(report.per_class_ap);
    v["sanity_gt_as_proposals"] = sanity.to_json();
    v
}

fn cmd_eval(a: EvalArgs) -> Result<(), Failure> {
    let ck = Checkpoint::load(&a.checkpoint).map_err(invalid)?;
    let cfg = match &a.common.config {
        Some(_) => run_config(&a.common, RunConfig::default())?,
        None => run_config(&a.common, config_for_checkpoint(&ck))?,
    };
    let model = cfg.model_config();
    ck.check_matches(&model).map_err(invalid)?;

    let manifest = Manifest::load(&a.manifest).map_err(invalid)?;
    if manifest.classes.len() != model.num_classes {
        return Err(invalid(format!(
            "manifest has {} classes, checkpoint expects {}",
            manifest.classes.len(),
            model.num_classes
        )));
    }
    let (manifest, old_index) = match a.subset {
        Some(Subset::Conjoint) => conjoint_subset_filter(&manifest).map_err(invalid)?,
        None => {
            let ids = (0..manifest.classes.len()).collect();
            (manifest, ids)
        }
    };
    let gts = manifest.ground_truth();
    if gts.is_empty() {
        return Err(invalid("manifest has no ground-truth segments to evaluate"));
    }
    let base = a.manifest.parent().unwrap_or(Path::new("."));
    let data = Dataset::load_with(manifest.clone(), base).map_err(invalid)?;
    if data.feature_dim() != Some(model.feature_dim) {
        return Err(invalid(format!(
            "features are {:?} wide, model expects {}",
            data.feature_dim(),
            model.feature_dim
        )));
    }
    let grid = match a.grid {
        Grid::Thumos => thumos_grid(),
        Grid::Activitynet => activitynet_grid(),
    };

    let props = predict(&ck.params, &model, &cfg.loss, &cfg.inference, &data).map_err(runtime)?;
    let props = remap_proposals(&props, &old_index);
    let report = map_report(&props, &gts, &grid).map_err(runtime)?;
    let oracle: Vec<Proposal> = gts
        .iter()
        .map(|g| Proposal {
            video_id: g.video_id.clone(),
            t_start: g.t_start,
            t_end: g.t_end,
            score: 1.0,
            class_id: g.class_id,
        })
        .collect();
    let sanity = map_report(&oracle, &gts, &grid).map_err(runtime)?;

    std::fs::create_dir_all(&a.out).map_err(|e| runtime(format!("{}: {}", a.out.display(), e)))?;
    let records: Vec<ProposalRecord> = props
        .iter()
        .map(|p| ProposalRecord::from_proposal(p, &manifest.classes))
        .collect();
    let mut buf = Vec::new();
    write_jsonl(&mut buf, &records).map_err(runtime)?;
    write_atomic(&a.out.join("proposals.jsonl"), &buf).map_err(runtime)?;
    let mut buf = Vec::new();
    write_csv(&mut buf, &records).map_err(runtime)?;
    write_atomic(&a.out.join("proposals.csv"), &buf).map_err(runtime)?;
    save_json(
        &a.out.join("report.json"),
        &report_json(&report, &sanity, &manifest.classes),
    )?;
    let table = format!(
        "{}{}",
        report.to_table("model"),
        sanity.to_table("gt-oracle")
    );
    write_atomic(&a.out.join("report.txt"), table.as_bytes()).map_err(runtime)?;
    if a.traces {
        let mut buf = Vec::new();
        for v in &data.videos {
            let o = infer(&v.features, &model, &ck.params).map_err(runtime)?;
            let line = json!({
                "video_id": v.id,
                "a_ness": o.a_ness.data(),
                "s_final_supp": (0..o.s_final_supp.shape()[0])
                    .map(|t| o.s_final_supp.row(t).to_vec())
                    .collect::<Vec<_>>(),
            });
            writeln!(buf, "{}", line).map_err(runtime)?;
        }
        write_atomic(&a.out.join("traces.jsonl"), &buf).map_err(runtime)?;
    }
    print!("{}", table);
    Ok(())
}

fn cmd_ablate(a: AblateArgs) -> Result<(), Failure> {
    let cfg = run_config(&a.common, RunConfig::default())?;
    let train_data = Dataset::load(&a.manifest).map_err(invalid)?;
    let eval_data = match &a.eval_manifest {
        Some(p) => Dataset::load(p).map_err(invalid)?,
        None => train_data.clone(),
    };
    if eval_data.manifest.ground_truth().is_empty() {
        return Err(invalid("evaluation manifest has no ground-truth segments"));
    }
    if a.num_seeds == 0 {
        return Err(invalid("--num-seeds must be positive"));
    }
    let seeds: Vec<u64> = (0..a.num_seeds).map(|i| cfg.seed + i).collect();
    let report = run_ablation(
        &cfg,
        &train_data,
        &eval_data,
        &a.experiments,
        &seeds,
        |e, s, v| {
            eprintln!(
                "{}",
                json!({"event": "run", "experiment": e, "seed": s, "avg_0.3_0.7": 100.0 * v})
            );
        },
    )
    .map_err(|e| {
        if e.is_validation() {
            invalid(e)
        } else {
            runtime(e)
        }
    })?;
    std::fs::create_dir_all(&a.out).map_err(|e| runtime(format!("{}: {}", a.out.display(), e)))?;
    save_json(&a.out.join("ablation.json"), &report)?;
    let table = report.to_table();
    write_atomic(&a.out.join("ablation.txt"), table.as_bytes()).map_err(runtime)?;
    print!("{}", table);
    Ok(())
}

fn cmd_gradcheck(a: GradcheckArgs) -> Result<(), Failure> {
    let fault: Option<&'static str> = a.fault.map(|f| &*Box::leak(f.into_boxed_str()));
    let start = std::time::Instant::now();
    let results = run_suite(a.seed, fault);
    let mut failed = 0;
    for r in &results {
        let status = if r.passed() { "PASS" } else { "FAIL" };
        failed += usize::from(!r.passed());
        match &r.report {
            Ok(rep) => println!(
                "{} {:<20} max_rel_err={:.3e} tol={:.0e} checked={} excluded={}",
                status, r.name, rep.max_rel_err, r.tolerance, rep.checked, rep.excluded
            ),
            Err(e) => println!("{} {:<20} error: {}", status, r.name, e),
        }
    }
    println!(
        "{} of {} checks passed in {:.2}s",
        results.len() - failed,
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        Err(Failure::GradCheck)
    } else {
        Ok(())
    }
}

fn cmd_synth(a: SynthArgs) -> Result<(), Failure> {
    let cfg = match &a.common.config {
        Some(p) => serde_json::from_value(read_json(p)?)
            .map_err(|e| invalid(format!("{}: {}", p.display(), e)))?,
        None => SynthConfig::default(),
    };
    let mut cfg: SynthConfig = apply_overrides(&cfg, &a.common.sets).map_err(invalid)?;
    if let Some(s) = a.common.seed {
        cfg.seed = s;
    }
    cfg.validate().map_err(invalid)?;
    let train = synth_generate_split(&cfg, Split::Train).map_err(invalid)?;
    let test = synth_generate_split(&cfg, Split::Test).map_err(invalid)?;

    std::fs::create_dir_all(&a.out).map_err(|e| runtime(format!("{}: {}", a.out.display(), e)))?;
    train
        .dataset
        .save(&a.out, "manifest.json")
        .map_err(runtime)?;
    if cfg.test_videos > 0 {
        test.dataset
            .save(&a.out, "test_manifest.json")
            .map_err(runtime)?;
    }
    save_json(&a.out.join("synth_config.json"), &cfg)?;
    let mut run = RunConfig::synthetic();
    run.model.feature_dim = cfg.feature_dim;
    run.model.num_classes = train.dataset.manifest.classes.len();
    run.model.snippets_per_video = cfg.snippets_per_video;
    save_json(&a.out.join("run_config.json"), &run)?;
    emit(json!({
        "event": "synth",
        "videos": train.dataset.videos.len(),
        "test_videos": test.dataset.videos.len(),
        "classes": train.dataset.manifest.classes,
        "manifest": resolve(&a.out, "manifest.json"),
    }));
    Ok(())
}
