//! `ftkd` command line: train, distill, evaluate, ablate and plot.
//!
//! Exit codes: 0 success, 1 usage error, 2 check failure or invalid input.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use ftkd::harness::ablate::{run_study, to_csv, Study};
use ftkd::harness::checkpoint::CheckpointArchive;
use ftkd::harness::eval::{detector_for, predict_scenes};
use ftkd::harness::gradcheck::full_suite;
use ftkd::harness::plot::bev_svg;
use ftkd::harness::train::LOG_HEADER;
use ftkd::harness::{cache_targets, train_student, train_teacher, Dataset, Experiment, Manifest, Role, RunConfig, SceneData, Seeds, StepLog};
use ftkd::metrics::{detections_from, evaluate, CSV_HEADER};
use ftkd::world::load_scene;

#[derive(Parser)]
#[command(name = "ftkd", version, about = "Future-frame knowledge distillation on a synthetic BEV world")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum StudyArg {
    Components,
    MaskRatio,
    MaskRatioJoint,
    Fld,
    Future,
}

impl From<StudyArg> for Study {
    fn from(s: StudyArg) -> Self {
        match s {
            StudyArg::Components => Study::Components,
            StudyArg::MaskRatio => Study::MaskRatio,
            StudyArg::MaskRatioJoint => Study::MaskRatioJoint,
            StudyArg::Fld => Study::Fld,
            StudyArg::Future => Study::Future,
        }
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the finite-difference gradient suite.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        instances: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
    },
    /// Train the offline teacher (past, current and future frames).
    TrainTeacher {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Per-step loss CSV.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train an online student with supervised plus distillation loss.
    Distill {
        #[arg(long)]
        teacher: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Train the online student with supervised loss only.
    TrainBaseline {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Evaluate a checkpoint; prints a CSV header and one row.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        /// Number of evaluation scenes, or a scene file / directory of scene files.
        #[arg(long)]
        scenes: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run an ablation grid; one CSV row per cell.
    Ablate {
        #[arg(long, value_enum)]
        study: StudyArg,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated master seeds.
        #[arg(long, default_value = "1,2,3", value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write an SVG of ground truth and predictions for one scene.
    PlotBev {
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluation scene index, or a scene file.
        #[arg(long)]
        scene: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0.3)]
        min_score: f64,
    },
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    cfg.validate()?;
    Ok(cfg)
}

fn write_log(path: Option<&Path>, log: &[StepLog]) -> Result<()> {
    if let Some(p) = path {
        let mut s = String::from(LOG_HEADER);
        s.push('\n');
        for l in log {
            s.push_str(&l.csv_row());
            s.push('\n');
        }
        fs::write(p, s).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn print_progress(log: &[StepLog]) {
    let every = (log.len() / 10).max(1);
    for l in log.iter().filter(|l| l.step % every == 0 || l.step + 1 == log.len()) {
        eprintln!(
            "step {:5} lr {:.2e} total {:.4} cls {:.4} box {:.4} kd_pv {:.4} kd_bev {:.4} kd_logits {:.4}",
            l.step, l.lr, l.total, l.sup_cls, l.sup_box, l.kd_pv, l.kd_bev, l.kd_logits
        );
    }
}

fn save_model(out: &Path, params: &ftkd::detector::ParamStore, manifest: &Manifest) -> Result<()> {
    CheckpointArchive::from_store(params).save(out)?;
    manifest.save(out)?;
    eprintln!("wrote {} (run {})", out.display(), manifest.run_id);
    Ok(())
}

fn load_model(ckpt: &Path) -> Result<(ftkd::detector::ParamStore, Manifest)> {
    if !ckpt.exists() {
        bail!("checkpoint {} does not exist", ckpt.display());
    }
    let params = CheckpointArchive::load(ckpt)?.to_store();
    let manifest = Manifest::load(ckpt)?;
    Ok((params, manifest))
}

/// Scenes named on the command line: a count from the eval stream, a scene
/// file, or a directory of scene files (sorted by name).
fn resolve_scenes(arg: &str, cfg: &RunConfig) -> Result<Vec<SceneData>> {
    if let Ok(n) = arg.parse::<usize>() {
        let s = Seeds::derive(cfg.seed);
        return (0..n).map(|i| Ok(SceneData::new(Seeds::item(s.eval, i as u64), cfg)?)).collect();
    }
    let path = Path::new(arg);
    let mut files = if path.is_dir() {
        let mut v: Vec<PathBuf> = fs::read_dir(path)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
        v.sort();
        v
    } else {
        vec![path.to_path_buf()]
    };
    files.retain(|p| p.exists());
    if files.is_empty() {
        bail!("no scenes found at {arg}");
    }
    files
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let text = fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            let objs = load_scene(&text)?;
            Ok(SceneData::from_objects(&objs, Seeds::item(cfg.seed, i as u64), cfg))
        })
        .collect()
}

fn run(cmd: Cmd) -> Result<bool> {
    match cmd {
        Cmd::Gradcheck { instances, seed } => {
            let checks = full_suite(seed, instances)?;
            let mut ok = true;
            for c in &checks {
                println!("{:32} rel_err {:.3e} tol {:.0e} {}", c.name, c.rel_err, c.tol, if c.passed() { "ok" } else { "FAIL" });
                ok &= c.passed();
            }
            println!("{} checks, {}", checks.len(), if ok { "all passed" } else { "FAILURES" });
            Ok(ok)
        }
        Cmd::TrainTeacher { config, out, log } => {
            let cfg = load_config(config.as_deref())?;
            let data = Dataset::generate(&cfg)?;
            let t = train_teacher(&cfg, &data)?;
            print_progress(&t.log);
            write_log(log.as_deref(), &t.log)?;
            save_model(&out, &t.params, &Manifest::new("train-teacher", &cfg, Role::Teacher, None))?;
            Ok(true)
        }
        Cmd::Distill { teacher, config, out, log } => {
            let cfg = load_config(config.as_deref())?;
            let (tparams, tman) = load_model(&teacher).context("distill needs a trained teacher")?;
            if tman.role()? != Role::Teacher {
                bail!("{} is not a teacher checkpoint", teacher.display());
            }
            if tman.config.teacher_detector() != cfg.teacher_detector() || tman.config.world != cfg.world {
                bail!("teacher {} was trained with an incompatible world or model", teacher.display());
            }
            let data = Dataset::generate(&cfg)?;
            let targets = cache_targets(&cfg, &tparams, &data)?;
            let s = train_student(&cfg, &data, Some(&targets))?;
            print_progress(&s.log);
            write_log(log.as_deref(), &s.log)?;
            save_model(&out, &s.params, &Manifest::new("distill", &cfg, Role::Student, Some(teacher.display().to_string())))?;
            Ok(true)
        }
        Cmd::TrainBaseline { config, out, log } => {
            let cfg = load_config(config.as_deref())?.baseline();
            let data = Dataset::generate(&cfg)?;
            let s = train_student(&cfg, &data, None)?;
            print_progress(&s.log);
            write_log(log.as_deref(), &s.log)?;
            save_model(&out, &s.params, &Manifest::new("train-baseline", &cfg, Role::Student, None))?;
            Ok(true)
        }
        Cmd::Eval { ckpt, scenes, out } => {
            let (params, man) = load_model(&ckpt)?;
            let role = man.role()?;
            let scenes = resolve_scenes(&scenes, &man.config)?;
            let preds = predict_scenes(&params, &man.config, role, &scenes)?;
            let dets: Vec<_> = preds.iter().map(detections_from).collect();
            let gts: Vec<_> = scenes.iter().map(|s| s.gts.clone()).collect();
            let report = evaluate(&dets, &gts, man.config.world.num_classes);
            let csv = format!("{CSV_HEADER}\n{}\n", report.csv_row());
            print!("{csv}");
            if let Some(p) = out {
                fs::write(&p, &csv).with_context(|| format!("writing {}", p.display()))?;
                Manifest::new("eval", &man.config, role, man.teacher.clone()).save(&p)?;
            }
            Ok(true)
        }
        Cmd::Ablate { study, config, seeds, out } => {
            let cfg = load_config(config.as_deref())?;
            let mut exp = Experiment::new(true);
            let results = run_study(&mut exp, study.into(), &cfg, &seeds)?;
            let csv = to_csv(&results);
            print!("{csv}");
            if let Some(p) = out {
                fs::write(&p, &csv).with_context(|| format!("writing {}", p.display()))?;
                Manifest::new(&format!("ablate-{}", Study::from(study).name()), &cfg, Role::Student, None).save(&p)?;
            }
            Ok(true)
        }
        Cmd::PlotBev { ckpt, scene, out, min_score } => {
            let (params, man) = load_model(&ckpt)?;
            let role = man.role()?;
            let s = match scene.parse::<usize>() {
                Ok(i) => resolve_scenes(&(i + 1).to_string(), &man.config)?.pop().expect("i + 1 scenes"),
                Err(_) => resolve_scenes(&scene, &man.config)?.swap_remove(0),
            };
            let preds = predict_scenes(&params, &man.config, role, std::slice::from_ref(&s))?;
            let extent = detector_for(&man.config, role).extent;
            let svg = bev_svg(&extent, &s.gts, &detections_from(&preds[0]), min_score);
            fs::write(&out, svg).with_context(|| format!("writing {}", out.display()))?;
            Ok(true)
        }
    }
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
    match run(cli.cmd) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
