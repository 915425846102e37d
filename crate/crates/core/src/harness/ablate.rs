//! Ablation grids and a memoizing experiment runner.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::rc::Rc;
use std::str::FromStr;

use super::config::RunConfig;
use super::eval::{evaluate_model, Role};
use super::train::{cache_targets, train_student, train_teacher, Dataset};
use super::{HarnessError, Result};
use crate::detector::ParamStore;
use crate::distill::{DistillConfig, FldSelection, TeacherTargets};
use crate::metrics::EvalReport;

/// BEV mask ratios of the single-location sweep.
pub const BEV_MASK_RATIOS: [f64; 5] = [0.4, 0.5, 0.6, 0.75, 0.9];
/// PV mask ratios of the joint sweep, BEV fixed at 0.5.
pub const JOINT_PV_MASK_RATIOS: [f64; 3] = [0.5, 0.65, 0.75];
/// Teacher future-frame counts compared by the future study.
pub const FUTURE_FRAMES: [usize; 2] = [0, 3];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Study {
    /// Loss components on and off.
    Components,
    /// BEV-only reconstruction over the mask-ratio grid.
    MaskRatio,
    /// PV and BEV reconstruction, BEV ratio fixed, PV ratio swept.
    MaskRatioJoint,
    /// Foreground / background / both for the logit term.
    Fld,
    /// Teacher with and without future frames.
    Future,
}

impl Study {
    pub const ALL: [Study; 5] = [Study::Components, Study::MaskRatio, Study::MaskRatioJoint, Study::Fld, Study::Future];

    pub fn name(self) -> &'static str {
        match self {
            Study::Components => "components",
            Study::MaskRatio => "mask-ratio",
            Study::MaskRatioJoint => "mask-ratio-joint",
            Study::Fld => "fld",
            Study::Future => "future",
        }
    }
}

impl FromStr for Study {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        Study::ALL.into_iter().find(|st| st.name() == s).ok_or_else(|| HarnessError::Config(format!("unknown study {s}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub label: String,
    pub cfg: RunConfig,
}

fn with_terms(base: &RunConfig, pv: bool, bev: bool, logits: bool) -> RunConfig {
    let d = DistillConfig::default();
    let pick = |on: bool, v: f64, dv: f64| if !on { 0.0 } else if v > 0.0 { v } else { dv };
    let mut c = base.clone();
    c.distill.lambda_pv = pick(pv, base.distill.lambda_pv, d.lambda_pv);
    c.distill.lambda_bev = pick(bev, base.distill.lambda_bev, d.lambda_bev);
    c.distill.lambda_logits = pick(logits, base.distill.lambda_logits, d.lambda_logits);
    c
}

/// The cells of one study, in table order.
pub fn grid(study: Study, base: &RunConfig) -> Vec<Cell> {
    let cell = |label: String, cfg: RunConfig| Cell { label, cfg };
    match study {
        Study::Components => [
            ("none", false, false, false),
            ("pv", true, false, false),
            ("bev", false, true, false),
            ("fld", false, false, true),
            ("bev+fld", false, true, true),
            ("pv+bev", true, true, false),
            ("pv+bev+fld", true, true, true),
        ]
        .into_iter()
        .map(|(l, p, b, f)| cell(l.into(), with_terms(base, p, b, f)))
        .collect(),
        Study::MaskRatio => BEV_MASK_RATIOS
            .into_iter()
            .map(|r| {
                let mut c = with_terms(base, false, true, false);
                c.distill.mask_ratio_bev = r;
                cell(format!("bev={r}"), c)
            })
            .collect(),
        Study::MaskRatioJoint => JOINT_PV_MASK_RATIOS
            .into_iter()
            .map(|r| {
                let mut c = with_terms(base, true, true, false);
                c.distill.mask_ratio_bev = 0.5;
                c.distill.mask_ratio_pv = r;
                cell(format!("bev=0.5&pv={r}"), c)
            })
            .collect(),
        Study::Fld => [("fg", FldSelection::Fg), ("bg", FldSelection::Bg), ("fg+bg", FldSelection::Both)]
            .into_iter()
            .map(|(l, s)| {
                let mut c = with_terms(base, false, false, true);
                c.distill.fld = s;
                cell(l.into(), c)
            })
            .collect(),
        Study::Future => FUTURE_FRAMES
            .into_iter()
            .map(|m| cell(format!("m_fut={m}"), RunConfig { m_fut: m, ..base.clone() }))
            .collect(),
    }
}

/// A trained teacher with its evaluation and cached distillation targets.
#[derive(Debug)]
pub struct TeacherRun {
    pub params: ParamStore,
    pub report: EvalReport,
    pub targets: Vec<TeacherTargets>,
}

#[derive(Debug, Clone)]
pub struct StudentRun {
    pub params: ParamStore,
    pub report: EvalReport,
}

/// Trains and evaluates on demand, reusing teachers and students already
/// trained under identical settings.
#[derive(Default)]
pub struct Experiment {
    teachers: BTreeMap<String, Rc<TeacherRun>>,
    students: BTreeMap<(String, u64), Rc<StudentRun>>,
    /// Print a progress line per trained model to stderr.
    pub verbose: bool,
}

impl Experiment {
    pub fn new(verbose: bool) -> Self {
        Experiment { verbose, ..Default::default() }
    }

    fn teacher_key(cfg: &RunConfig) -> String {
        format!("{}/{}/{}", cfg.teacher_hash(), cfg.n_his, cfg.distill.tsa_mean)
    }

    pub fn teacher(&mut self, cfg: &RunConfig, data: &Dataset) -> Result<Rc<TeacherRun>> {
        let key = Self::teacher_key(cfg);
        if let Some(t) = self.teachers.get(&key) {
            return Ok(t.clone());
        }
        let t0 = std::time::Instant::now();
        let trained = train_teacher(cfg, data)?;
        let report = evaluate_model(&trained.params, cfg, Role::Teacher, &data.eval)?;
        let targets = cache_targets(cfg, &trained.params, data)?;
        if self.verbose {
            eprintln!("teacher seed={} m_fut={} nds={:.4} map={:.4} ({:.1?})", cfg.seed, cfg.m_fut, report.toy_nds, report.toy_map, t0.elapsed());
        }
        let run = Rc::new(TeacherRun { params: trained.params, report, targets });
        self.teachers.insert(key, run.clone());
        Ok(run)
    }

    /// Student trained under `cfg` (distilled unless every KD weight is zero).
    pub fn student(&mut self, cfg: &RunConfig) -> Result<Rc<StudentRun>> {
        let key = (cfg.config_hash(), cfg.seed);
        if let Some(s) = self.students.get(&key) {
            return Ok(s.clone());
        }
        let data = Dataset::generate(cfg)?;
        let t0 = std::time::Instant::now();
        let trained = if cfg.distill.is_disabled() {
            train_student(cfg, &data, None)?
        } else {
            let t = self.teacher(cfg, &data)?;
            train_student(cfg, &data, Some(&t.targets))?
        };
        let report = evaluate_model(&trained.params, cfg, Role::Student, &data.eval)?;
        if self.verbose {
            eprintln!("student seed={} kd={} nds={:.4} map={:.4} ({:.1?})", cfg.seed, !cfg.distill.is_disabled(), report.toy_nds, report.toy_map, t0.elapsed());
        }
        let run = Rc::new(StudentRun { params: trained.params, report });
        self.students.insert(key, run.clone());
        Ok(run)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CellResult {
    pub study: Study,
    pub label: String,
    pub cfg: RunConfig,
    pub config_hash: String,
    pub seeds: Vec<u64>,
    pub reports: Vec<EvalReport>,
}

/// Sample mean and standard deviation (zero for a single value).
pub fn mean_sd(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let sd = if xs.len() < 2 { 0.0 } else { (xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt() };
    (m, sd)
}

impl CellResult {
    pub fn stat(&self, f: impl Fn(&EvalReport) -> f64) -> (f64, f64) {
        mean_sd(&self.reports.iter().map(f).collect::<Vec<_>>())
    }
}

pub fn run_study(exp: &mut Experiment, study: Study, base: &RunConfig, seeds: &[u64]) -> Result<Vec<CellResult>> {
    let mut seeds = seeds.to_vec();
    seeds.sort_unstable();
    seeds.dedup();
    if seeds.is_empty() {
        return Err(HarnessError::Config("ablation needs at least one seed".into()));
    }
    grid(study, base)
        .into_iter()
        .map(|cell| {
            let reports = seeds
                .iter()
                .map(|&s| Ok(exp.student(&RunConfig { seed: s, ..cell.cfg.clone() })?.report.clone()))
                .collect::<Result<Vec<_>>>()?;
            Ok(CellResult { study, label: cell.label, config_hash: cell.cfg.config_hash(), cfg: cell.cfg, seeds: seeds.clone(), reports })
        })
        .collect()
}

pub const CSV_HEADER: &str = "study,cell,lambda_pv,lambda_bev,lambda_logits,mask_ratio_pv,mask_ratio_bev,fld,m_fut,n_seeds,\
nds_mean,nds_sd,map_mean,map_sd,mave_mean,mave_sd,config_hash,seeds";

pub fn to_csv(results: &[CellResult]) -> String {
    let mut s = String::from(CSV_HEADER);
    s.push('\n');
    for r in results {
        let d = &r.cfg.distill;
        let (nm, ns) = r.stat(|e| e.toy_nds);
        let (mm, ms) = r.stat(|e| e.toy_map);
        let (vm, vs) = r.stat(|e| e.mave_ms);
        let fld = match d.fld {
            FldSelection::Fg => "fg",
            FldSelection::Bg => "bg",
            FldSelection::Both => "fg+bg",
        };
        let seeds: Vec<String> = r.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{},{nm:.6},{ns:.6},{mm:.6},{ms:.6},{vm:.6},{vs:.6},{},{}",
            r.study.name(),
            r.label,
            d.lambda_pv,
            d.lambda_bev,
            d.lambda_logits,
            d.mask_ratio_pv,
            d.mask_ratio_bev,
            fld,
            r.cfg.m_fut,
            r.seeds.len(),
            r.config_hash,
            seeds.join(";")
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grids_match_table_shapes() {
        let base = RunConfig::default();
        let sizes: Vec<usize> = Study::ALL.iter().map(|&s| grid(s, &base).len()).collect();
        assert_eq!(sizes, vec![7, 5, 3, 3, 2]);
        let comp = grid(Study::Components, &base);
        assert!(comp[0].cfg.distill.is_disabled());
        let last = &comp[6].cfg.distill;
        assert_eq!((last.lambda_pv, last.lambda_bev, last.lambda_logits), (1e-3, 16.0, 1.0));
        let ratios: Vec<f64> = grid(Study::MaskRatio, &base).iter().map(|c| c.cfg.distill.mask_ratio_bev).collect();
        assert_eq!(ratios, BEV_MASK_RATIOS);
        for c in grid(Study::MaskRatio, &base) {
            assert_eq!((c.cfg.distill.lambda_pv, c.cfg.distill.lambda_logits), (0.0, 0.0));
        }
        let hashes: std::collections::BTreeSet<String> = comp.iter().map(|c| c.cfg.config_hash()).collect();
        assert_eq!(hashes.len(), 7);
    }

    #[test]
    fn study_names_parse() {
        for s in Study::ALL {
            assert_eq!(s.name().parse::<Study>().unwrap(), s);
        }
        assert!("tables".parse::<Study>().is_err());
    }

    #[test]
    fn mean_sd_by_hand() {
        assert_eq!(mean_sd(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_sd(&[1.0, 2.0, 3.0, 4.0]);
        assert!((m - 2.5).abs() < 1e-12 && (s - (5.0f64 / 3.0).sqrt()).abs() < 1e-12);
    }
}
