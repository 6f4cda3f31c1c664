//! `sfo`: generate synthetic experiments, superimpose a skull on a
//! photograph, run rank experiments and summarize them.
//!
//! Exit codes: 0 success, 2 invalid arguments or inputs, 3 I/O failure,
//! 4 optimization failure.

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sfo_core::de::{self, DeError};
use sfo_core::eval::{
    self, generate_dataset, pose_label, records_csv, run_suite, summarize, summary_csv, Dataset,
    NoiseProfile, RunRecord, SummaryRow,
};
use sfo_core::fitness::{FitnessError, SfoProblem};
use sfo_core::io::{
    self, load_case, load_subject, read_json, save_case, save_subject, write_atomic, write_json,
    IoError,
};

use config::{CliConfig, ConfigError};

#[derive(Debug, Parser)]
#[command(name = "sfo", version, about = "Automated skull-face overlay")]
struct Cli {
    /// Seed for data generation (gen), DE (sfo) and the first rank repeat.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Worker threads; all cores when omitted.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// TOML configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate subjects and photograph bundles.
    Gen {
        #[arg(long, default_value_t = 6)]
        subjects: usize,
        /// Photographs per subject; the first half (rounded up) are frontal.
        #[arg(long, default_value_t = 10)]
        views: usize,
        /// Frontal photographs per subject; overrides the half split.
        #[arg(long)]
        frontal: Option<usize>,
        #[arg(long, default_value = "A")]
        profile: NoiseProfile,
    },
    /// Superimpose one skull on one photograph.
    Sfo {
        /// Case bundle directory.
        #[arg(long)]
        case: PathBuf,
        /// Subject directory holding the skull.
        #[arg(long)]
        skull: PathBuf,
        /// Wall-clock budget in seconds; 0 disables it.
        #[arg(long)]
        max_seconds: Option<f64>,
    },
    /// Rank every skull of an experiment against every photograph.
    Rank {
        /// Experiment directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        /// Seeds per photograph; overrides the config.
        #[arg(long)]
        repeats: Option<usize>,
        /// Comma-separated method names; overrides the config.
        #[arg(long, value_delimiter = ',')]
        methods: Option<Vec<String>>,
        /// Wall-clock budget per superimposition in seconds; 0 disables it.
        #[arg(long)]
        max_seconds: Option<f64>,
    },
    /// Re-aggregate the records of a rank run and print the tables.
    Report {
        /// Directory holding `records.json` from `rank`.
        #[arg(long)]
        data: PathBuf,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn invalid(e: impl std::fmt::Display) -> Self {
        Self {
            code: 2,
            message: e.to_string(),
        }
    }

    fn io(e: impl std::fmt::Display) -> Self {
        Self {
            code: 3,
            message: e.to_string(),
        }
    }

    fn optimization(e: impl std::fmt::Display) -> Self {
        Self {
            code: 4,
            message: e.to_string(),
        }
    }
}

impl From<IoError> for Failure {
    fn from(e: IoError) -> Self {
        match e {
            IoError::Version { .. } | IoError::Kind { .. } => Self::invalid(e),
            _ => Self::io(e),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        match e {
            ConfigError::Read { .. } => Self::io(e),
            _ => Self::invalid(e),
        }
    }
}

type CmdResult = Result<(), Failure>;

const EXPERIMENT_FILE: &str = "experiment.json";
const RECORDS_FILE: &str = "records.json";

/// Index of a generated experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ExperimentIndex {
    format_version: u32,
    profile: NoiseProfile,
    data_seed: u64,
    frontal_views: usize,
    lateral_views: usize,
    subjects: Vec<String>,
    cases: Vec<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if n == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .expect("thread pool is configured once");
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: &Cli) -> CmdResult {
    let (cfg, base) = CliConfig::load(cli.config.as_deref())?;
    match &cli.command {
        Command::Gen {
            subjects,
            views,
            frontal,
            profile,
        } => {
            let out = cli
                .out
                .clone()
                .unwrap_or_else(|| PathBuf::from("experiment"));
            cmd_gen(
                &cfg,
                base.as_deref(),
                &out,
                cli.seed,
                *subjects,
                *views,
                *frontal,
                *profile,
            )
        }
        Command::Sfo {
            case,
            skull,
            max_seconds,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| PathBuf::from("sfo-out"));
            cmd_sfo(
                &cfg,
                base.as_deref(),
                &out,
                cli.seed,
                case,
                skull,
                *max_seconds,
            )
        }
        Command::Rank {
            data,
            repeats,
            methods,
            max_seconds,
        } => {
            let out = cli.out.clone().unwrap_or_else(|| data.clone());
            let mut cfg = cfg;
            if let Some(r) = repeats {
                cfg.rank.repeats = *r;
            }
            if let Some(m) = methods {
                cfg.rank.methods = m.clone();
            }
            cmd_rank(&cfg, base.as_deref(), &out, cli.seed, data, *max_seconds)
        }
        Command::Report { data } => cmd_report(data, cli.out.as_deref()),
    }
}

#[allow(clippy::too_many_arguments)]
fn cmd_gen(
    cfg: &CliConfig,
    base: Option<&Path>,
    out: &Path,
    seed: u64,
    subjects: usize,
    views: usize,
    frontal: Option<usize>,
    profile: NoiseProfile,
) -> CmdResult {
    if subjects == 0 || views == 0 {
        return Err(Failure::invalid("--subjects and --views must be positive"));
    }
    let frontal = frontal.unwrap_or(views.div_ceil(2));
    if frontal > views {
        return Err(Failure::invalid("--frontal exceeds --views"));
    }
    let table = cfg.cone_table(base)?;
    let data = generate_dataset(
        subjects,
        frontal,
        views - frontal,
        profile,
        seed,
        &cfg.morphology,
        &cfg.camera,
        &table,
    )
    .map_err(Failure::invalid)?;
    for s in &data.subjects {
        save_subject(&out.join("subjects").join(&s.subject_id), s)?;
    }
    for c in &data.cases {
        save_case(&out.join("cases").join(&c.case_id), c)?;
    }
    let index = ExperimentIndex {
        format_version: io::FORMAT_VERSION,
        profile,
        data_seed: seed,
        frontal_views: frontal,
        lateral_views: views - frontal,
        subjects: data.subjects.iter().map(|s| s.subject_id.clone()).collect(),
        cases: data.cases.iter().map(|c| c.case_id.clone()).collect(),
    };
    write_json(&out.join(EXPERIMENT_FILE), &index)?;
    write_atomic(&out.join("config.toml"), cfg.to_toml_string().as_bytes())?;
    let frontal_cases = data
        .cases
        .iter()
        .filter(|c| pose_label(c.looking) == "frontal")
        .count();
    println!(
        "generated {} subjects and {} cases ({} frontal, {} lateral), profile {:?}, seed {} -> {}",
        data.subjects.len(),
        data.cases.len(),
        frontal_cases,
        data.cases.len() - frontal_cases,
        profile,
        seed,
        out.display()
    );
    Ok(())
}

/// Deterministic parts of a superimposition run.
#[derive(Debug, Serialize)]
struct RunInfo<'a> {
    case_id: &'a str,
    skull_id: &'a str,
    seed: u64,
    generations: usize,
    evaluations: usize,
    termination: de::Termination,
}

fn cmd_sfo(
    cfg: &CliConfig,
    base: Option<&Path>,
    out: &Path,
    seed: u64,
    case_dir: &Path,
    skull_dir: &Path,
    max_seconds: Option<f64>,
) -> CmdResult {
    let case = load_case(case_dir)?;
    let skull = load_subject(skull_dir)?;
    let table = cfg.cone_table(base)?;
    let problem = SfoProblem::new(&case, &skull, &cfg.fitness).map_err(|e| match e {
        FitnessError::IncompleteCase(what) => Failure::invalid(format!(
            "case {} lacks {what}, which the enabled fitness terms require (disable the term in [fitness])",
            case.case_id
        )),
        other => Failure::invalid(other),
    })?;
    let pairing = table.pairing().map_err(Failure::invalid)?;
    let de_cfg = cfg.de_config(seed, max_seconds);
    let result = de::run(&problem, &pairing, &de_cfg).map_err(|e| match e {
        DeError::AllInfeasible => Failure::optimization(e),
        other => Failure::invalid(other),
    })?;
    let b = &result.breakdown;
    let solution = b
        .solution
        .as_ref()
        .ok_or_else(|| Failure::optimization("best candidate has no camera"))?;

    write_json(&out.join("best_genotype.json"), &result.best)?;
    write_json(&out.join("breakdown.json"), b)?;
    write_json(&out.join("solution.json"), solution)?;
    write_atomic(&out.join("trace.csv"), result.trace.to_csv().as_bytes())?;
    write_json(
        &out.join("run.json"),
        &RunInfo {
            case_id: &case.case_id,
            skull_id: &skull.subject_id,
            seed,
            generations: result.trace.generations(),
            evaluations: result.trace.evaluations,
            termination: result.trace.termination,
        },
    )?;

    let observed: Vec<_> = problem_observed(&case);
    let estimated: Vec<_> = problem
        .visible_facial_points(&result.best.values)
        .iter()
        .filter_map(|p| solution.camera.project(p).ok())
        .collect();
    let overlay = io::render_overlay(
        case.face_mask.as_ref(),
        &skull.skull_mesh,
        &solution.camera,
        &observed,
        &estimated,
    );
    write_atomic(&out.join("overlay.ppm"), &overlay.to_ppm())?;

    let bpe = if case.subject_id == skull.subject_id {
        eval::case_bpe_mm(solution, &case).ok()
    } else {
        None
    };
    println!(
        "{} on {}: fitness {:.6} (mse {:.6}, camera {:.6}, overlap {:.6}, parallelism {:.6}), focal {:.1} px, SCD {:.1} mm{}, {} generations in {:.2} s",
        case.case_id,
        skull.subject_id,
        b.total,
        b.mse_pix,
        b.p_cam,
        b.p_skof,
        b.p_pll,
        solution.focal(),
        solution.scd_mm,
        bpe.map(|v| format!(", BPE {v:.3} mm")).unwrap_or_default(),
        result.trace.generations(),
        result.trace.elapsed_s,
    );
    Ok(())
}

fn problem_observed(case: &sfo_core::synth::CaseBundle) -> Vec<sfo_core::geometry::Point2> {
    case.landmarks_2d
        .iter()
        .filter(|(k, _)| case.visibility.get(*k).copied().unwrap_or(false))
        .map(|(_, p)| *p)
        .collect()
}

fn load_experiment(dir: &Path) -> Result<(ExperimentIndex, Dataset), Failure> {
    let index: ExperimentIndex = read_json(&dir.join(EXPERIMENT_FILE))?;
    if index.format_version != io::FORMAT_VERSION {
        return Err(IoError::Version {
            found: index.format_version,
        }
        .into());
    }
    let subjects = index
        .subjects
        .iter()
        .map(|id| load_subject(&dir.join("subjects").join(id)))
        .collect::<Result<Vec<_>, _>>()?;
    let cases = index
        .cases
        .iter()
        .map(|id| load_case(&dir.join("cases").join(id)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((index, Dataset { subjects, cases }))
}

fn cmd_rank(
    cfg: &CliConfig,
    base: Option<&Path>,
    out: &Path,
    seed: u64,
    data_dir: &Path,
    max_seconds: Option<f64>,
) -> CmdResult {
    if cfg.rank.repeats == 0 {
        return Err(Failure::invalid("--repeats must be positive"));
    }
    let (index, data) = load_experiment(data_dir)?;
    let table = cfg.cone_table(base)?;
    let de_cfg = cfg.de_config(seed, max_seconds);
    let methods = cfg.methods(&de_cfg)?;
    let seeds: Vec<u64> = (0..cfg.rank.repeats as u64)
        .map(|r| seed.wrapping_add(r))
        .collect();
    let result = run_suite(
        &data,
        index.profile,
        &methods,
        &seeds,
        cfg.rank.direction_sets,
        &table,
    )
    .map_err(Failure::invalid)?;
    write_atomic(
        &out.join("raw.csv"),
        records_csv(&result.records).as_bytes(),
    )?;
    write_json(&out.join(RECORDS_FILE), &result.records)?;
    write_atomic(
        &out.join("summary.csv"),
        summary_csv(&result.summary).as_bytes(),
    )?;
    println!(
        "{} photographs x {} skulls x {} runs per method -> {} records in {}",
        data.cases.len(),
        data.subjects.len(),
        result.records.len() / (methods.len() * data.cases.len() * data.subjects.len()).max(1),
        result.records.len(),
        out.display()
    );
    print_tables(&result.summary, &result.records);
    Ok(())
}

fn cmd_report(data_dir: &Path, out: Option<&Path>) -> CmdResult {
    let records: Vec<RunRecord> = read_json(&data_dir.join(RECORDS_FILE))?;
    let summary = summarize(&records);
    if let Some(out) = out {
        write_atomic(&out.join("summary.csv"), summary_csv(&summary).as_bytes())?;
    }
    print_tables(&summary, &records);
    Ok(())
}

fn print_tables(summary: &[SummaryRow], records: &[RunRecord]) {
    println!();
    println!(
        "{:<18} {:<8} {:>10} {:>12} {:>12}",
        "method", "pose", "mean rank", "BPE (mm)", "time (s)"
    );
    for r in summary {
        println!(
            "{:<18} {:<8} {:>10.3} {:>12.3} {:>12.3}",
            r.method, r.pose, r.mean_rank, r.mean_bpe_mm, r.mean_time_s
        );
    }
    println!();
    println!(
        "{:<18} {:<8} {:>16} {:>18} {:>14}",
        "method", "pose", "worst implaus %", "mean px outside %", "positive SFOs"
    );
    for r in summary {
        let positives: Vec<&RunRecord> = records
            .iter()
            .filter(|x| x.positive && x.method == r.method && x.pose == r.pose)
            .collect();
        let mean_out = if positives.is_empty() {
            f64::NAN
        } else {
            positives.iter().map(|x| x.pct_pixels_outside).sum::<f64>() / positives.len() as f64
        };
        println!(
            "{:<18} {:<8} {:>16.2} {:>18.3} {:>14}",
            r.method,
            r.pose,
            r.worst_implausible_pct,
            mean_out,
            positives.len()
        );
    }
}
