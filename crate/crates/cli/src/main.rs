//! Command-line front end. Exit codes: 0 pass, 1 property failure,
//! 2 usage or input error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use aoi_observer::gains::{design_gains, GainError, GainRequest};
use aoi_observer::graph::{check_conditions, is_jointly_strongly_r_robust, IntervalRule};
use aoi_observer::io::{parse_schedule, parse_system, GainFile};
use aoi_observer::lti::decompose;
use aoi_observer::reproduce::{reproduce, REPRODUCTION_IDS};
use aoi_observer::scenario::{parse_scenario, ScenarioFile};
use aoi_observer::sim::{analyze, assert_online_invariants, run, write_csv, RunReport};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde_json::json;

#[derive(Parser)]
#[command(name = "aoi-observer", version, about = "Distributed state estimation over time-varying graphs")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file, or every scenario in a directory with --batch.
    Run(RunArgs),
    /// Run every scenario in a directory.
    Batch {
        dir: PathBuf,
        #[command(flatten)]
        common: CommonRun,
    },
    /// Run a built-in reproduction and print one line per check.
    Reproduce {
        /// One of the built-in ids, or "all".
        id: String,
    },
    /// Check interval conditions and, optionally, joint strong r-robustness.
    CheckGraph {
        #[arg(long)]
        schedule: PathBuf,
        /// r and the window length T.
        #[arg(long, num_args = 2, value_names = ["R", "T"])]
        robust: Option<Vec<u64>>,
        /// Source ids, comma separated.
        #[arg(long, value_delimiter = ',', requires = "robust")]
        sources: Vec<usize>,
    },
    /// Design observer gains and print a gain file.
    DesignGains {
        #[arg(long)]
        system: PathBuf,
        #[arg(long, required_unless_present = "nilpotent")]
        rho: Option<f64>,
        #[arg(long, default_value_t = 0.0)]
        delta: f64,
        #[arg(long, conflicts_with_all = ["rho"])]
        nilpotent: bool,
        #[arg(long, env = "AOI_SEED", default_value_t = 0)]
        seed: u64,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file.
    #[arg(required_unless_present = "batch", conflicts_with = "batch")]
    scenario: Option<PathBuf>,
    /// Directory of scenario files.
    #[arg(long)]
    batch: Option<PathBuf>,
    #[command(flatten)]
    common: CommonRun,
}

#[derive(Args, Clone)]
struct CommonRun {
    /// Output directory for traces and summaries.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Replaces the scenario seed.
    #[arg(long, env = "AOI_SEED")]
    seed: Option<u64>,
    /// Replaces the scenario horizon.
    #[arg(long)]
    horizon: Option<u64>,
}

const PASS: u8 = 0;
const PROPERTY_FAIL: u8 = 1;
const INPUT_ERROR: u8 = 2;

/// Failure with an exit code and a message for stderr.
struct Failure(u8, String);

fn input_error(context: &Path, e: impl std::fmt::Display) -> Failure {
    Failure(INPUT_ERROR, format!("{}: {e}", context.display()))
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| input_error(path, e))
}

fn load_scenario(path: &Path, common: &CommonRun) -> Result<ScenarioFile, Failure> {
    let mut file = parse_scenario(&read(path)?).map_err(|e| input_error(path, e))?;
    if let Some(seed) = common.seed {
        file.seed = seed;
    }
    if let Some(h) = common.horizon {
        file.horizon = h;
    }
    Ok(file)
}

fn file_stem(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Runs one scenario and writes `<name>.csv` and `<name>.summary.json`.
fn run_one(path: &Path, common: &CommonRun) -> Result<RunReport, Failure> {
    let file = load_scenario(path, common)?;
    let prepared = file.prepare().map_err(|e| input_error(path, e))?;
    let trace = run(&prepared).map_err(|e| input_error(path, e))?;
    let violations = assert_online_invariants(&prepared, &trace);
    let report = analyze(&prepared, &trace, &violations);
    fs::create_dir_all(&common.out).map_err(|e| input_error(&common.out, e))?;
    let stem = file_stem(&file.name);
    let csv_path = common.out.join(format!("{stem}.csv"));
    let csv = fs::File::create(&csv_path).map_err(|e| input_error(&csv_path, e))?;
    write_csv(&trace, std::io::BufWriter::new(csv)).map_err(|e| input_error(&csv_path, e))?;
    let json_path = common.out.join(format!("{stem}.summary.json"));
    let text = serde_json::to_string_pretty(&report).expect("summary serializes");
    fs::write(&json_path, text + "\n").map_err(|e| input_error(&json_path, e))?;
    Ok(report)
}

fn describe(report: &RunReport) -> String {
    let s = &report.summary;
    let mut line = format!(
        "{}: {} steps, final max error {:e}, {} violations",
        s.name, s.horizon, s.final_max_error, s.violation_count
    );
    if s.diverged {
        line.push_str(", diverged");
    }
    if let Some(r) = &report.rate {
        line.push_str(&format!(", rate {}", if r.pass { "ok" } else { "not met" }));
    }
    if let (Some(d), Some(met)) = (report.deadline, report.deadline_met) {
        line.push_str(&format!(", deadline {d} {}", if met { "met" } else { "missed" }));
    }
    line
}

fn cmd_run(path: &Path, common: &CommonRun) -> Result<u8, Failure> {
    let report = run_one(path, common)?;
    println!("{}", describe(&report));
    Ok(if report.passed() { PASS } else { PROPERTY_FAIL })
}

fn cmd_batch(dir: &Path, common: &CommonRun, verbose: bool) -> Result<u8, Failure> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| input_error(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure(INPUT_ERROR, format!("{}: no scenario files", dir.display())));
    }
    let results: Vec<Result<RunReport, Failure>> = paths.par_iter().map(|p| run_one(p, common)).collect();
    let mut code = PASS;
    let mut manifest = Vec::new();
    for (path, result) in paths.iter().zip(results) {
        let file = path.file_name().unwrap_or_default().to_string_lossy().into_owned();
        match result {
            Ok(report) => {
                println!("{}", describe(&report));
                if !report.passed() {
                    code = code.max(PROPERTY_FAIL);
                }
                manifest.push(json!({
                    "file": file,
                    "name": report.summary.name,
                    "status": if report.passed() { "pass" } else { "fail" },
                    "violations": report.summary.violation_count,
                    "diverged": report.summary.diverged,
                }));
            }
            Err(Failure(c, msg)) => {
                eprintln!("error: {msg}");
                code = code.max(c);
                manifest.push(json!({ "file": file, "status": "error", "message": msg }));
            }
        }
        if verbose {
            eprintln!("done {file}");
        }
    }
    let manifest_path = common.out.join("manifest.json");
    fs::create_dir_all(&common.out).map_err(|e| input_error(&common.out, e))?;
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|e| input_error(&manifest_path, e))?;
    Ok(code)
}

fn cmd_reproduce(id: &str) -> Result<u8, Failure> {
    let ids: Vec<&str> = if id == "all" {
        REPRODUCTION_IDS.to_vec()
    } else if REPRODUCTION_IDS.contains(&id) {
        vec![id]
    } else {
        return Err(Failure(
            INPUT_ERROR,
            format!("unknown id {id:?}; expected one of {} or all", REPRODUCTION_IDS.join(", ")),
        ));
    };
    let mut code = PASS;
    for id in ids {
        let r = reproduce(id).map_err(|e| Failure(INPUT_ERROR, format!("{id}: {e}")))?;
        for c in &r.checks {
            println!("{} {id}: {} ({})", if c.pass { "PASS" } else { "FAIL" }, c.label, c.detail);
        }
        if !r.all_pass() {
            code = PROPERTY_FAIL;
        }
    }
    Ok(code)
}

fn cmd_check_graph(schedule: &Path, robust: Option<&[u64]>, sources: &[usize]) -> Result<u8, Failure> {
    let seq = parse_schedule(&read(schedule)?).map_err(|e| input_error(schedule, e))?;
    let conditions = check_conditions(&seq);
    let mut ok = conditions.all_ok();
    let mut out = json!({ "conditions": conditions });
    if let Some(&[r, period]) = robust {
        let report = is_jointly_strongly_r_robust(&seq, sources, r as usize, period)
            .map_err(|e| input_error(schedule, e))?;
        ok = report.ok;
        out["robustness"] = json!(report);
        if !matches!(seq.rule(), IntervalRule::Constant { period: p } if *p == period) {
            out["note"] = json!("window length differs from the declared interval rule");
        }
    }
    println!("{}", serde_json::to_string_pretty(&out).expect("report serializes"));
    Ok(if ok { PASS } else { PROPERTY_FAIL })
}

fn cmd_design_gains(
    system: &Path,
    rho: Option<f64>,
    delta: f64,
    nilpotent: bool,
    seed: u64,
    out: Option<&Path>,
) -> Result<u8, Failure> {
    let sys = parse_system(&read(system)?).map_err(|e| input_error(system, e))?;
    let dec = decompose(&sys).map_err(|e| input_error(system, e))?;
    let request = match (nilpotent, rho) {
        (true, _) => GainRequest::Nilpotent,
        (false, Some(rho)) => GainRequest::Rate { rho, delta },
        (false, None) => return Err(Failure(INPUT_ERROR, "--rho or --nilpotent is required".into())),
    };
    let gains = match design_gains(&dec, request, seed) {
        Ok(g) => g,
        Err(e @ GainError::InvalidParameter(_)) => return Err(Failure(INPUT_ERROR, e.to_string())),
        Err(e) => return Err(Failure(PROPERTY_FAIL, e.to_string())),
    };
    let text = serde_json::to_string_pretty(&GainFile::new(&dec, &gains)).expect("gain file serializes") + "\n";
    match out {
        Some(path) => fs::write(path, text).map_err(|e| input_error(path, e))?,
        None => print!("{text}"),
    }
    Ok(PASS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run(args) => match (&args.scenario, &args.batch) {
            (_, Some(dir)) => cmd_batch(dir, &args.common, cli.verbose),
            (Some(path), None) => cmd_run(path, &args.common),
            (None, None) => unreachable!("clap requires one of them"),
        },
        Command::Batch { dir, common } => cmd_batch(dir, common, cli.verbose),
        Command::Reproduce { id } => cmd_reproduce(id),
        Command::CheckGraph {
            schedule,
            robust,
            sources,
        } => cmd_check_graph(schedule, robust.as_deref(), sources),
        Command::DesignGains {
            system,
            rho,
            delta,
            nilpotent,
            seed,
            out,
        } => cmd_design_gains(system, *rho, *delta, *nilpotent, *seed, out.as_deref()),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(Failure(code, msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
