use std::fs;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::{error, info};
use serde_json::Value;

use maipp::episode::CommRange;
use maipp::experiment::{
    aggregate, generate_instance, read_records, run_plan, write_summary_csv, ExperimentPlan,
};
use maipp::trace::{read_trace, replay};
use maipp::Error;

#[derive(Parser)]
#[command(
    name = "maipp",
    version,
    about = "Multi-agent informative path planning experiments"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment plan.
    Run {
        /// Plan file (JSON). Defaults are used when omitted.
        plan: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Re-execute an episode trace and check it reproduces.
    Replay { trace: PathBuf },
    /// Write the instances of a plan as JSON fixtures.
    Gen {
        plan: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Recompute the result table from raw JSON-lines records.
    Aggregate {
        records: PathBuf,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print the default plan.
    Template,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    instances: Option<usize>,
    #[arg(long)]
    trials: Option<usize>,
    /// Comma-separated team budgets.
    #[arg(long, value_delimiter = ',')]
    budgets: Option<Vec<f64>>,
    /// Comma-separated ranges; numbers or `global`.
    #[arg(long, value_delimiter = ',')]
    ranges: Option<Vec<CommRange>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write one trace per trial.
    #[arg(long)]
    traces: bool,
    /// Set any plan field: `--set episode.hard_risk=true`. Values are JSON,
    /// falling back to a plain string.
    #[arg(long = "set", value_name = "PATH=VALUE")]
    set: Vec<String>,
}

fn set_path(root: &mut Value, path: &str, value: Value) -> Result<(), Error> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        cur = match cur {
            Value::Object(map) => {
                if last {
                    map.insert(part.to_string(), value);
                    return Ok(());
                }
                map.entry(part.to_string())
                    .or_insert(Value::Object(Default::default()))
            }
            Value::Array(items) => {
                let idx: usize = part
                    .parse()
                    .map_err(|_| Error::Config(format!("bad index {part:?} in {path}")))?;
                let slot = items
                    .get_mut(idx)
                    .ok_or_else(|| Error::Config(format!("index {idx} out of range in {path}")))?;
                if last {
                    *slot = value;
                    return Ok(());
                }
                slot
            }
            _ => return Err(Error::Config(format!("{path} does not name a plan field"))),
        };
    }
    Ok(())
}

fn load_plan(path: Option<&PathBuf>, o: &Overrides) -> Result<ExperimentPlan, Error> {
    let mut value = match path {
        Some(p) => serde_json::from_str::<Value>(&fs::read_to_string(p)?)
            .map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
        None => serde_json::to_value(ExperimentPlan::default())?,
    };
    for item in &o.set {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects PATH=VALUE, got {item:?}")))?;
        let v = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
        set_path(&mut value, k, v)?;
    }
    let mut plan: ExperimentPlan =
        serde_json::from_value(value).map_err(|e| Error::Config(format!("invalid plan: {e}")))?;
    if let Some(v) = o.instances {
        plan.instances = v;
    }
    if let Some(v) = o.trials {
        plan.trials = v;
    }
    if let Some(v) = &o.budgets {
        plan.budgets = v.clone();
    }
    if let Some(v) = &o.ranges {
        plan.comm_ranges = v.clone();
    }
    if let Some(v) = o.seed {
        plan.base_seed = v;
    }
    if let Some(v) = &o.out {
        plan.output_dir = Some(v.clone());
    }
    if o.traces {
        plan.write_traces = true;
    }
    plan.validate()?;
    Ok(plan)
}

fn exit_for(e: &Error) -> ExitCode {
    match e {
        Error::Config(_) | Error::Json(_) => ExitCode::from(2),
        _ => ExitCode::from(1),
    }
}

fn run(cli: Cli) -> Result<ExitCode, Error> {
    match cli.command {
        Command::Run { plan, overrides } => {
            let plan = load_plan(plan.as_ref(), &overrides)?;
            let result = run_plan(&plan)?;
            for (id, why) in &result.failed_instances {
                error!("instance {id} rejected: {why}");
            }
            for r in result.records.iter().filter(|r| r.error.is_some()) {
                error!(
                    "trial {}/{} {} b={} r={} failed: {}",
                    r.instance,
                    r.trial,
                    r.planner,
                    r.budget,
                    r.range,
                    r.error.as_deref().unwrap_or_default()
                );
            }
            if plan.output_dir.is_none() {
                io::stdout().write_all(result.csv()?.as_bytes())?;
            } else {
                info!("{} records written", result.records.len());
            }
            Ok(if result.errored() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Replay { trace } => {
            let t = read_trace(BufReader::new(fs::File::open(&trace)?))?;
            let report = replay(&t)?;
            writeln!(
                io::stdout(),
                "{}: {} rounds reproduced, final team trace {:.6}, termination {:?}",
                trace.display(),
                report.rounds,
                report.final_team_phi,
                report.termination
            )?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Gen { plan, overrides } => {
            let plan = load_plan(plan.as_ref(), &overrides)?;
            let dir = plan
                .output_dir
                .clone()
                .ok_or_else(|| Error::Config("gen needs an output directory (--out)".into()))?;
            fs::create_dir_all(&dir)?;
            for i in 0..plan.instances {
                let inst = generate_instance(&plan, i)?;
                fs::write(dir.join(format!("instance_{i:03}.json")), inst.to_json()?)?;
            }
            info!("{} instances written to {}", plan.instances, dir.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Aggregate { records, out } => {
            let recs = read_records(BufReader::new(fs::File::open(&records)?))?;
            let cells = aggregate(&recs);
            match out {
                Some(p) => write_summary_csv(&cells, BufWriter::new(fs::File::create(p)?))?,
                None => write_summary_csv(&cells, io::stdout().lock())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Template => {
            writeln!(
                io::stdout(),
                "{}",
                serde_json::to_string_pretty(&ExperimentPlan::default())?
            )?;
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(2)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            error!("{e}");
            exit_for(&e)
        }
    }
}
