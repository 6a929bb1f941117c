//! Command-line front end: single runs, Monte Carlo batches and matrices,
//! exhaustive checking, trace replay, sign rendering/certifying, and an
//! interactive stepper. Exit codes: 0 success, 1 usage or input error,
//! 2 violation/mismatch/rejection, 3 aborted or budget exhausted.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use railshield::modelcheck::{self, Mutation, Verdict};
use railshield::montecarlo;
use railshield::perception::DetectionClass;
use railshield::signvision::{self, CvParams};
use railshield::simengine::{self, ReplayError, TraceHeader};
use railshield::worldmodel::{
    apply_event, check_safety, enabled_events, RunStatus, WorldState,
};
use railshield::{controller, Rng, ScenarioConfig};

#[derive(Parser)]
#[command(name = "railshield", version, about = "Closed-loop shunting simulator with a perception safety shield")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one seeded simulation and print its summary.
    Simulate(SimulateArgs),
    /// Run seeded batches, optionally over the full shield/cert matrix.
    Montecarlo(MontecarloArgs),
    /// Exhaustively explore the loop under perfect perception.
    Check(CheckArgs),
    /// Re-simulate a recorded trace and verify it byte for byte.
    Replay(ReplayArgs),
    /// Step through a scenario interactively, one event at a time.
    Animate(AnimateArgs),
    /// Render a synthetic sign scene to a PGM file.
    RenderSign(RenderSignArgs),
    /// Run the certificate checker on a PGM scene.
    CertifySign(CertifySignArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Scenario JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides RAILSHIELD_SEED and the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Write the run trace (JSON lines) here.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args)]
struct MontecarloArgs {
    /// Scenario JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = 500)]
    runs: usize,
    /// Seed for the per-run seed sequence; defaults to the config seed.
    #[arg(long)]
    base_seed: Option<u64>,
    /// Run all six shield/cert cells instead of the configured one.
    #[arg(long)]
    matrix: bool,
    /// Write the JSON report here.
    #[arg(long)]
    report: Option<PathBuf>,
    /// Worker threads; results are identical for any value.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
}

#[derive(Args)]
struct CheckArgs {
    /// Scenario JSON; the small verification preset when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Abort with exit 3 once this many states have been stored.
    #[arg(long, default_value_t = 1_000_000)]
    max_states: usize,
    /// Controller variant: intact or ignore-signals.
    #[arg(long, default_value = "intact")]
    mutate: String,
}

#[derive(Args)]
struct ReplayArgs {
    /// Trace file produced by simulate --trace.
    #[arg(long)]
    trace: PathBuf,
    /// Scenario JSON the trace was recorded against.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct AnimateArgs {
    /// Scenario JSON; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct RenderSignArgs {
    /// stop, permission, or none.
    #[arg(long)]
    class: String,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output PGM path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    occlusion_prob: Option<f64>,
    #[arg(long)]
    distractor_prob: Option<f64>,
}

#[derive(Args)]
struct CertifySignArgs {
    /// PGM scene to check.
    image: PathBuf,
    /// Expected class; when given, acceptance requires an exact match.
    claimed: Option<String>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Montecarlo(args) => cmd_montecarlo(args),
        Command::Check(args) => cmd_check(args),
        Command::Replay(args) => cmd_replay(args),
        Command::Animate(args) => cmd_animate(args),
        Command::RenderSign(args) => cmd_render_sign(args),
        Command::CertifySign(args) => cmd_certify_sign(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(1)
        }
    }
}

fn load_config(path: Option<&Path>) -> Result<ScenarioConfig> {
    match path {
        None => Ok(ScenarioConfig::default_scenario()),
        Some(p) => {
            let text = fs::read_to_string(p)
                .with_context(|| format!("cannot read config {}", p.display()))?;
            ScenarioConfig::from_json(&text)
                .with_context(|| format!("cannot load config {}", p.display()))
        }
    }
}

fn resolve_seed(flag: Option<u64>, cfg_seed: u64) -> Result<u64> {
    if let Some(seed) = flag {
        return Ok(seed);
    }
    match std::env::var("RAILSHIELD_SEED") {
        Ok(text) => text
            .trim()
            .parse()
            .with_context(|| format!("RAILSHIELD_SEED must be an unsigned integer, got {text:?}")),
        Err(_) => Ok(cfg_seed),
    }
}

fn parse_class(text: &str) -> Result<DetectionClass> {
    match text {
        "stop" => Ok(DetectionClass::Stop),
        "permission" => Ok(DetectionClass::Permission),
        "none" => Ok(DetectionClass::NoSignal),
        other => bail!("unknown class {other:?}; expected stop, permission, or none"),
    }
}

fn class_name(class: DetectionClass) -> &'static str {
    match class {
        DetectionClass::NoSignal => "none",
        DetectionClass::Stop => "stop",
        DetectionClass::Permission => "permission",
    }
}

fn cmd_simulate(args: SimulateArgs) -> Result<u8> {
    let cfg = load_config(args.config.as_deref())?;
    let seed = resolve_seed(args.seed, cfg.seed)?;
    let mut buf = args.trace.as_ref().map(|_| Vec::new());
    let result = simengine::run(&cfg, seed, 0, buf.as_mut());
    if let Some(path) = &args.trace {
        let mut file = fs::File::create(path)
            .with_context(|| format!("cannot create trace {}", path.display()))?;
        simengine::write_trace(&mut file, &TraceHeader::new(&cfg, seed), &buf.unwrap_or_default())
            .with_context(|| format!("cannot write trace {}", path.display()))?;
    }
    println!("{}", serde_json::to_string_pretty(&result)?);
    Ok(match result.terminal_status {
        RunStatus::Violation(_) => 2,
        RunStatus::Aborted => 3,
        _ => 0,
    })
}

fn cmd_montecarlo(args: MontecarloArgs) -> Result<u8> {
    if args.runs == 0 {
        bail!("--runs must be at least 1");
    }
    if args.jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    let cfg = load_config(args.config.as_deref())?;
    let base_seed = resolve_seed(args.base_seed, cfg.seed)?;
    let json = if args.matrix {
        let report = montecarlo::run_matrix(&cfg, args.runs, base_seed, args.jobs);
        print!("{}", montecarlo::render_table(&report));
        serde_json::to_string_pretty(&report)?
    } else {
        let report = montecarlo::run_batch(&cfg, args.runs, base_seed, args.jobs);
        let json = serde_json::to_string_pretty(&report)?;
        println!("{json}");
        json
    };
    if let Some(path) = &args.report {
        fs::write(path, json.as_bytes())
            .with_context(|| format!("cannot write report {}", path.display()))?;
    }
    Ok(0)
}

fn cmd_check(args: CheckArgs) -> Result<u8> {
    let cfg = match args.config.as_deref() {
        Some(p) => load_config(Some(p))?,
        None => ScenarioConfig::small_preset(),
    };
    let mutation = match args.mutate.as_str() {
        "intact" => Mutation::Intact,
        "ignore-signals" => Mutation::IgnoreSignals,
        other => bail!("unknown mutation {other:?}; expected intact or ignore-signals"),
    };
    let result = modelcheck::check(&cfg, args.max_states, mutation);
    println!("states explored: {}", result.states_explored);
    Ok(match result.verdict {
        Verdict::Verified => {
            println!("verified: no reachable safety violation");
            0
        }
        Verdict::Violated { property, path } => {
            println!("violated {property} after {} events:", path.len());
            for (i, label) in path.iter().enumerate() {
                println!("  {:>3}. {label}", i + 1);
            }
            2
        }
        Verdict::BudgetExceeded => {
            println!("inconclusive: state budget exhausted");
            3
        }
    })
}

fn cmd_replay(args: ReplayArgs) -> Result<u8> {
    let cfg = load_config(args.config.as_deref())?;
    let text = fs::read_to_string(&args.trace)
        .with_context(|| format!("cannot read trace {}", args.trace.display()))?;
    match simengine::replay_verify(&text, &cfg) {
        Ok(summary) => {
            println!("ok: {} steps replayed byte-identically", summary.steps);
            if let Some(p) = summary.violation {
                println!("recorded violation {p} re-confirmed by the independent check");
            }
            Ok(0)
        }
        Err(
            err @ (ReplayError::Divergence { .. }
            | ReplayError::SafetyMismatch { .. }
            | ReplayError::ConfigMismatch { .. }),
        ) => {
            eprintln!("{err}");
            Ok(2)
        }
        Err(err) => Err(err.into()),
    }
}

fn describe(state: &WorldState) -> String {
    let signals: Vec<String> = state
        .signals
        .iter()
        .map(|s| {
            let belief = state
                .confirmations
                .get(&s.id)
                .map_or("?".to_string(), |c| format!("{c:?}"));
            format!("{}@{}:{:?}({belief})", s.id, s.position, s.aspect)
        })
        .collect();
    let derailers: Vec<String> = state
        .derailers
        .iter()
        .map(|d| format!("{}@{}:{}", d.id, d.position, if d.active { "active" } else { "off" }))
        .collect();
    format!(
        "pos {} ma {} status {:?} signals [{}] derailers [{}]",
        state.train_pos,
        state.ma,
        state.status,
        signals.join(", "),
        derailers.join(", ")
    )
}

fn cmd_animate(args: AnimateArgs) -> Result<u8> {
    let cfg = load_config(args.config.as_deref())?;
    let mut state = WorldState::initial(&cfg);
    let stdin = io::stdin();
    let mut lines = stdin.lock().lines();
    println!("{}", describe(&state));
    loop {
        if state.status != RunStatus::Running {
            println!("terminal: {:?}", state.status);
            return Ok(0);
        }
        let events = enabled_events(&state, &cfg);
        for (i, ev) in events.iter().enumerate() {
            println!("  {:>2}. {ev}", i + 1);
        }
        print!("event number (q to quit)> ");
        io::stdout().flush()?;
        let Some(line) = lines.next() else {
            return Ok(0);
        };
        let line = line?;
        let choice = line.trim();
        if choice.is_empty() {
            continue;
        }
        if choice == "q" || choice == "quit" {
            return Ok(0);
        }
        let Ok(n) = choice.parse::<usize>() else {
            println!("not a number: {choice}");
            continue;
        };
        if n == 0 || n > events.len() {
            println!("{n} is not an enabled event");
            continue;
        }
        let event = events[n - 1];
        let before = state.clone();
        state = apply_event(&state, &event, &cfg).expect("listed events are enabled");
        if let Some(det) = state.inbox {
            if controller::shield_filter(&det, &state, &cfg) == controller::ShieldVerdict::Forwarded
            {
                controller::on_detection(&mut state, &det, &cfg);
            } else {
                state.inbox = None;
                println!("shield ignored the detection at {}", det.reported_position);
            }
        }
        controller::refresh(&mut state, &cfg);
        if let Some(&p) = check_safety(&before, &event, &state, &cfg).first() {
            state.status = RunStatus::Violation(p);
            println!("safety violation {p}: {}", p.description());
        }
        println!("{}", describe(&state));
    }
}

fn cmd_render_sign(args: RenderSignArgs) -> Result<u8> {
    let class = parse_class(&args.class)?;
    let mut params = CvParams::default();
    if let Some(v) = args.noise_sigma {
        params.noise_sigma = v;
    }
    if let Some(v) = args.occlusion_prob {
        params.occlusion_prob = v;
    }
    if let Some(v) = args.distractor_prob {
        params.distractor_prob = v;
    }
    params
        .validate()
        .map_err(|e| anyhow::anyhow!("invalid render parameters: {e}"))?;
    let mut rng = Rng::new(args.seed);
    let img = signvision::render_sign(class, &params, &mut rng);
    fs::write(&args.out, signvision::write_pgm(&img))
        .with_context(|| format!("cannot write {}", args.out.display()))?;
    println!(
        "rendered {} seed {}: weak={} certify={}",
        class_name(class),
        args.seed,
        class_name(signvision::weak_classify(&img)),
        signvision::certify(&img).map_or("rejected", class_name),
    );
    Ok(0)
}

fn cmd_certify_sign(args: CertifySignArgs) -> Result<u8> {
    let text = fs::read_to_string(&args.image)
        .with_context(|| format!("cannot read {}", args.image.display()))?;
    let img = signvision::parse_pgm(&text)
        .map_err(|e| anyhow::anyhow!("{}: {e}", args.image.display()))?;
    let claimed = args.claimed.as_deref().map(parse_class).transpose()?;
    match (signvision::certify(&img), claimed) {
        (Some(found), Some(want)) if found == want => {
            println!("accepted: {}", class_name(found));
            Ok(0)
        }
        (Some(found), Some(want)) => {
            println!(
                "rejected: certified as {} but {} was claimed",
                class_name(found),
                class_name(want)
            );
            Ok(2)
        }
        (Some(found), None) => {
            println!("accepted: {}", class_name(found));
            Ok(0)
        }
        (None, _) => {
            println!("rejected: no certifiable sign in the scene");
            Ok(2)
        }
    }
}
