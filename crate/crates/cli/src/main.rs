use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, Context, Result};
use byzlink::conditions::{check_condition_p, check_condition_s, CheckOptions};
use byzlink::graph::{decompose, source_components, DiGraph, Edge};
use byzlink::io::{canonical_json, canonical_json_pretty, parse_simulation_config, read_trace, sha256_hex, write_trace, GraphFile};
use byzlink::matrix::{self, build_all, check_iteration, q_blocks, spread_bound_check};
use byzlink::protocol::{audit_trace, compute_t_end, run, TEndError};
use byzlink::reduction::{count_for_fault_set, count_r, enumerate_reduced_graphs, fault_sets};
use clap::{Args, Parser, Subcommand, ValueEnum};
use num_bigint::BigUint;
use serde::Serialize;
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "byzlink", version, about = "Consensus under transient Byzantine link failures")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Decide Condition P and/or Condition S.
    Check(CheckArgs),
    /// Count or list link-reduced graphs.
    Reduce(ReduceArgs),
    /// Run the trim-and-average iteration and write a JSONL trace.
    Simulate(SimulateArgs),
    /// Rebuild transition matrices from a trace and check them.
    Verify(VerifyArgs),
    /// Report the t_end iteration bound.
    Tend(TendArgs),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 1)]
    f: usize,
    /// Worker threads for the exhaustive searches.
    #[arg(long, env = "BYZLINK_THREADS", default_value_t = 1)]
    threads: usize,
    /// Lift the size caps of the exhaustive searches.
    #[arg(long)]
    allow_large: bool,
}

impl Common {
    fn options(&self) -> CheckOptions {
        CheckOptions {
            threads: self.threads.max(1),
            allow_large: self.allow_large,
            ..CheckOptions::default()
        }
    }
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Which {
    P,
    S,
    Both,
}

#[derive(Args)]
struct CheckArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value_t = Which::Both)]
    condition: Which,
    /// Write the violation witness here.
    #[arg(long)]
    witness: Option<PathBuf>,
    /// Search partitions exhaustively even when some in-degree is at most 2f.
    #[arg(long)]
    no_prefilter: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReduceArgs {
    #[command(flatten)]
    common: Common,
    /// Restrict to one fault set, e.g. "0-1,2-3".
    #[arg(long)]
    fault_set: Option<String>,
    #[arg(long)]
    count_only: bool,
    /// Maximum number of reduced graphs to list.
    #[arg(long, default_value_t = 1000)]
    limit: usize,
    /// Write the graph as Graphviz DOT instead.
    #[arg(long)]
    dot: bool,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the seed of the config.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(long)]
    trace: PathBuf,
    #[arg(long)]
    graph: PathBuf,
    #[arg(long, default_value_t = 1)]
    f: usize,
    /// Also check the spread bound and the product identity.
    #[arg(long)]
    spread_bound: bool,
    /// Check scrambling of backward products over blocks of this length.
    #[arg(long, value_name = "RN")]
    q_blocks: Option<usize>,
    /// Only check the first N iterations.
    #[arg(long)]
    up_to: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TendArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 1e-3)]
    epsilon: f64,
    #[arg(long = "upper", alias = "U", allow_negative_numbers = true)]
    upper: f64,
    #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
    mu: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Provenance block embedded in every JSON output.
#[derive(Serialize)]
struct RunManifest {
    subcommand: &'static str,
    tool_version: &'static str,
    config_hash: String,
    seed: Option<u64>,
    started_at: f64,
    finished_at: f64,
    inputs: Vec<String>,
    outputs: Vec<String>,
}

impl RunManifest {
    fn new(subcommand: &'static str, config: &Value, inputs: &[&Path], outputs: &[Option<&Path>]) -> Self {
        RunManifest {
            subcommand,
            tool_version: env!("CARGO_PKG_VERSION"),
            config_hash: sha256_hex(canonical_json(config).as_bytes()),
            seed: None,
            started_at: now(),
            finished_at: 0.0,
            inputs: inputs.iter().map(|p| p.display().to_string()).collect(),
            outputs: outputs.iter().flatten().map(|p| p.display().to_string()).collect(),
        }
    }

    fn finish(mut self) -> Self {
        self.finished_at = now();
        self
    }
}

fn now() -> f64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs_f64()).unwrap_or(0.0)
}

/// Failure with an exit code: 1 for a negative answer, 2 for bad input.
struct Exit(u8, anyhow::Error);

fn usage(e: anyhow::Error) -> Exit {
    Exit(2, e)
}

fn load_graph(path: &Path) -> Result<(DiGraph, GraphFile)> {
    let text = fs::read_to_string(path).with_context(|| format!("cannot read {}", path.display()))?;
    Ok(GraphFile::parse(&text).with_context(|| format!("invalid graph {}", path.display()))?)
}

fn emit(out: Option<&Path>, value: &Value) -> Result<()> {
    let text = canonical_json_pretty(value) + "\n";
    match out {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn parse_fault_set(s: &str) -> Result<Vec<Edge>> {
    s.split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| {
            let (a, b) = p.trim().split_once('-').ok_or_else(|| anyhow!("expected j-i, got {p:?}"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        })
        .collect()
}

fn cmd_check(a: &CheckArgs) -> Result<u8, Exit> {
    let (g, _) = load_graph(&a.common.graph).map_err(usage)?;
    let mut opts = a.common.options();
    opts.indegree_prefilter = !a.no_prefilter;
    let cfg = json!({"f": a.common.f, "condition": match a.condition { Which::P => "p", Which::S => "s", Which::Both => "both" },
        "graph": canonical_json(&GraphFile::from_graph(&g, None)), "prefilter": !a.no_prefilter});
    let manifest = RunManifest::new("check", &cfg, &[&a.common.graph], &[a.out.as_deref(), a.witness.as_deref()]);
    let f = a.common.f;

    let p = if a.condition != Which::S {
        Some(check_condition_p(&g, f, &opts).map_err(|e| usage(e.into()))?)
    } else {
        None
    };
    let s = if a.condition != Which::P {
        Some(check_condition_s(&g, f, &opts).map_err(|e| usage(e.into()))?)
    } else {
        None
    };
    let violated = p.as_ref().is_some_and(|v| !v.is_satisfied()) || s.as_ref().is_some_and(|v| !v.is_satisfied());

    if let (Some(path), true) = (&a.witness, violated) {
        let pw = p.as_ref().and_then(|v| v.witness()).map(|w| serde_json::to_value(w).unwrap());
        let sw = s.as_ref().and_then(|v| v.witness()).map(|w| serde_json::to_value(w).unwrap());
        let body = match a.condition {
            Which::P => pw.unwrap_or(Value::Null),
            Which::S => sw.unwrap_or(Value::Null),
            Which::Both => json!({"p": pw, "s": sw}),
        };
        emit(Some(path), &body).map_err(usage)?;
    }
    let report = json!({
        "n": g.n(),
        "f": f,
        "condition_p": p,
        "condition_s": s,
        "satisfied": !violated,
        "manifest": manifest.finish(),
    });
    emit(a.out.as_deref(), &report).map_err(usage)?;
    Ok(if violated { 1 } else { 0 })
}

fn cmd_reduce(a: &ReduceArgs) -> Result<u8, Exit> {
    let (g, file) = load_graph(&a.common.graph).map_err(usage)?;
    let f = a.common.f;
    if a.dot {
        let dot = byzlink::io::to_dot(&g, file.labels.as_deref());
        match &a.out {
            Some(p) => fs::write(p, dot).map_err(|e| usage(e.into()))?,
            None => print!("{dot}"),
        }
        return Ok(0);
    }
    let fs_filter = a.fault_set.as_deref().map(parse_fault_set).transpose().map_err(usage)?;
    let cfg = json!({"f": f, "fault_set": a.fault_set, "count_only": a.count_only, "limit": a.limit,
        "graph": canonical_json(&GraphFile::from_graph(&g, None))});
    let manifest = RunManifest::new("reduce", &cfg, &[&a.common.graph], &[a.out.as_deref()]);
    let count: BigUint = match &fs_filter {
        Some(fs) => count_for_fault_set(&g, fs, f).map_err(|e| usage(e.into()))?,
        None => count_r(&g, f),
    };
    let mut report = json!({"n": g.n(), "f": f, "count": count.to_string(), "fault_set": fs_filter});
    if !a.count_only {
        let sets: Vec<Vec<Edge>> = match &fs_filter {
            Some(fs) => vec![fs.clone()],
            None => fault_sets(&g, f).collect(),
        };
        let mut listed = Vec::new();
        'outer: for fs in sets {
            for rg in enumerate_reduced_graphs(&g, &fs, f).map_err(|e| usage(e.into()))? {
                if listed.len() == a.limit {
                    break 'outer;
                }
                let sources = source_components(&decompose(&rg.graph(&g)));
                listed.push(json!({"fault_set": rg.fault_set, "removed": rg.removed, "source_components": sources}));
            }
        }
        report["truncated"] = json!(BigUint::from(listed.len()) < count);
        report["reduced_graphs"] = Value::Array(listed);
    }
    report["manifest"] = serde_json::to_value(manifest.finish()).unwrap();
    emit(a.out.as_deref(), &report).map_err(usage)?;
    Ok(0)
}

fn cmd_simulate(a: &SimulateArgs) -> Result<u8, Exit> {
    let text = fs::read_to_string(&a.config)
        .with_context(|| format!("cannot read {}", a.config.display()))
        .map_err(usage)?;
    let base = a.config.parent().unwrap_or(Path::new("."));
    let mut cfg = parse_simulation_config(&text, base)
        .with_context(|| format!("invalid config {}", a.config.display()))
        .map_err(usage)?;
    if a.seed.is_some() {
        cfg.seed = a.seed;
    }
    cfg.validate().map_err(|e| usage(e.into()))?;
    let mut manifest = RunManifest::new("simulate", &serde_json::to_value(&cfg).unwrap(), &[&a.config], &[Some(&a.out)]);
    manifest.config_hash = cfg.hash();
    manifest.seed = Some(cfg.effective_adversary().seed);
    let trace = run(&cfg).map_err(|e| usage(e.into()))?;
    let file = fs::File::create(&a.out)
        .with_context(|| format!("cannot write {}", a.out.display()))
        .map_err(usage)?;
    write_trace(&trace, std::io::BufWriter::new(file)).map_err(|e| usage(e.into()))?;
    let audit = audit_trace(&trace);
    let manifest_path = a.out.with_extension("manifest.json");
    emit(Some(&manifest_path), &serde_json::to_value(manifest.finish()).unwrap()).map_err(usage)?;
    let summary = json!({
        "iterations": trace.summary.iterations,
        "final_spread": trace.summary.final_spread,
        "converged": trace.summary.converged,
        "validity_ok": trace.summary.validity_violations.is_empty(),
        "audit_ok": audit.is_ok(),
        "max_faults": trace.summary.max_faults,
        "config_hash": trace.header.config_hash,
        "trace": a.out.display().to_string(),
    });
    println!("{}", canonical_json(&summary));
    Ok(if audit.is_ok() && trace.summary.validity_violations.is_empty() { 0 } else { 1 })
}

fn cmd_verify(a: &VerifyArgs) -> Result<u8, Exit> {
    let (g, _) = load_graph(&a.graph).map_err(usage)?;
    let file = fs::File::open(&a.trace)
        .with_context(|| format!("cannot read {}", a.trace.display()))
        .map_err(usage)?;
    let mut trace = read_trace(std::io::BufReader::new(file)).map_err(|e| usage(e.into()))?;
    if trace.graph().n() != g.n() {
        return Err(usage(anyhow!("trace has {} nodes, graph has {}", trace.graph().n(), g.n())));
    }
    if *trace.graph() != g {
        return Err(usage(anyhow!("trace was recorded on a different graph")));
    }
    if trace.f() != a.f {
        return Err(usage(anyhow!("trace uses f = {}, not {}", trace.f(), a.f)));
    }
    if let Some(k) = a.up_to {
        trace.records.truncate(k);
    }
    let cfg = json!({"f": a.f, "spread_bound": a.spread_bound, "q_blocks": a.q_blocks, "up_to": a.up_to,
        "trace_hash": trace.header.config_hash});
    let manifest = RunManifest::new("verify", &cfg, &[&a.trace, &a.graph], &[a.out.as_deref()]);

    let audit = audit_trace(&trace).err().map(|e| e.to_string());
    let ms = build_all(&trace).map_err(|e| Exit(1, e.into()))?;
    let checks = ms
        .iter()
        .map(|tm| check_iteration(&trace, tm))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| Exit(1, e.into()))?;
    let mut ok = audit.is_none() && checks.iter().all(|c| c.passes());
    let mut report = json!({
        "iterations": trace.records.len(),
        "beta": matrix::beta(&g),
        "audit_error": audit,
        "checks": checks,
    });
    if a.spread_bound {
        let sb = spread_bound_check(&trace, &ms, ms.len()).map_err(|e| Exit(1, e.into()))?;
        ok &= sb.holds;
        report["spread_bound"] = serde_json::to_value(sb).unwrap();
    }
    if let Some(rn) = a.q_blocks {
        if rn == 0 {
            return Err(usage(anyhow!("--q-blocks must be positive")));
        }
        let used = ms.len() / rn * rn;
        let mats: Vec<_> = ms[..used].iter().map(|tm| tm.m.clone()).collect();
        let qs = q_blocks(&mats, &BigUint::from(rn), 1, matrix::beta(&g)).map_err(|e| Exit(1, e.into()))?;
        ok &= qs.iter().all(|q| q.holds);
        report["q_blocks"] = json!(qs
            .iter()
            .map(|q| json!({"lambda": q.lambda, "bound": q.bound, "holds": q.holds}))
            .collect::<Vec<_>>());
    }
    report["all_pass"] = json!(ok);
    report["manifest"] = serde_json::to_value(manifest.finish()).unwrap();
    emit(a.out.as_deref(), &report).map_err(usage)?;
    Ok(if ok { 0 } else { 1 })
}

fn cmd_tend(a: &TendArgs) -> Result<u8, Exit> {
    let (g, _) = load_graph(&a.common.graph).map_err(usage)?;
    let cfg = json!({"f": a.common.f, "epsilon": a.epsilon, "U": a.upper, "mu": a.mu,
        "graph": canonical_json(&GraphFile::from_graph(&g, None))});
    let manifest = RunManifest::new("tend", &cfg, &[&a.common.graph], &[a.out.as_deref()]);
    let rep = match compute_t_end(&g, a.common.f, a.epsilon, a.upper, a.mu, &a.common.options()) {
        Ok(r) => r,
        Err(TEndError::ConditionSViolated(w)) => {
            let n = w.sources.len();
            return Err(Exit(
                1,
                anyhow!("t_end is undefined: a reduced graph has {n} source components, so convergence is not guaranteed"),
            ));
        }
        Err(e) => return Err(usage(e.into())),
    };
    let mut report = serde_json::to_value(&rep).unwrap();
    report["manifest"] = serde_json::to_value(manifest.finish()).unwrap();
    emit(a.out.as_deref(), &report).map_err(usage)?;
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Check(a) => cmd_check(a),
        Cmd::Reduce(a) => cmd_reduce(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Tend(a) => cmd_tend(a),
    };
    match res {
        Ok(code) => ExitCode::from(code),
        Err(Exit(code, e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(code)
        }
    }
}
