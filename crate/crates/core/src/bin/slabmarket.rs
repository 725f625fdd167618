use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use slabmarket::config::{from_table, load_table, BenchSettings, BrokerSettings, ProducerSettings, SimSettings};
use slabmarket::net::{run_bench, BrokerServer, ProducerServer};
use slabmarket::sim::{self, ClusterTrace, RunManifest};
use slabmarket::units::Money;
use slabmarket::Result;

#[derive(Parser)]
#[command(name = "slabmarket", version, about = "Remote memory market: broker, producer, consumer bench and simulator")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the broker.
    Broker {
        #[command(subcommand)]
        cmd: BrokerCmd,
    },
    /// Run a producer.
    Producer {
        #[command(subcommand)]
        cmd: ProducerCmd,
    },
    /// Consumer tools.
    Consumer {
        #[command(subcommand)]
        cmd: ConsumerCmd,
    },
    /// Trace-driven simulation.
    Sim {
        #[command(subcommand)]
        cmd: SimCmd,
    },
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Settings file of `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum BrokerCmd {
    /// Serve the control protocol. Prints the bound address first.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ProducerCmd {
    /// Register with the broker and serve leased stores. Prints the bound
    /// address first.
    Serve {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        broker: Option<String>,
        #[arg(long)]
        listen: Option<String>,
        #[arg(long)]
        slabs: Option<u32>,
        /// File whose appearance reclaims slabs (content: count, default 1).
        #[arg(long)]
        reclaim_trigger: Option<PathBuf>,
        #[arg(long)]
        run_dir: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum ConsumerCmd {
    /// Lease slabs and run puts and gets against them.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        broker: Option<String>,
        #[arg(long)]
        slabs: Option<u32>,
        #[arg(long)]
        ops: Option<usize>,
        #[arg(long)]
        lease_ms: Option<u64>,
        /// full, integrity or plain.
        #[arg(long)]
        mode: Option<String>,
        /// Wait for the lease to end and check the producer refuses it.
        #[arg(long)]
        check_expiry: bool,
    },
}

#[derive(Args, Clone, Default)]
struct SimArgs {
    #[command(flatten)]
    common: Common,
    /// Trace CSV; without it a synthetic trace is used.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Subcommand)]
enum SimCmd {
    /// Simulate one pricing strategy.
    Run(SimArgs),
    /// Simulate every strategy in `strategies` on the same trace.
    Compare(SimArgs),
    /// Simulate with the per-tick revenue-optimal price alongside.
    Oracle(SimArgs),
    /// Write the synthetic trace as CSV.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

fn table(common: &Common, flags: Vec<(&str, Option<toml::Value>)>) -> Result<toml::Table> {
    let mut t = load_table(common.config.as_deref(), &[])?;
    for (k, v) in flags {
        if let Some(v) = v {
            t.insert(k.to_string(), v);
        }
    }
    // --set wins over dedicated flags
    for (k, v) in load_table(None, &common.set)? {
        t.insert(k, v);
    }
    Ok(t)
}

fn s(v: &Option<String>) -> Option<toml::Value> {
    v.clone().map(toml::Value::String)
}

fn p(v: &Option<PathBuf>) -> Option<toml::Value> {
    v.as_ref().map(|p| toml::Value::String(p.display().to_string()))
}

fn n<T: Into<i64> + Copy>(v: Option<T>) -> Option<toml::Value> {
    v.map(|x| toml::Value::Integer(x.into()))
}

fn stdout_line(line: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{line}");
    let _ = out.flush();
}

fn sim_settings(a: &SimArgs) -> Result<SimSettings> {
    from_table(table(&a.common, vec![("trace", p(&a.trace)), ("out_dir", p(&a.out_dir))])?)
}

fn load_trace(s: &SimSettings) -> Result<(ClusterTrace, String)> {
    match &s.trace {
        Some(path) => Ok((ClusterTrace::from_csv_path(path, s.trace_unit_gb)?, path.display().to_string())),
        None => {
            let syn = s.synthetic();
            Ok((syn.generate()?, format!("synthetic:{}", serde_json::to_string(&syn)?)))
        }
    }
}

fn command_line() -> String {
    std::env::args().collect::<Vec<_>>().join(" ")
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v)?)?;
    Ok(())
}

fn sim_run(a: &SimArgs, oracle: bool) -> Result<()> {
    let s = sim_settings(a)?;
    let mut cfg = s.sim_config()?;
    if oracle && cfg.oracle_step.is_none() {
        cfg.oracle_step = Some(Money(s.price_step));
    }
    let (trace, name) = load_trace(&s)?;
    std::fs::create_dir_all(&s.out_dir)?;
    let res = sim::run(&trace, &cfg)?;
    sim::write_metrics_csv(std::fs::File::create(s.out_dir.join("metrics.csv"))?, &res.metrics)?;
    sim::write_events_csv(std::fs::File::create(s.out_dir.join("events.csv"))?, &res.events)?;
    write_json(&s.out_dir.join("metrics.json"), &res.summary)?;
    RunManifest::new(&cfg, &name, &command_line()).write(&s.out_dir)?;
    stdout_line(&serde_json::to_string(&res.summary)?);
    Ok(())
}

fn sim_compare(a: &SimArgs) -> Result<()> {
    let s = sim_settings(a)?;
    let cfg = s.sim_config()?;
    let strategies = s.strategies.iter().map(|n| s.strategy_of(n)).collect::<Result<Vec<_>>>()?;
    let (trace, name) = load_trace(&s)?;
    std::fs::create_dir_all(&s.out_dir)?;
    let results = sim::compare_strategies(&trace, &cfg, &strategies)?;
    sim::write_comparison_csv(std::fs::File::create(s.out_dir.join("comparison.csv"))?, &results)?;
    for r in &results {
        let name = &r.summary.strategy;
        sim::write_metrics_csv(std::fs::File::create(s.out_dir.join(format!("metrics-{name}.csv")))?, &r.metrics)?;
    }
    let summaries: Vec<_> = results.iter().map(|r| &r.summary).collect();
    write_json(&s.out_dir.join("metrics.json"), &summaries)?;
    RunManifest::new(&cfg, &name, &command_line()).write(&s.out_dir)?;
    for r in &results {
        stdout_line(&serde_json::to_string(&r.summary)?);
    }
    Ok(())
}

fn real_main(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Broker { cmd: BrokerCmd::Serve { common, listen, run_dir } } => {
            let t = table(&common, vec![("listen", s(&listen)), ("run_dir", p(&run_dir))])?;
            let cfg = from_table::<BrokerSettings>(t)?.into_config()?;
            let server = BrokerServer::bind(cfg)?;
            stdout_line(&format!("listening on {}", server.local_addr()?));
            server.run()
        }
        Cmd::Producer { cmd: ProducerCmd::Serve { common, broker, listen, slabs, reclaim_trigger, run_dir } } => {
            let t = table(
                &common,
                vec![
                    ("broker", s(&broker)),
                    ("listen", s(&listen)),
                    ("slabs", n(slabs)),
                    ("reclaim_trigger", p(&reclaim_trigger)),
                    ("run_dir", p(&run_dir)),
                ],
            )?;
            let cfg = from_table::<ProducerSettings>(t)?.into_config();
            let server = ProducerServer::bind(cfg)?;
            stdout_line(&format!("listening on {} producer_id={}", server.local_addr()?, server.producer_id()));
            server.run()
        }
        Cmd::Consumer { cmd: ConsumerCmd::Bench { common, broker, slabs, ops, lease_ms, mode, check_expiry } } => {
            let ops = ops.map(|o| o as i64);
            let lease_ms = lease_ms.map(|o| o as i64);
            let t = table(
                &common,
                vec![
                    ("broker", s(&broker)),
                    ("slabs", n(slabs)),
                    ("ops", n(ops)),
                    ("lease_ms", n(lease_ms)),
                    ("mode", s(&mode)),
                    ("check_expiry", check_expiry.then_some(toml::Value::Boolean(true))),
                ],
            )?;
            let cfg = from_table::<BenchSettings>(t)?.into_config()?;
            run_bench(&cfg, &mut std::io::stdout().lock()).map(|_| ())
        }
        Cmd::Sim { cmd } => match cmd {
            SimCmd::Run(a) => sim_run(&a, false),
            SimCmd::Oracle(a) => sim_run(&a, true),
            SimCmd::Compare(a) => sim_compare(&a),
            SimCmd::Synth { common, out } => {
                let s: SimSettings = from_table(table(&common, vec![])?)?;
                s.synthetic().generate()?.write_csv(std::fs::File::create(out)?)
            }
        },
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match real_main(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
