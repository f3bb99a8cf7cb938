use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use cmpc_core::cli_io::{
    bundled_config, emit_plot_data, format_cost_rows, load_config, sweep_link_costs, validate_run, write_trace,
    RunConfig, ScenarioRef,
};
use cmpc_core::simulator::{accumulate_costs, run_centralized, run_closed_loop, SimRun};

#[derive(Parser)]
#[command(name = "cmpc", version, about = "Coalitional MPC of an irrigation canal")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate one scenario under the coalitional controller.
    Run(Options),
    /// Simulate one scenario under the centralized controller.
    Baseline(Options),
    /// Run both controllers and report their costs.
    Compare(Options),
    /// Repeat the coalitional run over the configured link-cost grid.
    Sweep(Options),
    /// Check the invariant suite on a configuration.
    Validate(Options),
}

#[derive(Args, Clone, Debug, Default)]
struct Options {
    /// Configuration document (TOML).
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Scenario name, e.g. dez_scenario1 or dez_scenario2.
    #[arg(long, value_name = "NAME")]
    scenario: Option<String>,
    /// Output directory.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
    /// Cost of one active link per step.
    #[arg(long, value_name = "VALUE")]
    clink: Option<f64>,
    /// Steps between topology decisions.
    #[arg(long, value_name = "N")]
    tlambda: Option<usize>,
    /// Random ±FACTOR perturbation of the plant's backwater surfaces.
    #[arg(long, value_name = "FACTOR")]
    mismatch: Option<f64>,
    /// Use the centralized controller (run only).
    #[arg(long)]
    centralized: bool,
}

fn resolve(opts: &Options) -> Result<RunConfig> {
    let mut cfg = match (&opts.config, &opts.scenario) {
        (Some(path), _) => load_config(path).with_context(|| format!("loading {}", path.display()))?,
        (None, Some(name)) => bundled_config(name)?,
        (None, None) => bundled_config("dez_scenario1")?,
    };
    if let (Some(_), Some(name)) = (&opts.config, &opts.scenario) {
        cfg.scenario = ScenarioRef::Named(name.clone());
    }
    if let Some(out) = &opts.out {
        cfg.output_dir = out.clone();
    }
    if let Some(seed) = opts.seed {
        cfg.seed = seed;
    }
    if let Some(c) = opts.clink {
        cfg.controller.link_cost = c;
    }
    if let Some(t) = opts.tlambda {
        cfg.t_lambda = t;
    }
    if let Some(m) = opts.mismatch {
        cfg.plant.mismatch = Some(m);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn save(cfg: &RunConfig, name: &str, run: &SimRun, link_cost: f64) -> Result<PathBuf> {
    fs::create_dir_all(&cfg.output_dir)?;
    let path = cfg.output_dir.join(format!("{name}.csv"));
    write_trace(&path, &run.trace, &cfg.config_hash())?;
    emit_plot_data(&run.trace, &cfg.output_dir.join(format!("{name}_plots")), link_cost)?;
    Ok(path)
}

fn simulate(cfg: &RunConfig, centralized: bool) -> Result<SimRun> {
    let canal = cfg.canal()?;
    let scenario = cfg.scenario()?;
    let sim = cfg.sim_config()?;
    Ok(if centralized {
        run_centralized(&canal, &scenario, &sim)?
    } else {
        run_closed_loop(&canal, &scenario, &sim)?
    })
}

fn single(opts: &Options, centralized: bool) -> Result<()> {
    let cfg = resolve(opts)?;
    let run = simulate(&cfg, centralized)?;
    let name = if centralized { "centralized" } else { "coalitional" };
    let path = save(&cfg, name, &run, cfg.controller.link_cost)?;
    print!("{}", format_cost_rows(&[(name, &run.trace)], cfg.controller.link_cost));
    let r = accumulate_costs(&run.trace, cfg.controller.link_cost);
    println!("max |dq| {:.6}, relaxed solves {}", r.max_abs_input, r.relaxed_solves);
    println!("trace written to {}", path.display());
    Ok(())
}

fn compare(opts: &Options) -> Result<()> {
    let cfg = resolve(opts)?;
    let coalitional = simulate(&cfg, false)?;
    let centralized = simulate(&cfg, true)?;
    save(&cfg, "coalitional", &coalitional, cfg.controller.link_cost)?;
    save(&cfg, "centralized", &centralized, cfg.controller.link_cost)?;
    let rows = [("coalitional", &coalitional.trace), ("centralized", &centralized.trace)];
    let mut report = String::new();
    for c in [0.0, cfg.controller.link_cost] {
        report.push_str(&format!("links priced at {c}\n"));
        report.push_str(&format_cost_rows(&rows, c));
        report.push('\n');
    }
    let peaks = |run: &SimRun| accumulate_costs(&run.trace, 0.0).peak_level_errors;
    report.push_str("peak |e| per reach\n");
    for (label, p) in [
        ("coalitional", peaks(&coalitional)),
        ("centralized", peaks(&centralized)),
    ] {
        let cells: Vec<String> = p.iter().map(|v| format!("{v:.3}")).collect();
        report.push_str(&format!("{label:<14} {}\n", cells.join(" ")));
    }
    fs::write(cfg.output_dir.join("report.txt"), &report)?;
    print!("{report}");
    Ok(())
}

fn sweep(opts: &Options) -> Result<()> {
    let cfg = resolve(opts)?;
    let runs = sweep_link_costs(&cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let mut w = csv::Writer::from_path(cfg.output_dir.join("sweep.csv"))?;
    w.write_record(["link_cost", "average_links", "performance", "combined"])?;
    let mut previous = f64::INFINITY;
    let mut monotone = true;
    println!(
        "{:>10} {:>14} {:>12} {:>12}",
        "link_cost", "average_links", "perf", "combined"
    );
    for (c, run) in &runs {
        let r = accumulate_costs(&run.trace, *c);
        monotone &= r.average_links <= previous + 1e-12;
        previous = r.average_links;
        println!(
            "{c:>10} {:>14.3} {:>12.3} {:>12.3}",
            r.average_links, r.performance, r.combined
        );
        w.write_record([
            c.to_string(),
            r.average_links.to_string(),
            r.performance.to_string(),
            r.combined.to_string(),
        ])?;
    }
    w.flush()?;
    println!(
        "average link count {} in the link cost",
        if monotone {
            "is non-increasing"
        } else {
            "is NOT monotone"
        }
    );
    Ok(())
}

fn validate(opts: &Options) -> Result<()> {
    let cfg = resolve(opts)?;
    let checks = validate_run(&cfg)?;
    let mut failed = 0;
    for c in &checks {
        println!("[{}] {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, c.detail);
        failed += usize::from(!c.passed);
    }
    if failed > 0 {
        bail!("{failed} of {} checks failed", checks.len());
    }
    Ok(())
}

fn dispatch(command: &Command) -> Result<()> {
    match command {
        Command::Run(o) => single(o, o.centralized),
        Command::Baseline(o) => single(o, true),
        Command::Compare(o) => compare(o),
        Command::Sweep(o) => sweep(o),
        Command::Validate(o) => validate(o),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
