//! Run configuration, trace files, plot data and the invariant suite behind
//! the `validate` command.
//!
//! # Trace format
//!
//! A trace is two comma-separated files. The main table starts with `#`
//! header lines (`format`, `version`, `config_sha256`, `reaches`) followed by
//! a column header and one row per step:
//!
//! ```text
//! step, e_1..e_N, q_1..q_N, dq_1..dq_N, off_1..off_N, topology, perf_cost, network_cost
//! ```
//!
//! The companion `<stem>.coalitions.csv` holds one row per coalition and step
//! with 1-based members, solver status, decision-variable count, boundary
//! estimates and setpoint flows (space-separated lists). Floats are written
//! in shortest round-trip form, so reading a written trace gives it back
//! exactly.

use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::canal_model::{dez_reaches, CanalModel, ReachParams};
use crate::coalition_ctrl::{ControllerConfig, MpcStatus};
use crate::error::{Error, Result};
use crate::simulator::{
    accumulate_costs, run_centralized, run_closed_loop, CoalitionRecord, Plant, PlantConfig, Scenario, SimConfig,
    SimRun, SimTrace, StepRecord, TopologyMode,
};
use crate::supervisor::synthesize_coalition;
use crate::topology::{partition_of, Topology};

pub const TRACE_FORMAT: &str = "cmpc-trace-1";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
/// Cost columns at the end of each trace row.
pub const COST_COLUMNS: [&str; 2] = ["perf_cost", "network_cost"];

/// Bundled configuration documents by scenario name.
pub const BUNDLED_CONFIGS: [(&str, &str); 2] = [
    ("dez_scenario1", include_str!("../configs/dez_scenario1.toml")),
    ("dez_scenario2", include_str!("../configs/dez_scenario2.toml")),
];

/// A scenario given by name or spelled out in the document.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScenarioRef {
    Named(String),
    Inline(Scenario),
}

impl ScenarioRef {
    pub fn resolve(&self) -> Result<Scenario> {
        match self {
            ScenarioRef::Named(name) => {
                Scenario::named(name).ok_or_else(|| Error::Config(format!("scenario: unknown name {name:?}")))
            }
            ScenarioRef::Inline(s) => Ok(s.clone()),
        }
    }
}

/// Everything one invocation needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Steps between supervisor decisions.
    pub t_lambda: usize,
    /// Link costs visited by `sweep`.
    pub link_costs: Vec<f64>,
    pub output_dir: PathBuf,
    /// Starting topology as a bit-string; the full topology when absent.
    pub initial_topology: Option<String>,
    pub cache: bool,
    pub scenario: ScenarioRef,
    pub controller: ControllerConfig,
    pub plant: PlantConfig,
    pub reaches: Vec<ReachParams>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            t_lambda: 4,
            link_costs: vec![0.0, 0.15, 0.3, 0.6, 1.2, 2.4],
            output_dir: PathBuf::from("out"),
            initial_topology: None,
            cache: true,
            scenario: ScenarioRef::Named("dez_scenario1".into()),
            controller: ControllerConfig::default(),
            plant: PlantConfig::default(),
            reaches: dez_reaches(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.controller.validate()?;
        let canal = self.canal()?;
        let n = canal.len();
        self.scenario()?.validate(n)?;
        self.plant.validate(n)?;
        if self.t_lambda == 0 {
            return Err(Error::Config("t_lambda: must be positive".into()));
        }
        if self.link_costs.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(Error::Config("link_costs: entries must be nonnegative".into()));
        }
        self.initial()?;
        Ok(())
    }

    pub fn canal(&self) -> Result<CanalModel> {
        CanalModel::new(&self.reaches, self.controller.sample_time)
    }

    pub fn scenario(&self) -> Result<Scenario> {
        self.scenario.resolve()
    }

    pub fn initial(&self) -> Result<Topology> {
        let n = self.reaches.len();
        match &self.initial_topology {
            None => Ok(Topology::full(n)),
            Some(bits) => {
                let t = Topology::from_bits(bits).map_err(|e| Error::Config(format!("initial_topology: {e}")))?;
                if t.agents() != n {
                    return Err(Error::Config(format!(
                        "initial_topology: {} links given, {} expected",
                        t.links().len(),
                        n.saturating_sub(1)
                    )));
                }
                Ok(t)
            }
        }
    }

    /// Supervised simulation settings.
    pub fn sim_config(&self) -> Result<SimConfig> {
        Ok(SimConfig {
            controller: self.controller.clone(),
            plant: self.plant.clone(),
            mode: TopologyMode::Supervised {
                initial: self.initial()?,
                interval: self.t_lambda,
            },
            cache: self.cache,
            seed: self.seed,
        })
    }

    /// SHA-256 of the canonical serialized document, hex encoded.
    pub fn config_hash(&self) -> String {
        let text = toml::to_string(self).unwrap_or_else(|_| format!("{self:?}"));
        let digest = Sha256::digest(text.as_bytes());
        digest.iter().fold(String::with_capacity(64), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

/// Parses and validates a configuration document.
pub fn parse_config(text: &str, origin: &str) -> Result<RunConfig> {
    let cfg: RunConfig = toml::from_str(text).map_err(|e| {
        let at = e
            .span()
            .map(|span| {
                let (line, col) = line_col(text, span.start);
                format!("{origin}:{line}:{col}")
            })
            .unwrap_or_else(|| origin.to_string());
        Error::Parse(format!("{at}: {}", e.message()))
    })?;
    cfg.validate()?;
    Ok(cfg)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |i| i + 1) + 1;
    (line, col)
}

pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = fs::read_to_string(path)?;
    parse_config(&text, &path.display().to_string())
}

/// Bundled configuration for `name` (`dez_scenario1`, `dez_scenario2`).
pub fn bundled_config(name: &str) -> Result<RunConfig> {
    let canonical = Scenario::named(name)
        .map(|s| s.name)
        .ok_or_else(|| Error::Config(format!("scenario: unknown name {name:?}")))?;
    let (_, text) = BUNDLED_CONFIGS
        .iter()
        .find(|(n, _)| *n == canonical)
        .ok_or_else(|| Error::Config(format!("no bundled configuration for {canonical}")))?;
    parse_config(text, &format!("<bundled {canonical}>"))
}

/// Header of a trace file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TraceHeader {
    pub version: String,
    pub config_hash: String,
    pub reaches: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceFile {
    pub header: TraceHeader,
    pub trace: SimTrace,
}

/// Column names of the main trace table for `n` reaches.
pub fn trace_columns(n: usize) -> Vec<String> {
    let mut cols = vec!["step".to_string()];
    for prefix in ["e", "q", "dq", "off"] {
        cols.extend((1..=n).map(|i| format!("{prefix}_{i}")));
    }
    cols.push("topology".into());
    cols.extend(COST_COLUMNS.iter().map(|c| c.to_string()));
    cols
}

const COALITION_COLUMNS: [&str; 6] = [
    "step",
    "members",
    "status",
    "input_decision_vars",
    "omega",
    "setpoint_flows",
];

/// Path of the coalition companion file of `path`.
pub fn coalitions_path(path: &Path) -> PathBuf {
    let stem = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    path.with_file_name(format!("{stem}.coalitions.csv"))
}

fn join<T: ToString>(values: impl IntoIterator<Item = T>) -> String {
    values.into_iter().map(|v| v.to_string()).collect::<Vec<_>>().join(" ")
}

/// Writes `trace` to `path` and its coalition companion file.
pub fn write_trace(path: &Path, trace: &SimTrace, config_hash: &str) -> Result<()> {
    let n = trace.reaches;
    let mut file = fs::File::create(path)?;
    writeln!(file, "# format={TRACE_FORMAT}")?;
    writeln!(file, "# version={VERSION}")?;
    writeln!(file, "# config_sha256={config_hash}")?;
    writeln!(file, "# reaches={n}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(trace_columns(n))?;
    for s in &trace.steps {
        let mut row = Vec::with_capacity(4 * n + 4);
        row.push(s.step.to_string());
        for series in [&s.levels, &s.flows, &s.inputs, &s.offtakes] {
            if series.len() != n {
                return Err(Error::Schema(format!(
                    "step {} has {} values for {n} reaches",
                    s.step,
                    series.len()
                )));
            }
            row.extend(series.iter().map(f64::to_string));
        }
        row.push(s.topology.to_bits());
        row.push(s.performance_cost.to_string());
        row.push(s.network_cost.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(coalitions_path(path))?;
    w.write_record(COALITION_COLUMNS)?;
    for s in &trace.steps {
        for c in &s.coalitions {
            w.write_record([
                s.step.to_string(),
                join(c.members.iter().map(|m| m + 1)),
                c.status.as_str().to_string(),
                c.input_decision_vars.to_string(),
                join(&c.omega),
                join(&c.setpoint_flows),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse_num<T: std::str::FromStr>(field: &str, what: &str) -> Result<T> {
    field
        .trim()
        .parse()
        .map_err(|_| Error::Schema(format!("{what}: cannot parse {field:?}")))
}

fn parse_list<T: std::str::FromStr>(field: &str, what: &str) -> Result<Vec<T>> {
    field.split_whitespace().map(|v| parse_num(v, what)).collect()
}

/// Reads a trace written by [`write_trace`].
pub fn read_trace(path: &Path) -> Result<TraceFile> {
    let mut reader = BufReader::new(fs::File::open(path)?);
    let mut meta = std::collections::BTreeMap::new();
    let mut body = String::new();
    let mut line = String::new();
    while reader.read_line(&mut line)? > 0 {
        match line.strip_prefix('#') {
            Some(rest) if body.is_empty() => {
                if let Some((k, v)) = rest.trim().split_once('=') {
                    meta.insert(k.trim().to_string(), v.trim().to_string());
                }
            }
            _ => body.push_str(&line),
        }
        line.clear();
    }
    let field = |k: &str| {
        meta.get(k)
            .cloned()
            .ok_or_else(|| Error::Schema(format!("header lacks {k}")))
    };
    if field("format")? != TRACE_FORMAT {
        return Err(Error::Schema(format!("unsupported format {:?}", field("format")?)));
    }
    let header = TraceHeader {
        version: field("version")?,
        config_hash: field("config_sha256")?,
        reaches: parse_num(&field("reaches")?, "reaches")?,
    };
    let n = header.reaches;
    let expected = trace_columns(n);

    let mut r = csv::Reader::from_reader(body.as_bytes());
    let cols: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if cols != expected {
        return Err(Error::Schema(format!(
            "expected {} columns {:?}…, found {:?}",
            expected.len(),
            &expected[..2],
            cols
        )));
    }
    let mut steps = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let step: usize = parse_num(&rec[0], "step")?;
        let series = |block: usize| -> Result<Vec<f64>> {
            (0..n)
                .map(|i| parse_num(&rec[1 + block * n + i], &expected[1 + block * n + i]))
                .collect()
        };
        let topology = Topology::from_bits(&rec[1 + 4 * n]).map_err(|e| Error::Schema(format!("topology: {e}")))?;
        if topology.agents() != n && n > 0 {
            return Err(Error::Schema(format!(
                "step {step}: topology does not match {n} reaches"
            )));
        }
        steps.push(StepRecord {
            step,
            levels: series(0)?,
            flows: series(1)?,
            inputs: series(2)?,
            offtakes: series(3)?,
            topology,
            performance_cost: parse_num(&rec[2 + 4 * n], "perf_cost")?,
            network_cost: parse_num(&rec[3 + 4 * n], "network_cost")?,
            coalitions: Vec::new(),
        });
    }

    let mut r = csv::Reader::from_path(coalitions_path(path))?;
    if r.headers()?.iter().ne(COALITION_COLUMNS) {
        return Err(Error::Schema("coalition file columns".into()));
    }
    for rec in r.records() {
        let rec = rec?;
        let step: usize = parse_num(&rec[0], "step")?;
        let members: Vec<usize> = parse_list(&rec[1], "members")?;
        if members.iter().any(|&m| m == 0 || m > n) {
            return Err(Error::Schema(format!("step {step}: member out of range")));
        }
        let target = steps
            .iter_mut()
            .find(|s| s.step == step)
            .ok_or_else(|| Error::Schema(format!("coalition row for unknown step {step}")))?;
        target.coalitions.push(CoalitionRecord {
            members: members.into_iter().map(|m| m - 1).collect(),
            status: rec[2].parse::<MpcStatus>()?,
            input_decision_vars: parse_num(&rec[3], "input_decision_vars")?,
            omega: parse_list(&rec[4], "omega")?,
            setpoint_flows: parse_list(&rec[5], "setpoint_flows")?,
        });
    }
    Ok(TraceFile {
        header,
        trace: SimTrace { reaches: n, steps },
    })
}

fn write_table(path: &Path, header: Vec<String>, rows: impl Iterator<Item = Vec<String>>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `levels.csv`, `inflows.csv`, `links.csv` and `costs.csv` into
/// `dir`, pricing links at `link_cost` in the cost series.
pub fn emit_plot_data(trace: &SimTrace, dir: &Path, link_cost: f64) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let n = trace.reaches;
    let per_reach = |prefix: &str| {
        std::iter::once("step".to_string())
            .chain((1..=n).map(|i| format!("{prefix}_{i}")))
            .collect::<Vec<_>>()
    };
    let series = |pick: fn(&StepRecord) -> &Vec<f64>| {
        trace.steps.iter().map(move |s| {
            std::iter::once(s.step.to_string())
                .chain(pick(s).iter().map(f64::to_string))
                .collect()
        })
    };
    let levels = dir.join("levels.csv");
    write_table(&levels, per_reach("e"), series(|s| &s.levels))?;
    let inflows = dir.join("inflows.csv");
    write_table(&inflows, per_reach("q"), series(|s| &s.flows))?;

    let links = dir.join("links.csv");
    let link_header = std::iter::once("step".to_string())
        .chain((1..n).map(|i| format!("link_{}_{}", i, i + 1)))
        .collect();
    write_table(
        &links,
        link_header,
        trace.steps.iter().map(|s| {
            std::iter::once(s.step.to_string())
                .chain(s.topology.links().iter().map(|&on| u8::from(on).to_string()))
                .collect()
        }),
    )?;

    let costs = dir.join("costs.csv");
    let mut perf = 0.0;
    let mut net = 0.0;
    let cost_rows: Vec<Vec<String>> = trace
        .steps
        .iter()
        .map(|s| {
            perf += s.performance_cost;
            net += link_cost * s.topology.enabled_count() as f64;
            vec![
                s.step.to_string(),
                perf.to_string(),
                net.to_string(),
                (perf + net).to_string(),
            ]
        })
        .collect();
    write_table(
        &costs,
        ["step", "performance", "network", "combined"]
            .map(String::from)
            .to_vec(),
        cost_rows.into_iter(),
    )?;
    Ok(vec![levels, inflows, links, costs])
}

/// Outcome of one invariant check.
#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &'static str, passed: bool, detail: String) -> Self {
        Self { name, passed, detail }
    }
}

/// Storage change against net inflow at every step of `trace`, replayed on a
/// fresh plant. Returns the worst relative defect.
pub fn mass_balance_defect(canal: &CanalModel, cfg: &SimConfig, trace: &SimTrace) -> Result<f64> {
    let Some(first) = trace.steps.first() else {
        return Ok(0.0);
    };
    let mut plant = Plant::new(canal, &cfg.plant, cfg.seed, &first.offtakes)?;
    let mut worst: f64 = 0.0;
    for s in &trace.steps {
        let before = plant.storage();
        plant.step(&s.inputs, &s.offtakes);
        let expected = canal.t_c * (s.flows[0] - s.offtakes.iter().sum::<f64>());
        let defect = (plant.storage() - before - expected).abs() / (1.0 + before.abs());
        worst = worst.max(defect);
    }
    Ok(worst)
}

/// Runs the module-level invariant checks for `cfg`.
pub fn validate_run(cfg: &RunConfig) -> Result<Vec<Check>> {
    cfg.validate()?;
    let canal = cfg.canal()?;
    let scenario = cfg.scenario()?;
    let n = canal.len();
    let q = cfg.controller.level_weight;
    let r = cfg.controller.input_weight;
    let mut checks = Vec::new();

    let mut worst_residual: f64 = 0.0;
    let mut worst_cert = f64::NEG_INFINITY;
    let blocks: Vec<Vec<usize>> = (0..n)
        .map(|i| vec![i])
        .chain(std::iter::once((0..n).collect()))
        .collect();
    for members in &blocks {
        let g = synthesize_coalition(&canal, members, q, r)?;
        worst_residual = worst_residual.max(g.riccati_residual);
        worst_cert = worst_cert.max(g.certificate);
    }
    checks.push(Check::new(
        "synthesis certificates",
        worst_residual <= 1e-8 && worst_cert <= 1e-8,
        format!("riccati {worst_residual:.2e}, lyapunov {worst_cert:.2e}"),
    ));

    let links = n.saturating_sub(1);
    let mut partitions_ok = true;
    if links <= 12 {
        for mask in 0..(1u32 << links) {
            let t = Topology::from_links((0..links).map(|b| mask >> b & 1 == 1).collect());
            let p = partition_of(&t, n);
            let mut seen = vec![false; n];
            for block in p.blocks() {
                partitions_ok &= !block.is_empty() && block.windows(2).all(|w| w[1] == w[0] + 1);
                for &m in block {
                    partitions_ok &= !std::mem::replace(&mut seen[m], true);
                }
                // Members of a block are joined by enabled links only.
                partitions_ok &= block.windows(2).all(|w| t.is_enabled(w[0]));
                partitions_ok &= block.last().is_none_or(|&l| l + 1 >= n || !t.is_enabled(l));
            }
            partitions_ok &= seen.iter().all(|&s| s);
        }
    }
    checks.push(Check::new(
        "partition structure",
        partitions_ok,
        format!("{} topologies", 1u64 << links.min(12)),
    ));

    let sim = cfg.sim_config()?;
    let run = run_closed_loop(&canal, &scenario, &sim)?;
    let bound = cfg.controller.max_increment + 1e-9;
    let worst_input = run
        .trace
        .steps
        .iter()
        .flat_map(|s| s.inputs.iter())
        .fold(0.0f64, |a, u| a.max(u.abs()));
    checks.push(Check::new(
        "hard input box",
        worst_input <= bound,
        format!("max |dq| = {worst_input:.6}"),
    ));

    let nominal = SimConfig {
        plant: PlantConfig {
            level_noise: 0.0,
            ..cfg.plant.clone()
        },
        ..sim.clone()
    };
    let defect = mass_balance_defect(&canal, &nominal, &run.trace)?;
    checks.push(Check::new(
        "mass balance",
        defect <= 1e-9,
        format!("worst relative defect {defect:.2e}"),
    ));

    let again = run_closed_loop(&canal, &scenario, &sim)?;
    checks.push(Check::new(
        "determinism",
        again.trace == run.trace,
        "two runs with the same seed".into(),
    ));

    let dir = std::env::temp_dir().join(format!("cmpc-validate-{}", std::process::id()));
    fs::create_dir_all(&dir)?;
    let path = dir.join("trace.csv");
    write_trace(&path, &run.trace, &cfg.config_hash())?;
    let back = read_trace(&path)?;
    let _ = fs::remove_dir_all(&dir);
    checks.push(Check::new(
        "trace round trip",
        back.trace == run.trace,
        format!("{} steps", run.trace.steps.len()),
    ));

    let central = run_centralized(&canal, &scenario, &sim)?;
    let vars = central
        .trace
        .steps
        .iter()
        .all(|s| s.input_decision_vars() == n * cfg.controller.control_horizon && s.coalitions.len() == 1);
    checks.push(Check::new(
        "centralized structure",
        vars,
        format!(
            "{} input decision variables per step",
            n * cfg.controller.control_horizon
        ),
    ));
    Ok(checks)
}

/// Average link count selected over a run for each link cost.
pub fn sweep_link_costs(cfg: &RunConfig) -> Result<Vec<(f64, SimRun)>> {
    if cfg.link_costs.is_empty() {
        return Err(Error::Config("link_costs: sweep needs at least one value".into()));
    }
    let canal = cfg.canal()?;
    let scenario = cfg.scenario()?;
    cfg.link_costs
        .iter()
        .map(|&c| {
            let mut sim = cfg.sim_config()?;
            sim.controller.link_cost = c;
            Ok((c, run_closed_loop(&canal, &scenario, &sim)?))
        })
        .collect()
}

/// Plain-text cost table for reports.
pub fn format_cost_rows(rows: &[(&str, &SimTrace)], link_cost: f64) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<14} {:>12} {:>12} {:>12} {:>8} {:>11} {:>10}",
        "controller", "perf", "network", "combined", "links", "coalitions", "vars/coal"
    );
    for (name, trace) in rows {
        let r = accumulate_costs(trace, link_cost);
        let _ = writeln!(
            out,
            "{:<14} {:>12.3} {:>12.3} {:>12.3} {:>8.2} {:>11.2} {:>10.2}",
            name,
            r.performance,
            r.network,
            r.combined,
            r.average_links,
            r.average_coalitions,
            r.decision_vars_per_coalition
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_fill_missing_fields() {
        let cfg = parse_config("seed = 7\n", "test").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.controller, ControllerConfig::default());
        assert_eq!(cfg.reaches.len(), 13);
        assert_eq!(cfg.t_lambda, 4);
    }

    #[test]
    fn parse_error_reports_line() {
        let err = parse_config("seed = 1\nt_lambda = \"x\"\n", "cfg.toml").unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("cfg.toml:2:"), "{msg}");
    }

    #[test]
    fn unknown_field_rejected() {
        assert!(parse_config("[controller]\nhorizon = 3\n", "t").is_err());
    }

    #[test]
    fn validation_names_field() {
        let msg = parse_config("[controller]\ncontrol_horizon = 20\n", "t")
            .unwrap_err()
            .to_string();
        assert!(msg.contains("control_horizon"), "{msg}");
        let msg = parse_config("t_lambda = 0\n", "t").unwrap_err().to_string();
        assert!(msg.contains("t_lambda"), "{msg}");
    }

    #[test]
    fn zero_delay_rejected() {
        let mut cfg = RunConfig::default();
        cfg.reaches[2].delay_steps = 0;
        let text = toml::to_string(&cfg).unwrap();
        assert!(parse_config(&text, "t").is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = RunConfig::default();
        let mut b = a.clone();
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed = 1;
        assert_ne!(a.config_hash(), b.config_hash());
        assert_eq!(a.config_hash().len(), 64);
    }

    #[test]
    fn columns() {
        let cols = trace_columns(13);
        assert_eq!(cols.len(), 1 + 4 * 13 + 1 + COST_COLUMNS.len());
        assert_eq!(cols[1], "e_1");
        assert_eq!(cols[14], "q_1");
        assert_eq!(cols[53], "topology");
    }

    #[test]
    fn bundled_configs_match_builtin_tables() {
        for (name, scenario) in [
            ("dez_scenario1", Scenario::dez_scenario1()),
            ("dez_scenario2", Scenario::dez_scenario2()),
        ] {
            let cfg = bundled_config(name).unwrap();
            assert_eq!(cfg.scenario().unwrap(), scenario);
            assert_eq!(cfg.controller, ControllerConfig::default());
            assert_eq!(cfg.reaches.len(), 13);
            for (a, b) in cfg.reaches.iter().zip(dez_reaches()) {
                assert_eq!(a.delay_steps, b.delay_steps);
                assert!((a.backwater_surface - b.backwater_surface).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn serialized_config_parses_back() {
        let cfg = RunConfig {
            scenario: ScenarioRef::Inline(Scenario::dez_scenario2()),
            initial_topology: Some("000000000000".into()),
            ..RunConfig::default()
        };
        let text = toml::to_string(&cfg).unwrap();
        assert_eq!(parse_config(&text, "t").unwrap(), cfg);
    }

    #[test]
    fn line_columns() {
        assert_eq!(line_col("ab\ncd", 0), (1, 1));
        assert_eq!(line_col("ab\ncd", 4), (2, 2));
    }
}
