//! Scenario runner: token-driven control loop, Monte Carlo replication,
//! parameter sweeps and CSV output.

use std::path::Path;

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::comms::{detect_partitions_and_promote, pass_token, LinkState, MessageLog};
use crate::control::{controller_by_name, ActionContext, ControlMode, Controller, CURRENT_TOLERANCE};
use crate::error::{Error, Result};
use crate::grid::{solve_power_flow, GridTree, InjectionState, NodeId, Phasor, PowerFlowSolution};
use crate::topology::{generate_grid, GenParams};

/// Default cap on control actions, per DG.
pub const ACTIONS_PER_DG: usize = 200;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub gen: GenParams,
    pub controller: String,
    pub mode: ControlMode,
    /// Switches `cbsc` to enhanced clustering.
    pub ec_enabled: bool,
    pub broken_link_fraction: f64,
    pub replications: usize,
    /// Total control actions; `None` means `ACTIONS_PER_DG` × number of DGs.
    pub max_steps: Option<usize>,
    pub base_seed: u64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            gen: GenParams::default(),
            controller: "cbsc".into(),
            mode: ControlMode::FullCurrent,
            ec_enabled: false,
            broken_link_fraction: 0.0,
            replications: 100,
            max_steps: None,
            base_seed: 1,
        }
    }
}

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ScenarioConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always serialisable")
    }

    pub fn controller_name(&self) -> String {
        if self.ec_enabled && self.controller == "cbsc" {
            "cbsc-ec".into()
        } else {
            self.controller.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        controller_by_name(&self.controller_name(), self.mode)?;
        if self.ec_enabled && !self.controller.starts_with("cbsc") {
            return Err(Error::Config(format!(
                "enhanced clustering only applies to cbsc, not {}",
                self.controller
            )));
        }
        if !(0.0..=1.0).contains(&self.broken_link_fraction) {
            return Err(Error::Config(format!(
                "broken_link_fraction {} outside [0, 1]",
                self.broken_link_fraction
            )));
        }
        if self.replications == 0 {
            return Err(Error::Config("replications must be positive".into()));
        }
        if self.max_steps == Some(0) {
            return Err(Error::Config("max_steps must be positive".into()));
        }
        Ok(())
    }

    pub fn scenario_id(&self) -> String {
        format!(
            "{}-{}-n{}-dg{:.2}-q{:.2}",
            self.controller_name(),
            self.mode.as_str(),
            self.gen.n_nodes,
            self.gen.dg_fraction,
            self.broken_link_fraction
        )
    }

    pub fn replication_seed(&self, replication: usize) -> u64 {
        self.base_seed.wrapping_add(replication as u64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub replication: usize,
    pub seed: u64,
    /// Before any DG acts.
    pub initial_loss: f64,
    pub initial_pcc: f64,
    /// Loss after each control action, W.
    pub loss_series: Vec<f64>,
    pub pcc_series: Vec<f64>,
    /// Cumulative frames sent after each control action.
    pub msgs_series: Vec<u64>,
    pub final_loss: f64,
    pub final_pcc: f64,
    /// First step within 5 % of the minimum loss; 0 for an empty series.
    pub convergence_steps: usize,
    pub converged: bool,
    pub log: MessageLog,
    pub dg_count: usize,
    pub components: usize,
    pub max_balance_residual: f64,
    pub max_kcl_residual: f64,
    /// Final total injection per DG.
    pub injections: Vec<(NodeId, Phasor)>,
    /// Frames spent before the first action (table building).
    pub setup_messages: u64,
}

/// First index whose value is within `fraction` of the series minimum.
pub fn convergence_steps(series: &[f64], fraction: f64) -> Result<usize> {
    let min = series.iter().copied().fold(f64::INFINITY, f64::min);
    if series.is_empty() {
        return Err(Error::EmptySeries);
    }
    Ok(series
        .iter()
        .position(|&v| v <= (1.0 + fraction) * min)
        .expect("the minimum itself qualifies"))
}

/// Link state for a replication; drawn from its own stream so the grid is
/// the same whatever the failure fraction.
pub fn sample_links(grid: &GridTree, fraction: f64, seed: u64) -> Result<LinkState> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    Ok(LinkState::sample(grid, fraction, &mut rng)?)
}

pub fn run_scenario(cfg: &ScenarioConfig, replication: usize) -> Result<MetricsRecord> {
    cfg.validate()?;
    let seed = cfg.replication_seed(replication);
    let grid = generate_grid(&GenParams {
        seed,
        ..cfg.gen.clone()
    })?;
    let links = sample_links(&grid, cfg.broken_link_fraction, seed)?;
    let mut controller = controller_by_name(&cfg.controller_name(), cfg.mode)?;
    let mut rec = simulate(&grid, &links, controller.as_mut(), cfg.max_steps)?;
    rec.replication = replication;
    rec.seed = seed;
    Ok(rec)
}

struct Ring {
    comp: crate::comms::Component,
    round_quiet: bool,
    done: bool,
}

/// Runs one controller on one grid until every ring has a quiet round or
/// the step budget runs out. One step is one DG control action.
pub fn simulate(
    grid: &GridTree,
    links: &LinkState,
    controller: &mut dyn Controller,
    max_steps: Option<usize>,
) -> Result<MetricsRecord> {
    let mut log = MessageLog::default();
    let effective_links = if controller.uses_communication() {
        links.clone()
    } else {
        LinkState::intact(grid)
    };
    controller.prepare(grid, &effective_links, &mut log)?;
    let setup_messages = log.messages;

    let dg_count = grid.dgs().count();
    let max_steps = max_steps.unwrap_or(ACTIONS_PER_DG * dg_count);
    let mut injections = InjectionState::new();
    let mut controls = vec![Phasor::default(); grid.len()];
    let mut acted = vec![false; grid.len()];

    let mut sol = solve_power_flow(grid, &injections)?;
    let mut max_balance = sol.balance_residual;
    let mut max_kcl = sol.kcl_residual;
    let initial_loss = sol.total_loss;
    let initial_pcc = sol.pcc_power.re;

    let smart = controller.smart_nodes(grid);
    let mut rings: Vec<Ring> = if smart.is_empty() {
        Vec::new()
    } else {
        detect_partitions_and_promote(grid, &effective_links, &smart)?
            .into_iter()
            .map(|comp| {
                let has_dg = comp.members.iter().any(|&m| grid.is_dg(m));
                Ring {
                    comp,
                    round_quiet: true,
                    done: !has_dg,
                }
            })
            .collect()
    };
    let components = rings.len();

    let mut loss_series = Vec::new();
    let mut pcc_series = Vec::new();
    let mut msgs_series = Vec::new();
    let mut converged = rings.iter().all(|r| r.done);

    'outer: while !converged && loss_series.len() < max_steps {
        for ring in rings.iter_mut().filter(|r| !r.done) {
            let owner = ring.comp.token.owner_node();
            debug_assert!(ring.comp.members.contains(&owner));
            if grid.is_dg(owner) {
                let mut ctx = ActionContext {
                    grid,
                    links: &effective_links,
                    solution: &sol,
                    dg: owner,
                    control: controls[owner.0],
                    reference_voltage: ring.comp.reference_voltage,
                    log: &mut log,
                };
                let outcome = controller.act(&mut ctx)?;
                let feed = controller.associated_feed(grid, owner)?;
                let before = injections.get(owner);
                let after = feed + outcome.new_injection;
                if !acted[owner.0] || (after - before).norm() >= CURRENT_TOLERANCE {
                    ring.round_quiet = false;
                }
                acted[owner.0] = true;
                controls[owner.0] = outcome.new_injection;
                injections.set(owner, after);
                sol = solve_power_flow(grid, &injections)?;
                max_balance = max_balance.max(sol.balance_residual);
                max_kcl = max_kcl.max(sol.kcl_residual);
                loss_series.push(sol.total_loss);
                pcc_series.push(sol.pcc_power.re);
                msgs_series.push(log.messages);
                if loss_series.len() >= max_steps {
                    break 'outer;
                }
            }
            let before = ring.comp.token.owner;
            // Local controllers only borrow the ring for ordering; nothing is sent.
            let mut scratch = MessageLog::default();
            let token_log = if controller.uses_communication() { &mut log } else { &mut scratch };
            ring.comp.token = pass_token(&ring.comp.token, grid, &effective_links, token_log)?;
            if ring.comp.token.owner <= before {
                if ring.round_quiet {
                    ring.done = true;
                }
                ring.round_quiet = true;
            }
        }
        converged = rings.iter().all(|r| r.done);
    }

    let final_loss = loss_series.last().copied().unwrap_or(initial_loss);
    let final_pcc = pcc_series.last().copied().unwrap_or(initial_pcc);
    let convergence = if loss_series.is_empty() {
        0
    } else {
        convergence_steps(&loss_series, 0.05)?
    };
    Ok(MetricsRecord {
        replication: 0,
        seed: 0,
        initial_loss,
        initial_pcc,
        loss_series,
        pcc_series,
        msgs_series,
        final_loss,
        final_pcc,
        convergence_steps: convergence,
        converged,
        log,
        dg_count,
        components,
        max_balance_residual: max_balance,
        max_kcl_residual: max_kcl,
        injections: injections.iter().collect(),
        setup_messages,
    })
}

/// Convenience for callers holding a ready solution.
pub fn solution_for(grid: &GridTree, record: &MetricsRecord) -> Result<PowerFlowSolution> {
    Ok(solve_power_flow(grid, &record.injections.iter().copied().collect())?)
}

/// All replications of a scenario, in replication order.
pub fn run_replications(cfg: &ScenarioConfig) -> Result<Vec<MetricsRecord>> {
    cfg.validate()?;
    (0..cfg.replications)
        .into_par_iter()
        .map(|k| run_scenario(cfg, k))
        .collect()
}

/// Mean with a normal-approximation 95 % confidence half-width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub ci95: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len();
        if n == 0 {
            return Summary { n, mean: f64::NAN, ci95: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let ci95 = if n > 1 {
            let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            1.96 * (var / n as f64).sqrt()
        } else {
            0.0
        };
        Summary { n, mean, ci95 }
    }

    pub fn lower(&self) -> f64 {
        self.mean - self.ci95
    }

    pub fn upper(&self) -> f64 {
        self.mean + self.ci95
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub config: ScenarioConfig,
    pub records: Vec<MetricsRecord>,
}

impl SweepPoint {
    pub fn final_loss(&self) -> Summary {
        Summary::of(&self.records.iter().map(|r| r.final_loss).collect::<Vec<_>>())
    }

    pub fn final_pcc(&self) -> Summary {
        Summary::of(&self.records.iter().map(|r| r.final_pcc).collect::<Vec<_>>())
    }

    pub fn convergence(&self) -> Summary {
        Summary::of(&self.records.iter().map(|r| r.convergence_steps as f64).collect::<Vec<_>>())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepTable {
    pub points: Vec<SweepPoint>,
}

fn sweep(configs: Vec<ScenarioConfig>) -> Result<SweepTable> {
    let points = configs
        .into_iter()
        .map(|config| {
            let records = run_replications(&config)?;
            Ok(SweepPoint { config, records })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SweepTable { points })
}

pub fn sweep_dg_fraction(cfg: &ScenarioConfig, fractions: &[f64]) -> Result<SweepTable> {
    sweep(
        fractions
            .iter()
            .map(|&f| ScenarioConfig {
                gen: GenParams { dg_fraction: f, ..cfg.gen.clone() },
                ..cfg.clone()
            })
            .collect(),
    )
}

pub fn sweep_broken_links(cfg: &ScenarioConfig, fractions: &[f64]) -> Result<SweepTable> {
    sweep(
        fractions
            .iter()
            .map(|&q| ScenarioConfig {
                broken_link_fraction: q,
                ..cfg.clone()
            })
            .collect(),
    )
}

pub fn sweep_impedance(cfg: &ScenarioConfig, impedances: &[Phasor]) -> Result<SweepTable> {
    sweep(
        impedances
            .iter()
            .map(|&z| ScenarioConfig {
                gen: GenParams { impedance_per_m: z, ..cfg.gen.clone() },
                ..cfg.clone()
            })
            .collect(),
    )
}

#[derive(Clone, Debug, PartialEq)]
pub struct EcComparison {
    pub standard: SweepPoint,
    pub enhanced: SweepPoint,
    /// Relative PCC workload reduction of EC over standard clustering.
    pub gain: f64,
}

/// Runs CBSC with standard and enhanced clustering on the same seeds.
pub fn compare_ec(cfg: &ScenarioConfig) -> Result<EcComparison> {
    let standard_cfg = ScenarioConfig {
        controller: "cbsc".into(),
        ec_enabled: false,
        ..cfg.clone()
    };
    let enhanced_cfg = ScenarioConfig {
        ec_enabled: true,
        ..standard_cfg.clone()
    };
    let standard = SweepPoint {
        records: run_replications(&standard_cfg)?,
        config: standard_cfg,
    };
    let enhanced = SweepPoint {
        records: run_replications(&enhanced_cfg)?,
        config: enhanced_cfg,
    };
    let w_std = standard.final_pcc().mean;
    let w_ec = enhanced.final_pcc().mean;
    Ok(EcComparison {
        gain: (w_std - w_ec) / w_std,
        standard,
        enhanced,
    })
}

/// One row of the long-format metrics CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub scenario_id: String,
    pub replication: usize,
    pub controller: String,
    pub mode: String,
    pub dg_fraction: f64,
    pub q: f64,
    pub step: usize,
    pub loss_w: f64,
    pub pcc_w: f64,
    pub msgs: u64,
}

impl CsvRow {
    fn new(cfg: &ScenarioConfig, replication: usize, step: usize, loss: f64, pcc: f64, msgs: u64) -> Self {
        CsvRow {
            scenario_id: cfg.scenario_id(),
            replication,
            controller: cfg.controller_name(),
            mode: cfg.mode.as_str().into(),
            dg_fraction: cfg.gen.dg_fraction,
            q: cfg.broken_link_fraction,
            step,
            loss_w: loss,
            pcc_w: pcc,
            msgs,
        }
    }
}

/// Step 0 is the state before any DG acts; step k follows the k-th action.
pub fn series_rows(cfg: &ScenarioConfig, rec: &MetricsRecord) -> Vec<CsvRow> {
    let mut rows = vec![CsvRow::new(cfg, rec.replication, 0, rec.initial_loss, rec.initial_pcc, rec.setup_messages)];
    for (k, ((&loss, &pcc), &msgs)) in rec
        .loss_series
        .iter()
        .zip(&rec.pcc_series)
        .zip(&rec.msgs_series)
        .enumerate()
    {
        rows.push(CsvRow::new(cfg, rec.replication, k + 1, loss, pcc, msgs));
    }
    rows
}

/// One row per (sweep point, replication) holding final values; `step` is
/// the convergence step.
pub fn sweep_rows(table: &SweepTable) -> Vec<CsvRow> {
    table
        .points
        .iter()
        .flat_map(|p| {
            p.records.iter().map(move |r| {
                CsvRow::new(&p.config, r.replication, r.convergence_steps, r.final_loss, r.final_pcc, r.log.messages)
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub scenario_id: String,
    pub controller: String,
    pub mode: String,
    pub n_nodes: usize,
    pub dg_fraction: f64,
    pub q: f64,
    pub z_re: f64,
    pub z_im: f64,
    pub replications: usize,
    pub loss_mean: f64,
    pub loss_ci95: f64,
    pub pcc_mean: f64,
    pub pcc_ci95: f64,
    pub steps_mean: f64,
}

pub fn summary_rows(table: &SweepTable) -> Vec<SummaryRow> {
    table
        .points
        .iter()
        .map(|p| {
            let loss = p.final_loss();
            let pcc = p.final_pcc();
            SummaryRow {
                scenario_id: p.config.scenario_id(),
                controller: p.config.controller_name(),
                mode: p.config.mode.as_str().into(),
                n_nodes: p.config.gen.n_nodes,
                dg_fraction: p.config.gen.dg_fraction,
                q: p.config.broken_link_fraction,
                z_re: p.config.gen.impedance_per_m.re,
                z_im: p.config.gen.impedance_per_m.im,
                replications: p.records.len(),
                loss_mean: loss.mean,
                loss_ci95: loss.ci95,
                pcc_mean: pcc.mean,
                pcc_ci95: pcc.ci95,
                steps_mean: p.convergence().mean,
            }
        })
        .collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(source) => Error::Io { path: path.to_path_buf(), source },
        other => Error::Csv { path: path.to_path_buf(), msg: format!("{other:?}") },
    }
}

/// Writes rows with a header to any writer.
pub fn write_csv<T: Serialize, W: std::io::Write>(rows: &[T], out: W) -> std::result::Result<(), csv::Error> {
    let mut w = csv::WriterBuilder::new().has_headers(true).from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf).map_err(|e| Error::Csv {
        path: "<memory>".into(),
        msg: e.to_string(),
    })?;
    Ok(buf)
}

pub fn emit_csv<T: Serialize>(rows: &[T], destination: &Path) -> Result<()> {
    let file = std::fs::File::create(destination).map_err(|source| Error::Io {
        path: destination.to_path_buf(),
        source,
    })?;
    write_csv(rows, std::io::BufWriter::new(file)).map_err(|e| csv_err(destination, e))
}

pub fn load_csv<T: for<'de> Deserialize<'de>>(source: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(source).map_err(|e| csv_err(source, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(source, e))).collect()
}
