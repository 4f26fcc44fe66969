use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use microgrid::grid::write_grid;
use microgrid::harness::{
    compare_ec, run_replications, series_rows, summary_rows, sweep_broken_links, sweep_dg_fraction,
    sweep_impedance, sweep_rows, csv_bytes, SweepTable,
};
use microgrid::{generate_grid, ControlMode, Error, GenParams, Phasor, ScenarioConfig};

#[derive(Parser)]
#[command(name = "microgrid", version, about = "Tree micro-grid loss-minimisation co-simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a random grid and write its description file.
    Generate {
        #[command(flatten)]
        gen: GenFlags,
        /// Grid seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Run replications of one scenario and emit per-step metrics.
    Run {
        #[command(flatten)]
        scenario: ScenarioFlags,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Sweep the fraction of nodes that are DGs.
    SweepDg {
        #[command(flatten)]
        scenario: ScenarioFlags,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        out: SweepOutput,
    },
    /// Sweep the fraction of broken communication links.
    SweepLinks {
        #[command(flatten)]
        scenario: ScenarioFlags,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
        #[command(flatten)]
        out: SweepOutput,
    },
    /// Sweep the specific line impedance, given as re:im in ohm/m.
    SweepImpedance {
        #[command(flatten)]
        scenario: ScenarioFlags,
        #[arg(long, value_delimiter = ',', required = true, value_parser = parse_impedance)]
        values: Vec<Phasor>,
        #[command(flatten)]
        out: SweepOutput,
    },
    /// Compare standard and enhanced clustering on PCC workload.
    CompareEc {
        #[command(flatten)]
        scenario: ScenarioFlags,
        #[command(flatten)]
        out: SweepOutput,
    },
}

#[derive(Args, Default)]
struct GenFlags {
    #[arg(long)]
    nodes: Option<usize>,
    #[arg(long)]
    rewiring_p: Option<f64>,
    /// Lattice neighbours on each side before rewiring.
    #[arg(long)]
    lattice_neighbors: Option<usize>,
    /// Mean line length in metres.
    #[arg(long)]
    line_length: Option<f64>,
    /// Specific line impedance re:im in ohm/m.
    #[arg(long, value_parser = parse_impedance)]
    impedance: Option<Phasor>,
    #[arg(long)]
    dg_fraction: Option<f64>,
}

impl GenFlags {
    fn apply(&self, gen: &mut GenParams) {
        if let Some(v) = self.nodes {
            gen.n_nodes = v;
        }
        if let Some(v) = self.rewiring_p {
            gen.rewiring_p = v;
        }
        if let Some(v) = self.lattice_neighbors {
            gen.lattice_neighbors = v;
        }
        if let Some(v) = self.line_length {
            gen.mean_line_length = v;
        }
        if let Some(v) = self.impedance {
            gen.impedance_per_m = v;
        }
        if let Some(v) = self.dg_fraction {
            gen.dg_fraction = v;
        }
    }
}

#[derive(Args)]
struct ScenarioFlags {
    /// TOML scenario file; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[command(flatten)]
    gen: GenFlags,
    /// none, lc, elc, cbsc, cbsc-ec or vbsc.
    #[arg(long)]
    controller: Option<String>,
    /// full or reactive.
    #[arg(long, value_parser = parse_mode)]
    mode: Option<ControlMode>,
    /// Enhanced clustering for cbsc.
    #[arg(long)]
    ec: bool,
    /// Fraction of broken communication links.
    #[arg(long)]
    broken_links: Option<f64>,
    #[arg(long)]
    replications: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
    #[arg(long)]
    base_seed: Option<u64>,
}

impl ScenarioFlags {
    fn resolve(&self) -> Result<ScenarioConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path).map_err(|source| Error::Io {
                    path: path.clone(),
                    source,
                })?;
                ScenarioConfig::from_toml(&text)?
            }
            None => ScenarioConfig::default(),
        };
        self.gen.apply(&mut cfg.gen);
        if let Some(c) = &self.controller {
            cfg.controller = c.clone();
        }
        if let Some(m) = self.mode {
            cfg.mode = m;
        }
        if self.ec {
            cfg.ec_enabled = true;
        }
        if let Some(q) = self.broken_links {
            cfg.broken_link_fraction = q;
        }
        if let Some(r) = self.replications {
            cfg.replications = r;
        }
        if self.max_steps.is_some() {
            cfg.max_steps = self.max_steps;
        }
        if let Some(s) = self.base_seed {
            cfg.base_seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct SweepOutput {
    /// Long-format CSV, one row per point and replication; stdout when omitted.
    #[arg(short, long)]
    output: Option<PathBuf>,
    /// Per-point means and 95 % confidence half-widths.
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn parse_impedance(s: &str) -> Result<Phasor, String> {
    let (re, im) = s
        .split_once(':')
        .ok_or_else(|| format!("impedance `{s}` is not re:im"))?;
    let re: f64 = re.trim().parse().map_err(|e| format!("impedance `{s}`: {e}"))?;
    let im: f64 = im.trim().parse().map_err(|e| format!("impedance `{s}`: {e}"))?;
    Ok(Phasor::new(re, im))
}

fn parse_mode(s: &str) -> Result<ControlMode, String> {
    ControlMode::parse(s).ok_or_else(|| format!("unknown mode `{s}` (full or reactive)"))
}

fn write_out(path: Option<&Path>, bytes: &[u8]) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, bytes).map_err(|source| Error::Io {
            path: p.to_path_buf(),
            source,
        }),
        None => std::io::stdout().write_all(bytes).map_err(|source| Error::Io {
            path: PathBuf::from("<stdout>"),
            source,
        }),
    }
}

fn emit_sweep(table: &SweepTable, out: &SweepOutput) -> Result<(), Error> {
    write_out(out.output.as_deref(), &csv_bytes(&sweep_rows(table))?)?;
    if let Some(path) = &out.summary {
        write_out(Some(path), &csv_bytes(&summary_rows(table))?)?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::Generate { gen, seed, output } => {
            let mut params = GenParams::default();
            gen.apply(&mut params);
            if let Some(s) = seed {
                params.seed = s;
            }
            params.validate()?;
            let grid = generate_grid(&params)?;
            write_out(output.as_deref(), write_grid(&grid).as_bytes())
        }
        Command::Run { scenario, output } => {
            let cfg = scenario.resolve()?;
            let rows: Vec<_> = run_replications(&cfg)?
                .iter()
                .flat_map(|r| series_rows(&cfg, r))
                .collect();
            write_out(output.as_deref(), &csv_bytes(&rows)?)
        }
        Command::SweepDg { scenario, values, out } => {
            emit_sweep(&sweep_dg_fraction(&scenario.resolve()?, &values)?, &out)
        }
        Command::SweepLinks { scenario, values, out } => {
            emit_sweep(&sweep_broken_links(&scenario.resolve()?, &values)?, &out)
        }
        Command::SweepImpedance { scenario, values, out } => {
            emit_sweep(&sweep_impedance(&scenario.resolve()?, &values)?, &out)
        }
        Command::CompareEc { scenario, out } => {
            let cmp = compare_ec(&scenario.resolve()?)?;
            eprintln!(
                "ec gain {:.4} (standard pcc {:.1} W, enhanced pcc {:.1} W)",
                cmp.gain,
                cmp.standard.final_pcc().mean,
                cmp.enhanced.final_pcc().mean
            );
            let table = SweepTable {
                points: vec![cmp.standard, cmp.enhanced],
            };
            emit_sweep(&table, &out)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
