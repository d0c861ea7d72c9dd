//! Command-line front end. Every subcommand produces a JSON document (or a
//! DOT file on request) and is deterministic in its inputs.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::json;

use crate::cost::{conversion_cost, graph_cost, reference_strategy_bytes, SourceTiling, Strategy};
use crate::error::{Error, Result};
use crate::exec::{build_execution_graph, ExecutionGraph};
use crate::graph::{gen_cnn, gen_mlp, parse_graph, CnnConfig, DataflowGraph, MlpConfig};
use crate::kcuts::kcuts;
use crate::oracle::brute_force_tiling;
use crate::placement::{parse_hierarchy, place_cuts, DeviceHierarchy};
use crate::sim::{execute_numeric, simulate_traffic};
use crate::tiling::{preset_assignment, Preset, Tiling, TilingAssignment};

#[derive(Debug, Parser)]
#[command(name = "tileplan", version, about = "Tensor-tiling parallelism planner")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate an MLP or CNN training graph.
    Gen(GenArgs),
    /// Find the k-cut tiling for 2^k devices.
    Optimize(OptimizeArgs),
    /// Communication cost of an assignment or preset.
    Cost(CostArgs),
    /// Presets against the optimized assignment.
    Compare(CompareArgs),
    /// Textbook per-step traffic of data/model/hybrid on a square MLP.
    Refcost(RefcostArgs),
    /// Build the per-device execution plan.
    Plan(PlanArgs),
    /// Simulate a plan's traffic, optionally checking numerics.
    Simulate(SimulateArgs),
    /// Brute-force references.
    Oracle(OracleArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelKind {
    Mlp,
    Cnn,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub model: ModelKind,
    #[arg(long)]
    pub batch: usize,
    /// Layer widths (mlp) or channel counts (cnn), comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
    pub dims: Vec<usize>,
    /// cnn only: image height,width.
    #[arg(long, value_delimiter = ',', default_values_t = [24, 24])]
    pub image: Vec<usize>,
    /// cnn only: filter height,width.
    #[arg(long, value_delimiter = ',', default_values_t = [3, 3])]
    pub filter: Vec<usize>,
    #[arg(long)]
    pub backward: bool,
    #[arg(long)]
    pub update: bool,
    #[arg(long, default_value_t = 0.1)]
    pub learning_rate: f64,
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OptimizeArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub devices: usize,
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CostArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long, conflicts_with_all = ["preset", "devices"])]
    pub assignment: Option<PathBuf>,
    #[arg(long, requires = "devices")]
    pub preset: Option<Preset>,
    #[arg(long, requires = "preset")]
    pub devices: Option<usize>,
}

#[derive(Debug, Args)]
pub struct CompareArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub devices: usize,
}

#[derive(Debug, Args)]
pub struct RefcostArgs {
    #[arg(long)]
    pub layers: u64,
    #[arg(long)]
    pub width: u64,
    #[arg(long)]
    pub batch: u64,
    #[arg(long)]
    pub devices: u64,
    /// `data`, `model` or `hybrid:G`.
    #[arg(long)]
    pub strategy: Strategy,
    #[arg(long, default_value_t = 4)]
    pub dtype_bytes: u64,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub graph: PathBuf,
    #[arg(long)]
    pub assignment: PathBuf,
    #[arg(long)]
    pub hierarchy: PathBuf,
    #[arg(short = 'o', long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub dot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long)]
    pub hierarchy: PathBuf,
    /// Needs `--graph`: the plan does not embed operator semantics.
    #[arg(long, requires = "graph")]
    pub check_numerics: bool,
    #[arg(long)]
    pub graph: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
#[command(args_conflicts_with_subcommands = true)]
pub struct OracleArgs {
    #[command(subcommand)]
    pub command: Option<OracleCommand>,
    #[arg(long, required = true)]
    pub graph: Option<PathBuf>,
    #[arg(long, required = true)]
    pub k: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum OracleCommand {
    /// Element-by-element conversion count next to the closed form.
    ConvCost {
        /// Source cuts, e.g. `"R red"`.
        #[arg(long)]
        src: SourceTiling,
        #[arg(long)]
        dst: Tiling,
        #[arg(long, value_delimiter = ',', num_args = 1..)]
        shape: Vec<usize>,
    },
}

/// What a command printed and any non-fatal warnings.
#[derive(Debug, Default, PartialEq)]
pub struct Outcome {
    pub stdout: String,
    pub warnings: Vec<String>,
}

impl Outcome {
    fn doc(stdout: String) -> Self {
        Self {
            stdout,
            warnings: Vec::new(),
        }
    }
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// Writes to `path` when given, otherwise returns the text for stdout.
fn emit(path: Option<&Path>, text: String) -> Result<Outcome> {
    match path {
        Some(p) => write(p, &text).map(|_| Outcome::default()),
        None => Ok(Outcome::doc(text)),
    }
}

fn pretty(v: &impl Serialize) -> String {
    serde_json::to_string_pretty(v).expect("document serialize") + "\n"
}

pub fn devices_to_k(devices: usize) -> Result<usize> {
    if devices == 0 || !devices.is_power_of_two() {
        return Err(Error::NotPowerOfTwo(devices));
    }
    Ok(devices.trailing_zeros() as usize)
}

fn load_graph(p: &Path) -> Result<DataflowGraph> {
    parse_graph(&read(p)?)
}

fn load_hierarchy(p: &Path) -> Result<DeviceHierarchy> {
    parse_hierarchy(&read(p)?)
}

/// One strategy's flat graph cost; `None` when the preset cannot tile the
/// graph on this many devices.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CompareRow {
    pub strategy: String,
    pub elements: Option<u64>,
    pub bytes: Option<u64>,
    pub savings_vs_data_pct: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub infeasible: Option<String>,
}

/// Data, model and hybrid presets next to the optimized assignment on
/// `2^k` devices, all under the flat graph cost.
pub fn compare_rows(g: &DataflowGraph, k: usize) -> Result<Vec<CompareRow>> {
    let mut costs = Vec::new();
    for p in [Preset::Data, Preset::Model, Preset::Hybrid] {
        let c = preset_assignment(g, p, k).and_then(|a| graph_cost(g, &a));
        match c {
            Ok(c) => costs.push((p.to_string(), Ok((c.total_elements, c.total_bytes)))),
            Err(e @ (Error::Indivisible { .. } | Error::InvalidConfig(_))) => {
                costs.push((p.to_string(), Err(e.to_string())))
            }
            Err(e) => return Err(e),
        }
    }
    let opt = graph_cost(g, &kcuts(g, k)?.assignment)?;
    costs.push(("optimized".into(), Ok((opt.total_elements, opt.total_bytes))));
    let data = costs[0].1.as_ref().ok().map(|c| c.1);
    Ok(costs
        .into_iter()
        .map(|(strategy, c)| match c {
            Ok((elements, bytes)) => CompareRow {
                strategy,
                elements: Some(elements),
                bytes: Some(bytes),
                savings_vs_data_pct: data.filter(|&d| d > 0).map(|d| 100.0 * (1.0 - bytes as f64 / d as f64)),
                infeasible: None,
            },
            Err(why) => CompareRow {
                strategy,
                elements: None,
                bytes: None,
                savings_vs_data_pct: None,
                infeasible: Some(why),
            },
        })
        .collect())
}

pub fn execute(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Gen(a) => {
            let g = match a.model {
                ModelKind::Mlp => {
                    let mut cfg = MlpConfig::new(a.batch, a.dims);
                    cfg.with_backward = a.backward;
                    cfg.with_update = a.update;
                    cfg.learning_rate = a.learning_rate;
                    gen_mlp(&cfg)?
                }
                ModelKind::Cnn => {
                    if a.image.len() != 2 || a.filter.len() != 2 {
                        return Err(Error::InvalidConfig(
                            "--image and --filter take height,width".into(),
                        ));
                    }
                    let mut cfg = CnnConfig::new(
                        a.batch,
                        (a.image[0], a.image[1]),
                        a.dims,
                        (a.filter[0], a.filter[1]),
                    );
                    cfg.with_backward = a.backward;
                    cfg.with_update = a.update;
                    cfg.learning_rate = a.learning_rate;
                    gen_cnn(&cfg)?
                }
            };
            emit(a.output.as_deref(), g.to_document())
        }
        Command::Optimize(a) => {
            let k = devices_to_k(a.devices)?;
            let r = kcuts(&load_graph(&a.graph)?, k)?;
            emit(a.output.as_deref(), r.to_document())
        }
        Command::Cost(a) => {
            let g = load_graph(&a.graph)?;
            let asg = match (a.assignment, a.preset, a.devices) {
                (Some(p), _, _) => TilingAssignment::from_document(&read(&p)?)?,
                (None, Some(p), Some(n)) => preset_assignment(&g, p, devices_to_k(n)?)?,
                _ => {
                    return Err(Error::InvalidConfig(
                        "cost needs --assignment or --preset with --devices".into(),
                    ))
                }
            };
            Ok(Outcome::doc(graph_cost(&g, &asg)?.to_document()))
        }
        Command::Compare(a) => {
            let g = load_graph(&a.graph)?;
            let rows = compare_rows(&g, devices_to_k(a.devices)?)?;
            Ok(Outcome::doc(pretty(&json!({ "devices": a.devices, "rows": rows }))))
        }
        Command::Refcost(a) => {
            let bytes =
                reference_strategy_bytes(a.layers, a.width, a.batch, a.devices, a.dtype_bytes, a.strategy)?;
            Ok(Outcome::doc(pretty(&json!({
                "strategy": a.strategy.to_string(),
                "bytes": bytes,
                "megabytes": bytes as f64 / 1e6,
            }))))
        }
        Command::Plan(a) => {
            let g = load_graph(&a.graph)?;
            let asg = TilingAssignment::from_document(&read(&a.assignment)?)?;
            let h = load_hierarchy(&a.hierarchy)?;
            let placement = place_cuts(asg.k(), &h)?;
            let eg = build_execution_graph(&g, &asg, &placement)?;
            if let Some(dot) = &a.dot {
                write(dot, &eg.to_dot())?;
            }
            let mut out = emit(a.output.as_deref(), eg.to_document())?;
            out.warnings = placement.warnings;
            Ok(out)
        }
        Command::Simulate(a) => {
            let eg = ExecutionGraph::from_document(&read(&a.plan)?)?;
            let h = load_hierarchy(&a.hierarchy)?;
            let mut report = simulate_traffic(&eg, &h)?;
            if a.check_numerics {
                let g = load_graph(a.graph.as_deref().expect("clap requires --graph"))?;
                report.numeric = Some(execute_numeric(&g, &eg, a.seed)?);
            }
            Ok(Outcome::doc(report.to_document()))
        }
        Command::Oracle(a) => match a.command {
            Some(OracleCommand::ConvCost { src, dst, shape }) => {
                let k = dst.len();
                let counted = crate::oracle::element_conversion_cost(&src, &dst, &shape, k)?;
                let modeled = conversion_cost(&src, &dst, &shape, k)?;
                Ok(Outcome::doc(pretty(&json!({
                    "src": src.to_string(),
                    "dst": dst.to_string(),
                    "shape": shape,
                    "counted": counted,
                    "modeled": modeled,
                }))))
            }
            None => {
                let g = load_graph(a.graph.as_deref().expect("clap requires --graph"))?;
                let bf = brute_force_tiling(&g, a.k.expect("clap requires --k"))?;
                Ok(Outcome::doc(pretty(&json!({
                    "cost": bf.cost,
                    "witness": serde_json::from_str::<serde_json::Value>(&bf.witness.to_document())?,
                }))))
            }
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(args: &[&str]) -> Result<Outcome> {
        execute(Cli::try_parse_from(std::iter::once("tileplan").chain(args.iter().copied())).unwrap())
    }

    #[test]
    fn device_counts() {
        assert_eq!(devices_to_k(1).unwrap(), 0);
        assert_eq!(devices_to_k(16).unwrap(), 4);
        assert!(matches!(devices_to_k(12), Err(Error::NotPowerOfTwo(12))));
        assert!(matches!(devices_to_k(0), Err(Error::NotPowerOfTwo(0))));
    }

    #[test]
    fn refcost_document() {
        let out = run(&[
            "refcost", "--layers", "5", "--width", "300", "--batch", "400", "--devices", "16",
            "--strategy", "hybrid:4",
        ])
        .unwrap();
        let v: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
        assert_eq!(v["megabytes"], 33.6);
    }

    #[test]
    fn conv_cost_oracle() {
        let out = run(&["oracle", "conv-cost", "--src", "red", "--dst", "r", "--shape", "4,4"]).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out.stdout).unwrap();
        assert_eq!((v["counted"].as_u64(), v["modeled"].as_u64()), (Some(32), Some(32)));
    }

    #[test]
    fn oracle_needs_graph_and_k() {
        assert!(Cli::try_parse_from(["tileplan", "oracle", "--k", "1"]).is_err());
        assert!(Cli::try_parse_from(["tileplan", "simulate", "--plan", "p", "--hierarchy", "h", "--check-numerics"]).is_err());
    }
}
