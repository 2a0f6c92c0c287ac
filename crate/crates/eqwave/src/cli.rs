//! Command-line front end: reproducible runs emitting CSV/JSON artifacts
//! plus a manifest that re-executes to identical outputs.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cw;
use crate::cw_spectrum;
use crate::error::{EqwaveError, Result};
use crate::linalg::wrap_angle;
use crate::model::{EquivariantModel, ModelConfig, ModelRegistry};
use crate::mw;
use crate::mw_spectrum;
use crate::sim;

pub const MANIFEST_SCHEMA: &str = "eqwave-manifest-v1";

/// Overridable numeric defaults, all echoed in the manifest.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct Defaults {
    /// Initial continuation step in psi.
    pub cw_step: f64,
    pub cw_max_step: f64,
    /// Fourier modes for MW solves.
    pub modes: usize,
    /// Rightmost roots and Floquet multipliers requested.
    pub root_count: usize,
    /// Points of the chi grid (0 keeps the library default of 400).
    pub chi_points: usize,
    pub chi_max: Option<f64>,
    /// Monodromy mesh density.
    pub steps_per_period: usize,
    /// Integrator step as a fraction of the delay.
    pub sim_h_div: usize,
    /// Perturbation magnitude for simulation kicks.
    pub kick: f64,
    /// Simulation horizon in delay units for seeding runs.
    pub sim_t_end: f64,
}

impl Default for Defaults {
    fn default() -> Self {
        Self {
            cw_step: 0.05,
            cw_max_step: 0.15,
            modes: 32,
            root_count: 12,
            chi_points: 0,
            chi_max: None,
            steps_per_period: 64,
            sim_h_div: 64,
            kick: 1e-2,
            sim_t_end: 3000.0,
        }
    }
}

/// Fully serializable run description; the manifest embeds it verbatim.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub command: CommandConfig,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub threads: Option<usize>,
    pub defaults: Defaults,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case")]
pub enum CommandConfig {
    CwBranch {
        psi_start: f64,
        psi_end: f64,
    },
    CwCount {
        tau: f64,
        phi: f64,
        piece: usize,
    },
    CwSpectrum {
        psi: f64,
        tau: f64,
    },
    MwSolve {
        seed_file: Option<PathBuf>,
    },
    MwEnumerate {
        tau: f64,
        phi: f64,
        seed_file: PathBuf,
        eps0: Option<f64>,
        delta0: Option<f64>,
        gamma0: Option<f64>,
    },
    MwCountBound {
        t0: f64,
        v0: f64,
        eps0: f64,
        delta0: f64,
        gamma0: f64,
        tau: f64,
    },
    MwFloquet {
        seed_file: PathBuf,
    },
    MwTrend {
        seed_file: PathBuf,
        chain: usize,
    },
    Simulate {
        t_end: f64,
        h: Option<f64>,
        init: String,
        psi: Option<f64>,
        value: Option<Vec<f64>>,
        init_file: Option<PathBuf>,
    },
}

#[derive(Parser, Debug)]
#[command(
    name = "eqwave",
    about = "Continuous and modulated waves of S1-equivariant delay equations",
    version
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ModelArgs {
    /// Built-in model name (lang_kobayashi | lk | stuart_landau) or "custom".
    #[arg(long, default_value = "lang_kobayashi")]
    model: String,
    /// JSON model config file; overrides the individual flags.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    #[arg(long = "J", allow_hyphen_values = true)]
    j: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Extra parameters as key=value (repeatable).
    #[arg(long = "param", value_parser = parse_key_val)]
    params: Vec<(String, f64)>,
}

fn parse_key_val(s: &str) -> std::result::Result<(String, f64), String> {
    let (k, v) = s
        .split_once('=')
        .ok_or_else(|| format!("expected key=value, got '{s}'"))?;
    let v: f64 = v.parse().map_err(|e| format!("bad value in '{s}': {e}"))?;
    Ok((k.to_string(), v))
}

#[derive(Args, Debug, Clone)]
struct CommonArgs {
    /// Output directory for artifacts and the manifest.
    #[arg(long, default_value = "eqwave-out")]
    out: PathBuf,
    /// Validate the configuration and print resolved defaults, then exit.
    #[arg(long)]
    dry_run: bool,
    /// Worker-thread cap (also via EQWAVE_THREADS).
    #[arg(long)]
    threads: Option<usize>,
    /// Seed for deterministic random perturbations.
    #[arg(long, default_value_t = 1234)]
    seed: u64,
    /// Override Fourier modes for MW solves.
    #[arg(long)]
    modes: Option<usize>,
    /// Override the requested rightmost-root / multiplier count.
    #[arg(long)]
    root_count: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Continue the primary CW branch over psi and dump it as CSV.
    CwBranch {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, default_value_t = 0.0)]
        psi_start: f64,
        #[arg(long, default_value_t = std::f64::consts::TAU)]
        psi_end: f64,
    },
    /// Count coexisting CWs at (tau, phi) per monotone sub-branch.
    CwCount {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        tau: f64,
        #[arg(long, allow_hyphen_values = true)]
        phi: f64,
        /// Monotone piece whose count goes in the top-level `count` field.
        #[arg(long, default_value_t = 0)]
        piece: usize,
    },
    /// Strong, continuous and rightmost spectra of the CW at a given psi.
    CwSpectrum {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, allow_hyphen_values = true)]
        psi: f64,
        #[arg(long)]
        tau: f64,
        #[arg(long)]
        chi_max: Option<f64>,
    },
    /// Solve the MW boundary-value problem (simulation-seeded by default).
    MwSolve {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        phi: f64,
        /// JSON MwRecord seed; otherwise a simulation locates the MW.
        #[arg(long)]
        seed_file: Option<PathBuf>,
    },
    /// Enumerate the (k, l) reappearance family at (tau, phi).
    MwEnumerate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        tau: f64,
        #[arg(long, allow_hyphen_values = true)]
        phi: f64,
        #[arg(long)]
        seed_file: PathBuf,
        #[arg(long)]
        eps0: Option<f64>,
        #[arg(long)]
        delta0: Option<f64>,
        #[arg(long)]
        gamma0: Option<f64>,
    },
    /// Evaluate the explicit tau^2 lower-bound count.
    MwCountBound {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long = "T0")]
        t0: f64,
        #[arg(long = "V0")]
        v0: f64,
        #[arg(long)]
        eps0: f64,
        #[arg(long)]
        delta0: f64,
        #[arg(long)]
        gamma0: f64,
        #[arg(long)]
        tau: f64,
    },
    /// Floquet multipliers of a stored MW.
    MwFloquet {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        seed_file: PathBuf,
    },
    /// Floquet-exponent trend along the reappearance chain.
    MwTrend {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        seed_file: PathBuf,
        #[arg(long, default_value_t = 3)]
        chain: usize,
    },
    /// Direct integration with CSV trajectory output.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        phi: f64,
        #[arg(long)]
        t_end: f64,
        #[arg(long)]
        h: Option<f64>,
        /// Initial data: cw | mw | const | file.
        #[arg(long, default_value = "const")]
        init: String,
        /// psi of the CW used when init = cw.
        #[arg(long, allow_hyphen_values = true)]
        psi: Option<f64>,
        /// Constant state when init = const (comma separated).
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        value: Option<Vec<f64>>,
        /// MwRecord JSON when init = mw or file.
        #[arg(long)]
        init_file: Option<PathBuf>,
    },
    /// Re-execute a saved manifest.
    Rerun {
        #[arg(long)]
        manifest: PathBuf,
        /// Validate only.
        #[arg(long)]
        dry_run: bool,
    },
}

fn model_config_from_args(args: &ModelArgs, tau: f64, phi: f64) -> Result<ModelConfig> {
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)?;
        let mut cfg: ModelConfig = serde_json::from_str(&text)?;
        cfg.tau = tau;
        cfg.phi = phi;
        return Ok(cfg);
    }
    let mut params = BTreeMap::new();
    if let Some(v) = args.alpha {
        params.insert("alpha".to_string(), v);
    }
    if let Some(v) = args.eta {
        params.insert("eta".to_string(), v);
    }
    if let Some(v) = args.j {
        params.insert("J".to_string(), v);
    }
    if let Some(v) = args.epsilon {
        params.insert("epsilon".to_string(), v);
    }
    if let Some(v) = args.beta {
        params.insert("beta".to_string(), v);
    }
    if let Some(v) = args.gamma {
        params.insert("gamma".to_string(), v);
    }
    for (k, v) in &args.params {
        params.insert(k.clone(), *v);
    }
    Ok(ModelConfig {
        model: args.model.clone(),
        params,
        tau,
        phi,
    })
}

fn assemble(
    model: &ModelArgs,
    common: &CommonArgs,
    tau: f64,
    phi: f64,
    command: CommandConfig,
) -> Result<(RunConfig, bool)> {
    let mut defaults = Defaults::default();
    if let Some(m) = common.modes {
        defaults.modes = m;
    }
    if let Some(r) = common.root_count {
        defaults.root_count = r;
    }
    let threads = common.threads.or_else(|| {
        std::env::var("EQWAVE_THREADS")
            .ok()
            .and_then(|s| s.parse().ok())
    });
    Ok((
        RunConfig {
            model: model_config_from_args(model, tau, phi)?,
            command,
            out_dir: common.out.clone(),
            seed: common.seed,
            threads,
            defaults,
        },
        common.dry_run,
    ))
}

/// Parses argv into a run configuration plus the dry-run flag.
pub fn parse(cli: Cli) -> Result<(RunConfig, bool)> {
    match cli.command {
        Command::CwBranch {
            model,
            common,
            psi_start,
            psi_end,
        } => assemble(
            &model,
            &common,
            0.0,
            0.0,
            CommandConfig::CwBranch { psi_start, psi_end },
        ),
        Command::CwCount {
            model,
            common,
            tau,
            phi,
            piece,
        } => assemble(
            &model,
            &common,
            tau,
            phi,
            CommandConfig::CwCount { tau, phi, piece },
        ),
        Command::CwSpectrum {
            model,
            common,
            psi,
            tau,
            chi_max,
        } => {
            let (mut cfg, dry) = assemble(
                &model,
                &common,
                tau,
                0.0,
                CommandConfig::CwSpectrum { psi, tau },
            )?;
            cfg.defaults.chi_max = chi_max;
            Ok((cfg, dry))
        }
        Command::MwSolve {
            model,
            common,
            tau,
            phi,
            seed_file,
        } => assemble(
            &model,
            &common,
            tau,
            phi,
            CommandConfig::MwSolve { seed_file },
        ),
        Command::MwEnumerate {
            model,
            common,
            tau,
            phi,
            seed_file,
            eps0,
            delta0,
            gamma0,
        } => assemble(
            &model,
            &common,
            tau,
            phi,
            CommandConfig::MwEnumerate {
                tau,
                phi,
                seed_file,
                eps0,
                delta0,
                gamma0,
            },
        ),
        Command::MwCountBound {
            common,
            t0,
            v0,
            eps0,
            delta0,
            gamma0,
            tau,
        } => {
            let model = ModelArgs {
                model: "lang_kobayashi".into(),
                config: None,
                alpha: None,
                eta: None,
                j: None,
                epsilon: None,
                beta: None,
                gamma: None,
                params: vec![],
            };
            assemble(
                &model,
                &common,
                0.0,
                0.0,
                CommandConfig::MwCountBound {
                    t0,
                    v0,
                    eps0,
                    delta0,
                    gamma0,
                    tau,
                },
            )
        }
        Command::MwFloquet {
            model,
            common,
            seed_file,
        } => assemble(
            &model,
            &common,
            0.0,
            0.0,
            CommandConfig::MwFloquet { seed_file },
        ),
        Command::MwTrend {
            model,
            common,
            seed_file,
            chain,
        } => assemble(
            &model,
            &common,
            0.0,
            0.0,
            CommandConfig::MwTrend { seed_file, chain },
        ),
        Command::Simulate {
            model,
            common,
            tau,
            phi,
            t_end,
            h,
            init,
            psi,
            value,
            init_file,
        } => assemble(
            &model,
            &common,
            tau,
            phi,
            CommandConfig::Simulate {
                t_end,
                h,
                init,
                psi,
                value,
                init_file,
            },
        ),
        Command::Rerun { manifest, dry_run } => {
            let text = std::fs::read_to_string(&manifest)?;
            let man: Manifest = serde_json::from_str(&text)?;
            if man.schema != MANIFEST_SCHEMA {
                return Err(EqwaveError::Config(format!(
                    "unsupported manifest schema '{}'",
                    man.schema
                )));
            }
            Ok((man.config, dry_run))
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub schema: String,
    pub version: String,
    pub config: RunConfig,
}

/// 17-significant-digit scientific formatting for lossless CSV round trips.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    writeln!(f, "{}", header.join(","))?;
    for row in rows {
        writeln!(f, "{}", row.join(","))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    let text = serde_json::to_string_pretty(value)?;
    writeln!(f, "{text}")?;
    Ok(())
}

fn build_model(config: &RunConfig) -> Result<EquivariantModel> {
    ModelRegistry::default().build(&config.model)
}

/// Default CW guess: lasing field amplitude from the state scale.
fn cw_guess(model: &EquivariantModel) -> (DVector<f64>, f64) {
    let n = model.dim();
    let mut x = DVector::zeros(n);
    x[0] = 0.8;
    (x, 0.0)
}

fn primary_branch(
    model: &EquivariantModel,
    psi_start: f64,
    psi_end: f64,
    defaults: &Defaults,
) -> Result<cw::PrimaryBranch> {
    let base = model.with_delay_phase(0.0, 0.0)?;
    let (gx, gw) = cw_guess(&base);
    let seed = cw::solve_cw(&base, psi_start, (&gx, gw))?;
    let ctrl = cw::StepControl {
        initial_step: defaults.cw_step,
        max_step: defaults.cw_max_step,
        ..cw::StepControl::default()
    };
    cw::continue_primary(&base, &seed, psi_end, &ctrl)
}

/// Splits a branch into monotone-omega pieces. For a closed branch the
/// fragment before the first turning point is stitched to the fragment
/// after the last one (they are the same monotone piece across the seam).
pub fn monotone_pieces(branch: &cw::PrimaryBranch) -> Vec<Vec<cw::CWPoint>> {
    let nodes = &branch.nodes;
    if nodes.len() < 3 {
        return vec![nodes.clone()];
    }
    let mut turning = Vec::new();
    for i in 1..nodes.len() - 1 {
        let d1 = nodes[i].omega - nodes[i - 1].omega;
        let d2 = nodes[i + 1].omega - nodes[i].omega;
        if d1 * d2 < 0.0 {
            turning.push(i);
        }
    }
    if turning.is_empty() {
        return vec![nodes.clone()];
    }
    let mut pieces: Vec<Vec<cw::CWPoint>> = Vec::new();
    for w in turning.windows(2) {
        pieces.push(nodes[w[0]..=w[1]].to_vec());
    }
    let first = *turning.first().unwrap();
    let last = *turning.last().unwrap();
    if branch.closed {
        // Seam-crossing piece: drop the duplicated wrap node.
        let mut stitched = nodes[last..].to_vec();
        stitched.extend_from_slice(&nodes[1..=first]);
        pieces.push(stitched);
    } else {
        pieces.insert(0, nodes[..=first].to_vec());
        pieces.push(nodes[last..].to_vec());
    }
    pieces
}

#[derive(Serialize)]
struct PieceReport {
    piece: usize,
    psi_lo: f64,
    psi_hi: f64,
    k: f64,
    predicted_lo: i64,
    predicted_hi: i64,
    found: usize,
    within_predicted: bool,
}

#[derive(Serialize)]
struct CwCountOutput {
    tau: f64,
    phi: f64,
    count: usize,
    k: f64,
    predicted_lo: i64,
    predicted_hi: i64,
    within_predicted: bool,
    total_found: usize,
    pieces: Vec<PieceReport>,
}

/// Executes one command; returns the list of files written.
pub fn run(config: &RunConfig) -> Result<Vec<PathBuf>> {
    if let Some(t) = config.threads {
        // Ignore failure: the global pool may already exist in-process.
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(t.max(1))
            .build_global();
    }
    std::fs::create_dir_all(&config.out_dir)?;
    let mut written = Vec::new();

    let manifest = Manifest {
        schema: MANIFEST_SCHEMA.to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
    };
    let manifest_path = config.out_dir.join("manifest.json");
    write_json(&manifest_path, &manifest)?;
    written.push(manifest_path);

    match &config.command {
        CommandConfig::CwBranch { psi_start, psi_end } => {
            let model = build_model(config)?;
            let branch = primary_branch(&model, *psi_start, *psi_end, &config.defaults)?;
            let n = model.dim();
            let mut header = vec!["psi".to_string(), "omega".to_string()];
            for i in 1..=n {
                header.push(format!("x0_{i}"));
            }
            header.push("residual".to_string());
            let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
            let rows: Vec<Vec<String>> = branch
                .nodes
                .iter()
                .map(|node| {
                    let mut row = vec![fmt_f64(node.psi), fmt_f64(node.omega)];
                    for v in node.x0.iter() {
                        row.push(fmt_f64(*v));
                    }
                    row.push(fmt_f64(node.residual_norm));
                    row
                })
                .collect();
            let path = config.out_dir.join("cw_branch.csv");
            write_csv(&path, &header_refs, &rows)?;
            written.push(path);
        }
        CommandConfig::CwCount { tau, phi, piece } => {
            let model = build_model(config)?;
            let branch =
                primary_branch(&model, 0.0, std::f64::consts::TAU, &config.defaults)?;
            let spans = monotone_pieces(&branch);
            let mut pieces = Vec::new();
            let mut all_cws: Vec<(usize, cw::CWPoint)> = Vec::new();
            for (idx, span) in spans.iter().enumerate() {
                let sub = cw::PrimaryBranch::from_nodes(span.clone(), false);
                let report = cw::enumerate_cws(&model, &sub, *tau, *phi)?;
                pieces.push(PieceReport {
                    piece: idx,
                    psi_lo: sub.nodes.first().map(|n| n.psi).unwrap_or(f64::NAN),
                    psi_hi: sub.nodes.last().map(|n| n.psi).unwrap_or(f64::NAN),
                    k: report.k_coeff,
                    predicted_lo: report.predicted.0,
                    predicted_hi: report.predicted.1,
                    found: report.found,
                    within_predicted: report.within_predicted(),
                });
                for c in report.cws {
                    all_cws.push((idx, c));
                }
            }
            let sel = pieces.get(*piece).ok_or_else(|| {
                EqwaveError::Config(format!(
                    "piece {} out of range ({} pieces)",
                    piece,
                    pieces.len()
                ))
            })?;
            let output = CwCountOutput {
                tau: *tau,
                phi: wrap_angle(*phi),
                count: sel.found,
                k: sel.k,
                predicted_lo: sel.predicted_lo,
                predicted_hi: sel.predicted_hi,
                within_predicted: sel.within_predicted,
                total_found: all_cws.len(),
                pieces,
            };
            let path = config.out_dir.join("cw_count.json");
            write_json(&path, &output)?;
            written.push(path);

            let n = model.dim();
            let mut header = vec!["piece".to_string(), "psi".to_string(), "omega".to_string()];
            for i in 1..=n {
                header.push(format!("x0_{i}"));
            }
            header.push("residual".to_string());
            let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
            let rows: Vec<Vec<String>> = all_cws
                .iter()
                .map(|(idx, c)| {
                    let mut row =
                        vec![idx.to_string(), fmt_f64(c.psi), fmt_f64(c.omega)];
                    for v in c.x0.iter() {
                        row.push(fmt_f64(*v));
                    }
                    row.push(fmt_f64(c.residual_norm));
                    row
                })
                .collect();
            let path = config.out_dir.join("cw_count.csv");
            write_csv(&path, &header_refs, &rows)?;
            written.push(path);
        }
        CommandConfig::CwSpectrum { psi, tau } => {
            let model = build_model(config)?;
            let base = model.with_delay_phase(0.0, 0.0)?;
            let (gx, gw) = cw_guess(&base);
            let cw_point = cw::solve_cw(&base, *psi, (&gx, gw))?;
            let data = cw_spectrum::CharEqData::from_cw(&base, &cw_point, *tau)?;
            let grid = match config.defaults.chi_max {
                Some(cm) => {
                    let m = if config.defaults.chi_points > 0 {
                        config.defaults.chi_points
                    } else {
                        400
                    };
                    (0..=m)
                        .map(|i| -cm + 2.0 * cm * i as f64 / m as f64)
                        .collect::<Vec<f64>>()
                }
                None => cw_spectrum::default_chi_grid(&data),
            };
            let report = cw_spectrum::spectrum_report(
                &base,
                &cw_point,
                *tau,
                config.defaults.root_count,
                Some(&grid),
            )?;
            let mut rows: Vec<Vec<String>> = Vec::new();
            for l in &report.strong {
                rows.push(vec![
                    "strong".into(),
                    fmt_f64(l.re),
                    fmt_f64(l.im),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
            for (j, branch) in report.continuous.branches.iter().enumerate() {
                for p in branch {
                    rows.push(vec![
                        "continuous".into(),
                        String::new(),
                        String::new(),
                        fmt_f64(p.chi),
                        fmt_f64(p.gamma),
                        j.to_string(),
                    ]);
                }
            }
            for l in &report.rightmost {
                rows.push(vec![
                    "rightmost".into(),
                    fmt_f64(l.re),
                    fmt_f64(l.im),
                    String::new(),
                    String::new(),
                    String::new(),
                ]);
            }
            let path = config.out_dir.join("cw_spectrum.csv");
            write_csv(&path, &["kind", "re", "im", "chi", "gamma", "branch_j"], &rows)?;
            written.push(path);

            #[derive(Serialize)]
            struct SpectrumSummary {
                psi: f64,
                tau: f64,
                class: Option<cw_spectrum::StabilityClass>,
                strong_max_re: f64,
                gamma_max: f64,
                deficient_count: usize,
            }
            let summary = SpectrumSummary {
                psi: wrap_angle(*psi),
                tau: *tau,
                class: report.class,
                strong_max_re: report
                    .strong
                    .iter()
                    .map(|l| l.re)
                    .fold(f64::NEG_INFINITY, f64::max),
                gamma_max: report.continuous.gamma_max_excluding_touch(),
                deficient_count: report.continuous.deficient_count,
            };
            let path = config.out_dir.join("cw_spectrum.json");
            write_json(&path, &summary)?;
            written.push(path);
        }
        CommandConfig::MwSolve { seed_file } => {
            let model = build_model(config)?;
            let (tau, phi) = (config.model.tau, config.model.phi);
            let guess = match seed_file {
                Some(path) => {
                    let rec: mw::MwRecord =
                        serde_json::from_str(&std::fs::read_to_string(path)?)?;
                    mw::MwGuess::from_solution(&rec.to_solution(&model)?)
                }
                None => simulation_seed(&model, config)?,
            };
            let opts = mw::MwSolveOptions {
                modes: config.defaults.modes,
                ..mw::MwSolveOptions::default()
            };
            let solution = mw::solve_mw(&model, tau, phi, &guess, &opts)?;
            let path = config.out_dir.join("mw.json");
            write_json(&path, &solution.to_record())?;
            written.push(path);
        }
        CommandConfig::MwEnumerate {
            tau,
            phi,
            seed_file,
            eps0,
            delta0,
            gamma0,
        } => {
            let model = build_model(config)?;
            let rec: mw::MwRecord =
                serde_json::from_str(&std::fs::read_to_string(seed_file)?)?;
            let mw0 = rec.to_solution(&model)?;
            let (e0, d0, g0) = match (eps0, delta0, gamma0) {
                (Some(e), Some(d), Some(g)) => (*e, *d, *g),
                _ => mw::estimate_perturbation_radii(&model, &mw0)?,
            };
            let opts = mw::FamilyOptions {
                eps0: e0,
                delta0: d0,
                gamma0: g0,
                max_pairs: 2000,
                modes: config.defaults.modes,
            };
            let report = mw::enumerate_family(&model, &mw0, *tau, *phi, &opts)?;
            #[derive(Serialize)]
            struct FamilyOutput {
                tau: f64,
                phi: f64,
                eps0: f64,
                delta0: f64,
                gamma0: f64,
                t0: f64,
                v0: f64,
                found: usize,
                unresolved: usize,
                distinct: bool,
                lower_bound: mw::CountBound,
                members: Vec<mw::MwRecord>,
                pairs: Vec<(i64, i64)>,
            }
            let v0n = mw::DerivedQuantities {
                t_period: report.t0,
                v_phase: report.v0,
            }
            .v_normalized();
            let bound = mw::count_lower_bound(report.t0, v0n, e0, d0, g0, *tau)?;
            let output = FamilyOutput {
                tau: *tau,
                phi: wrap_angle(*phi),
                eps0: e0,
                delta0: d0,
                gamma0: g0,
                t0: report.t0,
                v0: report.v0,
                found: report.solutions.len(),
                unresolved: report.unresolved.len(),
                distinct: report.distinct,
                lower_bound: bound,
                members: report.solutions.iter().map(|s| s.mw.to_record()).collect(),
                pairs: report.solutions.iter().map(|s| (s.k, s.l)).collect(),
            };
            let path = config.out_dir.join("mw_family.json");
            write_json(&path, &output)?;
            written.push(path);
        }
        CommandConfig::MwCountBound {
            t0,
            v0,
            eps0,
            delta0,
            gamma0,
            tau,
        } => {
            let bound = mw::count_lower_bound(*t0, *v0, *eps0, *delta0, *gamma0, *tau)?;
            #[derive(Serialize)]
            struct BoundOutput {
                t0: f64,
                v0: f64,
                eps0: f64,
                delta0: f64,
                gamma0: f64,
                tau: f64,
                r: f64,
                tau_star: f64,
                k_count: u64,
                l_count: u64,
                #[serde(rename = "N")]
                n: u64,
                below_threshold: bool,
            }
            let out = BoundOutput {
                t0: *t0,
                v0: *v0,
                eps0: *eps0,
                delta0: *delta0,
                gamma0: *gamma0,
                tau: *tau,
                r: bound.r,
                tau_star: bound.tau_star,
                k_count: bound.k_count,
                l_count: bound.l_count,
                n: bound.n,
                below_threshold: bound.below_threshold,
            };
            let path = config.out_dir.join("mw_count_bound.json");
            write_json(&path, &out)?;
            written.push(path);
        }
        CommandConfig::MwFloquet { seed_file } => {
            let model = build_model(config)?;
            let rec: mw::MwRecord =
                serde_json::from_str(&std::fs::read_to_string(seed_file)?)?;
            let solution = rec.to_solution(&model)?;
            let opts = mw_spectrum::FloquetOptions {
                steps_per_period: config.defaults.steps_per_period,
                ..mw_spectrum::FloquetOptions::default()
            };
            let report = mw_spectrum::monodromy_multipliers(
                &model,
                &solution,
                config.defaults.root_count,
                &opts,
            )?;
            let rows: Vec<Vec<String>> = report
                .multipliers
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    vec![
                        fmt_f64(solution.tau),
                        "0".to_string(),
                        fmt_f64(m.re),
                        fmt_f64(m.im),
                        fmt_f64(m.norm()),
                        (i == report.trivial.0 || i == report.trivial.1).to_string(),
                    ]
                })
                .collect();
            let path = config.out_dir.join("mw_floquet.csv");
            write_csv(
                &path,
                &["tau", "k", "re_mu", "im_mu", "abs_mu", "is_trivial"],
                &rows,
            )?;
            written.push(path);
            #[derive(Serialize)]
            struct FloquetSummary {
                class: mw_spectrum::FloquetClass,
                trivial_error: f64,
                max_nontrivial_modulus: f64,
                steps_per_period: usize,
            }
            let path = config.out_dir.join("mw_floquet.json");
            write_json(
                &path,
                &FloquetSummary {
                    class: report.class,
                    trivial_error: report.trivial_error,
                    max_nontrivial_modulus: report.max_nontrivial_modulus(),
                    steps_per_period: report.steps_per_period,
                },
            )?;
            written.push(path);
        }
        CommandConfig::MwTrend { seed_file, chain } => {
            let model = build_model(config)?;
            let rec: mw::MwRecord =
                serde_json::from_str(&std::fs::read_to_string(seed_file)?)?;
            let solution = rec.to_solution(&model)?;
            let opts = mw_spectrum::FloquetOptions {
                steps_per_period: config.defaults.steps_per_period,
                adaptive: false,
                ..mw_spectrum::FloquetOptions::default()
            };
            let report = mw_spectrum::large_delay_trend(&model, &solution, *chain, &opts)?;
            #[derive(Serialize)]
            struct TrendOutput {
                class: mw_spectrum::TrendClass,
                intercept: f64,
                truncated: bool,
                points: Vec<(f64, f64)>,
            }
            let path = config.out_dir.join("mw_trend.json");
            write_json(
                &path,
                &TrendOutput {
                    class: report.class,
                    intercept: report.intercept,
                    truncated: report.truncated,
                    points: report.points.clone(),
                },
            )?;
            written.push(path);
        }
        CommandConfig::Simulate {
            t_end,
            h,
            init,
            psi,
            value,
            init_file,
        } => {
            let model = build_model(config)?;
            let tau = model.tau();
            let h = h.unwrap_or(tau / config.defaults.sim_h_div as f64);
            let history = match init.as_str() {
                "const" => {
                    let x = match value {
                        Some(v) => DVector::from_vec(v.clone()),
                        None => DVector::zeros(model.dim()),
                    };
                    if x.len() != model.dim() {
                        return Err(EqwaveError::Config(format!(
                            "--value has {} entries, model needs {}",
                            x.len(),
                            model.dim()
                        )));
                    }
                    sim::HistorySegment::constant(tau, 0.0, x)?
                }
                "cw" => {
                    let (gx, gw) = cw_guess(&model);
                    let point = match psi {
                        Some(p) => {
                            let at_phi = cw::reappearance_phi(
                                &cw::solve_cw(&model, *p, (&gx, gw))?,
                                tau,
                            );
                            if (at_phi - model.phi()).abs() > 1e-6 {
                                return Err(EqwaveError::Config(format!(
                                    "CW at psi = {p} exists at phi = {at_phi:.6}, \
                                     not at the configured phi = {:.6}",
                                    model.phi()
                                )));
                            }
                            cw::solve_cw(&model, *p, (&gx, gw))?
                        }
                        None => cw::solve_cw_at_params(&model, tau, model.phi(), (&gx, gw))?,
                    };
                    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
                    let kick: DVector<f64> = DVector::from_fn(model.dim(), |_, _| {
                        config.defaults.kick * rng.gen_range(-1.0..1.0)
                    });
                    let gen = model.generator().clone();
                    let x0 = point.x0.clone();
                    let omega = point.omega;
                    sim::HistorySegment::from_fn(tau, 0.0, 128, move |t| {
                        gen.action(omega * t) * (&x0 + &kick)
                    })?
                }
                "mw" | "file" => {
                    let path = init_file.as_ref().ok_or_else(|| {
                        EqwaveError::Config("--init-file required for init = mw|file".into())
                    })?;
                    let rec: mw::MwRecord =
                        serde_json::from_str(&std::fs::read_to_string(path)?)?;
                    let solution = rec.to_solution(&model)?;
                    let gen = model.generator().clone();
                    let beta = solution.beta;
                    let omega = solution.omega;
                    sim::HistorySegment::from_fn(tau, 0.0, 256, move |t| {
                        gen.action(omega * t) * solution.profile_at(beta * t)
                    })?
                }
                other => {
                    return Err(EqwaveError::Config(format!(
                        "unknown init mode '{other}' (cw | mw | const | file)"
                    )))
                }
            };
            let traj = sim::integrate(&model, &history, *t_end, h)?;
            let n = model.dim();
            let mut header = vec!["t".to_string()];
            for i in 1..=n {
                header.push(format!("x_{i}"));
            }
            header.push("amplitude".to_string());
            header.push("phase".to_string());
            let header_refs: Vec<&str> = header.iter().map(|s| s.as_str()).collect();
            let rows: Vec<Vec<String>> = (0..traj.len())
                .map(|k| {
                    let mut row = vec![fmt_f64(traj.times()[k])];
                    for v in traj.states()[k].iter() {
                        row.push(fmt_f64(*v));
                    }
                    row.push(fmt_f64(traj.amplitude(k)));
                    row.push(fmt_f64(wrap_angle(traj.phase(k))));
                    row
                })
                .collect();
            let path = config.out_dir.join("trajectory.csv");
            write_csv(&path, &header_refs, &rows)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Runs the seeding simulation for `mw-solve` without an explicit seed.
fn simulation_seed(model: &EquivariantModel, config: &RunConfig) -> Result<mw::MwGuess> {
    let tau = model.tau();
    if tau <= 0.0 {
        return Err(EqwaveError::Config(
            "simulation seeding needs tau > 0".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let n = model.dim();
    let mut base = DVector::zeros(n);
    base[0] = 0.8;
    if n > 2 {
        base[2] = -0.05;
    }
    let kicks: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.gen_range(0.2..1.0), rng.gen_range(-0.02..0.02)))
        .collect();
    let hist = sim::HistorySegment::from_fn(tau, 0.0, 64, move |t| {
        let mut x = base.clone();
        for (i, (w, a)) in kicks.iter().enumerate() {
            x[i] += a * (w * t).sin();
        }
        x
    })?;
    let t_end = config.defaults.sim_t_end;
    let traj = sim::integrate(
        model,
        &hist,
        t_end,
        tau / config.defaults.sim_h_div as f64,
    )?;
    mw::seed_from_trajectory(model, &traj, 2.0 * t_end / 3.0, 24)
}

/// Entry point shared by the binary: returns the process exit code.
pub fn main_with(cli: Cli) -> i32 {
    let (config, dry_run) = match parse(cli) {
        Ok(p) => p,
        Err(e) => {
            eprintln!("{e}");
            return 2;
        }
    };
    // Validate the model configuration eagerly in all modes.
    if !matches!(config.command, CommandConfig::MwCountBound { .. }) {
        if let Err(e) = ModelRegistry::default().build(&config.model) {
            eprintln!("{e}");
            return 2;
        }
    }
    if dry_run {
        match serde_json::to_string_pretty(&config) {
            Ok(text) => {
                println!("{text}");
                0
            }
            Err(e) => {
                eprintln!("configuration error: {e}");
                2
            }
        }
    } else {
        match run(&config) {
            Ok(files) => {
                for f in files {
                    println!("wrote {}", f.display());
                }
                0
            }
            Err(e @ EqwaveError::Config(_)) => {
                eprintln!("{e}");
                2
            }
            Err(e) => {
                eprintln!("run failed: {e}");
                let _ = std::fs::create_dir_all(&config.out_dir);
                let _ = std::fs::write(
                    config.out_dir.join("error.txt"),
                    format!("{e}\n"),
                );
                1
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_round_trips_doubles() {
        for v in [
            1.0,
            -0.333333333333333314829616256247,
            6.02e23,
            -1.7e-300,
            std::f64::consts::PI,
        ] {
            let s = fmt_f64(v);
            let back: f64 = s.parse().unwrap();
            assert_eq!(v.to_bits(), back.to_bits(), "lossy round trip for {v}: {s}");
        }
    }

    #[test]
    fn run_config_json_round_trip() {
        let cfg = RunConfig {
            model: ModelConfig {
                model: "lang_kobayashi".into(),
                params: BTreeMap::from([("alpha".into(), 2.0)]),
                tau: 1.0,
                phi: 0.25,
            },
            command: CommandConfig::CwCount {
                tau: 10.0,
                phi: 0.5,
                piece: 0,
            },
            out_dir: PathBuf::from("/tmp/x"),
            seed: 7,
            threads: Some(2),
            defaults: Defaults::default(),
        };
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back.model, cfg.model);
        assert_eq!(back.seed, 7);
        matches!(back.command, CommandConfig::CwCount { .. });
    }
}
