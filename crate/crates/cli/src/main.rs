//! `efdr`: multilayer FDR-controlled feature detection.
//!
//! Subcommands: `simulate` (method grids on synthetic designs), `analyze`
//! (run a pipeline on a dataset), `filter` (generalized e-filter on a
//! precomputed e-value table).

mod config;
mod presets;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use efdr::error::{Error, Result};
use efdr::io;
use efdr::knockoff::mkf_plus;
use efdr::model::LayerPartition;
use efdr::pipeline::{
    eds_gkf_config, run_dfefp, run_eds_filter, run_eds_gkf, BaseProcedure, LayerConfig,
    PipelineConfig, PipelineReport,
};
use efdr::simlab::{self, MethodSettings, SimMethod};
use efdr::{efilter, mirror};

#[derive(Parser)]
#[command(
    name = "efdr",
    about = "Multilayer FDR-controlled feature detection via generalized e-values",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a simulation grid and write FDR/power records.
    Simulate(SimulateArgs),
    /// Run a detection pipeline on a dataset.
    Analyze(AnalyzeArgs),
    /// Apply the generalized e-filter to a precomputed e-value table.
    Filter(FilterArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Named preset: corr-sweep, signal-sweep, corr-sweep-weak, desk,
    /// single-layer-compare.
    #[arg(long)]
    preset: Option<String>,
    /// TOML config (flags override its values).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    trials: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Comma-separated methods (eds-gkf, eds-gkf-ckn, mkf-plus, mkf-ckn, eds, ds, mds).
    #[arg(long)]
    methods: Option<String>,
    /// Comma-separated per-layer target levels.
    #[arg(long)]
    alpha: Option<String>,
    /// Comma-separated per-layer original levels.
    #[arg(long)]
    alpha0: Option<String>,
    /// Data-splitting replications for derandomized methods.
    #[arg(long)]
    reps: Option<usize>,
    /// Output directory (default "out").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output formats: csv, json (comma-separated; default both).
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: Option<PathBuf>,
    /// Group-map file (feature_id, layer, group_id). Omitted: one singleton layer.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Response column name.
    #[arg(long)]
    response: Option<String>,
    /// Treat the data as a binary mutation panel and preprocess it.
    #[arg(long)]
    panel: bool,
    /// Panel preprocessing: drop features appearing at most this many times.
    #[arg(long)]
    min_count: Option<usize>,
    /// Pipeline: eds-gkf, eds-gkf-ckn, eds, e-dmkf, mkf-plus, mkf-ckn.
    #[arg(long)]
    method: Option<String>,
    /// Expansion factor override.
    #[arg(long)]
    c: Option<f64>,
    #[arg(long)]
    alpha: Option<String>,
    #[arg(long)]
    alpha0: Option<String>,
    /// Replications for data-splitting layers.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (default "out").
    #[arg(long)]
    out: Option<PathBuf>,
    /// Output formats (default "json,csv").
    #[arg(long)]
    format: Option<String>,
}

#[derive(Args)]
struct FilterArgs {
    /// E-value table CSV (layer, group_id, evalue).
    #[arg(long)]
    evalues: PathBuf,
    /// Group-map file; omitted for a single singleton layer.
    #[arg(long)]
    groups: Option<PathBuf>,
    /// Comma-separated per-layer target levels.
    #[arg(long)]
    alpha: String,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

fn parse_level_list(text: &str, what: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|tok| {
            tok.trim()
                .parse::<f64>()
                .map_err(|_| Error::invalid_input(format!("cannot parse {what} entry '{tok}'")))
        })
        .collect()
}

fn parse_method_list(text: &str) -> Result<Vec<SimMethod>> {
    text.split(',').map(|tok| SimMethod::parse(tok.trim())).collect()
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn run_simulate(args: &SimulateArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => config::load_config(path)?,
        None => config::RunConfig::default(),
    };
    if let Some(mode) = &cfg.mode {
        if mode != "simulate" {
            return Err(Error::invalid_input(format!("config mode is '{mode}', not 'simulate'")));
        }
    }
    let sim_cfg = cfg.simulate.clone().unwrap_or_default();

    let preset_name = args.preset.clone().or(sim_cfg.preset.clone());
    let mut plan = match (&preset_name, &sim_cfg.design) {
        (Some(name), _) => presets::preset(name)?,
        (None, Some(design)) => presets::SimulatePlan {
            points: design.points()?,
            methods: vec![
                SimMethod::MkfPlus { c: 1.0 },
                SimMethod::EdsGkf { c: 1.0 },
                SimMethod::EdsGkf { c: 1.93 },
            ],
            settings: MethodSettings::default(),
            trials: 50,
        },
        (None, None) => {
            return Err(Error::invalid_input("simulate needs --preset or a config with a design"))
        }
    };

    if let Some(trials) = sim_cfg.trials {
        plan.trials = trials;
    }
    if let Some(methods) = &sim_cfg.methods {
        plan.methods = methods.iter().map(|m| SimMethod::parse(m)).collect::<Result<_>>()?;
    }
    if let Some(reps) = sim_cfg.ds_replications {
        plan.settings.ds_replications = reps;
    }
    if let Some(alphas) = &sim_cfg.alphas {
        plan.settings.alphas = alphas.clone();
    }
    if let Some(alpha0s) = &sim_cfg.alpha0s {
        plan.settings.alpha0s = alpha0s.clone();
    }
    // CLI flags take precedence over both preset and config.
    if let Some(trials) = args.trials {
        plan.trials = trials;
    }
    if let Some(methods) = &args.methods {
        plan.methods = parse_method_list(methods)?;
    }
    if let Some(reps) = args.reps {
        plan.settings.ds_replications = reps;
    }
    if let Some(alpha) = &args.alpha {
        plan.settings.alphas = parse_level_list(alpha, "alpha")?;
    }
    if let Some(alpha0) = &args.alpha0 {
        plan.settings.alpha0s = parse_level_list(alpha0, "alpha0")?;
    }
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let out = args
        .out
        .clone()
        .or(cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let formats = resolve_formats(args.format.as_deref(), cfg.formats.as_deref(), "csv,json");

    let result =
        simlab::run_experiment(&plan.points, &plan.methods, &plan.settings, plan.trials, seed)?;
    ensure_out_dir(&out)?;
    if formats.iter().any(|f| f == "csv") {
        io::write_experiment_csv(&result, &out.join("results.csv"))?;
        io::write_failures_csv(&result, &out.join("failures.csv"))?;
        io::write_timings_csv(&result, &out.join("timings.csv"))?;
    }
    if formats.iter().any(|f| f == "json") {
        let summary = simlab::summarize(&result);
        io::write_summary_json(&summary, result.failures.len(), &out.join("summary.json"))?;
    }
    eprintln!(
        "simulate: {} records, {} failures -> {}",
        result.records.len(),
        result.failures.len(),
        out.display()
    );
    Ok(())
}

fn resolve_formats(
    flag: Option<&str>,
    config: Option<&[String]>,
    default: &str,
) -> Vec<String> {
    match (flag, config) {
        (Some(f), _) => f.split(',').map(|s| s.trim().to_string()).collect(),
        (None, Some(c)) => c.to_vec(),
        (None, None) => default.split(',').map(|s| s.to_string()).collect(),
    }
}

enum AnalyzeMethod {
    EdsGkf { c: f64 },
    Eds,
    EDmkf,
    Mkf { c: f64 },
}

fn parse_analyze_method(name: &str, c_override: Option<f64>) -> Result<AnalyzeMethod> {
    let m = match name {
        "eds-gkf" => AnalyzeMethod::EdsGkf { c: c_override.unwrap_or(1.0) },
        "eds-gkf-ckn" => AnalyzeMethod::EdsGkf { c: c_override.unwrap_or(1.93) },
        "eds" => AnalyzeMethod::Eds,
        "e-dmkf" => AnalyzeMethod::EDmkf,
        "mkf-plus" => AnalyzeMethod::Mkf { c: c_override.unwrap_or(1.0) },
        "mkf-ckn" => AnalyzeMethod::Mkf { c: c_override.unwrap_or(1.93) },
        other => {
            return Err(Error::invalid_input(format!(
                "unknown analyze method '{other}' (expected eds-gkf, eds-gkf-ckn, eds, e-dmkf, mkf-plus, mkf-ckn)"
            )))
        }
    };
    Ok(m)
}

fn write_pipeline_outputs(
    report: &PipelineReport,
    partition: &LayerPartition,
    feature_names: Option<&[String]>,
    out: &Path,
    formats: &[String],
) -> Result<()> {
    ensure_out_dir(out)?;
    if formats.iter().any(|f| f == "json") {
        io::write_selection_json(
            &report.selection,
            partition,
            feature_names,
            &out.join("selection.json"),
        )?;
    }
    if formats.iter().any(|f| f == "csv") {
        io::save_evalue_table(&report.aggregated_evalues, &out.join("evalues.csv"))?;
    }
    Ok(())
}

fn run_analyze(args: &AnalyzeArgs) -> Result<()> {
    let cfg = match &args.config {
        Some(path) => config::load_config(path)?,
        None => config::RunConfig::default(),
    };
    if let Some(mode) = &cfg.mode {
        if mode != "analyze" {
            return Err(Error::invalid_input(format!("config mode is '{mode}', not 'analyze'")));
        }
    }
    let section = cfg.analyze.clone().unwrap_or_default();
    let data_path = args
        .data
        .clone()
        .or(section.data.as_ref().map(PathBuf::from))
        .ok_or_else(|| Error::invalid_input("analyze needs --data"))?;
    let groups_path = args.groups.clone().or(section.groups.as_ref().map(PathBuf::from));
    let response = args.response.clone().or(section.response.clone()).unwrap_or_else(|| "y".into());
    let panel = args.panel || section.panel.unwrap_or(false);
    let min_count = args.min_count.or(section.min_count).unwrap_or(3);
    let method_name = args
        .method
        .clone()
        .or(section.method.clone())
        .ok_or_else(|| Error::invalid_input("analyze needs --method"))?;
    let method = parse_analyze_method(&method_name, args.c.or(section.c))?;
    let seed = args.seed.or(cfg.seed).unwrap_or(0);
    let reps = args.reps.or(section.replications).unwrap_or(50);
    let out = args
        .out
        .clone()
        .or(cfg.out.as_ref().map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("out"));
    let formats = resolve_formats(args.format.as_deref(), cfg.formats.as_deref(), "json,csv");

    let (dataset, partition) = if panel {
        let groups = groups_path
            .as_ref()
            .ok_or_else(|| Error::invalid_input("panel mode needs --groups for position labels"))?;
        let raw = io::load_panel(&data_path, groups, &response)?;
        io::preprocess_panel(&raw, min_count)?
    } else {
        io::load_dataset(&data_path, groups_path.as_deref(), &response)?
    };

    let m_count = partition.num_layers();
    let alphas = match args.alpha.clone().or_else(|| None) {
        Some(a) => parse_level_list(&a, "alpha")?,
        None => section.alphas.clone().unwrap_or_else(|| vec![0.2; m_count]),
    };
    let alpha0s = match args.alpha0.clone() {
        Some(a) => parse_level_list(&a, "alpha0")?,
        None => section
            .alpha0s
            .clone()
            .unwrap_or_else(|| alphas.iter().map(|a| a / 2.0).collect()),
    };
    if alphas.len() != m_count || alpha0s.len() != m_count {
        return Err(Error::invalid_input(format!(
            "need one alpha and one alpha0 per layer (M={m_count})"
        )));
    }

    let names = dataset.feature_names.clone();
    match method {
        AnalyzeMethod::EdsGkf { c } => {
            let cfg = eds_gkf_config(&partition, &alphas, &alpha0s, reps, seed)?;
            let report = run_eds_gkf(&dataset, &cfg, c)?;
            write_pipeline_outputs(&report, &partition, names.as_deref(), &out, &formats)?;
            eprintln!(
                "analyze: {} features selected -> {}",
                report.selection.selected_features.len(),
                out.display()
            );
        }
        AnalyzeMethod::Eds => {
            let layers = (0..m_count)
                .map(|m0| LayerConfig {
                    base: BaseProcedure::Ds { mode: mirror::GroupStatMode::Mean },
                    alpha0: alpha0s[m0],
                    alpha: alphas[m0],
                    replications: reps,
                    weights: None,
                })
                .collect();
            let cfg =
                PipelineConfig { partition: partition.clone(), layers, expansion: 1.0, seed };
            let report = run_eds_filter(&dataset, &cfg)?;
            write_pipeline_outputs(&report, &partition, names.as_deref(), &out, &formats)?;
            eprintln!(
                "analyze: {} features selected -> {}",
                report.selection.selected_features.len(),
                out.display()
            );
        }
        AnalyzeMethod::EDmkf => {
            let layers = (0..m_count)
                .map(|m0| LayerConfig {
                    base: BaseProcedure::Knockoff,
                    alpha0: alpha0s[m0],
                    alpha: alphas[m0],
                    replications: 1,
                    weights: None,
                })
                .collect();
            let cfg =
                PipelineConfig { partition: partition.clone(), layers, expansion: 1.0, seed };
            let report = run_dfefp(&dataset, &cfg)?;
            write_pipeline_outputs(&report, &partition, names.as_deref(), &out, &formats)?;
            eprintln!(
                "analyze: {} features selected -> {}",
                report.selection.selected_features.len(),
                out.display()
            );
        }
        AnalyzeMethod::Mkf { c } => {
            let result = mkf_plus(&dataset, &partition, &alphas, c)?;
            ensure_out_dir(&out)?;
            let selected: Vec<serde_json::Value> = result
                .selected_features
                .iter()
                .map(|&j| match &names {
                    Some(n) => serde_json::json!({ "feature": j, "name": n[j - 1] }),
                    None => serde_json::json!({ "feature": j }),
                })
                .collect();
            let layers: Vec<serde_json::Value> = (1..=m_count)
                .map(|m| {
                    serde_json::json!({
                        "layer": m,
                        "groups": result.per_layer_groups[m - 1].iter().copied().collect::<Vec<_>>(),
                        "threshold": result.cuts[m - 1].as_f64(),
                        "v_hat": result.per_layer_v_hat[m - 1],
                        "fdp_hat": result.per_layer_fdp_hat[m - 1],
                    })
                })
                .collect();
            let doc = serde_json::json!({ "selected_features": selected, "layers": layers });
            std::fs::write(
                out.join("selection.json"),
                format!("{}\n", serde_json::to_string_pretty(&doc).unwrap()),
            )?;
            eprintln!(
                "analyze: {} features selected -> {}",
                result.selected_features.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn run_filter(args: &FilterArgs) -> Result<()> {
    let alphas = parse_level_list(&args.alpha, "alpha")?;
    let partition = match &args.groups {
        Some(path) => {
            let n = io::infer_group_map_features(path)?;
            io::load_group_map(path, n)?
        }
        None => {
            // Without a group map the table must be single-layer.
            let groups = io::infer_single_layer_groups(&args.evalues)?;
            LayerPartition::singletons(groups)?
        }
    };
    if alphas.len() != partition.num_layers() {
        return Err(Error::invalid_input(format!(
            "{} alpha levels for {} layers",
            alphas.len(),
            partition.num_layers()
        )));
    }
    let table = io::load_evalue_table(&args.evalues, &partition)?;
    let levels = efilter::FilterLevels::new(alphas)?;
    let selection = efilter::generalized_efilter(&table, &levels, &partition)?;
    ensure_out_dir(&args.out)?;
    io::write_selection_json(&selection, &partition, None, &args.out.join("selection.json"))?;
    eprintln!(
        "filter: {} features selected -> {}",
        selection.selected_features.len(),
        args.out.display()
    );
    Ok(())
}

/// Exit codes: 0 success, 1 usage, 2 data, 3 numerical.
fn exit_code(err: &Error) -> i32 {
    match err {
        Error::InvalidInput(_) => 1,
        Error::Parse { .. } | Error::Csv(_) | Error::Io(_) | Error::InvalidPartition(_) => 2,
        Error::Numerical(_) => 3,
        Error::Layer { source, .. } => exit_code(source),
    }
}

fn category(code: i32) -> &'static str {
    match code {
        1 => "usage",
        2 => "data",
        _ => "numerical",
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are ordinary successful output.
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                std::process::exit(0);
            }
            eprintln!("error: usage: {}", e.kind());
            std::process::exit(1);
        }
    };
    let outcome = match &cli.command {
        Command::Simulate(args) => run_simulate(args),
        Command::Analyze(args) => run_analyze(args),
        Command::Filter(args) => run_filter(args),
    };
    if let Err(e) = outcome {
        let code = exit_code(&e);
        let message = e.to_string().replace('\n', " ");
        eprintln!("error: {}: {}", category(code), message);
        std::process::exit(code);
    }
}
