use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mbsde_cli::config::ExperimentConfig;
use mbsde_cli::dirichlet_run::run_dirichlet;
use mbsde_cli::geomtest::{chart_by_name, geomtest};
use mbsde_cli::report::{collect_manifests, render_text, summarize};
use mbsde_cli::runner::{out_dir_for, run_scenario};
use mbsde_cli::scenario::{build_dirichlet, dirichlet_names, scenario_names};

#[derive(Parser)]
#[command(name = "mbsde", about = "Backward SDEs with manifold values: solver and verification runs", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the solver pipeline of a scenario (verifications disabled)
    Solve {
        /// scenario name or config JSON path
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        /// halve dx and dt this many times
        #[arg(long, default_value_t = 0)]
        refine: u32,
        #[arg(long)]
        out: Option<String>,
        /// force this truncation threshold even if the certificate fails
        #[arg(long)]
        force_epsilon: Option<f64>,
    },
    /// Run a scenario with its verification checks enabled
    Verify {
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 0)]
        refine: u32,
        #[arg(long)]
        out: Option<String>,
        #[arg(long)]
        force_epsilon: Option<f64>,
    },
    /// Run an exit-time (Dirichlet) scenario
    Dirichlet {
        config: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<String>,
    },
    /// Run the geometry kernel invariants on a chart
    Geomtest {
        /// flat-1d | flat-2d | half-plane | sphere-cap | interval-e2x | chart JSON path
        chart: String,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Summarise the manifests in a directory
    Report { dir: String },
    /// List built-in scenarios
    List,
}

fn load_config(arg: &str) -> Result<ExperimentConfig, String> {
    if scenario_names().contains(&arg) {
        return Ok(ExperimentConfig::named(arg));
    }
    let text = fs::read_to_string(arg).map_err(|e| format!("cannot read config {arg}: {e}"))?;
    serde_json::from_str(&text).map_err(|e| format!("bad config {arg}: {e}"))
}

fn apply_flags(
    mut cfg: ExperimentConfig,
    seed: Option<u64>,
    refine: u32,
    out: Option<String>,
    force_epsilon: Option<f64>,
) -> ExperimentConfig {
    if seed.is_some() {
        cfg.seed = seed;
    }
    if refine > 0 {
        cfg.refine = refine;
    }
    if out.is_some() {
        cfg.out_dir = out;
    }
    if let Some(eps) = force_epsilon {
        cfg.epsilon_override = Some(eps);
        cfg.force_epsilon = true;
    }
    cfg
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let ok = match cli.command {
        Command::Solve {
            config,
            seed,
            refine,
            out,
            force_epsilon,
        } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            let mut cfg = apply_flags(cfg, seed, refine, out, force_epsilon);
            // solver-only run: strip the verification toggles
            if let Some(custom) = cfg.custom.as_mut() {
                custom.verifications.clear();
            } else if let Some(mut spec) = mbsde_cli::scenario::build_scenario(&cfg.scenario) {
                spec.verifications.clear();
                cfg.custom = Some(spec);
                cfg.scenario = "custom".into();
            }
            run_and_print(&cfg)
        }
        Command::Verify {
            config,
            seed,
            refine,
            out,
            force_epsilon,
        } => {
            let cfg = match load_config(&config) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            let cfg = apply_flags(cfg, seed, refine, out, force_epsilon);
            run_and_print(&cfg)
        }
        Command::Dirichlet { config, seed, out } => {
            let spec = if dirichlet_names().contains(&config.as_str()) {
                build_dirichlet(&config)
            } else {
                fs::read_to_string(&config)
                    .ok()
                    .and_then(|text| serde_json::from_str(&text).ok())
            };
            let Some(mut spec) = spec else {
                eprintln!("unknown dirichlet scenario or config: {config}");
                return ExitCode::from(2);
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let out_dir = PathBuf::from(out.unwrap_or_else(|| format!("runs/{}", spec.name)));
            match run_dirichlet(&spec, &out_dir) {
                Ok(m) => {
                    println!(
                        "{}: {}  value {:?} +- {:.3e}  flow {:?}  tension {:.3e}",
                        m.scenario,
                        if m.overall_pass { "pass" } else { "FAIL" },
                        m.mc_value,
                        m.mc_se,
                        m.flow_value_at_probe,
                        m.tension_residual
                    );
                    m.overall_pass
                }
                Err(e) => {
                    eprintln!("dirichlet run failed: {e}");
                    false
                }
            }
        }
        Command::Geomtest { chart, seed } => {
            let chart = match chart_by_name(&chart) {
                Ok(c) => c,
                Err(e) => {
                    eprintln!("{e}");
                    return ExitCode::from(2);
                }
            };
            match geomtest(&chart, 400, seed.unwrap_or(7)) {
                Ok(report) => {
                    println!("chart {}", report.chart);
                    for c in &report.checks {
                        println!(
                            "  {} {:32} value {:.3e}  tol {:.1e}",
                            if c.pass { "pass" } else { "FAIL" },
                            c.name,
                            c.value,
                            c.tolerance
                        );
                    }
                    report.pass
                }
                Err(e) => {
                    eprintln!("geomtest failed: {e}");
                    false
                }
            }
        }
        Command::Report { dir } => {
            let dir = PathBuf::from(dir);
            match collect_manifests(&dir) {
                Ok(manifests) => {
                    let summary = summarize(&manifests);
                    let text = render_text(&manifests, &summary);
                    print!("{text}");
                    let _ = fs::write(dir.join("summary.txt"), &text);
                    let _ = fs::write(
                        dir.join("summary.json"),
                        serde_json::to_string_pretty(&summary).unwrap_or_default(),
                    );
                    summary.all_pass
                }
                Err(e) => {
                    eprintln!("report failed: {e}");
                    false
                }
            }
        }
        Command::List => {
            println!("scenarios:");
            for n in scenario_names() {
                println!("  {n}");
            }
            println!("dirichlet scenarios:");
            for n in dirichlet_names() {
                println!("  {n}");
            }
            true
        }
    };
    if ok {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run_and_print(cfg: &ExperimentConfig) -> bool {
    let out_dir = out_dir_for(cfg);
    match run_scenario(cfg, &out_dir) {
        Ok(m) => {
            println!(
                "{}: {}  eps {:.4}  |Z|max {:.4e} (1/eps {:.4e}, {})  residual(med) {}  oracle {}",
                m.scenario,
                if m.overall_pass { "pass" } else { "FAIL" },
                m.epsilon_used,
                m.z_bound.max_norm,
                m.z_bound.threshold,
                if m.z_bound.pass { "pass" } else { "FAIL" },
                m.residual
                    .as_ref()
                    .map(|r| format!("{:.3e}", r.median))
                    .unwrap_or_else(|| "-".into()),
                m.oracle_sup_error
                    .map(|e| format!("{e:.3e}"))
                    .unwrap_or_else(|| "-".into()),
            );
            for v in &m.verifications {
                println!("  {} {}", if v.pass { "pass" } else { "FAIL" }, v.name);
            }
            if let Some(stage) = &m.failure_stage {
                eprintln!("  failed at stage {stage}");
            }
            m.overall_pass
        }
        Err(e) => {
            eprintln!("run failed: {e}");
            false
        }
    }
}
