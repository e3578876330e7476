//! Command-line entry point.
//!
//! Exit codes: 0 success, 1 usage/config error, 2 numerical failure (NaN or
//! gradient-check failure), 3 i/o error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use rtn_cli::ablate::ablate;
use rtn_cli::config::{TrainConfig, Variant};
use rtn_cli::diag::{classifier_shift_report, layer_response_report};
use rtn_cli::gradcheck::{run_gradcheck, GradcheckConfig};
use rtn_cli::report::{
    load_report_json, render_ablation, render_report, write_ablation_csv, write_curves_csv,
    write_predictions_csv, write_report_json,
};
use rtn_cli::train::train;
use rtn_core::data::{
    export_csv, gen_conditional_shift, gen_covariate_shift, load_manifest, write_manifest,
    DomainDataset, ShiftFamily, ShiftSpec,
};
use rtn_core::{checkpoint, Error};

#[derive(Parser)]
#[command(
    name = "rtn",
    about = "Residual transfer networks for unsupervised domain adaptation, desk scale",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct ConfigArgs {
    /// Plain-text `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the training seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the variant (source_only, mmd, multi_mmd, mmd_ent, mmd_ent_res).
    #[arg(long)]
    variant: Option<String>,
    /// Override the MMD weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Override the entropy weight.
    #[arg(long)]
    gamma: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig, Error> {
        let mut cfg = match &self.config {
            Some(path) => TrainConfig::from_file(path)?,
            None => TrainConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.parse()?;
        }
        if let Some(l) = self.lambda {
            cfg.lambda = l;
        }
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct GenArgs {
    /// Shift family: covariate_rotation or conditional_boundary.
    #[arg(long)]
    family: String,
    /// Rotation angle in radians.
    #[arg(long)]
    severity: f64,
    #[arg(long, default_value_t = 800)]
    n_source: usize,
    #[arg(long, default_value_t = 800)]
    n_target: usize,
    #[arg(long, default_value_t = 10)]
    dim: usize,
    #[arg(long, default_value_t = 4)]
    classes: usize,
    #[arg(long, default_value_t = 0.4)]
    noise: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

impl GenArgs {
    fn to_spec(&self) -> Result<ShiftSpec, Error> {
        let family = match self.family.as_str() {
            "covariate_rotation" => ShiftFamily::CovariateRotation,
            "conditional_boundary" => ShiftFamily::ConditionalBoundary,
            other => {
                return Err(Error::Configuration(format!(
                    "unknown family `{other}` (expected covariate_rotation or conditional_boundary)"
                )))
            }
        };
        Ok(ShiftSpec {
            family,
            severity: self.severity,
            n_source: self.n_source,
            n_target: self.n_target,
            noise: self.noise,
            dim: self.dim,
            classes: self.classes,
            seed: self.seed,
        })
    }

    fn generate(&self) -> Result<DomainDataset, Error> {
        let spec = self.to_spec()?;
        match spec.family {
            ShiftFamily::CovariateRotation => gen_covariate_shift(&spec),
            ShiftFamily::ConditionalBoundary => gen_conditional_shift(&spec),
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic shift benchmark and write manifest + CSVs.
    GenData {
        #[command(flatten)]
        gen: GenArgs,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration on a dataset manifest.
    Train {
        /// Dataset manifest (see gen-data).
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Output directory for report.json, curves.csv, predictions.csv.
        #[arg(long)]
        out: PathBuf,
        /// Also write a model checkpoint here.
        #[arg(long)]
        save_model: Option<PathBuf>,
    },
    /// Run the variant ladder across seeds and summarize.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds, e.g. 1,2,3.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        /// Comma-separated variants to run (default: all).
        #[arg(long)]
        variants: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify analytic gradients of the joint objective for all variants.
    Gradcheck {
        #[arg(long, default_value_t = 1234)]
        seed: u64,
    },
    /// Render a stored report.json as a plain-text/markdown summary.
    Report {
        /// Path to report.json.
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Train the full variant and report head-response statistics.
    DiagLayers {
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare per-domain classifier weights on frozen features at two
    /// shift severities.
    DiagShift {
        /// High-severity rule rotation in radians.
        #[arg(long, default_value_t = 0.6)]
        severity_high: f64,
        /// Comma-separated seeds.
        #[arg(long, default_value = "1,2,3")]
        seeds: String,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn parse_seed_list(s: &str) -> Result<Vec<u64>, Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .map_err(|_| Error::Configuration(format!("invalid seed `{v}`")))
        })
        .collect()
}

fn parse_variant_list(s: Option<&str>) -> Result<Vec<Variant>, Error> {
    match s {
        None => Ok(Variant::ALL.to_vec()),
        Some(s) => s.split(',').map(|v| v.trim().parse()).collect(),
    }
}

fn ensure_dir(dir: &Path) -> Result<(), Error> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Io(_) | Error::Parse { .. } | Error::Json(_) => 3,
        Error::Numerical { .. } => 2,
        _ => 1,
    }
}

fn run(cli: Cli) -> Result<u8, Error> {
    match cli.command {
        Command::GenData { gen, out } => {
            let ds = gen.generate()?;
            ensure_dir(&out)?;
            let manifest = export_csv(&ds, &out)?;
            let path = out.join("manifest.json");
            write_manifest(&manifest, &path)?;
            println!(
                "wrote {} ({} source, {} target, {} classes, dim {})",
                path.display(),
                ds.n_source(),
                ds.n_target(),
                ds.classes(),
                ds.dim()
            );
            Ok(0)
        }
        Command::Train {
            data,
            config,
            out,
            save_model,
        } => {
            let cfg = config.resolve()?;
            let ds = load_manifest(&data)?;
            let (net, report) = train(&ds, &cfg)?;
            ensure_dir(&out)?;
            write_report_json(&report, &out.join("report.json"))?;
            write_curves_csv(&report, &out.join("curves.csv"))?;
            write_predictions_csv(&net, &ds, &out.join("predictions.csv"))?;
            if let Some(model_path) = save_model {
                checkpoint::save(&net, &model_path)?;
            }
            if report.bandwidth_fallbacks > 0 {
                eprintln!(
                    "warning: degenerate median bandwidth fell back to 1.0 in {} steps",
                    report.bandwidth_fallbacks
                );
            }
            println!(
                "variant {} seed {}: source acc {:.4}, target acc {:.4} ({:.1}s)",
                cfg.variant,
                cfg.seed,
                report.final_source_accuracy,
                report.final_target_accuracy,
                report.wall_clock_secs
            );
            Ok(0)
        }
        Command::Ablate {
            data,
            config,
            seeds,
            variants,
            out,
        } => {
            let cfg = config.resolve()?;
            let ds = load_manifest(&data)?;
            let seeds = parse_seed_list(&seeds)?;
            let variants = parse_variant_list(variants.as_deref())?;
            let table = ablate(&ds, &cfg, &seeds, &variants)?;
            ensure_dir(&out)?;
            write_ablation_csv(&table, &out.join("ablation.csv"))?;
            print!("{}", render_ablation(&table));
            Ok(0)
        }
        Command::Gradcheck { seed } => {
            let report = run_gradcheck(&GradcheckConfig {
                seed,
                corruption: None,
            })?;
            for e in &report.entries {
                println!(
                    "{:<12} {:<14} max rel err {:.3e}",
                    e.variant, e.parameter, e.max_rel_err
                );
            }
            if report.passed {
                println!(
                    "gradcheck passed: max rel err {:.3e} <= {:.0e}",
                    report.max_rel_err, report.tolerance
                );
                Ok(0)
            } else {
                println!(
                    "gradcheck FAILED: max rel err {:.3e} > {:.0e}",
                    report.max_rel_err, report.tolerance
                );
                Ok(2)
            }
        }
        Command::Report { input } => {
            let report = load_report_json(&input)?;
            print!("{}", render_report(&report));
            Ok(0)
        }
        Command::DiagLayers { data, config, out } => {
            let mut cfg = config.resolve()?;
            cfg.variant = Variant::MmdEntRes;
            let ds = load_manifest(&data)?;
            let (net, report) = train(&ds, &cfg)?;
            let stats = layer_response_report(&net, ds.target_x())?;
            ensure_dir(&out)?;
            write_report_json(&report, &out.join("report.json"))?;
            println!("head responses on target data (|value|):");
            println!(
                "  f_T     mean {:.6} std {:.6}",
                stats.f_t_abs.mean, stats.f_t_abs.std
            );
            println!(
                "  delta_f mean {:.6} std {:.6}",
                stats.delta_f_abs.mean, stats.delta_f_abs.std
            );
            println!(
                "  f_S     mean {:.6} std {:.6}",
                stats.f_s_abs.mean, stats.f_s_abs.std
            );
            Ok(0)
        }
        Command::DiagShift {
            severity_high,
            seeds,
            config,
        } => {
            let cfg = config.resolve()?;
            let seeds = parse_seed_list(&seeds)?;
            let mut ratios = Vec::new();
            for &seed in &seeds {
                let make = |severity: f64| -> Result<DomainDataset, Error> {
                    let mut spec =
                        ShiftSpec::new(ShiftFamily::ConditionalBoundary, severity, 1000 + seed);
                    spec.classes = cfg.classes;
                    gen_conditional_shift(&spec)
                };
                let null_report = classifier_shift_report(&make(0.0)?, &cfg, seed)?;
                let high_report = classifier_shift_report(&make(severity_high)?, &cfg, seed)?;
                println!(
                    "seed {seed}: severity 0 diff {:.4} (null {:.4}), severity {severity_high} diff {:.4}",
                    null_report.frobenius_diff,
                    null_report.null_frobenius_diff,
                    high_report.frobenius_diff
                );
                ratios.push(high_report.frobenius_diff / null_report.frobenius_diff.max(1e-12));
            }
            ratios.sort_by(|a, b| a.partial_cmp(b).expect("finite ratios"));
            let median = ratios[ratios.len() / 2];
            println!("median divergence ratio (high / zero severity): {median:.2}");
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    // Usage errors exit 1; --help/--version exit 0.
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = u8::from(e.use_stderr());
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}
