use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use smlmc::data::bench::{bench, random_kernel};
use smlmc::data::synth::{default_spec, SimulateConfig};
use smlmc::data::{load_dataset, load_model, load_population, save_dataset, save_model, synth_generate, ModelFile};
use smlmc::error::{Error, Result};
use smlmc::online::baselines::{independent_kernel, naive_one_lag};
use smlmc::online::{metrics, paired_t_test, run_online, OnlineConfig, PredictionRecord};
use smlmc::population::{build_population_model, PopulationConfig, PopulationModel};
use smlmc::trainer::{fit_patient, GradientRoute, TrainConfig};

#[derive(Parser)]
#[command(name = "smlmc", version, about = "Sparse spectral-mixture coregionalization GPs for irregular clinical time series")]
struct Cli {
    /// Log filter, e.g. `info` or `smlmc=debug`.
    #[arg(long, global = true, default_value = "warn")]
    log: String,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct Common {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// TOML file with `[train]`, `[population]`, `[online]` and `[simulate]` tables.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort CSV.
    Simulate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        patients: Option<usize>,
        #[arg(long)]
        dense: Option<usize>,
        #[arg(long)]
        sparse: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
    },
    /// Fit one kernel per patient; writes one model file per patient into `--out`.
    Fit {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Only fit this patient.
        #[arg(long)]
        patient: Option<String>,
        #[arg(long)]
        eta: Option<f64>,
        /// Fit without the shrinkage prior.
        #[arg(long)]
        no_sparse: bool,
        #[arg(long)]
        q: Option<usize>,
        #[arg(long)]
        r: Option<usize>,
    },
    /// Build a population model from a directory of patient model files.
    Cluster {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        q_max: Option<usize>,
        #[arg(long)]
        r: Option<usize>,
        /// Only use patient models fit with this eta.
        #[arg(long)]
        eta: Option<f64>,
    },
    /// Online one-step-ahead imputation; writes `records.csv` and `summary.csv` into `--out`.
    Impute {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        window_hours: Option<f64>,
        #[arg(long)]
        momentum: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[arg(long, value_enum, default_value_t = Baseline::All)]
        baseline: Baseline,
    },
    /// Time Gram assembly, inversion and gradients per iteration.
    Bench {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_values_t = vec![500, 1000, 2000])]
        sizes: Vec<usize>,
        #[arg(long, default_value_t = 5)]
        q: usize,
        #[arg(long, default_value_t = 24)]
        d: usize,
        #[arg(long, default_value_t = 8)]
        r: usize,
        #[arg(long, value_delimiter = ',', default_values_t = vec![1, 8])]
        workers: Vec<usize>,
        #[arg(long, value_enum, default_value_t = Route::PerParameter)]
        route: Route,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Baseline {
    None,
    Naive,
    Independent,
    All,
}

#[derive(Clone, Copy, ValueEnum)]
enum Route {
    PerParameter,
    Contracted,
}

#[derive(Default, Deserialize)]
#[serde(default)]
struct AppConfig {
    train: TrainConfig,
    population: PopulationConfig,
    online: OnlineConfig,
    simulate: SimulateConfig,
}

fn load_config(path: Option<&Path>) -> Result<AppConfig> {
    match path {
        None => Ok(AppConfig::default()),
        Some(p) => toml::from_str(&fs::read_to_string(p)?).map_err(|e| Error::Parse {
            line: e.span().map_or(0, |s| s.start),
            message: format!("{}: {}", p.display(), e.message()),
        }),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::new().parse_filters(&cli.log).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.class());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Simulate { common, patients, dense, sparse, horizon } => {
            let cfg = load_config(common.config.as_deref())?.simulate;
            let mut spec = default_spec(
                dense.unwrap_or(cfg.n_dense),
                sparse.unwrap_or(cfg.n_sparse),
                patients.unwrap_or(cfg.n_patients),
                horizon.unwrap_or(cfg.horizon_hours),
                common.seed,
            )?;
            spec.jitter = cfg.jitter;
            let cohort = synth_generate(&spec)?;
            save_dataset(&common.out, &cohort)?;
            println!("wrote {} patients to {}", cohort.len(), common.out.display());
        }
        Command::Fit { common, data, patient, eta, no_sparse, q, r } => {
            let mut cfg = load_config(common.config.as_deref())?.train;
            if let Some(eta) = eta {
                cfg.prior.eta = eta;
            }
            if no_sparse {
                cfg.sparse_prior = false;
            }
            cfg.q = q.unwrap_or(cfg.q);
            cfg.r = r.unwrap_or(cfg.r);
            let cohort = load_dataset(&data)?;
            fs::create_dir_all(&common.out)?;
            let mut n = 0;
            for (i, p) in cohort.iter().enumerate() {
                if patient.as_ref().is_some_and(|id| *id != p.patient_id) {
                    continue;
                }
                let fit = fit_patient(p, &cfg, common.seed.wrapping_add(i as u64))?;
                let path = common.out.join(format!("{}.json", p.patient_id));
                println!(
                    "{}: objective {:.4} after {} iterations{}",
                    p.patient_id,
                    fit.objective_trace.last().copied().unwrap_or(f64::NAN),
                    fit.iterations(),
                    if fit.converged { "" } else { " (not converged)" }
                );
                save_model(&path, &ModelFile::Patient { fit, config: cfg.clone() })?;
                n += 1;
            }
            if n == 0 {
                return Err(Error::Domain("no patient matched".into()));
            }
        }
        Command::Cluster { common, models, q_max, r, eta } => {
            let mut cfg = load_config(common.config.as_deref())?.population;
            cfg.q_max = q_max.or(cfg.q_max);
            cfg.r = r.or(cfg.r);
            let mut paths: Vec<PathBuf> = fs::read_dir(&models)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "json"))
                .collect();
            paths.sort();
            let mut fits = Vec::new();
            for p in paths {
                if let ModelFile::Patient { fit, config } = load_model(&p)? {
                    if eta.is_none_or(|e| e == config.prior.eta) {
                        fits.push(fit);
                    }
                }
            }
            let model = build_population_model(&fits, &cfg, common.seed)?;
            println!("{} patients -> {} population kernels", fits.len(), model.n_clusters());
            for c in &model.clusters {
                let (period, ls) = c.basis.features();
                println!("  period {period:.2} h, length scale {ls:.2} h, coverage {:.2}", c.coverage);
            }
            save_model(&common.out, &ModelFile::Population(model))?;
        }
        Command::Impute { common, model, data, window_hours, momentum, learning_rate, baseline } => {
            let mut cfg = load_config(common.config.as_deref())?.online;
            cfg.window_hours = window_hours.unwrap_or(cfg.window_hours);
            cfg.momentum = momentum.unwrap_or(cfg.momentum);
            cfg.learning_rate = learning_rate.unwrap_or(cfg.learning_rate);
            let population = load_population(&model)?;
            let cohort = load_dataset(&data)?;
            impute(&population, &cohort, &cfg, baseline, &common.out)?;
        }
        Command::Bench { common, sizes, q, d, r, workers, route } => {
            let k = random_kernel(q, d, r, common.seed)?;
            let route = match route {
                Route::PerParameter => GradientRoute::PerParameter,
                Route::Contracted => GradientRoute::Contracted,
            };
            let report = bench(&sizes, &k, &workers, route, common.seed)?;
            print!("{}", report.to_tsv());
            println!("max objective difference across workers: {:.3e}", report.max_objective_diff);
            fs::write(&common.out, serde_json::to_string_pretty(&report)?)?;
        }
    }
    Ok(())
}

fn impute(
    population: &PopulationModel,
    cohort: &[smlmc::ObservationSet],
    cfg: &OnlineConfig,
    baseline: Baseline,
    out: &Path,
) -> Result<()> {
    let mut methods: Vec<(&str, Option<PopulationModel>)> = vec![("joint", Some(population.clone()))];
    if matches!(baseline, Baseline::Independent | Baseline::All) {
        let mut ind = population.clone();
        let k = independent_kernel(&population.kernel()?)?;
        for (c, w) in ind.clusters.iter_mut().zip(k.weights) {
            c.weights = w;
        }
        methods.push(("independent", Some(ind)));
    }
    if matches!(baseline, Baseline::Naive | Baseline::All) {
        methods.push(("naive", None));
    }
    fs::create_dir_all(out)?;
    let mut records_file = std::io::BufWriter::new(fs::File::create(out.join("records.csv"))?);
    writeln!(records_file, "method,patient_id,covariate,time,mean,var,actual,covered")?;
    // per method, per patient, per covariate mean absolute error
    let mut per_patient: Vec<Vec<Vec<Option<f64>>>> = Vec::new();
    let mut all: Vec<Vec<PredictionRecord>> = Vec::new();
    for (name, model) in &methods {
        let mut patient_mae = Vec::with_capacity(cohort.len());
        let mut pooled = Vec::new();
        for p in cohort {
            let recs = match model {
                Some(m) => run_online(p, m, cfg)?,
                None => naive_one_lag(p, &population.standardization.mean)?,
            };
            for r in &recs {
                writeln!(
                    records_file,
                    "{name},{},{},{},{},{},{},{}",
                    p.patient_id, p.covariate_names[r.covariate], r.time, r.predicted_mean, r.predicted_var, r.actual, r.in_95_region
                )?;
            }
            let m = metrics(&recs);
            patient_mae.push(
                (0..population.n_covariates()).map(|d| m.iter().find(|x| x.covariate == d).map(|x| x.mae)).collect(),
            );
            pooled.extend(recs);
        }
        per_patient.push(patient_mae);
        all.push(pooled);
    }
    records_file.flush()?;

    let d = population.n_covariates();
    let mut summary = std::io::BufWriter::new(fs::File::create(out.join("summary.csv"))?);
    writeln!(summary, "method,covariate,n,mae,coverage95,t_vs_joint,p_vs_joint,significant")?;
    for (mi, (name, _)) in methods.iter().enumerate() {
        for m in metrics(&all[mi]) {
            let (mut t, mut p, mut sig) = (String::new(), String::new(), String::new());
            if mi > 0 {
                let pairs: Vec<(f64, f64)> = per_patient[0]
                    .iter()
                    .zip(&per_patient[mi])
                    .filter_map(|(a, b)| Some((a[m.covariate]?, b[m.covariate]?)))
                    .collect();
                let (a, b): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
                if let Ok(test) = paired_t_test(&a, &b, d) {
                    t = format!("{:.6}", test.t);
                    p = format!("{:.6e}", test.p);
                    sig = test.significant.to_string();
                }
            }
            writeln!(
                summary,
                "{name},{},{},{},{},{t},{p},{sig}",
                population.covariate_names[m.covariate],
                m.n,
                m.mae,
                m.coverage95.map_or(String::new(), |c| c.to_string())
            )?;
        }
    }
    summary.flush()?;
    println!("wrote {} and {}", out.join("records.csv").display(), out.join("summary.csv").display());
    Ok(())
}
