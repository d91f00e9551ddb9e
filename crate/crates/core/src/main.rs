use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::info;
use serde::Serialize;

use confset::groups::{BinEdges, GroupAuditOptions, DEFAULT_MIN_GROUP_SIZE, DEFAULT_PERMUTATIONS};
use confset::io::{load_model, load_scores, save_json, save_model, save_scores, LoadOptions};
use confset::metrics::{argmax_kappa, KappaResult};
use confset::selective::Partition;
use confset::shift::AlphaSweep;
use confset::synthgen::{Cohort, ShiftSpec};
use confset::{
    alpha_sweep, calibrate, coverage_audit, diff_audits, disparity_test, group_audit, group_calibrate,
    predict_batch_with, sweep, AuditReport, CalibrationModel, CoverageExperiment, DisparityTest, Error,
    FilterSweep, GroupReport, PredictOptions, PredictionSet, Result, ScoreRecord, ShiftDiff, SynthConfig,
    TOOL_VERSION,
};

/// Conformal prediction sets and audits for multiclass classifier scores.
#[derive(Parser)]
#[command(name = "confset", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Calibrate a conformal threshold on labelled scores.
    Calibrate(CalibrateArgs),
    /// Build prediction sets.
    Predict(PredictArgs),
    /// Coverage, set-size histograms and weighted kappa on labelled scores.
    Audit(AuditArgs),
    /// Defer large prediction sets and sweep the retained quality.
    Filter(FilterArgs),
    /// Per-group calibration and set-size disparity tests.
    Groups(GroupsArgs),
    /// Compare two evaluation sets calibrated on the same data.
    Shift(ShiftArgs),
    /// Monte-Carlo coverage experiment on synthetic scores.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct Common {
    /// Miscoverage level.
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Rescale score rows that do not sum to one instead of rejecting them.
    #[arg(long)]
    renormalize: bool,
    /// JSON output path.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ModelSource {
    /// Calibration model JSON.
    #[arg(long, conflicts_with = "cal")]
    model: Option<PathBuf>,
    /// Labelled calibration scores; calibrates on the fly.
    #[arg(long)]
    cal: Option<PathBuf>,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    source: ModelSource,
    #[command(flatten)]
    common: Common,
    /// Add the argmax class to otherwise empty sets.
    #[arg(long)]
    force_nonempty: bool,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    source: ModelSource,
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    force_nonempty: bool,
    /// Tidy set-size histogram CSV (set_size,count,true_class).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    scores: PathBuf,
    #[command(flatten)]
    source: ModelSource,
    #[command(flatten)]
    common: Common,
    /// Also report which ids are kept at this threshold.
    #[arg(long)]
    max_set_size: Option<usize>,
    /// Sweep table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct GroupsArgs {
    /// Labelled calibration scores.
    #[arg(long)]
    cal: PathBuf,
    /// Labelled test scores.
    #[arg(long)]
    scores: PathBuf,
    /// Group attribute, with or without the `group_` prefix.
    #[arg(long)]
    group_col: String,
    /// Bin a numeric group attribute at these comma-separated edges.
    #[arg(long, value_delimiter = ',')]
    bin_edges: Option<Vec<f64>>,
    #[arg(long, default_value_t = DEFAULT_MIN_GROUP_SIZE)]
    min_group_size: usize,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force_nonempty: bool,
    #[command(flatten)]
    common: Common,
    /// Tidy per-example set sizes CSV (group,set_size).
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ShiftArgs {
    /// Labelled calibration scores.
    #[arg(long)]
    cal: PathBuf,
    /// Two labelled evaluation sets: reference first, then the shifted one.
    #[arg(long, num_args = 1, required = true)]
    scores: Vec<PathBuf>,
    /// Alphas for the coverage / set-size sweep.
    #[arg(long, value_delimiter = ',', default_value = "0.05,0.1,0.15")]
    alphas: Vec<f64>,
    #[arg(long, default_value_t = DEFAULT_PERMUTATIONS)]
    permutations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    force_nonempty: bool,
    #[command(flatten)]
    common: Common,
    /// Sweep table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Calibration set size per trial.
    #[arg(long, default_value_t = 99)]
    m: usize,
    #[arg(long, default_value_t = 1000)]
    n_test: usize,
    #[arg(long, default_value_t = 1000)]
    trials: usize,
    /// Dirichlet concentration added on the true class.
    #[arg(long, default_value_t = 4.0)]
    sharpness: f64,
    /// Flatten the test score distribution by this temperature.
    #[arg(long)]
    temperature: Option<f64>,
    /// Cohorts as `name:sharpness` pairs, e.g. `a:8,b:2`.
    #[arg(long, value_delimiter = ',')]
    cohorts: Vec<String>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Write trial 0 as cal.csv and test.csv into this directory.
    #[arg(long)]
    data_dir: Option<PathBuf>,
    #[command(flatten)]
    common: Common,
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    tool_version: &'static str,
    command: &'a str,
    #[serde(flatten)]
    body: T,
}

fn write_out<T: Serialize>(path: &Option<PathBuf>, command: &str, body: T) -> Result<()> {
    if let Some(path) = path {
        save_json(
            path,
            &Envelope {
                tool_version: TOOL_VERSION,
                command,
                body,
            },
        )?;
        info!("wrote {}", path.display());
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
}

fn load(path: &Path, renormalize: bool, require_labels: bool) -> Result<Vec<ScoreRecord>> {
    let records = load_scores(
        path,
        LoadOptions {
            renormalize,
            require_labels,
        },
    )?;
    info!("loaded {} records from {}", records.len(), path.display());
    Ok(records)
}

fn resolve_model(source: &ModelSource, common: &Common) -> Result<CalibrationModel> {
    match (&source.model, &source.cal) {
        (Some(path), _) => load_model(path),
        (None, Some(cal)) => calibrate(&load(cal, common.renormalize, true)?, common.alpha),
        (None, None) => Err(Error::InvalidConfig("either --model or --cal is required".into())),
    }
}

fn describe(model: &CalibrationModel) -> String {
    if model.full_set_mode {
        format!(
            "alpha={} m={} k={} > m: full-set mode (every class predicted)",
            model.alpha, model.m, model.k
        )
    } else {
        format!(
            "alpha={} m={} k={} q_hat={} threshold={}",
            model.alpha,
            model.m,
            model.k,
            model.q_hat,
            1.0 - model.q_hat
        )
    }
}

fn print_audit(report: &AuditReport) {
    println!(
        "n={} coverage={:.4} (target {:.4}) violation={:.4} avg_set_size={:.4} empty={}",
        report.n,
        report.coverage,
        1.0 - report.alpha_used,
        report.violation,
        report.avg_set_size,
        report.empty_set_count
    );
    let hist: Vec<String> = report
        .set_size_hist
        .iter()
        .enumerate()
        .map(|(s, c)| format!("{s}:{c}"))
        .collect();
    println!("set sizes {}", hist.join(" "));
}

fn run_calibrate(args: CalibrateArgs) -> Result<()> {
    let records = load(&args.scores, args.common.renormalize, true)?;
    let model = calibrate(&records, args.common.alpha)?;
    println!("{}", describe(&model));
    if let Some(out) = &args.common.out {
        save_model(out, &model)?;
    }
    Ok(())
}

fn run_predict(args: PredictArgs) -> Result<()> {
    let model = resolve_model(&args.source, &args.common)?;
    let records = load(&args.scores, args.common.renormalize, false)?;
    let options = PredictOptions {
        force_nonempty: args.force_nonempty,
    };
    let sets = predict_batch_with(&records, &model, options)?;
    let avg = sets.iter().map(PredictionSet::len).sum::<usize>() as f64 / sets.len().max(1) as f64;
    println!("{}", describe(&model));
    println!("{} sets, avg size {avg:.4}", sets.len());

    #[derive(Serialize)]
    struct Body<'a> {
        model: &'a CalibrationModel,
        sets: &'a [PredictionSet],
    }
    write_out(&args.common.out, "predict", Body { model: &model, sets: &sets })
}

fn run_audit(args: AuditArgs) -> Result<()> {
    let model = resolve_model(&args.source, &args.common)?;
    let records = load(&args.scores, args.common.renormalize, true)?;
    let options = PredictOptions {
        force_nonempty: args.force_nonempty,
    };
    let sets = predict_batch_with(&records, &model, options)?;
    let report = coverage_audit(&sets, &records, model.n_classes, model.alpha)?;
    let kappa = match argmax_kappa(&records, model.n_classes) {
        Ok(k) => Some(k),
        Err(Error::DegenerateAgreement) => None,
        Err(e) => return Err(e),
    };
    println!("{}", describe(&model));
    print_audit(&report);
    if let Some(k) = &kappa {
        println!("linear weighted kappa (argmax vs label) = {:.4}", k.kappa);
    }
    if let Some(csv) = &args.csv {
        report.write_per_class_csv(create(csv)?)?;
    }

    #[derive(Serialize)]
    struct Body<'a> {
        model: &'a CalibrationModel,
        #[serde(flatten)]
        report: &'a AuditReport,
        kappa: Option<KappaResult>,
    }
    write_out(
        &args.common.out,
        "audit",
        Body {
            model: &model,
            report: &report,
            kappa,
        },
    )
}

fn run_filter(args: FilterArgs) -> Result<()> {
    let model = resolve_model(&args.source, &args.common)?;
    let records = load(&args.scores, args.common.renormalize, true)?;
    let sets = predict_batch_with(&records, &model, PredictOptions::default())?;
    let table = sweep(&sets, &records, model.n_classes, model.alpha)?;
    println!("{}", describe(&model));
    print!("{}", table.to_table());
    if let Some(csv) = &args.csv {
        table.write_csv(create(csv)?)?;
    }

    #[derive(Serialize)]
    struct Selection {
        max_set_size: usize,
        retained_ids: Vec<String>,
        deferred_ids: Vec<String>,
    }
    let selection = match args.max_set_size {
        None => None,
        Some(max) => {
            let part: Partition = confset::filter_by_set_size(&sets, max)?;
            let own = |v: Vec<&str>| v.into_iter().map(String::from).collect();
            println!(
                "max_set_size={max}: retained {} deferred {}",
                part.retained.len(),
                part.deferred.len()
            );
            Some(Selection {
                max_set_size: max,
                retained_ids: own(part.retained_ids(&sets)),
                deferred_ids: own(part.deferred_ids(&sets)),
            })
        }
    };

    #[derive(Serialize)]
    struct Body<'a> {
        model: &'a CalibrationModel,
        sweep: &'a FilterSweep,
        selection: Option<Selection>,
    }
    write_out(
        &args.common.out,
        "filter",
        Body {
            model: &model,
            sweep: &table,
            selection,
        },
    )
}

fn run_groups(args: GroupsArgs) -> Result<()> {
    let attribute = args
        .group_col
        .strip_prefix(confset::io::GROUP_PREFIX)
        .unwrap_or(&args.group_col)
        .to_string();
    let mut cal = load(&args.cal, args.common.renormalize, true)?;
    let mut test = load(&args.scores, args.common.renormalize, true)?;
    if let Some(edges) = args.bin_edges {
        let edges = BinEdges::new(edges)?;
        edges.apply(&mut cal, &attribute)?;
        edges.apply(&mut test, &attribute)?;
    }
    let models = group_calibrate(&cal, args.common.alpha, &attribute, args.min_group_size)?;
    let options = GroupAuditOptions {
        n_permutations: args.permutations,
        seed: args.seed,
        predict: PredictOptions {
            force_nonempty: args.force_nonempty,
        },
    };
    let report: GroupReport = group_audit(&test, &models, args.common.alpha, &attribute, options)?;

    println!(
        "{:>16} {:>6} {:>8} {:>9} {:>9} {:>8}",
        "group", "m", "q_hat", "n_test", "coverage", "avg_size"
    );
    for (group, entry) in &report.per_group {
        let q = if entry.model.full_set_mode {
            "full".to_string()
        } else {
            format!("{:.4}", entry.model.q_hat)
        };
        println!(
            "{:>16} {:>6} {:>8} {:>9} {:>9.4} {:>8.4}",
            group, entry.model.m, q, entry.audit.n, entry.audit.coverage, entry.audit.avg_set_size
        );
    }
    for t in &report.tests {
        println!(
            "{} vs {}: mean diff {:+.4}, p = {:.5} ({} permutations)",
            t.group_a, t.group_b, t.test.mean_diff, t.test.p_value, t.test.n_permutations
        );
    }
    if let Some(csv) = &args.csv {
        report.write_samples_csv(create(csv)?)?;
    }
    write_out(&args.common.out, "groups", &report)
}

fn run_shift(args: ShiftArgs) -> Result<()> {
    if args.scores.len() != 2 {
        return Err(Error::InvalidConfig(format!(
            "shift needs exactly two --scores files, got {}",
            args.scores.len()
        )));
    }
    let cal = load(&args.cal, args.common.renormalize, true)?;
    let named = args
        .scores
        .iter()
        .map(|p| {
            let name = p
                .file_stem()
                .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
            Ok((name, load(p, args.common.renormalize, true)?))
        })
        .collect::<Result<Vec<_>>>()?;
    let options = PredictOptions {
        force_nonempty: args.force_nonempty,
    };

    let model = calibrate(&cal, args.common.alpha)?;
    let mut reports = Vec::new();
    let mut sizes = Vec::new();
    for (_, records) in &named {
        let sets = predict_batch_with(records, &model, options)?;
        sizes.push(sets.iter().map(|s| s.len() as f64).collect::<Vec<_>>());
        reports.push(coverage_audit(&sets, records, model.n_classes, model.alpha)?);
    }
    let diff = diff_audits(&reports[0], &reports[1])?;
    let size_test = disparity_test(&sizes[0], &sizes[1], args.permutations, args.seed)?;
    let table = alpha_sweep(&cal, &named, &args.alphas, options)?;

    println!("{}", describe(&model));
    for ((name, _), report) in named.iter().zip(&reports) {
        print!("{name}: ");
        print_audit(report);
    }
    println!(
        "delta ({} - {}): coverage {:+.4} violation {:+.4} avg_set_size {:+.4} full_set_rate {:+.4}",
        named[1].0,
        named[0].0,
        diff.coverage_delta,
        diff.violation_delta,
        diff.avg_set_size_delta,
        diff.full_set_rate_delta
    );
    println!(
        "set-size permutation test: p = {:.5} ({} permutations)",
        size_test.p_value, size_test.n_permutations
    );
    println!("{:>16} {:>6} {:>9} {:>9}", "test_set", "alpha", "coverage", "avg_size");
    for r in &table.rows {
        println!(
            "{:>16} {:>6} {:>9.4} {:>9.4}",
            r.test_set, r.alpha, r.coverage, r.avg_set_size
        );
    }
    if let Some(csv) = &args.csv {
        table.write_csv(create(csv)?)?;
    }

    #[derive(Serialize)]
    struct Body<'a> {
        model: &'a CalibrationModel,
        test_sets: Vec<&'a str>,
        diff: ShiftDiff,
        set_size_test: DisparityTest,
        alpha_sweep: AlphaSweep,
    }
    write_out(
        &args.common.out,
        "shift",
        Body {
            model: &model,
            test_sets: named.iter().map(|(n, _)| n.as_str()).collect(),
            diff,
            set_size_test: size_test,
            alpha_sweep: table,
        },
    )
}

fn parse_cohorts(specs: &[String]) -> Result<Vec<Cohort>> {
    specs
        .iter()
        .map(|s| {
            let (name, sharp) = s
                .split_once(':')
                .ok_or_else(|| Error::InvalidConfig(format!("cohort `{s}` is not name:sharpness")))?;
            let sharpness = sharp
                .parse()
                .map_err(|_| Error::InvalidConfig(format!("cohort `{s}` has a bad sharpness")))?;
            Ok(Cohort {
                name: name.to_string(),
                sharpness,
            })
        })
        .collect()
}

fn run_simulate(args: SimulateArgs) -> Result<()> {
    let mut config = SynthConfig::new(args.classes);
    config.sharpness = args.sharpness;
    config.m_cal = args.m;
    config.n_test = args.n_test;
    config.n_trials = args.trials;
    config.seed = args.seed;
    config.shift = args.temperature.map(|temperature| ShiftSpec {
        temperature,
        prior_shift: None,
    });
    config.cohorts = parse_cohorts(&args.cohorts)?;

    if let Some(dir) = &args.data_dir {
        std::fs::create_dir_all(dir).map_err(|source| Error::Io {
            path: dir.clone(),
            source,
        })?;
        let (cal, test) = confset::generate(&config)?;
        save_scores(dir.join("cal.csv"), &cal)?;
        save_scores(dir.join("test.csv"), &test)?;
        println!("wrote {} and {}", dir.join("cal.csv").display(), dir.join("test.csv").display());
    }

    let experiment = confset::coverage_experiment(&config, args.common.alpha)?;
    let min = experiment.coverage_samples.iter().copied().fold(f64::INFINITY, f64::min);
    println!(
        "{} trials, m={}, k={}{}: mean coverage {:.4} ± {:.4} (expected {:.4}), min {:.4}, mean set size {:.4}",
        experiment.n_trials,
        experiment.m,
        experiment.k,
        if experiment.full_set_mode { " (full-set mode)" } else { "" },
        experiment.mean_coverage,
        experiment.mc_stderr,
        experiment.expected,
        min,
        experiment.mean_set_size
    );

    #[derive(Serialize)]
    struct Body<'a> {
        config: &'a SynthConfig,
        #[serde(flatten)]
        experiment: &'a CoverageExperiment,
    }
    write_out(
        &args.common.out,
        "simulate",
        Body {
            config: &config,
            experiment: &experiment,
        },
    )
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CONFSET_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Calibrate(a) => run_calibrate(a),
        Command::Predict(a) => run_predict(a),
        Command::Audit(a) => run_audit(a),
        Command::Filter(a) => run_filter(a),
        Command::Groups(a) => run_groups(a),
        Command::Shift(a) => run_shift(a),
        Command::Simulate(a) => run_simulate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}
