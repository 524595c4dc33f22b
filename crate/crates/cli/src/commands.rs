//! Subcommand bodies: each turns a loaded config into a CSV table and a summary.

use std::path::PathBuf;

use serde_json::json;
use stoflow_core::classify::{classify, Verdict};
use stoflow_core::flow::{simulate, BrownianDriver};
use stoflow_core::lyapunov::{conjecture_probe, ln_m_series, lyapunov_report, RateSource};
use stoflow_core::model::ValidationSpec;
use stoflow_core::modelfile::PotentialKind;
use stoflow_core::operators::{certify, rayleigh_upper_bound};
use stoflow_core::ou::{oracle_compare, OuModel};
use stoflow_core::sampling::SampleSpec;
use stoflow_core::table::{fmt_float, trajectory_table, Cell, Summary, Table};
use stoflow_core::volume::{decay_probe, supermartingale_probe, volume_series, Ensemble, QuadratureGrid};
use stoflow_core::DiffusionModel;

use crate::config::{region, ExperimentConfig, Loaded, VolumeMode};
use crate::output::{unix_time, OutputSet, OUT_DIR_ENV};
use crate::{Cli, CliError, Command};

pub struct Outcome {
    pub summary: String,
    pub files: Vec<PathBuf>,
    pub passed: bool,
    pub failure: Option<String>,
}

struct Report {
    table: Table,
    summary: Summary,
    passed: bool,
    failure: Option<String>,
}

impl Report {
    fn ok(table: Table, summary: Summary) -> Self {
        Self { table, summary, passed: true, failure: None }
    }
}

pub fn execute(cli: &Cli) -> Result<Outcome, CliError> {
    let path = cli.common.config.as_ref().ok_or_else(|| CliError::Config("--config PATH is required".into()))?;
    let mut loaded = ExperimentConfig::load(path)?;
    if let Some(seed) = cli.common.seed {
        loaded.config.seed = seed;
    }
    let mut name = cli.command.name().to_string();
    if let Command::Classify { flow } = &cli.command {
        if let Some(f) = flow {
            loaded.config.classify.flow = (*f).into();
        }
        name = format!("classify-{}", loaded.config.classify.flow);
    }
    let model = loaded.model_file.build().map_err(|e| CliError::Config(format!("{}: {e}", loaded.model_path.display())))?;
    let hash = loaded.hash12();
    let seed = loaded.config.seed;
    let dir = cli
        .common
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_DIR_ENV).filter(|v| !v.is_empty()).map(PathBuf::from))
        .or_else(|| loaded.config.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("stoflow-out"));

    let report = match &cli.command {
        Command::Validate => validate(&loaded, &model)?,
        Command::Certify => run_certify(&loaded, &model)?,
        Command::Simulate => run_simulate(&loaded, &model)?,
        Command::Volume => run_volume(&loaded, &model)?,
        Command::Lyapunov => run_lyapunov(&loaded, &model)?,
        Command::Classify { .. } => run_classify(&loaded, &model)?,
        Command::OracleCompare => run_oracle(&loaded, &model)?,
    };

    let mut summary = Summary::new();
    summary.text("subcommand", cli.command.name()).text("config_hash", &hash).text("seed", seed);
    summary.text("derivative_mode", model.derivative_mode());
    for (k, v) in report.summary.entries() {
        summary.text(k, v);
    }
    summary.text("passed", report.passed);
    let summary_text = summary.render();

    let meta = json!({
        "subcommand": cli.command.name(),
        "config_hash": hash,
        "seed": seed,
        "threads": rayon::current_num_threads(),
        "created_unix": unix_time(),
        "version": env!("CARGO_PKG_VERSION"),
        "model_path": loaded.model_path.display().to_string(),
        "config": serde_json::to_value(&loaded.config).expect("config serializes"),
        "model": serde_json::to_value(&loaded.model_file).expect("model serializes"),
    });
    let outputs = OutputSet::new(dir, &name, &hash, seed);
    let files = outputs.write(&report.table.to_csv(), &summary_text, &meta)?;
    Ok(Outcome { summary: summary_text, files, passed: report.passed, failure: report.failure })
}

fn validate(loaded: &Loaded, model: &DiffusionModel) -> Result<Report, CliError> {
    let sec = &loaded.config.validate;
    let spec = ValidationSpec { sample_count: sec.sample_count, domain_radius: sec.domain_radius, seed: loaded.config.seed };
    let report = model.validate(&spec);
    let mut table = Table::new(&["check", "passed", "key", "value"]);
    let mut summary = Summary::new();
    for c in &report.checks {
        summary.text(&format!("check.{}", c.name), if c.passed { "pass" } else { "fail" });
        for (k, v) in &c.evidence {
            table.push(vec![c.name.as_str().into(), c.passed.to_string().into(), k.as_str().into(), (*v).into()]);
        }
        if !c.note.is_empty() {
            summary.text(&format!("note.{}", c.name), &c.note);
        }
    }
    let failed: Vec<&str> = report.checks.iter().filter(|c| !c.passed).map(|c| c.name.as_str()).collect();
    Ok(Report {
        table,
        summary,
        passed: failed.is_empty(),
        failure: (!failed.is_empty()).then(|| format!("checks failed: {}", failed.join(", "))),
    })
}

fn run_certify(loaded: &Loaded, model: &DiffusionModel) -> Result<Report, CliError> {
    let sec = &loaded.config.certify;
    let u = sec.u.build(model)?;
    let spec = SampleSpec { inner_radius: sec.inner_radius, ..SampleSpec::ball(sec.count, sec.radius, loaded.config.seed) };
    let cert = certify(model, &*u, sec.kind, &spec);
    let rayleigh = rayleigh_upper_bound(model, &*u, &spec)?;

    let mut header: Vec<String> = ["kind", "u", "sample_count", "worst_margin", "rounding_allowance", "passed", "rayleigh_upper_bound"]
        .map(String::from)
        .to_vec();
    header.extend((1..=model.dim()).map(|k| format!("worst_x{k}")));
    let mut table = Table::new(&header);
    let mut row: Vec<Cell> = vec![
        cert.kind.to_string().into(),
        sec.u.to_string().into(),
        cert.sample_count.into(),
        cert.worst_margin.into(),
        cert.rounding_allowance.into(),
        cert.passed.to_string().into(),
        rayleigh.into(),
    ];
    row.extend(cert.worst_point.iter().map(|&x| Cell::Float(x)));
    table.push(row);

    let mut summary = Summary::new();
    summary
        .text("kind", cert.kind)
        .text("u", &sec.u)
        .text("sample_count", cert.sample_count)
        .float("inner_radius", cert.inner_radius)
        .float("radius", cert.radius)
        .float("worst_margin", cert.worst_margin)
        .text("worst_point", cert.worst_point.iter().map(|&x| fmt_float(x)).collect::<Vec<_>>().join(" "))
        .float("rounding_allowance", cert.rounding_allowance)
        .text("certificate_passed", cert.passed)
        .float("rayleigh_upper_bound", rayleigh)
        .float("minus_half_lambda_c", -0.5 * model.lambda_c());
    for (i, c) in cert.caveats.iter().enumerate() {
        summary.text(&format!("caveat.{}", i + 1), c);
    }
    Ok(Report {
        table,
        summary,
        passed: cert.passed,
        failure: (!cert.passed).then(|| format!("{} certificate violated by {:e}", cert.kind, cert.worst_margin)),
    })
}

fn run_simulate(loaded: &Loaded, model: &DiffusionModel) -> Result<Report, CliError> {
    let sec = &loaded.config.simulate;
    let points = if sec.points.is_empty() { vec![vec![0.0; model.dim()]] } else { sec.points.clone() };
    let u = sec.u.as_ref().map(|f| f.build(model)).transpose()?;
    let driver = BrownianDriver::new(loaded.config.seed, model.dim(), sec.integrator.dt)?;
    let record = simulate(model, &points, &sec.integrator, &driver, u.as_deref(), sec.flow)?;
    let mut summary = Summary::new();
    summary
        .text("flow", sec.flow)
        .float("dt", sec.integrator.dt)
        .float("horizon", sec.integrator.horizon)
        .text("points", points.len())
        .text("frames", record.len());
    if let Some(f) = &sec.u {
        summary.text("u", f);
    }
    Ok(Report::ok(trajectory_table(&record), summary))
}

fn grid_for(boxes: &[stoflow_core::volume::AaBox], rule: stoflow_core::volume::GridRule, dim: usize) -> Result<(QuadratureGrid, f64), CliError> {
    let region = region(boxes, dim)?;
    if region.dim() != dim {
        return Err(CliError::Config(format!("region has dimension {} but the model has {dim}", region.dim())));
    }
    Ok((QuadratureGrid::new(&region, rule)?, region.measure()))
}

fn run_volume(loaded: &Loaded, model: &DiffusionModel) -> Result<Report, CliError> {
    let sec = &loaded.config.volume;
    let seed = loaded.config.seed;
    let u = sec.u.build(model)?;
    let (grid, measure) = grid_for(&sec.region, sec.grid, model.dim())?;
    let mut summary = Summary::new();
    summary
        .text("mode", serde_json::to_value(sec.mode).expect("mode serializes").as_str().unwrap_or_default())
        .text("u", &sec.u)
        .text("flow", sec.flow)
        .float("region_measure", measure)
        .text("nodes", grid.len());
    let series_table = |times: &[f64], ln_values: &[f64]| {
        let mut t = Table::new(&["t", "V", "ln_V"]);
        for (time, lv) in times.iter().zip(ln_values) {
            t.push(vec![(*time).into(), lv.exp().into(), (*lv).into()]);
        }
        t
    };
    match sec.mode {
        VolumeMode::Series => {
            let driver = BrownianDriver::new(seed, model.dim(), sec.integrator.dt)?;
            let series = volume_series(model, &*u, &grid, &sec.integrator, &driver, sec.flow)?;
            summary.float("ln_v_initial", series.ln_values[0]).float("ln_v_final", series.ln_values[series.len() - 1]);
            Ok(Report::ok(series_table(&series.times, &series.ln_values), summary))
        }
        VolumeMode::Decay => {
            let r = decay_probe(model, &*u, &grid, &sec.integrator, seed, sec.epsilon, sec.flow)?;
            summary.float("epsilon", r.epsilon).float("ln_ratio", r.ln_ratio).text("decayed", r.passed);
            let failure = (!r.passed).then(|| format!("V_T/V_0 = {:e} exceeds {:e}", r.ln_ratio.exp(), r.epsilon));
            Ok(Report { table: series_table(&r.series.times, &r.series.ln_values), summary, passed: r.passed, failure })
        }
        VolumeMode::Supermartingale => {
            let ensemble = Ensemble { paths: sec.paths, base_seed: seed };
            let r = supermartingale_probe(model, &*u, &grid, &ensemble, &sec.integrator, sec.flow)?;
            let mut table = Table::new(&["t", "mean", "se", "n"]);
            for i in 0..r.times.len() {
                table.push(vec![r.times[i].into(), r.mean[i].into(), r.std_error[i].into(), (r.paths - r.blown_up).into()]);
            }
            summary
                .text("paths", r.paths)
                .text("blown_up", r.blown_up)
                .float("slack", r.slack)
                .float("worst_violation", r.worst_violation)
                .float("constancy_violation", r.constancy_violation());
            for (i, n) in r.notes.iter().enumerate() {
                summary.text(&format!("note.{}", i + 1), n);
            }
            let failure = (!r.passed).then(|| format!("mean volume rose by {:e} beyond {} standard errors", r.worst_violation, r.slack));
            Ok(Report { table, summary, passed: r.passed, failure })
        }
    }
}

fn run_lyapunov(loaded: &Loaded, model: &DiffusionModel) -> Result<Report, CliError> {
    let sec = &loaded.config.lyapunov;
    let seed = loaded.config.seed;
    let u = sec.u.build(model)?;
    let (grid, measure) = grid_for(&sec.region, sec.grid, model.dim())?;
    let r = lyapunov_report(model, &*u, &grid, measure, &sec.integrator, seed, sec.window_fraction, &sec.integral)?;

    let n = r.record.len();
    let formula: Vec<Vec<f64>> = (0..n).map(|i| ln_m_series(&r.record, &*u, i, RateSource::ExponentialFormula)).collect::<Result<_, _>>()?;
    let direct: Vec<Vec<f64>> = (0..n).map(|i| ln_m_series(&r.record, &*u, i, RateSource::Direct)).collect::<Result<_, _>>()?;
    let mean_at = |rows: &[Vec<f64>], k: usize| rows.iter().map(|s| s[k]).sum::<f64>() / n as f64;
    let mut table = Table::new(&["t", "ln_v", "mean_ln_m", "mean_ln_m_direct", "mean_clock"]);
    for (k, frame) in r.record.frames.iter().enumerate() {
        let clock = frame.acc_energy.iter().sum::<f64>() / n as f64;
        let ln_v = r.volume.ln_values.get(k).copied().unwrap_or(f64::NAN);
        table.push(vec![frame.t.into(), ln_v.into(), mean_at(&formula, k).into(), mean_at(&direct, k).into(), clock.into()]);
    }

    let b = &r.bounds;
    let mut summary = Summary::new();
    summary
        .text("u", &sec.u)
        .float("dt", sec.integrator.dt)
        .float("horizon", sec.integrator.horizon)
        .float("window_start", r.window.0)
        .float("window_end", r.window.1)
        .text("points", n)
        .float("per_point_rate", r.mean_point_rate())
        .float("per_point_rate_direct", r.per_point_rates_direct.iter().sum::<f64>() / n as f64)
        .float("per_point_rate_min", r.per_point_rates.iter().copied().fold(f64::INFINITY, f64::min))
        .float("per_point_rate_max", r.per_point_rates.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .float("volume_rate", r.volume_rate)
        .float("clock_rate", r.clock_rate)
        .float("energy_integral", b.energy_integral.value)
        .float("potential_integral", b.potential_integral.value)
        .float("region_measure", b.region_measure)
        .float("lower_bound", b.lower_bound)
        .float("lower_bound_se", b.lower_bound_se)
        .float("lower_bound_unit_measure", b.lower_bound_unit)
        .float("upper_bound", b.upper_bound);
    if sec.conjecture {
        let c = conjecture_probe(model, &grid, measure, &sec.integrator, seed, sec.window_fraction, &sec.integral)?;
        summary
            .float("conjecture_lhs", c.lhs)
            .float("conjecture_rhs", c.rhs)
            .float("conjecture_rhs_se", c.rhs_se)
            .text("conjecture_note", "reported only; the equality is an open question");
    }
    Ok(Report::ok(table, summary))
}

fn run_classify(loaded: &Loaded, model: &DiffusionModel) -> Result<Report, CliError> {
    let sec = &loaded.config.classify;
    let c = classify(model, sec.flow, &sec.schedule)?;
    let e = &c.evidence;
    let mut table = Table::new(&["r", "ln_recurrence_integral", "ln_transience_integral"]);
    for (k, r) in e.r_values.iter().enumerate() {
        let j = e.ln_transience_integral.get(k).copied().unwrap_or(f64::NAN);
        table.push(vec![(*r).into(), e.ln_recurrence_integral[k].into(), j.into()]);
    }
    let mut summary = Summary::new();
    summary.text("flow", c.flow).text("verdict", c.verdict).float("recurrence_slope", e.recurrence_slope);
    summary.float("threshold_radius", e.threshold_radius.unwrap_or(f64::NAN));
    summary.float("converged_weight_fraction", e.converged_weight_fraction.unwrap_or(f64::NAN));
    let passed = c.verdict != Verdict::Inconclusive;
    Ok(Report { table, summary, passed, failure: (!passed).then(|| "neither integral test fired".into()) })
}

fn run_oracle(loaded: &Loaded, model: &DiffusionModel) -> Result<Report, CliError> {
    let sec = &loaded.config.oracle_compare;
    let mf = &loaded.model_file;
    let identity = (0..mf.dim).all(|i| (0..mf.dim).all(|j| mf.sigma[i * mf.dim + j] == if i == j { 1.0 } else { 0.0 }));
    if mf.potential != PotentialKind::Ou || !identity {
        return Err(CliError::Config("oracle-compare needs the Ornstein-Uhlenbeck model (potential = \"ou\", sigma = identity)".into()));
    }
    let ou = OuModel::new(model.dim())?;
    let points = if sec.points.is_empty() {
        let mut e1 = vec![0.0; model.dim()];
        e1[0] = 1.0;
        vec![e1]
    } else {
        sec.points.clone()
    };
    let cmp = oracle_compare(&ou, &sec.dts, sec.horizon, &points, loaded.config.seed, sec.paths)?;
    let mut table = Table::new(&["dt", "max_strong_error", "logdet_error"]);
    for row in &cmp.rows {
        table.push(vec![row.dt.into(), row.max_strong_error.into(), row.logdet_error.into()]);
    }
    let mut summary = Summary::new();
    summary.text("psi", "pi^(d/4) exp(|x|^2 / 2)");
    summary.float("horizon", sec.horizon).text("paths", sec.paths).text("points", points.len()).float("observed_order", cmp.observed_order);
    Ok(Report::ok(table, summary))
}
