//! Command-line front end: run scenarios, compare controllers, sweep gains
//! and execute the verification suite. All outputs are plain CSV prefixed
//! with a comment block recording the tool version, the resolved
//! configuration and its hash, so every artifact is reproducible.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use attadapt::diagnostics::{metrics, RunMetrics};
use attadapt::sim::{run_scenario, Scenario, TrajectoryLog};
use attadapt::verify::{run_all, VerifyOptions};

const EXIT_CONFIG: u8 = 1;
const EXIT_UNWINDING: u8 = 2;
const EXIT_NON_FINITE: u8 = 3;
const EXIT_VERIFY_FAILED: u8 = 4;

#[derive(Parser)]
#[command(
    name = "attadapt",
    version,
    about = "Adaptive attitude-tracking simulator with online inertia identification",
    disable_help_subcommand = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one scenario and write its trajectory and metrics CSVs.
    Run(RunArgs),
    /// Execute the built-in identity and behavior checks.
    Verify(VerifyArgs),
    /// Run several scenarios and emit aligned error norms plus an RMS table.
    Compare(CompareArgs),
    /// Fan a base scenario out over a Cartesian parameter grid.
    Sweep(SweepArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario file (TOML).
    scenario: PathBuf,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override a scenario key, e.g. --set gains.gamma=50.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Metrics window as START:END seconds (default: second half of the run).
    #[arg(long, value_name = "T0:T1")]
    rms_window: Option<String>,
    /// Print progress details.
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args)]
struct VerifyArgs {
    /// Inject a deliberate defect into the mu2 closed form; the suite must
    /// catch it. Used by the self-tests.
    #[arg(long, hide = true)]
    corrupt_mu2: bool,
}

#[derive(Args)]
struct CompareArgs {
    /// Two or more scenario files.
    #[arg(num_args = 2.., required = true)]
    scenarios: Vec<PathBuf>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Override applied to every scenario.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    /// Seed override applied to every scenario.
    #[arg(long)]
    seed: Option<u64>,
    /// Worker threads for the fan-out.
    #[arg(long)]
    jobs: Option<usize>,
    /// Metrics window as START:END seconds.
    #[arg(long, value_name = "T0:T1")]
    rms_window: Option<String>,
    #[arg(short, long)]
    verbose: bool,
}

#[derive(Args)]
struct SweepArgs {
    /// Base scenario file.
    scenario: PathBuf,
    /// Grid axis, e.g. --grid gains.gamma=5,25,125. Repeat per axis.
    #[arg(long = "grid", value_name = "KEY=V1,V2,...", required = true)]
    grid: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    jobs: Option<usize>,
    #[arg(long, value_name = "T0:T1")]
    rms_window: Option<String>,
    #[arg(short, long)]
    verbose: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap would exit with its own code; keep 0 for --help/--version
            // and 1 for usage errors per the documented contract.
            let is_error = e.use_stderr();
            let _ = e.print();
            return if is_error { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    let outcome = match cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Verify(args) => cmd_verify(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Sweep(args) => cmd_sweep(args),
    };
    match outcome {
        Ok(code) => ExitCode::from(code),
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(classify(&err))
        }
    }
}

/// Map failures onto the documented exit codes.
fn classify(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<attadapt::Error>() {
            return match e {
                attadapt::Error::UnwindingGuard { .. } => EXIT_UNWINDING,
                attadapt::Error::NonFinite { .. } => EXIT_NON_FINITE,
                _ => EXIT_CONFIG,
            };
        }
    }
    EXIT_CONFIG
}

/// Parse a literal the way the scenario grammar would.
fn parse_literal(raw: &str) -> toml::Value {
    if let Ok(b) = raw.parse::<bool>() {
        return toml::Value::Boolean(b);
    }
    let looks_integral = !raw.contains(['.', 'e', 'E']);
    if looks_integral {
        if let Ok(i) = raw.parse::<i64>() {
            return toml::Value::Integer(i);
        }
    }
    if let Ok(f) = raw.parse::<f64>() {
        return toml::Value::Float(f);
    }
    toml::Value::String(raw.to_string())
}

/// Apply one `path.to.key=value` override onto a TOML document.
fn apply_set(root: &mut toml::Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .with_context(|| format!("override `{spec}` is not of the form key=value"))?;
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .with_context(|| format!("`{path}` does not address a table"))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .with_context(|| format!("`{path}` does not address a table"))?;
    table.insert(parts[parts.len() - 1].to_string(), parse_literal(raw));
    Ok(())
}

/// Load a scenario file with overrides applied, then validate it.
fn load_scenario(path: &Path, sets: &[String], seed: Option<u64>) -> Result<Scenario> {
    let text = fs::read_to_string(path)
        .with_context(|| format!("reading scenario file {}", path.display()))?;
    let mut value: toml::Value = toml::from_str(&text)
        .with_context(|| format!("parsing {}", path.display()))?;
    for spec in sets {
        apply_set(&mut value, spec)?;
    }
    if let Some(seed) = seed {
        apply_set(&mut value, &format!("seed={seed}"))?;
    }
    let scenario: Scenario = value
        .try_into()
        .with_context(|| format!("invalid scenario in {}", path.display()))?;
    scenario.validate().context("scenario validation")?;
    Ok(scenario)
}

/// Comment block prefixed to every output file.
fn provenance(scenario: &Scenario) -> Vec<String> {
    let resolved = toml::to_string(scenario).unwrap_or_default();
    let mut hasher = Sha256::new();
    hasher.update(resolved.as_bytes());
    let digest = hasher.finalize();
    let hash: String = digest.iter().take(8).map(|b| format!("{b:02x}")).collect();
    let mut lines = vec![
        format!("attadapt v{}", env!("CARGO_PKG_VERSION")),
        format!("config-hash: {hash}"),
        format!("seed: {}", scenario.seed),
        "resolved scenario:".to_string(),
    ];
    lines.extend(resolved.lines().map(|l| format!("  {l}")));
    lines
}

fn parse_window(spec: Option<&str>, log: &TrajectoryLog) -> Result<(f64, f64)> {
    let t_end = log.records.last().map(|r| r.t).unwrap_or(0.0);
    match spec {
        Some(s) => {
            let (a, b) = s
                .split_once(':')
                .with_context(|| format!("window `{s}` is not of the form T0:T1"))?;
            Ok((a.trim().parse()?, b.trim().parse()?))
        }
        None => Ok((0.5 * t_end, t_end)),
    }
}

fn metrics_header() -> &'static str {
    "label,seed,rms_qev,rms_omega_e[rad/s],rms_theta_err[kg*m^2],min_abs_qe4,t_s_detected[s],hbar,sync_ratio_spread"
}

fn metrics_row(label: &str, seed: u64, m: &RunMetrics) -> String {
    let opt = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.16e}"));
    format!(
        "{label},{seed},{:.16e},{:.16e},{:.16e},{:.16e},{},{},{}",
        m.rms_qev,
        m.rms_omega_e,
        m.rms_theta_err,
        m.min_abs_qe4,
        opt(m.t_s_detected),
        opt(m.hbar),
        opt(m.sync_ratio_spread)
    )
}

fn write_with_comments(path: &Path, comments: &[String], body: &str) -> Result<()> {
    let mut file = fs::File::create(path)
        .with_context(|| format!("creating {}", path.display()))?;
    for line in comments {
        writeln!(file, "# {line}")?;
    }
    file.write_all(body.as_bytes())?;
    Ok(())
}

fn configure_pool(jobs: Option<usize>) {
    #[cfg(feature = "parallel")]
    if let Some(n) = jobs {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    #[cfg(not(feature = "parallel"))]
    if jobs.is_some() {
        eprintln!("note: built without the `parallel` feature; --jobs is ignored");
    }
}

fn cmd_run(args: RunArgs) -> Result<u8> {
    let scenario = load_scenario(&args.scenario, &args.sets, args.seed)?;
    fs::create_dir_all(&args.out)?;
    if args.verbose {
        eprintln!(
            "running `{}`: {} s at h = {} s",
            scenario.label, scenario.duration, scenario.step
        );
    }
    let log = run_scenario(&scenario)?;
    for warning in &log.warnings {
        eprintln!("warning: {warning}");
    }

    let comments = provenance(&scenario);
    let traj_path = args.out.join(format!("{}.csv", scenario.label));
    let mut buf = Vec::new();
    log.write_csv(&mut buf, &comments)?;
    fs::write(&traj_path, &buf).with_context(|| format!("writing {}", traj_path.display()))?;

    let (t0, t1) = parse_window(args.rms_window.as_deref(), &log)?;
    let m = metrics(&log, t0, t1)?;
    let metrics_path = args.out.join(format!("{}_metrics.csv", scenario.label));
    let body = format!(
        "{}\n{}\n",
        metrics_header(),
        metrics_row(&scenario.label, scenario.seed, &m)
    );
    let mut comments = comments;
    comments.push(format!("metrics window: [{t0}, {t1}] s"));
    write_with_comments(&metrics_path, &comments, &body)?;

    println!(
        "{}: {} samples -> {} ({} steps of {} s)",
        scenario.label,
        log.records.len(),
        traj_path.display(),
        scenario.n_steps(),
        scenario.step
    );
    println!(
        "  rms(q_ev) = {:.3e}, rms(omega_e) = {:.3e} rad/s, rms(theta_err) = {:.3e} kg m^2 over [{t0}, {t1}] s",
        m.rms_qev, m.rms_omega_e, m.rms_theta_err
    );
    if let (Some(ts), Some(hbar)) = (m.t_s_detected, m.hbar) {
        println!("  excitation onset {ts:.2} s, regressor floor {hbar:.3e}");
    }
    Ok(0)
}

fn cmd_verify(args: VerifyArgs) -> Result<u8> {
    let results = run_all(&VerifyOptions { corrupt_mu2: args.corrupt_mu2 });
    let name_width = results.iter().map(|r| r.name.len()).max().unwrap_or(8);
    println!("{:<name_width$}  {:>13}  {:>9}  status", "check", "max deviation", "tolerance");
    let mut all_pass = true;
    for r in &results {
        println!(
            "{:<name_width$}  {:>13.3e}  {:>9.1e}  {}",
            r.name,
            r.deviation,
            r.tolerance,
            if r.pass { "PASS" } else { "FAIL" }
        );
        println!("{:<name_width$}    {}", "", r.detail);
        all_pass &= r.pass;
    }
    if all_pass {
        println!("all {} checks passed", results.len());
        Ok(0)
    } else {
        println!("verification FAILED");
        Ok(EXIT_VERIFY_FAILED)
    }
}

fn cmd_compare(args: CompareArgs) -> Result<u8> {
    configure_pool(args.jobs);
    let scenarios: Vec<Scenario> = args
        .scenarios
        .iter()
        .map(|p| load_scenario(p, &args.sets, args.seed))
        .collect::<Result<_>>()?;
    let step = scenarios[0].step;
    if scenarios.iter().any(|s| (s.step - step).abs() > 1e-12) {
        bail!("compared scenarios must share the integrator step");
    }
    fs::create_dir_all(&args.out)?;
    if args.verbose {
        eprintln!("comparing {} scenarios", scenarios.len());
    }

    let logs: Vec<TrajectoryLog> = attadapt::sim::run_batch(&scenarios)
        .into_iter()
        .collect::<attadapt::Result<_>>()?;
    for log in &logs {
        for warning in &log.warnings {
            eprintln!("warning [{}]: {warning}", log.scenario.label);
        }
    }

    // Aligned error norms, truncated to the shortest run.
    let rows = logs.iter().map(|l| l.records.len()).min().unwrap_or(0);
    let mut header = String::from("t[s]");
    for log in &logs {
        let label = &log.scenario.label;
        header.push_str(&format!(
            ",qev_norm_{label},omega_e_norm_{label}[rad/s],u_norm_{label}[N*m],theta_err_norm_{label}[kg*m^2]"
        ));
    }
    let mut body = format!("{header}\n");
    for k in 0..rows {
        let mut line = format!("{:.16e}", logs[0].records[k].t);
        for log in &logs {
            let d = &log.records[k].derived;
            let qev =
                (d.q_e[0] * d.q_e[0] + d.q_e[1] * d.q_e[1] + d.q_e[2] * d.q_e[2]).sqrt();
            line.push_str(&format!(
                ",{:.16e},{:.16e},{:.16e},{:.16e}",
                qev,
                d.omega_e.norm(),
                d.u.norm(),
                d.theta_err.norm()
            ));
        }
        body.push_str(&line);
        body.push('\n');
    }

    let mut comments = vec![format!("attadapt v{}", env!("CARGO_PKG_VERSION"))];
    for (i, scenario) in scenarios.iter().enumerate() {
        comments.push(format!("scenario {}:", i));
        comments.extend(provenance(scenario).into_iter().map(|l| format!("  {l}")));
    }
    let series_path = args.out.join("compare_timeseries.csv");
    write_with_comments(&series_path, &comments, &body)?;

    // RMS summary table.
    let mut summary = format!("{}\n", metrics_header());
    println!("{:<24} {:>12} {:>14} {:>14}", "scenario", "rms(q_ev)", "rms(omega_e)", "rms(theta)");
    for log in &logs {
        let (t0, t1) = parse_window(args.rms_window.as_deref(), log)?;
        let m = metrics(log, t0, t1)?;
        summary.push_str(&metrics_row(&log.scenario.label, log.scenario.seed, &m));
        summary.push('\n');
        println!(
            "{:<24} {:>12.3e} {:>14.3e} {:>14.3e}",
            log.scenario.label, m.rms_qev, m.rms_omega_e, m.rms_theta_err
        );
    }
    let summary_path = args.out.join("compare_summary.csv");
    write_with_comments(&summary_path, &comments, &summary)?;
    println!("wrote {} and {}", series_path.display(), summary_path.display());
    Ok(0)
}

fn cmd_sweep(args: SweepArgs) -> Result<u8> {
    configure_pool(args.jobs);
    // Parse the grid axes.
    let mut axes: Vec<(String, Vec<String>)> = Vec::new();
    for spec in &args.grid {
        let (key, values) = spec
            .split_once('=')
            .with_context(|| format!("grid axis `{spec}` is not of the form key=v1,v2,..."))?;
        let values: Vec<String> = values.split(',').map(|s| s.trim().to_string()).collect();
        if values.is_empty() || values.iter().any(|v| v.is_empty()) {
            bail!("grid axis `{spec}` has empty values");
        }
        axes.push((key.to_string(), values));
    }
    if axes.is_empty() {
        bail!("empty grid");
    }

    // Cartesian product of axis indices.
    let mut cells: Vec<Vec<usize>> = vec![Vec::new()];
    for (_, values) in &axes {
        let mut next = Vec::new();
        for cell in &cells {
            for i in 0..values.len() {
                let mut c = cell.clone();
                c.push(i);
                next.push(c);
            }
        }
        cells = next;
    }

    let mut scenarios = Vec::with_capacity(cells.len());
    let mut cell_sets: Vec<Vec<String>> = Vec::with_capacity(cells.len());
    for cell in &cells {
        let mut sets = args.sets.clone();
        let mut suffix = String::new();
        for (axis, &vi) in axes.iter().zip(cell.iter()) {
            sets.push(format!("{}={}", axis.0, axis.1[vi]));
            suffix.push_str(&format!("_{}", axis.1[vi]));
        }
        let mut scenario = load_scenario(&args.scenario, &sets, args.seed)?;
        scenario.label = format!("{}{}", scenario.label, suffix.replace('.', "p"));
        scenarios.push(scenario);
        cell_sets.push(
            axes.iter()
                .zip(cell.iter())
                .map(|(axis, &vi)| axis.1[vi].clone())
                .collect(),
        );
    }
    fs::create_dir_all(&args.out)?;
    if args.verbose {
        eprintln!("sweeping {} cells", scenarios.len());
    }

    // One row per cell even when a cell aborts: failed runs are reported in
    // the status column rather than killing the sweep.
    let outcomes = attadapt::sim::run_batch(&scenarios);

    let axis_cols: Vec<String> = axes.iter().map(|(k, _)| k.replace('.', "_")).collect();
    let mut body = format!("{},{},status\n", axis_cols.join(","), metrics_header());
    let mut ok = 0usize;
    for ((outcome, cell), scenario) in outcomes.iter().zip(cell_sets.iter()).zip(scenarios.iter()) {
        match outcome {
            Ok(log) => {
                let (t0, t1) = parse_window(args.rms_window.as_deref(), log)?;
                let m = metrics(log, t0, t1)?;
                body.push_str(&format!(
                    "{},{},ok\n",
                    cell.join(","),
                    metrics_row(&log.scenario.label, log.scenario.seed, &m)
                ));
                ok += 1;
            }
            Err(e) => {
                eprintln!("warning [{}]: {e}", scenario.label);
                body.push_str(&format!(
                    "{},{},{},nan,nan,nan,nan,nan,nan,nan,\"{}\"\n",
                    cell.join(","),
                    scenario.label,
                    scenario.seed,
                    e.to_string().replace('"', "'")
                ));
            }
        }
    }
    let comments = vec![
        format!("attadapt v{}", env!("CARGO_PKG_VERSION")),
        format!("sweep axes: {}", args.grid.join(" | ")),
        format!("base scenario: {}", args.scenario.display()),
    ];
    let path = args.out.join("sweep_metrics.csv");
    write_with_comments(&path, &comments, &body)?;
    println!("{} cells ({} ok) -> {}", outcomes.len(), ok, path.display());
    Ok(0)
}
