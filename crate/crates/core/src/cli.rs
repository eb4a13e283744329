//! Command-line front end. Exit codes: 0 when expectations are met (or none
//! were declared), 1 when they are violated, 2 on usage or configuration
//! errors.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{load_model, Example, Expect, LoopKind, ModelBundle, Operator, Restriction, RunConfig};
use crate::error::{Error, Result};
use crate::idapbc;
use crate::models::{IwpTerms, QuadraticVariant, VERDICT_TOLERANCE};
use crate::rebuttal::{self, AugmentedEnergy, MomentumCoordinate};
use crate::sim::{self, Controller, Method};
use crate::sweep::{sample_states, ControllerStateSampling, Executor};
use crate::system::{DisturbanceProfile, ExtendedState, Vector};

pub const OUT_ENV: &str = "IDA_VERIFY_OUT";
pub const DEFAULT_OUT: &str = "ida-verify-out";
/// Simulated iISS margins below this count as violations.
pub const SIM_MARGIN_TOLERANCE: f64 = 1e-5;
/// Pointwise matched-bound gaps below this count as violations.
pub const ALGEBRAIC_TOLERANCE: f64 = 1e-12;
pub const ENERGY_INCREASE_TOLERANCE: f64 = 1e-7;

#[derive(Parser, Debug)]
#[command(
    name = "ida-verify",
    version,
    about = "Matching, dissipation-bound and simulation checks for IDA-PBC designs"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sweep matching residuals over sampled states.
    CheckMatching(CheckArgs),
    /// Kernel witness, disputed-bound counterexample and matched-bound checks.
    AnalyzeIss(CommonArgs),
    /// Integrate the target or disturbed closed loop.
    Simulate(SimArgs),
    /// Summarize previous runs in the output directory as markdown.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
struct CommonArgs {
    /// JSON run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Preset name (`iwp`, `iwp-default`, `rip`) or model file.
    #[arg(long)]
    model: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; `IDA_VERIFY_OUT` takes precedence.
    #[arg(long)]
    out: Option<PathBuf>,
    /// `pass` or `fail`.
    #[arg(long)]
    expect: Option<String>,
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct CheckArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Restrict sampling, e.g. `x_v=0`.
    #[arg(long)]
    restrict: Option<String>,
    /// Residual operator(s): basic, p41, p51, example. Repeatable.
    #[arg(long = "operator")]
    operators: Vec<String>,
}

#[derive(Args, Debug)]
struct SimArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// `target` or `disturbed`.
    #[arg(long = "loop")]
    loop_kind: Option<String>,
    /// `ida_pbc` or `integral_p41`.
    #[arg(long)]
    controller: Option<String>,
    #[arg(long)]
    horizon: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
}

#[derive(Args, Debug)]
struct ReportArgs {
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Outcome {
    Met,
    Violated,
}

impl Outcome {
    fn from_expectation(expect: Option<Expect>, passed: bool) -> Self {
        match expect {
            Some(Expect::Pass) if !passed => Outcome::Violated,
            Some(Expect::Fail) if passed => Outcome::Violated,
            _ => Outcome::Met,
        }
    }
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = std::panic::catch_unwind(|| dispatch(cli));
    match result {
        Ok(Ok(Outcome::Met)) => 0,
        Ok(Ok(Outcome::Violated)) => 1,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            2
        }
        Err(_) => {
            eprintln!("error: internal failure");
            2
        }
    }
}

fn dispatch(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::CheckMatching(a) => {
            let (mut cfg, base) = resolve(&a.common)?;
            if let Some(r) = &a.restrict {
                cfg.restrict = r.parse()?;
            }
            if !a.operators.is_empty() {
                cfg.operators = a.operators.iter().map(|s| s.parse()).collect::<Result<_>>()?;
            }
            check_matching(&cfg, base.as_deref())
        }
        Command::AnalyzeIss(a) => {
            let (cfg, base) = resolve(&a)?;
            analyze_iss(&cfg, base.as_deref())
        }
        Command::Simulate(a) => {
            let (mut cfg, base) = resolve(&a.common)?;
            if let Some(l) = &a.loop_kind {
                cfg.simulation.loop_kind = match l.as_str() {
                    "target" => LoopKind::Target,
                    "disturbed" => LoopKind::Disturbed,
                    _ => return Err(Error::Parse(format!("unknown loop `{l}` (target, disturbed)"))),
                };
            }
            if let Some(c) = &a.controller {
                cfg.simulation.controller = match c.as_str() {
                    "ida_pbc" => Controller::IdaPbc,
                    "integral_p41" => Controller::IntegralP41,
                    _ => {
                        return Err(Error::Parse(format!(
                            "unknown controller `{c}` (ida_pbc, integral_p41)"
                        )))
                    }
                };
            }
            if let Some(h) = a.horizon {
                cfg.simulation.horizon = h;
            }
            if let Some(dt) = a.dt {
                cfg.simulation.dt = dt;
            }
            cfg.validate()?;
            simulate(&cfg, base.as_deref())
        }
        Command::Report(a) => report(&output_dir(a.out.as_deref(), None)),
    }
}

fn output_dir(flag: Option<&Path>, config: Option<&Path>) -> PathBuf {
    if let Some(env) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
        return PathBuf::from(env);
    }
    flag.or(config)
        .map_or_else(|| PathBuf::from(DEFAULT_OUT), Path::to_path_buf)
}

fn resolve(a: &CommonArgs) -> Result<(RunConfig, Option<PathBuf>)> {
    let (mut cfg, base) = match &a.config {
        Some(p) => (RunConfig::from_path(p)?, p.parent().map(Path::to_path_buf)),
        None => (RunConfig::default(), None),
    };
    if let Some(m) = &a.model {
        cfg.model = m.clone();
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(e) = &a.expect {
        cfg.expect = Some(e.parse()?);
    }
    if let Some(n) = a.samples {
        cfg.samples = n;
    }
    cfg.out = Some(output_dir(a.out.as_deref(), cfg.out.as_deref()));
    cfg.validate()?;
    Ok((cfg, base))
}

fn out_of(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg.out.clone().unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Parse(format!("{}: {e}", dir.display())))?;
    Ok(dir)
}

fn slug(name: &str) -> String {
    name.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))
}

fn csv_err(e: impl std::fmt::Display) -> Error {
    Error::Parse(e.to_string())
}

fn operators_for(cfg: &RunConfig, bundle: &ModelBundle) -> Result<Vec<Operator>> {
    let has_example = !matches!(bundle.example, Example::None);
    if cfg.operators.is_empty() {
        return Ok(Operator::ALL
            .into_iter()
            .filter(|o| *o != Operator::Example || has_example)
            .collect());
    }
    let mut ops = cfg.operators.clone();
    ops.sort();
    ops.dedup();
    if ops.contains(&Operator::Example) && !has_example {
        return Err(Error::Parse(format!(
            "operator `example` needs the iwp or rip preset, not `{}`",
            bundle.name
        )));
    }
    Ok(ops)
}

struct Evaluation {
    residual: Vec<f64>,
    norm: f64,
    term_norms: Vec<f64>,
}

fn evaluate(op: Operator, bundle: &ModelBundle, energy: &AugmentedEnergy, s: &ExtendedState) -> Result<Evaluation> {
    let (model, target, gains) = (&bundle.model, &bundle.target, &bundle.gains);
    let from_report = |r: rebuttal::ResidualReport| Evaluation {
        norm: r.norm,
        term_norms: r.components_by_term.iter().map(|t| t.annihilated_norm).collect(),
        residual: r.residual,
    };
    Ok(match op {
        Operator::Basic => {
            let r = idapbc::matching_residual_basic(model, target, &s.q, &s.p)?;
            Evaluation {
                norm: r.norm(),
                residual: r.iter().copied().collect(),
                term_norms: vec![],
            }
        }
        Operator::P41 => from_report(rebuttal::residual_p41(model, target, gains, s)?),
        Operator::P51 => from_report(rebuttal::residual_p51(model, target, gains, energy, s)?),
        Operator::Example => match &bundle.example {
            Example::Iwp(iwp) => {
                let perp = model.annihilator(&s.q)?;
                let terms = iwp.rhs_direct_terms(s)?;
                let total = terms.iter().fold(Vector::zeros(s.n()), |a, t| a + t);
                let r = &perp * total;
                Evaluation {
                    norm: r.norm(),
                    residual: r.iter().copied().collect(),
                    term_norms: terms.iter().map(|t| (&perp * t).norm()).collect(),
                }
            }
            Example::Rip(rip) => {
                let star = rip.star(s, QuadraticVariant::Literal)?;
                let t = rip.terms(s, 0.0, QuadraticVariant::Literal)?;
                Evaluation {
                    norm: star.abs(),
                    residual: vec![star],
                    term_norms: t.terms.iter().map(|(_, v)| v[0].abs()).collect(),
                }
            }
            Example::None => return Err(Error::Parse("no example attached to this model".into())),
        },
    })
}

#[derive(Serialize)]
struct OperatorSummary {
    operator: &'static str,
    max: f64,
    mean: f64,
    worst_sample: usize,
    passed: bool,
    status: idapbc::MatchingStatus,
}

fn check_matching(cfg: &RunConfig, base: Option<&Path>) -> Result<Outcome> {
    let bundle = load_model(cfg, base)?;
    let ops = operators_for(cfg, &bundle)?;
    let out = out_of(cfg)?;
    let energy = AugmentedEnergy::from_target(&bundle.target);
    let sampling = match cfg.restrict {
        Restriction::XvZero => ControllerStateSampling::Zero,
        Restriction::None => ControllerStateSampling::default(),
    };
    let states = sample_states(bundle.model.domain(), sampling, cfg.samples, cfg.seed)?;
    let exec = Executor::default();
    let rows = exec.try_map(&states, |s| {
        ops.iter()
            .map(|op| evaluate(*op, &bundle, &energy, s))
            .collect::<Result<Vec<_>>>()
    })?;

    let stem = format!("check_matching_{}", slug(&bundle.name));
    let n = bundle.model.n();
    let mut w = csv_writer(&out.join(format!("{stem}.csv")))?;
    let mut header = vec!["sample".to_string()];
    for prefix in ["q", "p", "x_v"] {
        header.extend((1..=n).map(|i| format!("{prefix}{i}")));
    }
    if let Some(first) = rows.first() {
        for (op, ev) in ops.iter().zip(first) {
            header.extend((1..=ev.residual.len()).map(|i| format!("{}_r{i}", op.as_str())));
            header.push(format!("{}_norm", op.as_str()));
            header.extend((1..=ev.term_norms.len()).map(|i| format!("{}_term{i}", op.as_str())));
        }
    }
    w.write_record(&header).map_err(csv_err)?;
    for (k, (s, row)) in states.iter().zip(&rows).enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(s.q.iter().chain(s.p.iter()).chain(s.x_v.iter()).map(|v| v.to_string()));
        for ev in row {
            rec.extend(ev.residual.iter().map(|v| v.to_string()));
            rec.push(ev.norm.to_string());
            rec.extend(ev.term_norms.iter().map(|v| v.to_string()));
        }
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;

    let summaries: Vec<OperatorSummary> = ops
        .iter()
        .enumerate()
        .map(|(i, op)| {
            let norms: Vec<f64> = rows.iter().map(|r| r[i].norm).collect();
            let (worst, max) =
                norms
                    .iter()
                    .copied()
                    .enumerate()
                    .fold((0, 0.0f64), |acc, (k, v)| if v > acc.1 { (k, v) } else { acc });
            OperatorSummary {
                operator: op.as_str(),
                max,
                mean: norms.iter().sum::<f64>() / norms.len() as f64,
                worst_sample: worst,
                passed: max < cfg.tolerance,
                status: idapbc::MatchingStatus::classify(max, cfg.tolerance),
            }
        })
        .collect();
    let all_pass = summaries.iter().all(|s| s.passed);

    let mut extra = serde_json::Map::new();
    if ops.contains(&Operator::P51) {
        extra.insert("xq_chain".into(), chain_summary(&bundle, &energy, &states)?);
    }
    if ops.contains(&Operator::Example) {
        match &bundle.example {
            Example::Iwp(iwp) => {
                let terms = exec.try_map(&states, |s| iwp.terms(s, cfg.term_options))?;
                let max_example = summaries
                    .iter()
                    .find(|s| s.operator == "example")
                    .map_or(0.0, |s| s.max);
                extra.insert("iwp".into(), iwp_summary(&terms, max_example));
            }
            Example::Rip(rip) => {
                let mut max_gap = 0.0f64;
                let mut above = 0usize;
                let mut considered = 0usize;
                let mut slice_max = 0.0f64;
                for s in &states {
                    let t = rip.terms(s, 0.0, QuadraticVariant::Literal)?;
                    let star = rip.star(s, QuadraticVariant::Literal)?;
                    max_gap = max_gap.max((t.star_from_terms() - star).abs());
                    if s.x_v[1].abs() >= 0.1 {
                        considered += 1;
                        above += usize::from(star.abs() > 1e-8);
                    }
                    let slice = ExtendedState::new(s.q.clone(), s.p.clone(), Vector::from_vec(vec![s.x_v[0], 0.0]))?;
                    slice_max = slice_max.max(rip.star(&slice, QuadraticVariant::Literal)?.abs());
                }
                extra.insert(
                    "rip".into(),
                    json!({
                        "star_vs_terms_max_gap": max_gap,
                        "star_zero_slice_max": slice_max,
                        "star_nonzero_fraction": if considered == 0 { Value::Null } else { json!(above as f64 / considered as f64) },
                        "states_with_xv2_at_least_0.1": considered,
                    }),
                );
            }
            Example::None => {}
        }
    }

    let verdict = if all_pass { "pass" } else { "fail" };
    let summary = json!({
        "command": "check-matching",
        "model": bundle.name,
        "seed": cfg.seed,
        "samples": cfg.samples,
        "tolerance": cfg.tolerance,
        "restriction": String::from(cfg.restrict),
        "operators": summaries,
        "verdict": verdict,
        "expect": cfg.expect,
        "notes": bundle.notes,
        "details": extra,
    });
    write_json(&out.join(format!("{stem}.json")), &summary)?;
    for s in &summaries {
        println!(
            "{:8} max {:.3e}  mean {:.3e}  {}",
            s.operator,
            s.max,
            s.mean,
            if s.passed { "holds" } else { "violated" }
        );
    }
    println!(
        "verdict: {verdict} ({} samples, tolerance {:e})",
        cfg.samples, cfg.tolerance
    );
    Ok(Outcome::from_expectation(cfg.expect, all_pass))
}

fn chain_summary(bundle: &ModelBundle, energy: &AugmentedEnergy, states: &[ExtendedState]) -> Result<Value> {
    let mut gap = 0.0f64;
    let mut mismatch = 0.0f64;
    let mut deviation = 0.0f64;
    let d1 = Vector::zeros(bundle.model.n());
    for s in states {
        let c = rebuttal::xq_dot_chain(
            &bundle.model,
            &bundle.target,
            &bundle.gains,
            energy,
            s,
            &d1,
            MomentumCoordinate::Half,
        )?;
        gap = gap.max(c.max_pairwise_gap());
        mismatch = mismatch.max(c.deviation_mismatch());
        deviation = deviation.max(c.deviation.iter().fold(0.0f64, |a, v| a.max(v.abs())));
    }
    Ok(json!({
        "momentum_coordinate": "half",
        "max_pairwise_line_gap": gap,
        "max_deviation_from_claimed_row": deviation,
        "max_deviation_prediction_error": mismatch,
    }))
}

fn iwp_summary(terms: &[IwpTerms], max_example: f64) -> Value {
    let labels: Vec<String> = terms
        .first()
        .map_or(vec![], |t| t.terms.iter().map(|x| x.label.clone()).collect());
    let per_term: Vec<Value> = labels
        .iter()
        .enumerate()
        .map(|(i, label)| {
            let first = terms
                .iter()
                .map(|t| t.terms[i].first_component_gap())
                .fold(0.0, f64::max);
            let full = terms.iter().map(|t| t.terms[i].max_gap()).fold(0.0, f64::max);
            json!({ "term": label, "max_first_component_gap": first, "max_gap": full })
        })
        .collect();
    let sum_gap = terms.iter().map(IwpTerms::sum_gap).fold(0.0, f64::max);
    json!({
        "verdict": if max_example > VERDICT_TOLERANCE { "FAIL-TO-MATCH" } else { "MATCHABLE" },
        "max_annihilated_rhs": max_example,
        "literal_vs_direct_max_sum_gap": sum_gap,
        "per_term": per_term,
        "options": terms.first().map(|t| t.options),
    })
}

fn analyze_iss(cfg: &RunConfig, base: Option<&Path>) -> Result<Outcome> {
    let bundle = load_model(cfg, base)?;
    let out = out_of(cfg)?;
    let (model, target, gains) = (&bundle.model, &bundle.target, &bundle.gains);
    let q_star = target.q_star().clone();
    let stem = format!("analyze_iss_{}", slug(&bundle.name));

    let (witness, counterexample) = match rebuttal::k_infinity_witness(model, target, gains, &q_star) {
        Ok(w) => (
            json!(w),
            json!(rebuttal::young_counterexample(model, target, gains, &q_star)?),
        ),
        Err(Error::NoKernel) => (
            json!({ "unavailable": "fully actuated (m = n): no kernel direction" }),
            Value::Null,
        ),
        Err(e) => return Err(e),
    };

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let domain = model.domain().clone();
    let m = model.m();
    let mut triples = Vec::with_capacity(cfg.iss.pairs);
    for _ in 0..cfg.iss.pairs {
        let q = domain.sample_q(&mut rng);
        let x_p = domain.sample_p(&mut rng) * 3.0;
        let dhat = Vector::from_iterator(m, (0..m).map(|_| rng.random_range(-2.0..2.0)));
        triples.push((q, x_p, dhat));
    }
    let gaps = Executor::default().try_map(&triples, |(q, x_p, d)| {
        rebuttal::matched_bound_gap(model, target, gains, q, x_p, d)
    })?;
    let violations = gaps.iter().filter(|g| **g < -ALGEBRAIC_TOLERANCE).count();
    let min_gap = gaps.iter().copied().fold(f64::INFINITY, f64::min);
    let mut w = csv_writer(&out.join(format!("{stem}_pairs.csv")))?;
    let n = model.n();
    let mut header = vec!["pair".to_string()];
    header.extend((1..=n).map(|i| format!("q{i}")));
    header.extend((1..=n).map(|i| format!("x_p{i}")));
    header.extend((1..=m).map(|i| format!("d2hat{i}")));
    header.push("gap".into());
    w.write_record(&header).map_err(csv_err)?;
    for (k, ((q, x, d), g)) in triples.iter().zip(&gaps).enumerate() {
        let mut rec = vec![k.to_string()];
        rec.extend(q.iter().chain(x.iter()).chain(d.iter()).map(|v| v.to_string()));
        rec.push(g.to_string());
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush().map_err(csv_err)?;

    let amplitude = cfg.iss.amplitude;
    let dist = DisturbanceProfile::matched(n, Arc::new(move |t| Vector::from_element(m, amplitude * t.sin())));
    let x0 = ExtendedState::at_rest(q_star.add_scalar(0.2), Vector::zeros(n))?;
    let simulation = match sim::simulate_disturbed(
        model,
        target,
        gains,
        &AugmentedEnergy::from_target(target),
        Controller::IdaPbc,
        &dist,
        &x0,
        cfg.iss.horizon,
        cfg.iss.dt,
        Method::Rk4,
    ) {
        Ok(tr) => {
            tr.export(&out, &format!("{stem}_matched_run"))?;
            let s = tr.summary();
            json!({
                "horizon": cfg.iss.horizon,
                "dt": cfg.iss.dt,
                "amplitude": amplitude,
                "min_margin": s.min_margin,
                "diverged": s.diverged,
            })
        }
        Err(Error::InfeasibleMatching { residual }) => {
            json!({ "unavailable": "classical matching does not hold for this model", "residual": residual })
        }
        Err(e) => return Err(e),
    };
    let sim_ok = simulation
        .get("min_margin")
        .and_then(Value::as_f64)
        .is_none_or(|m| m >= -SIM_MARGIN_TOLERANCE);
    let passed = violations == 0 && sim_ok;
    let summary = json!({
        "command": "analyze-iss",
        "model": bundle.name,
        "seed": cfg.seed,
        "kernel_witness": witness,
        "disputed_bound_counterexample": counterexample,
        "matched_bound": {
            "pairs": cfg.iss.pairs,
            "min_gap": min_gap,
            "violations": violations,
            "tolerance": ALGEBRAIC_TOLERANCE,
        },
        "matched_simulation": simulation,
        "verdict": if passed { "pass" } else { "fail" },
        "expect": cfg.expect,
        "notes": bundle.notes,
    });
    write_json(&out.join(format!("{stem}.json")), &summary)?;
    match witness.get("output_norm").and_then(Value::as_f64) {
        Some(v) => println!("kernel witness: output norm {v:.3e}"),
        None => println!("kernel witness: unavailable (m = n)"),
    }
    if let Some(c) = counterexample.as_object() {
        println!(
            "disputed bound: claimed rhs {} < exact lhs {}",
            c.get("claimed_rhs").unwrap_or(&Value::Null),
            c.get("lhs_upper").unwrap_or(&Value::Null)
        );
    }
    println!(
        "matched bound: {violations} violations over {} pairs (min gap {min_gap:.3e})",
        cfg.iss.pairs
    );
    Ok(Outcome::from_expectation(cfg.expect, passed))
}

fn vector_or(values: &Option<Vec<f64>>, n: usize, default: Vector, what: &str) -> Result<Vector> {
    match values {
        Some(v) if v.len() == n => Ok(Vector::from_vec(v.clone())),
        Some(v) => Err(Error::Parse(format!("{what} has {} entries, expected {n}", v.len()))),
        None => Ok(default),
    }
}

fn signal(src: &Option<Vec<String>>, len: usize, what: &str) -> Result<Option<crate::system::TimeSignal>> {
    match src {
        Some(v) if v.len() == len => Ok(Some(crate::expr::time_signal(v)?)),
        Some(v) => Err(Error::Parse(format!("{what} has {} entries, expected {len}", v.len()))),
        None => Ok(None),
    }
}

fn simulate(cfg: &RunConfig, base: Option<&Path>) -> Result<Outcome> {
    let bundle = load_model(cfg, base)?;
    let out = out_of(cfg)?;
    let sc = &cfg.simulation;
    let (model, target, gains) = (&bundle.model, &bundle.target, &bundle.gains);
    let n = model.n();
    let q0 = vector_or(&sc.q0, n, target.q_star().add_scalar(0.2), "q0")?;
    let p0 = vector_or(&sc.p0, n, Vector::zeros(n), "p0")?;
    let xv0 = vector_or(&sc.x_v0, n, Vector::zeros(n), "x_v0")?;
    let (tr, stem) = match sc.loop_kind {
        LoopKind::Target => (
            sim::simulate_target(model, target, gains, &q0, &p0, sc.horizon, sc.dt, sc.method)?,
            format!("simulate_{}_target", slug(&bundle.name)),
        ),
        LoopKind::Disturbed => {
            let mut dist = DisturbanceProfile::zero(n);
            if let Some(s) = signal(&sc.d1, n, "d1")? {
                dist.d1 = s;
            }
            if let Some(s) = signal(&sc.d2, n, "d2")? {
                dist.d2 = s;
            }
            dist.matched_d2hat = signal(&sc.d2hat, model.m(), "d2hat")?;
            let tr = sim::simulate_disturbed(
                model,
                target,
                gains,
                &AugmentedEnergy::from_target(target),
                sc.controller,
                &dist,
                &ExtendedState::new(q0, p0, xv0)?,
                sc.horizon,
                sc.dt,
                sc.method,
            )?;
            (
                tr,
                format!("simulate_{}_{}", slug(&bundle.name), sc.controller.as_str()),
            )
        }
    };
    tr.export(&out, &stem)?;
    let s = tr.summary();
    println!(
        "{}: {} samples to t = {}, max energy increase {:.3e}{}{}",
        stem,
        s.samples,
        s.final_time,
        s.max_energy_increase,
        s.min_margin.map_or(String::new(), |m| format!(", min margin {m:.3e}")),
        tr.divergence.as_ref().map_or(String::new(), |d| format!(
            ", diverged at t = {} ({})",
            d.time, d.reason
        )),
    );
    let passed = !s.diverged
        && s.min_margin.is_none_or(|m| m >= -SIM_MARGIN_TOLERANCE)
        && (sc.loop_kind != LoopKind::Target || s.max_energy_increase <= ENERGY_INCREASE_TOLERANCE);
    Ok(Outcome::from_expectation(cfg.expect, passed))
}

fn read_json(path: &Path) -> Option<Value> {
    std::fs::read_to_string(path)
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
}

fn operator_max(v: &Value, op: &str) -> Option<f64> {
    v.get("operators")?
        .as_array()?
        .iter()
        .find(|o| o.get("operator").and_then(Value::as_str) == Some(op))?
        .get("max")?
        .as_f64()
}

struct Row {
    item: &'static str,
    status: String,
    evidence: String,
}

impl Row {
    fn not_run(item: &'static str) -> Self {
        Row {
            item,
            status: "not run".into(),
            evidence: String::new(),
        }
    }
}

fn status(ok: bool) -> String {
    if ok { "reproduced" } else { "not reproduced" }.into()
}

fn report(out: &Path) -> Result<Outcome> {
    let mut files: Vec<(String, Value)> = std::fs::read_dir(out)
        .map_err(|e| Error::Parse(format!("{}: {e}", out.display())))?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .filter_map(|p| {
            let name = p.file_stem()?.to_str()?.to_string();
            Some((name, read_json(&p)?))
        })
        .collect();
    files.sort_by(|a, b| a.0.cmp(&b.0));
    let checks: Vec<&(String, Value)> = files.iter().filter(|(n, _)| n.starts_with("check_matching_")).collect();
    let iss: Vec<&(String, Value)> = files
        .iter()
        .filter(|(n, v)| n.starts_with("analyze_iss_") && v.get("command").is_some())
        .collect();
    let sims: Vec<&(String, Value)> = files.iter().filter(|(n, _)| n.starts_with("simulate_")).collect();
    if checks.is_empty() && iss.is_empty() && sims.is_empty() {
        return Err(Error::Parse(format!("no run outputs found in {}", out.display())));
    }

    let model_of = |v: &Value| v.get("model").and_then(Value::as_str).unwrap_or("?").to_string();
    let pick = |op: &str| {
        checks
            .iter()
            .filter_map(|(_, v)| operator_max(v, op).map(|m| (model_of(v), m, v.clone())))
            .fold(None, |best: Option<(String, f64, Value)>, c| match best {
                Some(b) if b.1 >= c.1 => Some(b),
                _ => Some(c),
            })
    };

    let r1 = match pick("p41") {
        Some((model, max, v)) => {
            let tol = v.get("tolerance").and_then(Value::as_f64).unwrap_or(f64::NAN);
            Row {
                item: "R1",
                status: status(max > tol),
                evidence: format!("{model}: max p41 residual norm {max:.3e} (tolerance {tol:e})"),
            }
        }
        None => Row::not_run("R1"),
    };
    let r3 = match iss.first() {
        Some((_, v)) => {
            let witness = v.pointer("/kernel_witness/output_norm").and_then(Value::as_f64);
            let counter = v.get("disputed_bound_counterexample").is_some_and(Value::is_object);
            let viol = v.pointer("/matched_bound/violations").and_then(Value::as_u64);
            Row {
                item: "R3",
                status: status(witness.is_some_and(|w| w < 1e-10) && counter),
                evidence: format!(
                    "{}: witness output norm {}, counterexample {}, matched-bound violations {}",
                    model_of(v),
                    witness.map_or("n/a".into(), |w| format!("{w:.3e}")),
                    if counter { "found" } else { "none" },
                    viol.map_or("n/a".into(), |x| x.to_string()),
                ),
            }
        }
        None => Row::not_run("R3"),
    };
    let r45 = match pick("p51") {
        Some((model, max, v)) => {
            let tol = v.get("tolerance").and_then(Value::as_f64).unwrap_or(f64::NAN);
            let dev = v
                .pointer("/details/xq_chain/max_deviation_from_claimed_row")
                .and_then(Value::as_f64);
            Row {
                item: "R4/R5",
                status: status(max > tol && dev.is_some_and(|d| d > tol)),
                evidence: format!(
                    "{model}: max p51 residual norm {max:.3e}; x_q chain deviation {}",
                    dev.map_or("n/a".into(), |d| format!("{d:.3e}"))
                ),
            }
        }
        None => Row::not_run("R4/R5"),
    };
    let iwp = match checks.iter().find_map(|(_, v)| v.pointer("/details/iwp").cloned()) {
        Some(d) => {
            let verdict = d.get("verdict").and_then(Value::as_str).unwrap_or("?").to_string();
            Row {
                item: "IWP",
                status: status(verdict == "FAIL-TO-MATCH"),
                evidence: format!(
                    "verdict {verdict}, max annihilated rhs {:.3e}, literal-vs-direct gap {:.3e}",
                    d.get("max_annihilated_rhs").and_then(Value::as_f64).unwrap_or(f64::NAN),
                    d.get("literal_vs_direct_max_sum_gap")
                        .and_then(Value::as_f64)
                        .unwrap_or(f64::NAN),
                ),
            }
        }
        None => Row::not_run("IWP"),
    };
    let rip = match checks.iter().find_map(|(_, v)| v.pointer("/details/rip").cloned()) {
        Some(d) => {
            let frac = d.get("star_nonzero_fraction").and_then(Value::as_f64);
            let gap = d
                .get("star_vs_terms_max_gap")
                .and_then(Value::as_f64)
                .unwrap_or(f64::NAN);
            let slice = d.get("star_zero_slice_max").and_then(Value::as_f64).unwrap_or(f64::NAN);
            Row {
                item: "RIP",
                status: status(frac.is_some_and(|f| f >= 0.99) && gap < 1e-9 && slice < 1e-15),
                evidence: format!(
                    "nonzero fraction {}, closed form vs terms {gap:.3e}, zero slice {slice:.3e}",
                    frac.map_or("n/a".into(), |f| format!("{f:.4}"))
                ),
            }
        }
        None => Row::not_run("RIP"),
    };

    let mut md = String::from("# ida-verify report\n\n| Item | Status | Evidence |\n|---|---|---|\n");
    for r in [r1, r3, r45, iwp, rip] {
        let _ = writeln!(md, "| {} | {} | {} |", r.item, r.status, r.evidence);
    }
    if !sims.is_empty() {
        md.push_str("\n## Simulations\n\n| Run | Final time | Max energy increase | Min margin | Diverged |\n|---|---|---|---|---|\n");
        for (name, v) in &sims {
            let s = v.get("summary").cloned().unwrap_or(Value::Null);
            let _ = writeln!(
                md,
                "| {name} | {} | {} | {} | {} |",
                s.get("final_time").unwrap_or(&Value::Null),
                s.get("max_energy_increase").unwrap_or(&Value::Null),
                s.get("min_margin").unwrap_or(&Value::Null),
                s.get("diverged").unwrap_or(&Value::Null),
            );
        }
    }
    let path = out.join("report.md");
    std::fs::write(&path, &md).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    print!("{md}");
    Ok(Outcome::Met)
}
