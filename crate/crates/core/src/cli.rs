//! Command-line front end: bundled or user-supplied system definitions,
//! symbolic brackets, candidate flows, extremal classification, Hamiltonian
//! trajectories, variation cones, and the named check catalog.
//!
//! Exit codes: 0 success; 10–14 verdict classes from `classify` on a single
//! candidate (10 NORMAL_CERTIFIED, 11 ABNORMAL_CERTIFIED, 12 NOT_ABNORMAL,
//! 13 NOT_NORMAL, 14 AMBIGUOUS); 2 usage, parse, or lookup errors; 3 numeric
//! or check failures.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

use crate::bracket::{lie_bracket, BracketTable};
use crate::config::{load_system_arg, LoadedSystem, NamedCandidate};
use crate::contact::{
    extended_velocity, needle_cone, separation_certificate, NeedleSpec, ProjectiveCovector,
};
use crate::expr::{parse_scalar, VectorFieldExpr};
use crate::extremal::{
    abnormal_test_smooth, classify, integrate_normal_geodesic, match_initial_covector,
    normal_test_smooth, prepare, prepare_unit_speed, ClassifyReport, ControlSystem, Evidence,
    TestReport, Verdict,
};
use crate::flow::{integrate_adjoint, integrate_flow, IntegrateOptions, TimeDependentField};
use crate::verify::{run_one, selected};

#[derive(Parser)]
#[command(
    name = "extremals",
    version,
    about = "Classify sub-Riemannian extremal candidates by flows, brackets, and separating covectors"
)]
struct Cli {
    #[command(flatten)]
    g: Global,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Global {
    /// Integrator error tolerance.
    #[arg(long, global = true, default_value_t = 1e-10)]
    tol: f64,
    /// Cap on the integrator step size.
    #[arg(long, global = true, value_name = "H")]
    max_step: Option<f64>,
    /// Relative singular-value threshold for rank decisions.
    #[arg(long, global = true, default_value_t = 1e-8)]
    tol_rank: f64,
    /// Relative residual threshold for membership decisions.
    #[arg(long, global = true, default_value_t = 1e-6)]
    tol_membership: f64,
    /// Seed for randomized constructions (needle draws, check sweeps).
    #[arg(long, global = true, default_value_t = 42)]
    seed: u64,
    /// Emit one JSON document instead of text.
    #[arg(long, global = true)]
    json: bool,
    /// Directory for CSV exports (commands that produce trajectories).
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Lie bracket of two fields of a system, with an optional nested table.
    Bracket {
        /// Bundled system name or path to a definition file.
        #[arg(long)]
        system: String,
        /// Two fields: declared names or comma-separated component
        /// expressions in the system's coordinates.
        #[arg(required = true, num_args = 1..)]
        fields: Vec<String>,
        /// Also print every left-nested bracket word up to this depth.
        #[arg(long, value_name = "DEPTH")]
        table: Option<usize>,
    },
    /// Integrate a named candidate and report its endpoint.
    Flow {
        #[arg(long)]
        system: String,
        #[arg(long)]
        candidate: String,
    },
    /// Decide abnormality and normality for one or all candidates.
    Classify {
        #[arg(long)]
        system: String,
        /// Candidate name; with it the exit code encodes the verdict.
        #[arg(long)]
        candidate: Option<String>,
        /// flow (transport pooling), bracket (symbolic spans), or both;
        /// defaults to the candidate's declared method, else flow.
        #[arg(long)]
        method: Option<String>,
    },
    /// Integrate the Hamiltonian flow of the control cost from a state and
    /// an initial covector.
    Geodesic {
        #[arg(long)]
        system: String,
        /// Start state, comma-separated.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        q0: Vec<f64>,
        /// Start covector, comma-separated.
        #[arg(long, value_delimiter = ',', num_args = 1.., required = true)]
        p0: Vec<f64>,
        /// Time horizon.
        #[arg(long = "T", value_name = "T")]
        horizon: f64,
    },
    /// Cone of needle-variation rays at a time along a candidate, plus a
    /// separation attempt with the candidate's fitted covector.
    Cone {
        #[arg(long)]
        system: String,
        #[arg(long)]
        candidate: String,
        /// Where to collect the rays (defaults to the candidate's horizon).
        #[arg(long)]
        t_end: Option<f64>,
        /// How many random needles to draw.
        #[arg(long, default_value_t = 24)]
        needles: usize,
    },
    /// Run the named check catalog over the bundled corpus.
    Verify {
        /// Bundled name or definition file: validate it, then keep only
        /// checks touching a system of that name.
        #[arg(long)]
        system: Option<String>,
        /// Run the whole catalog (the default when --system is absent).
        #[arg(long)]
        all: bool,
        /// Keep only checks whose name contains this substring.
        #[arg(long)]
        filter: Option<String>,
    },
}

/// A command failure with its process exit code.
struct Failure {
    code: i32,
    msg: String,
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure {
        code: 2,
        msg: msg.into(),
    }
}

fn numeric(msg: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        msg: msg.into(),
    }
}

/// Map library errors to the numeric-failure exit class.
fn ne<T, E: std::fmt::Display>(r: Result<T, E>) -> Result<T, Failure> {
    r.map_err(|e| numeric(e.to_string()))
}

fn int_opts(g: &Global) -> IntegrateOptions {
    IntegrateOptions {
        tol: g.tol,
        max_step: g.max_step,
        ..IntegrateOptions::default()
    }
}

fn load_system(arg: &str) -> Result<LoadedSystem, Failure> {
    load_system_arg(arg).map_err(|e| usage(format!("cannot load system {arg:?}: {e}")))
}

fn find_candidate<'a>(ls: &'a LoadedSystem, name: &str) -> Result<&'a NamedCandidate, Failure> {
    ls.candidate(name).ok_or_else(|| {
        let names: Vec<&str> = ls.candidates.iter().map(|c| c.def.name.as_str()).collect();
        usage(format!(
            "system {} declares no candidate {name:?}; available: {}",
            ls.def.name,
            if names.is_empty() {
                "none".to_string()
            } else {
                names.join(", ")
            }
        ))
    })
}

fn verdict_exit(v: Verdict) -> i32 {
    match v {
        Verdict::NormalCertified => 10,
        Verdict::AbnormalCertified => 11,
        Verdict::NotAbnormal => 12,
        Verdict::NotNormal => 13,
        Verdict::Ambiguous => 14,
    }
}

/// Split on commas that sit outside any parentheses.
fn split_top_level(s: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut depth = 0usize;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => {
                depth += 1;
                cur.push(ch);
            }
            ')' => {
                depth = depth.saturating_sub(1);
                cur.push(ch);
            }
            ',' if depth == 0 => {
                out.push(cur.trim().to_string());
                cur.clear();
            }
            _ => cur.push(ch),
        }
    }
    out.push(cur.trim().to_string());
    out
}

/// A declared field name, or comma-separated component expressions.
fn resolve_field(ls: &LoadedSystem, arg: &str) -> Result<VectorFieldExpr, Failure> {
    if let Some(f) = ls.field(arg) {
        return Ok(f.clone());
    }
    let n = ls.system.dim();
    let parts = split_top_level(arg);
    if parts.len() == n && !parts.iter().any(|p| p.is_empty()) {
        let comps = parts
            .iter()
            .map(|p| parse_scalar(p, &ls.system.coords))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|e| usage(format!("cannot parse components of {arg:?}: {e}")))?;
        return Ok(VectorFieldExpr::new(comps));
    }
    let mut names: Vec<&str> = ls.fields.keys().map(String::as_str).collect();
    names.sort_unstable();
    Err(usage(format!(
        "unknown field {arg:?} in system {}; declared fields: {}; or give {n} comma-separated component expressions",
        ls.def.name,
        names.join(", ")
    )))
}

fn field_strings(f: &VectorFieldExpr, sys: &ControlSystem) -> Vec<String> {
    f.components
        .iter()
        .map(|c| c.display(&sys.coords).to_string())
        .collect()
}

fn state_string(sys: &ControlSystem, q: &DVector<f64>) -> String {
    let parts: Vec<String> = (0..q.len())
        .map(|i| format!("{} = {}", sys.coords.name(i), q[i]))
        .collect();
    format!("({})", parts.join(", "))
}

fn write_csv(
    dir: &Path,
    name: &str,
    header: &str,
    rows: &[String],
) -> Result<PathBuf, Failure> {
    std::fs::create_dir_all(dir)
        .map_err(|e| numeric(format!("cannot create {}: {e}", dir.display())))?;
    let path = dir.join(name);
    let mut body = String::with_capacity(rows.len() * 40 + header.len() + 1);
    body.push_str(header);
    body.push('\n');
    for r in rows {
        body.push_str(r);
        body.push('\n');
    }
    std::fs::write(&path, body)
        .map_err(|e| numeric(format!("cannot write {}: {e}", path.display())))?;
    Ok(path)
}

fn print_json(doc: &Value) {
    match serde_json::to_string_pretty(doc) {
        Ok(s) => println!("{s}"),
        Err(_) => println!("{doc}"),
    }
}

// ---------------------------------------------------------------------------
// subcommands
// ---------------------------------------------------------------------------

fn cmd_bracket(
    g: &Global,
    system: &str,
    fields: &[String],
    table: Option<usize>,
) -> Result<i32, Failure> {
    let ls = load_system(system)?;
    if fields.len() != 2 {
        return Err(usage(format!(
            "bracket takes exactly two fields, got {}",
            fields.len()
        )));
    }
    let a = resolve_field(&ls, &fields[0])?;
    let b = resolve_field(&ls, &fields[1])?;
    let br = ne(lie_bracket(&a, &b))?;
    let comps = field_strings(&br, &ls.system);

    let mut table_rows: Vec<(String, Vec<String>)> = Vec::new();
    if let Some(depth) = table {
        if depth == 0 {
            return Err(usage("--table depth must be at least 1"));
        }
        let tbl = ne(BracketTable::build(&[a.clone(), b.clone()], depth, 200_000))?;
        for (i, gen) in tbl.generators.iter().enumerate() {
            table_rows.push(((i + 1).to_string(), field_strings(gen, &ls.system)));
        }
        for (word, expr) in &tbl.products {
            table_rows.push((word.clone(), field_strings(expr, &ls.system)));
        }
    }

    if g.json {
        let doc = json!({
            "cmd": "bracket",
            "system": ls.def.name,
            "fields": [fields[0], fields[1]],
            "components": comps,
            "table": table.map(|_| {
                table_rows.iter().map(|(w, cs)| json!({"word": w, "components": cs}))
                    .collect::<Vec<_>>()
            }),
        });
        print_json(&doc);
    } else {
        println!(
            "[{}, {}] = ({})",
            fields[0],
            fields[1],
            comps.join(", ")
        );
        if !table_rows.is_empty() {
            println!("nested brackets (1 = {}, 2 = {}):", fields[0], fields[1]);
            for (word, cs) in &table_rows {
                println!("  {word} = ({})", cs.join(", "));
            }
        }
    }
    Ok(0)
}

fn cmd_flow(g: &Global, system: &str, candidate: &str) -> Result<i32, Failure> {
    let ls = load_system(system)?;
    let nc = find_candidate(&ls, candidate)?;
    let o = int_opts(g);
    let p = ne(prepare(&ls.system, &nc.candidate, &o))?;
    let sys = &ls.system;
    let n = sys.dim();
    let d = sys.control_dim();

    let mut csv_path = None;
    if let Some(dir) = &g.out {
        let mut header = String::from("t");
        for i in 0..n {
            header.push(',');
            header.push_str(sys.coords.name(i));
        }
        for j in 0..d {
            header.push_str(&format!(",u{}", j + 1));
        }
        let mut rows = Vec::with_capacity(p.traj.grid.len());
        for (k, t) in p.traj.grid.iter().enumerate() {
            let q = &p.traj.states[k];
            let mut row = format!("{t}");
            for i in 0..n {
                row.push_str(&format!(",{}", q[i]));
            }
            let u = ne(p.controls_at(*t))?;
            for j in 0..d {
                row.push_str(&format!(",{}", u[j]));
            }
            rows.push(row);
        }
        let name = format!("{}-{}-flow.csv", ls.def.name, nc.def.name);
        csv_path = Some(write_csv(dir, &name, &header, &rows)?);
    }

    if g.json {
        let doc = json!({
            "cmd": "flow",
            "system": ls.def.name,
            "candidate": nc.def.name,
            "t0": p.traj.t0,
            "t1": p.traj.t1,
            "end": p.traj.end().as_slice(),
            "grid_len": p.traj.grid.len(),
            "csv": csv_path.as_ref().map(|p| p.display().to_string()),
        });
        print_json(&doc);
    } else {
        println!("system {} candidate {}", ls.def.name, nc.def.name);
        println!(
            "integrated over [{}, {}] with {} grid points",
            p.traj.t0,
            p.traj.t1,
            p.traj.grid.len()
        );
        println!("endpoint: {}", state_string(sys, p.traj.end()));
        if let Some(path) = &csv_path {
            println!("csv: {}", path.display());
        }
    }
    Ok(0)
}

/// One classification of one candidate by one method.
fn classify_by_method(
    g: &Global,
    sys: &ControlSystem,
    nc: &NamedCandidate,
    method: &str,
) -> Result<ClassifyReport, Failure> {
    let o = int_opts(g);
    match method {
        "flow" => ne(classify(
            sys,
            &nc.candidate,
            0,
            g.tol_rank,
            g.tol_membership,
            &o,
        )),
        "bracket" => {
            let p = ne(prepare(sys, &nc.candidate, &o))?;
            let x = VectorFieldExpr::linear_combination(&p.controls, &sys.frame);
            let abnormal = ne(abnormal_test_smooth(sys, &x, &p.traj, 0, 0, g.tol_rank))?;
            let normal = match prepare_unit_speed(sys, &nc.candidate, &o) {
                Ok(pu) => {
                    let xu = VectorFieldExpr::linear_combination(&pu.controls, &sys.frame);
                    ne(normal_test_smooth(
                        sys,
                        &xu,
                        &pu.controls,
                        &pu.traj,
                        0,
                        0,
                        g.tol_rank,
                        g.tol_membership,
                    ))?
                }
                Err(e) => {
                    let mut ev = Evidence::new(sys.dim(), g.tol_rank, g.tol_membership);
                    ev.notes
                        .push(format!("normality test needs a constant-speed candidate: {e}"));
                    TestReport {
                        verdict: Verdict::Ambiguous,
                        evidence: ev,
                    }
                }
            };
            Ok(ClassifyReport { abnormal, normal })
        }
        other => Err(usage(format!(
            "unknown method {other:?} (expected flow, bracket, or both)"
        ))),
    }
}

/// Grid times where the recorded span rank sits below its maximum.
fn rank_drop_times(ev: &Evidence) -> Vec<(f64, usize)> {
    let max = ev.ranks.iter().copied().max().unwrap_or(0);
    ev.times
        .iter()
        .zip(&ev.ranks)
        .filter(|(_, &r)| r < max)
        .map(|(t, &r)| (*t, r))
        .collect()
}

fn print_test_report(label: &str, rep: &TestReport) {
    println!("  {label}: {}", rep.summary());
    for (t, r) in rank_drop_times(&rep.evidence) {
        println!("    span rank drops to {r} at t = {t}");
    }
    for note in &rep.evidence.notes {
        println!("    note: {note}");
    }
}

fn cmd_classify(
    g: &Global,
    system: &str,
    candidate: Option<&str>,
    method: Option<&str>,
) -> Result<i32, Failure> {
    let ls = load_system(system)?;
    let picked: Vec<&NamedCandidate> = match candidate {
        Some(name) => vec![find_candidate(&ls, name)?],
        None => ls.candidates.iter().collect(),
    };
    if picked.is_empty() {
        return Err(usage(format!(
            "system {} declares no candidates",
            ls.def.name
        )));
    }

    let mut docs = Vec::new();
    let mut last_exit = 0;
    for nc in &picked {
        let requested = method
            .map(str::to_string)
            .or_else(|| nc.def.method.clone())
            .unwrap_or_else(|| "flow".to_string());
        let methods: Vec<&str> = match requested.as_str() {
            "both" => vec!["flow", "bracket"],
            "flow" => vec!["flow"],
            "bracket" => vec!["bracket"],
            other => {
                return Err(usage(format!(
                    "unknown method {other:?} (expected flow, bracket, or both)"
                )))
            }
        };
        let mut reports = Vec::new();
        for m in &methods {
            reports.push((*m, classify_by_method(g, &ls.system, nc, m)?));
        }
        let overall = if reports
            .iter()
            .all(|(_, r)| r.overall() == reports[0].1.overall())
        {
            reports[0].1.overall()
        } else {
            Verdict::Ambiguous
        };
        last_exit = verdict_exit(overall);

        if g.json {
            docs.push(json!({
                "system": ls.def.name,
                "candidate": nc.def.name,
                "methods": reports.iter().map(|(m, r)| json!({
                    "method": m,
                    "report": r.to_json(),
                })).collect::<Vec<_>>(),
                "overall": overall.code(),
                "exit": verdict_exit(overall),
            }));
        } else {
            println!(
                "system {} candidate {} (method {})",
                ls.def.name, nc.def.name, requested
            );
            for (m, r) in &reports {
                if reports.len() > 1 {
                    println!("  method {m}:");
                }
                print_test_report("abnormal", &r.abnormal);
                print_test_report("normal", &r.normal);
            }
            println!("  overall: {}", overall.code());
        }
    }

    if g.json {
        let doc = if docs.len() == 1 {
            json!({"cmd": "classify", "result": docs[0]})
        } else {
            json!({"cmd": "classify", "results": docs})
        };
        print_json(&doc);
    }
    Ok(if picked.len() == 1 { last_exit } else { 0 })
}

fn cmd_geodesic(
    g: &Global,
    system: &str,
    q0: &[f64],
    p0: &[f64],
    horizon: f64,
) -> Result<i32, Failure> {
    let ls = load_system(system)?;
    let sys = &ls.system;
    let n = sys.dim();
    if q0.len() != n || p0.len() != n {
        return Err(usage(format!(
            "system {} has {n} coordinates; --q0 gave {} and --p0 gave {}",
            ls.def.name,
            q0.len(),
            p0.len()
        )));
    }
    let q0 = DVector::from_column_slice(q0);
    let p0 = DVector::from_column_slice(p0);
    let o = int_opts(g);
    let geo = ne(integrate_normal_geodesic(sys, &q0, &p0, 0.0, horizon, &o))?;

    let mut csv_path = None;
    if let Some(dir) = &g.out {
        let d = sys.control_dim();
        let mut header = String::from("t");
        for i in 0..n {
            header.push(',');
            header.push_str(sys.coords.name(i));
        }
        for j in 0..d {
            header.push_str(&format!(",u{}", j + 1));
        }
        let mut rows = Vec::with_capacity(geo.traj.grid.len());
        for (k, t) in geo.traj.grid.iter().enumerate() {
            let q = &geo.traj.states[k];
            let u = &geo.controls[k];
            let mut row = format!("{t}");
            for i in 0..n {
                row.push_str(&format!(",{}", q[i]));
            }
            for j in 0..d {
                row.push_str(&format!(",{}", u[j]));
            }
            rows.push(row);
        }
        let name = format!("{}-geodesic.csv", ls.def.name);
        csv_path = Some(write_csv(dir, &name, &header, &rows)?);
    }

    let p_end = geo.momenta.last().ok_or_else(|| numeric("empty trajectory"))?;
    if g.json {
        let doc = json!({
            "cmd": "geodesic",
            "system": ls.def.name,
            "t1": horizon,
            "end": geo.traj.end().as_slice(),
            "end_momentum": p_end.as_slice(),
            "energy": geo.energy0,
            "energy_drift": geo.energy_drift,
            "grid_len": geo.traj.grid.len(),
            "csv": csv_path.as_ref().map(|p| p.display().to_string()),
        });
        print_json(&doc);
    } else {
        println!("system {}", ls.def.name);
        println!(
            "Hamiltonian trajectory over [0, {horizon}] with {} grid points",
            geo.traj.grid.len()
        );
        println!("endpoint: {}", state_string(sys, geo.traj.end()));
        println!("end momentum: {:?}", p_end.as_slice());
        println!(
            "energy: {} (relative drift {:.3e})",
            geo.energy0, geo.energy_drift
        );
        if let Some(path) = &csv_path {
            println!("csv: {}", path.display());
        }
    }
    Ok(0)
}

fn cmd_cone(
    g: &Global,
    system: &str,
    candidate: &str,
    t_end: Option<f64>,
    needles: usize,
) -> Result<i32, Failure> {
    let ls = load_system(system)?;
    let sys = &ls.system;
    let nc = find_candidate(&ls, candidate)?;
    let o = int_opts(g);
    let p = ne(prepare(sys, &nc.candidate, &o))?;
    let t_end = t_end.unwrap_or(p.traj.t1);
    if !(t_end > p.traj.t0 && t_end <= p.traj.t1) {
        return Err(usage(format!(
            "--t-end must lie in ({}, {}]",
            p.traj.t0, p.traj.t1
        )));
    }
    if needles == 0 {
        return Err(usage("--needles must be at least 1"));
    }

    let d = sys.control_dim();
    let span = t_end - p.traj.t0;
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut spec = Vec::with_capacity(needles);
    while spec.len() < needles {
        let t = rng.gen_range(p.traj.t0 + 0.02 * span..t_end - 0.02 * span);
        if p.breakpoints.iter().any(|b| (b - t).abs() < 1e-9) {
            continue;
        }
        spec.push(NeedleSpec {
            t,
            v: DVector::from_fn(d, |_, _| rng.gen_range(-2.0..2.0)),
            dt: rng.gen_range(0.0..0.1 * span),
        });
    }
    let cone = ne(needle_cone(sys, &p, t_end, &spec, &o))?;

    // Best effort: fit a covector to the candidate, carry (p0, -1) along the
    // cost-extended adjoint flow, and test it against the cone.
    let n = sys.dim();
    let mut separation: Option<(f64, crate::contact::SeparationReport)> = None;
    let mut sep_note = None;
    let fitted = match_initial_covector(sys, &p);
    match fitted {
        Ok((pc0, fit)) => {
            let attempt = (|| -> Result<(f64, crate::contact::SeparationReport), String> {
                let ext_f = extended_velocity(sys, &p.controls).map_err(|e| e.to_string())?;
                let ext_tdf = TimeDependentField::new(ext_f, p.breakpoints.clone());
                let mut q0e = DVector::zeros(n + 1);
                q0e.rows_mut(0, n).copy_from(&p.traj.states[0]);
                let ext_traj = integrate_flow(&ext_tdf, &q0e, p.traj.t0, p.traj.t1, &o)
                    .map_err(|e| e.to_string())?;
                let mut lam0 = DVector::zeros(n + 1);
                lam0.rows_mut(0, n).copy_from(&pc0);
                lam0[n] = -1.0;
                let ct = integrate_adjoint(&ext_tdf, &ext_traj, &lam0, p.traj.t0, &o)
                    .map_err(|e| e.to_string())?;
                let h = ProjectiveCovector::new(cone.base.clone(), ct.at(t_end))
                    .map_err(|e| e.to_string())?;
                let cert =
                    separation_certificate(&cone, &h, g.tol_membership).map_err(|e| e.to_string())?;
                Ok((fit, cert))
            })();
            match attempt {
                Ok(pair) => separation = Some(pair),
                Err(e) => sep_note = Some(format!("separation attempt failed: {e}")),
            }
        }
        Err(e) => sep_note = Some(format!("no covector fits the candidate: {e}")),
    }

    if g.json {
        let doc = json!({
            "cmd": "cone",
            "system": ls.def.name,
            "candidate": nc.def.name,
            "t_end": t_end,
            "base": cone.base.as_slice(),
            "rays": cone.rays.len(),
            "extended_dim": n + 1,
            "covector_fit": separation.as_ref().map(|(f, _)| *f),
            "separation": separation.as_ref().map(|(_, c)| c.to_json()),
            "note": sep_note,
        });
        print_json(&doc);
    } else {
        println!(
            "system {} candidate {}: {} needle rays at t = {t_end}",
            ls.def.name,
            nc.def.name,
            cone.rays.len()
        );
        println!("base (state, cost): {:?}", cone.base.as_slice());
        match (&separation, &sep_note) {
            (Some((fit, cert)), _) => {
                println!("fitted covector residual: {fit:.3e}");
                println!(
                    "separation: separates={} strict={} ray_in_plane={} max_violation={:.3e}",
                    cert.separates, cert.strict, cert.ray_in_plane, cert.max_violation
                );
            }
            (None, Some(note)) => println!("{note}"),
            (None, None) => {}
        }
    }
    Ok(0)
}

fn cmd_verify(
    g: &Global,
    system: Option<&str>,
    filter: Option<&str>,
) -> Result<i32, Failure> {
    let mut config_row: Option<(bool, String)> = None;
    let mut system_name: Option<String> = None;
    if let Some(arg) = system {
        match load_system_arg(arg) {
            Ok(ls) => {
                config_row = Some((
                    true,
                    format!(
                        "system {} ({} coordinates, {} frame fields, {} candidates)",
                        ls.def.name,
                        ls.system.dim(),
                        ls.system.control_dim(),
                        ls.candidates.len()
                    ),
                ));
                system_name = Some(ls.def.name.clone());
            }
            Err(e) => config_row = Some((false, e.to_string())),
        }
    }

    let mut rows: Vec<(String, bool, String)> = Vec::new();
    if let Some((ok, msg)) = &config_row {
        if !g.json {
            println!(
                "{} config-validates: {msg}",
                if *ok { "PASS" } else { "FAIL" }
            );
        }
        rows.push(("config-validates".to_string(), *ok, msg.clone()));
    }

    let config_failed = matches!(&config_row, Some((false, _)));
    if !config_failed {
        for check in selected(filter, system_name.as_deref()) {
            let r = run_one(check, g.seed);
            if !g.json {
                println!(
                    "{} {}: {}",
                    if r.passed { "PASS" } else { "FAIL" },
                    r.name,
                    r.details
                );
            }
            rows.push((r.name, r.passed, r.details));
        }
    }

    let failed = rows.iter().filter(|(_, ok, _)| !ok).count();
    if g.json {
        let doc = json!({
            "cmd": "verify",
            "seed": g.seed,
            "filter": filter,
            "system": system_name,
            "results": rows.iter().map(|(name, ok, details)| json!({
                "name": name, "passed": ok, "details": details,
            })).collect::<Vec<_>>(),
            "failed": failed,
        });
        print_json(&doc);
    } else {
        println!(
            "{} of {} checks passed (seed {})",
            rows.len() - failed,
            rows.len(),
            g.seed
        );
    }
    Ok(if failed > 0 { 3 } else { 0 })
}

/// Parse the command line, dispatch, and return the process exit code.
pub fn run() -> i32 {
    // Die quietly when output is piped into a pager that closes early,
    // instead of panicking on the broken pipe.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let g = &cli.g;
    let result = match &cli.cmd {
        Cmd::Bracket {
            system,
            fields,
            table,
        } => cmd_bracket(g, system, fields, *table),
        Cmd::Flow { system, candidate } => cmd_flow(g, system, candidate),
        Cmd::Classify {
            system,
            candidate,
            method,
        } => cmd_classify(g, system, candidate.as_deref(), method.as_deref()),
        Cmd::Geodesic {
            system,
            q0,
            p0,
            horizon,
        } => cmd_geodesic(g, system, q0, p0, *horizon),
        Cmd::Cone {
            system,
            candidate,
            t_end,
            needles,
        } => cmd_cone(g, system, candidate, *t_end, *needles),
        Cmd::Verify {
            system,
            all: _,
            filter,
        } => cmd_verify(g, system.as_deref(), filter.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(f) => {
            eprintln!("error: {}", f.msg);
            f.code
        }
    }
}
