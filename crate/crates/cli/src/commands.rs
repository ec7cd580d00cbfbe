use std::collections::BTreeMap;
use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;
use serde_json::{json, Value};

use plusdc::design::{self, Triangle};
use plusdc::estimate::{self, Existence, FitConfig};
use plusdc::experiments::{self, ConsistencySpec, CvSpec};
use plusdc::randgraph::{self, ExperimentDesign, HsbmSpec, NurhmSpec};
use plusdc::{io, model, rng, Dataset, Error, Hypergraph, Params};

use crate::manifest::{self, Run};
use crate::{
    CheckArgs, ConsistencyArgs, CvArgs, DataArgs, FitArgs, FitOptions, GraphModel, GraphStatsArgs, PredictArgs,
    SelectArgs, SimulateDataArgs, SimulateGraphArgs, TopologyArgs,
};

/// Successful command results that still carry a status code.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    Nonexistent,
    Unconverged,
}

impl Outcome {
    pub fn code(self) -> u8 {
        match self {
            Self::Ok => 0,
            Self::Nonexistent => 2,
            Self::Unconverged => 3,
        }
    }
}

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Lib(Error),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Self::Lib(Error::Numeric(_)) => 70,
            _ => 64,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Usage(msg) => f.write_str(msg),
            Self::Lib(e) => write!(f, "{e}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::Lib(e.into())
    }
}

impl From<csv::Error> for Failure {
    fn from(e: csv::Error) -> Self {
        Self::Lib(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Self::Lib(e.into())
    }
}

type CmdResult = Result<Outcome, Failure>;

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Failure::Usage(format!("cannot create {}: {e}", path.display())))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), Failure> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value)?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    Ok(())
}

fn out_dir(dir: &Path) -> Result<(), Failure> {
    std::fs::create_dir_all(dir).map_err(|e| Failure::Usage(format!("cannot create {}: {e}", dir.display())))
}

fn load_data(run: &mut Run, args: &DataArgs) -> Result<Dataset, Failure> {
    let bytes = run.read_input(&args.data)?;
    Ok(io::read_comparisons(bytes.as_slice(), args.n, args.d)?)
}

fn fit_config(opts: &FitOptions) -> Result<FitConfig, Failure> {
    let cfg = FitConfig { epsilon: opts.epsilon, max_outer: opts.max_outer, existence: opts.existence, ..Default::default() };
    cfg.validate()?;
    Ok(cfg)
}

fn status_name(status: Existence) -> Value {
    serde_json::to_value(status).unwrap_or(Value::Null)
}

fn one_based(t: &Triangle) -> [usize; 3] {
    [t[0] + 1, t[1] + 1, t[2] + 1]
}

pub fn fit(args: FitArgs) -> CmdResult {
    let mut run = Run::new("fit");
    let data = load_data(&mut run, &args.data)?;
    let cfg = fit_config(&args.fit)?;
    info!("fitting n = {}, d = {}, N = {}", data.n(), data.d(), data.len());
    let result = estimate::fit(&data, &cfg)?;
    // Criteria are only defined at a converged optimum.
    let ic = estimate::aic_bic(&result, &data).ok();
    let meta = json!({
        "n": data.n(),
        "d": data.d(),
        "num_comparisons": data.len(),
        "converged": result.converged,
        "outer_iters": result.outer_iters,
        "loglik": result.loglik,
        "loglik_norm": result.loglik / data.len() as f64,
        "aic_norm": ic.map(|c| c.aic_norm),
        "bic_norm": ic.map(|c| c.bic_norm),
        "p": data.n() - 1 + data.d(),
        "gradient_norm": result.gradient_norm,
        "existence": {
            "mode": args.fit.existence,
            "status": status_name(result.existence.status),
            "reason": result.existence.reason,
        },
        "mm_steps": result.mm_steps,
        "newton_steps": result.newton_steps,
        "joint_steps": result.joint_steps,
        "mm_monotonicity_violations": result.mm_monotonicity_violations,
    });
    let mut w = create(&args.out)?;
    io::write_params(&mut w, &result.theta, meta)?;
    writeln!(w)?;
    w.flush()?;
    run.output(&args.out);
    if let Some(trace) = &args.trace {
        let mut t = csv::Writer::from_writer(create(trace)?);
        t.write_record(["iter", "loglik_norm"])?;
        for (i, l) in result.loglik_trace.iter().enumerate() {
            t.write_record([i.to_string(), l.to_string()])?;
        }
        t.flush()?;
        run.output(trace);
    }
    let outcome = if result.existence.status == Existence::Nonexistent {
        warn!("the MLE does not exist: {}", result.existence.reason.as_deref().unwrap_or("no reason given"));
        Outcome::Nonexistent
    } else if !result.converged {
        warn!("no convergence after {} outer iterations", result.outer_iters);
        Outcome::Unconverged
    } else {
        Outcome::Ok
    };
    run.finish(&manifest::beside(&args.out), outcome)
}

pub fn predict(args: PredictArgs) -> CmdResult {
    let mut run = Run::new("predict");
    let params = io::read_params(run.read_input(&args.params)?.as_slice())?.params();
    let bytes = run.read_input(&args.data)?;
    let (data, ids) = io::read_comparisons_with_ids(bytes.as_slice(), Some(params.n()), Some(params.d()))?;
    let sink: Box<dyn Write> = match &args.out {
        Some(path) => Box::new(create(path)?),
        None => Box::new(std::io::stdout().lock()),
    };
    let mut w = csv::Writer::from_writer(sink);
    let mut header = vec!["comparison_id", "object_id", "win_prob"];
    if args.ranking_prob {
        header.push("ranking_prob");
    }
    w.write_record(&header)?;
    for (c, id) in data.comparisons().iter().zip(&ids) {
        let win = model::win_probabilities(&params, c)?;
        let ranking = match (args.ranking_prob, c.ranking()) {
            (true, Some(pi)) => model::outcome_prob(&params, c, &pi)?.to_string(),
            _ => String::new(),
        };
        for (&obj, p) in c.edge().iter().zip(win) {
            let mut rec = vec![id.clone(), (obj + 1).to_string(), p.to_string()];
            if args.ranking_prob {
                rec.push(ranking.clone());
            }
            w.write_record(&rec)?;
        }
    }
    w.flush()?;
    drop(w);
    match &args.out {
        Some(path) => {
            run.output(path);
            run.finish(&manifest::beside(path), Outcome::Ok)
        }
        None => Ok(Outcome::Ok),
    }
}

/// A value that may be withheld, with the reason when it is.
fn maybe<T: Serialize>(r: plusdc::Result<T>) -> (Value, Value) {
    match r {
        Ok(v) => (json!(v), Value::Null),
        Err(e) => (Value::Null, json!(e.to_string())),
    }
}

fn topology(g: &Hypergraph, args: &TopologyArgs) -> BTreeMap<&'static str, Value> {
    let mut out = BTreeMap::new();
    let (cheeger, cheeger_reason) =
        if args.cheeger { maybe(g.cheeger_constant()) } else { (Value::Null, json!("not requested")) };
    out.insert("cheeger", cheeger);
    out.insert("cheeger_reason", cheeger_reason);
    let (diameter, diameter_reason) = match args.lambda {
        Some(l) => maybe(g.weakly_admissible_diameter(l)),
        None => (Value::Null, json!("not requested")),
    };
    out.insert("lambda", json!(args.lambda));
    out.insert("diameter", diameter);
    out.insert("diameter_reason", diameter_reason);
    out
}

fn parse_triangles(spec: &str, n: usize) -> Result<Vec<Triangle>, Failure> {
    spec.split(',')
        .map(|t| {
            let mut v = t
                .split('-')
                .map(|s| match s.trim().parse::<usize>() {
                    Ok(k) if (1..=n).contains(&k) => Ok(k - 1),
                    _ => Err(Failure::Usage(format!("bad vertex '{s}' in triangle '{t}' (1-based ids up to {n})"))),
                })
                .collect::<Result<Vec<_>, _>>()?;
            v.sort_unstable();
            v.dedup();
            <[usize; 3]>::try_from(v).map_err(|_| Failure::Usage(format!("triangle '{t}' needs three distinct vertices")))
        })
        .collect()
}

pub fn check(args: CheckArgs) -> CmdResult {
    let mut run = Run::new("check");
    let data = load_data(&mut run, &args.data)?;
    let g = data.graph();
    let dm = design::assemble(&data)?;
    let ident = design::identifiability_check(&dm);
    let mut report = serde_json::Map::new();
    report.insert("n".into(), json!(data.n()));
    report.insert("d".into(), json!(data.d()));
    report.insert("num_comparisons".into(), json!(data.len()));
    report.insert("num_pairs".into(), json!(dm.num_pairs()));
    report.insert("connected".into(), json!(g.is_connected()));
    report.insert("identifiable".into(), json!(ident.identifiable));
    report.insert("rank".into(), json!(ident.rank));
    report.insert("required_rank".into(), json!(ident.required_rank));
    report.insert("rank_method".into(), json!(ident.method));

    let curl = match design::curl_sufficient_check(&dm, g) {
        Ok(c) => json!({
            "status": c.status,
            "det": c.det,
            "triangles": c.triangles.iter().map(one_based).collect::<Vec<_>>(),
            "triangles_examined": c.triangles_examined,
            "reason": c.reason,
        }),
        Err(e) => json!({ "status": Value::Null, "det": Value::Null, "triangles": [], "triangles_examined": 0, "reason": e.to_string() }),
    };
    report.insert("curl_pass".into(), json!(curl["status"] == "pass"));
    report.insert("curl".into(), curl);

    let requested = match &args.triangles {
        Some(spec) => {
            let tris = parse_triangles(spec, data.n())?;
            let t = design::curl_matrix(&dm, &tris)?;
            let det = if t.is_square() { Some(t.determinant()) } else { None };
            json!({
                "triangles": tris.iter().map(one_based).collect::<Vec<_>>(),
                "matrix": t.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>(),
                "det": det,
            })
        }
        None => Value::Null,
    };
    report.insert("triangle_curl".into(), requested);

    match design::consistency_diagnostics(&dm) {
        Ok(diag) => {
            report.insert("sigma_min_K".into(), json!(diag.sigma_min_k));
            report.insert("incoherence_cos".into(), json!(diag.incoherence_cos));
            report.insert("diagnostics_reason".into(), Value::Null);
        }
        Err(e) => {
            report.insert("sigma_min_K".into(), Value::Null);
            report.insert("incoherence_cos".into(), Value::Null);
            report.insert("diagnostics_reason".into(), json!(e.to_string()));
        }
    }
    let existence = if args.lp {
        let lp = estimate::check_mle_existence(&data);
        json!({ "status": status_name(lp.status), "reason": lp.reason })
    } else {
        Value::Null
    };
    report.insert("existence".into(), existence);
    for (k, v) in topology(g, &args.topology) {
        report.insert(k.into(), v);
    }

    match &args.out {
        Some(path) => {
            write_json(path, &report)?;
            run.output(path);
            run.finish(&manifest::beside(path), Outcome::Ok)
        }
        None => {
            print_json(&report)?;
            Ok(Outcome::Ok)
        }
    }
}

pub fn graph_stats(args: GraphStatsArgs) -> CmdResult {
    let mut run = Run::new("graph-stats");
    let g = match (&args.source.graph, &args.source.data) {
        (Some(path), _) => io::read_graph(run.read_input(path)?.as_slice(), args.n)?,
        (None, Some(path)) => io::read_comparisons(run.read_input(path)?.as_slice(), args.n, None)?.graph().clone(),
        (None, None) => return Err(Failure::Usage("pass --graph or --data".into())),
    };
    let degrees = g.degrees();
    let mut sizes: BTreeMap<usize, usize> = BTreeMap::new();
    for e in g.edges() {
        *sizes.entry(e.len()).or_default() += 1;
    }
    let mut report = serde_json::Map::new();
    report.insert("n".into(), json!(g.n()));
    report.insert("num_edges".into(), json!(g.num_edges()));
    report.insert("max_edge_size".into(), json!(g.max_edge_size()));
    report.insert("total_incidence".into(), json!(g.total_incidence()));
    report.insert("connected".into(), json!(g.is_connected()));
    report.insert(
        "edge_sizes".into(),
        json!(sizes.iter().map(|(m, c)| json!({ "size": m, "count": c })).collect::<Vec<_>>()),
    );
    report.insert(
        "degree".into(),
        json!({
            "min": degrees.iter().min(),
            "max": degrees.iter().max(),
            "mean": if degrees.is_empty() { 0.0 } else { degrees.iter().sum::<usize>() as f64 / degrees.len() as f64 },
        }),
    );
    for (k, v) in topology(&g, &args.topology) {
        report.insert(k.into(), v);
    }
    match &args.out {
        Some(path) => {
            write_json(path, &report)?;
            run.output(path);
            run.finish(&manifest::beside(path), Outcome::Ok)
        }
        None => {
            print_json(&report)?;
            Ok(Outcome::Ok)
        }
    }
}

pub fn simulate_graph(args: SimulateGraphArgs) -> CmdResult {
    let mut run = Run::new("simulate-graph");
    run.seed("graph", args.seed);
    let fixed = |kind: ExperimentDesign| -> Result<(Hypergraph, Value), Failure> {
        let edges = args.edges.unwrap_or_else(|| kind.edge_count(args.n));
        let g = randgraph::sample_experiment_design(kind, args.n, edges, &mut rng::from_seed(args.seed))?;
        let mut spec = json!({ "model": kind, "n": args.n, "edges": edges });
        if kind == ExperimentDesign::Hsbm2 {
            spec["weights"] = json!(ExperimentDesign::hsbm2_weights(args.n));
            spec["log"] = json!("natural");
        }
        Ok((g, spec))
    };
    let (g, spec) = match args.model {
        GraphModel::Nurhm6 => fixed(ExperimentDesign::Nurhm6)?,
        GraphModel::Hsbm2 => fixed(ExperimentDesign::Hsbm2)?,
        GraphModel::Nurhm => {
            let spec = NurhmSpec { n: args.n, edge_probs: args.probs.clone(), seed: args.seed };
            (randgraph::sample_nurhm(&spec)?, json!({ "model": "nurhm", "spec": spec }))
        }
        GraphModel::Hsbm => {
            let spec = HsbmSpec {
                n: args.n,
                edge_size: args.edge_size.ok_or_else(|| Failure::Usage("hsbm needs --edge-size".into()))?,
                block_sizes: args.blocks.clone(),
                within: args.within.clone(),
                cross: args.cross.ok_or_else(|| Failure::Usage("hsbm needs --cross".into()))?,
                seed: args.seed,
            };
            (randgraph::sample_hsbm(&spec)?, json!({ "model": "hsbm", "spec": spec }))
        }
    };
    let mut w = create(&args.out)?;
    io::write_graph(&mut w, &g)?;
    w.flush()?;
    run.output(&args.out);
    let meta_path = with_suffix(&args.out, ".meta.json");
    let meta = json!({
        "spec": spec,
        "seed": args.seed,
        "rng": rng::RNG_NAME,
        "n": g.n(),
        "realized_edges": g.num_edges(),
        "connected": g.is_connected(),
    });
    write_json(&meta_path, &meta)?;
    run.output(&meta_path);
    run.finish(&manifest::beside(&args.out), Outcome::Ok)
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(suffix);
    path.with_file_name(name)
}

pub fn simulate_data(args: SimulateDataArgs) -> CmdResult {
    let mut run = Run::new("simulate-data");
    run.seed("data", args.seed);
    let g = io::read_graph(run.read_input(&args.graph)?.as_slice(), args.n)?;
    if !(args.u_half_width >= 0.0 && args.u_half_width.is_finite()) {
        return Err(Failure::Usage("--u-half-width must be a finite non-negative number".into()));
    }
    let mut r = rng::from_seed(args.seed);
    let u = experiments::draw_utilities(&mut r, g.n(), args.u_half_width);
    let truth = Params::new(u, args.v.clone());
    let data = experiments::simulate_comparisons(&g, &truth, &mut r)?;
    let mut w = create(&args.out)?;
    io::write_comparisons(&mut w, &data)?;
    w.flush()?;
    run.output(&args.out);
    let truth_path = args.truth.clone().unwrap_or_else(|| with_suffix(&args.out, ".truth.json"));
    let mut t = create(&truth_path)?;
    io::write_params(&mut t, &truth, json!({ "seed": args.seed, "rng": rng::RNG_NAME, "u_half_width": args.u_half_width }))?;
    writeln!(t)?;
    t.flush()?;
    run.output(&truth_path);
    run.finish(&manifest::beside(&args.out), Outcome::Ok)
}

pub fn consistency(args: ConsistencyArgs) -> CmdResult {
    let mut run = Run::new("experiment consistency");
    run.seed("experiment", args.seed);
    let spec = ConsistencySpec {
        v_star: args.v_star.clone(),
        u_half_width: args.u_half_width,
        ..ConsistencySpec::new(args.design, args.n.clone(), args.reps, args.seed)
    };
    info!("consistency study: {} sizes x {} replicates", spec.n_list.len(), spec.reps);
    let report = experiments::run_consistency(&spec, &FitConfig::default())?;
    out_dir(&args.out)?;
    let csv_path = args.out.join("consistency.csv");
    let mut w = create(&csv_path)?;
    experiments::write_consistency_csv(&mut w, &report)?;
    w.flush()?;
    run.output(&csv_path);
    let json_path = args.out.join("consistency.json");
    write_json(&json_path, &report)?;
    run.output(&json_path);
    run.finish(&args.out.join("manifest.json"), Outcome::Ok)
}

pub fn cv(args: CvArgs) -> CmdResult {
    let mut run = Run::new("cv");
    run.seed("folds", args.seed);
    let data = load_data(&mut run, &args.data)?;
    let spec = CvSpec::new(args.k, args.modes.clone(), args.seed);
    let report = experiments::run_kfold_cv(&data, &spec, &FitConfig::default())?;
    let summary = json!({ "spec": report.spec, "attempts": report.attempts, "summary": report.summary });
    print_json(&summary)?;
    match &args.out {
        Some(dir) => {
            out_dir(dir)?;
            let csv_path = dir.join("cv.csv");
            let mut w = create(&csv_path)?;
            experiments::write_cv_csv(&mut w, &report)?;
            w.flush()?;
            run.output(&csv_path);
            let json_path = dir.join("cv.json");
            write_json(&json_path, &summary)?;
            run.output(&json_path);
            run.finish(&dir.join("manifest.json"), Outcome::Ok)
        }
        None => Ok(Outcome::Ok),
    }
}

fn parse_subsets(spec: &str, d: usize) -> Result<Vec<Vec<usize>>, Failure> {
    if spec.trim() == "all" {
        return Ok(experiments::all_subsets(d));
    }
    spec.split(';')
        .map(|s| {
            let s = s.trim();
            if s == "none" {
                return Ok(Vec::new());
            }
            s.split(',')
                .map(|k| match k.trim().parse::<usize>() {
                    Ok(k) if (1..=d).contains(&k) => Ok(k - 1),
                    _ => Err(Failure::Usage(format!("bad covariate index '{k}' (1-based, at most {d})"))),
                })
                .collect()
        })
        .collect()
}

pub fn select(args: SelectArgs) -> CmdResult {
    let mut run = Run::new("select");
    let data = load_data(&mut run, &args.data)?;
    let subsets = parse_subsets(&args.subsets, data.d())?;
    let rows = experiments::model_selection(&data, &subsets, &FitConfig::default())?;
    print_json(&rows)?;
    match &args.out {
        Some(dir) => {
            out_dir(dir)?;
            let csv_path = dir.join("selection.csv");
            let mut w = csv::Writer::from_writer(create(&csv_path)?);
            w.write_record(["subset", "p", "loglik_norm", "aic_norm", "bic_norm", "converged", "existence", "rank", "flag"])?;
            let opt = |x: Option<f64>| x.map_or(String::new(), |v| v.to_string());
            for r in &rows {
                let subset: Vec<String> = r.subset.iter().map(|k| k.to_string()).collect();
                let existence = status_name(r.existence);
                w.write_record([
                    subset.join(";"),
                    r.p.to_string(),
                    r.loglik_norm.to_string(),
                    opt(r.aic_norm),
                    opt(r.bic_norm),
                    r.converged.to_string(),
                    existence.as_str().unwrap_or_default().to_string(),
                    r.rank.map_or(String::new(), |k| k.to_string()),
                    r.flag.clone().unwrap_or_default(),
                ])?;
            }
            w.flush()?;
            run.output(&csv_path);
            let json_path = dir.join("selection.json");
            write_json(&json_path, &rows)?;
            run.output(&json_path);
            run.finish(&dir.join("manifest.json"), Outcome::Ok)
        }
        None => Ok(Outcome::Ok),
    }
}
