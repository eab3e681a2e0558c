use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use npeb_core::discrimination::{
    build_callback_matrix, ingest_callback_csv, independence_test_table, report_from_solution,
    CallbackData, CallbackModel, IndependenceTestConfig,
};
use npeb_core::identification::{
    boundary_diagnostic, check_assumption_discrete, BoundaryDiagnostic, IdentificationReport,
};
use npeb_core::models::{build_f_discrete, cache, discrete_type_labels, ModelSpec};
use npeb_core::solver::{consistency_study, nested_grid_study, SolveResult};
use npeb_core::{normalize_counts, solve_fixed_point, CountVector, DensityMatrix, TypeLabel};
use serde::Serialize;
use serde_json::json;

use crate::config::RunConfig;
use crate::{CliError, Command, Common};

/// Everything shared by the subcommands once flags are merged into the file.
struct Run {
    name: &'static str,
    cfg: RunConfig,
    out: PathBuf,
    verbose: bool,
    threads: usize,
    started: SystemTime,
    clock: Instant,
    outputs: Vec<String>,
}

impl Run {
    fn new(name: &'static str, common: &Common) -> Result<Self, CliError> {
        let mut cfg = match &common.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(s) = common.seed {
            cfg.seed = s;
        }
        if let Some(p) = common.profile {
            cfg.profile = p.into();
        }
        if let Some(d) = &common.data {
            cfg.data = Some(d.clone());
        }
        if let Some(d) = &common.cache_dir {
            cfg.cache_dir = Some(d.clone());
        }
        let threads = common.threads.unwrap_or_else(|| {
            std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
        });
        if threads == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        // A second call in the same process fails harmlessly; the pool is
        // already sized.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global();
        std::fs::create_dir_all(&common.out_dir)?;
        Ok(Run {
            name,
            cfg,
            out: common.out_dir.clone(),
            verbose: common.verbose,
            threads,
            started: SystemTime::now(),
            clock: Instant::now(),
            outputs: Vec::new(),
        })
    }

    fn log(&self, msg: impl AsRef<str>) {
        if self.verbose {
            eprintln!("[{:8.2}s] {}", self.clock.elapsed().as_secs_f64(), msg.as_ref());
        }
    }

    fn file(&mut self, name: &str) -> Result<BufWriter<File>, CliError> {
        self.outputs.push(name.to_string());
        Ok(BufWriter::new(File::create(self.out.join(name))?))
    }

    fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<(), CliError> {
        let mut w = self.file(name)?;
        serde_json::to_writer_pretty(&mut w, value)?;
        w.write_all(b"\n")?;
        w.flush()?;
        Ok(())
    }

    /// Writes the manifest last so it lists every artifact.
    fn finish(mut self, status: &str, code: u8) -> Result<ExitCode, CliError> {
        let started = self.started.duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
        let manifest = json!({
            "tool": "npeb",
            "version": env!("CARGO_PKG_VERSION"),
            "git_describe": env!("NPEB_GIT_DESCRIBE"),
            "command": self.name,
            "status": status,
            "exit_code": code,
            "threads": self.threads,
            "started_unix": started,
            "runtime_seconds": self.clock.elapsed().as_secs_f64(),
            "outputs": self.outputs.clone(),
            "config": self.cfg,
        });
        self.write_json("manifest.json", &manifest)?;
        self.log(format!("{status}; artifacts in {}", self.out.display()));
        Ok(ExitCode::from(code))
    }
}

pub fn dispatch(cmd: Command) -> Result<ExitCode, CliError> {
    match cmd {
        Command::Solve { common, max_iterations } => {
            let mut run = Run::new("solve", &common)?;
            if let Some(m) = max_iterations {
                run.cfg.solve.max_iterations = m;
            }
            solve(run)
        }
        Command::Diagnose { common, result } => diagnose(Run::new("diagnose", &common)?, result),
        Command::Discrimination { common, model } => {
            let mut run = Run::new("discrimination", &common)?;
            if let Some(m) = model {
                run.cfg.callback_model = m.into();
            }
            discrimination(run)
        }
        Command::Independence { common, n_sim } => {
            let mut run = Run::new("independence", &common)?;
            if let Some(n) = n_sim {
                run.cfg.independence.n_sim = n;
            }
            independence(run)
        }
        Command::Refine { common } => refine(Run::new("refine", &common)?),
        Command::Consistency { common } => consistency(Run::new("consistency", &common)?),
    }
}

/// Reads an `outcome,count` CSV whose outcomes are `0..n` in any order,
/// each exactly once.
pub fn read_counts_csv(path: &Path) -> Result<CountVector, CliError> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.iter().map(str::trim).collect::<Vec<_>>() != ["outcome", "count"] {
        return Err(npeb_core::Error::Parse(format!("{}: expected header outcome,count", path.display())).into());
    }
    let mut pairs = Vec::new();
    for (line, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |k: usize| -> Result<u64, CliError> {
            rec.get(k)
                .map(str::trim)
                .and_then(|s| s.parse::<u64>().ok())
                .ok_or_else(|| {
                    npeb_core::Error::Parse(format!("{}: bad value on data line {}", path.display(), line + 1)).into()
                })
        };
        pairs.push((parse(0)? as usize, parse(1)?));
    }
    let mut counts = vec![None; pairs.len()];
    for (o, c) in pairs {
        match counts.get_mut(o) {
            Some(slot @ None) => *slot = Some(c),
            _ => {
                return Err(npeb_core::Error::Parse(format!(
                    "{}: outcome {o} duplicated or out of range",
                    path.display()
                ))
                .into())
            }
        }
    }
    Ok(CountVector::new(counts.into_iter().map(|c| c.unwrap_or(0)).collect())?)
}

fn counts(cfg: &RunConfig) -> Result<CountVector, CliError> {
    match (&cfg.data, &cfg.counts) {
        (Some(p), _) => read_counts_csv(p),
        (None, Some(c)) => Ok(CountVector::new(c.clone())?),
        (None, None) => Err(CliError::Config("no data: set `data` or `counts`, or pass --data".into())),
    }
}

fn callback_data(cfg: &RunConfig) -> Result<CallbackData, CliError> {
    let p = cfg.data.as_ref().ok_or_else(|| CliError::Config("no callback data: pass --data".into()))?;
    Ok(ingest_callback_csv(p)?)
}

fn model_and_grid(cfg: &RunConfig) -> Result<(ModelSpec, npeb_core::models::Grid1D), CliError> {
    let model = cfg.model.clone().ok_or_else(|| CliError::Config("missing [model] section".into()))?;
    let grid = cfg.grid.as_ref().ok_or_else(|| CliError::Config("missing [grid] section".into()))?.build()?;
    Ok((model, grid))
}

/// Builds a discrete model, going through the cache when one is configured.
fn build_model(run: &Run, model: &ModelSpec, grid: &npeb_core::models::Grid1D) -> Result<DensityMatrix, CliError> {
    let Some(dir) = &run.cfg.cache_dir else {
        return Ok(build_f_discrete(model, grid)?);
    };
    let key = json!({ "model": model, "grid": grid.points() });
    if let Some(f) = cache::load(dir, &key)? {
        run.log(format!("loaded cached matrix {}", cache::cache_key(&key)?));
        return Ok(f.with_type_labels(discrete_type_labels(model, grid)?)?);
    }
    let f = build_f_discrete(model, grid)?;
    let man = cache::store(dir, &key, &f)?;
    run.log(format!("cached matrix {}", man.key));
    Ok(f)
}

fn label_string(l: &TypeLabel) -> String {
    match l {
        TypeLabel::Index(j) => j.to_string(),
        TypeLabel::Scalar(x) => format!("{x}"),
        TypeLabel::Pair { a, b, .. } => format!("({a},{b})"),
        TypeLabel::Table { a, b, sample, .. } => format!("({a},{b})#{sample}"),
    }
}

fn write_support_csv(run: &mut Run, f: &DensityMatrix, r: &SolveResult) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(run.file("report.csv")?);
    w.write_record(["index", "label", "weight"])?;
    for &j in &r.support {
        let label = f.type_labels().get(j).map(label_string).unwrap_or_else(|| j.to_string());
        w.write_record([j.to_string(), label, format!("{:.10}", r.pi_hat.weights()[j])])?;
    }
    w.flush()?;
    Ok(())
}

fn solve(mut run: Run) -> Result<ExitCode, CliError> {
    let b = counts(&run.cfg)?;
    let (model, grid) = model_and_grid(&run.cfg)?;
    let f = build_model(&run, &model, &grid)?;
    run.log(format!("model {} x {}", f.n_outcomes(), f.n_types()));
    let r = solve_fixed_point(&f, &b, &run.cfg.solve, None)?;
    run.log(format!("{} iterations, support {}, converged {}", r.iterations, r.support.len(), r.converged));
    let labels: Vec<&TypeLabel> = r.support.iter().filter_map(|&j| f.type_labels().get(j)).collect();
    run.write_json("result.json", &json!({ "result": r, "support_labels": labels }))?;
    write_support_csv(&mut run, &f, &r)?;
    if run.cfg.solve.record_trace {
        let w = run.file("trace.csv")?;
        r.write_trace(w)?;
    }
    if r.converged {
        run.finish("converged", 0)
    } else {
        run.finish("not converged", 2)
    }
}

#[derive(Serialize)]
struct DiagnoseOutput {
    identification: IdentificationReport,
    boundary: Option<BoundaryDiagnostic>,
}

fn diagnose(mut run: Run, result: Option<PathBuf>) -> Result<ExitCode, CliError> {
    let b = counts(&run.cfg)?;
    let (model, grid) = model_and_grid(&run.cfg)?;
    let f = build_model(&run, &model, &grid)?;
    let solved: Option<SolveResult> = match result {
        Some(p) => {
            let v: serde_json::Value = serde_json::from_slice(&std::fs::read(&p)?)?;
            let r = v.get("result").cloned().unwrap_or(v);
            Some(serde_json::from_value(r)?)
        }
        None => None,
    };
    let ident = check_assumption_discrete(&f, &b, &run.cfg.identification, solved.as_ref().map(|r| r.support.as_slice()))?;
    let boundary = match &solved {
        Some(r) => Some(boundary_diagnostic(&normalize_counts(&b)?, &f, &r.pi_hat)?),
        None => None,
    };
    println!("regime            {:?}", ident.regime);
    println!("rank_ok           {}", ident.rank_ok);
    println!("method            {:?}", ident.method);
    println!("subset size       {}", ident.subset_size);
    println!("checked subsets   {}", ident.checked_subsets);
    println!("min rel. sigma    {:.3e}", ident.min_singular_value_seen);
    if let Some(bd) = &boundary {
        println!("KL(beta||tau)     {:.6}", bd.kl);
        println!("zero outcomes     {}", bd.zero_outcomes);
    }
    for w in &ident.warnings {
        println!("warning: {w}");
    }
    let mut w = csv::Writer::from_writer(run.file("report.csv")?);
    w.write_record(["field", "value"])?;
    w.write_record(["regime", &format!("{:?}", ident.regime)])?;
    w.write_record(["rank_ok", &ident.rank_ok.to_string()])?;
    w.write_record(["method", &format!("{:?}", ident.method)])?;
    w.write_record(["subset_size", &ident.subset_size.to_string()])?;
    w.write_record(["checked_subsets", &ident.checked_subsets.to_string()])?;
    w.write_record(["min_singular_value_seen", &format!("{:e}", ident.min_singular_value_seen)])?;
    w.flush()?;
    drop(w);
    run.write_json("result.json", &DiagnoseOutput { identification: ident, boundary })?;
    run.finish("diagnosed", 0)
}

fn discrimination(mut run: Run) -> Result<ExitCode, CliError> {
    let data = callback_data(&run.cfg)?;
    let model = run.cfg.callback_model;
    let grid = run.cfg.profile.grid()?;
    let sampler = run.cfg.profile.sampler(run.cfg.seed);
    let spec = match model {
        CallbackModel::Independent => ModelSpec::IndependentBivariate { shots: data.shots },
        CallbackModel::Frechet => ModelSpec::FrechetBivariate { shots: data.shots, sampler: sampler.clone() },
    };
    let f = if run.cfg.cache_dir.is_some() {
        build_model(&run, &spec, &grid)?
    } else {
        build_callback_matrix(data.shots, model, &grid, &sampler)?
    };
    run.log(format!("model {} x {}", f.n_outcomes(), f.n_types()));
    let b = data.count_vector()?;
    let r = solve_fixed_point(&f, &b, &run.cfg.solve, None)?;
    run.log(format!("{} iterations, support {}", r.iterations, r.support.len()));
    let report = report_from_solution(&data, model, &f, &r, &run.cfg.identification)?;
    let w = run.file("report.csv")?;
    report.write_csv(w)?;
    if run.cfg.solve.record_trace {
        let w = run.file("trace.csv")?;
        r.write_trace(w)?;
    }
    let sidecar = json!({
        "report": report,
        "profile": run.cfg.profile,
        "seed": run.cfg.seed,
        "sampler": sampler,
        "solve": run.cfg.solve,
    });
    run.write_json("result.json", &sidecar)?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    if report.converged {
        run.finish("converged", 0)
    } else {
        run.finish("not converged", 2)
    }
}

fn independence(mut run: Run) -> Result<ExitCode, CliError> {
    let data = callback_data(&run.cfg)?;
    let sec = &run.cfg.independence;
    let cfg = IndependenceTestConfig {
        n_sim: sec.n_sim,
        seed: run.cfg.seed,
        burn_in: sec.burn_in,
        thin: sec.thin,
        move_kind: sec.move_kind,
    };
    let rep = independence_test_table(&data.as_table()?, &cfg)?;
    println!("p-value {:.3e} ({} of {} simulated tables at most as probable)", rep.p_value, rep.n_extreme, cfg.n_sim);
    run.write_json("result.json", &rep)?;
    run.finish("tested", 0)
}

fn refine(mut run: Run) -> Result<ExitCode, CliError> {
    let b = counts(&run.cfg)?;
    let model = run.cfg.model.clone().ok_or_else(|| CliError::Config("missing [model] section".into()))?;
    let grids = run.cfg.refine.grids.iter().map(|g| g.build()).collect::<npeb_core::Result<Vec<_>>>()?;
    let rep = nested_grid_study(&grids, |g| build_f_discrete(&model, g), &b, &run.cfg.solve)?;
    let mut w = csv::Writer::from_writer(run.file("report.csv")?);
    w.write_record([
        "n_types", "log_likelihood", "kl", "support_size", "ibar", "converged", "iterations", "wasserstein_to_previous",
    ])?;
    for l in &rep.levels {
        w.write_record([
            l.n_types.to_string(),
            format!("{:.12}", l.log_likelihood),
            format!("{:.12}", l.kl),
            l.support_size.to_string(),
            l.ibar.to_string(),
            l.converged.to_string(),
            l.iterations.to_string(),
            l.wasserstein_to_previous.map(|x| format!("{x:.12}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    drop(w);
    run.write_json("result.json", &rep)?;
    let ok = rep.levels.iter().all(|l| l.converged);
    run.finish(if ok { "converged" } else { "not converged" }, if ok { 0 } else { 2 })
}

fn consistency(mut run: Run) -> Result<ExitCode, CliError> {
    let rep = consistency_study(&run.cfg.consistency)?;
    let mut w = csv::Writer::from_writer(run.file("report.csv")?);
    w.write_record(["sample_size", "seed", "kl_proxy", "support_size", "max_atom_distance", "converged", "iterations"])?;
    for r in &rep.rows {
        w.write_record([
            r.sample_size.to_string(),
            r.seed.to_string(),
            format!("{:.12}", r.kl_proxy),
            r.support_size.to_string(),
            format!("{:.12}", r.max_atom_distance),
            r.converged.to_string(),
            r.iterations.to_string(),
        ])?;
    }
    w.flush()?;
    drop(w);
    run.write_json("result.json", &rep)?;
    let ok = rep.rows.iter().all(|r| r.converged);
    run.finish(if ok { "converged" } else { "not converged" }, if ok { 0 } else { 2 })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_csv_any_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        std::fs::write(&p, "outcome,count\n2,5\n0,1\n1,0\n").unwrap();
        assert_eq!(read_counts_csv(&p).unwrap().counts(), &[1, 0, 5]);
    }

    #[test]
    fn counts_csv_rejects_bad_input() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.csv");
        for bad in ["outcome,count\n0,1\n0,2\n", "outcome,count\n0,-1\n", "o,c\n0,1\n", "outcome,count\n0,x\n", "outcome,count\n3,1\n"] {
            std::fs::write(&p, bad).unwrap();
            assert!(read_counts_csv(&p).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn labels_render() {
        assert_eq!(label_string(&TypeLabel::Scalar(0.5)), "0.5");
        assert_eq!(label_string(&TypeLabel::Pair { a: 0.1, b: 0.2, ia: 0, ib: 1 }), "(0.1,0.2)");
    }
}
