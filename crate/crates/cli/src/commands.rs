//! Command bodies. Every command is a pure function of (config, input
//! files, seed) to output bytes, timing aside.

use std::path::{Path, PathBuf};

use ndarray::{Array1, Array2};

use otbary::data::{ColumnKind, RawValue, Schema};
use otbary::otdensity::{
    bayes_online, bayes_posterior, estimate_density, kernel_prior, solve_ot, ConditionalDensity,
    OtMode, ThetaGrid,
};
use otbary::serialize::derive_seed;
use otbary::solver::{run_successive, RunResult};
use otbary::transport::{BarycenterModel, Provenance};
use otbary::{Error, Result};

use crate::config::RunConfig;
use crate::grid::{cross_product, parse_f64_list, parse_grid_spec, parse_usize_list, GridAxis};

pub fn write_csv<P: AsRef<Path>>(
    path: P,
    header: &[String],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path.as_ref())?;
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Parse a comma-separated covariate row against a schema.
pub fn parse_z_row(schema: &Schema, text: &str) -> Result<Vec<RawValue>> {
    let parts: Vec<&str> = text.split(',').map(|s| s.trim()).collect();
    let cols = schema.columns();
    if parts.len() != cols.len() {
        return Err(Error::Config(format!(
            "expected {} covariate values, got {}",
            cols.len(),
            parts.len()
        )));
    }
    let mut out = Vec::with_capacity(cols.len());
    for (part, col) in parts.iter().zip(cols) {
        match &col.kind {
            ColumnKind::Real | ColumnKind::Periodic { .. } => {
                let v: f64 = part
                    .parse()
                    .map_err(|_| Error::Config(format!("column '{}': bad number '{part}'", col.name)))?;
                out.push(RawValue::Real(v));
            }
            ColumnKind::Categorical { .. } => out.push(RawValue::Label(part.to_string())),
        }
    }
    Ok(out)
}

/// Grid axes must name real schema columns, in schema order.
fn grid_axes_for_schema(schema: &Schema, axes: &[GridAxis]) -> Result<()> {
    let cols = schema.columns();
    if axes.len() != cols.len() {
        return Err(Error::Config(format!(
            "grid must cover every covariate column ({} axes for {} columns)",
            axes.len(),
            cols.len()
        )));
    }
    for (axis, col) in axes.iter().zip(cols) {
        if axis.name != col.name {
            return Err(Error::Config(format!(
                "grid axis '{}' does not match schema column '{}'",
                axis.name, col.name
            )));
        }
        if !matches!(col.kind, ColumnKind::Real) {
            return Err(Error::Config(format!(
                "grid axis '{}': only real columns can be gridded",
                axis.name
            )));
        }
    }
    Ok(())
}

/// Quadrature weights of a cross-product grid: products of per-axis
/// trapezoid weights.
fn grid_weights(axes: &[GridAxis]) -> Array1<f64> {
    let axis_weights: Vec<Vec<f64>> = axes
        .iter()
        .map(|a| {
            let k = a.values.len();
            let h = if k > 1 { a.values[1] - a.values[0] } else { 1.0 };
            (0..k)
                .map(|i| if i == 0 || i + 1 == k { 0.5 * h } else { h })
                .collect()
        })
        .collect();
    let total: usize = axis_weights.iter().map(|w| w.len()).product();
    let mut out = Array1::ones(total);
    let mut stride = total;
    for w in &axis_weights {
        stride /= w.len();
        for (i, val) in out.iter_mut().enumerate() {
            *val *= w[(i / stride) % w.len()];
        }
    }
    out
}

fn read_matrix_csv(path: &Path) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let width = reader.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0usize;
    for (i, record) in reader.records().enumerate() {
        let record = record?;
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell.trim().parse().map_err(|_| Error::SchemaViolation {
                row: i,
                column: format!("col{j}"),
                message: format!("unparseable numeric cell '{cell}'"),
            })?;
            data.push(v);
        }
        rows += 1;
    }
    Array2::from_shape_vec((rows, width), data).map_err(|e| Error::InvalidInput(e.to_string()))
}

fn training_inversion_residual_ratio(
    model: &BarycenterModel,
    x: &Array2<f64>,
    z: &Array2<f64>,
) -> Result<f64> {
    let mut cur = model.y_final.clone();
    for stage in model.stages.iter().rev() {
        cur = stage.invert(&cur.view(), &z.view())?;
    }
    let var_x = otbary::stats::variance_trace(&x.view());
    let resid: f64 = cur
        .iter()
        .zip(x.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.nrows() as f64;
    Ok(resid / var_x.max(1e-300))
}

fn write_progress_csv(path: &Path, results: &[RunResult]) -> Result<()> {
    let header: Vec<String> = ["run", "iter", "stage", "objective", "max_sigma", "lambda", "eta", "mean_grad_sq"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    let rows = results.iter().enumerate().flat_map(|(run, res)| {
        res.records.iter().map(move |r| {
            vec![
                run.to_string(),
                r.iter.to_string(),
                r.stage.to_string(),
                fmt(r.objective),
                fmt(r.max_sigma),
                fmt(r.lambda),
                fmt(r.eta),
                fmt(r.mean_grad_sq),
            ]
        })
    });
    write_csv(path, &header, rows)
}

pub fn cmd_fit(config: &RunConfig, out: &Path) -> Result<i32> {
    if config.stages.is_empty() {
        return Err(Error::Config("fit requires at least one entry in 'stages'".into()));
    }
    let dataset = config.load_dataset()?;
    let provenance = Provenance { config_hash: config.hash()?, seed: config.seed };
    let (model, results) = run_successive(&dataset, &config.stages, &config.solver, provenance)?;
    model.save(out.join("model.json"))?;
    write_progress_csv(&out.join("progress.csv"), &results)?;

    let sigma_star = config.solver.nu / (dataset.n() as f64).sqrt();
    let residual_ratio = training_inversion_residual_ratio(&model, &dataset.x, &dataset.z)?;
    let runs: Vec<serde_json::Value> = results
        .iter()
        .enumerate()
        .map(|(i, r)| {
            let last = r.records.last();
            serde_json::json!({
                "run": i,
                "converged": r.converged,
                "iterations": r.records.len(),
                "stages": r.stage_maps.len(),
                "final_max_sigma": last.map(|l| l.max_sigma),
                "final_lambda": last.map(|l| l.lambda),
                "final_mean_grad_sq": last.map(|l| l.mean_grad_sq),
            })
        })
        .collect();
    let converged = results.iter().all(|r| r.converged);
    let report = serde_json::json!({
        "converged": converged,
        "sigma_star": sigma_star,
        "alpha_term": config.solver.alpha_term,
        "inversion_residual_ratio": residual_ratio,
        "n": dataset.n(),
        "d_x": dataset.d_x(),
        "d_z": dataset.d_z(),
        "runs": runs,
    });
    std::fs::write(out.join("report.json"), serde_json::to_string_pretty(&report)?)?;
    Ok(if converged { 0 } else { 2 })
}

pub fn cmd_synth(config: &RunConfig, out: &Path, output: &str) -> Result<i32> {
    let ds = config.load_dataset()?;
    let mut header: Vec<String> = ds.outcome_names.clone();
    header.extend(ds.schema.columns().iter().map(|c| c.name.clone()));
    let rows = (0..ds.n()).map(|i| {
        let mut row: Vec<String> = (0..ds.d_x()).map(|k| fmt(ds.x[(i, k)])).collect();
        for col in &ds.z_raw {
            row.push(match &col[i] {
                RawValue::Real(v) => fmt(*v),
                RawValue::Label(l) => l.clone(),
            });
        }
        row
    });
    write_csv(out.join(output), &header, rows)?;
    Ok(0)
}

pub fn cmd_simulate(
    model_path: &Path,
    z_text: &str,
    subset: Option<&str>,
    out: &Path,
    output: &str,
) -> Result<i32> {
    let model = BarycenterModel::load(model_path)?;
    let z = parse_z_row(&model.schema, z_text)?;
    let subset_idx = subset.map(parse_usize_list).transpose()?;
    let sim = model.simulate_conditional(&z, subset_idx.as_deref())?;
    if sim.extrapolation {
        eprintln!("warning: target covariates lie outside the training kernel support");
    }
    let header: Vec<String> = (1..=model.d_x()).map(|k| format!("x{k}")).collect();
    let rows = sim
        .samples
        .rows()
        .into_iter()
        .map(|r| r.iter().map(|v| fmt(*v)).collect::<Vec<_>>());
    write_csv(out.join(output), &header, rows)?;
    Ok(0)
}

pub fn cmd_quantiles(
    model_path: &Path,
    grid_spec: &str,
    probs_text: &str,
    out: &Path,
    output: &str,
) -> Result<i32> {
    let model = BarycenterModel::load(model_path)?;
    let axes = parse_grid_spec(grid_spec)?;
    grid_axes_for_schema(&model.schema, &axes)?;
    let probs = parse_f64_list(probs_text)?;
    let rows = cross_product(&axes);
    let z_grid: Vec<Vec<RawValue>> = rows
        .iter()
        .map(|r| r.iter().map(|v| RawValue::Real(*v)).collect())
        .collect();
    let curves = model.conditional_quantiles(&z_grid, &probs)?;
    let mut header: Vec<String> = axes.iter().map(|a| a.name.clone()).collect();
    header.extend(["prob".to_string(), "value".to_string(), "monotonic".to_string()]);
    let mut out_rows = Vec::new();
    for (zi, zrow) in rows.iter().enumerate() {
        for (qi, q) in probs.iter().enumerate() {
            let mut row: Vec<String> = zrow.iter().map(|v| fmt(*v)).collect();
            row.push(fmt(*q));
            row.push(fmt(curves.values[(zi, qi)]));
            row.push(curves.monotonic[zi].to_string());
            out_rows.push(row);
        }
    }
    write_csv(out.join(output), &header, out_rows)?;
    Ok(0)
}

pub fn cmd_density(config: &RunConfig, grid_spec: &str, out: &Path, output: &str) -> Result<i32> {
    let ds = config.load_dataset()?;
    let axes = parse_grid_spec(grid_spec)?;
    if axes.len() != ds.d_x() {
        return Err(Error::Config(format!(
            "density grid must cover every outcome dimension ({} axes for d_x = {})",
            axes.len(),
            ds.d_x()
        )));
    }
    let rows = cross_product(&axes);
    let mut probes = Array2::zeros((rows.len(), ds.d_x()));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            probes[(i, j)] = *v;
        }
    }
    let est = estimate_density(
        &ds.x.view(),
        config.density.reference,
        &config.density.g,
        &config.solver,
        Some(&probes),
    )?;
    let mut header: Vec<String> = axes.iter().map(|a| a.name.clone()).collect();
    header.extend(["density".to_string(), "flagged".to_string()]);
    let out_rows = est.probe_densities().iter().map(|p| {
        let mut row: Vec<String> = p.x.iter().map(|v| fmt(*v)).collect();
        row.push(fmt(p.density));
        row.push(p.flagged.to_string());
        row
    });
    write_csv(out.join(output), &header, out_rows)?;
    Ok(if est.converged() { 0 } else { 2 })
}

pub fn cmd_ot(
    config: &RunConfig,
    source: &Path,
    target: &Path,
    mode: OtMode,
    out: &Path,
) -> Result<i32> {
    let src = read_matrix_csv(source)?;
    let tgt = read_matrix_csv(target)?;
    let res = solve_ot(&src.view(), &tgt.view(), &config.density.g, &config.solver, mode)?;
    let d = src.ncols();
    let mut header: Vec<String> = (1..=d).map(|k| format!("x{k}")).collect();
    header.extend((1..=d).map(|k| format!("mapped{k}")));
    let map_rows = (0..src.nrows()).map(|i| {
        let mut row: Vec<String> = (0..d).map(|k| fmt(src[(i, k)])).collect();
        row.extend((0..d).map(|k| fmt(res.map_on_source[(i, k)])));
        row
    });
    write_csv(out.join("ot_map.csv"), &header, map_rows)?;
    let inv_rows = (0..tgt.nrows()).map(|i| {
        let mut row: Vec<String> = (0..d).map(|k| fmt(tgt[(i, k)])).collect();
        row.extend((0..d).map(|k| fmt(res.inverse_on_target[(i, k)])));
        row
    });
    write_csv(out.join("ot_inverse.csv"), &header, inv_rows)?;
    Ok(if res.converged { 0 } else { 2 })
}

fn check_schema_match(model: &BarycenterModel, schema: &Schema, force: bool) -> Result<()> {
    if model.schema != *schema && !force {
        return Err(Error::Model(
            "model schema does not match the config dataset schema (use --force to override)".into(),
        ));
    }
    Ok(())
}

pub fn cmd_bayes(
    config: &RunConfig,
    model_path: &Path,
    x_obs_text: &str,
    grid_spec: &str,
    force: bool,
    out: &Path,
    output: &str,
) -> Result<i32> {
    let model = BarycenterModel::load(model_path)?;
    let ds = config.load_dataset()?;
    check_schema_match(&model, &ds.schema, force)?;
    let x_obs = Array1::from_vec(parse_f64_list(x_obs_text)?);
    let axes = parse_grid_spec(grid_spec)?;
    grid_axes_for_schema(&model.schema, &axes)?;
    let rows = cross_product(&axes);
    let mut points = Array2::zeros((rows.len(), axes.len()));
    for (i, r) in rows.iter().enumerate() {
        for (j, v) in r.iter().enumerate() {
            points[(i, j)] = *v;
        }
    }
    let grid = ThetaGrid { points, weights: grid_weights(&axes) };
    let cond = ConditionalDensity::fit(&model, &config.density.g, &config.solver)?;
    let prior = kernel_prior(&ds.z.view(), None, 40, derive_seed("bayes-prior", config.seed))?;
    let post = bayes_posterior(&cond, &x_obs.view(), &prior, &grid)?;
    if !post.normalized {
        eprintln!("warning: posterior vanished on the whole grid; writing unnormalized values");
    }
    let mut header: Vec<String> = axes.iter().map(|a| a.name.clone()).collect();
    header.push("posterior".to_string());
    let out_rows = rows.iter().zip(post.values.iter()).map(|(r, p)| {
        let mut row: Vec<String> = r.iter().map(|v| fmt(*v)).collect();
        row.push(fmt(*p));
        row
    });
    write_csv(out.join(output), &header, out_rows)?;
    Ok(0)
}

pub fn cmd_bayes_online(
    config: &RunConfig,
    model_path: &Path,
    theta_col: &str,
    grid_spec: &str,
    force: bool,
    out: &Path,
    output: &str,
) -> Result<i32> {
    let model = BarycenterModel::load(model_path)?;
    let series = config.load_dataset()?;
    check_schema_match(&model, &series.schema, force)?;
    let theta_idx = model
        .schema
        .columns()
        .iter()
        .position(|c| c.name == theta_col)
        .ok_or_else(|| Error::Config(format!("unknown parameter column '{theta_col}'")))?;
    let axes = parse_grid_spec(grid_spec)?;
    if axes.len() != 1 || axes[0].name != theta_col {
        return Err(Error::Config("bayes-online grid must cover exactly the parameter column".into()));
    }
    let rows = cross_product(&axes);
    let mut points = Array2::zeros((rows.len(), 1));
    for (i, r) in rows.iter().enumerate() {
        points[(i, 0)] = r[0];
    }
    let grid = ThetaGrid { points, weights: grid_weights(&axes) };
    let obs_known: Vec<Vec<RawValue>> = (0..series.n())
        .map(|i| {
            series
                .z_raw
                .iter()
                .enumerate()
                .filter(|(c, _)| *c != theta_idx)
                .map(|(_, col)| col[i].clone())
                .collect()
        })
        .collect();
    let prior = Array1::from_elem(grid.len(), 1.0);
    let cond = ConditionalDensity::fit(&model, &config.density.g, &config.solver)?;
    let steps = bayes_online(
        &cond,
        &series.x.view(),
        &obs_known,
        &[theta_idx],
        &grid,
        &prior.view(),
    )?;
    let header: Vec<String> = vec!["step".into(), theta_col.to_string(), "posterior".into()];
    let mut out_rows = Vec::new();
    for (t, values) in steps.iter().enumerate() {
        for (g, v) in values.iter().enumerate() {
            out_rows.push(vec![t.to_string(), fmt(grid.points[(g, 0)]), fmt(*v)]);
        }
    }
    write_csv(out.join(output), &header, out_rows)?;
    Ok(0)
}

pub fn cmd_bench(config: &RunConfig, out: &Path, output: &str) -> Result<i32> {
    let mut bench_cfg = config.bench.clone().unwrap_or_default();
    if config.bench.is_none() {
        bench_cfg.seed = config.seed;
    }
    let report = otbary::bench::run_bench(&bench_cfg)?;
    std::fs::write(out.join(output), serde_json::to_string_pretty(&report)?)?;
    Ok(0)
}

#[allow(dead_code)]
pub fn out_path(out: &Path, name: &str) -> PathBuf {
    out.join(name)
}
