//! Sample ingestion: typed covariate schemas, Euclidean embedding of
//! heterogeneous covariates, CSV loading and synthetic dataset generators.

mod generate;
mod schema;

pub use generate::{bench_gauss, generate, generate_spec, GeneratorSpec};
pub use schema::{Column, ColumnKind, RawValue, Schema};

use ndarray::{Array1, Array2};
use std::path::Path;

use crate::{Error, Result};

/// One raw covariate column (n rows).
pub type RawColumn = Vec<RawValue>;

/// Outcome matrix plus raw and embedded covariates.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// Outcomes, n × d_x.
    pub x: Array2<f64>,
    /// Raw covariate columns, one per schema column.
    pub z_raw: Vec<RawColumn>,
    /// Embedded covariates, n × d_z.
    pub z: Array2<f64>,
    pub schema: Schema,
    pub outcome_names: Vec<String>,
}

impl Dataset {
    /// Assemble a dataset from outcomes and raw covariate columns,
    /// embedding the covariates per the schema.
    pub fn new(
        x: Array2<f64>,
        z_raw: Vec<RawColumn>,
        schema: Schema,
        outcome_names: Vec<String>,
    ) -> Result<Self> {
        let n = x.nrows();
        if n < 2 {
            return Err(Error::InvalidInput("n >= 2 required".into()));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("non-finite outcome value".into()));
        }
        if z_raw.len() != schema.columns().len() {
            return Err(Error::shape("Dataset::new", schema.columns().len(), z_raw.len()));
        }
        for col in &z_raw {
            if col.len() != n {
                return Err(Error::shape("Dataset::new row count", n, col.len()));
            }
        }
        let z = embed_covariates(&schema, &z_raw)?;
        Ok(Self { x, z_raw, z, schema, outcome_names })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d_x(&self) -> usize {
        self.x.ncols()
    }

    pub fn d_z(&self) -> usize {
        self.z.ncols()
    }
}

/// Vertices of a regular simplex with `h` corners in `R^{h-1}`: unit edge
/// length, centroid at the origin, deterministic orientation following the
/// level order (the first level gets the negative first coordinate).
pub fn simplex_vertices(h: usize) -> Array2<f64> {
    assert!(h >= 2);
    let d = h - 1;
    let scale = 1.0 / std::f64::consts::SQRT_2;
    let mut out = Array2::zeros((h, d));
    // Helmert rows form an orthonormal basis of the zero-sum subspace of R^h;
    // vertex_i = scale * H (c - e_i) with c the centroid of the unit basis.
    for i in 0..h {
        for k in 1..h {
            let norm = 1.0 / ((k * (k + 1)) as f64).sqrt();
            let mut acc = 0.0;
            for j in 0..h {
                let hk = if j < k {
                    norm
                } else if j == k {
                    -(k as f64) * norm
                } else {
                    0.0
                };
                let c_minus_e = 1.0 / h as f64 - if j == i { 1.0 } else { 0.0 };
                acc += hk * c_minus_e;
            }
            out[(i, k - 1)] = scale * acc;
        }
    }
    out
}

/// Embed raw covariate columns into Euclidean space:
/// real → identity, periodic with period T → (cos(2πv/T), sin(2πv/T)),
/// categorical with h levels → regular simplex vertices in `R^{h-1}`.
pub fn embed_covariates(schema: &Schema, raw: &[RawColumn]) -> Result<Array2<f64>> {
    let cols = schema.columns();
    if raw.len() != cols.len() {
        return Err(Error::shape("embed_covariates", cols.len(), raw.len()));
    }
    let n = raw.first().map_or(0, |c| c.len());
    let d_z = schema.embedded_width();
    let mut out = Array2::zeros((n, d_z));
    let mut offset = 0;
    for (col, values) in cols.iter().zip(raw) {
        match &col.kind {
            ColumnKind::Real => {
                for (i, v) in values.iter().enumerate() {
                    out[(i, offset)] = v.as_real(i, &col.name)?;
                }
                offset += 1;
            }
            ColumnKind::Periodic { period } => {
                for (i, v) in values.iter().enumerate() {
                    let t = 2.0 * std::f64::consts::PI * v.as_real(i, &col.name)? / period;
                    out[(i, offset)] = t.cos();
                    out[(i, offset + 1)] = t.sin();
                }
                offset += 2;
            }
            ColumnKind::Categorical { levels } => {
                let verts = simplex_vertices(levels.len());
                for (i, v) in values.iter().enumerate() {
                    let label = v.as_label(i, &col.name)?;
                    let idx = levels.iter().position(|l| l == label).ok_or_else(|| {
                        Error::SchemaViolation {
                            row: i,
                            column: col.name.clone(),
                            message: format!("unknown categorical label '{label}'"),
                        }
                    })?;
                    for k in 0..levels.len() - 1 {
                        out[(i, offset + k)] = verts[(idx, k)];
                    }
                }
                offset += levels.len() - 1;
            }
        }
    }
    Ok(out)
}

/// Embed a single raw covariate row (one value per schema column).
pub fn embed_row(schema: &Schema, row: &[RawValue]) -> Result<Array1<f64>> {
    let cols: Vec<RawColumn> = row.iter().map(|v| vec![v.clone()]).collect();
    let m = embed_covariates(schema, &cols)?;
    Ok(m.row(0).to_owned())
}

/// Load a dataset from a CSV file. The header must contain every outcome
/// column and every schema column by name; extra columns are ignored.
pub fn load_csv(path: impl AsRef<Path>, schema: &Schema, outcome_names: &[String]) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new().has_headers(true).from_path(path.as_ref())?;
    let headers = reader.headers()?.clone();
    let find = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::InvalidInput(format!("missing column '{name}' in CSV header")))
    };
    let x_idx: Vec<usize> = outcome_names.iter().map(|n| find(n)).collect::<Result<_>>()?;
    let z_idx: Vec<usize> = schema.columns().iter().map(|c| find(&c.name)).collect::<Result<_>>()?;

    let mut x_rows: Vec<f64> = Vec::new();
    let mut z_raw: Vec<RawColumn> = vec![Vec::new(); schema.columns().len()];
    let mut n = 0usize;
    for (row_i, record) in reader.records().enumerate() {
        let record = record?;
        for (k, &ci) in x_idx.iter().enumerate() {
            let cell = record.get(ci).unwrap_or("");
            let v: f64 = cell.trim().parse().map_err(|_| Error::SchemaViolation {
                row: row_i,
                column: outcome_names[k].clone(),
                message: format!("unparseable outcome cell '{cell}'"),
            })?;
            if !v.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite outcome at row {row_i}, column '{}'",
                    outcome_names[k]
                )));
            }
            x_rows.push(v);
        }
        for (k, (&ci, col)) in z_idx.iter().zip(schema.columns()).enumerate() {
            let cell = record.get(ci).unwrap_or("").trim();
            if cell.is_empty() {
                return Err(Error::SchemaViolation {
                    row: row_i,
                    column: col.name.clone(),
                    message: "missing value".into(),
                });
            }
            let value = match &col.kind {
                ColumnKind::Real | ColumnKind::Periodic { .. } => {
                    let v: f64 = cell.parse().map_err(|_| Error::SchemaViolation {
                        row: row_i,
                        column: col.name.clone(),
                        message: format!("unparseable numeric cell '{cell}'"),
                    })?;
                    if !v.is_finite() {
                        return Err(Error::InvalidInput(format!(
                            "non-finite covariate at row {row_i}, column '{}'",
                            col.name
                        )));
                    }
                    RawValue::Real(v)
                }
                ColumnKind::Categorical { .. } => RawValue::Label(cell.to_string()),
            };
            z_raw[k].push(value);
        }
        n += 1;
    }
    if n < 2 {
        return Err(Error::InvalidInput("n >= 2 required".into()));
    }
    let x = Array2::from_shape_vec((n, outcome_names.len()), x_rows)
        .map_err(|e| Error::InvalidInput(e.to_string()))?;
    Dataset::new(x, z_raw, schema.clone(), outcome_names.to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use std::io::Write;

    fn schema_with(kind: ColumnKind) -> Schema {
        Schema::new(vec![Column { name: "z".into(), kind }]).unwrap()
    }

    #[test]
    fn periodic_embedding_quarter_turn() {
        // T=24, z=6 lands at angle π/2 → (0, 1).
        let schema = schema_with(ColumnKind::Periodic { period: 24.0 });
        let z = embed_covariates(&schema, &[vec![RawValue::Real(6.0)]]).unwrap();
        assert_abs_diff_eq!(z[(0, 0)], 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(z[(0, 1)], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn binary_categorical_is_centered_unit_pair() {
        let schema = schema_with(ColumnKind::Categorical { levels: vec!["A".into(), "B".into()] });
        let z = embed_covariates(
            &schema,
            &[vec![RawValue::Label("A".into()), RawValue::Label("B".into())]],
        )
        .unwrap();
        assert_abs_diff_eq!(z[(0, 0)], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(z[(1, 0)], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn three_level_simplex_is_equilateral_and_centered() {
        // Verify the pairwise-distance matrix by direct computation.
        let v = simplex_vertices(3);
        for i in 0..3 {
            for j in 0..3 {
                let d: f64 = (0..2).map(|k| (v[(i, k)] - v[(j, k)]).powi(2)).sum::<f64>().sqrt();
                let expect = if i == j { 0.0 } else { 1.0 };
                assert_abs_diff_eq!(d, expect, epsilon = 1e-12);
            }
        }
        for k in 0..2 {
            let c: f64 = (0..3).map(|i| v[(i, k)]).sum();
            assert_abs_diff_eq!(c, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn simplex_geometry_holds_for_larger_h() {
        for h in 2..=7 {
            let v = simplex_vertices(h);
            for i in 0..h {
                for j in (i + 1)..h {
                    let d: f64 = (0..h - 1)
                        .map(|k| (v[(i, k)] - v[(j, k)]).powi(2))
                        .sum::<f64>()
                        .sqrt();
                    assert_abs_diff_eq!(d, 1.0, epsilon = 1e-12);
                }
            }
            for k in 0..h - 1 {
                let c: f64 = (0..h).map(|i| v[(i, k)]).sum();
                assert_abs_diff_eq!(c, 0.0, epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn periodic_embedding_lands_on_unit_circle() {
        let schema = schema_with(ColumnKind::Periodic { period: 7.3 });
        let raw: RawColumn = (0..50).map(|i| RawValue::Real(i as f64 * 0.37 - 4.0)).collect();
        let z = embed_covariates(&schema, &[raw]).unwrap();
        for row in z.rows() {
            let norm = (row[0] * row[0] + row[1] * row[1]).sqrt();
            assert_abs_diff_eq!(norm, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn unknown_label_is_schema_violation() {
        let schema = schema_with(ColumnKind::Categorical { levels: vec!["A".into(), "B".into()] });
        let err = embed_covariates(&schema, &[vec![RawValue::Label("C".into())]]).unwrap_err();
        assert!(matches!(err, Error::SchemaViolation { row: 0, .. }));
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let schema = schema_with(ColumnKind::Real);
        let err = embed_covariates(&schema, &[vec![RawValue::Real(f64::NAN)]]).unwrap_err();
        assert!(matches!(err, Error::InvalidInput(_)));
    }

    fn write_temp_csv(content: &str) -> std::path::PathBuf {
        let mut path = std::env::temp_dir();
        path.push(format!("otbary-test-{}.csv", rand::random::<u64>()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(content.as_bytes()).unwrap();
        path
    }

    #[test]
    fn csv_roundtrip_shapes() {
        let path = write_temp_csv("x1,z\n1.0,0\n2.0,6\n3.0,12\n");
        let schema = schema_with(ColumnKind::Periodic { period: 24.0 });
        let ds = load_csv(&path, &schema, &["x1".to_string()]).unwrap();
        assert_eq!(ds.n(), 3);
        assert_eq!(ds.d_x(), 1);
        assert_eq!(ds.d_z(), 2);
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn csv_bad_label_reports_row() {
        let path = write_temp_csv("x1,z\n1.0,A\n2.0,Q\n3.0,B\n");
        let schema = schema_with(ColumnKind::Categorical { levels: vec!["A".into(), "B".into()] });
        let err = load_csv(&path, &schema, &["x1".to_string()]).unwrap_err();
        match err {
            Error::SchemaViolation { row, .. } => assert_eq!(row, 1),
            other => panic!("unexpected error {other}"),
        }
        std::fs::remove_file(path).ok();
    }

    #[test]
    fn csv_too_few_rows() {
        let path = write_temp_csv("x1,z\n1.0,0.5\n");
        let schema = schema_with(ColumnKind::Real);
        let err = load_csv(&path, &schema, &["x1".to_string()]).unwrap_err();
        assert!(err.to_string().contains("n >= 2"));
        std::fs::remove_file(path).ok();
    }
}
