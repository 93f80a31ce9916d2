use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Kind of a covariate column.
#[derive(Debug, Clone, PartialEq)]
pub enum ColumnKind {
    Real,
    Periodic { period: f64 },
    Categorical { levels: Vec<String> },
}

/// One named covariate column.
#[derive(Debug, Clone, PartialEq)]
pub struct Column {
    pub name: String,
    pub kind: ColumnKind,
}

impl Column {
    /// Width of this column after embedding.
    pub fn embedded_width(&self) -> usize {
        match &self.kind {
            ColumnKind::Real => 1,
            ColumnKind::Periodic { .. } => 2,
            ColumnKind::Categorical { levels } => levels.len() - 1,
        }
    }
}

/// Ordered, validated covariate schema.
#[derive(Debug, Clone, PartialEq)]
pub struct Schema {
    columns: Vec<Column>,
}

impl Schema {
    pub fn new(columns: Vec<Column>) -> Result<Self> {
        let mut seen = std::collections::HashSet::new();
        for col in &columns {
            if !seen.insert(col.name.clone()) {
                return Err(Error::InvalidInput(format!("duplicate column name '{}'", col.name)));
            }
            match &col.kind {
                ColumnKind::Periodic { period } => {
                    if !(period.is_finite() && *period > 0.0) {
                        return Err(Error::InvalidInput(format!(
                            "column '{}': period must be a positive real",
                            col.name
                        )));
                    }
                }
                ColumnKind::Categorical { levels } => {
                    if levels.len() < 2 {
                        return Err(Error::InvalidInput(format!(
                            "column '{}': categorical needs at least 2 levels",
                            col.name
                        )));
                    }
                    let mut lv = std::collections::HashSet::new();
                    for l in levels {
                        if !lv.insert(l) {
                            return Err(Error::InvalidInput(format!(
                                "column '{}': duplicate level '{l}'",
                                col.name
                            )));
                        }
                    }
                }
                ColumnKind::Real => {}
            }
        }
        Ok(Self { columns })
    }

    /// Convenience: all-real schema with names z1..zd.
    pub fn all_real(d: usize) -> Self {
        Self::new(
            (1..=d)
                .map(|i| Column { name: format!("z{i}"), kind: ColumnKind::Real })
                .collect(),
        )
        .unwrap()
    }

    pub fn columns(&self) -> &[Column] {
        &self.columns
    }

    /// Total embedded width d_z.
    pub fn embedded_width(&self) -> usize {
        self.columns.iter().map(Column::embedded_width).sum()
    }
}

/// A raw covariate cell before embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RawValue {
    Real(f64),
    Label(String),
}

impl RawValue {
    pub(crate) fn as_real(&self, row: usize, column: &str) -> Result<f64> {
        match self {
            RawValue::Real(v) if v.is_finite() => Ok(*v),
            RawValue::Real(_) => Err(Error::InvalidInput(format!(
                "non-finite covariate at row {row}, column '{column}'"
            ))),
            RawValue::Label(l) => Err(Error::SchemaViolation {
                row,
                column: column.to_string(),
                message: format!("expected a number, got label '{l}'"),
            }),
        }
    }

    pub(crate) fn as_label(&self, row: usize, column: &str) -> Result<&str> {
        match self {
            RawValue::Label(l) => Ok(l),
            RawValue::Real(v) => Err(Error::SchemaViolation {
                row,
                column: column.to_string(),
                message: format!("expected a label, got number {v}"),
            }),
        }
    }
}

// JSON wire form: {"name": ..., "kind": "real" | "periodic" | "categorical",
// "period"?: .., "levels"?: [..]}. Strict: unknown keys rejected.
#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ColumnWire {
    name: String,
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    period: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    levels: Option<Vec<String>>,
}

impl Serialize for Column {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let wire = match &self.kind {
            ColumnKind::Real => ColumnWire {
                name: self.name.clone(),
                kind: "real".into(),
                period: None,
                levels: None,
            },
            ColumnKind::Periodic { period } => ColumnWire {
                name: self.name.clone(),
                kind: "periodic".into(),
                period: Some(*period),
                levels: None,
            },
            ColumnKind::Categorical { levels } => ColumnWire {
                name: self.name.clone(),
                kind: "categorical".into(),
                period: None,
                levels: Some(levels.clone()),
            },
        };
        wire.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Column {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        use serde::de::Error as DeError;
        let wire = ColumnWire::deserialize(d)?;
        let kind = match wire.kind.as_str() {
            "real" => {
                if wire.period.is_some() || wire.levels.is_some() {
                    return Err(D::Error::custom("real column takes no 'period' or 'levels'"));
                }
                ColumnKind::Real
            }
            "periodic" => {
                let period = wire
                    .period
                    .ok_or_else(|| D::Error::custom("periodic column requires 'period'"))?;
                if wire.levels.is_some() {
                    return Err(D::Error::custom("periodic column takes no 'levels'"));
                }
                ColumnKind::Periodic { period }
            }
            "categorical" => {
                let levels = wire
                    .levels
                    .ok_or_else(|| D::Error::custom("categorical column requires 'levels'"))?;
                if wire.period.is_some() {
                    return Err(D::Error::custom("categorical column takes no 'period'"));
                }
                ColumnKind::Categorical { levels }
            }
            // The paper's distance-based embedding of complex types (images,
            // graphs) is out of scope; the schema rejects such kinds.
            other => return Err(D::Error::custom(format!("unsupported column kind '{other}'"))),
        };
        Ok(Column { name: wire.name, kind })
    }
}

impl Serialize for Schema {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.columns.serialize(s)
    }
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let columns = Vec::<Column>::deserialize(d)?;
        Schema::new(columns).map_err(serde::de::Error::custom)
    }
}
