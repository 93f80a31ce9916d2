//! Grid and list argument parsing: `name=min:max:steps[,name=...]` specs
//! expand to the cross product of uniform 1D grids.

use otbary::{Error, Result};

#[derive(Debug, Clone)]
pub struct GridAxis {
    pub name: String,
    pub values: Vec<f64>,
}

/// Parse `name=min:max:steps[,name=min:max:steps...]`.
pub fn parse_grid_spec(spec: &str) -> Result<Vec<GridAxis>> {
    let mut axes = Vec::new();
    for part in spec.split(',') {
        let (name, range) = part
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("grid axis '{part}' must be name=min:max:steps")))?;
        let fields: Vec<&str> = range.split(':').collect();
        if fields.len() != 3 {
            return Err(Error::Config(format!("grid axis '{part}' must be name=min:max:steps")));
        }
        let min: f64 = fields[0]
            .parse()
            .map_err(|_| Error::Config(format!("bad grid minimum '{}'", fields[0])))?;
        let max: f64 = fields[1]
            .parse()
            .map_err(|_| Error::Config(format!("bad grid maximum '{}'", fields[1])))?;
        let steps: usize = fields[2]
            .parse()
            .map_err(|_| Error::Config(format!("bad grid step count '{}'", fields[2])))?;
        if steps < 2 || !(min < max) {
            return Err(Error::Config(format!("grid axis '{part}': need min < max and steps >= 2")));
        }
        let h = (max - min) / (steps - 1) as f64;
        let values = (0..steps).map(|i| min + h * i as f64).collect();
        axes.push(GridAxis { name: name.trim().to_string(), values });
    }
    Ok(axes)
}

/// Cross product of the axes, row-major with the last axis fastest.
pub fn cross_product(axes: &[GridAxis]) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = vec![Vec::new()];
    for axis in axes {
        let mut next = Vec::with_capacity(rows.len() * axis.values.len());
        for row in &rows {
            for v in &axis.values {
                let mut r = row.clone();
                r.push(*v);
                next.push(r);
            }
        }
        rows = next;
    }
    rows
}

pub fn parse_f64_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad numeric value '{s}'")))
        })
        .collect()
}

pub fn parse_usize_list(text: &str) -> Result<Vec<usize>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("bad index '{s}'")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_spec_round_trip() {
        let axes = parse_grid_spec("z1=-0.5:0.5:3,z2=0:1:2").unwrap();
        assert_eq!(axes.len(), 2);
        assert_eq!(axes[0].values, vec![-0.5, 0.0, 0.5]);
        let rows = cross_product(&axes);
        assert_eq!(rows.len(), 6);
        assert_eq!(rows[0], vec![-0.5, 0.0]);
        assert_eq!(rows[1], vec![-0.5, 1.0]);
        assert_eq!(rows[5], vec![0.5, 1.0]);
    }

    #[test]
    fn bad_specs_error() {
        assert!(parse_grid_spec("z1=0:1").is_err());
        assert!(parse_grid_spec("z1=1:0:5").is_err());
        assert!(parse_grid_spec("nope").is_err());
    }
}
