//! Individual conditional expectation curves and their partial-dependence
//! average.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use rayon::prelude::*;
use thiserror::Error;

use crate::data::{DataError, Dataset, FeatureGrid, GridStrategy};
use crate::predictor::{PredictError, Predictor};

#[derive(Debug, Error)]
pub enum IceError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("grid was built for `{grid}`, not `{feature}`")]
    GridFeature { grid: String, feature: String },
    #[error("prediction failed at grid point {index} (value {value}): {source}")]
    Predict {
        index: usize,
        value: f64,
        #[source]
        source: PredictError,
    },
    #[error("predictor returned a non-finite value for observation {id} at {value}")]
    NonFinite { id: usize, value: f64 },
    #[error("no observations selected")]
    Empty,
    #[error("observation {0} appears more than once")]
    DuplicateId(usize),
    #[error("bundle file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Predictions for one observation along the shared grid.
#[derive(Debug, Clone, PartialEq)]
pub struct IceCurve {
    pub id: usize,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IceBundle {
    grid: FeatureGrid,
    curves: Vec<IceCurve>,
}

impl IceBundle {
    pub fn new(grid: FeatureGrid, curves: Vec<IceCurve>) -> Result<Self, IceError> {
        let mut seen = BTreeSet::new();
        for c in &curves {
            if !seen.insert(c.id) {
                return Err(IceError::DuplicateId(c.id));
            }
            if c.values.len() != grid.len() {
                return Err(IceError::Format(format!(
                    "curve {} has {} values for a {}-point grid",
                    c.id,
                    c.values.len(),
                    grid.len()
                )));
            }
        }
        Ok(IceBundle { grid, curves })
    }

    pub fn feature(&self) -> &str {
        self.grid.feature()
    }

    pub fn grid(&self) -> &FeatureGrid {
        &self.grid
    }

    pub fn curves(&self) -> &[IceCurve] {
        &self.curves
    }

    pub fn ids(&self) -> Vec<usize> {
        self.curves.iter().map(|c| c.id).collect()
    }

    pub fn len(&self) -> usize {
        self.curves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.curves.is_empty()
    }

    /// Writes `id,grid_value,prediction`, one line per curve and grid point.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "id,grid_value,prediction")?;
        for c in &self.curves {
            for (x, y) in self.grid.values().iter().zip(&c.values) {
                writeln!(w, "{},{x},{y}", c.id)?;
            }
        }
        w.flush()
    }

    /// Reads the format produced by [`IceBundle::write_csv`].
    pub fn read_csv<R: BufRead>(reader: R, feature: &str) -> Result<Self, IceError> {
        let mut lines = reader.lines();
        let header = lines.next().ok_or_else(|| IceError::Format("empty file".into()))??;
        if header.trim() != "id,grid_value,prediction" {
            return Err(IceError::Format(format!("unexpected header `{header}`")));
        }
        let mut curves: Vec<IceCurve> = Vec::new();
        let mut xs: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in lines.enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let bad = || IceError::Format(format!("line {}: `{line}`", lineno + 2));
            let mut parts = line.split(',');
            let id: usize = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
            let x: f64 = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
            let y: f64 = parts.next().and_then(|s| s.trim().parse().ok()).ok_or_else(bad)?;
            if parts.next().is_some() {
                return Err(bad());
            }
            match curves.last_mut() {
                Some(c) if c.id == id => {
                    c.values.push(y);
                    xs.last_mut().expect("parallel").push(x);
                }
                _ => {
                    curves.push(IceCurve { id, values: vec![y] });
                    xs.push(vec![x]);
                }
            }
        }
        let first = xs.first().ok_or(IceError::Empty)?.clone();
        if xs.iter().any(|g| *g != first) {
            return Err(IceError::Format("curves do not share one grid".into()));
        }
        let grid = FeatureGrid::new(feature, first, GridStrategy::Uniform)?;
        IceBundle::new(grid, curves)
    }
}

/// Sweeps `feature` over `grid` for each selected row, holding the row's
/// other features fixed. One prediction batch per grid point.
pub fn ice_curves<P: Predictor + ?Sized>(
    predictor: &P,
    dataset: &Dataset,
    feature: &str,
    grid: &FeatureGrid,
    rows: &[usize],
) -> Result<IceBundle, IceError> {
    if grid.feature() != feature {
        return Err(IceError::GridFeature { grid: grid.feature().to_string(), feature: feature.to_string() });
    }
    dataset.numeric_column(feature)?;
    let col = dataset.schema().feature_index(feature).expect("checked above");
    if rows.is_empty() {
        return Err(IceError::Empty);
    }
    let mut seen = BTreeSet::new();
    for &r in rows {
        if r >= dataset.len() {
            return Err(DataError::RowOutOfRange { index: r, n: dataset.len() }.into());
        }
        if !seen.insert(r) {
            return Err(IceError::DuplicateId(r));
        }
    }
    let base = dataset.feature_rows(rows);
    let per_point: Vec<Vec<f64>> = grid
        .values()
        .par_iter()
        .enumerate()
        .map(|(index, &value)| {
            let mut batch = base.clone();
            batch.set_column(col, value);
            let out = predictor
                .predict(&batch)
                .map_err(|source| IceError::Predict { index, value, source })?;
            if out.len() != rows.len() {
                return Err(IceError::Predict {
                    index,
                    value,
                    source: PredictError::LengthMismatch {
                        expected: rows.len(),
                        got: out.len(),
                        raw: String::new(),
                    },
                });
            }
            if let Some(k) = out.iter().position(|v| !v.is_finite()) {
                return Err(IceError::NonFinite { id: rows[k], value });
            }
            Ok(out)
        })
        .collect::<Result<_, _>>()?;

    let curves = rows
        .iter()
        .enumerate()
        .map(|(k, &id)| IceCurve { id, values: per_point.iter().map(|p| p[k]).collect() })
        .collect();
    IceBundle::new(grid.clone(), curves)
}

/// Pointwise mean of the bundle's curves, summed in ascending id order so
/// the result does not depend on curve order.
pub fn pd_curve(bundle: &IceBundle) -> Result<Vec<f64>, IceError> {
    if bundle.is_empty() {
        return Err(IceError::Empty);
    }
    let mut order: Vec<&IceCurve> = bundle.curves().iter().collect();
    order.sort_by_key(|c| c.id);
    let mut sum = vec![0.0; bundle.grid().len()];
    for c in order {
        for (s, v) in sum.iter_mut().zip(&c.values) {
            *s += v;
        }
    }
    let n = bundle.len() as f64;
    Ok(sum.into_iter().map(|s| s / n).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Column, FeatureRows, FeatureSpec, Schema};

    struct Constant(f64);

    impl Predictor for Constant {
        fn name(&self) -> String {
            "constant".into()
        }
        fn predict(&self, rows: &FeatureRows) -> Result<Vec<f64>, PredictError> {
            Ok(vec![self.0; rows.nrows()])
        }
    }

    struct Failing;

    impl Predictor for Failing {
        fn name(&self) -> String {
            "failing".into()
        }
        fn predict(&self, _: &FeatureRows) -> Result<Vec<f64>, PredictError> {
            Err(PredictError::ProcessExited)
        }
    }

    fn dataset() -> Dataset {
        let schema = Schema::new(
            vec![FeatureSpec::numeric("x"), FeatureSpec::numeric("z")],
            "y",
            "lat",
            "long",
        )
        .unwrap();
        Dataset::from_columns(
            schema,
            vec![Column::Numeric(vec![0.0, 1.0, 2.0]), Column::Numeric(vec![5.0, 6.0, 9.0])],
            vec![1.0, 2.0, 3.0],
            vec![0.0; 3],
            vec![0.0; 3],
        )
        .unwrap()
    }

    fn grid() -> FeatureGrid {
        FeatureGrid::new("x", vec![0.0, 1.0, 2.0], GridStrategy::Uniform).unwrap()
    }

    #[test]
    fn constant_model_gives_flat_curves() {
        let b = ice_curves(&Constant(4.2), &dataset(), "x", &grid(), &[0, 2]).unwrap();
        assert_eq!(b.ids(), vec![0, 2]);
        for c in b.curves() {
            assert_eq!(c.values, vec![4.2; 3]);
        }
    }

    #[test]
    fn pd_of_single_curve_and_hand_mean() {
        let g = FeatureGrid::new("x", vec![0.0, 1.0], GridStrategy::Uniform).unwrap();
        let single = IceBundle::new(g.clone(), vec![IceCurve { id: 3, values: vec![1.5, -2.0] }]).unwrap();
        assert_eq!(pd_curve(&single).unwrap(), vec![1.5, -2.0]);
        let two = IceBundle::new(
            g,
            vec![IceCurve { id: 0, values: vec![0.0, 0.0] }, IceCurve { id: 1, values: vec![2.0, 4.0] }],
        )
        .unwrap();
        assert_eq!(pd_curve(&two).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn failures_carry_grid_context() {
        match ice_curves(&Failing, &dataset(), "x", &grid(), &[0]) {
            Err(IceError::Predict { index, .. }) => assert!(index < 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn rejects_bad_selection() {
        let ds = dataset();
        assert!(matches!(ice_curves(&Constant(0.0), &ds, "x", &grid(), &[]), Err(IceError::Empty)));
        assert!(matches!(ice_curves(&Constant(0.0), &ds, "x", &grid(), &[1, 1]), Err(IceError::DuplicateId(1))));
        assert!(ice_curves(&Constant(0.0), &ds, "x", &grid(), &[7]).is_err());
        assert!(matches!(ice_curves(&Constant(0.0), &ds, "z", &grid(), &[0]), Err(IceError::GridFeature { .. })));
        let empty = IceBundle::new(grid(), vec![]).unwrap();
        assert!(matches!(pd_curve(&empty), Err(IceError::Empty)));
    }

    #[test]
    fn csv_round_trip() {
        let b = IceBundle::new(
            grid(),
            vec![IceCurve { id: 4, values: vec![0.1, 0.2, 1e-17] }, IceCurve { id: 1, values: vec![3.0, -1.0, 2.5] }],
        )
        .unwrap();
        let mut buf = Vec::new();
        b.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("id,grid_value,prediction\n4,0,0.1\n"));
        let back = IceBundle::read_csv(&buf[..], "x").unwrap();
        assert_eq!(back.curves(), b.curves());
        assert_eq!(back.grid().values(), b.grid().values());
    }
}
