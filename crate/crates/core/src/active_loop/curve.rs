use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::Result;

pub const CURVE_HEADER: &str = "phase,bin_index,candidate_bin_id,accepted,acc_before,acc_after,oracle_inspections,oracle_corrections,d_well_size,d_tentative_size,wall_time_ms";

/// One learning-curve record. Rows without a bin index are the initial
/// training (phase 0) and the end-of-phase retrain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub phase: usize,
    pub bin_index: Option<usize>,
    pub candidate_bin_id: Option<usize>,
    pub accepted: bool,
    pub acc_before: f64,
    pub acc_after: f64,
    /// Inspections and corrections spent on this row alone.
    pub oracle_inspections: u64,
    pub oracle_corrections: u64,
    pub d_well_size: usize,
    pub d_tentative_size: usize,
    pub wall_time_ms: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LearningCurve {
    pub rows: Vec<CurveRow>,
}

impl LearningCurve {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        // an empty curve still gets its header
        if self.rows.is_empty() {
            w.write_record(CURVE_HEADER.split(','))?;
        }
        for row in &self.rows {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(reader: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(reader);
        let rows = r.deserialize().collect::<std::result::Result<Vec<CurveRow>, _>>()?;
        Ok(LearningCurve { rows })
    }

    pub fn total_inspections(&self) -> u64 {
        self.rows.iter().map(|r| r.oracle_inspections).sum()
    }

    pub fn total_corrections(&self) -> u64 {
        self.rows.iter().map(|r| r.oracle_corrections).sum()
    }

    /// Accuracy of the model in force after the last row.
    pub fn final_acc(&self) -> Option<f64> {
        self.rows.last().map(|r| r.acc_after)
    }

    pub fn initial_acc(&self) -> Option<f64> {
        self.rows.first().map(|r| r.acc_after)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_and_header() {
        let row = CurveRow {
            phase: 1,
            bin_index: Some(0),
            candidate_bin_id: Some(3),
            accepted: false,
            acc_before: 0.1 + 0.2,
            acc_after: 1.0 / 3.0,
            oracle_inspections: 4,
            oracle_corrections: 2,
            d_well_size: 10,
            d_tentative_size: 90,
            wall_time_ms: 0,
        };
        let initial = CurveRow {
            phase: 0,
            bin_index: None,
            candidate_bin_id: None,
            accepted: true,
            ..row.clone()
        };
        let curve = LearningCurve {
            rows: vec![initial, row],
        };
        let mut buf = Vec::new();
        curve.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().next().unwrap(), CURVE_HEADER);
        assert!(text.lines().nth(1).unwrap().starts_with("0,,,true,"));
        assert_eq!(LearningCurve::read_csv(buf.as_slice()).unwrap(), curve);

        let mut empty = Vec::new();
        LearningCurve::default().write_csv(&mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap().trim_end(), CURVE_HEADER);
    }
}
