use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{iou, Label, Sample, TruthAccess, TruthRole};

/// A given label whose box overlaps the truth less than this is treated as
/// a localization error.
pub const LOCALIZATION_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OracleCounters {
    pub inspections: u64,
    pub corrections: u64,
}

/// Ground-truth simulator standing in for a human labeler.
#[derive(Debug)]
pub struct Oracle {
    access: TruthAccess,
    budget: Option<u64>,
    pub counters: OracleCounters,
}

impl Oracle {
    pub fn new(budget: Option<u64>) -> Self {
        Oracle {
            access: TruthAccess::new(TruthRole::Oracle),
            budget,
            counters: OracleCounters::default(),
        }
    }

    pub fn budget(&self) -> Option<u64> {
        self.budget
    }

    pub fn truth_reads(&self) -> u64 {
        self.access.reads()
    }

    pub fn exhausted(&self) -> bool {
        self.budget.is_some_and(|b| self.counters.inspections >= b)
    }

    /// Returns the true label of `sample`, counting one inspection, and a
    /// correction when the given label had the wrong class or a box with
    /// IoU below [`LOCALIZATION_IOU`].
    pub fn inspect(&mut self, sample: &Sample) -> Result<(Label, bool)> {
        if self.exhausted() {
            return Err(Error::BudgetExhausted(self.counters.inspections));
        }
        let truth = *sample
            .truth(&self.access)
            .ok_or_else(|| Error::invalid(format!("sample {} has no ground truth to consult", sample.id)))?;
        let corrected = match sample.given_label {
            Some(g) => g.class != truth.class || iou(&g.bbox, &truth.bbox) < LOCALIZATION_IOU,
            None => true,
        };
        self.counters.inspections += 1;
        if corrected {
            self.counters.corrections += 1;
        }
        Ok((truth, corrected))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BoundingBox, GivenLabel, Provenance};

    fn sample(truth: Label, given: Option<(usize, BoundingBox)>) -> Sample {
        let mut s = Sample::new(0, vec![0.0, 0.0], Some(truth));
        s.given_label = given.map(|(class, bbox)| GivenLabel {
            class,
            bbox,
            provenance: Provenance::Pseudo,
        });
        s
    }

    fn truth() -> Label {
        Label {
            class: 1,
            bbox: BoundingBox::new(0.0, 0.0, 0.5, 0.5).unwrap(),
        }
    }

    #[test]
    fn correct_label_costs_one_inspection() {
        let mut o = Oracle::new(None);
        let (label, corrected) = o.inspect(&sample(truth(), Some((1, truth().bbox)))).unwrap();
        assert_eq!(label, truth());
        assert!(!corrected);
        assert_eq!(o.counters, OracleCounters { inspections: 1, corrections: 0 });
        assert_eq!(o.truth_reads(), 1);
    }

    #[test]
    fn wrong_class_is_corrected() {
        let mut o = Oracle::new(None);
        assert!(o.inspect(&sample(truth(), Some((0, truth().bbox)))).unwrap().1);
        assert!(o.inspect(&sample(truth(), None)).unwrap().1);
        assert_eq!(o.counters, OracleCounters { inspections: 2, corrections: 2 });
    }

    #[test]
    fn poor_box_is_a_localization_correction() {
        // a box covering the top 0.15 of the truth: 0.075 / 0.25 = 0.3
        let shifted = BoundingBox::new(0.0, 0.0, 0.5, 0.15).unwrap();
        assert!((iou(&shifted, &truth().bbox) - 0.3).abs() < 1e-12);
        let mut o = Oracle::new(None);
        assert!(o.inspect(&sample(truth(), Some((1, shifted)))).unwrap().1);

        // x=0.1: overlap 0.4*0.5 = 0.2, union 0.3, IoU 2/3 -> kept
        let close = BoundingBox::new(0.1, 0.0, 0.5, 0.5).unwrap();
        assert!(!o.inspect(&sample(truth(), Some((1, close)))).unwrap().1);
    }

    #[test]
    fn budget_is_enforced() {
        let mut o = Oracle::new(Some(1));
        o.inspect(&sample(truth(), None)).unwrap();
        assert!(matches!(o.inspect(&sample(truth(), None)), Err(Error::BudgetExhausted(1))));
        assert_eq!(o.counters.inspections, 1);
    }
}
