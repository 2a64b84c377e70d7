use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{DatasetStore, SampleId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStatus {
    Pending,
    Accepted,
    Corrected,
    Discarded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bin {
    pub ids: Vec<SampleId>,
    pub status: BinStatus,
    /// The oracle has already checked every label in this bin.
    pub inspected: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BinSequence {
    pub bins: Vec<Bin>,
}

impl BinSequence {
    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn pending(&self) -> Vec<usize> {
        (0..self.bins.len())
            .filter(|&i| self.bins[i].status == BinStatus::Pending)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.bins.iter().map(|b| b.ids.len()).collect()
    }
}

/// Sorts the pseudo-labeled ids by descending score (ties by id) and cuts
/// them into at most `j` contiguous bins whose sizes differ by at most one,
/// larger bins first.
pub fn make_bins(selected: &[SampleId], store: &DatasetStore, j: usize) -> Result<BinSequence> {
    if j == 0 {
        return Err(Error::invalid("bin count j must be at least 1"));
    }
    let mut scored = selected
        .iter()
        .map(|&id| {
            let s = store.get(id)?;
            let score = s.pseudo_score.ok_or_else(|| Error::invalid(format!("sample {id} has no pseudo-label")))?;
            Ok((id, score))
        })
        .collect::<Result<Vec<(SampleId, f64)>>>()?;
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));

    let n = scored.len();
    let count = j.min(n);
    let mut bins = Vec::with_capacity(count);
    let mut start = 0;
    for b in 0..count {
        let size = n / count + usize::from(b < n % count);
        bins.push(Bin {
            ids: scored[start..start + size].iter().map(|(id, _)| *id).collect(),
            status: BinStatus::Pending,
            inspected: false,
        });
        start += size;
    }
    Ok(BinSequence { bins })
}
