use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Direction {
    /// Queries from modality A, candidates from modality B.
    AToB,
    BToA,
}

impl Direction {
    pub const BOTH: [Direction; 2] = [Direction::AToB, Direction::BToA];
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::AToB => "A->B",
            Direction::BToA => "B->A",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub direction: Direction,
    pub r1: f64,
    pub r5: f64,
    pub r10: f64,
    pub median_rank: f64,
    pub mean_rank: f64,
    pub n: usize,
}

pub const RETRIEVAL_HEADER: &str = "direction,n,r1,r5,r10,median_rank,mean_rank";

impl RetrievalReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.4},{:.4},{:.4},{},{:.4}",
            self.direction, self.n, self.r1, self.r5, self.r10, self.median_rank, self.mean_rank
        )
    }
}

pub fn retrieval_csv(reports: &[RetrievalReport]) -> String {
    let mut out = String::from(RETRIEVAL_HEADER);
    for r in reports {
        out.push('\n');
        out.push_str(&r.csv_row());
    }
    out.push('\n');
    out
}

/// 1-based rank of the true candidate for every query. Candidates are ordered
/// by descending dot product; equal scores go to the lower candidate index.
pub fn ranks(queries: &Tensor, candidates: &Tensor) -> Result<Vec<usize>> {
    let (n, d) = queries.dims2("ranks")?;
    let (m, dc) = candidates.dims2("ranks")?;
    if n != m || d != dc {
        return Err(Error::dim("ranks", format!("{n}x{d} queries vs {m}x{dc} candidates")));
    }
    if n == 0 {
        return Err(Error::Empty("retrieval over zero pairs"));
    }
    let scores = queries.matmul(&candidates.transpose()?)?;
    Ok((0..n)
        .map(|i| {
            let row = scores.row(i);
            let own = row[i];
            1 + row
                .iter()
                .enumerate()
                .filter(|&(j, &s)| s > own || (s == own && j < i))
                .count()
        })
        .collect())
}

pub fn report_from_ranks(direction: Direction, ranks: &[usize]) -> Result<RetrievalReport> {
    if ranks.is_empty() {
        return Err(Error::Empty("retrieval over zero pairs"));
    }
    let n = ranks.len();
    let recall = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    let mut sorted = ranks.to_vec();
    sorted.sort_unstable();
    let median_rank = if n % 2 == 1 {
        sorted[n / 2] as f64
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) as f64 / 2.0
    };
    Ok(RetrievalReport {
        direction,
        r1: recall(1),
        r5: recall(5),
        r10: recall(10),
        median_rank,
        mean_rank: ranks.iter().sum::<usize>() as f64 / n as f64,
        n,
    })
}

/// Retrieval of the paired row among all rows of the other modality.
pub fn retrieval_metrics(z_a: &Tensor, z_b: &Tensor, direction: Direction) -> Result<RetrievalReport> {
    let r = match direction {
        Direction::AToB => ranks(z_a, z_b)?,
        Direction::BToA => ranks(z_b, z_a)?,
    };
    report_from_ranks(direction, &r)
}
