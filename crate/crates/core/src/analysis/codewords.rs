use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::codebook::CodeAssignment;
use crate::data::PairedDataset;
use crate::error::{Error, Result};
use crate::modality::{GridShape, Modality};

pub const DEFAULT_PARTITION_THRESHOLD: f64 = 0.9;

/// Which label a position counts towards.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LabelSource {
    /// The instance's dominant concept, for every position.
    #[default]
    Instance,
    /// The concept that generated the position.
    Position,
}

/// Hard-assignment counts per codeword.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodewordStats {
    pub size: usize,
    pub labels: Vec<String>,
    pub tokens: Vec<String>,
    /// `[modality][v]`
    pub occurrence: [Vec<u64>; 2],
    /// `[modality][v][label]`
    pub label_counts: [Vec<Vec<u64>>; 2],
    /// `[v][token]`, modality B positions only.
    pub token_counts: Vec<Vec<u64>>,
    /// Modality B positions carrying each token.
    pub token_occurrence: Vec<u64>,
    /// Consecutive steps without assignment at the time of analysis.
    pub inactive_steps: Vec<u64>,
}

impl CodewordStats {
    pub fn new(size: usize, labels: Vec<String>, tokens: Vec<String>) -> Self {
        let nl = labels.len();
        let nt = tokens.len();
        Self {
            size,
            occurrence: [vec![0; size], vec![0; size]],
            label_counts: [vec![vec![0; nl]; size], vec![vec![0; nl]; size]],
            token_counts: vec![vec![0; nt]; size],
            token_occurrence: vec![0; nt],
            inactive_steps: vec![0; size],
            labels,
            tokens,
        }
    }

    /// Stats with the dataset's concept names as labels and concept tokens as
    /// tokens.
    pub fn for_dataset(size: usize, ds: &PairedDataset) -> Self {
        Self::new(
            size,
            ds.concepts.iter().map(|c| c.name.clone()).collect(),
            ds.concepts.iter().map(|c| c.token.clone()).collect(),
        )
    }

    /// Adds one sequence. `labels[l]` is the label of position `l`;
    /// `tokens`, when given, is the token index of each position (counted
    /// for modality B only).
    pub fn add(&mut self, assignment: &CodeAssignment, labels: &[u16], tokens: Option<&[u16]>) -> Result<()> {
        if labels.len() != assignment.len() {
            return Err(Error::dim(
                "codeword_stats",
                format!("{} labels for {} positions", labels.len(), assignment.len()),
            ));
        }
        let m = assignment.modality.index();
        for (l, &v) in assignment.codes.iter().enumerate() {
            if v >= self.size {
                return Err(Error::Index { index: v, limit: self.size });
            }
            let a = labels[l] as usize;
            if a >= self.labels.len() {
                return Err(Error::Index {
                    index: a,
                    limit: self.labels.len(),
                });
            }
            self.occurrence[m][v] += 1;
            self.label_counts[m][v][a] += 1;
        }
        if let (Modality::B, Some(tokens)) = (assignment.modality, tokens) {
            if tokens.len() != assignment.len() {
                return Err(Error::dim("codeword_stats", "token stream length differs from sequence"));
            }
            for (&v, &t) in assignment.codes.iter().zip(tokens) {
                let t = t as usize;
                if t >= self.tokens.len() {
                    return Err(Error::Index {
                        index: t,
                        limit: self.tokens.len(),
                    });
                }
                self.token_counts[v][t] += 1;
                self.token_occurrence[t] += 1;
            }
        }
        Ok(())
    }

    /// Accumulates assignments of dataset instances (matched by id). Modality
    /// B tokens are the tokens of each position's generating concept.
    pub fn accumulate(&mut self, ds: &PairedDataset, assignments: &[CodeAssignment], source: LabelSource) -> Result<()> {
        let first = ds.instances.first().map_or(0, |i| i.id);
        for asg in assignments {
            let k = asg.instance.checked_sub(first).map(|k| k as usize).filter(|&k| k < ds.len()).ok_or(
                Error::Index {
                    index: asg.instance as usize,
                    limit: ds.len(),
                },
            )?;
            let inst = &ds.instances[k];
            let seq = inst.sequence(asg.modality);
            let labels = match source {
                LabelSource::Instance => vec![inst.label; seq.len()],
                LabelSource::Position => seq.labels.clone(),
            };
            self.add(asg, &labels, Some(&seq.labels))?;
        }
        Ok(())
    }

    pub fn total_occurrence(&self, v: usize) -> u64 {
        self.occurrence[0][v] + self.occurrence[1][v]
    }
}

/// `P(label | v)` within one modality; `None` for codewords that modality
/// never used.
pub fn conditional_probability(stats: &CodewordStats, m: Modality) -> Vec<Option<Vec<f64>>> {
    let i = m.index();
    (0..stats.size)
        .map(|v| {
            let occ = stats.occurrence[i][v];
            (occ > 0).then(|| stats.label_counts[i][v].iter().map(|&c| c as f64 / occ as f64).collect())
        })
        .collect()
}

/// One row per codeword, one column per label; absent codewords are `NA`.
pub fn conditional_probability_csv(stats: &CodewordStats, m: Modality) -> String {
    let mut out = String::from("code,occurrence");
    for l in &stats.labels {
        out.push(',');
        out.push_str(l);
    }
    out.push('\n');
    for (v, row) in conditional_probability(stats, m).into_iter().enumerate() {
        write!(out, "{v},{}", stats.occurrence[m.index()][v]).expect("write to string");
        match row {
            Some(p) => p.iter().for_each(|x| write!(out, ",{x:.6}").expect("write to string")),
            None => stats.labels.iter().for_each(|_| out.push_str(",NA")),
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    pub name: String,
    /// Precision for labels, F1 for tokens; in `[0, 1]`.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrespondenceRow {
    pub code: usize,
    pub occurrence: u64,
    /// At most two, best first.
    pub labels: Vec<Hypothesis>,
    pub tokens: Vec<Hypothesis>,
}

fn top_two(scores: impl Iterator<Item = (String, f64)>) -> Vec<Hypothesis> {
    let mut all: Vec<(usize, String, f64)> = scores.enumerate().map(|(i, (n, s))| (i, n, s)).collect();
    all.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
    all.into_iter().take(2).map(|(_, name, score)| Hypothesis { name, score }).collect()
}

/// Label precision over both modalities' positions; token F1 over modality
/// B positions, with precision `co / occ_B(v)` and recall `co / occ(token)`.
/// Rows are ordered by top label precision, then occurrence, then code.
pub fn correspondence_table(stats: &CodewordStats) -> Vec<CorrespondenceRow> {
    let mut rows: Vec<CorrespondenceRow> = (0..stats.size)
        .filter(|&v| stats.total_occurrence(v) > 0)
        .map(|v| {
            let occ = stats.total_occurrence(v);
            let labels = top_two(stats.labels.iter().enumerate().map(|(a, name)| {
                let co = stats.label_counts[0][v][a] + stats.label_counts[1][v][a];
                (name.clone(), co as f64 / occ as f64)
            }));
            let occ_b = stats.occurrence[1][v];
            let tokens = top_two(stats.tokens.iter().enumerate().map(|(t, name)| {
                let co = stats.token_counts[v][t] as f64;
                let f1 = if co == 0.0 {
                    0.0
                } else {
                    let p = co / occ_b as f64;
                    let r = co / stats.token_occurrence[t] as f64;
                    2.0 * p * r / (p + r)
                };
                (name.clone(), f1)
            }));
            CorrespondenceRow {
                code: v,
                occurrence: occ,
                labels,
                tokens,
            }
        })
        .collect();
    rows.sort_by(|a, b| {
        let top = |r: &CorrespondenceRow| r.labels.first().map_or(0.0, |h| h.score);
        top(b)
            .total_cmp(&top(a))
            .then(b.occurrence.cmp(&a.occurrence))
            .then(a.code.cmp(&b.code))
    });
    rows
}

pub const CORRESPONDENCE_HEADER: &str = "rank,code,occurrence,label_1,precision_1,label_2,precision_2,token_1,f1_1,token_2,f1_2";

/// Scores as percentages with one decimal; missing hypotheses are `NA`.
pub fn format_correspondence_row(rank: usize, row: &CorrespondenceRow) -> String {
    let mut out = format!("{rank},{},{}", row.code, row.occurrence);
    for hyps in [&row.labels, &row.tokens] {
        for k in 0..2 {
            match hyps.get(k) {
                Some(h) => write!(out, ",{},{:.1}", h.name, 100.0 * h.score).expect("write to string"),
                None => out.push_str(",NA,NA"),
            }
        }
    }
    out
}

pub fn correspondence_csv(rows: &[CorrespondenceRow]) -> String {
    let mut out = String::from(CORRESPONDENCE_HEADER);
    out.push('\n');
    for (i, r) in rows.iter().enumerate() {
        out.push_str(&format_correspondence_row(i + 1, r));
        out.push('\n');
    }
    out
}

/// Positions of one sequence assigned to a codeword.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LocalizationMask {
    pub instance: u64,
    pub modality: Modality,
    pub code: usize,
    pub grid: GridShape,
    /// Row-major over `grid`.
    pub mask: Vec<bool>,
}

impl LocalizationMask {
    /// Grid coordinates of the marked positions.
    pub fn marked(&self) -> Vec<Vec<usize>> {
        self.mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(l, _)| self.grid.coords(l))
            .collect()
    }
}

pub fn localize(assignment: &CodeAssignment, code: usize, codebook_size: usize) -> Result<LocalizationMask> {
    if code >= codebook_size {
        return Err(Error::Index {
            index: code,
            limit: codebook_size,
        });
    }
    Ok(LocalizationMask {
        instance: assignment.instance,
        modality: assignment.modality,
        code,
        grid: assignment.grid.fit(assignment.len()),
        mask: assignment.codes.iter().map(|&v| v == code).collect(),
    })
}

/// Fraction of activated codewords whose use is dominated by one modality:
/// `max(occ_A, occ_B) / (occ_A + occ_B) > threshold`.
pub fn partition_statistic(stats: &CodewordStats, threshold: f64) -> Result<f64> {
    if !(threshold > 0.5 && threshold <= 1.0) {
        return Err(Error::Config(format!("partition threshold must be in (0.5, 1], got {threshold}")));
    }
    let mut active = 0usize;
    let mut single = 0usize;
    for v in 0..stats.size {
        let (a, b) = (stats.occurrence[0][v], stats.occurrence[1][v]);
        let total = a + b;
        if total == 0 {
            continue;
        }
        active += 1;
        if a.max(b) as f64 / total as f64 > threshold {
            single += 1;
        }
    }
    if active == 0 {
        return Err(Error::Undefined("no codeword was activated".into()));
    }
    Ok(single as f64 / active as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LabelAgreement {
    /// Fraction of compared codewords whose most probable label is the same
    /// in both modalities.
    pub agreement: f64,
    pub compared: usize,
    /// `1 / labels`.
    pub chance: f64,
}

/// Compares `argmax_a P(a | v)` across modalities over codewords used by
/// both; ties go to the lowest label index.
pub fn label_agreement(stats: &CodewordStats) -> Result<LabelAgreement> {
    let pa = conditional_probability(stats, Modality::A);
    let pb = conditional_probability(stats, Modality::B);
    let argmax = |p: &[f64]| {
        let mut best = 0;
        for (i, &x) in p.iter().enumerate() {
            if x > p[best] {
                best = i;
            }
        }
        best
    };
    let mut compared = 0;
    let mut agree = 0;
    for (a, b) in pa.iter().zip(&pb) {
        if let (Some(a), Some(b)) = (a, b) {
            compared += 1;
            if argmax(a) == argmax(b) {
                agree += 1;
            }
        }
    }
    if compared == 0 {
        return Err(Error::Undefined("no codeword is used by both modalities".into()));
    }
    Ok(LabelAgreement {
        agreement: agree as f64 / compared as f64,
        compared,
        chance: 1.0 / stats.labels.len() as f64,
    })
}
