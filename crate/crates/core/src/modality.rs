use std::fmt;

use serde::{Deserialize, Serialize};

/// One of the two views of a paired instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Modality {
    A,
    B,
}

impl Modality {
    pub const BOTH: [Modality; 2] = [Modality::A, Modality::B];

    pub fn index(self) -> usize {
        match self {
            Modality::A => 0,
            Modality::B => 1,
        }
    }

    pub fn other(self) -> Modality {
        match self {
            Modality::A => Modality::B,
            Modality::B => Modality::A,
        }
    }
}

impl fmt::Display for Modality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Modality::A => "A",
            Modality::B => "B",
        })
    }
}

/// How sequence positions are laid out, e.g. `[3, 3]` for a spatial grid or
/// `[6]` for a time axis. Position `l` maps to coordinates in row-major order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridShape(pub Vec<usize>);

impl GridShape {
    pub fn sequence(len: usize) -> Self {
        GridShape(vec![len])
    }

    pub fn dims(&self) -> &[usize] {
        &self.0
    }

    pub fn positions(&self) -> usize {
        self.0.iter().product()
    }

    /// The grid if it covers exactly `len` positions, otherwise a 1-D axis.
    pub fn fit(&self, len: usize) -> GridShape {
        if self.positions() == len {
            self.clone()
        } else {
            GridShape::sequence(len)
        }
    }

    pub fn coords(&self, mut position: usize) -> Vec<usize> {
        let mut out = vec![0; self.0.len()];
        for (slot, &extent) in out.iter_mut().zip(&self.0).rev() {
            *slot = position % extent;
            position /= extent;
        }
        out
    }
}

impl fmt::Display for GridShape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.0.iter().map(usize::to_string).collect();
        f.write_str(&parts.join("x"))
    }
}
