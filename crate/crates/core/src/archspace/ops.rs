use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Candidate operations on a cell edge, in ordinal order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpKind {
    PartAware,
    MaxPool3x3,
    AvgPool3x3,
    SepConv3x3,
    DilConv3x3,
    Zero,
    Identity,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::PartAware,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::SepConv3x3,
        OpKind::DilConv3x3,
        OpKind::Zero,
        OpKind::Identity,
    ];

    pub fn ordinal(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::PartAware => "part_aware",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::Zero => "zero",
            OpKind::Identity => "identity",
        }
    }

    pub fn has_params(self) -> bool {
        matches!(self, OpKind::PartAware | OpKind::SepConv3x3 | OpKind::DilConv3x3)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown operation {s:?}")))
    }
}

/// Which operation vocabulary a search runs over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SearchSpace {
    /// All seven operations, including the part-aware module.
    #[default]
    Reid,
    /// The classic six operations (no part-aware module).
    Classic,
}

impl SearchSpace {
    pub fn ops(self) -> &'static [OpKind] {
        match self {
            SearchSpace::Reid => &OpKind::ALL,
            SearchSpace::Classic => &OpKind::ALL[1..],
        }
    }

    pub fn len(self) -> usize {
        self.ops().len()
    }

    pub fn is_empty(self) -> bool {
        false
    }

    pub fn contains(self, op: OpKind) -> bool {
        self.ops().contains(&op)
    }

    /// Position of `op` within [`SearchSpace::ops`].
    pub fn position(self, op: OpKind) -> Option<usize> {
        self.ops().iter().position(|&o| o == op)
    }

    pub fn tag(self) -> &'static str {
        match self {
            SearchSpace::Reid => "reid",
            SearchSpace::Classic => "classic",
        }
    }
}

impl FromStr for SearchSpace {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "reid" => Ok(SearchSpace::Reid),
            "classic" => Ok(SearchSpace::Classic),
            _ => Err(Error::invalid(format!("unknown search space {s:?}"))),
        }
    }
}

/// Normal (stride 1) or reduction (stride 2, width doubling) cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellType {
    Normal,
    Reduction,
}

impl CellType {
    pub fn name(self) -> &'static str {
        match self {
            CellType::Normal => "normal",
            CellType::Reduction => "reduction",
        }
    }
}
