//! The six-setting ablation grid over network inputs and supervision.

use serde::{Deserialize, Serialize};

use crate::srgcn::{ResidualBase, TrainOptions};

/// Input configuration column of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationInputs {
    /// Mesh branch only; vertex attributes repeat the preoperative
    /// coordinates in both halves (width stays 6).
    PreopOnly,
    /// Mesh branch only; attributes carry preop and LIBR coordinates.
    PreopLibr,
    /// Mesh branch plus the measurement bipartite branch.
    Bipartite,
}

/// Supervision column: what the network output is regressed against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Supervision {
    /// Output regressed against the full GT displacement (base = preop).
    Gt,
    /// Output regressed against the LIBR residual (base = LIBR mesh).
    Residual,
}

impl Supervision {
    pub fn base(self) -> ResidualBase {
        match self {
            Supervision::Gt => ResidualBase::Preop,
            Supervision::Residual => ResidualBase::Libr,
        }
    }
}

/// One row of the ablation grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationSetting {
    /// 1-based row number in the canonical grid order.
    pub index: u8,
    pub inputs: AblationInputs,
    pub supervision: Supervision,
    /// Whether the sparse-supervision loss term is added.
    pub sparse: bool,
}

impl AblationSetting {
    /// The canonical six-row grid, in table order. Setting 6 is the full
    /// method (it equals the default training configuration).
    pub fn grid() -> [AblationSetting; 6] {
        use AblationInputs::*;
        use Supervision::*;
        [
            AblationSetting { index: 1, inputs: PreopOnly, supervision: Gt, sparse: false },
            AblationSetting { index: 2, inputs: PreopOnly, supervision: Residual, sparse: false },
            AblationSetting { index: 3, inputs: PreopLibr, supervision: Residual, sparse: false },
            AblationSetting { index: 4, inputs: Bipartite, supervision: Residual, sparse: false },
            AblationSetting { index: 5, inputs: Bipartite, supervision: Gt, sparse: true },
            AblationSetting { index: 6, inputs: Bipartite, supervision: Residual, sparse: true },
        ]
    }

    /// Training toggles encoding this setting.
    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            use_bipartite: matches!(self.inputs, AblationInputs::Bipartite),
            attrs_include_libr: !matches!(self.inputs, AblationInputs::PreopOnly),
            base: self.supervision.base(),
            use_sparse: self.sparse,
        }
    }

    /// Row label used in the ablation table's `method` column.
    pub fn label(&self) -> String {
        format!("setting_{}", self.index)
    }
}
