use std::fmt;
use std::str::FromStr;

use crate::error::RkmError;

/// The seven cells of the recurrent-kernel family, from the full LSTM down to
/// the memoryless CNN.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum CellVariant {
    Lstm,
    RkmLstm,
    RkmCifg,
    LinearKernelOutGate,
    LinearKernel,
    GatedCnn,
    Cnn,
}

impl CellVariant {
    pub const ALL: [CellVariant; 7] = [
        CellVariant::Lstm,
        CellVariant::RkmLstm,
        CellVariant::RkmCifg,
        CellVariant::LinearKernelOutGate,
        CellVariant::LinearKernel,
        CellVariant::GatedCnn,
        CellVariant::Cnn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CellVariant::Lstm => "lstm",
            CellVariant::RkmLstm => "rkm-lstm",
            CellVariant::RkmCifg => "rkm-cifg",
            CellVariant::LinearKernelOutGate => "linear-kernel-ot",
            CellVariant::LinearKernel => "linear-kernel",
            CellVariant::GatedCnn => "gated-cnn",
            CellVariant::Cnn => "cnn",
        }
    }

    /// Stable tag used by the checkpoint header.
    pub fn tag(self) -> u8 {
        match self {
            CellVariant::Lstm => 0,
            CellVariant::RkmLstm => 1,
            CellVariant::RkmCifg => 2,
            CellVariant::LinearKernelOutGate => 3,
            CellVariant::LinearKernel => 4,
            CellVariant::GatedCnn => 5,
            CellVariant::Cnn => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Self::ALL.iter().copied().find(|v| v.tag() == tag)
    }

    /// Whether `h'_{t-1}` feeds back into the cell input.
    pub fn has_feedback(self) -> bool {
        !matches!(self, CellVariant::GatedCnn | CellVariant::Cnn)
    }

    /// Whether the memory update uses the static gains `sigma_i^2`, `sigma_f^2`.
    pub fn uses_static_gains(self) -> bool {
        matches!(
            self,
            CellVariant::LinearKernelOutGate | CellVariant::LinearKernel | CellVariant::GatedCnn | CellVariant::Cnn
        )
    }

    pub fn has_output_gate(self) -> bool {
        matches!(
            self,
            CellVariant::Lstm | CellVariant::RkmLstm | CellVariant::RkmCifg | CellVariant::LinearKernelOutGate
        )
    }

    pub fn has_input_gate(self) -> bool {
        matches!(self, CellVariant::Lstm | CellVariant::RkmLstm | CellVariant::GatedCnn)
    }

    pub fn has_forget_gate(self) -> bool {
        matches!(self, CellVariant::Lstm | CellVariant::RkmLstm | CellVariant::RkmCifg)
    }

    /// Number of `d`-row weight groups: the content filters plus one per gate.
    pub fn weight_groups(self) -> usize {
        1 + usize::from(self.has_output_gate()) + usize::from(self.has_input_gate()) + usize::from(self.has_forget_gate())
    }

    pub fn variant_list() -> String {
        Self::ALL.iter().map(|v| v.name()).collect::<Vec<_>>().join(", ")
    }
}

impl fmt::Display for CellVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for CellVariant {
    type Err = RkmError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key = s.trim().to_ascii_lowercase().replace('_', "-");
        let alias = match key.as_str() {
            "linear-kernel-outgate" | "linear-kernel-o" | "lk-ot" => "linear-kernel-ot",
            "lk" => "linear-kernel",
            "gcnn" => "gated-cnn",
            "cifg" => "rkm-cifg",
            other => other,
        };
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == alias)
            .ok_or_else(|| {
                RkmError::InvalidConfig(format!(
                    "unknown variant `{s}`; expected one of: {}",
                    Self::variant_list()
                ))
            })
    }
}

/// Scalar count under the table accounting: weight matrices only, no biases,
/// no layer-norm parameters, no embeddings.
pub fn param_count(variant: CellVariant, m: usize, d: usize, n: usize) -> usize {
    let (nm, d) = (n * m, d);
    match variant {
        CellVariant::Lstm | CellVariant::RkmLstm => (nm + d) * (4 * d),
        CellVariant::RkmCifg => (nm + d) * (3 * d),
        CellVariant::LinearKernelOutGate => (nm + d) * (2 * d),
        CellVariant::LinearKernel => (nm + d) * d,
        CellVariant::GatedCnn => nm * (2 * d),
        CellVariant::Cnn => nm * d,
    }
}
