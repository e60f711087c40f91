//! Analytic operation counts for one forward pass.
//!
//! Convolutions cost `2·k²·Cin·Cout·W·H` (bias adds excluded). The other
//! operators use fixed per-element costs:
//!
//! | op | cost |
//! |----|------|
//! | instance norm | 5 per element, +2 with affine |
//! | ReLU | 1 per element |
//! | 2×2 average pool | 4 per output element |
//! | bilinear upsample | 7 per output element |
//! | concat | 0 |
//! | L2 normalise | `3·C + 1` per pixel |

use super::{ArchSpec, NormKind};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    /// Per layer, in [`super::LAYER_NAMES`] order.
    pub conv: [u64; 5],
    pub norm: u64,
    pub relu: u64,
    pub pool: u64,
    pub upsample: u64,
    pub l2: u64,
}

impl FlopBreakdown {
    pub fn conv_total(&self) -> u64 {
        self.conv.iter().sum()
    }

    pub fn total(&self) -> u64 {
        self.conv_total() + self.norm + self.relu + self.pool + self.upsample + self.l2
    }
}

/// Exact count for a `side×side` patch.
pub fn count_flops(arch: &ArchSpec, side: usize) -> Result<FlopBreakdown> {
    if side == 0 || !side.is_multiple_of(4) {
        return Err(Error::InvalidArgument(format!(
            "patch side {side} is not a positive multiple of 4"
        )));
    }
    let sides = [side, side, side / 2, side / 4, side];
    let mut b = FlopBreakdown::default();
    let norm_cost = match arch.norm {
        NormKind::None => 0,
        NormKind::Instance => 5,
        NormKind::InstanceAffine => 7,
    };
    for (i, (cin, cout, k)) in arch.layer_shapes().into_iter().enumerate() {
        let plane = (sides[i] * sides[i]) as u64;
        b.conv[i] = 2 * (k * k * cin * cout) as u64 * plane;
        if i < 4 {
            b.norm += norm_cost * cout as u64 * plane;
            b.relu += cout as u64 * plane;
        }
    }
    let w = arch.widths;
    let full = (side * side) as u64;
    b.pool = 4 * (w[1] as u64 * full / 4 + w[2] as u64 * full / 16);
    b.upsample = 7 * (w[2] + w[3]) as u64 * full;
    b.l2 = (3 * arch.out_dim as u64 + 1) * full;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_layer_at_32() {
        let b = count_flops(&ArchSpec::default(), 32).unwrap();
        assert_eq!(b.conv[0], 73_728);
    }

    #[test]
    fn area_scaling() {
        let a = ArchSpec::default();
        let small = count_flops(&a, 32).unwrap();
        let big = count_flops(&a, 64).unwrap();
        assert_eq!(big.conv[0], 4 * small.conv[0]);
        assert_eq!(big.total(), 4 * small.total());
        assert_eq!(count_flops(&a, 128).unwrap().total(), 16 * small.total());
        assert!(count_flops(&a, 30).is_err());
    }
}
