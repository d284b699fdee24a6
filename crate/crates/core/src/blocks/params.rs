use std::fmt;

use crate::error::{Error, Result};
use crate::nn::Module;
use crate::tensor::Scalar;

/// Closed-form parameter counts for the three block families.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamFormula {
    /// `k²·C_in·C_out`
    Conv { k: u64, c_in: u64, c_out: u64 },
    /// `a·C_in² + a·C_in·C_out + k²·C_in`, evaluated exactly as written. The
    /// depthwise term counts `k²·C_in` rather than the `k²·a·C_in` weights an
    /// expand-then-depthwise block actually has.
    InvertedResidual { k: u64, a: u64, c_in: u64, c_out: u64 },
    /// `(3² + 5²)·(C_in/4)·(C_out/4) + C_in·C_out`
    Errc { c_in: u64, c_out: u64 },
}

impl ParamFormula {
    pub fn evaluate(&self) -> Result<u64> {
        match *self {
            ParamFormula::Conv { k, c_in, c_out } => {
                positive(&[k, c_in, c_out])?;
                Ok(k * k * c_in * c_out)
            }
            ParamFormula::InvertedResidual { k, a, c_in, c_out } => {
                positive(&[k, a, c_in, c_out])?;
                Ok(a * c_in * c_in + a * c_in * c_out + k * k * c_in)
            }
            ParamFormula::Errc { c_in, c_out } => {
                positive(&[c_in, c_out])?;
                if c_in % 4 != 0 || c_out % 4 != 0 {
                    return Err(Error::Domain(format!(
                        "ERRC formula needs channels divisible by 4, got {c_in}, {c_out}"
                    )));
                }
                Ok((9 + 25) * (c_in / 4) * (c_out / 4) + c_in * c_out)
            }
        }
    }
}

fn positive(args: &[u64]) -> Result<()> {
    if args.iter().any(|&v| v == 0) {
        return Err(Error::Domain(format!("formula arguments must be positive: {args:?}")));
    }
    Ok(())
}

/// Learnable scalar count per named parameter.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ParamTable {
    pub rows: Vec<(String, usize)>,
    pub total: usize,
}

impl ParamTable {
    /// Sum over parameters whose name starts with `prefix`.
    pub fn subtotal(&self, prefix: &str) -> usize {
        self.rows
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, c)| c)
            .sum()
    }
}

impl fmt::Display for ParamTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|(n, _)| n.len()).max().unwrap_or(5).max(5);
        for (name, count) in &self.rows {
            writeln!(f, "{name:<width$}  {count:>10}")?;
        }
        write!(f, "{:<width$}  {:>10}", "total", self.total)
    }
}

/// Counts every learnable scalar (weights, biases, BN γ/β). BN running
/// statistics are buffers and are not counted.
pub fn count_actual_params<T: Scalar, M: Module<T> + ?Sized>(module: &M) -> ParamTable {
    let mut table = ParamTable::default();
    module.visit_params(&mut |p| {
        table.rows.push((p.name.clone(), p.numel()));
        table.total += p.numel();
    });
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::ErrcBlock;
    use crate::nn::Dense;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reference_values() {
        assert_eq!(ParamFormula::Conv { k: 3, c_in: 128, c_out: 256 }.evaluate().unwrap(), 294_912);
        assert_eq!(ParamFormula::Errc { c_in: 128, c_out: 256 }.evaluate().unwrap(), 102_400);
        assert_eq!(
            ParamFormula::InvertedResidual { k: 3, a: 3, c_in: 128, c_out: 256 }.evaluate().unwrap(),
            148_608
        );
        assert_eq!(294_912.0 / 102_400.0, 2.88);
    }

    #[test]
    fn divisibility_is_enforced() {
        assert!(matches!(ParamFormula::Errc { c_in: 6, c_out: 8 }.evaluate(), Err(Error::Domain(_))));
        assert!(ParamFormula::Conv { k: 0, c_in: 1, c_out: 1 }.evaluate().is_err());
    }

    #[test]
    fn ratio_is_channel_independent() {
        for c in (8..=256).step_by(8) {
            let conv = ParamFormula::Conv { k: 3, c_in: c, c_out: c }.evaluate().unwrap();
            let errc = ParamFormula::Errc { c_in: c, c_out: c }.evaluate().unwrap();
            // 9c² / (50c²/16) = 2.88 exactly; compare as integers.
            assert_eq!(conv * 100, errc * 288, "c = {c}");
        }
    }

    #[test]
    fn counted_errc_weights_match_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let block = ErrcBlock::<f32>::new("e", 128, 128, &mut rng).unwrap();
        let table = count_actual_params(&block);
        assert_eq!(table.total, 51_200);
        assert_eq!(table.total as u64, ParamFormula::Errc { c_in: 128, c_out: 128 }.evaluate().unwrap());
    }

    #[test]
    fn dense_with_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let fc = Dense::<f32>::new("fc", 10, 2, &mut rng).unwrap();
        assert_eq!(count_actual_params(&fc).total, 22);
    }
}
