//! Small numeric helpers shared across modules.

/// Pairwise summation; deterministic and more accurate than a running sum
/// for long vectors.
pub fn pairwise_sum(v: &[f64]) -> f64 {
    if v.len() <= 32 {
        return v.iter().sum();
    }
    let mid = v.len() / 2;
    pairwise_sum(&v[..mid]) + pairwise_sum(&v[mid..])
}

/// Squared Euclidean norm via pairwise summation.
pub fn norm_sq(v: &[f64]) -> f64 {
    pairwise_block(v, |x| x * x)
}

/// Dot product via pairwise summation.
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() <= 32 {
        return a.iter().zip(b).map(|(x, y)| x * y).sum();
    }
    let mid = a.len() / 2;
    dot(&a[..mid], &b[..mid]) + dot(&a[mid..], &b[mid..])
}

fn pairwise_block(v: &[f64], f: impl Fn(f64) -> f64 + Copy) -> f64 {
    if v.len() <= 32 {
        return v.iter().map(|&x| f(x)).sum();
    }
    let mid = v.len() / 2;
    pairwise_block(&v[..mid], f) + pairwise_block(&v[mid..], f)
}

/// Power ratio in decibels; 0 maps to -inf.
pub fn to_db(x: f64) -> f64 {
    10.0 * x.log10()
}

/// Variance clamp bounds applied throughout the message-passing code.
#[derive(Debug, Clone, Copy)]
pub struct VarClamp {
    pub min: f64,
    pub max: f64,
}

impl VarClamp {
    pub const DEFAULT: VarClamp = VarClamp {
        min: 1e-12,
        max: 1e12,
    };

    /// Clamps a variance into (0, max]; non-finite or non-positive values
    /// land on the nearest bound.
    pub fn apply(&self, v: f64) -> f64 {
        if !v.is_finite() {
            return if v > 0.0 { self.max } else { self.min };
        }
        v.clamp(self.min, self.max)
    }
}

impl Default for VarClamp {
    fn default() -> Self {
        Self::DEFAULT
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pairwise_matches_sequential() {
        let v: Vec<f64> = (0..1000).map(|i| (i as f64).sin()).collect();
        let seq: f64 = v.iter().sum();
        assert!((pairwise_sum(&v) - seq).abs() < 1e-9);
    }

    #[test]
    fn norm_and_dot() {
        let v = [3.0, 4.0];
        assert_eq!(norm_sq(&v), 25.0);
        assert_eq!(dot(&v, &v), 25.0);
    }

    #[test]
    fn db_of_zero_is_neg_inf() {
        assert!(to_db(0.0).is_infinite() && to_db(0.0) < 0.0);
        assert!((to_db(100.0) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn clamp_bounds() {
        let c = VarClamp::DEFAULT;
        assert_eq!(c.apply(f64::NAN), c.min);
        assert_eq!(c.apply(f64::INFINITY), c.max);
        assert_eq!(c.apply(-1.0), c.min);
        assert_eq!(c.apply(1.0), 1.0);
    }
}
