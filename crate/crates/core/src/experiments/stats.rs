use serde::{Deserialize, Serialize};

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample standard deviation; undefined below two values.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// Paired sign test on `(a, b)` pairs, counting pairs where `a < b` as wins.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignTest {
    pub wins: usize,
    pub losses: usize,
    pub ties: usize,
    /// Two-sided exact binomial p-value over the untied pairs.
    pub p_value: f64,
}

impl SignTest {
    pub fn new(pairs: &[(f64, f64)]) -> Self {
        let wins = pairs.iter().filter(|(a, b)| a < b).count();
        let losses = pairs.iter().filter(|(a, b)| a > b).count();
        let ties = pairs.len() - wins - losses;
        SignTest {
            wins,
            losses,
            ties,
            p_value: two_sided_binomial(wins.min(losses), wins + losses),
        }
    }

    /// Every pair favours `a`.
    pub fn unanimous(&self) -> bool {
        self.wins > 0 && self.losses == 0 && self.ties == 0
    }
}

/// `P(X <= k) + P(X >= n - k)` for `X ~ Bin(n, 1/2)`, capped at 1.
fn two_sided_binomial(k: usize, n: usize) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let mut c = 1.0;
    let mut tail = 0.0;
    for i in 0..=k {
        if i > 0 {
            c = c * (n - i + 1) as f64 / i as f64;
        }
        tail += c;
    }
    (2.0 * tail / 2f64.powi(n as i32)).min(1.0)
}
