//! Paired t-test with a self-contained Student t distribution.

use std::fmt;
use std::str::FromStr;

use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sides {
    /// Alternative: mean(a - b) > 0.
    One,
    Two,
}

impl FromStr for Sides {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "one" => Ok(Sides::One),
            "two" => Ok(Sides::Two),
            _ => Err(format!("expected one|two, got {s:?}")),
        }
    }
}

impl fmt::Display for Sides {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sides::One => "one",
            Sides::Two => "two",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub df: f64,
    pub p: f64,
    pub mean_diff: f64,
    /// The differences have zero variance; `t` is 0 or infinite and `p`
    /// is 1 or 0 accordingly.
    pub degenerate: bool,
}

const LANCZOS_G: f64 = 7.0;
const LANCZOS: [f64; 9] = [
    0.999_999_999_999_809_9,
    676.520_368_121_885_1,
    -1_259.139_216_722_402_8,
    771.323_428_777_653_1,
    -176.615_029_162_140_6,
    12.507_343_278_686_905,
    -0.138_571_095_265_720_12,
    9.984_369_578_019_572e-6,
    1.505_632_735_149_311_6e-7,
];

/// `ln Γ(x)` for `x > 0` (Lanczos approximation).
pub fn ln_gamma(x: f64) -> f64 {
    if x < 0.5 {
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = LANCZOS[0];
    let t = x + LANCZOS_G + 0.5;
    for (i, &c) in LANCZOS.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const TINY: f64 = 1e-300;
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < TINY {
        d = TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..10_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < TINY {
            d = TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < TINY {
            c = TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < 1e-16 {
            break;
        }
    }
    h
}

/// Regularized incomplete beta `I_x(a, b)`.
pub fn beta_reg(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (1.0 - x).ln();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

/// Student t cumulative distribution function.
pub fn student_t_cdf(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return if t > 0.0 { 1.0 } else { 0.0 };
    }
    let tail = 0.5 * beta_reg(df / 2.0, 0.5, df / (df + t * t));
    if t >= 0.0 {
        1.0 - tail
    } else {
        tail
    }
}

/// Paired t-test on `a - b`.
pub fn paired_ttest(a: &[f64], b: &[f64], sides: Sides) -> Result<TTest, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::Length { expected: a.len(), found: b.len() });
    }
    let n = a.len();
    if n < 2 {
        return Err(EvalError::TooFewPairs(n));
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let nf = n as f64;
    let mean = d.iter().sum::<f64>() / nf;
    let var = d.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let df = nf - 1.0;
    if var == 0.0 || var.sqrt() <= 1e-12 * mean.abs() {
        let (t, p) = if mean == 0.0 { (0.0, 1.0) } else { (mean.signum() * f64::INFINITY, 0.0) };
        let p = match sides {
            Sides::Two => p,
            Sides::One if t > 0.0 => 0.0,
            Sides::One if t < 0.0 => 1.0,
            Sides::One => 1.0,
        };
        return Ok(TTest { t, df, p, mean_diff: mean, degenerate: true });
    }
    let t = mean / (var / nf).sqrt();
    let p = match sides {
        Sides::Two => 2.0 * (1.0 - student_t_cdf(t.abs(), df)),
        Sides::One => 1.0 - student_t_cdf(t, df),
    };
    Ok(TTest { t, df, p: p.clamp(0.0, 1.0), mean_diff: mean, degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, StudentsT};

    #[test]
    fn textbook_example() {
        let r = paired_ttest(&[2.0, 2.0, 2.0, 0.0], &[1.0, 1.0, 1.0, 1.0], Sides::Two).unwrap();
        assert!((r.t - 1.0).abs() < 1e-12);
        assert_eq!(r.df, 3.0);
        // closed form for df = 3: 2 (1 - F(1)) = 2/3 - sqrt(3) / (2 pi)
        let exact = 2.0 / 3.0 - 3f64.sqrt() / (2.0 * std::f64::consts::PI);
        assert!((r.p - exact).abs() < 1e-12, "{} vs {exact}", r.p);
        let one = paired_ttest(&[2.0, 2.0, 2.0, 0.0], &[1.0, 1.0, 1.0, 1.0], Sides::One).unwrap();
        assert!((one.p - r.p / 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_cases() {
        let r = paired_ttest(&[0.5, 0.7, 0.9], &[0.5, 0.7, 0.9], Sides::Two).unwrap();
        assert!(r.degenerate);
        assert_eq!(r.p, 1.0);
        assert!(paired_ttest(&[1.0], &[2.0], Sides::Two).is_err());
        assert!(paired_ttest(&[1.0, 2.0], &[2.0], Sides::Two).is_err());
    }

    #[test]
    fn cdf_matches_reference() {
        for &df in &[1.0, 2.0, 3.0, 7.5, 30.0, 200.0] {
            let reference = StudentsT::new(0.0, 1.0, df).unwrap();
            for i in -40..=40 {
                let t = i as f64 * 0.25;
                let ours = student_t_cdf(t, df);
                assert!((ours - reference.cdf(t)).abs() < 1e-10, "df={df} t={t}: {ours} vs {}", reference.cdf(t));
            }
        }
    }

    #[test]
    fn ln_gamma_values() {
        assert!(ln_gamma(1.0).abs() < 1e-14);
        assert!((ln_gamma(0.5) - std::f64::consts::PI.sqrt().ln()).abs() < 1e-14);
        assert!((ln_gamma(10.0) - 362_880f64.ln()).abs() < 1e-12);
    }
}
