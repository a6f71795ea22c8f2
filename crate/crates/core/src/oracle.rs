//! High-precision reference arithmetic for validating the penalty formulas.
//!
//! Only compiled for tests (or under the `testkit` feature for the
//! acceptance suite). Values are 192-bit fixed point, so `exp`/`ln`/`pow`
//! carry ~58 decimal digits — far beyond the 1e-9 comparison tolerance —
//! and the evaluation path shares nothing with the `f64::powf` production
//! code it checks.

use num_bigint::BigInt;
use num_bigint::Sign;

const PREC: u32 = 192;

#[derive(Clone, Debug, PartialEq)]
pub struct BigFixed(BigInt);

impl BigFixed {
    pub fn zero() -> Self {
        BigFixed(BigInt::from(0))
    }

    pub fn one() -> Self {
        BigFixed(BigInt::from(1) << PREC)
    }

    /// Exact conversion: every finite f64 is a dyadic rational.
    pub fn from_f64(x: f64) -> Self {
        assert!(x.is_finite(), "non-finite input {x}");
        if x == 0.0 {
            return Self::zero();
        }
        let bits = x.to_bits();
        let sign = if bits >> 63 == 1 { -1 } else { 1 };
        let exponent = ((bits >> 52) & 0x7ff) as i64;
        let fraction = bits & ((1u64 << 52) - 1);
        let (mantissa, exp2) = if exponent == 0 {
            (fraction, -1074i64)
        } else {
            (fraction | (1 << 52), exponent - 1075)
        };
        let mut v = BigInt::from(mantissa) * sign;
        let shift = exp2 + PREC as i64;
        if shift >= 0 {
            v <<= shift as u32;
        } else {
            v >>= (-shift) as u32;
        }
        BigFixed(v)
    }

    pub fn to_f64(&self) -> f64 {
        // BigInt -> f64 rounds to 53 bits; dividing by the exact power of
        // two rescales without further error.
        let approx = to_f64_approx(&self.0);
        approx / 2f64.powi(PREC as i32)
    }

    pub fn is_zero(&self) -> bool {
        self.0.sign() == Sign::NoSign
    }

    pub fn abs(&self) -> Self {
        BigFixed(self.0.clone().into_parts().1.into())
    }

    pub fn add(&self, rhs: &Self) -> Self {
        BigFixed(&self.0 + &rhs.0)
    }

    pub fn sub(&self, rhs: &Self) -> Self {
        BigFixed(&self.0 - &rhs.0)
    }

    pub fn mul(&self, rhs: &Self) -> Self {
        BigFixed((&self.0 * &rhs.0) >> PREC)
    }

    pub fn div(&self, rhs: &Self) -> Self {
        assert!(!rhs.is_zero(), "division by zero");
        BigFixed((&self.0 << PREC) / &rhs.0)
    }

    fn from_u64(v: u64) -> Self {
        BigFixed(BigInt::from(v) << PREC)
    }

    /// Natural log for strictly positive values. Range-reduces to [1, 2)
    /// and sums the atanh series.
    pub fn ln(&self) -> Self {
        assert!(self.0.sign() == Sign::Plus, "ln of non-positive value");
        let one = BigInt::from(1) << PREC;
        let mut m = self.0.clone();
        let mut k: i64 = 0;
        while m >= (&one << 1) {
            m >>= 1;
            k += 1;
        }
        while m < one {
            m <<= 1;
            k -= 1;
        }
        let m = BigFixed(m);
        // ln(m) = 2 atanh(t), t = (m-1)/(m+1), |t| <= 1/3 on [1, 2)
        let t = m.sub(&Self::one()).div(&m.add(&Self::one()));
        let t2 = t.mul(&t);
        let mut term = t.clone();
        let mut sum = Self::zero();
        let mut n: u64 = 1;
        while !term.is_zero() && n < 4000 {
            sum = sum.add(&term.div(&Self::from_u64(n)));
            term = term.mul(&t2);
            n += 2;
        }
        let ln_m = sum.add(&sum);
        let ln2 = Self::ln2();
        let k_ln2 = if k >= 0 {
            ln2.mul(&Self::from_u64(k as u64))
        } else {
            Self::zero().sub(&ln2.mul(&Self::from_u64((-k) as u64)))
        };
        ln_m.add(&k_ln2)
    }

    fn ln2() -> Self {
        // 2 atanh(1/3)
        let third = Self::one().div(&Self::from_u64(3));
        let t2 = third.mul(&third);
        let mut term = third.clone();
        let mut sum = Self::zero();
        let mut n: u64 = 1;
        while !term.is_zero() && n < 4000 {
            sum = sum.add(&term.div(&Self::from_u64(n)));
            term = term.mul(&t2);
            n += 2;
        }
        sum.add(&sum)
    }

    /// Exponential via ln2 range reduction and the Taylor series.
    pub fn exp(&self) -> Self {
        let ln2 = Self::ln2();
        // k = round(x / ln2)
        let q = self.div(&ln2);
        let half = BigFixed(BigInt::from(1) << (PREC - 1));
        let k_big = (&q.add(&half).0) >> PREC;
        let k: i64 = i64::try_from(&k_big).expect("exponent reduction out of range");
        let k_fixed = if k >= 0 {
            Self::from_u64(k as u64)
        } else {
            Self::zero().sub(&Self::from_u64((-k) as u64))
        };
        let r = self.sub(&ln2.mul(&k_fixed));
        let mut term = Self::one();
        let mut sum = Self::one();
        let mut n: u64 = 1;
        loop {
            term = term.mul(&r).div(&Self::from_u64(n));
            if term.is_zero() || n > 500 {
                break;
            }
            sum = sum.add(&term);
            n += 1;
        }
        if k >= 0 {
            BigFixed(sum.0 << k as u32)
        } else {
            BigFixed(sum.0 >> (-k) as u32)
        }
    }

    /// `base^e` for `base >= 0` with the 0^0 = 1 convention.
    pub fn pow(base: &Self, e: &Self) -> Self {
        if base.is_zero() {
            return if e.is_zero() {
                Self::one()
            } else {
                Self::zero()
            };
        }
        if e.is_zero() {
            return Self::one();
        }
        e.mul(&base.ln()).exp()
    }
}

fn to_f64_approx(v: &BigInt) -> f64 {
    let (sign, mag) = v.clone().into_parts();
    let bits = mag.bits();
    let f = if bits <= 63 {
        u64::try_from(&mag).unwrap() as f64
    } else {
        let shift = bits - 63;
        let top = u64::try_from(&(mag >> shift)).unwrap() as f64;
        top * 2f64.powi(shift as i32)
    };
    match sign {
        Sign::Minus => -f,
        _ => f,
    }
}

/// Reference evaluation of `160^u + |0.5 - 80u|^u`.
///
/// The base `|0.5 - 80u|` is formed in f64 — that elementary arithmetic is
/// part of the formula's definition over f64 inputs (at u = 0.00625 the
/// product rounds to exactly 0.5 and the term vanishes) — and the powers are
/// then evaluated in 192-bit fixed point.
pub fn utilization_penalty_ref(u: f64) -> f64 {
    let e = BigFixed::from_f64(u);
    let first = BigFixed::pow(&BigFixed::from_f64(160.0), &e);
    let base = (0.5 - 80.0 * u).abs();
    let second = BigFixed::pow(&BigFixed::from_f64(base), &e);
    first.add(&second).to_f64()
}

/// Reference evaluation of the combined penalty.
pub fn penalty_total_ref(
    avg_cpu: f64,
    avg_mem: f64,
    needs_cold_start: bool,
    bias: f64,
    cold_penalty: f64,
    cost_penalty: f64,
) -> f64 {
    let e_cpu = BigFixed::from_f64(avg_cpu);
    let e_mem = BigFixed::from_f64(avg_mem);
    let cpu = BigFixed::pow(&BigFixed::from_f64(160.0), &e_cpu).add(&BigFixed::pow(
        &BigFixed::from_f64((0.5 - 80.0 * avg_cpu).abs()),
        &e_cpu,
    ));
    let mem = BigFixed::pow(&BigFixed::from_f64(160.0), &e_mem).add(&BigFixed::pow(
        &BigFixed::from_f64((0.5 - 80.0 * avg_mem).abs()),
        &e_mem,
    ));
    let cold = if needs_cold_start {
        BigFixed::from_f64(cold_penalty)
    } else {
        BigFixed::zero()
    };
    let bias_fx = BigFixed::from_f64(bias);
    let inv_bias = BigFixed::one().sub(&bias_fx);
    let perf = cpu.add(&mem).add(&cold).mul(&bias_fx);
    let cost = BigFixed::from_f64(cost_penalty).mul(&inv_bias);
    perf.add(&cost).to_f64()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_f64_round_trip() {
        for x in [0.0, 1.0, -2.5, 0.1, 160.0, 70.517, 1e-12] {
            let fx = BigFixed::from_f64(x);
            assert!((fx.to_f64() - x).abs() <= x.abs() * 1e-15);
        }
    }

    #[test]
    fn ln_and_exp_invert() {
        for x in [0.5, 1.0, 2.0, 21.1, 160.0] {
            let fx = BigFixed::from_f64(x);
            let back = fx.ln().exp().to_f64();
            assert!(
                ((back - x) / x).abs() < 1e-14,
                "exp(ln({x})) = {back}"
            );
        }
    }

    #[test]
    fn pow_reproduces_known_values() {
        // 2^10 = 1024, 160^0 = 1, 9^0.5 = 3
        let two = BigFixed::from_f64(2.0);
        let ten = BigFixed::from_f64(10.0);
        assert!((BigFixed::pow(&two, &ten).to_f64() - 1024.0).abs() < 1e-10);
        let any = BigFixed::from_f64(160.0);
        assert_eq!(BigFixed::pow(&any, &BigFixed::zero()).to_f64(), 1.0);
        let nine = BigFixed::from_f64(9.0);
        let half = BigFixed::from_f64(0.5);
        assert!((BigFixed::pow(&nine, &half).to_f64() - 3.0).abs() < 1e-13);
    }

    #[test]
    fn zero_base_conventions() {
        let z = BigFixed::zero();
        assert_eq!(BigFixed::pow(&z, &BigFixed::zero()).to_f64(), 1.0);
        assert_eq!(BigFixed::pow(&z, &BigFixed::from_f64(0.3)).to_f64(), 0.0);
    }

    #[test]
    fn reference_values_match_external_computation() {
        // Cross-checked against a 50-digit decimal evaluation.
        let cases = [
            (0.0, 2.0),
            (0.27, 6.214532732890873),
            (0.17, 3.9183271734040055),
            (0.00625, 1.0322282719454284),
            (0.1, 2.8843864141770644),
            (0.5, 18.934013185661785),
        ];
        for (u, want) in cases {
            let got = utilization_penalty_ref(u);
            assert!(
                ((got - want) / want).abs() < 1e-12,
                "u = {u}: got {got}, want {want}"
            );
        }
        let total = penalty_total_ref(0.27, 0.17, true, 0.5, 100.0, 200.0);
        assert!(((total - 155.06642995314744) / total).abs() < 1e-12);
    }
}
