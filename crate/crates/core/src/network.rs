//! Link latency functions and the parallel-link network they live on.
//!
//! Every link carries a polynomial latency `ℓ(x) = Σ c_k x^k` with nonnegative
//! coefficients and at least one non-constant term, which makes it strictly
//! increasing and convex on `[0, ∞)` and gives exact derivatives. The cost a
//! traveller sees on link `i` is `ℓ_i(x) + p_i` where `p_i` is the toll.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One `coefficient · x^power` term.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub power: u32,
    pub coefficient: f64,
}

/// Polynomial latency with nonnegative coefficients.
///
/// Terms are kept sorted by power with duplicates merged and zero terms dropped.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Term>", into = "Vec<Term>")]
pub struct LatencySpec {
    terms: Vec<Term>,
}

impl LatencySpec {
    pub fn new(terms: impl IntoIterator<Item = (u32, f64)>) -> Result<Self> {
        let mut merged: Vec<Term> = Vec::new();
        for (power, coefficient) in terms {
            if !coefficient.is_finite() || coefficient < 0.0 {
                return Err(Error::InvalidLatency(format!(
                    "coefficient of x^{power} must be finite and nonnegative, got {coefficient}"
                )));
            }
            match merged.iter_mut().find(|t| t.power == power) {
                Some(t) => t.coefficient += coefficient,
                None => merged.push(Term { power, coefficient }),
            }
        }
        merged.retain(|t| t.coefficient > 0.0);
        merged.sort_by_key(|t| t.power);
        if !merged.iter().any(|t| t.power >= 1) {
            return Err(Error::InvalidLatency(
                "latency needs a positive term of degree >= 1 to be strictly increasing".into(),
            ));
        }
        Ok(Self { terms: merged })
    }

    /// Dense coefficients, `coefficients[k]` multiplies `x^k`.
    pub fn from_coefficients(coefficients: &[f64]) -> Result<Self> {
        Self::new(coefficients.iter().enumerate().map(|(k, &c)| (k as u32, c)))
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn degree(&self) -> u32 {
        self.terms.last().map_or(0, |t| t.power)
    }

    pub fn constant(&self) -> f64 {
        self.terms
            .first()
            .filter(|t| t.power == 0)
            .map_or(0.0, |t| t.coefficient)
    }

    /// `ℓ(x)`. No domain check; callers guarantee `x >= 0`.
    #[inline]
    pub fn eval(&self, x: f64) -> f64 {
        self.terms
            .iter()
            .map(|t| t.coefficient * x.powi(t.power as i32))
            .sum()
    }

    /// `ℓ'(x)`.
    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.power >= 1)
            .map(|t| t.coefficient * t.power as f64 * x.powi(t.power as i32 - 1))
            .sum()
    }

    /// `ℓ''(x)`.
    #[inline]
    pub fn second_derivative(&self, x: f64) -> f64 {
        self.terms
            .iter()
            .filter(|t| t.power >= 2)
            .map(|t| {
                let k = t.power as f64;
                t.coefficient * k * (k - 1.0) * x.powi(t.power as i32 - 2)
            })
            .sum()
    }

    /// Marginal social cost `(x ℓ(x))' = ℓ(x) + x ℓ'(x)`.
    #[inline]
    pub fn marginal_social_cost(&self, x: f64) -> f64 {
        self.eval(x) + x * self.derivative(x)
    }

    /// Copy with `shift` added to the constant term.
    pub fn shifted(&self, shift: f64) -> Result<Self> {
        let terms = self
            .terms
            .iter()
            .map(|t| (t.power, t.coefficient))
            .chain(std::iter::once((0, shift)));
        Self::new(terms)
    }
}

impl TryFrom<Vec<Term>> for LatencySpec {
    type Error = Error;

    fn try_from(terms: Vec<Term>) -> Result<Self> {
        Self::new(terms.into_iter().map(|t| (t.power, t.coefficient)))
    }
}

impl From<LatencySpec> for Vec<Term> {
    fn from(spec: LatencySpec) -> Self {
        spec.terms
    }
}

/// Renders as comma separated `power:coefficient` pairs, e.g. `0:1, 2:1`.
impl fmt::Display for LatencySpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, t) in self.terms.iter().enumerate() {
            if k > 0 {
                f.write_str(", ")?;
            }
            write!(f, "{}:{}", t.power, t.coefficient)?;
        }
        Ok(())
    }
}

impl FromStr for LatencySpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut terms = Vec::new();
        for item in s.split(',').map(str::trim).filter(|t| !t.is_empty()) {
            let (power, coefficient) = item.split_once(':').ok_or_else(|| {
                Error::InvalidLatency(format!("expected `power:coefficient`, got `{item}`"))
            })?;
            let power = power
                .trim()
                .parse::<u32>()
                .map_err(|e| Error::InvalidLatency(format!("bad power `{power}`: {e}")))?;
            let coefficient = coefficient
                .trim()
                .parse::<f64>()
                .map_err(|e| Error::InvalidLatency(format!("bad coefficient `{coefficient}`: {e}")))?;
            terms.push((power, coefficient));
        }
        Self::new(terms)
    }
}

/// `R >= 2` parallel links between one origin and one destination.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<LatencySpec>", into = "Vec<LatencySpec>")]
pub struct ParallelNetwork {
    links: Vec<LatencySpec>,
}

impl ParallelNetwork {
    pub fn new(links: Vec<LatencySpec>) -> Result<Self> {
        if links.len() < 2 {
            return Err(Error::Parameter(format!(
                "a parallel network needs at least 2 links, got {}",
                links.len()
            )));
        }
        Ok(Self { links })
    }

    /// The experiment family `ℓ_i(x) = i x² + i` for `i = 1..=links`.
    pub fn quadratic_family(links: usize) -> Result<Self> {
        let specs = (1..=links)
            .map(|i| {
                let c = i as f64;
                LatencySpec::new([(0, c), (2, c)])
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(specs)
    }

    /// `links` copies of the same latency.
    pub fn uniform(spec: LatencySpec, links: usize) -> Result<Self> {
        Self::new(vec![spec; links])
    }

    pub fn len(&self) -> usize {
        self.links.len()
    }

    pub fn is_empty(&self) -> bool {
        self.links.is_empty()
    }

    pub fn links(&self) -> &[LatencySpec] {
        &self.links
    }

    pub fn link(&self, i: usize) -> Result<&LatencySpec> {
        self.links.get(i).ok_or(Error::LinkIndex {
            index: i,
            links: self.links.len(),
        })
    }

    /// Copy with every latency constant raised by `shift`.
    pub fn shifted(&self, shift: f64) -> Result<Self> {
        let links = self
            .links
            .iter()
            .map(|l| l.shifted(shift))
            .collect::<Result<Vec<_>>>()?;
        Self::new(links)
    }

    pub fn latency(&self, i: usize, x: f64) -> Result<f64> {
        let link = self.link(i)?;
        check_load(x)?;
        Ok(link.eval(x))
    }

    pub fn latency_derivative(&self, i: usize, x: f64) -> Result<f64> {
        let link = self.link(i)?;
        check_load(x)?;
        Ok(link.derivative(x))
    }

    /// `c_i(x, p) = ℓ_i(x) + p`.
    pub fn cost(&self, i: usize, x: f64, p: f64) -> Result<f64> {
        Ok(self.latency(i, x)? + p)
    }

    /// `x ℓ_i'(x)`, the toll that internalises the congestion externality.
    pub fn marginal_cost(&self, i: usize, x: f64) -> Result<f64> {
        Ok(x * self.latency_derivative(i, x)?)
    }

    /// Vectorised `x_i ℓ_i'(x_i)`.
    pub fn marginal_costs(&self, x: &[f64]) -> Vec<f64> {
        self.links
            .iter()
            .zip(x)
            .map(|(l, &xi)| xi * l.derivative(xi))
            .collect()
    }

    pub(crate) fn check_len(&self, v: &[f64]) -> Result<()> {
        if v.len() != self.len() {
            return Err(Error::Shape {
                expected: self.len(),
                actual: v.len(),
            });
        }
        Ok(())
    }
}

impl TryFrom<Vec<LatencySpec>> for ParallelNetwork {
    type Error = Error;

    fn try_from(links: Vec<LatencySpec>) -> Result<Self> {
        Self::new(links)
    }
}

impl From<ParallelNetwork> for Vec<LatencySpec> {
    fn from(net: ParallelNetwork) -> Self {
        net.links
    }
}

fn check_load(x: f64) -> Result<()> {
    if x.is_nan() || x < 0.0 {
        return Err(Error::Domain {
            what: "link load",
            value: x,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn six_links() -> ParallelNetwork {
        ParallelNetwork::quadratic_family(6).unwrap()
    }

    #[test]
    fn quadratic_family_values() {
        let net = six_links();
        // link 3 (index 2): 3·2² + 3
        assert_eq!(net.latency(2, 2.0).unwrap(), 15.0);
        for i in 0..6 {
            assert_eq!(net.latency(i, 0.0).unwrap(), (i + 1) as f64);
        }
        // link 2: derivative 2·2·3
        assert_eq!(net.latency_derivative(1, 3.0).unwrap(), 12.0);
        assert_eq!(net.cost(0, 1.0, 0.5).unwrap(), 2.5);
        assert_eq!(net.marginal_cost(0, 1.0).unwrap(), 2.0);
        assert_eq!(net.marginal_cost(3, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn identity_and_square() {
        let id = ParallelNetwork::uniform(LatencySpec::new([(1, 1.0)]).unwrap(), 2).unwrap();
        assert_eq!(id.latency(0, 7.0).unwrap(), 7.0);
        let sq = ParallelNetwork::uniform(LatencySpec::new([(2, 1.0)]).unwrap(), 2).unwrap();
        assert_eq!(sq.latency_derivative(1, 0.0).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_marginal_cost() {
        let net = ParallelNetwork::uniform("0:1, 2:1".parse().unwrap(), 4).unwrap();
        // x = 2/R = 0.5, x · 2x = 0.5
        assert_relative_eq!(net.marginal_cost(0, 0.5).unwrap(), 0.5, max_relative = 1e-15);
    }

    #[test]
    fn rejects_constant_and_negative_latency() {
        assert!(matches!(
            LatencySpec::new([(0, 3.0)]),
            Err(Error::InvalidLatency(_))
        ));
        assert!(LatencySpec::new([(1, 0.0), (0, 1.0)]).is_err());
        assert!(LatencySpec::new([(1, 1.0), (2, -1.0)]).is_err());
        assert!(LatencySpec::new([(1, f64::NAN)]).is_err());
    }

    #[test]
    fn domain_and_index_errors() {
        let net = six_links();
        assert!(matches!(net.latency(6, 1.0), Err(Error::LinkIndex { index: 6, .. })));
        assert!(matches!(net.latency(0, -0.1), Err(Error::Domain { .. })));
        assert!(net.latency_derivative(0, f64::NAN).is_err());
        assert!(ParallelNetwork::new(vec![LatencySpec::new([(1, 1.0)]).unwrap()]).is_err());
    }

    #[test]
    fn text_round_trip() {
        let spec: LatencySpec = "2:3, 0:3, 2:1".parse().unwrap();
        assert_eq!(spec.terms().len(), 2);
        assert_eq!(spec.to_string(), "0:3, 2:4");
        assert_eq!(spec.to_string().parse::<LatencySpec>().unwrap(), spec);
        assert!("2-3".parse::<LatencySpec>().is_err());
    }

    #[test]
    fn shift_only_touches_constant() {
        let net = six_links().shifted(2.5).unwrap();
        assert_eq!(net.latency(0, 0.0).unwrap(), 3.5);
        assert_eq!(net.latency_derivative(0, 1.0).unwrap(), 2.0);
    }

    fn arb_latency() -> impl Strategy<Value = LatencySpec> {
        (
            0.0..5.0f64,
            0.01..5.0f64,
            0.0..5.0f64,
            0.0..2.0f64,
            0.0..0.5f64,
        )
            .prop_map(|(c0, c1, c2, c3, c4)| {
                LatencySpec::from_coefficients(&[c0, c1, c2, c3, c4]).unwrap()
            })
    }

    proptest! {
        #[test]
        fn strictly_increasing(spec in arb_latency(), x in 0.0..10.0f64, dx in 1e-6..5.0f64) {
            prop_assert!(spec.eval(x) < spec.eval(x + dx));
        }

        #[test]
        fn convex(spec in arb_latency(), x in 0.5..10.0f64, h in 1e-3..0.5f64) {
            let second = spec.eval(x + h) - 2.0 * spec.eval(x) + spec.eval(x - h);
            prop_assert!(second >= -1e-9 * spec.eval(x + h).abs());
        }

        #[test]
        fn derivative_matches_central_difference(spec in arb_latency(), x in 0.0..10.0f64) {
            let h = 1e-6;
            // one-sided at the origin, the latency is only defined for x >= 0
            let fd = if x < h {
                (spec.eval(x + h) - spec.eval(x)) / h
            } else {
                (spec.eval(x + h) - spec.eval(x - h)) / (2.0 * h)
            };
            let exact = spec.derivative(x);
            let tol = if x < h { 1e-5 * exact.abs().max(1.0) } else { 1e-6 * exact.abs().max(1e-3) };
            prop_assert!((fd - exact).abs() <= tol, "fd {fd} exact {exact}");
        }

        #[test]
        fn toll_is_additive(m in -400i32..400, k in 0u32..40, i in 0usize..6) {
            // dyadic load and toll keep every intermediate exactly representable
            let net = six_links();
            let p = m as f64 / 8.0;
            let x = k as f64 / 4.0;
            prop_assert_eq!(net.cost(i, x, p).unwrap() - net.latency(i, x).unwrap(), p);
        }
    }
}
