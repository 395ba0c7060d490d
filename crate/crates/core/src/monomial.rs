//! Taylor-monomial feature map.
//!
//! A [`MonomialBasis`] enumerates every monomial of total degree `0..=r` over
//! `n` inputs. The ordering is fixed: the constant term first, then one block
//! per degree. Each degree block is produced from the previous one by
//! multiplying input `i` into the tail of the previous block that starts at
//! the first term whose leading variable is `i`. For three inputs and order 2
//! this gives
//!
//! ```text
//! [1; x1; x2; x3; x1^2; x1x2; x1x3; x2^2; x2x3; x3^2]
//! ```
//!
//! Masks and knowledge matrices index monomials positionally, so the ordering
//! is part of the public contract and tagged with [`ORDERING_ID`].

use std::fmt;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// Tag identifying the canonical term ordering produced by [`MonomialBasis::new`].
pub const ORDERING_ID: &str = "graded-tail-product/v1";

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ExponentVector {
    exponents: Vec<u32>,
}

impl ExponentVector {
    pub fn new(exponents: Vec<u32>) -> Self {
        Self { exponents }
    }

    pub fn zero(n: usize) -> Self {
        Self {
            exponents: vec![0; n],
        }
    }

    pub fn unit(n: usize, i: usize) -> Self {
        let mut e = Self::zero(n);
        e.exponents[i] = 1;
        e
    }

    pub fn exponents(&self) -> &[u32] {
        &self.exponents
    }

    pub fn degree(&self) -> u32 {
        self.exponents.iter().sum()
    }

    pub fn is_constant(&self) -> bool {
        self.exponents.iter().all(|&e| e == 0)
    }

    /// Indices of the variables with a nonzero exponent.
    pub fn support(&self) -> impl Iterator<Item = usize> + '_ {
        self.exponents
            .iter()
            .enumerate()
            .filter(|(_, &e)| e > 0)
            .map(|(i, _)| i)
    }

    /// Smallest variable index with a nonzero exponent.
    fn leading(&self) -> Option<usize> {
        self.support().next()
    }

    fn times_variable(&self, i: usize) -> Self {
        let mut e = self.clone();
        e.exponents[i] += 1;
        e
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.exponents
            .iter()
            .zip(x)
            .filter(|(&e, _)| e > 0)
            .map(|(&e, &xi)| xi.powi(e as i32))
            .product()
    }

    /// Human-readable form, e.g. `x1^2*x3`.
    pub fn display_with(&self, names: &[String]) -> String {
        if self.is_constant() {
            return "1".to_string();
        }
        self.support()
            .map(|i| match self.exponents[i] {
                1 => names[i].clone(),
                e => format!("{}^{}", names[i], e),
            })
            .collect::<Vec<_>>()
            .join("*")
    }
}

impl fmt::Display for ExponentVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.exponents.iter().map(|e| e.to_string()).collect();
        write!(f, "({})", parts.join(","))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonomialBasis {
    input_dim: usize,
    order: u32,
    terms: Vec<ExponentVector>,
    ordering_id: &'static str,
}

impl MonomialBasis {
    pub fn new(input_dim: usize, order: u32) -> Result<Self> {
        if input_dim == 0 {
            return Err(Error::InvalidArgument("input_dim must be >= 1".into()));
        }
        if order == 0 {
            return Err(Error::InvalidArgument("order must be >= 1".into()));
        }
        let expected = basis_len(input_dim, order)?;

        let mut block: Vec<ExponentVector> = (0..input_dim)
            .map(|i| ExponentVector::unit(input_dim, i))
            .collect();
        let mut terms = Vec::with_capacity(expected as usize);
        terms.push(ExponentVector::zero(input_dim));
        terms.extend(block.iter().cloned());

        for _ in 2..=order {
            let mut next = Vec::new();
            for i in 0..input_dim {
                // Leading variables are non-decreasing within a block, so the
                // terms with lead >= i form a tail.
                let start = block
                    .iter()
                    .position(|t| t.leading().is_some_and(|l| l >= i))
                    .unwrap_or(block.len());
                next.extend(block[start..].iter().map(|t| t.times_variable(i)));
            }
            terms.extend(next.iter().cloned());
            block = next;
        }
        debug_assert_eq!(terms.len() as u64, expected);

        Ok(Self {
            input_dim,
            order,
            terms,
            ordering_id: ORDERING_ID,
        })
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn terms(&self) -> &[ExponentVector] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    pub fn ordering_id(&self) -> &'static str {
        self.ordering_id
    }

    /// Position of a given exponent vector, if present.
    pub fn index_of(&self, e: &ExponentVector) -> Option<usize> {
        self.terms.iter().position(|t| t == e)
    }

    /// Position of the degree-1 term for input `i` (always `1 + i`).
    pub fn linear_index(&self, i: usize) -> usize {
        1 + i
    }

    fn check_dim(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim {
            return Err(Error::DimensionMismatch {
                expected: self.input_dim,
                actual: x.len(),
            });
        }
        Ok(())
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<DVector<f64>> {
        self.check_dim(x)?;
        Ok(DVector::from_iterator(
            self.terms.len(),
            self.terms.iter().map(|t| t.eval(x)),
        ))
    }

    /// `len(terms) x n` matrix of partial derivatives of each monomial.
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        self.check_dim(x)?;
        let mut jac = DMatrix::zeros(self.terms.len(), self.input_dim);
        for (k, term) in self.terms.iter().enumerate() {
            let e = term.exponents();
            for i in term.support() {
                let mut d = e[i] as f64 * x[i].powi(e[i] as i32 - 1);
                for j in term.support().filter(|&j| j != i) {
                    d *= x[j].powi(e[j] as i32);
                }
                jac[(k, i)] = d;
            }
        }
        Ok(jac)
    }
}

/// Number of monomials of degree exactly `s` in `n` variables, `C(n+s-1, s)`.
pub fn degree_count(n: usize, s: u32) -> Result<u64> {
    let mut c: u64 = 1;
    for k in 1..=s as u64 {
        // C(n-1+k, k) = C(n-1+k-1, k-1) * (n-1+k) / k, exact at each step.
        c = c
            .checked_mul(n as u64 - 1 + k)
            .ok_or(Error::Overflow("monomial count"))?
            / k;
    }
    Ok(c)
}

/// Closed-form length of the basis including the constant term.
pub fn basis_len(n: usize, r: u32) -> Result<u64> {
    if n == 0 || r == 0 {
        return Err(Error::InvalidArgument("basis_len needs n >= 1, r >= 1".into()));
    }
    (1..=r).try_fold(1u64, |acc, s| {
        acc.checked_add(degree_count(n, s)?)
            .ok_or(Error::Overflow("monomial count"))
    })
}

/// Difference in augmented-feature count between a single layer of order `r`
/// and a cascade whose orders multiply to `r`.
///
/// `intermediate_dims[v]` is the output width of cascade layer `v`, which is
/// the input width of layer `v + 1`.
pub fn cascade_complexity_difference(
    n: usize,
    r: u32,
    intermediate_dims: &[usize],
    orders: &[u32],
) -> Result<i64> {
    check_cascade_plan(r, intermediate_dims, orders)?;
    let single = basis_len(n, r)? as i64;
    let mut cascade = basis_len(n, orders[0])? as i64;
    for (dim, &order) in intermediate_dims.iter().zip(&orders[1..]) {
        cascade += basis_len(*dim, order)? as i64;
    }
    Ok(single - cascade)
}

/// The same difference, evaluated term by term from the closed form
/// `sum_{s=r1+1}^{r} C(n+s-1,s) - sum_v sum_{s=1}^{r_{v+1}} C(n_v+s-1,s) + 1 - d`.
pub fn cascade_complexity_closed_form(
    n: usize,
    r: u32,
    intermediate_dims: &[usize],
    orders: &[u32],
) -> Result<i64> {
    check_cascade_plan(r, intermediate_dims, orders)?;
    let d = orders.len() as i64;
    let mut total: i64 = 0;
    for s in orders[0] + 1..=r {
        total += degree_count(n, s)? as i64;
    }
    for (dim, &order) in intermediate_dims.iter().zip(&orders[1..]) {
        for s in 1..=order {
            total -= degree_count(*dim, s)? as i64;
        }
    }
    Ok(total + 1 - d)
}

fn check_cascade_plan(r: u32, intermediate_dims: &[usize], orders: &[u32]) -> Result<()> {
    if orders.len() != intermediate_dims.len() + 1 {
        return Err(Error::InvalidArgument(format!(
            "{} orders need {} intermediate dims, got {}",
            orders.len(),
            orders.len().saturating_sub(1),
            intermediate_dims.len()
        )));
    }
    if orders.contains(&0) || intermediate_dims.contains(&0) {
        return Err(Error::InvalidArgument("orders and dims must be positive".into()));
    }
    let product = orders
        .iter()
        .try_fold(1u32, |acc, &o| acc.checked_mul(o))
        .ok_or(Error::Overflow("order product"))?;
    if product != r {
        return Err(Error::InvalidArgument(format!(
            "product of cascade orders is {product}, expected {r}"
        )));
    }
    Ok(())
}
