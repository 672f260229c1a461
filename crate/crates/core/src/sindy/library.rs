use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::{Result, SindyError};

/// A set of candidate functions evaluated column-by-column on snapshots.
pub trait Library {
    fn num_vars(&self) -> usize;

    fn num_terms(&self) -> usize;

    /// Value of one candidate function at a single state.
    fn eval_term(&self, term: usize, x: &[f64]) -> f64;

    fn term_name(&self, term: usize, var_names: &[String]) -> String;

    fn eval_row(&self, x: &[f64], out: &mut [f64]) {
        for (k, slot) in out.iter_mut().enumerate() {
            *slot = self.eval_term(k, x);
        }
    }

    /// Design matrix for snapshots whose column count is already checked.
    fn eval_matrix(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        let (p, m) = features.shape();
        let mut design = DMatrix::zeros(p, self.num_terms());
        let mut x = vec![0.0; m];
        let mut row = vec![0.0; self.num_terms()];
        for i in 0..p {
            for (j, slot) in x.iter_mut().enumerate() {
                *slot = features[(i, j)];
            }
            self.eval_row(&x, &mut row);
            for (j, &v) in row.iter().enumerate() {
                design[(i, j)] = v;
            }
        }
        design
    }
}

/// All monomials of total degree `<= max_degree` in `num_vars` variables,
/// in graded-lexicographic order with the constant term first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CandidateLibrary {
    pub num_vars: usize,
    pub max_degree: u32,
    pub terms: Vec<Vec<u32>>,
}

impl CandidateLibrary {
    pub fn new(num_vars: usize, max_degree: u32) -> Result<Self> {
        if num_vars == 0 {
            return Err(SindyError::InvalidParameter(
                "library needs at least one variable".into(),
            ));
        }
        let mut terms = Vec::new();
        let mut current = vec![0; num_vars];
        for degree in 0..=max_degree {
            push_exponents(&mut terms, &mut current, 0, degree);
        }
        Ok(Self {
            num_vars,
            max_degree,
            terms,
        })
    }

    /// Rebuilds a library from stored terms, checking they are exactly the
    /// grlex enumeration for the stated size.
    pub fn from_terms(num_vars: usize, max_degree: u32, terms: Vec<Vec<u32>>) -> Result<Self> {
        let expected = Self::new(num_vars, max_degree)?;
        if expected.terms != terms {
            return Err(SindyError::InvalidModel(format!(
                "terms do not match the degree-{max_degree} library in {num_vars} variables"
            )));
        }
        Ok(expected)
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }
}

// Exponents at `var` run from `remaining` down to 0, so x1 outranks x2.
fn push_exponents(out: &mut Vec<Vec<u32>>, current: &mut [u32], var: usize, remaining: u32) {
    if var + 1 == current.len() {
        current[var] = remaining;
        out.push(current.to_vec());
        return;
    }
    for e in (0..=remaining).rev() {
        current[var] = e;
        push_exponents(out, current, var + 1, remaining - e);
    }
    current[var] = 0;
}

fn monomial(exponents: &[u32], x: &[f64]) -> f64 {
    exponents
        .iter()
        .zip(x)
        .filter(|(e, _)| **e > 0)
        .fold(1.0, |acc, (&e, &v)| acc * v.powi(e as i32))
}

fn monomial_name(exponents: &[u32], var_names: &[String]) -> String {
    let parts: Vec<String> = exponents
        .iter()
        .zip(var_names)
        .filter(|(e, _)| **e > 0)
        .map(|(&e, n)| if e == 1 { n.clone() } else { format!("{n}^{e}") })
        .collect();
    if parts.is_empty() {
        "1".into()
    } else {
        parts.join(" ")
    }
}

impl Library for CandidateLibrary {
    fn num_vars(&self) -> usize {
        self.num_vars
    }

    fn num_terms(&self) -> usize {
        self.terms.len()
    }

    fn eval_term(&self, term: usize, x: &[f64]) -> f64 {
        monomial(&self.terms[term], x)
    }

    fn term_name(&self, term: usize, var_names: &[String]) -> String {
        monomial_name(&self.terms[term], var_names)
    }

    fn eval_row(&self, x: &[f64], out: &mut [f64]) {
        // Power table: powers[i * (d + 1) + e] = x_i^e.
        let d = self.max_degree as usize + 1;
        let mut powers = vec![1.0; self.num_vars * d];
        for (i, &v) in x.iter().enumerate() {
            for e in 1..d {
                powers[i * d + e] = powers[i * d + e - 1] * v;
            }
        }
        for (slot, term) in out.iter_mut().zip(&self.terms) {
            *slot = term
                .iter()
                .enumerate()
                .filter(|(_, e)| **e > 0)
                .fold(1.0, |acc, (i, &e)| acc * powers[i * d + e as usize]);
        }
    }

    fn eval_matrix(&self, features: &DMatrix<f64>) -> DMatrix<f64> {
        // Column-wise: every term is a product of per-variable power columns.
        let p = features.nrows();
        let d = self.max_degree as usize + 1;
        let mut powers = vec![vec![1.0; p]; self.num_vars * d];
        for i in 0..self.num_vars {
            for e in 1..d {
                let (lo, hi) = powers.split_at_mut(i * d + e);
                for ((out, prev), x) in hi[0].iter_mut().zip(&lo[i * d + e - 1]).zip(features.column(i).iter()) {
                    *out = prev * x;
                }
            }
        }
        let mut design = DMatrix::from_element(p, self.terms.len(), 1.0);
        for (k, term) in self.terms.iter().enumerate() {
            let mut col = design.column_mut(k);
            let col = col.as_mut_slice();
            for (i, &e) in term.iter().enumerate().filter(|(_, e)| **e > 0) {
                for (c, v) in col.iter_mut().zip(&powers[i * d + e as usize]) {
                    *c *= v;
                }
            }
        }
        design
    }
}

/// Non-polynomial candidate columns.
#[derive(Debug, Clone)]
pub enum ExtraTerm {
    Sin(usize),
    Cos(usize),
    Exp(usize),
    Custom { name: String, f: fn(&[f64]) -> f64 },
}

impl ExtraTerm {
    fn eval(&self, x: &[f64]) -> f64 {
        match self {
            ExtraTerm::Sin(i) => x[*i].sin(),
            ExtraTerm::Cos(i) => x[*i].cos(),
            ExtraTerm::Exp(i) => x[*i].exp(),
            ExtraTerm::Custom { f, .. } => f(x),
        }
    }

    fn name(&self, var_names: &[String]) -> String {
        match self {
            ExtraTerm::Sin(i) => format!("sin({})", var_names[*i]),
            ExtraTerm::Cos(i) => format!("cos({})", var_names[*i]),
            ExtraTerm::Exp(i) => format!("exp({})", var_names[*i]),
            ExtraTerm::Custom { name, .. } => name.clone(),
        }
    }
}

/// A polynomial library with extra columns appended after the monomials.
#[derive(Debug, Clone)]
pub struct AugmentedLibrary {
    pub base: CandidateLibrary,
    pub extra: Vec<ExtraTerm>,
}

impl AugmentedLibrary {
    pub fn new(base: CandidateLibrary, extra: Vec<ExtraTerm>) -> Result<Self> {
        for term in &extra {
            if let ExtraTerm::Sin(i) | ExtraTerm::Cos(i) | ExtraTerm::Exp(i) = term {
                if *i >= base.num_vars {
                    return Err(SindyError::InvalidParameter(format!(
                        "extra term refers to variable {i} of {}",
                        base.num_vars
                    )));
                }
            }
        }
        Ok(Self { base, extra })
    }
}

impl Library for AugmentedLibrary {
    fn num_vars(&self) -> usize {
        self.base.num_vars
    }

    fn num_terms(&self) -> usize {
        self.base.len() + self.extra.len()
    }

    fn eval_term(&self, term: usize, x: &[f64]) -> f64 {
        match term.checked_sub(self.base.len()) {
            None => self.base.eval_term(term, x),
            Some(k) => self.extra[k].eval(x),
        }
    }

    fn term_name(&self, term: usize, var_names: &[String]) -> String {
        match term.checked_sub(self.base.len()) {
            None => self.base.term_name(term, var_names),
            Some(k) => self.extra[k].name(var_names),
        }
    }
}

/// Design matrix: one row per snapshot, one column per candidate term.
pub fn evaluate_library<L: Library + ?Sized>(library: &L, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let m = features.ncols();
    if m != library.num_vars() {
        return Err(SindyError::ShapeMismatch {
            expected: format!("{} feature columns", library.num_vars()),
            found: m.to_string(),
        });
    }
    Ok(library.eval_matrix(features))
}
