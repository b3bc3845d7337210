//! Sparse multivariate polynomials over chart coordinates.
//!
//! Polynomials are written as sums of monomials such as `-0.5*x2` or
//! `0.3*x1^2*x3`. Variables are 1-based (`x1`..`xN`).

use std::fmt;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Term {
    pub coef: f64,
    /// One exponent per variable.
    pub exps: Vec<u32>,
}

impl Term {
    fn eval(&self, x: &[f64]) -> f64 {
        let mut v = self.coef;
        for (xi, &e) in x.iter().zip(&self.exps) {
            match e {
                0 => {}
                1 => v *= xi,
                2 => v *= xi * xi,
                _ => v *= xi.powi(e as i32),
            }
        }
        v
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Polynomial {
    nvars: usize,
    terms: Vec<Term>,
}

impl Polynomial {
    pub fn zero(nvars: usize) -> Self {
        Self {
            nvars,
            terms: Vec::new(),
        }
    }

    pub fn constant(nvars: usize, c: f64) -> Self {
        let mut p = Self::zero(nvars);
        p.add_term(c, vec![0; nvars]);
        p
    }

    /// `coef * x_var` with a 0-based variable index.
    pub fn linear(nvars: usize, var: usize, coef: f64) -> Self {
        let mut exps = vec![0; nvars];
        exps[var] = 1;
        let mut p = Self::zero(nvars);
        p.add_term(coef, exps);
        p
    }

    pub fn nvars(&self) -> usize {
        self.nvars
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    pub fn is_zero(&self) -> bool {
        self.terms.is_empty()
    }

    /// Adds a monomial, merging with an existing one of equal exponents.
    pub fn add_term(&mut self, coef: f64, exps: Vec<u32>) {
        debug_assert_eq!(exps.len(), self.nvars);
        if coef == 0.0 {
            return;
        }
        if let Some(pos) = self.terms.iter().position(|t| t.exps == exps) {
            self.terms[pos].coef += coef;
            if self.terms[pos].coef == 0.0 {
                self.terms.remove(pos);
            }
        } else {
            self.terms.push(Term { coef, exps });
        }
    }

    pub fn add_scaled(&mut self, other: &Polynomial, scale: f64) {
        for t in &other.terms {
            self.add_term(scale * t.coef, t.exps.clone());
        }
    }

    pub fn mul(&self, other: &Polynomial) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for a in &self.terms {
            for b in &other.terms {
                let exps = a.exps.iter().zip(&b.exps).map(|(x, y)| x + y).collect();
                out.add_term(a.coef * b.coef, exps);
            }
        }
        out
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        self.terms.iter().map(|t| t.eval(x)).sum()
    }

    /// Partial derivative with respect to the 0-based variable `var`.
    pub fn derivative(&self, var: usize) -> Polynomial {
        let mut out = Polynomial::zero(self.nvars);
        for t in &self.terms {
            let e = t.exps[var];
            if e == 0 {
                continue;
            }
            let mut exps = t.exps.clone();
            exps[var] = e - 1;
            out.add_term(t.coef * e as f64, exps);
        }
        out
    }

    /// Total Euclidean degree (0 for the zero polynomial).
    pub fn degree(&self) -> u32 {
        self.terms
            .iter()
            .map(|t| t.exps.iter().sum::<u32>())
            .max()
            .unwrap_or(0)
    }

    /// Parses a polynomial in the variables `x1..x{nvars}`.
    pub fn parse(text: &str, nvars: usize) -> Result<Self> {
        Parser::new(text, nvars).parse()
    }
}

impl fmt::Display for Polynomial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.terms.is_empty() {
            return write!(f, "0");
        }
        for (n, t) in self.terms.iter().enumerate() {
            match (n, t.coef < 0.0) {
                (0, true) => write!(f, "-")?,
                (0, false) => {}
                (_, true) => write!(f, " - ")?,
                (_, false) => write!(f, " + ")?,
            }
            write!(f, "{}", t.coef.abs())?;
            for (v, &e) in t.exps.iter().enumerate() {
                match e {
                    0 => {}
                    1 => write!(f, "*x{}", v + 1)?,
                    _ => write!(f, "*x{}^{}", v + 1, e)?,
                }
            }
        }
        Ok(())
    }
}

struct Parser<'a> {
    src: &'a str,
    bytes: &'a [u8],
    pos: usize,
    nvars: usize,
}

impl<'a> Parser<'a> {
    fn new(src: &'a str, nvars: usize) -> Self {
        Self {
            src,
            bytes: src.as_bytes(),
            pos: 0,
            nvars,
        }
    }

    fn err(&self, msg: &str) -> Error {
        Error::Parse(format!("{msg} at offset {} in {:?}", self.pos, self.src))
    }

    fn skip_ws(&mut self) {
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_whitespace() {
            self.pos += 1;
        }
    }

    fn peek(&mut self) -> Option<u8> {
        self.skip_ws();
        self.bytes.get(self.pos).copied()
    }

    fn parse(mut self) -> Result<Polynomial> {
        let mut poly = Polynomial::zero(self.nvars);
        if self.peek().is_none() {
            return Err(self.err("empty polynomial"));
        }
        let mut sign = 1.0;
        match self.peek() {
            Some(b'-') => {
                sign = -1.0;
                self.pos += 1;
            }
            Some(b'+') => self.pos += 1,
            _ => {}
        }
        loop {
            let (coef, exps) = self.term()?;
            poly.add_term(sign * coef, exps);
            match self.peek() {
                None => break,
                Some(b'+') => sign = 1.0,
                Some(b'-') => sign = -1.0,
                Some(_) => return Err(self.err("expected '+' or '-'")),
            }
            self.pos += 1;
        }
        Ok(poly)
    }

    fn term(&mut self) -> Result<(f64, Vec<u32>)> {
        let mut coef = 1.0;
        let mut exps = vec![0u32; self.nvars];
        self.factor(&mut coef, &mut exps)?;
        loop {
            match self.peek() {
                Some(b'*') => {
                    self.pos += 1;
                    self.factor(&mut coef, &mut exps)?;
                }
                Some(b'/') => {
                    self.pos += 1;
                    self.skip_ws();
                    let d = self.number()?;
                    if d == 0.0 {
                        return Err(self.err("division by zero"));
                    }
                    coef /= d;
                }
                _ => break,
            }
        }
        Ok((coef, exps))
    }

    fn factor(&mut self, coef: &mut f64, exps: &mut [u32]) -> Result<()> {
        match self.peek() {
            Some(b'x') => {
                self.pos += 1;
                let var = self.integer()? as usize;
                if var == 0 || var > self.nvars {
                    return Err(self.err(&format!("variable x{var} out of range")));
                }
                let mut power = 1;
                if self.peek() == Some(b'^') {
                    self.pos += 1;
                    self.skip_ws();
                    power = self.integer()?;
                }
                exps[var - 1] += power;
                Ok(())
            }
            Some(c) if c.is_ascii_digit() || c == b'.' => {
                *coef *= self.number()?;
                Ok(())
            }
            _ => Err(self.err("expected a number or a variable")),
        }
    }

    fn integer(&mut self) -> Result<u32> {
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        self.src[start..self.pos]
            .parse()
            .map_err(|_| self.err("expected an integer"))
    }

    fn number(&mut self) -> Result<f64> {
        let start = self.pos;
        let b = self.bytes;
        while self.pos < b.len() && (b[self.pos].is_ascii_digit() || b[self.pos] == b'.') {
            self.pos += 1;
        }
        if self.pos < b.len() && (b[self.pos] == b'e' || b[self.pos] == b'E') {
            let save = self.pos;
            self.pos += 1;
            if self.pos < b.len() && (b[self.pos] == b'+' || b[self.pos] == b'-') {
                self.pos += 1;
            }
            let digits = self.pos;
            while self.pos < b.len() && b[self.pos].is_ascii_digit() {
                self.pos += 1;
            }
            if digits == self.pos {
                self.pos = save;
            }
        }
        self.src[start..self.pos]
            .parse()
            .map_err(|_| self.err("malformed number"))
    }
}
