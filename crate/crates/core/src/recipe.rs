//! Proxy recipes: a small grammar describing how to assemble a proxy
//! matrix from raw covariates, power transforms, learner fits and external
//! data.
//!
//! Terms are separated by `+` or `,` outside parentheses:
//!
//! - `raw:x1,x2` raw covariate columns (by name or 1-based index)
//! - `pow:x1^0.481+1` or `pow:(x1+1)^0.481` power transform with shift
//! - `within:<learner>` within-stratum fits, e.g. `within:tree(depth=3)`
//! - `cross:<learner>` cross-stratum fits
//! - `external` or `external:<learner>` a fit on external data
//!
//! `ols-within` and `tree-cross` style aliases are accepted.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::learners::LearnerSpec;
use crate::proxy::{
    cross_stratum_proxy_at, external_proxy, raw_covariate_proxy, stack_proxies, within_stratum_proxy_at,
    PowerTransform, ProxyMatrix, Trial,
};
use crate::rng::derive_seed;

/// Outcome data from outside the trial, with named covariate columns.
#[derive(Debug, Clone, PartialEq)]
pub struct ExternalData {
    pub x: DMatrix<f64>,
    pub y: Vec<f64>,
    pub names: Vec<String>,
}

/// A covariate reference: a name, or a 1-based position written `#3`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ColumnRef {
    Name(String),
    Position(usize),
}

impl ColumnRef {
    fn parse(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.is_empty() {
            return Err(Error::InvalidSpec("empty column reference".into()));
        }
        if let Some(num) = s.strip_prefix('#') {
            let pos: usize = num
                .parse()
                .map_err(|_| Error::InvalidSpec(format!("bad column position '{s}'")))?;
            if pos == 0 {
                return Err(Error::InvalidSpec("column positions are 1-based".into()));
            }
            return Ok(ColumnRef::Position(pos));
        }
        Ok(ColumnRef::Name(s.to_string()))
    }

    pub fn resolve(&self, names: &[String]) -> Result<usize> {
        match self {
            ColumnRef::Position(p) if *p <= names.len() => Ok(p - 1),
            ColumnRef::Position(p) => Err(Error::InvalidInput(format!(
                "column position {p} exceeds covariate count {}",
                names.len()
            ))),
            ColumnRef::Name(n) => names
                .iter()
                .position(|c| c == n)
                .ok_or_else(|| Error::InvalidInput(format!("unknown covariate '{n}'"))),
        }
    }
}

impl fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ColumnRef::Name(n) => f.write_str(n),
            ColumnRef::Position(p) => write!(f, "#{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ProxyTerm {
    Raw(Vec<ColumnRef>),
    Pow { column: ColumnRef, exponent: f64, shift: f64 },
    Within(LearnerSpec),
    Cross(LearnerSpec),
    External(LearnerSpec),
}

impl fmt::Display for ProxyTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ProxyTerm::Raw(cols) => {
                let names: Vec<String> = cols.iter().map(ToString::to_string).collect();
                write!(f, "raw:{}", names.join(","))
            }
            ProxyTerm::Pow { column, exponent, shift } if *shift < 0.0 => {
                write!(f, "pow:({column}-{})^{exponent}", -shift)
            }
            ProxyTerm::Pow { column, exponent, shift } => write!(f, "pow:({column}+{shift})^{exponent}"),
            ProxyTerm::Within(l) => write!(f, "within:{l}"),
            ProxyTerm::Cross(l) => write!(f, "cross:{l}"),
            ProxyTerm::External(l) => write!(f, "external:{l}"),
        }
    }
}

/// An ordered list of proxy terms, stacked column-wise.
#[derive(Debug, Clone, PartialEq)]
pub struct ProxyRecipe {
    pub terms: Vec<ProxyTerm>,
}

fn default_external_learner() -> LearnerSpec {
    LearnerSpec::bagged_trees(50, 6, 10)
}

fn split_top_level(s: &str) -> Result<Vec<String>> {
    let mut out = Vec::new();
    let mut depth = 0i32;
    let mut cur = String::new();
    for ch in s.chars() {
        match ch {
            '(' => {
                depth += 1;
                cur.push(ch);
            }
            ')' => {
                depth -= 1;
                if depth < 0 {
                    return Err(Error::InvalidSpec(format!("unbalanced ')' in proxy '{s}'")));
                }
                cur.push(ch);
            }
            '+' | ',' if depth == 0 => {
                out.push(std::mem::take(&mut cur));
            }
            _ => cur.push(ch),
        }
    }
    if depth != 0 {
        return Err(Error::InvalidSpec(format!("unbalanced '(' in proxy '{s}'")));
    }
    out.push(cur);
    Ok(out.into_iter().map(|t| t.trim().to_string()).collect())
}

fn parse_number(s: &str) -> Option<f64> {
    s.trim().parse::<f64>().ok().filter(|v| v.is_finite())
}

fn learner(s: &str) -> Result<LearnerSpec> {
    s.parse::<LearnerSpec>().map_err(Error::from)
}

fn parse_pow(body: &str) -> Result<ProxyTerm> {
    let (base, exp) = body
        .rsplit_once('^')
        .ok_or_else(|| Error::InvalidSpec(format!("power term '{body}' needs '^exponent'")))?;
    let exponent =
        parse_number(exp).ok_or_else(|| Error::InvalidSpec(format!("bad exponent '{exp}' in '{body}'")))?;
    let base = base.trim();
    let (column, shift) = if let Some(inner) = base.strip_prefix('(').and_then(|b| b.strip_suffix(')')) {
        let inner = inner.trim();
        match inner.rfind(['+', '-']).filter(|&i| i > 0) {
            Some(i) => {
                let shift = parse_number(&inner[i..].replace('+', ""))
                    .ok_or_else(|| Error::InvalidSpec(format!("bad shift in '{base}'")))?;
                (ColumnRef::parse(&inner[..i])?, shift)
            }
            None => (ColumnRef::parse(inner)?, 0.0),
        }
    } else {
        (ColumnRef::parse(base)?, 0.0)
    };
    Ok(ProxyTerm::Pow { column, exponent, shift })
}

impl FromStr for ProxyRecipe {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut terms: Vec<ProxyTerm> = Vec::new();
        for token in split_top_level(s)? {
            if token.is_empty() {
                return Err(Error::InvalidSpec(format!("empty term in proxy '{s}'")));
            }
            let lower = token.to_ascii_lowercase();
            if lower.starts_with("raw:") {
                terms.push(ProxyTerm::Raw(vec![ColumnRef::parse(&token[4..])?]));
            } else if lower.starts_with("pow:") {
                terms.push(parse_pow(&token[4..])?);
            } else if lower.starts_with("within:") {
                terms.push(ProxyTerm::Within(learner(&token[7..])?));
            } else if lower.starts_with("cross:") {
                terms.push(ProxyTerm::Cross(learner(&token[6..])?));
            } else if lower == "external" {
                terms.push(ProxyTerm::External(default_external_learner()));
            } else if lower.starts_with("external:") {
                terms.push(ProxyTerm::External(learner(&token[9..])?));
            } else if let Some(l) = lower.strip_suffix("-within") {
                terms.push(ProxyTerm::Within(learner(&token[..l.len()])?));
            } else if let Some(l) = lower.strip_suffix("-cross") {
                terms.push(ProxyTerm::Cross(learner(&token[..l.len()])?));
            } else if let Some(shift) = parse_number(&token) {
                match terms.last_mut() {
                    Some(ProxyTerm::Pow { shift: s0, .. }) if *s0 == 0.0 => *s0 = shift,
                    _ => {
                        return Err(Error::InvalidSpec(format!(
                            "number '{token}' must follow a power term as its shift"
                        )))
                    }
                }
            } else {
                match terms.last_mut() {
                    Some(ProxyTerm::Raw(cols)) => cols.push(ColumnRef::parse(&token)?),
                    _ => return Err(Error::InvalidSpec(format!("unrecognized proxy term '{token}'"))),
                }
            }
        }
        if terms.is_empty() {
            return Err(Error::InvalidSpec("empty proxy recipe".into()));
        }
        Ok(Self { terms })
    }
}

impl fmt::Display for ProxyRecipe {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.terms.iter().map(ToString::to_string).collect();
        f.write_str(&parts.join(" + "))
    }
}

impl ProxyRecipe {
    pub fn needs_external(&self) -> bool {
        self.terms.iter().any(|t| matches!(t, ProxyTerm::External(_)))
    }

    /// Builds the proxy on `trial` itself.
    pub fn build(&self, trial: &Trial, external: Option<&ExternalData>, seed: u64) -> Result<ProxyMatrix> {
        self.build_at(trial, trial, external, seed)
    }

    /// Builds the proxy for the units of `eval`, fitting learners on
    /// `train`. Raw and power columns are functions of `eval` only.
    pub fn build_at(&self, train: &Trial, eval: &Trial, external: Option<&ExternalData>, seed: u64) -> Result<ProxyMatrix> {
        let names = eval.covariate_names();
        let mut parts = Vec::with_capacity(self.terms.len());
        for (t, term) in self.terms.iter().enumerate() {
            let term_seed = |l: &LearnerSpec| l.with_seed(derive_seed(derive_seed(seed, t as u64), l.seed));
            let part = match term {
                ProxyTerm::Raw(cols) => {
                    let idx = cols.iter().map(|c| c.resolve(names)).collect::<Result<Vec<_>>>()?;
                    raw_covariate_proxy(eval, &idx, &[])?
                }
                ProxyTerm::Pow { column, exponent, shift } => {
                    let tr = PowerTransform {
                        index: column.resolve(names)?,
                        exponent: *exponent,
                        shift: *shift,
                    };
                    raw_covariate_proxy(eval, &[], &[tr])?
                }
                ProxyTerm::Within(l) => within_stratum_proxy_at(train, eval, &term_seed(l))?,
                ProxyTerm::Cross(l) => cross_stratum_proxy_at(train, eval, &term_seed(l))?,
                ProxyTerm::External(l) => {
                    let ext = external
                        .ok_or_else(|| Error::InvalidInput("recipe uses external data but none was supplied".into()))?;
                    let cols = ext
                        .names
                        .iter()
                        .map(|n| ColumnRef::Name(n.clone()).resolve(names))
                        .collect::<Result<Vec<_>>>()?;
                    external_proxy(eval, &ext.x, &ext.y, &term_seed(l), Some(&cols))?
                }
            };
            parts.push(part);
        }
        stack_proxies(&parts)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_mixed_recipe() {
        let r: ProxyRecipe = "raw:x + pow:(x+1)^0.481 + external".parse().unwrap();
        assert_eq!(r.terms.len(), 3);
        assert_eq!(
            r.terms[1],
            ProxyTerm::Pow {
                column: ColumnRef::Name("x".into()),
                exponent: 0.481,
                shift: 1.0
            }
        );
        assert!(r.needs_external());
    }

    #[test]
    fn trailing_shift_and_raw_lists() {
        let r: ProxyRecipe = "raw:x1,x2,x3,x4,pow:x1^0.481+1".parse().unwrap();
        assert_eq!(r.terms.len(), 2);
        assert!(matches!(&r.terms[0], ProxyTerm::Raw(c) if c.len() == 4));
        assert!(matches!(&r.terms[1], ProxyTerm::Pow { shift, .. } if *shift == 1.0));
    }

    #[test]
    fn aliases_and_learner_params() {
        let r: ProxyRecipe = "ols-within + tree(depth=3,leaf=5)-cross".parse().unwrap();
        assert!(matches!(&r.terms[0], ProxyTerm::Within(l) if l.kind == crate::learners::LearnerKind::Ols));
        assert!(matches!(&r.terms[1], ProxyTerm::Cross(l) if l.max_depth == 3 && l.min_leaf == 5));
    }

    #[test]
    fn rejects_garbage() {
        assert!("".parse::<ProxyRecipe>().is_err());
        assert!("within:svm".parse::<ProxyRecipe>().is_err());
        assert!("1.5".parse::<ProxyRecipe>().is_err());
        assert!("pow:(x+1^2".parse::<ProxyRecipe>().is_err());
    }

    #[test]
    fn display_round_trips() {
        let r: ProxyRecipe = "within:ols + raw:x1,x2 + pow:(x1-0.5)^2".parse().unwrap();
        let again: ProxyRecipe = r.to_string().parse().unwrap();
        assert_eq!(r, again);
    }
}
