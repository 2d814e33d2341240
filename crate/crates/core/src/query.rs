//! Count-predicate query dialect.
//!
//! ```text
//! SELECT frameID FROM <ident> WHERE <pred> (AND <pred>)* ;
//! <pred> := Count(<ident>) <op> <int>
//! <op>   := >= | > | = | <= | <
//! ```
//!
//! Keywords are case-insensitive; identifiers may contain `-` after the first
//! character so dataset names like `UA-DeTrac` lex as one token.

use crate::trace::Detection;
use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

pub const DEFAULT_CONFIDENCE_MIN: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum QueryError {
    #[error("syntax error at byte {offset}: expected {}, found {found}", .expected.join(" or "))]
    Syntax {
        offset: usize,
        expected: Vec<&'static str>,
        found: String,
    },
    #[error("threshold {text} at byte {offset} does not fit in 32 bits")]
    Overflow { offset: usize, text: String },
}

impl QueryError {
    pub fn offset(&self) -> usize {
        match self {
            QueryError::Syntax { offset, .. } | QueryError::Overflow { offset, .. } => *offset,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CmpOp {
    GE,
    GT,
    EQ,
    LE,
    LT,
}

impl CmpOp {
    pub fn holds(self, lhs: u32, rhs: u32) -> bool {
        match self {
            CmpOp::GE => lhs >= rhs,
            CmpOp::GT => lhs > rhs,
            CmpOp::EQ => lhs == rhs,
            CmpOp::LE => lhs <= rhs,
            CmpOp::LT => lhs < rhs,
        }
    }

    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::GE => ">=",
            CmpOp::GT => ">",
            CmpOp::EQ => "=",
            CmpOp::LE => "<=",
            CmpOp::LT => "<",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct CountPredicate {
    pub class_label: String,
    pub op: CmpOp,
    pub threshold: u32,
}

impl CountPredicate {
    pub fn new(class_label: impl Into<String>, op: CmpOp, threshold: u32) -> Self {
        CountPredicate {
            class_label: class_label.into(),
            op,
            threshold,
        }
    }
}

impl fmt::Display for CountPredicate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "Count({}) {} {}",
            self.class_label,
            self.op.symbol(),
            self.threshold
        )
    }
}

/// A conjunction of count predicates over one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Query {
    pub source: String,
    pub predicates: Vec<CountPredicate>,
    pub det_confidence_min: f64,
}

impl Query {
    pub fn new(source: impl Into<String>, predicates: Vec<CountPredicate>) -> Self {
        assert!(
            !predicates.is_empty(),
            "a query needs at least one predicate"
        );
        Query {
            source: source.into(),
            predicates,
            det_confidence_min: DEFAULT_CONFIDENCE_MIN,
        }
    }

    pub fn with_confidence_min(mut self, min: f64) -> Self {
        self.det_confidence_min = min;
        self
    }

    /// Canonical text form; `parse(q.render()) == q` for the default gate.
    pub fn render(&self) -> String {
        let preds: Vec<String> = self.predicates.iter().map(|p| p.to_string()).collect();
        format!(
            "SELECT frameID FROM {} WHERE {};",
            self.source,
            preds.join(" AND ")
        )
    }

    /// Number of detections of `class` whose confidence passes the gate.
    pub fn gated_count(&self, class: &str, dets: &[Detection]) -> u32 {
        dets.iter()
            .filter(|d| d.class_label == class && d.confidence >= self.det_confidence_min)
            .count() as u32
    }

    pub fn eval(&self, dets: &[Detection]) -> bool {
        eval_predicate(self, dets)
    }
}

impl fmt::Display for Query {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

/// Conjunction of every predicate over the confidence-gated detection counts.
pub fn eval_predicate(query: &Query, dets: &[Detection]) -> bool {
    query.predicates.iter().all(|p| {
        p.op.holds(query.gated_count(&p.class_label, dets), p.threshold)
    })
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Ident(String),
    Int(String),
    Op(CmpOp),
    LParen,
    RParen,
    Semi,
    Eof,
}

impl Tok {
    fn describe(&self) -> String {
        match self {
            Tok::Ident(s) => format!("'{s}'"),
            Tok::Int(s) => s.clone(),
            Tok::Op(op) => format!("'{}'", op.symbol()),
            Tok::LParen => "'('".into(),
            Tok::RParen => "')'".into(),
            Tok::Semi => "';'".into(),
            Tok::Eof => "end of input".into(),
        }
    }
}

fn lex(text: &str) -> Result<Vec<(usize, Tok)>, QueryError> {
    let bytes = text.as_bytes();
    let mut out = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i];
        let start = i;
        match c {
            b' ' | b'\t' | b'\r' | b'\n' => {
                i += 1;
                continue;
            }
            b'(' => {
                i += 1;
                out.push((start, Tok::LParen));
            }
            b')' => {
                i += 1;
                out.push((start, Tok::RParen));
            }
            b';' => {
                i += 1;
                out.push((start, Tok::Semi));
            }
            b'>' | b'<' | b'=' => {
                let next = bytes.get(i + 1).copied();
                let (op, len) = match (c, next) {
                    (b'>', Some(b'=')) => (CmpOp::GE, 2),
                    (b'<', Some(b'=')) => (CmpOp::LE, 2),
                    (b'=', Some(b'=')) => (CmpOp::EQ, 2),
                    (b'>', _) => (CmpOp::GT, 1),
                    (b'<', _) => (CmpOp::LT, 1),
                    _ => (CmpOp::EQ, 1),
                };
                i += len;
                out.push((start, Tok::Op(op)));
            }
            b'0'..=b'9' => {
                while i < bytes.len() && bytes[i].is_ascii_digit() {
                    i += 1;
                }
                out.push((start, Tok::Int(text[start..i].to_string())));
            }
            c if c.is_ascii_alphabetic() || c == b'_' => {
                while i < bytes.len()
                    && (bytes[i].is_ascii_alphanumeric() || bytes[i] == b'_' || bytes[i] == b'-')
                {
                    i += 1;
                }
                out.push((start, Tok::Ident(text[start..i].to_string())));
            }
            _ => {
                let ch = text[start..].chars().next().unwrap_or('?');
                return Err(QueryError::Syntax {
                    offset: start,
                    expected: vec!["token"],
                    found: format!("'{ch}'"),
                });
            }
        }
    }
    out.push((text.len(), Tok::Eof));
    Ok(out)
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> &(usize, Tok) {
        &self.toks[self.pos]
    }

    fn fail<T>(&self, expected: &[&'static str]) -> Result<T, QueryError> {
        let (offset, tok) = self.peek();
        Err(QueryError::Syntax {
            offset: *offset,
            expected: expected.to_vec(),
            found: tok.describe(),
        })
    }

    fn is_keyword(&self, kw: &str) -> bool {
        matches!(&self.peek().1, Tok::Ident(s) if s.eq_ignore_ascii_case(kw))
    }

    fn keyword(&mut self, kw: &'static str) -> Result<(), QueryError> {
        if self.is_keyword(kw) {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(&[kw])
        }
    }

    fn punct(&mut self, want: Tok, name: &'static str) -> Result<(), QueryError> {
        if self.peek().1 == want {
            self.pos += 1;
            Ok(())
        } else {
            self.fail(&[name])
        }
    }

    fn ident(&mut self) -> Result<String, QueryError> {
        if let Tok::Ident(s) = &self.peek().1 {
            let s = s.clone();
            self.pos += 1;
            Ok(s)
        } else {
            self.fail(&["identifier"])
        }
    }

    fn predicate(&mut self) -> Result<CountPredicate, QueryError> {
        self.keyword("Count")?;
        self.punct(Tok::LParen, "'('")?;
        let class_label = self.ident()?;
        self.punct(Tok::RParen, "')'")?;
        let op = match self.peek().1 {
            Tok::Op(op) => op,
            _ => return self.fail(&["comparison operator"]),
        };
        self.pos += 1;
        let (offset, tok) = self.peek().clone();
        let Tok::Int(digits) = tok else {
            return self.fail(&["integer"]);
        };
        let threshold = digits.parse::<u32>().map_err(|_| QueryError::Overflow {
            offset,
            text: digits.clone(),
        })?;
        self.pos += 1;
        Ok(CountPredicate {
            class_label,
            op,
            threshold,
        })
    }

    fn query(&mut self) -> Result<Query, QueryError> {
        self.keyword("SELECT")?;
        self.keyword("frameID")?;
        self.keyword("FROM")?;
        let source = self.ident()?;
        self.keyword("WHERE")?;
        let mut predicates = vec![self.predicate()?];
        while self.is_keyword("AND") {
            self.pos += 1;
            predicates.push(self.predicate()?);
        }
        if self.peek().1 != Tok::Semi {
            return self.fail(&["AND", "';'"]);
        }
        self.pos += 1;
        if self.peek().1 != Tok::Eof {
            return self.fail(&["end of input"]);
        }
        Ok(Query::new(source, predicates))
    }
}

pub fn parse(text: &str) -> Result<Query, QueryError> {
    let toks = lex(text)?;
    Parser { toks, pos: 0 }.query()
}

/// Parses a batch file: one query per line, blank lines and `#` comments skipped.
/// Errors carry the 1-based line number.
pub fn parse_batch(text: &str) -> Result<Vec<Query>, (usize, QueryError)> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| {
            let t = l.trim();
            !t.is_empty() && !t.starts_with('#')
        })
        .map(|(i, l)| parse(l.trim()).map_err(|e| (i + 1, e)))
        .collect()
}
