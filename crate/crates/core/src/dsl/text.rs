//! Line-oriented program text:
//!
//! ```text
//! # comment
//! osplit {I1,I2} rank=5
//! osplit {I3} rank=?
//! ```

use super::{block_from_names, Expr, Program, Rank};
use crate::error::{Error, Result};
use crate::network::members;
use crate::tensor::Index;

pub(super) fn parse(src: &str, free: &[Index]) -> Result<Program> {
    let mut exprs = Vec::new();
    let mut next_hole = 0;
    for (lineno, raw) in src.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Malformed(format!("line {}: {what}: '{}'", lineno + 1, raw.trim()));
        let rest = line
            .strip_prefix("osplit")
            .ok_or_else(|| bad("expected 'osplit'"))?
            .trim_start();
        let rest = rest.strip_prefix('{').ok_or_else(|| bad("expected '{'"))?;
        let (names, rest) = rest.split_once('}').ok_or_else(|| bad("unterminated index set"))?;
        let names: Vec<&str> = names.split(',').map(str::trim).filter(|s| !s.is_empty()).collect();
        let block = block_from_names(&names, free).map_err(|e| bad(&e.to_string()))?;
        let rank = rest
            .trim()
            .strip_prefix("rank")
            .and_then(|r| r.trim_start().strip_prefix('='))
            .map(str::trim)
            .ok_or_else(|| bad("expected 'rank=<n>' or 'rank=?'"))?;
        let rank = if rank == "?" {
            next_hole += 1;
            Rank::Hole(next_hole - 1)
        } else {
            Rank::Fixed(rank.parse().map_err(|_| bad("rank is not a positive integer"))?)
        };
        exprs.push(Expr::new(block, free.len(), rank).map_err(|e| bad(&e.to_string()))?);
    }
    Program::new(exprs)
}

pub(super) fn print(p: &Program, free: &[Index]) -> String {
    let mut out = String::new();
    for e in p.exprs() {
        let names: Vec<&str> = members(e.block()).map(|b| free[b].name()).collect();
        let rank = match e.rank {
            Rank::Hole(_) => "?".to_string(),
            Rank::Fixed(r) => r.to_string(),
        };
        out.push_str(&format!("osplit {{{}}} rank={rank}\n", names.join(",")));
    }
    out
}
