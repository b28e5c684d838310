//! SDPA sparse file format.
//!
//! Layout written here:
//!
//! ```text
//! m               number of constraint matrices
//! 1               number of blocks
//! n               block size
//! b_1 ... b_m     right-hand sides
//! 0 1 i j v       cost-matrix entries (matno 0), 1-based upper triangle
//! k 1 i j v       entries of constraint k
//! ```
//!
//! Values are printed with Rust's shortest round-trip float formatting, so
//! an export/import cycle reproduces every value bit-identically.  Comment
//! lines starting with `"` or `*` are accepted on input.  The file encodes
//! `min tr(Q X) s.t. tr(A_i X) = b_i, X >= 0` with the cost stored as
//! matrix 0; external solvers that maximize `tr(F_0 Y)` should negate the
//! cost block.

use super::{SdpError, SdpProblem};
use crate::qcqp::SymMat;
use std::io::{BufRead, Write};
use std::path::Path;

pub fn write_sdpa<W: Write>(p: &SdpProblem, out: &mut W) -> Result<(), SdpError> {
    writeln!(out, "{}", p.constraints.len())?;
    writeln!(out, "1")?;
    writeln!(out, "{}", p.n)?;
    let rhs: Vec<String> = p.constraints.iter().map(|(_, b)| format!("{b}")).collect();
    writeln!(out, "{}", rhs.join(" "))?;
    for &(i, j, v) in p.cost.entries() {
        writeln!(out, "0 1 {} {} {}", i + 1, j + 1, v)?;
    }
    for (k, (a, _)) in p.constraints.iter().enumerate() {
        for &(i, j, v) in a.entries() {
            writeln!(out, "{} 1 {} {} {}", k + 1, i + 1, j + 1, v)?;
        }
    }
    Ok(())
}

pub fn export_sdpa(p: &SdpProblem, path: &Path) -> Result<(), SdpError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_sdpa(p, &mut file)
}

pub fn import_sdpa(path: &Path) -> Result<SdpProblem, SdpError> {
    let file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut lines = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('"') || trimmed.starts_with('*') {
            continue;
        }
        lines.push((idx + 1, trimmed.replace(['{', '}', ','], " ")));
    }
    let parse_err = |line: usize, message: &str| SdpError::Parse {
        line,
        message: message.to_string(),
    };
    if lines.len() < 4 {
        return Err(parse_err(0, "missing header"));
    }
    let m: usize = lines[0]
        .1
        .split_whitespace()
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(lines[0].0, "bad constraint count"))?;
    let nblocks: usize = lines[1]
        .1
        .split_whitespace()
        .next()
        .and_then(|t| t.parse().ok())
        .ok_or_else(|| parse_err(lines[1].0, "bad block count"))?;
    if nblocks != 1 {
        return Err(parse_err(lines[1].0, "only single-block files are supported"));
    }
    let n: usize = lines[2]
        .1
        .split_whitespace()
        .next()
        .and_then(|t| t.parse::<i64>().ok())
        .map(|v| v.unsigned_abs() as usize)
        .ok_or_else(|| parse_err(lines[2].0, "bad block size"))?;
    let rhs: Vec<f64> = lines[3]
        .1
        .split_whitespace()
        .map(|t| t.parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| parse_err(lines[3].0, &format!("bad rhs: {e}")))?;
    if rhs.len() != m {
        return Err(parse_err(lines[3].0, "rhs length does not match m"));
    }

    let mut cost_entries = Vec::new();
    let mut constraint_entries: Vec<Vec<(usize, usize, f64)>> = vec![Vec::new(); m];
    for (lineno, body) in &lines[4..] {
        let tokens: Vec<&str> = body.split_whitespace().collect();
        if tokens.len() != 5 {
            return Err(parse_err(*lineno, "expected 'matno blkno i j value'"));
        }
        let matno: usize = tokens[0]
            .parse()
            .map_err(|_| parse_err(*lineno, "bad matrix number"))?;
        let i: usize = tokens[2]
            .parse()
            .map_err(|_| parse_err(*lineno, "bad row index"))?;
        let j: usize = tokens[3]
            .parse()
            .map_err(|_| parse_err(*lineno, "bad column index"))?;
        let v: f64 = tokens[4]
            .parse()
            .map_err(|_| parse_err(*lineno, "bad value"))?;
        if i == 0 || j == 0 || i > n || j > n {
            return Err(parse_err(*lineno, "index out of range"));
        }
        if matno == 0 {
            cost_entries.push((i - 1, j - 1, v));
        } else if matno <= m {
            constraint_entries[matno - 1].push((i - 1, j - 1, v));
        } else {
            return Err(parse_err(*lineno, "matrix number out of range"));
        }
    }
    Ok(SdpProblem {
        n,
        cost: SymMat::from_triplets(n, cost_entries),
        constraints: constraint_entries
            .into_iter()
            .zip(rhs)
            .map(|(entries, b)| (SymMat::from_triplets(n, entries), b))
            .collect(),
        pruned: Vec::new(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy_problem() -> SdpProblem {
        SdpProblem {
            n: 2,
            cost: SymMat::from_triplets(2, [(0, 0, 1.0), (0, 1, -0.5), (1, 1, 2.0 / 3.0)]),
            constraints: vec![(SymMat::from_triplets(2, [(0, 0, 1.0), (1, 1, 1.0)]), 1.0)],
            pruned: vec![],
        }
    }

    #[test]
    fn one_constraint_toy_has_expected_body() {
        let p = toy_problem();
        let mut buf = Vec::new();
        write_sdpa(&p, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "1");
        assert_eq!(lines[1], "1");
        assert_eq!(lines[2], "2");
        assert_eq!(lines[3], "1");
        // Three cost entries plus two constraint entries.
        assert_eq!(lines.len(), 4 + 3 + 2);
        assert_eq!(lines[4], "0 1 1 1 1");
        assert_eq!(lines[7], "1 1 1 1 1");
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let p = toy_problem();
        let dir = std::env::temp_dir().join("caypose-sdpa-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("toy.dat-s");
        export_sdpa(&p, &path).unwrap();
        let back = import_sdpa(&path).unwrap();
        assert_eq!(back.n, p.n);
        assert_eq!(back.cost.entries(), p.cost.entries());
        assert_eq!(back.constraints.len(), p.constraints.len());
        for ((a, b), (a2, b2)) in p.constraints.iter().zip(&back.constraints) {
            assert_eq!(a.entries(), a2.entries());
            assert_eq!(b.to_bits(), b2.to_bits());
        }
        // Re-export matches byte for byte.
        let mut buf1 = Vec::new();
        write_sdpa(&p, &mut buf1).unwrap();
        let mut buf2 = Vec::new();
        write_sdpa(&back, &mut buf2).unwrap();
        assert_eq!(buf1, buf2);
        std::fs::remove_file(&path).ok();
    }

    #[test]
    fn import_rejects_malformed_files() {
        let dir = std::env::temp_dir().join("caypose-sdpa-test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.dat-s");
        std::fs::write(&path, "1\n1\n2\n1\n0 1 5 5 1.0\n").unwrap();
        assert!(matches!(import_sdpa(&path), Err(SdpError::Parse { .. })));
        std::fs::remove_file(&path).ok();
    }
}
