//! SDPA sparse format (`.dat-s`).
//!
//! Our primal `min <C,X> s.t. <A_i,X> = b_i` is SDPA's dual form, so the
//! file carries `c = b`, `F_i = A_i` and `F_0 = -C`. Free variables have no
//! SDPA representation and are first rewritten over a nonnegative diagonal
//! block by [`lift_free_vars`]. A nonzero objective constant is kept in a
//! leading `*` comment line.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use thiserror::Error;

use super::{BlockKind, Equality, SdpError, SdpProblem, SymSparse};

const OFFSET_TAG: &str = "* objective offset";

#[derive(Debug, Error)]
pub enum SdpaError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Problem(#[from] SdpError),
}

/// Equivalent problem without free variables. Each free variable becomes a
/// combination of nonnegative slacks in one appended diagonal block:
/// unbounded `w = p - n`, lower-bounded `w = lo + s`, upper-bounded
/// `w = hi - t`, and boxed `w = lo + s` with an extra row `s + t = hi - lo`.
pub fn lift_free_vars(p: &SdpProblem) -> SdpProblem {
    enum Map {
        Split(usize, usize),
        Lower(f64, usize),
        Upper(f64, usize),
    }
    let mut slots = 0;
    let mut extra_rows = Vec::new();
    let maps: Vec<Map> = p
        .free_bounds
        .iter()
        .map(|&(lo, hi)| match (lo.is_finite(), hi.is_finite()) {
            (false, false) => {
                slots += 2;
                Map::Split(slots - 2, slots - 1)
            }
            (true, hi_finite) => {
                slots += 1;
                if hi_finite {
                    extra_rows.push((slots - 1, slots, hi - lo));
                    slots += 1;
                }
                Map::Lower(lo, slots - 1 - usize::from(hi_finite))
            }
            (false, true) => {
                slots += 1;
                Map::Upper(hi, slots - 1)
            }
        })
        .collect();

    let mut blocks = p.blocks.clone();
    let slack = if slots > 0 {
        blocks.push(BlockKind::Diag(slots));
        Some(blocks.len() - 1)
    } else {
        None
    };

    let mut out = SdpProblem::new(blocks, 0);
    out.cost_offset = p.cost_offset;

    let canonical = |parts: BTreeMap<usize, SymSparse>| -> Vec<(usize, SymSparse)> {
        parts
            .into_iter()
            .filter_map(|(b, mut m)| {
                m.canonicalize();
                (!m.is_empty()).then_some((b, m))
            })
            .collect()
    };

    let lift_terms = |terms: &mut dyn Iterator<Item = (usize, f64)>,
                      parts: &mut BTreeMap<usize, SymSparse>|
     -> f64 {
        let mut shift = 0.0;
        for (k, a) in terms {
            let sb = slack.expect("free variables imply a slack block");
            let entry = parts.entry(sb).or_default();
            match maps[k] {
                Map::Split(pos, neg) => {
                    entry.push(pos, pos, a);
                    entry.push(neg, neg, -a);
                }
                Map::Lower(lo, s) => {
                    entry.push(s, s, a);
                    shift += a * lo;
                }
                Map::Upper(hi, t) => {
                    entry.push(t, t, -a);
                    shift += a * hi;
                }
            }
        }
        shift
    };

    for eq in &p.equalities {
        let mut parts: BTreeMap<usize, SymSparse> = BTreeMap::new();
        for (b, m) in &eq.blocks {
            parts.entry(*b).or_default().entries.extend_from_slice(&m.entries);
        }
        let shift = lift_terms(&mut eq.free.iter().copied(), &mut parts);
        out.equalities.push(Equality {
            blocks: canonical(parts),
            free: Vec::new(),
            rhs: eq.rhs - shift,
        });
    }
    for &(s, t, width) in &extra_rows {
        let mut m = SymSparse::new();
        m.push(s, s, 1.0);
        m.push(t, t, 1.0);
        let mut parts = BTreeMap::new();
        parts.insert(slack.expect("box rows imply a slack block"), m);
        out.equalities.push(Equality {
            blocks: canonical(parts),
            free: Vec::new(),
            rhs: width,
        });
    }

    let mut parts: BTreeMap<usize, SymSparse> = BTreeMap::new();
    for (b, m) in &p.cost_blocks {
        parts.entry(*b).or_default().entries.extend_from_slice(&m.entries);
    }
    let shift = lift_terms(
        &mut p.cost_free.iter().copied().enumerate().filter(|e| e.1 != 0.0),
        &mut parts,
    );
    out.cost_blocks = canonical(parts);
    out.cost_offset += shift;
    out
}

/// Serializes `p` (after lifting free variables) in SDPA sparse format.
pub fn export_sdpa(p: &SdpProblem) -> Result<String, SdpError> {
    p.validate()?;
    let lifted = lift_free_vars(p);
    let mut s = String::new();
    if lifted.cost_offset != 0.0 {
        let _ = writeln!(s, "{OFFSET_TAG} {:?}", lifted.cost_offset);
    }
    let _ = writeln!(s, "{}", lifted.equalities.len());
    let _ = writeln!(s, "{}", lifted.blocks.len());
    let sizes: Vec<String> = lifted
        .blocks
        .iter()
        .map(|b| match *b {
            BlockKind::Psd(n) => n.to_string(),
            BlockKind::Diag(n) => format!("-{n}"),
        })
        .collect();
    let _ = writeln!(s, "{}", sizes.join(" "));
    let rhs: Vec<String> = lifted.equalities.iter().map(|e| format!("{:?}", e.rhs)).collect();
    let _ = writeln!(s, "{}", rhs.join(" "));
    for (b, m) in &lifted.cost_blocks {
        for &(i, j, v) in &m.entries {
            let _ = writeln!(s, "0 {} {} {} {:?}", b + 1, i + 1, j + 1, -v);
        }
    }
    for (k, eq) in lifted.equalities.iter().enumerate() {
        for (b, m) in &eq.blocks {
            for &(i, j, v) in &m.entries {
                let _ = writeln!(s, "{} {} {} {} {:?}", k + 1, b + 1, i + 1, j + 1, v);
            }
        }
    }
    Ok(s)
}

/// Parses SDPA sparse text into a problem without free variables.
pub fn import_sdpa(text: &str) -> Result<SdpProblem, SdpaError> {
    let mut offset = 0.0;
    let mut tokens: Vec<(usize, String)> = Vec::new();
    let mut header = true;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let trimmed = raw.trim_start();
        if header && (trimmed.starts_with('*') || trimmed.starts_with('"')) {
            if let Some(rest) = trimmed.strip_prefix(OFFSET_TAG) {
                offset = rest.trim().parse().map_err(|_| SdpaError::Parse {
                    line,
                    msg: format!("bad objective offset '{}'", rest.trim()),
                })?;
            }
            continue;
        }
        header = false;
        let cleaned: String = raw
            .chars()
            .map(|c| if ",(){}".contains(c) { ' ' } else { c })
            .collect();
        tokens.extend(cleaned.split_whitespace().map(|t| (line, t.to_string())));
    }

    let mut toks = Tokens { toks: tokens, pos: 0 };
    fn int(t: (usize, String), what: &str) -> Result<i64, SdpaError> {
        t.1.parse::<i64>().map_err(|_| SdpaError::Parse {
            line: t.0,
            msg: format!("expected integer {what}, found '{}'", t.1),
        })
    }
    fn float(t: (usize, String), what: &str) -> Result<f64, SdpaError> {
        t.1.parse::<f64>().map_err(|_| SdpaError::Parse {
            line: t.0,
            msg: format!("expected number {what}, found '{}'", t.1),
        })
    }

    let m = int(toks.next("constraint count")?, "constraint count")?;
    let nb = int(toks.next("block count")?, "block count")?;
    if m < 0 || nb < 0 {
        return Err(SdpaError::Parse {
            line: 1,
            msg: "negative count".into(),
        });
    }
    let mut blocks = Vec::with_capacity(nb as usize);
    for _ in 0..nb {
        let t = toks.next("block size")?;
        let line = t.0;
        let n = int(t, "block size")?;
        blocks.push(match n {
            0 => {
                return Err(SdpaError::Parse {
                    line,
                    msg: "zero block size".into(),
                })
            }
            n if n > 0 => BlockKind::Psd(n as usize),
            n => BlockKind::Diag(n.unsigned_abs() as usize),
        });
    }
    let mut rhs = Vec::with_capacity(m as usize);
    for _ in 0..m {
        rhs.push(float(toks.next("right-hand side")?, "right-hand side")?);
    }

    let mut rows: Vec<BTreeMap<usize, SymSparse>> = vec![BTreeMap::new(); m as usize + 1];
    while !toks.done() {
        let t = toks.next("matrix number")?;
        let line = t.0;
        let mat = int(t, "matrix number")?;
        let blk = int(toks.next("block number")?, "block number")?;
        let i = int(toks.next("row index")?, "row index")?;
        let j = int(toks.next("column index")?, "column index")?;
        let v = float(toks.next("entry value")?, "entry value")?;
        let err = |msg: String| SdpaError::Parse { line, msg };
        if mat < 0 || mat > m {
            return Err(err(format!("matrix number {mat} out of range")));
        }
        if blk < 1 || blk > nb {
            return Err(err(format!("block number {blk} out of range")));
        }
        let kind = blocks[blk as usize - 1];
        let dim = kind.dim() as i64;
        if i < 1 || j < 1 || i > dim || j > dim {
            return Err(err(format!("index ({i}, {j}) outside block of size {dim}")));
        }
        if matches!(kind, BlockKind::Diag(_)) && i != j {
            return Err(err(format!("off-diagonal entry in diagonal block {blk}")));
        }
        rows[mat as usize]
            .entry(blk as usize - 1)
            .or_default()
            .push(i as usize - 1, j as usize - 1, v);
    }

    let canonical = |parts: BTreeMap<usize, SymSparse>| -> Vec<(usize, SymSparse)> {
        parts
            .into_iter()
            .filter_map(|(b, mut s)| {
                s.canonicalize();
                (!s.is_empty()).then_some((b, s))
            })
            .collect()
    };
    let mut it = rows.into_iter();
    let cost = it.next().unwrap_or_default();
    let mut p = SdpProblem::new(blocks, 0);
    p.cost_offset = offset;
    p.cost_blocks = canonical(cost)
        .into_iter()
        .map(|(b, s)| (b, s.scaled(-1.0)))
        .collect();
    p.equalities = it
        .zip(rhs)
        .map(|(parts, rhs)| Equality {
            blocks: canonical(parts),
            free: Vec::new(),
            rhs,
        })
        .collect();
    p.validate()?;
    Ok(p)
}

struct Tokens {
    toks: Vec<(usize, String)>,
    pos: usize,
}

impl Tokens {
    fn next(&mut self, what: &str) -> Result<(usize, String), SdpaError> {
        let t = self.toks.get(self.pos).cloned().ok_or_else(|| SdpaError::Parse {
            line: self.toks.last().map_or(0, |t| t.0),
            msg: format!("unexpected end of input, expected {what}"),
        })?;
        self.pos += 1;
        Ok(t)
    }

    fn done(&self) -> bool {
        self.pos >= self.toks.len()
    }
}

pub fn write_sdpa(path: &Path, p: &SdpProblem) -> Result<(), SdpaError> {
    std::fs::write(path, export_sdpa(p)?)?;
    Ok(())
}

pub fn read_sdpa(path: &Path) -> Result<SdpProblem, SdpaError> {
    import_sdpa(&std::fs::read_to_string(path)?)
}
