//! Dense convex quadratic programming: minimize `0.5 x' H x + f' x` subject
//! to general inequality rows `A x <= b` and box bounds `l <= x <= u` with
//! infinite entries allowed. The solver is a primal-dual interior-point
//! method with a Mehrotra predictor-corrector step and an optional
//! active-set polish that sharpens complementarity to machine precision.

pub mod reference;
mod solve;

pub use solve::solve;

use std::time::Duration;

use nalgebra::{DMatrix, DVector};

use crate::error::Error;

/// Offsets and lengths of the decision blocks inside the stacked variable:
/// controls, weir flows, lower slacks and upper relaxations. Generic
/// problems use a single `u` block covering everything.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarBlocks {
    pub u: (usize, usize),
    pub qw: (usize, usize),
    pub s: (usize, usize),
    pub c: (usize, usize),
}

impl VarBlocks {
    pub fn plain(n: usize) -> Self {
        VarBlocks {
            u: (0, n),
            qw: (n, 0),
            s: (n, 0),
            c: (n, 0),
        }
    }
}

/// A dense inequality-constrained QP.
#[derive(Clone, Debug)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub linear: DVector<f64>,
    pub a: DMatrix<f64>,
    pub b: DVector<f64>,
    pub lower: DVector<f64>,
    pub upper: DVector<f64>,
    /// Constant added to reported objective values.
    pub constant: f64,
    pub blocks: VarBlocks,
}

impl QpProblem {
    pub fn n(&self) -> usize {
        self.linear.len()
    }

    pub fn m(&self) -> usize {
        self.b.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * (&self.hessian * x).dot(x) + self.linear.dot(x) + self.constant
    }

    pub fn validate(&self) -> Result<(), Error> {
        let n = self.n();
        let m = self.m();
        if self.hessian.nrows() != n || self.hessian.ncols() != n {
            return Err(Error::Dimension(format!(
                "H is {}x{} for {} variables",
                self.hessian.nrows(),
                self.hessian.ncols(),
                n
            )));
        }
        if self.a.nrows() != m || (m > 0 && self.a.ncols() != n) {
            return Err(Error::Dimension(format!(
                "A is {}x{} for {} rows and {} variables",
                self.a.nrows(),
                self.a.ncols(),
                m,
                n
            )));
        }
        if self.lower.len() != n || self.upper.len() != n {
            return Err(Error::Dimension(format!(
                "bounds have {} and {} entries for {} variables",
                self.lower.len(),
                self.upper.len(),
                n
            )));
        }
        for v in self
            .hessian
            .iter()
            .chain(self.a.iter())
            .chain(self.linear.iter())
            .chain(self.b.iter())
        {
            if !v.is_finite() {
                return Err(Error::Domain("problem data contains a non-finite value".into()));
            }
        }
        for j in 0..n {
            let (lo, hi) = (self.lower[j], self.upper[j]);
            if lo.is_nan() || hi.is_nan() || lo == f64::INFINITY || hi == f64::NEG_INFINITY {
                return Err(Error::Domain(format!("bad bounds [{lo}, {hi}] on variable {j}")));
            }
            if lo > hi {
                return Err(Error::Domain(format!(
                    "empty bound interval [{lo}, {hi}] on variable {j}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SolveStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

/// Interior-point settings. `tolerance` scales all three convergence tests,
/// `regularization` is the diagonal shift applied to the normal matrix.
#[derive(Clone, Copy, Debug)]
pub struct SolverSettings {
    pub max_iterations: usize,
    pub tolerance: f64,
    pub regularization: f64,
    pub polish: bool,
}

impl Default for SolverSettings {
    fn default() -> Self {
        SolverSettings {
            max_iterations: 100,
            tolerance: 1e-8,
            regularization: 1e-9,
            polish: true,
        }
    }
}

/// Primal-dual solution. `dual_rows` are the multipliers of the general
/// rows, `dual_lower`/`dual_upper` those of the box bounds (zero where a
/// bound is infinite).
#[derive(Clone, Debug)]
pub struct QpSolution {
    pub primal: DVector<f64>,
    pub dual_rows: DVector<f64>,
    pub dual_lower: DVector<f64>,
    pub dual_upper: DVector<f64>,
    pub objective: f64,
    pub status: SolveStatus,
    pub iterations: usize,
    pub solve_time: Duration,
}

/// Infinity norms of the KKT residuals: primal feasibility (row and bound
/// violations), stationarity `H x + f + A' lambda - z_l + z_u`, and the
/// largest complementarity product over rows and bounds.
#[derive(Clone, Copy, Debug)]
pub struct KktResiduals {
    pub primal: f64,
    pub stationarity: f64,
    pub complementarity: f64,
}

impl KktResiduals {
    pub fn max(&self) -> f64 {
        self.primal.max(self.stationarity).max(self.complementarity)
    }
}

pub fn kkt_residuals(problem: &QpProblem, solution: &QpSolution) -> KktResiduals {
    let x = &solution.primal;
    let n = problem.n();

    let mut primal = 0.0f64;
    let mut complementarity = 0.0f64;
    if problem.m() > 0 {
        let slack = &problem.b - &problem.a * x;
        for (i, s) in slack.iter().enumerate() {
            primal = primal.max(-s);
            complementarity = complementarity.max((solution.dual_rows[i] * s).abs());
        }
    }
    for j in 0..n {
        if problem.lower[j].is_finite() {
            let p = x[j] - problem.lower[j];
            primal = primal.max(-p);
            complementarity = complementarity.max((solution.dual_lower[j] * p).abs());
        }
        if problem.upper[j].is_finite() {
            let q = problem.upper[j] - x[j];
            primal = primal.max(-q);
            complementarity = complementarity.max((solution.dual_upper[j] * q).abs());
        }
    }

    let mut grad = &problem.hessian * x + &problem.linear;
    if problem.m() > 0 {
        grad += problem.a.tr_mul(&solution.dual_rows);
    }
    grad -= &solution.dual_lower;
    grad += &solution.dual_upper;
    KktResiduals {
        primal: primal.max(0.0),
        stationarity: grad.amax(),
        complementarity,
    }
}

fn fmt_bound(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v:?}")
    }
}

fn parse_bound(tok: &str) -> Result<f64, Error> {
    match tok {
        "inf" => Ok(f64::INFINITY),
        "-inf" => Ok(f64::NEG_INFINITY),
        _ => tok
            .parse::<f64>()
            .map_err(|_| Error::Parse {
                line: 0,
                message: format!("bad number '{tok}' in qp dump"),
            }),
    }
}

/// Plain-text dump of a problem: counts, blocks, dense vectors and sparse
/// upper-triangle/row-major triplets for `H` and `A`. Stable ordering and
/// round-trip exact floats make dumps diffable.
pub fn dump(problem: &QpProblem) -> String {
    use std::fmt::Write;
    let mut out = String::new();
    let n = problem.n();
    let m = problem.m();
    writeln!(out, "qp 1").unwrap();
    writeln!(out, "n {n}").unwrap();
    writeln!(out, "m {m}").unwrap();
    writeln!(out, "constant {:?}", problem.constant).unwrap();
    let bl = &problem.blocks;
    writeln!(
        out,
        "blocks u {} {} qw {} {} s {} {} c {} {}",
        bl.u.0, bl.u.1, bl.qw.0, bl.qw.1, bl.s.0, bl.s.1, bl.c.0, bl.c.1
    )
    .unwrap();
    writeln!(out, "f").unwrap();
    for v in problem.linear.iter() {
        writeln!(out, "{v:?}").unwrap();
    }
    writeln!(out, "b").unwrap();
    for v in problem.b.iter() {
        writeln!(out, "{v:?}").unwrap();
    }
    writeln!(out, "lower").unwrap();
    for v in problem.lower.iter() {
        writeln!(out, "{}", fmt_bound(*v)).unwrap();
    }
    writeln!(out, "upper").unwrap();
    for v in problem.upper.iter() {
        writeln!(out, "{}", fmt_bound(*v)).unwrap();
    }

    let mut h_items = Vec::new();
    for i in 0..n {
        for j in i..n {
            let v = problem.hessian[(i, j)];
            if v != 0.0 {
                h_items.push((i, j, v));
            }
        }
    }
    writeln!(out, "H {}", h_items.len()).unwrap();
    for (i, j, v) in h_items {
        writeln!(out, "{i} {j} {v:?}").unwrap();
    }
    let mut a_items = Vec::new();
    for i in 0..m {
        for j in 0..n {
            let v = problem.a[(i, j)];
            if v != 0.0 {
                a_items.push((i, j, v));
            }
        }
    }
    writeln!(out, "A {}", a_items.len()).unwrap();
    for (i, j, v) in a_items {
        writeln!(out, "{i} {j} {v:?}").unwrap();
    }
    out
}

/// Parses a dump back into a problem.
pub fn parse_dump(text: &str) -> Result<QpProblem, Error> {
    let mut lines = text.lines().enumerate();
    let mut next = |want: &str| -> Result<(usize, String), Error> {
        for (idx, raw) in lines.by_ref() {
            let line = raw.trim();
            if line.is_empty() {
                continue;
            }
            return Ok((idx + 1, line.to_string()));
        }
        Err(Error::Parse {
            line: 0,
            message: format!("unexpected end of qp dump, wanted {want}"),
        })
    };
    let expect_kv = |tag: &str, line: (usize, String)| -> Result<String, Error> {
        line.1
            .strip_prefix(tag)
            .map(|rest| rest.trim().to_string())
            .ok_or_else(|| Error::Parse {
                line: line.0,
                message: format!("expected '{tag} ...', got '{}'", line.1),
            })
    };

    let header = next("header")?;
    if header.1 != "qp 1" {
        return Err(Error::Parse {
            line: header.0,
            message: format!("unknown dump header '{}'", header.1),
        });
    }
    let n: usize = expect_kv("n", next("n")?)?.parse().map_err(|_| Error::Parse {
        line: 0,
        message: "bad n".into(),
    })?;
    let m: usize = expect_kv("m", next("m")?)?.parse().map_err(|_| Error::Parse {
        line: 0,
        message: "bad m".into(),
    })?;
    let constant: f64 = expect_kv("constant", next("constant")?)?
        .parse()
        .map_err(|_| Error::Parse {
            line: 0,
            message: "bad constant".into(),
        })?;
    let blocks_line = expect_kv("blocks", next("blocks")?)?;
    let toks: Vec<&str> = blocks_line.split_whitespace().collect();
    if toks.len() != 12 {
        return Err(Error::Parse {
            line: 0,
            message: "blocks line must list u/qw/s/c offsets and lengths".into(),
        });
    }
    let num = |t: &str| -> Result<usize, Error> {
        t.parse().map_err(|_| Error::Parse {
            line: 0,
            message: format!("bad block number '{t}'"),
        })
    };
    let blocks = VarBlocks {
        u: (num(toks[1])?, num(toks[2])?),
        qw: (num(toks[4])?, num(toks[5])?),
        s: (num(toks[7])?, num(toks[8])?),
        c: (num(toks[10])?, num(toks[11])?),
    };

    let mut read_vec = |tag: &str, len: usize, bounds: bool| -> Result<DVector<f64>, Error> {
        let head = next(tag)?;
        if head.1 != tag {
            return Err(Error::Parse {
                line: head.0,
                message: format!("expected section '{tag}', got '{}'", head.1),
            });
        }
        let mut out = DVector::zeros(len);
        for item in out.iter_mut() {
            let (line_no, tok) = next("vector entry")?;
            *item = if bounds {
                parse_bound(&tok)?
            } else {
                tok.parse().map_err(|_| Error::Parse {
                    line: line_no,
                    message: format!("bad number '{tok}'"),
                })?
            };
        }
        Ok(out)
    };
    let linear = read_vec("f", n, false)?;
    let b = read_vec("b", m, false)?;
    let lower = read_vec("lower", n, true)?;
    let upper = read_vec("upper", n, true)?;

    let mut read_triplets = |tag: &str, rows: usize, cols: usize, mirror: bool| -> Result<DMatrix<f64>, Error> {
        let head = next(tag)?;
        let count: usize = expect_kv(tag, head)?.parse().map_err(|_| Error::Parse {
            line: 0,
            message: format!("bad {tag} count"),
        })?;
        let mut out = DMatrix::zeros(rows, cols);
        for _ in 0..count {
            let (line_no, tok) = next("triplet")?;
            let parts: Vec<&str> = tok.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("expected 'i j value', got '{tok}'"),
                });
            }
            let i: usize = parts[0].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: "bad row index".into(),
            })?;
            let j: usize = parts[1].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: "bad column index".into(),
            })?;
            let v: f64 = parts[2].parse().map_err(|_| Error::Parse {
                line: line_no,
                message: "bad value".into(),
            })?;
            if i >= rows || j >= cols {
                return Err(Error::Parse {
                    line: line_no,
                    message: format!("index ({i}, {j}) outside {rows}x{cols}"),
                });
            }
            out[(i, j)] = v;
            if mirror {
                out[(j, i)] = v;
            }
        }
        Ok(out)
    };
    let hessian = read_triplets("H", n, n, true)?;
    let a = read_triplets("A", m, if m > 0 { n } else { 0 }, false)?;

    let problem = QpProblem {
        hessian,
        linear,
        a,
        b,
        lower,
        upper,
        constant,
        blocks,
    };
    problem.validate()?;
    Ok(problem)
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn unbounded(n: usize) -> (DVector<f64>, DVector<f64>) {
        (
            DVector::from_element(n, f64::NEG_INFINITY),
            DVector::from_element(n, f64::INFINITY),
        )
    }

    #[test]
    fn dump_roundtrip_preserves_everything() {
        let problem = QpProblem {
            hessian: DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]),
            linear: DVector::from_vec(vec![0.1, -3.7e-13]),
            a: DMatrix::from_row_slice(1, 2, &[1.0, -2.0]),
            b: DVector::from_vec(vec![0.3333333333333333]),
            lower: DVector::from_vec(vec![f64::NEG_INFINITY, 0.0]),
            upper: DVector::from_vec(vec![5.0, f64::INFINITY]),
            constant: 1.25,
            blocks: VarBlocks {
                u: (0, 1),
                qw: (1, 1),
                s: (2, 0),
                c: (2, 0),
            },
        };
        let text = dump(&problem);
        let back = parse_dump(&text).unwrap();
        assert_eq!(back.hessian, problem.hessian);
        assert_eq!(back.linear, problem.linear);
        assert_eq!(back.a, problem.a);
        assert_eq!(back.b, problem.b);
        assert_eq!(back.lower, problem.lower);
        assert_eq!(back.upper, problem.upper);
        assert_eq!(back.constant, problem.constant);
        assert_eq!(back.blocks, problem.blocks);
        assert_eq!(dump(&back), text);
    }

    #[test]
    fn kkt_residuals_zero_problem() {
        let (lower, upper) = unbounded(2);
        let problem = QpProblem {
            hessian: DMatrix::identity(2, 2),
            linear: DVector::zeros(2),
            a: DMatrix::zeros(0, 0),
            b: DVector::zeros(0),
            lower,
            upper,
            constant: 0.0,
            blocks: VarBlocks::plain(2),
        };
        let solution = QpSolution {
            primal: DVector::zeros(2),
            dual_rows: DVector::zeros(0),
            dual_lower: DVector::zeros(2),
            dual_upper: DVector::zeros(2),
            objective: 0.0,
            status: SolveStatus::Optimal,
            iterations: 0,
            solve_time: Duration::ZERO,
        };
        let r = kkt_residuals(&problem, &solution);
        assert_eq!(r.primal, 0.0);
        assert_eq!(r.stationarity, 0.0);
        assert_eq!(r.complementarity, 0.0);
    }
}
