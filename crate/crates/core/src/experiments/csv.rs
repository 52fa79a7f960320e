//! Minimal CSV writer: fixed headers, numbers with 17 significant digits.

use crate::order_params::OrderParams;
use nalgebra::DMatrix;

pub(crate) fn num(x: f64) -> String {
    if x.is_nan() {
        "NaN".into()
    } else if x.is_infinite() {
        if x > 0.0 { "inf" } else { "-inf" }.into()
    } else {
        format!("{x:.16e}")
    }
}

#[derive(Debug, Default)]
pub(crate) struct Table {
    out: String,
    width: usize,
}

impl Table {
    pub(crate) fn new<S: AsRef<str>>(header: &[S]) -> Self {
        let mut t = Table {
            out: String::new(),
            width: header.len(),
        };
        let cols: Vec<&str> = header.iter().map(|s| s.as_ref()).collect();
        t.out.push_str(&cols.join(","));
        t.out.push('\n');
        t
    }

    pub(crate) fn row(&mut self, cells: &[String]) {
        assert_eq!(cells.len(), self.width, "row width mismatch");
        self.out.push_str(&cells.join(","));
        self.out.push('\n');
    }

    pub(crate) fn finish(self) -> String {
        self.out
    }
}

/// `Q_k_l` (k ≤ l), `R_k_n`, `rho_k_n`, 1-based.
pub(crate) fn overlap_header(k: usize, m: usize) -> Vec<String> {
    let mut h = Vec::new();
    for a in 1..=k {
        for b in a..=k {
            h.push(format!("Q_{a}_{b}"));
        }
    }
    for a in 1..=k {
        for n in 1..=m {
            h.push(format!("R_{a}_{n}"));
        }
    }
    for a in 1..=k {
        for n in 1..=m {
            h.push(format!("rho_{a}_{n}"));
        }
    }
    h
}

/// Q upper triangle then R, row-major.
pub(crate) fn overlap_values(p: &OrderParams) -> Vec<f64> {
    let (k, m) = (p.k(), p.m());
    let mut v = Vec::with_capacity(k * (k + 1) / 2 + k * m);
    for a in 0..k {
        for b in a..k {
            v.push(p.q()[(a, b)]);
        }
    }
    for a in 0..k {
        for n in 0..m {
            v.push(p.r()[(a, n)]);
        }
    }
    v
}

pub(crate) fn overlap_cells(p: &OrderParams, rho: &DMatrix<f64>) -> Vec<String> {
    let mut cells: Vec<String> = overlap_values(p).into_iter().map(num).collect();
    for a in 0..rho.nrows() {
        for n in 0..rho.ncols() {
            cells.push(num(rho[(a, n)]));
        }
    }
    cells
}
