//! Piecewise-constant Sumformer on a uniform grid of `[0,1)^d`.
//!
//! Each token is quantized to a cell; the remaining tokens are encoded as an
//! integer histogram over cells (the sum of one-hot cell indicators), so the
//! lookup key `(own cell, histogram of the others)` is exactly invariant under
//! reordering of the other tokens. Table values are `g` evaluated at the
//! lower-left corners of the cells.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::targets::TargetFunction;
use crate::tensor::Matrix;

/// Largest admissible `Δ^{nd}`.
pub const TABLE_BUDGET: u128 = 1_000_000;

/// Sparse histogram: `(cell index, count)` sorted by cell index.
pub type Histogram = Vec<(usize, usize)>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub cell: Vec<usize>,
    pub others: Vec<(Vec<usize>, usize)>,
    pub value: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct DiscreteSumformer {
    pub delta: usize,
    pub n: usize,
    pub d: usize,
    pub target: String,
    table: BTreeMap<(usize, Histogram), Vec<f64>>,
}

impl DiscreteSumformer {
    pub fn cell_width(&self) -> f64 {
        1.0 / self.delta as f64
    }

    pub fn table_len(&self) -> usize {
        self.table.len()
    }

    fn cell_count(&self) -> usize {
        self.delta.pow(self.d as u32)
    }

    /// Flattened cell index of a token; coordinates are `⌊xΔ⌋`.
    pub fn quantize(&self, x: &[f64]) -> Result<usize> {
        let mut idx = 0;
        for &v in x {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Domain { value: v });
            }
            let c = ((v * self.delta as f64).floor() as usize).min(self.delta - 1);
            idx = idx * self.delta + c;
        }
        Ok(idx)
    }

    pub fn cell_coords(&self, mut idx: usize) -> Vec<usize> {
        let mut c = vec![0; self.d];
        for slot in c.iter_mut().rev() {
            *slot = idx % self.delta;
            idx /= self.delta;
        }
        c
    }

    /// Lower-left corner of a cell.
    pub fn anchor(&self, idx: usize) -> Vec<f64> {
        self.cell_coords(idx)
            .into_iter()
            .map(|c| c as f64 / self.delta as f64)
            .collect()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.rows() != self.n || x.cols() != self.d {
            return Err(shape_err(
                "discrete_forward",
                format!("{}×{} input for n = {}, d = {}", x.rows(), x.cols(), self.n, self.d),
            ));
        }
        let cells = x.row_iter().map(|r| self.quantize(r)).collect::<Result<Vec<_>>>()?;
        let mut total: BTreeMap<usize, usize> = BTreeMap::new();
        for &c in &cells {
            *total.entry(c).or_default() += 1;
        }
        let mut out = Vec::with_capacity(self.n);
        for &own in &cells {
            let hist: Histogram = total
                .iter()
                .filter_map(|(&c, &k)| {
                    let k = if c == own { k - 1 } else { k };
                    (k > 0).then_some((c, k))
                })
                .collect();
            let value = self.table.get(&(own, hist)).ok_or_else(|| {
                Error::Contract(format!("no table entry for cell {own}"))
            })?;
            out.push(value.clone());
        }
        Matrix::from_rows(&out)
    }

    /// The lookup table in deterministic key order.
    pub fn entries(&self) -> Vec<TableEntry> {
        self.table
            .iter()
            .map(|((cell, hist), value)| TableEntry {
                cell: self.cell_coords(*cell),
                others: hist.iter().map(|&(c, k)| (self.cell_coords(c), k)).collect(),
                value: value.clone(),
            })
            .collect()
    }

    pub fn export_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Export<'a> {
            schema_version: u32,
            target: &'a str,
            delta: usize,
            n: usize,
            d: usize,
            entries: Vec<TableEntry>,
        }
        Ok(serde_json::to_string_pretty(&Export {
            schema_version: 1,
            target: &self.target,
            delta: self.delta,
            n: self.n,
            d: self.d,
            entries: self.entries(),
        })?)
    }
}

/// All multisets of size `size` drawn from `0..cells`, as sparse histograms.
fn multisets(cells: usize, size: usize) -> Vec<Histogram> {
    fn rec(start: usize, cells: usize, left: usize, cur: &mut Vec<usize>, out: &mut Vec<Histogram>) {
        if left == 0 {
            let mut h: Histogram = Vec::new();
            for &c in cur.iter() {
                match h.last_mut() {
                    Some((last, k)) if *last == c => *k += 1,
                    _ => h.push((c, 1)),
                }
            }
            out.push(h);
            return;
        }
        for c in start..cells {
            cur.push(c);
            rec(c, cells, left - 1, cur, out);
            cur.pop();
        }
    }
    let mut out = Vec::new();
    rec(0, cells, size, &mut Vec::with_capacity(size), &mut out);
    out
}

pub fn build_discrete_sumformer(target: &TargetFunction, delta: usize, n: usize, d: usize) -> Result<DiscreteSumformer> {
    if delta == 0 || n == 0 || d == 0 {
        return Err(Error::Contract(format!("Δ = {delta}, n = {n}, d = {d} must all be positive")));
    }
    let required = (delta as u128)
        .checked_pow((n * d) as u32)
        .unwrap_or(u128::MAX);
    if required > TABLE_BUDGET {
        return Err(Error::Budget {
            required,
            limit: TABLE_BUDGET,
        });
    }
    let mut ds = DiscreteSumformer {
        delta,
        n,
        d,
        target: target.name.clone(),
        table: BTreeMap::new(),
    };
    let cells = ds.cell_count();
    let anchors: Vec<Vec<f64>> = (0..cells).map(|c| ds.anchor(c)).collect();
    let others = multisets(cells, n - 1);
    for own in 0..cells {
        for hist in &others {
            let rest: Vec<&[f64]> = hist
                .iter()
                .flat_map(|&(c, k)| std::iter::repeat_n(anchors[c].as_slice(), k))
                .collect();
            let value = target.eval_point(&anchors[own], &rest);
            if value.len() != d {
                return Err(shape_err(
                    "build_discrete_sumformer",
                    format!("target returned {} values for d = {d}", value.len()),
                ));
            }
            ds.table.insert((own, hist.clone()), value);
        }
    }
    Ok(ds)
}
