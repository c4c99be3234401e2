//! Index expressions: per-axis integer, slice, or list selections.
//!
//! An [`IndexExpr`] applies its terms to the leading axes of a tensor;
//! trailing axes are kept whole. Integer terms drop their axis, slice and
//! list terms keep it. Negative integers count from the end, Python style.

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Term {
    /// Select one position and drop the axis.
    Int(i64),
    /// Half-open range with optional bounds and a positive step.
    /// `None` bounds mean "from the start" / "to the end".
    Slice {
        start: Option<i64>,
        stop: Option<i64>,
        step: Option<i64>,
    },
    /// Explicit positions along the axis, kept in list order.
    List(Vec<i64>),
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct IndexExpr {
    terms: Vec<Term>,
}

impl IndexExpr {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_terms(terms: Vec<Term>) -> Self {
        Self { terms }
    }

    pub fn terms(&self) -> &[Term] {
        &self.terms
    }

    /// Append an integer term (may be negative).
    pub fn int(mut self, i: i64) -> Self {
        self.terms.push(Term::Int(i));
        self
    }

    /// Append a full-axis slice.
    pub fn all(mut self) -> Self {
        self.terms.push(Term::Slice {
            start: None,
            stop: None,
            step: None,
        });
        self
    }

    /// Append a `[start, stop)` slice.
    pub fn range(mut self, start: i64, stop: i64) -> Self {
        self.terms.push(Term::Slice {
            start: Some(start),
            stop: Some(stop),
            step: None,
        });
        self
    }

    pub fn slice(mut self, start: Option<i64>, stop: Option<i64>, step: Option<i64>) -> Self {
        self.terms.push(Term::Slice { start, stop, step });
        self
    }

    /// Append an explicit position list.
    pub fn list(mut self, items: impl Into<Vec<i64>>) -> Self {
        self.terms.push(Term::List(items.into()));
        self
    }

    /// Resolve the expression against a concrete shape.
    pub fn plan(&self, shape: &[usize]) -> Result<IndexPlan> {
        if self.terms.len() > shape.len() {
            return Err(Error::index(format!(
                "{} index terms applied to rank-{} tensor",
                self.terms.len(),
                shape.len()
            )));
        }
        let mut axes = Vec::with_capacity(shape.len());
        for (axis, &dim) in shape.iter().enumerate() {
            let sel = match self.terms.get(axis) {
                None => AxisSel {
                    indices: (0..dim).collect(),
                    keep: true,
                },
                Some(Term::Int(i)) => AxisSel {
                    indices: vec![norm_index(*i, dim, axis)?],
                    keep: false,
                },
                Some(Term::Slice { start, stop, step }) => {
                    let step = step.unwrap_or(1);
                    if step < 1 {
                        return Err(Error::index(format!(
                            "slice step must be >= 1, got {step} on axis {axis}"
                        )));
                    }
                    let lo = clamp_bound(start.unwrap_or(0), dim);
                    let hi = clamp_bound(stop.unwrap_or(dim as i64), dim);
                    let indices = if lo < hi {
                        (lo..hi).step_by(step as usize).collect()
                    } else {
                        Vec::new()
                    };
                    AxisSel {
                        indices,
                        keep: true,
                    }
                }
                Some(Term::List(items)) => {
                    let mut indices = Vec::with_capacity(items.len());
                    for &i in items {
                        indices.push(norm_index(i, dim, axis)?);
                    }
                    AxisSel {
                        indices,
                        keep: true,
                    }
                }
            };
            axes.push(sel);
        }
        Ok(IndexPlan { axes })
    }
}

/// Normalize a possibly negative index against an axis extent.
fn norm_index(i: i64, dim: usize, axis: usize) -> Result<usize> {
    let n = dim as i64;
    let j = if i < 0 { i + n } else { i };
    if j < 0 || j >= n {
        return Err(Error::index(format!(
            "index {i} out of bounds for axis {axis} of extent {dim}"
        )));
    }
    Ok(j as usize)
}

/// Clamp a slice bound to `[0, dim]`, resolving negatives first.
fn clamp_bound(b: i64, dim: usize) -> usize {
    let n = dim as i64;
    let b = if b < 0 { b + n } else { b };
    b.clamp(0, n) as usize
}

/// Selected positions per axis, resolved against a concrete shape.
#[derive(Debug, Clone)]
pub struct IndexPlan {
    axes: Vec<AxisSel>,
}

#[derive(Debug, Clone)]
struct AxisSel {
    indices: Vec<usize>,
    keep: bool,
}

impl IndexPlan {
    /// Shape of the selected region after dropping integer-indexed axes.
    pub fn region_shape(&self) -> Vec<usize> {
        self.axes
            .iter()
            .filter(|s| s.keep)
            .map(|s| s.indices.len())
            .collect()
    }

    pub fn region_len(&self) -> usize {
        self.axes.iter().map(|s| s.indices.len()).product()
    }

    /// Visit every selected element as (flat source offset, flat region
    /// offset), iterating the region in row-major order.
    pub fn for_each(&self, strides: &[usize], mut f: impl FnMut(usize, usize)) {
        let dims: Vec<usize> = self.axes.iter().map(|s| s.indices.len()).collect();
        let total: usize = dims.iter().product();
        if total == 0 {
            return;
        }
        let mut coord = vec![0usize; dims.len()];
        for region_off in 0..total {
            let mut src = 0usize;
            for (axis, &c) in coord.iter().enumerate() {
                src += self.axes[axis].indices[c] * strides[axis];
            }
            f(src, region_off);
            for axis in (0..dims.len()).rev() {
                coord[axis] += 1;
                if coord[axis] < dims[axis] {
                    break;
                }
                coord[axis] = 0;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int_terms_drop_axes() {
        let plan = IndexExpr::new().int(1).plan(&[2, 3]).unwrap();
        assert_eq!(plan.region_shape(), vec![3]);
    }

    #[test]
    fn negative_int_counts_from_end() {
        let plan = IndexExpr::new().int(-1).plan(&[4]).unwrap();
        let mut seen = Vec::new();
        plan.for_each(&[1], |src, _| seen.push(src));
        assert_eq!(seen, vec![3]);
    }

    #[test]
    fn out_of_bounds_is_an_index_error() {
        assert!(IndexExpr::new().int(5).plan(&[4]).is_err());
        assert!(IndexExpr::new().int(-5).plan(&[4]).is_err());
        assert!(IndexExpr::new().list([0, 9]).plan(&[4]).is_err());
    }

    #[test]
    fn slices_clamp_like_python() {
        let plan = IndexExpr::new().range(1, 100).plan(&[4]).unwrap();
        assert_eq!(plan.region_shape(), vec![3]);
        let empty = IndexExpr::new().range(3, 1).plan(&[4]).unwrap();
        assert_eq!(empty.region_shape(), vec![0]);
    }

    #[test]
    fn too_many_terms_rejected() {
        assert!(IndexExpr::new().int(0).int(0).plan(&[3]).is_err());
    }

    #[test]
    fn list_keeps_order_and_duplicates() {
        let plan = IndexExpr::new().list([2, 0, 2]).plan(&[3]).unwrap();
        let mut seen = Vec::new();
        plan.for_each(&[1], |src, _| seen.push(src));
        assert_eq!(seen, vec![2, 0, 2]);
    }
}
