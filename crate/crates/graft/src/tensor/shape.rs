//! Shape rules, shared verbatim by the eager ops and the validator.
//!
//! Keeping the rules in one place is what makes "validate clean implies
//! execute raises no shape error" hold by construction.

use crate::error::{Error, Result};
use crate::tensor::IndexExpr;

/// Restricted broadcast: shapes equal, either side a scalar, or the
/// lower-rank side equal to the trailing dimensions of the other.
pub fn broadcast(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a == b {
        return Ok(a.to_vec());
    }
    if a.is_empty() {
        return Ok(b.to_vec());
    }
    if b.is_empty() {
        return Ok(a.to_vec());
    }
    if a.len() > b.len() && a.ends_with(b) {
        return Ok(a.to_vec());
    }
    if b.len() > a.len() && b.ends_with(a) {
        return Ok(b.to_vec());
    }
    Err(Error::shape(format!(
        "shapes {a:?} and {b:?} are not broadcast-compatible"
    )))
}

/// True when `v` may broadcast onto `target` under the same restricted rule.
pub fn broadcasts_to(v: &[usize], target: &[usize]) -> bool {
    v == target || v.is_empty() || (v.len() < target.len() && target.ends_with(v))
        || (v.len() == target.len() && target.ends_with(v))
}

pub fn matmul(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() < 2 {
        return Err(Error::shape(format!(
            "matmul left operand must have rank >= 2, got {a:?}"
        )));
    }
    if b.len() != 2 {
        return Err(Error::shape(format!(
            "matmul right operand must have rank 2, got {b:?}"
        )));
    }
    let k = a[a.len() - 1];
    if k != b[0] {
        return Err(Error::shape(format!(
            "matmul inner dimensions differ: {a:?} x {b:?}"
        )));
    }
    let mut out = a[..a.len() - 1].to_vec();
    out.push(b[1]);
    Ok(out)
}

/// Batched matmul over the last two axes with equal leading axes.
pub fn bmm(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    if a.len() < 2 || b.len() != a.len() {
        return Err(Error::shape(format!(
            "bmm operands must share rank >= 2, got {a:?} x {b:?}"
        )));
    }
    let lead = a.len() - 2;
    if a[..lead] != b[..lead] {
        return Err(Error::shape(format!(
            "bmm leading dimensions differ: {a:?} x {b:?}"
        )));
    }
    if a[lead + 1] != b[lead] {
        return Err(Error::shape(format!(
            "bmm inner dimensions differ: {a:?} x {b:?}"
        )));
    }
    let mut out = a[..lead + 1].to_vec();
    out.push(b[lead + 1]);
    Ok(out)
}

/// Normalize a possibly negative axis against a rank.
pub fn norm_axis(axis: i64, rank: usize) -> Result<usize> {
    let r = rank as i64;
    let a = if axis < 0 { axis + r } else { axis };
    if a < 0 || a >= r {
        return Err(Error::axis(format!(
            "axis {axis} out of range for rank {rank}"
        )));
    }
    Ok(a as usize)
}

/// Reduction drops the reduced axis.
pub fn reduce(shape: &[usize], axis: i64) -> Result<(usize, Vec<usize>)> {
    let ax = norm_axis(axis, shape.len())?;
    let mut out = shape.to_vec();
    out.remove(ax);
    Ok((ax, out))
}

pub fn softmax(shape: &[usize], axis: i64) -> Result<usize> {
    norm_axis(axis, shape.len())
}

pub fn layer_norm(a: &[usize], gain: &[usize], bias: &[usize]) -> Result<Vec<usize>> {
    let last = *a.last().ok_or_else(|| {
        Error::shape("layer_norm input must have rank >= 1".to_string())
    })?;
    if gain != [last] || bias != [last] {
        return Err(Error::shape(format!(
            "layer_norm gain/bias must have shape [{last}], got {gain:?} and {bias:?}"
        )));
    }
    Ok(a.to_vec())
}

pub fn index_get(shape: &[usize], index: &IndexExpr) -> Result<Vec<usize>> {
    Ok(index.plan(shape)?.region_shape())
}

/// `index_set` keeps the base shape; the value must broadcast to the region.
pub fn index_set(shape: &[usize], index: &IndexExpr, value: &[usize]) -> Result<Vec<usize>> {
    let region = index.plan(shape)?.region_shape();
    if !broadcasts_to(value, &region) {
        return Err(Error::shape(format!(
            "cannot broadcast value of shape {value:?} onto selected region {region:?}"
        )));
    }
    Ok(shape.to_vec())
}

pub fn reshape(shape: &[usize], new_shape: &[usize]) -> Result<Vec<usize>> {
    let have: usize = shape.iter().product();
    let want: usize = new_shape.iter().product();
    if have != want {
        return Err(Error::shape(format!(
            "cannot reshape {shape:?} ({have} elements) to {new_shape:?} ({want} elements)"
        )));
    }
    Ok(new_shape.to_vec())
}

pub fn transpose(shape: &[usize], perm: &[usize]) -> Result<Vec<usize>> {
    if perm.len() != shape.len() {
        return Err(Error::shape(format!(
            "permutation {perm:?} does not match rank {}",
            shape.len()
        )));
    }
    let mut seen = vec![false; perm.len()];
    for &p in perm {
        if p >= perm.len() || seen[p] {
            return Err(Error::shape(format!("invalid permutation {perm:?}")));
        }
        seen[p] = true;
    }
    Ok(perm.iter().map(|&p| shape[p]).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_accepts_equal_scalar_and_trailing() {
        assert_eq!(broadcast(&[2, 3], &[2, 3]).unwrap(), vec![2, 3]);
        assert_eq!(broadcast(&[], &[4]).unwrap(), vec![4]);
        assert_eq!(broadcast(&[2, 5, 16], &[16]).unwrap(), vec![2, 5, 16]);
        assert_eq!(broadcast(&[5, 16], &[2, 5, 16]).unwrap(), vec![2, 5, 16]);
    }

    #[test]
    fn broadcast_rejects_general_numpy_rules() {
        assert!(broadcast(&[2, 1], &[2, 3]).is_err());
        assert!(broadcast(&[3, 1, 16], &[2, 5, 16]).is_err());
    }

    #[test]
    fn matmul_requires_rank_and_inner_match() {
        assert_eq!(matmul(&[2, 5, 16], &[16, 4]).unwrap(), vec![2, 5, 4]);
        assert!(matmul(&[2, 5, 16], &[8, 4]).is_err());
        assert!(matmul(&[5], &[5, 2]).is_err());
        assert!(matmul(&[2, 5], &[5, 2, 2]).is_err());
    }

    #[test]
    fn reduce_drops_axis_and_normalizes_negatives() {
        assert_eq!(reduce(&[2, 3, 4], -1).unwrap(), (2, vec![2, 3]));
        assert!(reduce(&[2], 1).is_err());
    }
}
