//! Input-feature reorderings driven by the Hessian diagonal.
//!
//! Group-Aware Reordering (GAR) only moves columns within their group and
//! moves whole groups, so after quantizing in permuted order every original
//! group of consecutive columns still owns exactly one scale/zero-point pair.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{DpqError, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReorderMode {
    None,
    #[default]
    Gar,
    /// Unrestricted act-order style sort; breaks group contiguity.
    Full,
}

/// Score used to rank whole groups under GAR.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GroupRanking {
    #[default]
    MaxDiagonal,
    /// Mean of the largest 10% (at least one) diagonal entries of the group.
    TopDecileMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Axis {
    Rows,
    Columns,
}

/// A contiguous run of permuted positions quantized with one set of group
/// parameters. `stored_group` is the parameter slot the run ends up in.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    pub stored_group: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarPermutation {
    /// `order[k]` is the original index placed at permuted position `k`.
    pub order: Vec<usize>,
    /// `positions[i]` is the permuted position of original index `i`.
    pub positions: Vec<usize>,
    pub group_size: usize,
    /// Ranking score of each original group (empty unless `mode == Gar`).
    pub group_ranks: Vec<f64>,
    /// Original group indices in processing order (empty unless `mode == Gar`).
    pub group_order: Vec<usize>,
    pub mode: ReorderMode,
}

fn descending_then_index(diag: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| diag[b].total_cmp(&diag[a]).then(a.cmp(&b))
}

fn inverse_of(order: &[usize]) -> Vec<usize> {
    let mut positions = vec![0; order.len()];
    for (k, &i) in order.iter().enumerate() {
        positions[i] = k;
    }
    positions
}

fn group_score(values: &mut [f64], ranking: GroupRanking) -> f64 {
    values.sort_by(|a, b| b.total_cmp(a));
    match ranking {
        GroupRanking::MaxDiagonal => values[0],
        GroupRanking::TopDecileMean => {
            let k = values.len().div_ceil(10).max(1);
            values[..k].iter().sum::<f64>() / k as f64
        }
    }
}

impl GarPermutation {
    pub fn identity(len: usize, group_size: usize) -> Self {
        let order: Vec<usize> = (0..len).collect();
        GarPermutation {
            positions: order.clone(),
            order,
            group_size,
            group_ranks: Vec::new(),
            group_order: Vec::new(),
            mode: ReorderMode::None,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_identity(&self) -> bool {
        self.order.iter().enumerate().all(|(k, &i)| k == i)
    }

    pub fn num_groups(&self) -> usize {
        self.len().div_ceil(self.group_size)
    }

    /// Quantization runs in permuted order. Under GAR each run is one whole
    /// original group (a short final group keeps its true length); otherwise
    /// runs are aligned chunks of `group_size` permuted positions.
    pub fn segments(&self) -> Vec<Segment> {
        let n = self.len();
        let g = self.group_size;
        match self.mode {
            ReorderMode::Gar => {
                let mut start = 0;
                self.group_order
                    .iter()
                    .map(|&grp| {
                        let len = g.min(n - grp * g);
                        let seg = Segment {
                            start,
                            len,
                            stored_group: grp,
                        };
                        start += len;
                        seg
                    })
                    .collect()
            }
            _ => (0..self.num_groups())
                .map(|k| Segment {
                    start: k * g,
                    len: g.min(n - k * g),
                    stored_group: k,
                })
                .collect(),
        }
    }

    /// Parameter slot used by each ORIGINAL column.
    pub fn column_groups(&self) -> Vec<usize> {
        let mut out = vec![0; self.len()];
        for seg in self.segments() {
            for k in seg.start..seg.start + seg.len {
                out[self.order[k]] = seg.stored_group;
            }
        }
        out
    }

    /// Gathers `values` into permuted order.
    pub fn permute<T: Clone>(&self, values: &[T]) -> Result<Vec<T>> {
        self.check_len(values.len())?;
        Ok(self.order.iter().map(|&i| values[i].clone()).collect())
    }

    /// Restores original order from permuted `values`.
    pub fn unpermute<T: Clone>(&self, values: &[T]) -> Result<Vec<T>> {
        self.check_len(values.len())?;
        Ok(self.positions.iter().map(|&k| values[k].clone()).collect())
    }

    /// Reorders a per-group list (original group order) into GAR processing order.
    pub fn permute_groups<T: Clone>(&self, per_group: &[T]) -> Result<Vec<T>> {
        let order = self.processing_group_order();
        if per_group.len() != order.len() {
            return Err(DpqError::shape("per-group list", order.len(), per_group.len()));
        }
        Ok(order.iter().map(|&g| per_group[g].clone()).collect())
    }

    /// Inverse of [`permute_groups`](Self::permute_groups).
    pub fn unpermute_groups<T: Clone>(&self, permuted: &[T]) -> Result<Vec<T>> {
        let order = self.processing_group_order();
        if permuted.len() != order.len() {
            return Err(DpqError::shape("per-group list", order.len(), permuted.len()));
        }
        let mut out: Vec<Option<T>> = vec![None; order.len()];
        for (k, &g) in order.iter().enumerate() {
            out[g] = Some(permuted[k].clone());
        }
        Ok(out.into_iter().map(|v| v.expect("group order is a bijection")).collect())
    }

    fn processing_group_order(&self) -> Vec<usize> {
        if self.mode == ReorderMode::Gar {
            self.group_order.clone()
        } else {
            (0..self.num_groups()).collect()
        }
    }

    fn check_len(&self, len: usize) -> Result<()> {
        if len != self.len() {
            return Err(DpqError::shape("permutation length", self.len(), len));
        }
        Ok(())
    }

    /// Whether every original group occupies one contiguous run of permuted
    /// positions, aligned to `group_size` when the length is a multiple of it.
    pub fn has_group_block_structure(&self) -> bool {
        let g = self.group_size;
        let n = self.len();
        (0..self.num_groups()).all(|grp| {
            let members = grp * g..(grp * g + g).min(n);
            let len = members.len();
            let pos: Vec<usize> = members.map(|i| self.positions[i]).collect();
            let lo = *pos.iter().min().unwrap();
            let hi = *pos.iter().max().unwrap();
            let contiguous = hi - lo + 1 == len;
            contiguous && (!n.is_multiple_of(g) || lo.is_multiple_of(g))
        })
    }
}

/// GAR permutation with groups ranked by their maximum diagonal entry.
pub fn compute_gar_permutation(hessian_diag: &[f64], group_size: usize) -> Result<GarPermutation> {
    compute_gar_permutation_with(hessian_diag, group_size, GroupRanking::MaxDiagonal)
}

pub fn compute_gar_permutation_with(
    hessian_diag: &[f64],
    group_size: usize,
    ranking: GroupRanking,
) -> Result<GarPermutation> {
    if group_size < 1 {
        return Err(DpqError::InvalidArgument("group_size must be >= 1".into()));
    }
    let n = hessian_diag.len();
    let num_groups = n.div_ceil(group_size);
    let group_ranks: Vec<f64> = (0..num_groups)
        .map(|g| {
            let mut vals = hessian_diag[g * group_size..(g * group_size + group_size).min(n)].to_vec();
            group_score(&mut vals, ranking)
        })
        .collect();

    let mut group_order: Vec<usize> = (0..num_groups).collect();
    group_order.sort_by(descending_then_index(&group_ranks));

    let mut order = Vec::with_capacity(n);
    for &g in &group_order {
        let mut members: Vec<usize> = (g * group_size..(g * group_size + group_size).min(n)).collect();
        members.sort_by(descending_then_index(hessian_diag));
        order.extend(members);
    }
    Ok(GarPermutation {
        positions: inverse_of(&order),
        order,
        group_size,
        group_ranks,
        group_order,
        mode: ReorderMode::Gar,
    })
}

/// Global sort of features by diagonal, descending; ties by original index.
pub fn compute_full_permutation(hessian_diag: &[f64], group_size: usize) -> Result<GarPermutation> {
    if group_size < 1 {
        return Err(DpqError::InvalidArgument("group_size must be >= 1".into()));
    }
    let mut order: Vec<usize> = (0..hessian_diag.len()).collect();
    order.sort_by(descending_then_index(hessian_diag));
    Ok(GarPermutation {
        positions: inverse_of(&order),
        order,
        group_size,
        group_ranks: Vec::new(),
        group_order: Vec::new(),
        mode: ReorderMode::Full,
    })
}

pub fn permutation_for_mode(
    mode: ReorderMode,
    hessian_diag: &[f64],
    group_size: usize,
    ranking: GroupRanking,
) -> Result<GarPermutation> {
    match mode {
        ReorderMode::None => {
            if group_size < 1 {
                return Err(DpqError::InvalidArgument("group_size must be >= 1".into()));
            }
            Ok(GarPermutation::identity(hessian_diag.len(), group_size))
        }
        ReorderMode::Gar => compute_gar_permutation_with(hessian_diag, group_size, ranking),
        ReorderMode::Full => compute_full_permutation(hessian_diag, group_size),
    }
}

/// Reorders the rows or columns of `m` into permuted order.
pub fn apply_permutation(m: &Matrix, p: &GarPermutation, axis: Axis) -> Result<Matrix> {
    reorder(m, &p.order, axis)
}

/// Restores the original order of rows or columns permuted by `p`.
pub fn invert_permutation(m: &Matrix, p: &GarPermutation, axis: Axis) -> Result<Matrix> {
    reorder(m, &p.positions, axis)
}

fn reorder(m: &Matrix, gather: &[usize], axis: Axis) -> Result<Matrix> {
    let len = match axis {
        Axis::Rows => m.rows(),
        Axis::Columns => m.cols(),
    };
    if len != gather.len() {
        return Err(DpqError::shape("permutation axis length", gather.len(), len));
    }
    Ok(match axis {
        Axis::Columns => m.gather_columns(gather),
        Axis::Rows => Matrix::from_fn(m.rows(), m.cols(), |r, c| m[(gather[r], c)]),
    })
}
