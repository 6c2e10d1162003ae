use serde::{Deserialize, Serialize};

use super::{LossError, Result};
use crate::tensor::{Tensor, DEGENERATE_EPS};

/// How student slot `n` is paired with a teacher slot.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchStrategy {
    /// Slot `n` pairs with teacher slot `n`.
    #[default]
    Index,
    /// Minimum-cost assignment under `1 − cos`.
    Hungarian,
}

/// Minimum-cost perfect assignment for a square cost matrix.
///
/// Returns `assignment[row] = column`. Shortest augmenting paths with row/column
/// potentials, `O(n³)`.
pub fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    if n == 0 {
        return Vec::new();
    }
    // 1-based internals; index 0 is the virtual source.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut col_owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        col_owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = col_owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if reduced < minv[j] {
                    minv[j] = reduced;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[col_owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if col_owner[j0] == 0 {
                break;
            }
        }
        while j0 != 0 {
            let j1 = way[j0];
            col_owner[j0] = col_owner[j1];
            j0 = j1;
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[col_owner[j] - 1] = j - 1;
    }
    assignment
}

fn unit_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    (0..t.rows())
        .map(|i| {
            let row = t.row(i);
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm >= DEGENERATE_EPS) {
                return Err(LossError::DegenerateSlot { index: i, norm });
            }
            Ok(row.iter().map(|x| x / norm).collect())
        })
        .collect()
}

/// `cost[i][j] = 1 − cos(student_i, teacher_j)`.
pub fn cosine_cost(student: &Tensor, teacher: &Tensor) -> Result<Vec<Vec<f64>>> {
    if student.shape() != teacher.shape() || student.rank() != 2 {
        return Err(LossError::Shape(format!(
            "slot sets {:?} and {:?} cannot be matched",
            student.shape(),
            teacher.shape()
        )));
    }
    let (s, t) = (unit_rows(student)?, unit_rows(teacher)?);
    Ok(s.iter()
        .map(|a| t.iter().map(|b| 1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()).collect())
        .collect())
}

/// Permutation `π` so that student slot `n` pairs with teacher slot `π[n]`.
pub fn match_slots(student: &Tensor, teacher: &Tensor, strategy: MatchStrategy) -> Result<Vec<usize>> {
    match strategy {
        MatchStrategy::Index => {
            if student.shape() != teacher.shape() || student.rank() != 2 {
                return Err(LossError::Shape(format!(
                    "slot sets {:?} and {:?} cannot be matched",
                    student.shape(),
                    teacher.shape()
                )));
            }
            Ok((0..student.rows()).collect())
        }
        MatchStrategy::Hungarian => Ok(hungarian(&cosine_cost(student, teacher)?)),
    }
}

/// Total cost of an assignment, summed in row order.
pub fn assignment_cost(cost: &[Vec<f64>], assignment: &[usize]) -> f64 {
    assignment.iter().enumerate().map(|(i, &j)| cost[i][j]).sum()
}
