//! Maximum-weight one-to-one assignment on a rectangular count matrix.

use ndarray::Array2;

/// Optimal assignment of the padded square problem together with the dual
/// potentials certifying it.
struct Solution {
    value: i64,
    /// `row_to_col[r]` for the real rows; `None` means a dummy column.
    row_to_col: Vec<Option<usize>>,
    u: Vec<i64>,
    v: Vec<i64>,
    n: usize,
}

/// Min-cost Hungarian algorithm with potentials on a square matrix `cost`
/// (1-indexed internally). Returns the column assigned to each row and the
/// potentials `u`, `v` with `u[i] + v[j] <= cost[i][j]`.
fn hungarian_min(cost: &[Vec<i64>]) -> (Vec<usize>, Vec<i64>, Vec<i64>) {
    let n = cost.len();
    let inf = i64::MAX / 4;
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    (row_to_col, u[1..].to_vec(), v[1..].to_vec())
}

/// Solves the sub-problem on `rows` x `cols` of `w`, maximizing total weight.
fn solve(w: &Array2<i64>, rows: &[usize], cols: &[usize]) -> Solution {
    let n = rows.len().max(cols.len());
    let max = w.iter().copied().max().unwrap_or(0).max(0);
    // cost = max - weight on real cells, max on padding (weight 0)
    let cost: Vec<Vec<i64>> = (0..n)
        .map(|i| {
            (0..n)
                .map(|j| {
                    if i < rows.len() && j < cols.len() {
                        max - w[[rows[i], cols[j]]]
                    } else {
                        max
                    }
                })
                .collect()
        })
        .collect();
    let (assign, u, v) = if n == 0 { (vec![], vec![], vec![]) } else { hungarian_min(&cost) };
    let mut value = 0;
    let mut row_to_col = vec![None; rows.len()];
    for (i, slot) in row_to_col.iter_mut().enumerate() {
        let j = assign[i];
        if j < cols.len() {
            value += w[[rows[i], cols[j]]];
            *slot = Some(j);
        }
    }
    Solution {
        value,
        row_to_col,
        u,
        v,
        n,
    }
}

fn reduced_cost(w: &Array2<i64>, sol: &Solution, rows: &[usize], cols: &[usize], i: usize, j: usize) -> i64 {
    let max = w.iter().copied().max().unwrap_or(0).max(0);
    let c = if j < cols.len() { max - w[[rows[i], cols[j]]] } else { max };
    debug_assert!(i < sol.n && j < sol.n);
    c - sol.u[i] - sol.v[j]
}

/// Maps each row (predicted label) to at most one column (class) so that the
/// total matched count is maximal and exactly `min(P, G)` pairs are formed.
///
/// Among all maximizers the lexicographically smallest mapping is returned,
/// comparing rows in order with every column index ranking before "unmapped".
pub fn hungarian_assign(counts: &Array2<i64>) -> Vec<Option<usize>> {
    let (p, _) = counts.dim();
    let mut rows: Vec<usize> = (0..p).collect();
    let mut cols: Vec<usize> = (0..counts.ncols()).collect();
    let mut mapping = vec![None; p];
    let mut sol = solve(counts, &rows, &cols);

    for r in 0..p {
        // rows[0] == r: earlier rows have been fixed and removed
        debug_assert_eq!(rows[0], r);
        let target = sol.value;
        let witness = sol.row_to_col[0];
        let limit = witness.unwrap_or(cols.len());
        let mut chosen: Option<(Option<usize>, Solution)> = None;
        for j in 0..limit {
            // an edge outside the equality subgraph of an optimal dual is in no optimum
            if reduced_cost(counts, &sol, &rows, &cols, 0, j) != 0 {
                continue;
            }
            let rest = solve(counts, &rows[1..], &cols_without(&cols, j));
            if rest.value + counts[[r, cols[j]]] == target {
                chosen = Some((Some(j), rest));
                break;
            }
        }
        let (pick, next) = match chosen {
            Some(c) => c,
            None => {
                let rest = match witness {
                    Some(j) => solve(counts, &rows[1..], &cols_without(&cols, j)),
                    None => solve(counts, &rows[1..], &cols),
                };
                (witness, rest)
            }
        };
        mapping[r] = pick.map(|j| cols[j]);
        rows.remove(0);
        if let Some(j) = pick {
            cols.remove(j);
        }
        sol = next;
    }
    mapping
}

fn cols_without(cols: &[usize], j: usize) -> Vec<usize> {
    cols.iter().enumerate().filter(|&(k, _)| k != j).map(|(_, &c)| c).collect()
}

/// Total count matched by `mapping`.
pub fn matched_count(counts: &Array2<i64>, mapping: &[Option<usize>]) -> i64 {
    mapping
        .iter()
        .enumerate()
        .filter_map(|(r, c)| c.map(|c| counts[[r, c]]))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn small_examples() {
        let a = array![[5i64, 1], [2, 7]];
        assert_eq!(hungarian_assign(&a), vec![Some(0), Some(1)]);
        assert_eq!(matched_count(&a, &hungarian_assign(&a)), 12);
        let b = array![[1i64, 9], [8, 2]];
        assert_eq!(hungarian_assign(&b), vec![Some(1), Some(0)]);
        assert_eq!(matched_count(&b, &hungarian_assign(&b)), 17);
    }

    #[test]
    fn ties_pick_lexicographically_smallest() {
        let z = Array2::<i64>::zeros((3, 3));
        assert_eq!(hungarian_assign(&z), vec![Some(0), Some(1), Some(2)]);
        let c = array![[1i64, 1], [1, 1], [1, 1]];
        assert_eq!(hungarian_assign(&c), vec![Some(0), Some(1), None]);
    }

    #[test]
    fn rectangular_shapes() {
        let wide = array![[0i64, 3, 1]];
        assert_eq!(hungarian_assign(&wide), vec![Some(1)]);
        let tall = array![[0i64], [4], [2]];
        assert_eq!(hungarian_assign(&tall), vec![None, Some(0), None]);
        let empty = Array2::<i64>::zeros((0, 3));
        assert!(hungarian_assign(&empty).is_empty());
        let no_cols = Array2::<i64>::zeros((2, 0));
        assert_eq!(hungarian_assign(&no_cols), vec![None, None]);
    }
}
