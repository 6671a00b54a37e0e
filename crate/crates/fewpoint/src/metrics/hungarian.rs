//! Exact linear assignment via the Hungarian algorithm with potentials,
//! O(n³) for an n×n cost matrix.

/// Solves the square assignment problem, minimizing total cost.
/// Returns `assignment[row] = col` and the total cost.
///
/// `cost` is row-major n×n. All entries must be finite.
pub fn solve(cost: &[f64], n: usize) -> (Vec<usize>, f64) {
    assert_eq!(cost.len(), n * n, "cost matrix must be n*n");
    // Potentials-based shortest augmenting path formulation with 1-based
    // auxiliary arrays; p[j] is the row matched to column j.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1]; // matched row for each column (0 = none)
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
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i * n + j])
        .sum();
    (assignment, total)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_matrix_prefers_diagonal_zeros() {
        // cost = 1 - I: diagonal is cheapest
        let n = 3;
        let mut cost = vec![1.0; n * n];
        for i in 0..n {
            cost[i * n + i] = 0.0;
        }
        let (assignment, total) = solve(&cost, n);
        assert_eq!(assignment, vec![0, 1, 2]);
        assert_eq!(total, 0.0);
    }

    #[test]
    fn forced_off_diagonal() {
        // row 0 must take col 1, row 1 must take col 0
        let cost = vec![10.0, 1.0, 2.0, 20.0];
        let (assignment, total) = solve(&cost, 2);
        assert_eq!(assignment, vec![1, 0]);
        assert_eq!(total, 3.0);
    }

    #[test]
    fn single_element() {
        let (assignment, total) = solve(&[7.5], 1);
        assert_eq!(assignment, vec![0]);
        assert_eq!(total, 7.5);
    }
}
