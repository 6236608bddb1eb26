//! Dense solves for the handful of tiny systems in this crate.

/// Gaussian elimination with partial pivoting; `rhs` becomes the solution.
/// Systems here are at most ~10x10 (filter states, polynomial fits).
pub(crate) fn solve_dense(m: &mut [Vec<f64>], rhs: &mut [f64]) {
    let n = rhs.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
            .unwrap();
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        let diag = m[col][col];
        for row in col + 1..n {
            let f = m[row][col] / diag;
            if f == 0.0 {
                continue;
            }
            for k in col..n {
                m[row][k] -= f * m[col][k];
            }
            rhs[row] -= f * rhs[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = rhs[col];
        for k in col + 1..n {
            acc -= m[col][k] * rhs[k];
        }
        rhs[col] = acc / m[col][col];
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_a_known_system() {
        // [2 1; 1 3] x = [5; 10] -> x = [1; 3]
        let mut m = vec![vec![2.0, 1.0], vec![1.0, 3.0]];
        let mut rhs = vec![5.0, 10.0];
        solve_dense(&mut m, &mut rhs);
        assert!((rhs[0] - 1.0).abs() < 1e-12);
        assert!((rhs[1] - 3.0).abs() < 1e-12);
    }

    #[test]
    fn pivots_on_zero_diagonal() {
        let mut m = vec![vec![0.0, 1.0], vec![1.0, 0.0]];
        let mut rhs = vec![2.0, 3.0];
        solve_dense(&mut m, &mut rhs);
        assert!((rhs[0] - 3.0).abs() < 1e-12);
        assert!((rhs[1] - 2.0).abs() < 1e-12);
    }
}
