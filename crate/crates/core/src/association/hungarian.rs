//! Rectangular maximum-weight assignment (Hungarian method with potentials).

/// Match every row to a distinct column maximizing the total weight.
///
/// `weights` is row-major `rows × cols` with `rows <= cols`. Returns the
/// column chosen for each row.
pub(crate) fn max_weight_assignment(weights: &[f64], rows: usize, cols: usize) -> Vec<usize> {
    assert!(rows <= cols, "assignment needs rows <= cols ({rows} > {cols})");
    assert_eq!(weights.len(), rows * cols);
    if rows == 0 {
        return Vec::new();
    }
    let cost = |i: usize, j: usize| -weights[i * cols + j];

    // 1-based potentials; column 0 is the virtual start column.
    let mut u = vec![0.0; rows + 1];
    let mut v = vec![0.0; cols + 1];
    let mut p = vec![0usize; cols + 1];
    let mut way = vec![0usize; cols + 1];
    for i in 1..=rows {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; cols + 1];
        let mut used = vec![false; cols + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=cols {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=cols {
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
    let mut out = vec![usize::MAX; rows];
    for j in 1..=cols {
        if p[j] != 0 {
            out[p[j] - 1] = j - 1;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute(weights: &[f64], rows: usize, cols: usize) -> f64 {
        fn go(w: &[f64], r: usize, cols: usize, row: usize, used: &mut Vec<bool>) -> f64 {
            if row == r {
                return 0.0;
            }
            let mut best = f64::NEG_INFINITY;
            for j in 0..cols {
                if !used[j] {
                    used[j] = true;
                    best = best.max(w[row * cols + j] + go(w, r, cols, row + 1, used));
                    used[j] = false;
                }
            }
            best
        }
        go(weights, rows, cols, 0, &mut vec![false; cols])
    }

    #[test]
    fn matches_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..200 {
            let rows = rng.random_range(1..5);
            let cols = rng.random_range(rows..7);
            let w: Vec<f64> = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
            let a = max_weight_assignment(&w, rows, cols);
            let mut seen = a.clone();
            seen.sort();
            seen.dedup();
            assert_eq!(seen.len(), rows);
            let total: f64 = a.iter().enumerate().map(|(i, &j)| w[i * cols + j]).sum();
            assert!((total - brute(&w, rows, cols)).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_pattern() {
        let w = [1.0, 0.0, 0.0, 1.0];
        assert_eq!(max_weight_assignment(&w, 2, 2), vec![0, 1]);
    }
}
