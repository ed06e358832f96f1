//! Dense solves for the small stacked stage systems (at most 8 unknowns).

pub(crate) const MAX_DIM: usize = 8;

pub(crate) type Mat = [[f64; MAX_DIM]; MAX_DIM];

/// Solves `a x = b` in place (first `n` rows/columns) by Gaussian elimination
/// with partial pivoting. Returns `false` on a singular pivot.
pub(crate) fn solve_in_place(a: &mut Mat, b: &mut [f64; MAX_DIM], n: usize) -> bool {
    debug_assert!(n <= MAX_DIM);
    for col in 0..n {
        let mut piv = col;
        let mut best = a[col][col].abs();
        for row in col + 1..n {
            let v = a[row][col].abs();
            if v > best {
                best = v;
                piv = row;
            }
        }
        if best == 0.0 || !best.is_finite() {
            return false;
        }
        if piv != col {
            a.swap(piv, col);
            b.swap(piv, col);
        }
        let inv = 1.0 / a[col][col];
        for row in col + 1..n {
            let factor = a[row][col] * inv;
            if factor != 0.0 {
                for k in col..n {
                    a[row][k] -= factor * a[col][k];
                }
                b[row] -= factor * b[col];
            }
        }
    }
    for row in (0..n).rev() {
        let mut acc = b[row];
        for k in row + 1..n {
            acc -= a[row][k] * b[k];
        }
        b[row] = acc / a[row][row];
    }
    true
}

pub(crate) fn transpose(a: &Mat, n: usize) -> Mat {
    let mut t = [[0.0; MAX_DIM]; MAX_DIM];
    for i in 0..n {
        for j in 0..n {
            t[j][i] = a[i][j];
        }
    }
    t
}
