//! Indexing helpers for square periodic lattices.
//!
//! Fields are stored row-major: site (r, c) lives at r * l + c. All shifts
//! wrap cyclically.

/// Row-major site index with periodic wrapping.
#[inline]
pub fn site(l: usize, r: usize, c: usize) -> usize {
    (r % l) * l + (c % l)
}

/// The four nearest-neighbor indices of every site, order +row, -row, +col, -col.
pub fn neighbor_table(l: usize) -> Vec<[usize; 4]> {
    let mut t = Vec::with_capacity(l * l);
    for r in 0..l {
        for c in 0..l {
            t.push([
                site(l, r + 1, c),
                site(l, r + l - 1, c),
                site(l, r, c + 1),
                site(l, r, c + l - 1),
            ]);
        }
    }
    t
}

/// Cyclically shifts a field by (dr, dc): output site (r, c) takes the value
/// of input site (r - dr, c - dc).
pub fn translate(field: &[f64], l: usize, dr: usize, dc: usize) -> Vec<f64> {
    debug_assert_eq!(field.len(), l * l);
    let mut out = vec![0.0; l * l];
    for r in 0..l {
        for c in 0..l {
            out[site(l, r + dr, c + dc)] = field[r * l + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn translate_round_trips() {
        let l = 4;
        let field: Vec<f64> = (0..l * l).map(|i| i as f64).collect();
        for dr in 0..l {
            for dc in 0..l {
                let shifted = translate(&field, l, dr, dc);
                let back = translate(&shifted, l, l - dr, l - dc);
                assert_eq!(back, field);
            }
        }
    }

    #[test]
    fn translate_moves_single_site() {
        let l = 3;
        let mut field = vec![0.0; 9];
        field[site(l, 1, 2)] = 5.0;
        let shifted = translate(&field, l, 2, 2);
        assert_eq!(shifted[site(l, 0, 1)], 5.0);
        assert_eq!(shifted.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn neighbors_wrap() {
        let l = 3;
        let t = neighbor_table(l);
        assert_eq!(t[site(l, 2, 2)], [
            site(l, 0, 2),
            site(l, 1, 2),
            site(l, 2, 0),
            site(l, 2, 1),
        ]);
    }
}
