//! Exact minimum-cost bipartite assignment and the cost matrices built on it.
//!
//! [`hungarian`] solves the rectangular assignment problem with the
//! shortest-augmenting-path Hungarian method (O(n^3)), then resolves ties
//! deterministically: rows are fixed in ascending order, each taking the
//! smallest column that still admits an optimal completion. Optimal
//! completions are exactly the perfect matchings on the tight edges of the
//! optimal dual, so the refinement never leaves the optimal face.

use thiserror::Error;

use crate::detector::PredictionSet;
use crate::losses::{focal_elem, FocalParams, GtBox};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MatchingError {
    #[error("cost matrix needs at least one row and one column, got {rows}x{cols}")]
    Empty { rows: usize, cols: usize },
    #[error("cost matrix holds {len} entries, expected {rows}x{cols}")]
    Size { rows: usize, cols: usize, len: usize },
    #[error("non-finite cost at ({row}, {col})")]
    NonFinite { row: usize, col: usize },
    #[error("query count mismatch: teacher {teacher}, student {student}")]
    CountMismatch { teacher: usize, student: usize },
}

pub type Result<T> = std::result::Result<T, MatchingError>;

#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, costs: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(MatchingError::Empty { rows, cols });
        }
        if costs.len() != rows * cols {
            return Err(MatchingError::Size {
                rows,
                cols,
                len: costs.len(),
            });
        }
        if let Some(i) = costs.iter().position(|c| !c.is_finite()) {
            return Err(MatchingError::NonFinite {
                row: i / cols,
                col: i % cols,
            });
        }
        Ok(CostMatrix { rows, cols, costs })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self> {
        let costs = (0..rows * cols).map(|i| f(i / cols, i % cols)).collect();
        CostMatrix::new(rows, cols, costs)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.costs[r * self.cols + c]
    }

    pub fn costs(&self) -> &[f64] {
        &self.costs
    }

    /// Copy with rows and columns swapped.
    pub fn transposed(&self) -> CostMatrix {
        let costs = (0..self.rows * self.cols)
            .map(|i| self.get(i % self.rows, i / self.rows))
            .collect();
        CostMatrix {
            rows: self.cols,
            cols: self.rows,
            costs,
        }
    }
}

/// An injective matching between row and column index sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub total_cost: f64,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    /// Builds an assignment from explicit pairs, deriving cost and the
    /// unmatched index lists.
    pub fn from_pairs(cost: &CostMatrix, mut pairs: Vec<(usize, usize)>) -> Assignment {
        pairs.sort_unstable();
        let total_cost = pairs.iter().map(|&(r, c)| cost.get(r, c)).sum();
        let mut row_used = vec![false; cost.rows];
        let mut col_used = vec![false; cost.cols];
        for &(r, c) in &pairs {
            row_used[r] = true;
            col_used[c] = true;
        }
        Assignment {
            pairs,
            total_cost,
            unmatched_rows: (0..cost.rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..cost.cols).filter(|&c| !col_used[c]).collect(),
        }
    }

    /// Identity matching over `n` indices.
    pub fn identity(n: usize) -> Assignment {
        Assignment {
            pairs: (0..n).map(|i| (i, i)).collect(),
            total_cost: 0.0,
            unmatched_rows: Vec::new(),
            unmatched_cols: Vec::new(),
        }
    }

    /// Column matched to each row, when every row in `0..n` is matched.
    pub fn as_permutation(&self, n: usize) -> Option<Vec<usize>> {
        if self.pairs.len() != n {
            return None;
        }
        let mut perm = vec![usize::MAX; n];
        let mut seen = vec![false; n];
        for &(r, c) in &self.pairs {
            if r >= n || c >= n || seen[c] {
                return None;
            }
            seen[c] = true;
            perm[r] = c;
        }
        Some(perm)
    }
}

/// Min-cost assignment of size `min(rows, cols)`.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let n = cost.rows.max(cost.cols);
    // padded square matrix, 1-based potentials below
    let a = |i: usize, j: usize| -> f64 {
        if i < cost.rows && j < cost.cols {
            cost.get(i, j)
        } else {
            0.0
        }
    };

    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = a(i0 - 1, j - 1) - u[i0] - v[j];
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

    let mut row_mate = vec![0usize; n];
    let mut col_mate = vec![0usize; n];
    for j in 1..=n {
        row_mate[p[j] - 1] = j - 1;
        col_mate[j - 1] = p[j] - 1;
    }

    let scale = cost.costs.iter().fold(1.0f64, |m, c| m.max(c.abs()));
    let tol = 1e-9 * scale * n as f64;
    let tight: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| a(i, j) - u[i + 1] - v[j + 1] <= tol)
                .collect()
        })
        .collect();

    let mut col_fixed = vec![false; n];
    for r in 0..cost.rows {
        for &c in &tight[r] {
            if col_fixed[c] {
                continue;
            }
            if row_mate[r] == c || reroute(r, c, &tight, &col_fixed, &mut row_mate, &mut col_mate) {
                col_fixed[c] = true;
                break;
            }
        }
    }

    let pairs: Vec<(usize, usize)> = (0..cost.rows)
        .filter(|&r| row_mate[r] < cost.cols)
        .map(|r| (r, row_mate[r]))
        .collect();
    Assignment::from_pairs(cost, pairs)
}

/// Tries to rematch row `r` to column `c` by finding an alternating path on
/// tight edges that frees `r`'s old column for `c`'s old row.
fn reroute(
    r: usize,
    c: usize,
    tight: &[Vec<usize>],
    col_fixed: &[bool],
    row_mate: &mut [usize],
    col_mate: &mut [usize],
) -> bool {
    let n = row_mate.len();
    let freed = row_mate[r];
    let start = col_mate[c];
    let mut visited = vec![false; n];
    visited[c] = true;
    let mut path = Vec::new();
    if !augment(start, freed, tight, col_fixed, col_mate, &mut visited, &mut path) {
        return false;
    }
    // path holds (row, new col) edges from `start` to `freed`
    for &(pr, pc) in &path {
        row_mate[pr] = pc;
        col_mate[pc] = pr;
    }
    row_mate[r] = c;
    col_mate[c] = r;
    true
}

fn augment(
    row: usize,
    target: usize,
    tight: &[Vec<usize>],
    col_fixed: &[bool],
    col_mate: &[usize],
    visited: &mut [bool],
    path: &mut Vec<(usize, usize)>,
) -> bool {
    for &col in &tight[row] {
        if col_fixed[col] || visited[col] {
            continue;
        }
        visited[col] = true;
        path.push((row, col));
        if col == target || augment(col_mate[col], target, tight, col_fixed, col_mate, visited, path) {
            return true;
        }
        path.pop();
    }
    false
}

/// Weights and focal-term parameters shared by every matching cost.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostConfig {
    pub w_cls: f64,
    pub w_box: f64,
    pub focal: FocalParams,
    pub box_scale: [f64; 9],
}

fn box_l1(a: &[f64], b: &[f64], scale: &[f64; 9]) -> f64 {
    a.iter().zip(b).zip(scale).map(|((x, y), s)| s * (x - y).abs()).sum()
}

/// Classification cost of claiming class `class` for a query: the focal
/// loss at the positive target minus the focal loss it would pay as background.
pub fn focal_class_cost(p: f64, focal: &FocalParams) -> f64 {
    focal_elem(p, 1.0, focal) - focal_elem(p, 0.0, focal)
}

/// Prediction-to-GT cost matrix (`rows = queries`, `cols = gts`); `None` when
/// there are no GT boxes.
pub fn gt_cost(preds: &PredictionSet, gts: &[GtBox], cfg: &CostConfig) -> Option<CostMatrix> {
    if gts.is_empty() {
        return None;
    }
    let nq = preds.len();
    CostMatrix::from_fn(nq, gts.len(), |q, g| {
        let p = preds.class_scores.at(&[q, gts[g].class_id]);
        cfg.w_cls * focal_class_cost(p, &cfg.focal)
            + cfg.w_box * box_l1(preds.boxes.row(q), &gts[g].params, &cfg.box_scale)
    })
    .ok()
}

/// Square teacher-to-student cost (`rows = teacher`, `cols = student`): the
/// focal loss of the student scores against the teacher's score vector plus
/// the weighted L1 box distance.
pub fn teacher_student_cost(teacher: &PredictionSet, student: &PredictionSet, cfg: &CostConfig) -> Result<CostMatrix> {
    if teacher.len() != student.len() {
        return Err(MatchingError::CountMismatch {
            teacher: teacher.len(),
            student: student.len(),
        });
    }
    let n = teacher.len();
    CostMatrix::from_fn(n, n, |t, s| {
        let cls: f64 = student
            .class_scores
            .row(s)
            .iter()
            .zip(teacher.class_scores.row(t))
            .map(|(&ps, &pt)| focal_elem(ps, pt, &cfg.focal))
            .sum();
        cfg.w_cls * cls + cfg.w_box * box_l1(student.boxes.row(s), teacher.boxes.row(t), &cfg.box_scale)
    })
}

/// Splits teacher-row-indexed pairs into foreground (teacher max class score
/// at or above `fg_threshold`) and background.
pub fn split_fg_bg(
    assign: &Assignment,
    teacher_scores: &crate::tensor::Tensor,
    fg_threshold: f64,
) -> (Vec<(usize, usize)>, Vec<(usize, usize)>) {
    assign.pairs.iter().partition(|&&(t, _)| {
        teacher_scores
            .row(t)
            .iter()
            .fold(f64::NEG_INFINITY, |m, &v| m.max(v))
            >= fg_threshold
    })
}

#[cfg(test)]
mod tests {
    use itertools::Itertools;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::tensor::Tensor;

    /// Exhaustive oracle over every injective map of the smaller side.
    fn brute_force(c: &CostMatrix) -> f64 {
        let t;
        let m = if c.rows() <= c.cols() {
            c
        } else {
            t = c.transposed();
            &t
        };
        (0..m.cols())
            .permutations(m.rows())
            .map(|cols| cols.iter().enumerate().map(|(r, &cc)| m.get(r, cc)).sum::<f64>())
            .fold(f64::INFINITY, f64::min)
    }

    fn random_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> CostMatrix {
        CostMatrix::from_fn(rows, cols, |_, _| rng.gen_range(-5.0..10.0)).unwrap()
    }

    fn check_valid(c: &CostMatrix, a: &Assignment) {
        assert_eq!(a.pairs.len(), c.rows().min(c.cols()));
        assert!(a.pairs.iter().map(|p| p.0).all_unique());
        assert!(a.pairs.iter().map(|p| p.1).all_unique());
        let s: f64 = a.pairs.iter().map(|&(r, cc)| c.get(r, cc)).sum();
        assert!((s - a.total_cost).abs() < 1e-9);
        assert_eq!(a.unmatched_rows.len() + a.pairs.len(), c.rows());
        assert_eq!(a.unmatched_cols.len() + a.pairs.len(), c.cols());
    }

    #[test]
    fn diagonal_zero_gives_identity() {
        let c = CostMatrix::from_fn(5, 5, |r, cc| if r == cc { 0.0 } else { 1.0 }).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.pairs, (0..5).map(|i| (i, i)).collect::<Vec<_>>());
        assert_eq!(a.total_cost, 0.0);
    }

    #[test]
    fn three_by_three_example() {
        let c = CostMatrix::new(3, 3, vec![4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]).unwrap();
        let a = hungarian(&c);
        assert_eq!(brute_force(&c), 5.0);
        assert_eq!(a.total_cost, 5.0);
        assert_eq!(a.pairs, vec![(0, 1), (1, 0), (2, 2)]);
    }

    #[test]
    fn random_square_matrices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let c = random_matrix(&mut rng, 7, 7);
            let a = hungarian(&c);
            check_valid(&c, &a);
            assert_eq!(a.total_cost, brute_force(&c));
        }
    }

    #[test]
    fn rectangular_matrices_match_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..100 {
            let rows = rng.gen_range(1..=7);
            let cols = rng.gen_range(1..=7);
            let c = random_matrix(&mut rng, rows, cols);
            let a = hungarian(&c);
            check_valid(&c, &a);
            assert!((a.total_cost - brute_force(&c)).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_resolve_lexicographically() {
        let c = CostMatrix::from_fn(4, 4, |_, _| 1.0).unwrap();
        assert_eq!(hungarian(&c).pairs, vec![(0, 0), (1, 1), (2, 2), (3, 3)]);
        // rows 0 and 1 are interchangeable on columns 2 and 3
        let c = CostMatrix::new(2, 4, vec![5.0, 5.0, 1.0, 1.0, 5.0, 5.0, 1.0, 1.0]).unwrap();
        assert_eq!(hungarian(&c).pairs, vec![(0, 2), (1, 3)]);
        // more rows than columns: earliest rows get matched
        let c = CostMatrix::new(3, 1, vec![2.0, 2.0, 2.0]).unwrap();
        let a = hungarian(&c);
        assert_eq!(a.pairs, vec![(0, 0)]);
        assert_eq!(a.unmatched_rows, vec![1, 2]);
    }

    #[test]
    fn rejects_non_finite_and_empty() {
        assert!(matches!(
            CostMatrix::new(1, 2, vec![0.0, f64::NAN]),
            Err(MatchingError::NonFinite { row: 0, col: 1 })
        ));
        assert!(CostMatrix::new(0, 2, vec![]).is_err());
    }

    #[test]
    fn beats_random_injective_matchings() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let c = random_matrix(&mut rng, 9, 12);
        let best = hungarian(&c).total_cost;
        for _ in 0..10_000 {
            let mut cols: Vec<usize> = (0..12).collect();
            for i in 0..9 {
                let j = rng.gen_range(i..12);
                cols.swap(i, j);
            }
            let s: f64 = (0..9).map(|r| c.get(r, cols[r])).sum();
            assert!(best <= s + 1e-12);
        }
    }

    proptest! {
        #[test]
        fn scaling_and_row_shift_preserve_pairs(
            vals in proptest::collection::vec(-10.0f64..10.0, 30),
            row in 0usize..5,
            shift in -20.0f64..20.0,
        ) {
            let c = CostMatrix::new(5, 6, vals.clone()).unwrap();
            let a = hungarian(&c);
            let doubled = CostMatrix::new(5, 6, vals.iter().map(|v| 2.0 * v).collect()).unwrap();
            let ad = hungarian(&doubled);
            prop_assert_eq!(&ad.pairs, &a.pairs);
            prop_assert!((ad.total_cost - 2.0 * a.total_cost).abs() < 1e-9);
            let shifted = CostMatrix::from_fn(5, 6, |r, cc| c.get(r, cc) + if r == row { shift } else { 0.0 }).unwrap();
            prop_assert_eq!(&hungarian(&shifted).pairs, &a.pairs);
        }
    }

    fn pred_set(scores: Vec<f64>, boxes: Vec<f64>, k: usize) -> PredictionSet {
        let n = boxes.len() / 9;
        PredictionSet {
            class_scores: Tensor::new(vec![n, k], scores).unwrap(),
            boxes: Tensor::new(vec![n, 9], boxes).unwrap(),
        }
    }

    fn cfg(w_cls: f64, w_box: f64) -> CostConfig {
        CostConfig {
            w_cls,
            w_box,
            focal: FocalParams { gamma: 2.0, balance: 0.25 },
            box_scale: [1.0; 9],
        }
    }

    fn random_preds(rng: &mut impl Rng, n: usize, k: usize) -> PredictionSet {
        pred_set(
            (0..n * k).map(|_| rng.gen_range(0.01..0.99)).collect(),
            (0..n * 9).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            k,
        )
    }

    #[test]
    fn gt_cost_exact_prediction_is_row_minimum() {
        let gt_a = GtBox { params: [1.0, 2.0, 0.5, 2.0, 4.0, 1.5, 0.3, 1.0, 0.0], class_id: 1 };
        let gt_b = GtBox { params: [-5.0, 3.0, 0.5, 0.8, 0.8, 1.8, 0.0, 0.0, 0.5], class_id: 0 };
        let mut boxes = gt_a.params.to_vec();
        boxes.extend_from_slice(&[0.0; 9]);
        let preds = pred_set(vec![0.001, 0.999, 0.3, 0.3], boxes, 2);
        let c = gt_cost(&preds, &[gt_b, gt_a], &cfg(2.0, 0.25)).unwrap();
        assert!(c.get(0, 1) < c.get(0, 0));
        assert!(gt_cost(&preds, &[], &cfg(2.0, 0.25)).is_none());
        let z = gt_cost(&preds, &[gt_a, gt_b], &cfg(0.0, 0.0)).unwrap();
        assert!(z.costs().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gt_cost_spot_cell_matches_standalone_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let preds = random_preds(&mut rng, 4, 3);
        let gts: Vec<GtBox> = (0..3)
            .map(|i| GtBox { params: std::array::from_fn(|_| rng.gen_range(-3.0..3.0)), class_id: i % 3 })
            .collect();
        let cc = cfg(2.0, 0.25);
        let c = gt_cost(&preds, &gts, &cc).unwrap();
        let (q, g) = (2, 1);
        let p = preds.class_scores.at(&[q, gts[g].class_id]).clamp(1e-7, 1.0 - 1e-7);
        // standalone focal: positive minus background term, gamma 2, balance 0.25
        let pos = -0.25 * (1.0 - p).powi(2) * p.ln();
        let neg = -(p.powi(2)) * (1.0 - p).ln();
        let l1: f64 = (0..9).map(|d| (preds.boxes.at(&[q, d]) - gts[g].params[d]).abs()).sum();
        assert!((c.get(q, g) - (2.0 * (pos - neg) + 0.25 * l1)).abs() < 1e-12);
    }

    #[test]
    fn teacher_student_identity_and_relabeling() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = random_preds(&mut rng, 6, 4);
        let cc = cfg(2.0, 0.25);
        let a = hungarian(&teacher_student_cost(&p, &p, &cc).unwrap());
        assert_eq!(a.pairs, (0..6).map(|i| (i, i)).collect::<Vec<_>>());

        let t = random_preds(&mut rng, 6, 4);
        let base = hungarian(&teacher_student_cost(&t, &p, &cc).unwrap());
        let perm = [3usize, 0, 5, 1, 4, 2];
        // student row i of the permuted set is original row perm[i]
        let permuted = PredictionSet {
            class_scores: Tensor::new(vec![6, 4], perm.iter().flat_map(|&i| p.class_scores.row(i).to_vec()).collect()).unwrap(),
            boxes: Tensor::new(vec![6, 9], perm.iter().flat_map(|&i| p.boxes.row(i).to_vec()).collect()).unwrap(),
        };
        let moved = hungarian(&teacher_student_cost(&t, &permuted, &cc).unwrap());
        assert!((moved.total_cost - base.total_cost).abs() < 1e-9);
        for (&(tr, sc), &(tr2, sc2)) in base.pairs.iter().zip(&moved.pairs) {
            assert_eq!(tr, tr2);
            assert_eq!(perm[sc2], sc);
        }
        let short = random_preds(&mut rng, 5, 4);
        assert!(teacher_student_cost(&t, &short, &cc).is_err());
    }

    #[test]
    fn teacher_student_five_queries_vs_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        for _ in 0..20 {
            let t = random_preds(&mut rng, 5, 3);
            let s = random_preds(&mut rng, 5, 3);
            let c = teacher_student_cost(&t, &s, &cfg(2.0, 0.25)).unwrap();
            let a = hungarian(&c);
            assert!((a.total_cost - brute_force(&c)).abs() < 1e-9);
        }
    }

    #[test]
    fn fg_bg_split() {
        let n = 8;
        let a = Assignment::identity(n);
        let zeros = Tensor::zeros(&[n, 3]);
        let (fg, bg) = split_fg_bg(&a, &zeros, 0.3);
        assert!(fg.is_empty() && bg.len() == n);
        let ones = Tensor::ones(&[n, 3]);
        let (fg, bg) = split_fg_bg(&a, &ones, 0.3);
        assert!(bg.is_empty() && fg.len() == n);

        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let scores = Tensor::from_fn(&[n, 3], |_| rng.gen_range(0.0..0.6));
        let perm = Assignment::from_pairs(
            &CostMatrix::from_fn(n, n, |_, _| 0.0).unwrap(),
            (0..n).map(|i| (i, (i * 3) % n)).collect(),
        );
        let (fg, bg) = split_fg_bg(&perm, &scores, 0.3);
        let expect_fg = (0..n).filter(|&t| scores.row(t).iter().any(|&v| v >= 0.3)).count();
        assert_eq!(fg.len(), expect_fg);
        assert_eq!(fg.len() + bg.len(), n);
    }
}
