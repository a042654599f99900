//! Plug-in entropy and mutual information, and forward selection of the
//! fixed variables that enter the distance (max relevance, min redundancy).
//!
//! All information quantities are in nats. Columns are discrete codes with
//! `None` for missing entries; pairs with a missing side are dropped.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Kind, MixedDataset, Role};

pub type Codes = [Option<u32>];

/// Equal-frequency discretization of a real column into at most `bins`
/// codes `1..=bins`. Tied values always share a code.
pub fn discretize(values: &[Option<f64>], bins: usize) -> Vec<Option<u32>> {
    let mut sorted: Vec<f64> = values.iter().flatten().copied().collect();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let bins = bins.max(1);
    let edges: Vec<f64> = (1..bins)
        .map(|b| sorted[(b * n / bins).saturating_sub(1).min(n.saturating_sub(1))])
        .collect();
    values
        .iter()
        .map(|v| v.map(|x| 1 + edges.partition_point(|e| *e < x) as u32))
        .collect()
}

fn counts(a: &Codes) -> (BTreeMap<u32, f64>, f64) {
    let mut m = BTreeMap::new();
    let mut n = 0.0;
    for v in a.iter().flatten() {
        *m.entry(*v).or_insert(0.0) += 1.0;
        n += 1.0;
    }
    (m, n)
}

fn entropy_of_counts<'a>(c: impl Iterator<Item = &'a f64>, n: f64) -> f64 {
    if n == 0.0 {
        return 0.0;
    }
    -c.filter(|x| **x > 0.0)
        .map(|x| {
            let p = x / n;
            p * p.ln()
        })
        .sum::<f64>()
}

/// Plug-in entropy over the observed categories.
pub fn entropy(a: &Codes) -> f64 {
    let (m, n) = counts(a);
    entropy_of_counts(m.values(), n).max(0.0)
}

/// Entropy of a probability vector.
pub fn entropy_of(p: &[f64]) -> f64 {
    entropy_of_counts(p.iter(), p.iter().sum())
}

/// Mutual information of a joint probability (or count) table.
pub fn mi_from_table(table: &[Vec<f64>]) -> f64 {
    let total: f64 = table.iter().flatten().sum();
    if total <= 0.0 {
        return 0.0;
    }
    let rows: Vec<f64> = table.iter().map(|r| r.iter().sum::<f64>() / total).collect();
    let ncol = table.iter().map(Vec::len).max().unwrap_or(0);
    let cols: Vec<f64> = (0..ncol)
        .map(|c| table.iter().map(|r| r.get(c).copied().unwrap_or(0.0)).sum::<f64>() / total)
        .collect();
    let mut mi = 0.0;
    for (r, row) in table.iter().enumerate() {
        for (c, x) in row.iter().enumerate() {
            if *x > 0.0 {
                let p = x / total;
                mi += p * (p / (rows[r] * cols[c])).ln();
            }
        }
    }
    mi.max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub value: f64,
    /// Set when either column has fewer than two distinct values among the
    /// complete pairs; the value is then 0.
    pub degenerate: bool,
}

/// Plug-in mutual information from the empirical joint of complete pairs.
pub fn empirical_mi(a: &Codes, b: &Codes) -> MiEstimate {
    let mut joint: BTreeMap<(u32, u32), f64> = BTreeMap::new();
    let mut ma: BTreeMap<u32, f64> = BTreeMap::new();
    let mut mb: BTreeMap<u32, f64> = BTreeMap::new();
    let mut n = 0.0;
    for (x, y) in a.iter().zip(b) {
        if let (Some(x), Some(y)) = (x, y) {
            *joint.entry((*x, *y)).or_insert(0.0) += 1.0;
            *ma.entry(*x).or_insert(0.0) += 1.0;
            *mb.entry(*y).or_insert(0.0) += 1.0;
            n += 1.0;
        }
    }
    if ma.len() < 2 || mb.len() < 2 {
        return MiEstimate {
            value: 0.0,
            degenerate: true,
        };
    }
    let mut mi = 0.0;
    for ((x, y), c) in &joint {
        let p = c / n;
        mi += p * (c * n / (ma[x] * mb[y])).ln();
    }
    MiEstimate {
        value: mi.max(0.0),
        degenerate: false,
    }
}

/// `max_j I(F, X_j)`.
pub fn i_max(f: &Codes, xs: &[Vec<Option<u32>>]) -> f64 {
    xs.iter()
        .map(|x| empirical_mi(f, x).value)
        .fold(0.0, f64::max)
}

fn normalized(mi: f64, h: f64) -> f64 {
    if h > 0.0 {
        (mi / h).clamp(0.0, 1.0)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    /// No remaining candidate explains at least `t1` of any target's entropy.
    Relevancy,
    /// Every remaining candidate is explained beyond `t2` by a selected one.
    Redundancy,
    /// All candidates were selected.
    Exhausted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionStep {
    pub index: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiReport {
    /// `mi[l][j] = I(F_l, X_j)`.
    pub mi: Vec<Vec<f64>>,
    /// `mi[l][j] / H(X_j)`.
    pub mi_normalized: Vec<Vec<f64>>,
    pub i_max: Vec<f64>,
    pub i_max_normalized: Vec<f64>,
    /// `pairwise[l][l'] = I(F_l, F_l')`.
    pub pairwise: Vec<Vec<f64>>,
    /// `pairwise_normalized[l][l'] = I(F_l, F_l') / H(F_l')`.
    pub pairwise_normalized: Vec<Vec<f64>>,
    pub trace: Vec<SelectionStep>,
    pub stop: StopReason,
    pub weights: Vec<f64>,
    /// Candidates with a degenerate MI estimate against some column.
    pub degenerate: Vec<usize>,
}

impl MiReport {
    pub fn selected(&self) -> Vec<usize> {
        self.trace.iter().map(|s| s.index).collect()
    }
}

fn argmax_lowest(scores: impl Iterator<Item = (usize, f64)>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (l, s) in scores {
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((l, s));
        }
    }
    best
}

/// Forward selection over candidate columns `fs` for targets `xs`.
///
/// Both stopping conditions are evaluated before every addition after the
/// first; the first candidate is always selected.
pub fn mrmr_select(fs: &[Vec<Option<u32>>], xs: &[Vec<Option<u32>>], t1: f64, t2: f64) -> MiReport {
    let q = fs.len();
    let hx: Vec<f64> = xs.iter().map(|x| entropy(x)).collect();
    let hf: Vec<f64> = fs.iter().map(|f| entropy(f)).collect();

    let cells: Vec<Vec<MiEstimate>> = fs
        .par_iter()
        .map(|f| xs.iter().map(|x| empirical_mi(f, x)).collect())
        .collect();
    let mi: Vec<Vec<f64>> = cells.iter().map(|r| r.iter().map(|e| e.value).collect()).collect();
    let degenerate: Vec<usize> = cells
        .iter()
        .enumerate()
        .filter(|(_, r)| r.iter().any(|e| e.degenerate))
        .map(|(l, _)| l)
        .collect();
    let mi_normalized: Vec<Vec<f64>> = mi
        .iter()
        .map(|r| r.iter().zip(&hx).map(|(m, h)| normalized(*m, *h)).collect())
        .collect();
    let i_max: Vec<f64> = mi.iter().map(|r| r.iter().copied().fold(0.0, f64::max)).collect();
    let i_max_normalized: Vec<f64> = mi_normalized
        .iter()
        .map(|r| r.iter().copied().fold(0.0, f64::max))
        .collect();

    let pairwise: Vec<Vec<f64>> = (0..q)
        .into_par_iter()
        .map(|l| {
            (0..q)
                .map(|m| if l == m { hf[l] } else { empirical_mi(&fs[l], &fs[m]).value })
                .collect()
        })
        .collect();
    let pairwise_normalized: Vec<Vec<f64>> = pairwise
        .iter()
        .map(|r| r.iter().zip(&hf).map(|(m, h)| normalized(*m, *h)).collect())
        .collect();

    let mut trace = Vec::new();
    let mut remaining: Vec<usize> = (0..q).collect();
    let mut stop = StopReason::Exhausted;
    if let Some((seed, score)) = argmax_lowest(remaining.iter().map(|&l| (l, i_max[l]))) {
        trace.push(SelectionStep { index: seed, score });
        remaining.retain(|&l| l != seed);
    }
    while !remaining.is_empty() {
        let selected: Vec<usize> = trace.iter().map(|s| s.index).collect();
        let relevancy = remaining
            .iter()
            .map(|&l| i_max_normalized[l])
            .fold(f64::NEG_INFINITY, f64::max);
        if relevancy < t1 {
            stop = StopReason::Relevancy;
            break;
        }
        let redundancy = remaining
            .iter()
            .map(|&l| {
                selected
                    .iter()
                    .map(|&s| pairwise_normalized[s][l])
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .fold(f64::INFINITY, f64::min);
        if redundancy > t2 {
            stop = StopReason::Redundancy;
            break;
        }
        let (next, score) = argmax_lowest(remaining.iter().map(|&l| {
            let red = selected.iter().map(|&s| pairwise[l][s]).sum::<f64>() / selected.len() as f64;
            (l, i_max[l] - red)
        }))
        .expect("remaining is non-empty");
        trace.push(SelectionStep { index: next, score });
        remaining.retain(|&l| l != next);
    }

    let mut weights = vec![0.0; q];
    for s in &trace {
        weights[s.index] = 1.0 / trace.len() as f64;
    }
    MiReport {
        mi,
        mi_normalized,
        i_max,
        i_max_normalized,
        pairwise,
        pairwise_normalized,
        trace,
        stop,
        weights,
        degenerate,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SelectionConfig {
    pub t1: f64,
    pub t2: f64,
    pub bins: usize,
}

impl Default for SelectionConfig {
    fn default() -> Self {
        SelectionConfig {
            t1: 0.05,
            t2: 0.8,
            bins: 10,
        }
    }
}

/// Discrete codes of a dataset column; continuous columns are discretized.
pub fn column_codes(data: &MixedDataset, col: usize, bins: usize) -> Vec<Option<u32>> {
    let n = data.n_rows();
    match data.schema().variables[col].kind {
        Kind::Continuous => discretize(&(0..n).map(|i| data.value(i, col)).collect::<Vec<_>>(), bins),
        _ => (0..n).map(|i| data.level(i, col)).collect(),
    }
}

/// Runs the selection with every fixed variable as a candidate and every
/// nominal random variable as a target. Weights are in fixed-variable order.
pub fn select_features(data: &MixedDataset, cfg: &SelectionConfig) -> MiReport {
    let schema = data.schema();
    let fs: Vec<Vec<Option<u32>>> = schema
        .variables
        .iter()
        .enumerate()
        .filter(|(_, v)| v.role == Role::Fixed)
        .map(|(j, _)| column_codes(data, j, cfg.bins))
        .collect();
    let xs: Vec<Vec<Option<u32>>> = schema
        .variables
        .iter()
        .enumerate()
        .filter(|(_, v)| v.role == Role::Random && matches!(v.kind, Kind::Nominal { .. }))
        .map(|(j, _)| column_codes(data, j, cfg.bins))
        .collect();
    mrmr_select(&fs, &xs, cfg.t1, cfg.t2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn codes(v: &[u32]) -> Vec<Option<u32>> {
        v.iter().map(|x| Some(*x)).collect()
    }

    /// Direct summation of p log(p / (pa pb)) over a 2-d table of
    /// probabilities; independent of `mi_from_table`'s normalization path.
    fn brute_mi(p: &[[f64; 2]; 2]) -> f64 {
        let pa = [p[0][0] + p[0][1], p[1][0] + p[1][1]];
        let pb = [p[0][0] + p[1][0], p[0][1] + p[1][1]];
        let mut s = 0.0;
        for a in 0..2 {
            for b in 0..2 {
                if p[a][b] > 0.0 {
                    s += p[a][b] * (p[a][b] / (pa[a] * pb[b])).ln();
                }
            }
        }
        s
    }

    #[test]
    fn population_tables() {
        assert!(mi_from_table(&[vec![0.25, 0.25], vec![0.25, 0.25]]).abs() < 1e-15);
        let ln2 = std::f64::consts::LN_2;
        assert!((mi_from_table(&[vec![0.5, 0.0], vec![0.0, 0.5]]) - ln2).abs() < 1e-12);
        let t = [[0.4, 0.1], [0.1, 0.4]];
        let want = brute_mi(&t);
        let got = mi_from_table(&[t[0].to_vec(), t[1].to_vec()]);
        assert!((got - want).abs() < 1e-12);
    }

    #[test]
    fn entropy_examples() {
        assert_eq!(entropy(&codes(&[2, 2, 2])), 0.0);
        assert!((entropy(&codes(&[1, 2])) - std::f64::consts::LN_2).abs() < 1e-15);
        let h = entropy(&codes(&[1, 1, 2, 3]));
        let want = -(0.5f64 * 0.5f64.ln() + 2.0 * 0.25 * 0.25f64.ln());
        assert!((h - want).abs() < 1e-12);
        assert!((h - 1.5 * std::f64::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn empirical_matches_table_counts() {
        // Counts 4,1,1,4 reproduce the (0.4,0.1,0.1,0.4) table.
        let a = codes(&[1, 1, 1, 1, 1, 2, 2, 2, 2, 2]);
        let b = codes(&[1, 1, 1, 1, 2, 1, 2, 2, 2, 2]);
        let got = empirical_mi(&a, &b);
        assert!(!got.degenerate);
        assert!((got.value - brute_mi(&[[0.4, 0.1], [0.1, 0.4]])).abs() < 1e-12);
        let deg = empirical_mi(&codes(&[1, 1, 1]), &codes(&[1, 2, 1]));
        assert!(deg.degenerate && deg.value == 0.0);
    }

    #[test]
    fn missing_pairs_dropped() {
        let a = vec![Some(1), Some(2), None, Some(1)];
        let b = vec![Some(1), Some(2), Some(1), None];
        let full = empirical_mi(&codes(&[1, 2]), &codes(&[1, 2]));
        assert_eq!(empirical_mi(&a, &b), full);
    }

    #[test]
    fn i_max_examples() {
        let f = codes(&[1, 2, 1, 2]);
        let indep = codes(&[1, 1, 2, 2]);
        assert_eq!(i_max(&f, &[indep.clone()]), 0.0);
        assert!((i_max(&f, &[indep.clone(), f.clone()]) - entropy(&f)).abs() < 1e-15);
        let partial = codes(&[1, 2, 1, 1]);
        let want = empirical_mi(&f, &partial).value.max(empirical_mi(&f, &indep).value);
        assert_eq!(i_max(&f, &[indep, partial]), want);
    }

    #[test]
    fn discretize_equal_frequency() {
        let v: Vec<Option<f64>> = (0..20).map(|i| Some(i as f64)).collect();
        let c = discretize(&v, 4);
        let mut hist = [0; 5];
        for x in c.iter().flatten() {
            hist[*x as usize] += 1;
        }
        assert_eq!(hist, [0, 5, 5, 5, 5]);
        let ties = discretize(&[Some(1.0), Some(1.0), Some(1.0), Some(2.0), None], 2);
        assert_eq!(ties, vec![Some(1), Some(1), Some(1), Some(2), None]);
    }

    #[test]
    fn duplicate_feature_is_redundant() {
        let f1 = codes(&[1, 2, 3, 1, 2, 3, 1, 2, 3, 3]);
        let f2 = f1.clone();
        let x1 = f1.clone();
        let r = mrmr_select(&[f1, f2], &[x1], 0.05, 0.8);
        assert_eq!(r.selected(), vec![0]);
        assert_eq!(r.stop, StopReason::Redundancy);
        assert_eq!(r.weights, vec![1.0, 0.0]);
    }

    #[test]
    fn irrelevant_remaining_features_stop_on_relevancy() {
        let f1 = codes(&[1, 2, 1, 2, 1, 2, 1, 2]);
        let noise = codes(&[1, 1, 2, 2, 1, 1, 2, 2]);
        let r = mrmr_select(&[noise.clone(), f1.clone()], &[f1], 0.05, 0.8);
        assert_eq!(r.selected(), vec![1]);
        assert_eq!(r.stop, StopReason::Relevancy);
        assert_eq!(r.weights, vec![0.0, 1.0]);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let a = codes(&[1, 2, 1, 2]);
        let b = codes(&[1, 1, 2, 2]);
        let x = codes(&[1, 2, 2, 3]);
        let r = mrmr_select(&[b.clone(), a.clone()], &[x], 0.0, 1.0);
        assert_eq!(r.i_max[0], r.i_max[1]);
        assert_eq!(r.trace[0].index, 0);
        assert_eq!(r.selected(), vec![0, 1]);
        assert_eq!(r.stop, StopReason::Exhausted);
    }

    proptest! {
        #[test]
        fn mi_bounds_and_symmetry(
            pairs in prop::collection::vec((1u32..4, 1u32..5), 2..60)
        ) {
            let a: Vec<Option<u32>> = pairs.iter().map(|p| Some(p.0)).collect();
            let b: Vec<Option<u32>> = pairs.iter().map(|p| Some(p.1)).collect();
            let ab = empirical_mi(&a, &b).value;
            let ba = empirical_mi(&b, &a).value;
            prop_assert!((ab - ba).abs() < 1e-12);
            prop_assert!(ab >= 0.0);
            prop_assert!(ab <= entropy(&a).min(entropy(&b)) + 1e-9);
        }

        #[test]
        fn selection_weights_sum_to_one(
            cols in prop::collection::vec(prop::collection::vec(1u32..4, 30), 1..5),
            x in prop::collection::vec(1u32..3, 30),
        ) {
            let fs: Vec<Vec<Option<u32>>> = cols.iter().map(|c| codes(c)).collect();
            let r = mrmr_select(&fs, &[codes(&x)], 0.05, 0.8);
            prop_assert!(!r.trace.is_empty());
            prop_assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            for row in &r.mi_normalized {
                for v in row {
                    prop_assert!((0.0..=1.0 + 1e-9).contains(v));
                }
            }
        }
    }
}
