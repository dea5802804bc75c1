//! Gradient-boosted regression trees with exact greedy, leaf-wise growth.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::DesignMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbdtParams {
    pub learning_rate: f64,
    pub early_stopping_rounds: usize,
    pub max_iterations: usize,
    pub num_leaves: usize,
    pub min_samples_leaf: usize,
}

impl Default for GbdtParams {
    fn default() -> Self {
        GbdtParams {
            learning_rate: 0.1,
            early_stopping_rounds: 10,
            max_iterations: 100,
            num_leaves: 31,
            min_samples_leaf: 20,
        }
    }
}

impl GbdtParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) {
            return Err(Error::Model(format!("learning rate must be positive, got {}", self.learning_rate)));
        }
        if self.num_leaves < 2 {
            return Err(Error::Model(format!("num_leaves must be at least 2, got {}", self.num_leaves)));
        }
        if self.min_samples_leaf == 0 || self.early_stopping_rounds == 0 {
            return Err(Error::Model("min_samples_leaf and early_stopping_rounds must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    /// Rows with `x[feature] < threshold` go left.
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf { value: f64 },
}

/// Node 0 is the root.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, row: &[f32]) -> f64 {
        let mut k = 0;
        loop {
            match &self.nodes[k] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    k = if (row[*feature] as f64) < *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn n_leaves(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, Node::Leaf { .. })).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbdtModel {
    pub n_features: usize,
    pub base_score: f64,
    pub learning_rate: f64,
    pub trees: Vec<Tree>,
    /// Validation MSE after each boosting round, before truncation.
    #[serde(default)]
    pub valid_mse: Vec<f64>,
}

impl GbdtModel {
    pub fn predict_row(&self, row: &[f32]) -> f64 {
        self.base_score + self.learning_rate * self.trees.iter().map(|t| t.predict_row(row)).sum::<f64>()
    }

    pub fn predict(&self, x: &DesignMatrix) -> Result<Vec<f64>> {
        if x.n_cols != self.n_features {
            return Err(Error::ColumnMismatch {
                expected: self.n_features,
                got: x.n_cols,
            });
        }
        Ok((0..x.n_rows).into_par_iter().map(|i| self.predict_row(x.row(i))).collect())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    gain: f64,
    /// index into the kept-feature list
    feature: usize,
    threshold: f64,
}

struct Leaf {
    node: usize,
    members: Vec<u32>,
    /// Per kept feature, the members sorted by that feature.
    sorted: Vec<Vec<u32>>,
    best: Option<Candidate>,
}

struct Grower<'a> {
    cols: &'a [Vec<f32>],
    kept: &'a [usize],
    params: &'a GbdtParams,
}

impl Grower<'_> {
    fn best_split(&self, leaf: &Leaf, r: &[f64]) -> Option<Candidate> {
        let n = leaf.members.len();
        let min = self.params.min_samples_leaf;
        if n < 2 * min {
            return None;
        }
        let (mut s, mut sq) = (0.0, 0.0);
        for i in &leaf.members {
            s += r[*i as usize];
            sq += r[*i as usize] * r[*i as usize];
        }
        let parent = s * s / n as f64;
        // gains below rounding noise of the leaf's sum of squares are not splits
        let tol = 1e-12 * sq + f64::MIN_POSITIVE;
        let per_feature: Vec<Option<Candidate>> = leaf
            .sorted
            .par_iter()
            .enumerate()
            .map(|(f, order)| {
                let x = &self.cols[f];
                let mut best: Option<Candidate> = None;
                let mut sl = 0.0;
                for k in 0..n - 1 {
                    let i = order[k] as usize;
                    sl += r[i];
                    let nl = k + 1;
                    if nl < min {
                        continue;
                    }
                    if n - nl < min {
                        break;
                    }
                    let (a, b) = (x[i], x[order[k + 1] as usize]);
                    if a == b {
                        continue;
                    }
                    let sr = s - sl;
                    let gain = sl * sl / nl as f64 + sr * sr / (n - nl) as f64 - parent;
                    if gain > tol && best.map_or(true, |c| gain > c.gain) {
                        best = Some(Candidate {
                            gain,
                            feature: f,
                            threshold: (a as f64 + b as f64) * 0.5,
                        });
                    }
                }
                best
            })
            .collect();
        // fixed-order reduction: lowest feature wins ties
        per_feature
            .into_iter()
            .flatten()
            .fold(None, |acc: Option<Candidate>, c| match acc {
                Some(a) if a.gain >= c.gain => Some(a),
                _ => Some(c),
            })
    }

    /// Grows one tree on residuals `r`; returns the tree and each row's leaf value.
    fn grow(&self, root_sorted: &[Vec<u32>], r: &[f64]) -> (Tree, Vec<f64>) {
        let n = r.len();
        let mut nodes = vec![Node::Leaf { value: 0.0 }];
        let mut root = Leaf {
            node: 0,
            members: (0..n as u32).collect(),
            sorted: root_sorted.to_vec(),
            best: None,
        };
        root.best = self.best_split(&root, r);
        let mut leaves = vec![root];
        let mut go_left = vec![false; n];
        while leaves.len() < self.params.num_leaves {
            let mut pick: Option<usize> = None;
            for (k, l) in leaves.iter().enumerate() {
                if let Some(c) = l.best {
                    if pick.map_or(true, |p| c.gain > leaves[p].best.unwrap().gain) {
                        pick = Some(k);
                    }
                }
            }
            let Some(k) = pick else { break };
            let parent = leaves.remove(k);
            let c = parent.best.unwrap();
            let x = &self.cols[c.feature];
            for i in &parent.members {
                go_left[*i as usize] = (x[*i as usize] as f64) < c.threshold;
            }
            let split = |v: &[u32]| -> (Vec<u32>, Vec<u32>) { v.iter().partition(|i| go_left[**i as usize]) };
            let (lm, rm) = split(&parent.members);
            let (ls, rs): (Vec<_>, Vec<_>) = parent.sorted.iter().map(|v| split(v)).unzip();
            let (li, ri) = (nodes.len(), nodes.len() + 1);
            nodes[parent.node] = Node::Split {
                feature: self.kept[c.feature],
                threshold: c.threshold,
                left: li,
                right: ri,
            };
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            for (node, members, sorted) in [(li, lm, ls), (ri, rm, rs)] {
                let mut leaf = Leaf {
                    node,
                    members,
                    sorted,
                    best: None,
                };
                leaf.best = self.best_split(&leaf, r);
                // keep creation order so ties go to the earlier leaf
                let pos = leaves.partition_point(|l| l.node < node);
                leaves.insert(pos, leaf);
            }
        }
        let mut fitted = vec![0.0; n];
        for l in &leaves {
            let value = l.members.iter().map(|i| r[*i as usize]).sum::<f64>() / l.members.len() as f64;
            nodes[l.node] = Node::Leaf { value };
            for i in &l.members {
                fitted[*i as usize] = value;
            }
        }
        (Tree { nodes }, fitted)
    }
}

fn mse(y: &[f64], p: &[f64]) -> f64 {
    y.iter().zip(p).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / y.len() as f64
}

/// Boosts trees on squared error, early-stopping on `valid` and truncating
/// to the best validation round.
pub fn gbdt_fit(train: &DesignMatrix, valid: &DesignMatrix, params: &GbdtParams) -> Result<GbdtModel> {
    params.validate()?;
    let n = train.n_rows;
    if n < 2 * params.min_samples_leaf {
        return Err(Error::Model(format!(
            "{n} training rows are fewer than 2 x min_samples_leaf ({})",
            params.min_samples_leaf
        )));
    }
    if valid.n_rows == 0 {
        return Err(Error::Model("validation set is empty".into()));
    }
    if valid.n_cols != train.n_cols {
        return Err(Error::ColumnMismatch {
            expected: train.n_cols,
            got: valid.n_cols,
        });
    }
    let y = &train.target;
    let base = y.iter().sum::<f64>() / n as f64;

    // column-major copies of the non-constant features
    let mut kept = Vec::new();
    let mut cols = Vec::new();
    for f in 0..train.n_cols {
        let col: Vec<f32> = (0..n).map(|i| train.values[i * train.n_cols + f]).collect();
        if col.iter().any(|v| *v != col[0]) {
            kept.push(f);
            cols.push(col);
        }
    }
    let sorted: Vec<Vec<u32>> = cols
        .par_iter()
        .map(|col| {
            let mut idx: Vec<u32> = (0..n as u32).collect();
            idx.sort_by(|a, b| col[*a as usize].total_cmp(&col[*b as usize]).then(a.cmp(b)));
            idx
        })
        .collect();

    let grower = Grower {
        cols: &cols,
        kept: &kept,
        params,
    };
    let mut model = GbdtModel {
        n_features: train.n_cols,
        base_score: base,
        learning_rate: params.learning_rate,
        trees: Vec::new(),
        valid_mse: Vec::new(),
    };
    let mut pred = vec![base; n];
    let mut pred_valid = vec![base; valid.n_rows];
    let mut best = (mse(&valid.target, &pred_valid), 0usize);
    let mut resid = vec![0.0; n];
    for iter in 1..=params.max_iterations {
        for i in 0..n {
            resid[i] = y[i] - pred[i];
        }
        let (tree, fitted) = grower.grow(&sorted, &resid);
        if tree.nodes.len() == 1 {
            break;
        }
        for i in 0..n {
            pred[i] += params.learning_rate * fitted[i];
        }
        pred_valid
            .par_iter_mut()
            .enumerate()
            .for_each(|(i, p)| *p += params.learning_rate * tree.predict_row(valid.row(i)));
        model.trees.push(tree);
        let v = mse(&valid.target, &pred_valid);
        model.valid_mse.push(v);
        if v < best.0 {
            best = (v, iter);
        } else if iter - best.1 >= params.early_stopping_rounds {
            break;
        }
    }
    model.trees.truncate(best.1);
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn matrix(n_cols: usize, values: Vec<f32>, target: Vec<f64>) -> DesignMatrix {
        DesignMatrix::new(n_cols, values, target).unwrap()
    }

    fn params(iters: usize, min_leaf: usize) -> GbdtParams {
        GbdtParams {
            max_iterations: iters,
            min_samples_leaf: min_leaf,
            ..GbdtParams::default()
        }
    }

    #[test]
    fn one_boosting_step_by_hand() {
        let x = matrix(1, vec![0.0, 0.0, 1.0, 1.0], vec![1.0, 1.0, 9.0, 9.0]);
        let m = gbdt_fit(&x, &x, &params(1, 1)).unwrap();
        assert_eq!(m.base_score, 5.0);
        assert_eq!(
            m.trees[0].nodes,
            vec![
                Node::Split {
                    feature: 0,
                    threshold: 0.5,
                    left: 1,
                    right: 2
                },
                Node::Leaf { value: -4.0 },
                Node::Leaf { value: 4.0 }
            ]
        );
        let p = m.predict(&x).unwrap();
        for (a, b) in p.iter().zip([4.6, 4.6, 5.4, 5.4]) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn degenerate_cases() {
        let x = matrix(2, vec![1.0, 3.0, 2.0, 3.0, 3.0, 3.0, 4.0, 3.0], vec![2.0, 4.0, 6.0, 8.0]);
        let m = gbdt_fit(&x, &x, &params(0, 1)).unwrap();
        assert!(m.trees.is_empty());
        assert!(m.predict(&x).unwrap().iter().all(|p| *p == 5.0));

        let c = matrix(1, vec![1.0, 2.0, 3.0, 4.0], vec![7.5; 4]);
        let m = gbdt_fit(&c, &c, &params(10, 1)).unwrap();
        assert!(m.trees.is_empty());
        assert!(m.predict(&c).unwrap().iter().all(|p| *p == 7.5));

        let k = matrix(1, vec![3.0; 4], vec![1.0, 2.0, 3.0, 4.0]);
        let m = gbdt_fit(&k, &k, &params(10, 1)).unwrap();
        assert!(m.trees.is_empty());

        let wrong = matrix(3, vec![0.0; 3], vec![1.0]);
        assert!(matches!(m.predict(&wrong), Err(Error::ColumnMismatch { expected: 1, got: 3 })));
    }

    #[test]
    fn manual_traversal() {
        let m = GbdtModel {
            n_features: 2,
            base_score: 2.0,
            learning_rate: 0.1,
            trees: vec![Tree {
                nodes: vec![
                    Node::Split {
                        feature: 1,
                        threshold: 0.25,
                        left: 1,
                        right: 2,
                    },
                    Node::Leaf { value: -3.0 },
                    Node::Leaf { value: 5.0 },
                ],
            }],
            valid_mse: vec![],
        };
        assert!((m.predict_row(&[9.0, 0.2]) - 1.7).abs() < 1e-12);
        assert!((m.predict_row(&[9.0, 0.25]) - 2.5).abs() < 1e-12);
        let back = GbdtModel::from_json(&m.to_json().unwrap()).unwrap();
        assert_eq!(back, m);
    }

    /// Leaf-wise growth that re-derives every candidate split by direct SSE
    /// evaluation; shares nothing with the implementation above.
    fn oracle_tree(x: &[Vec<f64>], r: &[f64], num_leaves: usize, min_leaf: usize) -> Vec<Node> {
        fn sse(v: &[f64]) -> f64 {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|a| (a - m) * (a - m)).sum()
        }
        fn best(x: &[Vec<f64>], r: &[f64], rows: &[usize], min_leaf: usize) -> Option<(f64, usize, f64)> {
            let parent = sse(&rows.iter().map(|i| r[*i]).collect::<Vec<_>>());
            let mut out: Option<(f64, usize, f64)> = None;
            for f in 0..x[0].len() {
                let mut u: Vec<f64> = rows.iter().map(|i| x[*i][f]).collect();
                u.sort_by(f64::total_cmp);
                u.dedup();
                for w in u.windows(2) {
                    let th = (w[0] + w[1]) / 2.0;
                    let l: Vec<f64> = rows.iter().filter(|i| x[**i][f] < th).map(|i| r[*i]).collect();
                    let rr: Vec<f64> = rows.iter().filter(|i| x[**i][f] >= th).map(|i| r[*i]).collect();
                    if l.len() < min_leaf || rr.len() < min_leaf {
                        continue;
                    }
                    let gain = parent - sse(&l) - sse(&rr);
                    if gain > 1e-9 && out.map_or(true, |o| gain > o.0 + 1e-12) {
                        out = Some((gain, f, th));
                    }
                }
            }
            out
        }
        let mut nodes = vec![Node::Leaf { value: 0.0 }];
        let mut leaves: Vec<(usize, Vec<usize>)> = vec![(0, (0..r.len()).collect())];
        while leaves.len() < num_leaves {
            let cands: Vec<_> = leaves.iter().map(|(_, rows)| best(x, r, rows, min_leaf)).collect();
            let mut pick: Option<usize> = None;
            for (k, c) in cands.iter().enumerate() {
                if let Some(c) = c {
                    if pick.map_or(true, |p| c.0 > cands[p].unwrap().0) {
                        pick = Some(k);
                    }
                }
            }
            let Some(k) = pick else { break };
            let (_, f, th) = cands[k].unwrap();
            let (node, rows) = leaves.remove(k);
            let (li, ri) = (nodes.len(), nodes.len() + 1);
            nodes[node] = Node::Split {
                feature: f,
                threshold: th,
                left: li,
                right: ri,
            };
            nodes.push(Node::Leaf { value: 0.0 });
            nodes.push(Node::Leaf { value: 0.0 });
            let l = rows.iter().copied().filter(|i| x[*i][f] < th).collect();
            let rr = rows.iter().copied().filter(|i| x[*i][f] >= th).collect();
            leaves.push((li, l));
            leaves.push((ri, rr));
            leaves.sort_by_key(|(n, _)| *n);
        }
        for (node, rows) in leaves {
            nodes[node] = Node::Leaf {
                value: rows.iter().map(|i| r[*i]).sum::<f64>() / rows.len() as f64,
            };
        }
        nodes
    }

    fn random_problem(seed: u64, n: usize, f: usize) -> (DesignMatrix, Vec<Vec<f64>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..f).map(|_| (rng.gen::<f32>() * 10.0).round() as f64 / 2.0).collect())
            .collect();
        let y: Vec<f64> = rows
            .iter()
            .map(|r| r[0] * r[1] - 2.0 * r[2] + if r[3] > 2.0 { 3.0 } else { 0.0 } + rng.gen::<f64>())
            .collect();
        let values = rows.iter().flatten().map(|v| *v as f32).collect();
        (matrix(f, values, y), rows)
    }

    #[test]
    fn first_tree_matches_brute_force() {
        for seed in 0..3 {
            let (m, rows) = random_problem(seed, 200, 5);
            let model = gbdt_fit(&m, &m, &params(1, 20)).unwrap();
            let base = m.target.iter().sum::<f64>() / 200.0;
            let r: Vec<f64> = m.target.iter().map(|y| y - base).collect();
            let expected = oracle_tree(&rows, &r, 31, 20);
            let got = &model.trees[0].nodes;
            assert_eq!(got.len(), expected.len());
            for (a, b) in got.iter().zip(&expected) {
                match (a, b) {
                    (Node::Leaf { value: x }, Node::Leaf { value: y }) => assert!((x - y).abs() < 1e-9),
                    _ => assert_eq!(a, b),
                }
            }
        }
    }

    #[test]
    fn training_mse_never_increases() {
        let (m, _) = random_problem(9, 300, 5);
        let p = GbdtParams {
            max_iterations: 50,
            early_stopping_rounds: 50,
            ..GbdtParams::default()
        };
        let model = gbdt_fit(&m, &m, &p).unwrap();
        assert_eq!(model.trees.len(), 50);
        let mut last = f64::INFINITY;
        for k in 0..=50 {
            let sub = GbdtModel {
                trees: model.trees[..k].to_vec(),
                ..model.clone()
            };
            let e = mse(&m.target, &sub.predict(&m).unwrap());
            assert!(e <= last + 1e-12, "round {k}: {e} > {last}");
            last = e;
        }
        assert!(model.trees.iter().all(|t| t.n_leaves() <= 31));
    }

    #[test]
    fn early_stopping_truncates_to_best_round() {
        let (train, _) = random_problem(1, 200, 5);
        // validation rows whose targets are unrelated to the features
        let (mut valid, _) = random_problem(2, 100, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for t in valid.target.iter_mut() {
            *t = rng.gen::<f64>() * 20.0 - 5.0;
        }
        let model = gbdt_fit(&train, &valid, &params(100, 20)).unwrap();
        let curve = &model.valid_mse;
        let best = curve.iter().cloned().fold(f64::INFINITY, f64::min);
        let at = curve.iter().position(|v| *v == best).unwrap();
        let base_mse = mse(&valid.target, &vec![model.base_score; valid.n_rows]);
        if best < base_mse {
            assert_eq!(model.trees.len(), at + 1);
        } else {
            assert!(model.trees.is_empty());
        }
        assert!(curve.len() < 100);
        assert_eq!(curve.len(), model.trees.len() + 10);
    }
}
