use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{check_training_set, ClassifierError, Result};
use crate::dataset::BinaryClass;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestConfig {
    pub n_estimators: usize,
    pub max_depth: usize,
    pub min_samples_split: usize,
    /// Features tried per split; `None` means `floor(sqrt(m))`.
    pub max_features: Option<usize>,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self { n_estimators: 300, max_depth: 100, min_samples_split: 3, max_features: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Node {
    /// Class counts in `BinaryClass::index` order.
    Leaf { counts: [u32; 2] },
    Split { feature: usize, threshold: f64, left: Box<Node>, right: Box<Node> },
}

/// Majority of `counts`, ties to PreHypertension.
fn majority(counts: [u32; 2]) -> BinaryClass {
    if counts[1] > counts[0] {
        BinaryClass::Hypertension
    } else {
        BinaryClass::PreHypertension
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionTree {
    pub root: Node,
}

impl DecisionTree {
    pub fn predict(&self, x: &[f64]) -> BinaryClass {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { counts } => return majority(*counts),
                Node::Split { feature, threshold, left, right } => {
                    node = if x[*feature] <= *threshold { left } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn go(n: &Node) -> usize {
            match n {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + go(left).max(go(right)),
            }
        }
        go(&self.root)
    }

    pub fn node_count(&self) -> usize {
        fn go(n: &Node) -> usize {
            match n {
                Node::Leaf { .. } => 1,
                Node::Split { left, right, .. } => 1 + go(left) + go(right),
            }
        }
        go(&self.root)
    }
}

fn gini(counts: [u32; 2]) -> f64 {
    let n = (counts[0] + counts[1]) as f64;
    if n == 0.0 {
        return 0.0;
    }
    let (p, q) = (counts[0] as f64 / n, counts[1] as f64 / n);
    1.0 - p * p - q * q
}

struct Grower<'a> {
    x: &'a [Vec<f64>],
    y: &'a [usize],
    k: usize,
    config: &'a ForestConfig,
    rng: ChaCha8Rng,
}

impl Grower<'_> {
    fn counts(&self, idx: &[usize]) -> [u32; 2] {
        let mut c = [0u32; 2];
        for &i in idx {
            c[self.y[i]] += 1;
        }
        c
    }

    /// Lowest weighted Gini over the candidate features; midpoint thresholds
    /// between consecutive distinct values.
    fn best_split(&mut self, idx: &[usize]) -> Option<(usize, f64)> {
        let m = self.x[0].len();
        let total = self.counts(idx);
        let n = idx.len() as f64;
        let mut best: Option<(f64, usize, f64)> = None;
        let mut order = idx.to_vec();
        for feature in sample(&mut self.rng, m, self.k).into_iter() {
            order.sort_by(|&a, &b| self.x[a][feature].total_cmp(&self.x[b][feature]));
            let mut left = [0u32; 2];
            for w in 0..order.len() - 1 {
                left[self.y[order[w]]] += 1;
                let (lo, hi) = (self.x[order[w]][feature], self.x[order[w + 1]][feature]);
                if lo == hi {
                    continue;
                }
                let right = [total[0] - left[0], total[1] - left[1]];
                let nl = (w + 1) as f64;
                let score = (nl * gini(left) + (n - nl) * gini(right)) / n;
                if best.is_none_or(|(s, _, _)| score < s) {
                    let mut threshold = lo + (hi - lo) / 2.0;
                    if threshold >= hi {
                        threshold = lo;
                    }
                    best = Some((score, feature, threshold));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> Node {
        let counts = self.counts(&idx);
        let pure = counts[0] == 0 || counts[1] == 0;
        if pure || depth >= self.config.max_depth || idx.len() < self.config.min_samples_split {
            return Node::Leaf { counts };
        }
        let Some((feature, threshold)) = self.best_split(&idx) else {
            return Node::Leaf { counts };
        };
        let (l, r): (Vec<usize>, Vec<usize>) = idx.into_iter().partition(|&i| self.x[i][feature] <= threshold);
        Node::Split {
            feature,
            threshold,
            left: Box::new(self.grow(l, depth + 1)),
            right: Box::new(self.grow(r, depth + 1)),
        }
    }
}

/// Fits one unpruned tree on the given (possibly repeated) sample indices.
pub fn fit_tree(
    x: &[Vec<f64>],
    y: &[BinaryClass],
    idx: Vec<usize>,
    config: &ForestConfig,
    rng: ChaCha8Rng,
) -> Result<DecisionTree> {
    let (_, m) = check_training_set(x, y, false)?;
    let labels: Vec<usize> = y.iter().map(|c| c.index()).collect();
    let k = config.max_features.unwrap_or(((m as f64).sqrt().floor() as usize).max(1));
    if k == 0 || k > m {
        return Err(ClassifierError::InvalidConfig(format!("{k} features per split out of {m}")));
    }
    let mut g = Grower { x, y: &labels, k, config, rng };
    Ok(DecisionTree { root: g.grow(idx, 0) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub config: ForestConfig,
    pub n_features: usize,
    pub trees: Vec<DecisionTree>,
}

/// Bagged Gini trees; tree `t` draws its bootstrap and feature subsets from
/// stream `t` of a ChaCha generator seeded with `config.seed`.
pub fn rf_fit(x: &[Vec<f64>], y: &[BinaryClass], config: &ForestConfig) -> Result<Forest> {
    let (n, m) = check_training_set(x, y, false)?;
    if n < 2 {
        return Err(ClassifierError::EmptyTrainingSet);
    }
    if config.n_estimators == 0 || config.min_samples_split < 2 || config.max_depth == 0 {
        return Err(ClassifierError::InvalidConfig(
            "need n_estimators >= 1, min_samples_split >= 2 and max_depth >= 1".into(),
        ));
    }
    let trees = (0..config.n_estimators)
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
            rng.set_stream(t as u64);
            let idx: Vec<usize> = (0..n).map(|_| rng.random_range(0..n)).collect();
            fit_tree(x, y, idx, config, rng)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Forest { config: *config, n_features: m, trees })
}

impl Forest {
    /// Tree votes in `BinaryClass::index` order.
    pub fn votes(&self, x: &[f64]) -> Result<[usize; 2]> {
        if x.len() != self.n_features {
            return Err(ClassifierError::ShapeMismatch { expected: self.n_features, found: x.len() });
        }
        let mut v = [0usize; 2];
        for t in &self.trees {
            v[t.predict(x).index()] += 1;
        }
        Ok(v)
    }

    /// Vote fractions per class.
    pub fn predict_proba(&self, x: &[f64]) -> Result<[f64; 2]> {
        let v = self.votes(x)?;
        let n = self.trees.len() as f64;
        Ok([v[0] as f64 / n, v[1] as f64 / n])
    }
}

/// Majority class and its vote fraction; an even split goes to
/// PreHypertension.
pub fn rf_predict(forest: &Forest, x: &[f64]) -> Result<(BinaryClass, f64)> {
    let v = forest.votes(x)?;
    let class = if v[1] > v[0] { BinaryClass::Hypertension } else { BinaryClass::PreHypertension };
    Ok((class, v[class.index()] as f64 / forest.trees.len() as f64))
}
