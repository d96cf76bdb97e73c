use std::collections::{BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::annindex::HnswIndex;
use crate::engine::split_i2i_key;
use crate::error::{domain_err, shape_err, Error, Result};
use crate::numcore::{linear, ParamId, ParamStore, Tape, Tensor};
use crate::trainer::{adamw_step_store, AdamWConfig, AdamWState};

/// Two-layer perceptron giving the probability that two image embeddings
/// show the same physical item.
///
/// The input is the concatenation `[a, b, a * b, |a - b|]`.
#[derive(Debug, Clone)]
pub struct SameItemClassifier {
    params: ParamStore,
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
    embed_dim: usize,
    /// Pairs scoring strictly above this are merged.
    pub threshold: f64,
}

/// One labeled pair of image embeddings.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPair {
    pub a: Vec<f64>,
    pub b: Vec<f64>,
    pub same: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierTraining {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    pub seed: u64,
}

impl Default for ClassifierTraining {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 64,
            optimizer: AdamWConfig {
                lr: 5e-3,
                ..AdamWConfig::default()
            },
            seed: 0,
        }
    }
}

impl SameItemClassifier {
    pub fn new(embed_dim: usize, hidden: usize, seed: u64) -> Result<Self> {
        if embed_dim == 0 || hidden == 0 {
            return Err(domain_err!("classifier dims must be >= 1"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |rows: usize, cols: usize| {
            let d = Normal::new(0.0, 1.0 / (rows as f64).sqrt()).expect("positive std");
            Tensor::matrix(rows, cols, (0..rows * cols).map(|_| d.sample(&mut rng)).collect()).expect("shape")
        };
        let input = 4 * embed_dim;
        let mut params = ParamStore::new();
        let w1 = params.add("same.l1.w", normal(input, hidden));
        let b1 = params.add("same.l1.b", Tensor::zeros(vec![1, hidden]));
        let w2 = params.add("same.l2.w", normal(hidden, 2));
        let b2 = params.add("same.l2.b", Tensor::zeros(vec![1, 2]));
        Ok(Self {
            params,
            w1,
            b1,
            w2,
            b2,
            embed_dim,
            threshold: 0.5,
        })
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    fn features(&self, a: &[f64], b: &[f64]) -> Result<Vec<f64>> {
        if a.len() != self.embed_dim || b.len() != self.embed_dim {
            return Err(shape_err!(
                "pair of dims {} and {}, classifier expects {}",
                a.len(),
                b.len(),
                self.embed_dim
            ));
        }
        let mut f = Vec::with_capacity(4 * self.embed_dim);
        f.extend_from_slice(a);
        f.extend_from_slice(b);
        f.extend(a.iter().zip(b).map(|(x, y)| x * y));
        f.extend(a.iter().zip(b).map(|(x, y)| (x - y).abs()));
        Ok(f)
    }

    fn logits(&self, tape: &mut Tape, rows: Vec<Vec<f64>>) -> Result<crate::numcore::Var> {
        let x = tape.constant(Tensor::from_rows(&rows)?);
        let h = linear(tape, &self.params, x, self.w1, self.b1)?;
        let h = tape.gelu(h);
        linear(tape, &self.params, h, self.w2, self.b2)
    }

    /// Probability in `(0, 1)` that `a` and `b` are the same item.
    pub fn probability(&self, a: &[f64], b: &[f64]) -> Result<f64> {
        let mut tape = Tape::new();
        let l = self.logits(&mut tape, vec![self.features(a, b)?])?;
        let z = tape.value(l).data();
        Ok(1.0 / (1.0 + (z[0] - z[1]).exp()))
    }

    pub fn is_same(&self, a: &[f64], b: &[f64]) -> Result<bool> {
        Ok(self.probability(a, b)? > self.threshold)
    }

    /// Minimizes cross-entropy on `pairs`; returns the mean loss per epoch.
    pub fn train(&mut self, pairs: &[LabeledPair], cfg: &ClassifierTraining) -> Result<Vec<f64>> {
        if pairs.is_empty() || cfg.batch_size == 0 {
            return Err(domain_err!("classifier training needs pairs and a batch size >= 1"));
        }
        let feats: Vec<Vec<f64>> = pairs.iter().map(|p| self.features(&p.a, &p.b)).collect::<Result<_>>()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut opt = AdamWState::default();
        let mut order: Vec<usize> = (0..pairs.len()).collect();
        let mut curve = Vec::with_capacity(cfg.epochs);
        for _ in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let mut tape = Tape::new();
                let logits = self.logits(&mut tape, chunk.iter().map(|i| feats[*i].clone()).collect())?;
                let targets: Vec<usize> = chunk.iter().map(|i| usize::from(pairs[*i].same)).collect();
                let loss = tape.cross_entropy_rows(logits, &targets)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::Numeric(format!("classifier loss became {value}")));
                }
                total += value * chunk.len() as f64;
                tape.backward(loss)?;
                self.params.zero_grads();
                tape.accumulate_param_grads(&mut self.params);
                adamw_step_store(&mut self.params, &mut opt, &cfg.optimizer)?;
            }
            curve.push(total / pairs.len() as f64);
        }
        Ok(curve)
    }
}

/// Neighbor pairs from an I2I index, labeled by `same(product_a, product_b)`.
///
/// Each image is paired with its `k_probe` nearest images of other
/// products, the same candidates [`merge_same_items`] will score.
pub fn probe_pairs(
    index: &HnswIndex,
    k_probe: usize,
    same: impl Fn(&str, &str) -> bool,
) -> Result<Vec<LabeledPair>> {
    let mut out = Vec::new();
    for (a, pid_a, hits) in probe(index, k_probe)? {
        let va = index.vector(&a).expect("live key");
        for b in hits {
            let (pid_b, _) = split_i2i_key(&b)?;
            out.push(LabeledPair {
                a: va.to_vec(),
                b: index.vector(&b).expect("live key").to_vec(),
                same: same(&pid_a, pid_b),
            });
        }
    }
    Ok(out)
}

type Probe = (String, String, Vec<String>);

fn probe(index: &HnswIndex, k_probe: usize) -> Result<Vec<Probe>> {
    if k_probe == 0 {
        return Err(domain_err!("k_probe must be at least 1"));
    }
    let mut out = Vec::with_capacity(index.len());
    let fetch = (k_probe * 3).min(index.len().max(1));
    for (key, v) in index.live_entries() {
        let (pid, _) = split_i2i_key(key)?;
        let hits: Vec<String> = index
            .search(v, fetch, fetch.max(64))?
            .into_iter()
            .filter(|h| split_i2i_key(&h.key).map(|(p, _)| p != pid).unwrap_or(false))
            .take(k_probe)
            .map(|h| h.key)
            .collect();
        out.push((key.to_string(), pid.to_string(), hits));
    }
    Ok(out)
}

struct UnionFind {
    parent: Vec<usize>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        Self { parent: (0..n).collect() }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra != rb {
            self.parent[ra.max(rb)] = ra.min(rb);
        }
    }
}

/// A partition of products into same-item groups.
#[derive(Debug, Clone, PartialEq)]
pub struct SameItemGroups {
    groups: Vec<Vec<String>>,
    group_of: HashMap<String, usize>,
}

impl SameItemGroups {
    /// Groups sorted internally and by first member.
    pub fn groups(&self) -> &[Vec<String>] {
        &self.groups
    }

    pub fn group_of(&self, product_id: &str) -> Option<usize> {
        self.group_of.get(product_id).copied()
    }

    pub fn same(&self, a: &str, b: &str) -> bool {
        matches!((self.group_of(a), self.group_of(b)), (Some(x), Some(y)) if x == y)
    }

    /// Every product grouped with `product_id`, itself included.
    pub fn truth_set(&self, product_id: &str) -> BTreeSet<String> {
        self.group_of(product_id)
            .map(|g| self.groups[g].iter().cloned().collect())
            .unwrap_or_default()
    }
}

/// Probes the `k_probe` nearest images of other products for every image
/// in `index` and merges the products of pairs the classifier accepts.
///
/// `product_ids` lists every product, including those without images.
pub fn merge_same_items(
    product_ids: &[String],
    index: &HnswIndex,
    classifier: &SameItemClassifier,
    k_probe: usize,
) -> Result<SameItemGroups> {
    let pos: HashMap<&str, usize> = product_ids.iter().enumerate().map(|(i, p)| (p.as_str(), i)).collect();
    if pos.len() != product_ids.len() {
        return Err(Error::Consistency("duplicate product ids".into()));
    }
    let lookup = |pid: &str| {
        pos.get(pid)
            .copied()
            .ok_or_else(|| Error::Consistency(format!("image of unknown product {pid}")))
    };
    let mut uf = UnionFind::new(product_ids.len());
    for (a, pid_a, hits) in probe(index, k_probe)? {
        let ia = lookup(&pid_a)?;
        let va = index.vector(&a).expect("live key");
        for b in hits {
            let (pid_b, _) = split_i2i_key(&b)?;
            let ib = lookup(pid_b)?;
            if uf.find(ia) != uf.find(ib) && classifier.is_same(va, index.vector(&b).expect("live key"))? {
                uf.union(ia, ib);
            }
        }
    }
    let mut by_root: HashMap<usize, Vec<String>> = HashMap::new();
    for (i, p) in product_ids.iter().enumerate() {
        by_root.entry(uf.find(i)).or_default().push(p.clone());
    }
    let mut groups: Vec<Vec<String>> = by_root.into_values().collect();
    groups.iter_mut().for_each(|g| g.sort());
    groups.sort();
    let group_of = groups
        .iter()
        .enumerate()
        .flat_map(|(g, members)| members.iter().map(move |m| (m.clone(), g)))
        .collect();
    Ok(SameItemGroups { groups, group_of })
}
