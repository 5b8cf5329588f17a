//! Class-structured synthetic data and TPM-driven augmented views.
//!
//! Each class has a one-hot prototype. Items carry a source class; a view of
//! an item moves to a class drawn from the transition matrix row of the source
//! class and takes that class's prototype plus fresh Gaussian noise. The graph
//! path replaces prototypes with summaries of class-templated random graphs.

use std::collections::BTreeSet;
use std::io::Write;

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tpm::FeatureSpace;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticDatasetConfig {
    pub n_classes: usize,
    pub n_items: usize,
    pub noise_sigma: f64,
    pub feature_dim: usize,
    pub train_fraction: f64,
    pub seed: u64,
    pub split_seed: u64,
    /// When set, views are summaries of rewired class-template graphs.
    pub graph: Option<GraphConfig>,
}

impl Default for SyntheticDatasetConfig {
    fn default() -> Self {
        Self {
            n_classes: 3,
            n_items: 4000,
            noise_sigma: 0.1,
            feature_dim: 16,
            train_fraction: 0.5,
            seed: 0,
            split_seed: 1,
            graph: None,
        }
    }
}

impl SyntheticDatasetConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: String| Err(Error::InvalidArgument { name, reason });
        if self.n_classes < 2 {
            return bad(
                "n_classes",
                format!("need at least 2 classes, got {}", self.n_classes),
            );
        }
        if self.graph.is_none() && self.feature_dim < self.n_classes {
            return bad(
                "feature_dim",
                format!(
                    "feature_dim {} is smaller than n_classes {}",
                    self.feature_dim, self.n_classes
                ),
            );
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad(
                "noise_sigma",
                format!("must be finite and nonnegative, got {}", self.noise_sigma),
            );
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(
                "train_fraction",
                format!("must lie in (0, 1), got {}", self.train_fraction),
            );
        }
        if self.n_items < 2 {
            return bad(
                "n_items",
                format!("need at least 2 items, got {}", self.n_items),
            );
        }
        if let Some(g) = &self.graph {
            g.validate()?;
        }
        Ok(())
    }

    pub fn test_fraction(&self) -> f64 {
        1.0 - self.train_fraction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Item {
    pub id: usize,
    pub source_class: usize,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct View {
    pub parent_id: usize,
    pub view_class: usize,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone)]
enum ViewSource {
    Prototype,
    Graph(Vec<Graph>),
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: SyntheticDatasetConfig,
    /// One row per class.
    pub prototypes: Vec<Vec<f64>>,
    pub items: Vec<Item>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    source: ViewSource,
}

/// Items with balanced classes (counts differ by at most one), a fixed
/// train/test split and per-item features.
pub fn generate(cfg: &SyntheticDatasetConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (prototypes, source) = match &cfg.graph {
        None => {
            let protos = (0..cfg.n_classes)
                .map(|c| {
                    let mut v = vec![0.0; cfg.feature_dim];
                    v[c] = 1.0;
                    v
                })
                .collect();
            (protos, ViewSource::Prototype)
        }
        Some(g) => {
            let templates: Vec<Graph> = (0..cfg.n_classes)
                .map(|c| class_template(g, c, cfg.n_classes, cfg.seed))
                .collect();
            let protos = templates.iter().map(|t| t.summary(g)).collect();
            (protos, ViewSource::Graph(templates))
        }
    };
    let mut classes: Vec<usize> = (0..cfg.n_items).map(|i| i % cfg.n_classes).collect();
    classes.shuffle(&mut rng);
    let mut ds = Dataset {
        config: cfg.clone(),
        prototypes,
        items: Vec::with_capacity(cfg.n_items),
        train: Vec::new(),
        test: Vec::new(),
        source,
    };
    for (id, &c) in classes.iter().enumerate() {
        let features = ds.render(c, &mut rng);
        ds.items.push(Item {
            id,
            source_class: c,
            features,
        });
    }
    let mut order: Vec<usize> = (0..cfg.n_items).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(cfg.split_seed));
    let n_train = ((cfg.n_items as f64) * cfg.train_fraction).round() as usize;
    let n_train = n_train.clamp(1, cfg.n_items - 1);
    ds.test = order.split_off(n_train);
    ds.train = order;
    Ok(ds)
}

impl Dataset {
    pub fn n_classes(&self) -> usize {
        self.config.n_classes
    }

    pub fn feature_dim(&self) -> usize {
        self.prototypes[0].len()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes()];
        for it in &self.items {
            counts[it.source_class] += 1;
        }
        counts
    }

    /// Fresh features for class `c`.
    fn render<R: Rng + ?Sized>(&self, c: usize, rng: &mut R) -> Vec<f64> {
        match &self.source {
            ViewSource::Prototype => {
                let mut v = self.prototypes[c].clone();
                if self.config.noise_sigma > 0.0 {
                    let normal =
                        Normal::new(0.0, self.config.noise_sigma).expect("validated sigma");
                    for x in &mut v {
                        *x += normal.sample(rng);
                    }
                }
                v
            }
            ViewSource::Graph(templates) => {
                let g = self
                    .config
                    .graph
                    .as_ref()
                    .expect("graph source has a config");
                templates[c].rewired(g.rewire_prob, rng).summary(g)
            }
        }
    }

    /// Draws the view class from the item's transition row and renders it.
    pub fn augment<R: Rng + ?Sized>(
        &self,
        item: &Item,
        space: &FeatureSpace,
        rng: &mut R,
    ) -> Result<View> {
        if item.source_class >= space.size() {
            return Err(Error::InvalidArgument {
                name: "item",
                reason: format!(
                    "source class {} outside a {}-feature transition matrix",
                    item.source_class,
                    space.size()
                ),
            });
        }
        let view_class = space.draw_transition(item.source_class, rng);
        Ok(View {
            parent_id: item.id,
            view_class,
            features: self.render(view_class, rng),
        })
    }

    /// Writes `id,source_class,feature_0..feature_{d-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["id".to_string(), "source_class".to_string()];
        header.extend((0..self.feature_dim()).map(|k| format!("feature_{k}")));
        w.write_record(&header)?;
        for it in &self.items {
            let mut rec = vec![it.id.to_string(), it.source_class.to_string()];
            rec.extend(it.features.iter().map(|v| v.to_string()));
            w.write_record(&rec)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Stacks view features into a matrix, one row per view.
pub fn feature_matrix(views: &[View]) -> DMatrix<f64> {
    let d = views.first().map_or(0, |v| v.features.len());
    DMatrix::from_fn(views.len(), d, |r, c| views[r].features[c])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphConfig {
    pub nodes: usize,
    pub edges: usize,
    pub rewire_prob: f64,
    /// Number of one-hot node feature types.
    pub node_types: usize,
    /// Degree histogram bins; the last bin collects every larger degree.
    pub degree_bins: usize,
}

impl Default for GraphConfig {
    fn default() -> Self {
        Self {
            nodes: 20,
            edges: 40,
            rewire_prob: 0.2,
            node_types: 4,
            degree_bins: 10,
        }
    }
}

impl GraphConfig {
    fn validate(&self) -> Result<()> {
        let max_edges = self.nodes * self.nodes.saturating_sub(1) / 2;
        if self.nodes < 2 || self.edges > max_edges {
            return Err(Error::InvalidArgument {
                name: "graph",
                reason: format!("{} edges do not fit on {} nodes", self.edges, self.nodes),
            });
        }
        if !(0.0..=1.0).contains(&self.rewire_prob) || self.node_types == 0 || self.degree_bins == 0
        {
            return Err(Error::InvalidArgument {
                name: "graph",
                reason:
                    "rewire_prob must lie in [0, 1]; node_types and degree_bins must be positive"
                        .into(),
            });
        }
        Ok(())
    }

    pub fn summary_len(&self) -> usize {
        self.degree_bins + self.node_types
    }
}

/// Undirected simple graph with one categorical feature per node.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    pub node_types: Vec<usize>,
    pub edges: BTreeSet<(usize, usize)>,
}

fn ordered(a: usize, b: usize) -> (usize, usize) {
    if a < b {
        (a, b)
    } else {
        (b, a)
    }
}

impl Graph {
    pub fn degrees(&self) -> Vec<usize> {
        let mut d = vec![0; self.node_types.len()];
        for &(a, b) in &self.edges {
            d[a] += 1;
            d[b] += 1;
        }
        d
    }

    /// Degree histogram followed by node-type histogram, both divided by the
    /// node count. Invariant under node relabeling.
    pub fn summary(&self, cfg: &GraphConfig) -> Vec<f64> {
        let n = self.node_types.len() as f64;
        let mut out = vec![0.0; cfg.summary_len()];
        for d in self.degrees() {
            out[d.min(cfg.degree_bins - 1)] += 1.0 / n;
        }
        for &t in &self.node_types {
            out[cfg.degree_bins + t] += 1.0 / n;
        }
        out
    }

    /// Node `k` of the result is node `perm[k]` of `self`.
    pub fn relabeled(&self, perm: &[usize]) -> Graph {
        let mut inverse = vec![0; perm.len()];
        for (new, &old) in perm.iter().enumerate() {
            inverse[old] = new;
        }
        Graph {
            node_types: perm.iter().map(|&old| self.node_types[old]).collect(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| ordered(inverse[a], inverse[b]))
                .collect(),
        }
    }

    /// Each edge is moved, with probability `p`, to a uniformly chosen absent pair.
    pub fn rewired<R: Rng + ?Sized>(&self, p: f64, rng: &mut R) -> Graph {
        let n = self.node_types.len();
        let mut edges = self.edges.clone();
        if p == 0.0 || n < 2 {
            return self.clone();
        }
        let max_edges = n * (n - 1) / 2;
        for &e in &self.edges {
            if edges.len() >= max_edges || !rng.random_bool(p) {
                continue;
            }
            edges.remove(&e);
            loop {
                let a = rng.random_range(0..n);
                let b = rng.random_range(0..n);
                if a != b && edges.insert(ordered(a, b)) {
                    break;
                }
            }
        }
        Graph {
            node_types: self.node_types.clone(),
            edges,
        }
    }
}

/// Deterministic per-class template: class `c` concentrates node types around
/// `c` and wires edges preferentially among low-index nodes with a class-specific skew.
pub fn class_template(cfg: &GraphConfig, class: usize, n_classes: usize, seed: u64) -> Graph {
    let mut rng =
        ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(class as u64 + 1)));
    let n = cfg.nodes;
    let node_types = (0..n)
        .map(|k| {
            if rng.random_bool(0.7) {
                class % cfg.node_types
            } else {
                k % cfg.node_types
            }
        })
        .collect();
    // hub count grows with the class so degree profiles differ
    let hubs = 1 + class * (n / 2).max(1) / n_classes.max(1);
    let mut edges = BTreeSet::new();
    while edges.len() < cfg.edges {
        let a = if rng.random_bool(0.5) {
            rng.random_range(0..hubs.min(n))
        } else {
            rng.random_range(0..n)
        };
        let b = rng.random_range(0..n);
        if a != b {
            edges.insert(ordered(a, b));
        }
    }
    Graph { node_types, edges }
}

/// Rewired class-template graphs summarized as fixed-length vectors.
pub fn graph_summary_generate(cfg: &SyntheticDatasetConfig) -> Result<Dataset> {
    let mut cfg = cfg.clone();
    let graph = cfg.graph.clone().unwrap_or_default();
    cfg.feature_dim = graph.summary_len();
    cfg.graph = Some(graph);
    generate(&cfg)
}
