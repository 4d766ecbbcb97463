//! Cohort-level morphological prototype bank fit by K-means.

use crate::error::{Error, Result};
use crate::numerics::{sq_l2, Matrix, SeededRng};

/// Default prototype count; the operating point used throughout.
pub const DEFAULT_PROTOTYPE_COUNT: usize = 16;

/// Fixed bank of prototype centroids shared across a cohort.
#[derive(Debug, Clone)]
pub struct PrototypeBank {
    centroids: Matrix,
    source_seed: u64,
}

impl PrototypeBank {
    pub fn new(centroids: Matrix, source_seed: u64) -> Result<Self> {
        if !centroids.is_finite() {
            return Err(Error::argument("prototype centroids must be finite"));
        }
        Ok(PrototypeBank {
            centroids,
            source_seed,
        })
    }

    pub fn count(&self) -> usize {
        self.centroids.rows()
    }

    pub fn dim(&self) -> usize {
        self.centroids.cols()
    }

    pub fn centroids(&self) -> &Matrix {
        &self.centroids
    }

    pub fn centroid(&self, c: usize) -> &[f64] {
        self.centroids.row(c)
    }

    pub fn source_seed(&self) -> u64 {
        self.source_seed
    }
}

/// Centroid initialization strategy.
#[derive(Debug, Clone)]
pub enum KMeansInit {
    /// Seeded k-means++ over the pooled points.
    KMeansPlusPlus,
    /// Caller-provided centroids (e.g. a bank loaded from file).
    Provided(Matrix),
}

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub prototype_count: usize,
    pub max_iters: usize,
    /// Stop when the largest per-centroid L2 shift falls below this.
    pub tol: f64,
    pub init: KMeansInit,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig {
            prototype_count: DEFAULT_PROTOTYPE_COUNT,
            max_iters: 100,
            tol: 1e-6,
            init: KMeansInit::KMeansPlusPlus,
        }
    }
}

/// Result of a K-means fit: the bank plus diagnostics.
#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub bank: PrototypeBank,
    pub wcss: f64,
    pub iterations: usize,
}

fn assign_points(points: &Matrix, centroids: &Matrix) -> (Vec<usize>, f64) {
    let n = points.rows();
    let mut assignment = vec![0usize; n];
    let mut wcss = 0.0;
    for i in 0..n {
        let p = points.row(i);
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for c in 0..centroids.rows() {
            let d = sq_l2(p, centroids.row(c));
            // ties broken by smallest index: strict improvement required
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        assignment[i] = best;
        wcss += best_d;
    }
    (assignment, wcss)
}

fn kmeanspp_init(points: &Matrix, k: usize, rng: &mut SeededRng) -> Matrix {
    let n = points.rows();
    let d = points.cols();
    let mut centroids = Matrix::zeros(k, d);
    let first = rng.index(n);
    centroids.row_mut(0).copy_from_slice(points.row(first));

    let mut dist = vec![0.0f64; n];
    for i in 0..n {
        dist[i] = sq_l2(points.row(i), centroids.row(0));
    }
    for c in 1..k {
        let total: f64 = dist.iter().sum();
        let chosen = if total > 0.0 {
            let target = rng.uniform() * total;
            let mut acc = 0.0;
            let mut idx = n - 1;
            for (i, &di) in dist.iter().enumerate() {
                acc += di;
                if acc >= target {
                    idx = i;
                    break;
                }
            }
            idx
        } else {
            // fewer distinct points than centroids: fall back to uniform pick
            rng.index(n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(chosen));
        for i in 0..n {
            let d_new = sq_l2(points.row(i), centroids.row(c));
            if d_new < dist[i] {
                dist[i] = d_new;
            }
        }
    }
    centroids
}

/// Fit K-means over pooled patch embeddings.
///
/// Lloyd iterations with deterministic lowest-index tie-breaking. An emptied
/// cluster is repaired by re-seeding it at the point currently farthest from
/// its own centroid, which keeps the prototype count fixed and cannot
/// increase the within-cluster sum of squares.
pub fn fit_kmeans(points: &Matrix, cfg: &KMeansConfig, rng: &mut SeededRng) -> Result<KMeansFit> {
    let n = points.rows();
    let k = cfg.prototype_count;
    if k == 0 {
        return Err(Error::argument("prototype count must be positive"));
    }
    if n < k {
        return Err(Error::argument(format!(
            "k-means needs at least {k} points, got {n}"
        )));
    }
    if !points.is_finite() {
        return Err(Error::argument("k-means input must be finite"));
    }

    let mut centroids = match &cfg.init {
        KMeansInit::KMeansPlusPlus => kmeanspp_init(points, k, rng),
        KMeansInit::Provided(m) => {
            if m.rows() != k || m.cols() != points.cols() {
                return Err(Error::argument(format!(
                    "provided centroids are {}x{}, expected {}x{}",
                    m.rows(),
                    m.cols(),
                    k,
                    points.cols()
                )));
            }
            m.clone()
        }
    };

    let d = points.cols();
    let mut iterations = 0;
    let (mut assignment, mut wcss) = assign_points(points, &centroids);
    for _ in 0..cfg.max_iters {
        iterations += 1;

        // M-step: centroid = mean of assigned points, fixed index order.
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignment[i];
            counts[c] += 1;
            let row = points.row(i);
            let srow = sums.row_mut(c);
            for j in 0..d {
                srow[j] += row[j];
            }
        }
        let mut new_centroids = centroids.clone();
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for j in 0..d {
                    new_centroids.set(c, j, sums.get(c, j) * inv);
                }
            }
        }
        // Empty-cluster repair: re-seed at the point farthest from its centroid.
        for c in 0..k {
            if counts[c] == 0 {
                let mut far_idx = 0usize;
                let mut far_d = -1.0;
                for i in 0..n {
                    let di = sq_l2(points.row(i), new_centroids.row(assignment[i]));
                    if di > far_d {
                        far_d = di;
                        far_idx = i;
                    }
                }
                new_centroids
                    .row_mut(c)
                    .copy_from_slice(points.row(far_idx));
                assignment[far_idx] = c;
            }
        }

        let mut max_shift = 0.0f64;
        for c in 0..k {
            max_shift = max_shift.max(sq_l2(centroids.row(c), new_centroids.row(c)).sqrt());
        }
        centroids = new_centroids;
        let (a, w) = assign_points(points, &centroids);
        assignment = a;
        wcss = w;
        if max_shift < cfg.tol {
            break;
        }
    }

    Ok(KMeansFit {
        bank: PrototypeBank::new(centroids, rng.seed())?,
        wcss,
        iterations,
    })
}

/// Index of the closest prototype; ties resolve to the smallest index.
pub fn nearest_prototype(bank: &PrototypeBank, z: &[f64]) -> Result<usize> {
    if z.len() != bank.dim() {
        return Err(Error::argument(format!(
            "query dim {} does not match bank dim {}",
            z.len(),
            bank.dim()
        )));
    }
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for c in 0..bank.count() {
        let d = sq_l2(z, bank.centroid(c));
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    Ok(best)
}

/// Within-cluster sum of squares for external diagnostics.
pub fn wcss(points: &Matrix, bank: &PrototypeBank) -> f64 {
    assign_points(points, bank.centroids()).1
}
