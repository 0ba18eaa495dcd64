//! Point side: farthest-point sampling, k-NN grouping and the two-stage
//! point encoder.
//!
//! All index choices (FPS start, FPS ties, k-NN ties) are made in a canonical
//! lexicographic order of the coordinates, so the embedding does not depend
//! on the order the points arrive in.

use std::cmp::Ordering;

use nalgebra::Vector3;

use super::params::{ArchConfig, EncoderParams};
use super::tape::{Mat, Tape, Var};
use super::{EncoderError, Layers};
use crate::geometry::PointCloud;

const IDW_EPS: f64 = 1e-8;

fn lex_cmp(a: &Vector3<f64>, b: &Vector3<f64>) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)).then(a.z.total_cmp(&b.z))
}

/// Canonical rank of every point (position in lexicographic order).
pub fn canonical_ranks(points: &[Vector3<f64>]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(&points[a], &points[b]).then(a.cmp(&b)));
    let mut rank = vec![0; points.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    rank
}

/// Farthest-point sampling of `count` indices. The start is the point of
/// canonical rank `seed % N`; distance ties go to the lower canonical rank.
pub fn farthest_point_sampling(points: &[Vector3<f64>], count: usize, seed: u64) -> Vec<usize> {
    let n = points.len();
    let ranks = canonical_ranks(points);
    let mut by_rank = vec![0; n];
    for (i, &r) in ranks.iter().enumerate() {
        by_rank[r] = i;
    }
    let mut chosen = Vec::with_capacity(count);
    if count == 0 || n == 0 {
        return chosen;
    }
    let mut current = by_rank[(seed % n as u64) as usize];
    let mut dist = vec![f64::INFINITY; n];
    for _ in 0..count.min(n) {
        chosen.push(current);
        let c = points[current];
        for (d, p) in dist.iter_mut().zip(points) {
            *d = d.min((p - c).norm_squared());
        }
        let mut best = by_rank[0];
        for &i in &by_rank[1..] {
            if dist[i] > dist[best] {
                best = i;
            }
        }
        current = best;
    }
    chosen
}

/// The `k` nearest candidates of `query`, ordered by distance then
/// canonical rank.
pub fn k_nearest(
    query: &Vector3<f64>,
    candidates: &[Vector3<f64>],
    ranks: &[usize],
    k: usize,
) -> Vec<usize> {
    let mut scored: Vec<(f64, usize, usize)> = candidates
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), ranks[i], i))
        .collect();
    let cmp = |a: &(f64, usize, usize), b: &(f64, usize, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    let k = k.min(scored.len());
    if k < scored.len() {
        scored.select_nth_unstable_by(k, cmp);
        scored.truncate(k);
    }
    scored.sort_by(cmp);
    scored.into_iter().map(|s| s.2).collect()
}

/// Inverse-distance weights over the 3 nearest sources (fewer if there are
/// fewer sources; padding entries get weight 0). Weights sum to 1.
pub fn idw3(
    query: &Vector3<f64>,
    sources: &[Vector3<f64>],
    ranks: &[usize],
) -> ([usize; 3], [f64; 3]) {
    let near = k_nearest(query, sources, ranks, 3);
    let mut index = [near[0]; 3];
    let mut weight = [0.0; 3];
    for (slot, &s) in near.iter().enumerate() {
        index[slot] = s;
        weight[slot] = 1.0 / ((sources[s] - query).norm() + IDW_EPS);
    }
    let total: f64 = weight.iter().sum();
    weight.iter_mut().for_each(|w| *w /= total);
    (index, weight)
}

/// Parameter-free structure of a cloud: sampled nodes, neighbourhoods and
/// upsampling weights.
#[derive(Debug, Clone)]
pub struct PointHierarchy {
    /// Stage-1 node centres as cloud indices.
    pub nodes1: Vec<usize>,
    /// Stage-2 node centres as indices into `nodes1`.
    pub nodes2: Vec<usize>,
    pub k1: usize,
    pub k2: usize,
    /// `(n1*k1) x 6` rows `[(p - node)/s, p/s]`, grouped by node.
    pub stage1_input: Mat,
    /// `n2*k2` indices into `nodes1`, grouped by stage-2 node.
    pub stage2_index: Vec<usize>,
    /// `(n2*k2) x 3` relative offsets of those stage-1 nodes.
    pub stage2_offsets: Mat,
    /// For each stage-1 node, its 3 nearest stage-2 nodes (rows of `f2`).
    pub up_nodes: (Vec<[usize; 3]>, Vec<[f64; 3]>),
    /// For each cloud point, its 3 nearest stage-1 nodes (rows of `f1`).
    pub up_points: (Vec<[usize; 3]>, Vec<[f64; 3]>),
    /// `N x 3` scaled coordinates.
    pub coords: Mat,
}

impl PointHierarchy {
    pub fn build(cloud: &PointCloud, cfg: &ArchConfig, k: usize) -> Result<Self, EncoderError> {
        let pts = cloud.points();
        let n = pts.len();
        if n < cfg.n1 {
            return Err(EncoderError::TooFewPoints { points: n, needed: cfg.n1 });
        }
        if k == 0 || k > n {
            return Err(EncoderError::Config(format!("k = {k} must be in 1..={n}")));
        }
        let s = cfg.coord_scale;
        let ranks = canonical_ranks(pts);
        let nodes1 = farthest_point_sampling(pts, cfg.n1, cfg.seed);
        let node1_pts: Vec<Vector3<f64>> = nodes1.iter().map(|&i| pts[i]).collect();

        let mut stage1 = Vec::with_capacity(cfg.n1 * k * 6);
        for q in &node1_pts {
            for j in k_nearest(q, pts, &ranks, k) {
                let p = pts[j];
                let d = (p - q) / s;
                stage1.extend_from_slice(&[d.x, d.y, d.z, p.x / s, p.y / s, p.z / s]);
            }
        }

        let node1_ranks = canonical_ranks(&node1_pts);
        let nodes2 = farthest_point_sampling(&node1_pts, cfg.n2, cfg.seed);
        let node2_pts: Vec<Vector3<f64>> = nodes2.iter().map(|&i| node1_pts[i]).collect();
        let k2 = k.min(cfg.n1);
        let mut stage2_index = Vec::with_capacity(cfg.n2 * k2);
        let mut offsets = Vec::with_capacity(cfg.n2 * k2 * 3);
        for q in &node2_pts {
            for j in k_nearest(q, &node1_pts, &node1_ranks, k2) {
                stage2_index.push(j);
                let d = (node1_pts[j] - q) / s;
                offsets.extend_from_slice(&[d.x, d.y, d.z]);
            }
        }

        let node2_ranks = canonical_ranks(&node2_pts);
        let up_nodes = node1_pts.iter().map(|q| idw3(q, &node2_pts, &node2_ranks)).unzip();
        let up_points = pts.iter().map(|q| idw3(q, &node1_pts, &node1_ranks)).unzip();
        let coords = Mat::from_vec(n, 3, pts.iter().flat_map(|p| [p.x / s, p.y / s, p.z / s]).collect());

        Ok(Self {
            nodes1,
            nodes2,
            k1: k,
            k2,
            stage1_input: Mat::from_vec(cfg.n1 * k, 6, stage1),
            stage2_index,
            stage2_offsets: Mat::from_vec(cfg.n2 * k2, 3, offsets),
            up_nodes,
            up_points,
            coords,
        })
    }

    pub fn node1_coords(&self, cloud: &PointCloud) -> Vec<Vector3<f64>> {
        self.nodes1.iter().map(|&i| cloud.points()[i]).collect()
    }

    pub fn node2_coords(&self, cloud: &PointCloud) -> Vec<Vector3<f64>> {
        self.nodes2.iter().map(|&i| cloud.points()[self.nodes1[i]]).collect()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PointEmbeddingVars {
    pub f1: Var,
    pub f2: Var,
    pub global: Var,
}

pub fn embed_points_on(tape: &mut Tape, layers: &Layers, h: &PointHierarchy) -> PointEmbeddingVars {
    let x = tape.leaf(h.stage1_input.clone());
    let per_neighbour = layers.mlp2(tape, x, "pts.s1");
    let f1 = tape.max_pool(per_neighbour, h.k1);
    let gathered = tape.gather(f1, h.stage2_index.clone(), 1);
    let offsets = tape.leaf(h.stage2_offsets.clone());
    let x2 = tape.concat(&[gathered, offsets]);
    let per_node = layers.mlp2(tape, x2, "pts.s2");
    let f2 = tape.max_pool(per_node, h.k2);
    let rows = tape.value(f2).rows;
    let global = tape.max_pool(f2, rows);
    PointEmbeddingVars { f1, f2, global }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointEmbedding {
    pub f1: Mat,
    pub nodes1: Vec<Vector3<f64>>,
    pub f2: Mat,
    pub nodes2: Vec<Vector3<f64>>,
    pub global: Vec<f64>,
}

pub fn embed_points(
    cloud: &PointCloud,
    params: &EncoderParams,
    cfg: &ArchConfig,
    k: usize,
) -> Result<PointEmbedding, EncoderError> {
    params.check_shapes(cfg)?;
    let h = PointHierarchy::build(cloud, cfg, k)?;
    let mut tape = Tape::new();
    let layers = Layers::bind(&mut tape, params);
    let vars = embed_points_on(&mut tape, &layers, &h);
    Ok(PointEmbedding {
        f1: tape.value(vars.f1).clone(),
        nodes1: h.node1_coords(cloud),
        f2: tape.value(vars.f2).clone(),
        nodes2: h.node2_coords(cloud),
        global: tape.value(vars.global).data.clone(),
    })
}
