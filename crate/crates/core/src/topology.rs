//! Fixed-size boundary graph topologies.
//!
//! Two constructions are supported:
//!
//! - **independent**: every organ is its own circular graph; the global
//!   adjacency is block diagonal and pooling pairs nodes `2i, 2i + 1`.
//! - **unified**: organs that share boundaries are merged on an atlas, so
//!   interface nodes belong to several organs. Coarsening pairs degree-2
//!   nodes along chains and never touches junctions (degree >= 3).
//!
//! Node coordinates are not part of the topology except for the atlas
//! positions kept by unified graphs for visualisation.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{dist, resample_closed};
use crate::grid::Point;

/// Landmarks per organ: `max(floor(mean_len * s), n_min)`.
pub fn landmark_count(mean_len: f64, scale_factor: f64, n_min: usize) -> usize {
    // the small bias keeps exact products such as 0.29 * 100 from flooring to 28
    let scaled = (mean_len * scale_factor + 1e-9).floor();
    (scaled.max(0.0) as usize).max(n_min)
}

/// `floor(n1 / 2^(r-1))` for `r = 1..=levels`.
pub fn resolution_counts(n1: usize, levels: usize) -> Result<Vec<usize>> {
    if levels == 0 {
        return Err(Error::Topology("at least one resolution level required".into()));
    }
    let counts: Vec<usize> = (0..levels).map(|r| n1 >> r).collect();
    match counts.last() {
        Some(&c) if c >= 3 => Ok(counts),
        _ => Err(Error::Topology(format!(
            "{n1} landmarks over {levels} levels leaves fewer than 3 nodes at the coarsest level"
        ))),
    }
}

/// Sparse matrix as `(row, col, value)` triples sorted by row then column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub entries: Vec<(usize, usize, f64)>,
}

impl SparseMatrix {
    pub fn new(rows: usize, cols: usize, mut entries: Vec<(usize, usize, f64)>) -> Self {
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        Self {
            rows,
            cols,
            entries,
        }
    }

    pub fn transpose(&self) -> Self {
        Self::new(
            self.cols,
            self.rows,
            self.entries.iter().map(|&(r, c, v)| (c, r, v)).collect(),
        )
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.cols]; self.rows];
        for &(r, c, v) in &self.entries {
            d[r][c] += v;
        }
        d
    }

    /// `self * x` for a row-major `x` with `width` columns.
    pub fn mul_rows(&self, x: &[f64], width: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.cols * width);
        let mut out = vec![0.0; self.rows * width];
        for &(r, c, v) in &self.entries {
            let (dst, src) = (&mut out[r * width..(r + 1) * width], &x[c * width..(c + 1) * width]);
            for (d, s) in dst.iter_mut().zip(src) {
                *d += v * s;
            }
        }
        out
    }

    pub fn row_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.rows];
        for &(r, _, v) in &self.entries {
            s[r] += v;
        }
        s
    }

    pub fn col_sums(&self) -> Vec<f64> {
        let mut s = vec![0.0; self.cols];
        for &(_, c, v) in &self.entries {
            s[c] += v;
        }
        s
    }

    pub fn apply_points(&self, pts: &[Point]) -> Vec<Point> {
        let flat: Vec<f64> = pts.iter().flat_map(|p| [p[0], p[1]]).collect();
        self.mul_rows(&flat, 2)
            .chunks(2)
            .map(|c| [c[0], c[1]])
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopologyMode {
    Independent,
    Unified,
}

/// One resolution level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Level {
    pub num_nodes: usize,
    /// Nodes on each organ's cycle, in organ order.
    pub organ_counts: Vec<usize>,
    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// Organ labels each node belongs to, sorted.
    pub membership: Vec<Vec<u8>>,
    /// Per organ, node indices in contour order.
    pub organ_cycles: Vec<Vec<usize>>,
    /// Nodes of degree >= 3.
    pub junctions: Vec<usize>,
}

impl Level {
    pub fn neighbours(&self) -> Vec<Vec<usize>> {
        let mut n = vec![Vec::new(); self.num_nodes];
        for &(a, b) in &self.edges {
            n[a].push(b);
            n[b].push(a);
        }
        for v in &mut n {
            v.sort_unstable();
        }
        n
    }

    pub fn degrees(&self) -> Vec<usize> {
        self.neighbours().iter().map(Vec::len).collect()
    }

    /// `L~ = 2L / lambda_max - I` with the symmetric normalized Laplacian and
    /// `lambda_max = 2`, i.e. `-D^-1/2 A D^-1/2`.
    pub fn scaled_laplacian(&self) -> SparseMatrix {
        let deg = self.degrees();
        let mut entries = Vec::with_capacity(2 * self.edges.len());
        for &(a, b) in &self.edges {
            let v = -1.0 / ((deg[a] * deg[b]) as f64).sqrt();
            entries.push((a, b, v));
            entries.push((b, a, v));
        }
        SparseMatrix::new(self.num_nodes, self.num_nodes, entries)
    }

    /// Nodes shared by organs `a` and `b`.
    pub fn shared_boundary(&self, a: u8, b: u8) -> Vec<usize> {
        (0..self.num_nodes)
            .filter(|&v| self.membership[v].contains(&a) && self.membership[v].contains(&b))
            .collect()
    }

    fn from_cycles(num_nodes: usize, organ_cycles: Vec<Vec<usize>>, membership: Vec<Vec<u8>>) -> Self {
        let mut edges = BTreeSet::new();
        for cyc in &organ_cycles {
            for k in 0..cyc.len() {
                let (a, b) = (cyc[k], cyc[(k + 1) % cyc.len()]);
                if a != b {
                    edges.insert((a.min(b), a.max(b)));
                }
            }
        }
        let mut level = Self {
            num_nodes,
            organ_counts: organ_cycles.iter().map(Vec::len).collect(),
            edges: edges.into_iter().collect(),
            membership,
            organ_cycles,
            junctions: vec![],
        };
        level.junctions = level
            .degrees()
            .iter()
            .enumerate()
            .filter(|(_, &d)| d >= 3)
            .map(|(v, _)| v)
            .collect();
        level
    }
}

/// A multi-resolution graph hierarchy. Level 0 is the finest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphTopology {
    pub mode: TopologyMode,
    pub organs: Vec<u8>,
    pub levels: Vec<Level>,
    /// `down[r]` maps level `r` to `r + 1`: `|V_{r+1}| x |V_r|`.
    pub down: Vec<SparseMatrix>,
    /// `up[r]` maps level `r + 1` back to `r`: `|V_r| x |V_{r+1}|`.
    pub up: Vec<SparseMatrix>,
    /// Atlas node positions per level (unified graphs only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub atlas_positions: Option<Vec<Vec<Point>>>,
}

impl GraphTopology {
    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }

    pub fn finest(&self) -> &Level {
        &self.levels[0]
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn edge_tensor(&self, level: usize) -> EdgeTensor {
        edge_tensor(&self.levels[level])
    }
}

/// Block-diagonal circular graphs, one per organ, over `levels` levels
/// with the paired-node pooling matrices.
pub fn build_independent(organs: &[(u8, usize)], levels: usize) -> Result<GraphTopology> {
    let per_organ: Vec<Vec<usize>> = organs
        .iter()
        .map(|&(_, n1)| resolution_counts(n1, levels))
        .collect::<Result<_>>()?;
    if per_organ.is_empty() {
        return Err(Error::Topology("no organs".into()));
    }
    let labels: Vec<u8> = organs.iter().map(|&(l, _)| l).collect();
    let level_of = |r: usize| {
        let mut cycles = Vec::new();
        let mut membership = Vec::new();
        let mut offset = 0;
        for (o, counts) in per_organ.iter().enumerate() {
            let n = counts[r];
            cycles.push((offset..offset + n).collect());
            membership.extend(std::iter::repeat_n(vec![labels[o]], n));
            offset += n;
        }
        Level::from_cycles(offset, cycles, membership)
    };
    let lv: Vec<Level> = (0..levels).map(level_of).collect();

    let mut down = Vec::new();
    let mut up = Vec::new();
    for r in 0..levels.saturating_sub(1) {
        let (mut d, mut u) = (Vec::new(), Vec::new());
        let (mut fine_off, mut coarse_off) = (0, 0);
        for counts in &per_organ {
            let (nf, nc) = (counts[r], counts[r + 1]);
            for i in 0..nc {
                d.push((coarse_off + i, fine_off + 2 * i, 0.5));
                d.push((coarse_off + i, fine_off + (2 * i + 1) % nf, 0.5));
            }
            for j in 0..nf {
                // a trailing odd node maps to the last coarse node
                u.push((fine_off + j, coarse_off + (j / 2).min(nc - 1), 1.0));
            }
            fine_off += nf;
            coarse_off += nc;
        }
        down.push(SparseMatrix::new(lv[r + 1].num_nodes, lv[r].num_nodes, d));
        up.push(SparseMatrix::new(lv[r].num_nodes, lv[r + 1].num_nodes, u));
    }
    Ok(GraphTopology {
        mode: TopologyMode::Independent,
        organs: labels,
        levels: lv,
        down,
        up,
        atlas_positions: None,
    })
}

struct UnionFind(Vec<usize>);

impl UnionFind {
    fn find(&mut self, a: usize) -> usize {
        let mut r = a;
        while self.0[r] != r {
            r = self.0[r];
        }
        let mut c = a;
        while self.0[c] != r {
            let next = self.0[c];
            self.0[c] = r;
            c = next;
        }
        r
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        // the smaller index stays root so node order follows input order
        if ra != rb {
            let (lo, hi) = (ra.min(rb), ra.max(rb));
            self.0[hi] = lo;
        }
    }
}

fn collapse_cycle(seq: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut out: Vec<usize> = Vec::new();
    for v in seq {
        if out.last() != Some(&v) {
            out.push(v);
        }
    }
    while out.len() > 1 && out.first() == out.last() {
        out.pop();
    }
    out
}

fn check_cycle(organ: u8, cyc: &[usize], what: &str) -> Result<()> {
    let distinct: BTreeSet<_> = cyc.iter().collect();
    if distinct.len() < 3 {
        return Err(Error::Topology(format!(
            "{what} collapses organ {organ} to {} distinct nodes",
            distinct.len()
        )));
    }
    if distinct.len() != cyc.len() {
        return Err(Error::Topology(format!(
            "{what} pinches the cycle of organ {organ}"
        )));
    }
    Ok(())
}

/// Unified graph at the finest level. Each atlas contour (continuous pixel
/// coordinates) is resampled to its landmark count, then points of
/// different organs closer than `delta` are merged into shared nodes placed
/// at their centroid.
pub fn build_unified_level(
    atlas_contours: &BTreeMap<u8, Vec<Point>>,
    delta: f64,
    counts: &BTreeMap<u8, usize>,
) -> Result<(Level, Vec<Point>)> {
    if !(delta > 0.0) {
        return Err(Error::Topology(format!("merge distance {delta} must be positive")));
    }
    let mut points = Vec::new();
    let mut owner = Vec::new();
    let mut organs = Vec::new();
    for (&organ, contour) in atlas_contours {
        let n = *counts
            .get(&organ)
            .ok_or_else(|| Error::Topology(format!("no landmark count for organ {organ}")))?;
        if n < 3 || contour.is_empty() {
            return Err(Error::Topology(format!("organ {organ} needs at least 3 landmarks")));
        }
        let start = points.len();
        points.extend(resample_closed(contour, n));
        owner.extend(std::iter::repeat_n(organ, n));
        organs.push((organ, start..start + n));
    }
    let total = points.len();
    let mut uf = UnionFind((0..total).collect());
    for a in 0..total {
        for b in a + 1..total {
            if owner[a] != owner[b] && dist(points[a], points[b]) <= delta {
                uf.union(a, b);
            }
        }
    }
    let mut node_of_root = BTreeMap::new();
    let mut node = vec![0; total];
    for i in 0..total {
        let root = uf.find(i);
        let next = node_of_root.len();
        node[i] = *node_of_root.entry(root).or_insert(next);
    }
    let num_nodes = node_of_root.len();
    let mut sums = vec![([0.0, 0.0], 0usize); num_nodes];
    let mut membership = vec![BTreeSet::new(); num_nodes];
    for i in 0..total {
        let s = &mut sums[node[i]];
        s.0[0] += points[i][0];
        s.0[1] += points[i][1];
        s.1 += 1;
        membership[node[i]].insert(owner[i]);
    }
    let positions: Vec<Point> = sums
        .iter()
        .map(|(s, c)| [s[0] / *c as f64, s[1] / *c as f64])
        .collect();
    let mut cycles = Vec::new();
    for (organ, range) in organs {
        let cyc = collapse_cycle(range.map(|i| node[i]));
        check_cycle(organ, &cyc, "proximity merge")?;
        cycles.push(cyc);
    }
    let membership = membership.into_iter().map(|m| m.into_iter().collect()).collect();
    Ok((Level::from_cycles(num_nodes, cycles, membership), positions))
}

/// Full unified hierarchy: [`build_unified_level`] followed by repeated
/// [`coarsen_unified`].
pub fn build_unified(
    atlas_contours: &BTreeMap<u8, Vec<Point>>,
    delta: f64,
    counts: &BTreeMap<u8, usize>,
    levels: usize,
) -> Result<GraphTopology> {
    if levels == 0 {
        return Err(Error::Topology("at least one resolution level required".into()));
    }
    let (first, positions) = build_unified_level(atlas_contours, delta, counts)?;
    let mut lv = vec![first];
    let mut pos = vec![positions];
    let (mut down, mut up) = (Vec::new(), Vec::new());
    for r in 0..levels - 1 {
        let c = coarsen_unified(&lv[r])?;
        pos.push(c.down.apply_points(&pos[r]));
        lv.push(c.level);
        down.push(c.down);
        up.push(c.up);
    }
    Ok(GraphTopology {
        mode: TopologyMode::Unified,
        organs: atlas_contours.keys().copied().collect(),
        levels: lv,
        down,
        up,
        atlas_positions: Some(pos),
    })
}

pub struct Coarsened {
    pub level: Level,
    pub down: SparseMatrix,
    pub up: SparseMatrix,
}

/// Pairs adjacent degree-2 nodes along each chain, keeping junctions.
///
/// Chains hanging off junctions are walked first (junctions and their
/// neighbours in ascending order), then junction-free cycles starting at
/// their lowest node towards its lower neighbour. Consecutive nodes are
/// paired greedily; an odd leftover is copied.
pub fn coarsen_unified(level: &Level) -> Result<Coarsened> {
    let nb = level.neighbours();
    let n = level.num_nodes;
    let candidate: Vec<bool> = nb.iter().map(|v| v.len() == 2).collect();
    let mut visited = vec![false; n];
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let pair_up = |seq: &[usize], groups: &mut Vec<Vec<usize>>| {
        for chunk in seq.chunks(2) {
            groups.push(chunk.to_vec());
        }
    };

    for j in (0..n).filter(|&v| !candidate[v]) {
        visited[j] = true;
        groups.push(vec![j]);
    }
    for j in (0..n).filter(|&v| !candidate[v]) {
        for &start in &nb[j] {
            if !candidate[start] || visited[start] {
                continue;
            }
            let mut seq = vec![start];
            visited[start] = true;
            let (mut prev, mut cur) = (j, start);
            loop {
                let next = if nb[cur][0] == prev { nb[cur][1] } else { nb[cur][0] };
                if !candidate[next] || visited[next] {
                    break;
                }
                visited[next] = true;
                seq.push(next);
                (prev, cur) = (cur, next);
            }
            pair_up(&seq, &mut groups);
        }
    }
    for s in 0..n {
        if visited[s] {
            continue;
        }
        let mut seq = vec![s];
        visited[s] = true;
        let (mut prev, mut cur) = (s, nb[s][0]);
        while !visited[cur] {
            visited[cur] = true;
            seq.push(cur);
            let next = if nb[cur][0] == prev { nb[cur][1] } else { nb[cur][0] };
            (prev, cur) = (cur, next);
        }
        pair_up(&seq, &mut groups);
    }

    groups.sort_by_key(|g| *g.iter().min().unwrap());
    let mut coarse_of = vec![0; n];
    for (c, g) in groups.iter().enumerate() {
        for &v in g {
            coarse_of[v] = c;
        }
    }
    let nc = groups.len();
    let mut d = Vec::new();
    let mut u = Vec::new();
    let mut membership = Vec::with_capacity(nc);
    for (c, g) in groups.iter().enumerate() {
        let w = 1.0 / g.len() as f64;
        let mut m = BTreeSet::new();
        for &v in g {
            d.push((c, v, w));
            u.push((v, c, 1.0));
            m.extend(level.membership[v].iter().copied());
        }
        membership.push(m.into_iter().collect());
    }
    let organs: Vec<u8> = level
        .organ_cycles
        .iter()
        .map(|cyc| level.membership[cyc[0]].clone())
        .map(|m| m[0])
        .collect();
    let mut cycles = Vec::new();
    for (o, cyc) in level.organ_cycles.iter().enumerate() {
        let coarse = collapse_cycle(cyc.iter().map(|&v| coarse_of[v]));
        check_cycle(organs[o], &coarse, "coarsening")?;
        cycles.push(coarse);
    }
    let coarse_level = Level::from_cycles(nc, cycles, membership);
    Ok(Coarsened {
        level: coarse_level,
        down: SparseMatrix::new(nc, n, d),
        up: SparseMatrix::new(n, nc, u),
    })
}

/// Padded per-organ directed edge lists and consecutive edge pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EdgeTensor {
    /// Maximum edge count over organs.
    pub max_edges: usize,
    /// `[organ][slot] = (i, j)`; padding slots hold `(0, 0)`.
    pub edges: Vec<Vec<(usize, usize)>>,
    pub valid: Vec<Vec<bool>>,
    /// Organ index of each slot in row-major `[organ][slot]` order.
    pub edge_organ_map: Vec<usize>,
    /// Per organ, consecutive edge pairs `((i, j), (j, k))` with `i != k`.
    pub consecutive_pairs: Vec<Vec<((usize, usize), (usize, usize))>>,
}

impl EdgeTensor {
    pub fn num_organs(&self) -> usize {
        self.edges.len()
    }

    /// Valid directed edges of one organ.
    pub fn organ_edges(&self, organ: usize) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.edges[organ]
            .iter()
            .zip(&self.valid[organ])
            .filter(|(_, &v)| v)
            .map(|(&e, _)| e)
    }

    /// Undirected adjacency implied by the valid edges.
    pub fn adjacency(&self) -> Vec<(usize, usize)> {
        let set: BTreeSet<(usize, usize)> = (0..self.num_organs())
            .flat_map(|o| self.organ_edges(o).collect::<Vec<_>>())
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        set.into_iter().collect()
    }
}

pub fn edge_tensor(level: &Level) -> EdgeTensor {
    let max_edges = level.organ_cycles.iter().map(Vec::len).max().unwrap_or(0);
    let organs = level.organ_cycles.len();
    let mut edges = Vec::with_capacity(organs);
    let mut valid = Vec::with_capacity(organs);
    let mut pairs = Vec::with_capacity(organs);
    for cyc in &level.organ_cycles {
        let n = cyc.len();
        let mut e: Vec<(usize, usize)> = (0..n).map(|k| (cyc[k], cyc[(k + 1) % n])).collect();
        let mut v = vec![true; n];
        e.resize(max_edges, (0, 0));
        v.resize(max_edges, false);
        edges.push(e);
        valid.push(v);
        pairs.push(
            (0..n)
                .map(|k| {
                    let (i, j, l) = (cyc[k], cyc[(k + 1) % n], cyc[(k + 2) % n]);
                    ((i, j), (j, l))
                })
                .filter(|((i, _), (_, l))| i != l)
                .collect(),
        );
    }
    EdgeTensor {
        max_edges,
        edge_organ_map: (0..organs).flat_map(|o| std::iter::repeat_n(o, max_edges)).collect(),
        edges,
        valid,
        consecutive_pairs: pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matmul(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let (n, m, k) = (a.len(), b[0].len(), b.len());
        (0..n)
            .map(|i| (0..m).map(|j| (0..k).map(|t| a[i][t] * b[t][j]).sum()).collect())
            .collect()
    }

    #[test]
    fn landmark_counts() {
        assert_eq!(landmark_count(200.0, 0.10, 16), 20);
        assert_eq!(landmark_count(100.0, 0.10, 16), 16);
        assert_eq!(landmark_count(437.0, 0.05, 8), 21);
        assert_eq!(landmark_count(100.0, 0.29, 3), 29);
    }

    #[test]
    fn level_counts() {
        assert_eq!(resolution_counts(20, 3).unwrap(), vec![20, 10, 5]);
        assert_eq!(resolution_counts(21, 3).unwrap(), vec![21, 10, 5]);
        assert_eq!(resolution_counts(16, 2).unwrap(), vec![16, 8]);
        assert!(resolution_counts(11, 3).is_err());
    }

    #[test]
    fn independent_cycle_neighbours() {
        let t = build_independent(&[(1, 4)], 1).unwrap();
        let nb = t.finest().neighbours();
        assert_eq!(nb[0], vec![1, 3]);
        assert!(t.finest().degrees().iter().all(|&d| d == 2));
        assert!(build_independent(&[(1, 2)], 1).is_err());
    }

    #[test]
    fn pooling_matrices_for_eight_nodes() {
        let t = build_independent(&[(1, 8)], 2).unwrap();
        let d = t.down[0].to_dense();
        assert_eq!((d.len(), d[0].len()), (4, 8));
        assert_eq!(d[0], vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        let du = matmul(&d, &t.up[0].to_dense());
        for (i, row) in du.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                assert_eq!(v, if i == j { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn block_diagonal_assembly() {
        let t = build_independent(&[(1, 4), (2, 6)], 1).unwrap();
        let lv = t.finest();
        assert_eq!(lv.num_nodes, 10);
        for &(a, b) in &lv.edges {
            assert_eq!(a < 4, b < 4, "edge {a}-{b} crosses organ blocks");
        }
        assert_eq!(lv.organ_cycles[1], (4..10).collect::<Vec<_>>());
    }

    #[test]
    fn odd_count_leaves_trailing_node_unpooled() {
        let t = build_independent(&[(1, 7)], 2).unwrap();
        let d = t.down[0].to_dense();
        assert_eq!(d.len(), 3);
        assert!(d.iter().all(|r| r[6] == 0.0));
        assert!(t.down[0].row_sums().iter().all(|&s| s == 1.0));
        assert!(t.up[0].col_sums().iter().all(|&s| s >= 1.0));
        assert_eq!(t.up[0].to_dense()[6][2], 1.0);
    }

    fn square(x0: f64, y0: f64, side: f64) -> Vec<Point> {
        // clockwise on screen, starting top-left, one point per pixel
        let s = side as usize;
        let mut v = Vec::new();
        for k in 0..s {
            v.push([x0 + k as f64, y0]);
        }
        for k in 0..s {
            v.push([x0 + side, y0 + k as f64]);
        }
        for k in 0..s {
            v.push([x0 + side - k as f64, y0 + side]);
        }
        for k in 0..s {
            v.push([x0, y0 + side - k as f64]);
        }
        v
    }

    fn touching_squares() -> BTreeMap<u8, Vec<Point>> {
        // 9x9 pixel squares side by side: pixel-center contours of length 32
        BTreeMap::from([(1, square(0.5, 0.5, 8.0)), (2, square(9.5, 0.5, 8.0))])
    }

    #[test]
    fn touching_squares_share_their_edge() {
        let atlas = touching_squares();
        let counts = BTreeMap::from([(1, 8), (2, 8)]);
        let delta = 2f64.sqrt() + 0.01;
        let (lv, pos) = build_unified_level(&atlas, delta, &counts).unwrap();
        // brute force over the resampled points
        let a = resample_closed(&atlas[&1], 8);
        let b = resample_closed(&atlas[&2], 8);
        let close_a: Vec<Point> = a
            .iter()
            .filter(|p| b.iter().any(|q| dist(**p, *q) <= delta))
            .copied()
            .collect();
        assert_eq!(close_a.len(), 3);
        assert_eq!(lv.num_nodes, 16 - 3);
        let shared = lv.shared_boundary(1, 2);
        assert_eq!(shared.len(), 3);
        for &v in &shared {
            assert!((pos[v][0] - 9.0).abs() < 1e-9, "{:?}", pos[v]);
        }
        // corners of the interface become junctions
        assert_eq!(lv.junctions.len(), 2);
        let et = edge_tensor(&lv);
        for &v in &shared {
            for o in 0..2 {
                assert!(et.organ_edges(o).any(|(i, j)| i == v || j == v));
            }
        }
    }

    #[test]
    fn unified_hierarchy_keeps_junctions() {
        let counts = BTreeMap::from([(1, 16), (2, 16)]);
        let t = build_unified(&touching_squares(), 2f64.sqrt() + 0.01, &counts, 3).unwrap();
        let n_junctions = t.levels[0].junctions.len();
        assert!(n_junctions >= 2);
        for r in 0..2 {
            let fine = &t.levels[r];
            let coarse = &t.levels[r + 1];
            assert_eq!(coarse.junctions.len(), n_junctions);
            let u = t.up[r].to_dense();
            for &j in &fine.junctions {
                let c = u[j].iter().position(|&v| v == 1.0).unwrap();
                assert!(coarse.junctions.contains(&c));
            }
            for &(v, c, _) in &t.up[r].entries {
                assert!(fine.membership[v].iter().all(|m| coarse.membership[c].contains(m)));
            }
            assert!(t.down[r].row_sums().iter().all(|&s| (s - 1.0).abs() < 1e-15));
            assert!(t.up[r].col_sums().iter().all(|&s| s >= 1.0));
            assert!(coarse.degrees().iter().all(|&d| d >= 2));
        }
    }

    #[test]
    fn tiny_delta_merges_nothing() {
        let counts = BTreeMap::from([(1, 8), (2, 8)]);
        let (lv, _) = build_unified_level(&touching_squares(), 0.01, &counts).unwrap();
        assert_eq!(lv.num_nodes, 16);
        assert!(lv.junctions.is_empty());
    }

    #[test]
    fn distant_circles_match_independent() {
        let circle = |cx: f64| -> Vec<Point> {
            (0..64)
                .map(|k| {
                    let t = std::f64::consts::TAU * k as f64 / 64.0;
                    [cx + 10.0 * t.cos(), 20.0 + 10.0 * t.sin()]
                })
                .collect()
        };
        let atlas = BTreeMap::from([(1, circle(15.0)), (2, circle(60.0))]);
        let counts = BTreeMap::from([(1, 16), (2, 12)]);
        let uni = build_unified(&atlas, 2f64.sqrt() + 0.01, &counts, 3).unwrap();
        let ind = build_independent(&[(1, 16), (2, 12)], 3).unwrap();
        assert_eq!(uni.levels, ind.levels);
        assert_eq!(uni.down, ind.down);
        assert_eq!(uni.up, ind.up);
    }

    #[test]
    fn chain_between_junctions_pairs_greedily() {
        // junctions 0 and 1 joined by three parallel paths; one path carries
        // five degree-2 nodes
        let cycles = vec![vec![0, 2, 3, 4, 5, 6, 1, 7], vec![0, 8, 1, 9]];
        let membership = vec![vec![1]; 10];
        let lv = Level::from_cycles(10, cycles, membership);
        assert_eq!(lv.junctions, vec![0, 1]);
        let c = coarsen_unified(&lv).unwrap();
        // 0,1 kept; chain 2..=6 -> {2,3},{4,5},{6}; 7, 8, 9 stay single
        assert_eq!(c.level.num_nodes, 8);
        let chain: Vec<usize> = c.level.organ_cycles[0].clone();
        assert_eq!(chain.len(), 6);
        assert_eq!(c.level.junctions.len(), 2);
    }

    #[test]
    fn junction_only_graph_unchanged() {
        // K4: every node has degree 3
        let cycles = vec![vec![0, 1, 2], vec![0, 2, 3], vec![0, 3, 1], vec![1, 3, 2]];
        let lv = Level::from_cycles(4, cycles, vec![vec![1]; 4]);
        let c = coarsen_unified(&lv).unwrap();
        assert_eq!(c.level.edges, lv.edges);
        assert_eq!(c.level.num_nodes, 4);
        assert!(c.down.entries.iter().all(|e| e.2 == 1.0));
    }

    #[test]
    fn coarsening_rejects_vanishing_cycle() {
        let lv = Level::from_cycles(4, vec![vec![0, 1, 2, 3]], vec![vec![1]; 4]);
        assert!(coarsen_unified(&lv).is_err());
    }

    #[test]
    fn edge_tensor_padding_and_pairs() {
        let t = build_independent(&[(1, 4)], 1).unwrap();
        let et = t.edge_tensor(0);
        assert_eq!(et.organ_edges(0).count(), 4);
        assert_eq!(et.consecutive_pairs[0].len(), 4);
        let t = build_independent(&[(1, 4), (2, 6)], 1).unwrap();
        let et = t.edge_tensor(0);
        assert_eq!(et.max_edges, 6);
        assert_eq!(et.valid[0].iter().filter(|v| !**v).count(), 2);
        assert_eq!(et.edges[0][4], (0, 0));
        assert_eq!(et.edge_organ_map.len(), 12);
        assert_eq!(et.adjacency(), t.finest().edges);
    }

    #[test]
    fn topology_json_round_trip() {
        let counts = BTreeMap::from([(1, 8), (2, 8)]);
        let t = build_unified(&touching_squares(), 2f64.sqrt() + 0.01, &counts, 1).unwrap();
        assert_eq!(GraphTopology::from_json(&t.to_json().unwrap()).unwrap(), t);
    }
}
