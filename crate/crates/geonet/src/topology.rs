//! Geodesic distances, self-tuning kernel, percentile mask, connectivity and
//! input/output neuron selection.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use faer::Mat;

use crate::error::{Error, Result};
use crate::geometry::{fe_basis_at, norm, sub, Mesh, SurfacePoint};

/// All-pairs shortest-path distances along mesh edges, row-major n_o × n_o.
#[derive(Clone, Debug)]
pub struct GeodesicTable {
    pub n: usize,
    pub data: Vec<f64>,
}

impl GeodesicTable {
    pub fn get(&self, p: usize, q: usize) -> f64 {
        self.data[p * self.n + q]
    }
}

#[derive(PartialEq)]
struct Entry(f64, usize);

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.0.total_cmp(&self.0).then_with(|| other.1.cmp(&self.1))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

fn adjacency(mesh: &Mesh) -> Vec<Vec<(usize, f64)>> {
    let mut adj = vec![Vec::new(); mesh.n_nodes()];
    for (p, q) in mesh.edges() {
        let w = norm(sub(mesh.nodes[p], mesh.nodes[q]));
        adj[p].push((q, w));
        adj[q].push((p, w));
    }
    adj
}

fn dijkstra(adj: &[Vec<(usize, f64)>], source: usize, dist: &mut [f64]) {
    dist.iter_mut().for_each(|d| *d = f64::INFINITY);
    dist[source] = 0.0;
    let mut heap = BinaryHeap::new();
    heap.push(Entry(0.0, source));
    while let Some(Entry(d, u)) = heap.pop() {
        if d > dist[u] {
            continue;
        }
        for &(v, w) in &adj[u] {
            let nd = d + w;
            if nd < dist[v] {
                dist[v] = nd;
                heap.push(Entry(nd, v));
            }
        }
    }
}

pub fn mesh_geodesics(mesh: &Mesh) -> Result<GeodesicTable> {
    let n = mesh.n_nodes();
    let adj = adjacency(mesh);
    let mut data = vec![0.0; n * n];
    for (s, row) in data.chunks_mut(n.max(1)).enumerate().take(n) {
        dijkstra(&adj, s, row);
        if let Some(q) = row.iter().position(|d| d.is_infinite()) {
            return Err(Error::Unreachable(s, q));
        }
    }
    // symmetrize against round-off in path sums taken in opposite order
    for p in 0..n {
        for q in p + 1..n {
            let d = data[p * n + q].min(data[q * n + p]);
            data[p * n + q] = d;
            data[q * n + p] = d;
        }
    }
    Ok(GeodesicTable { n, data })
}

/// [D^neu]_{ij} = φ(x^i)ᵀ [D_g] φ(x^j) with the diagonal forced to 0.
pub fn neuron_geodesics(table: &GeodesicTable, mesh: &Mesh, points: &[SurfacePoint]) -> Result<Mat<f64>> {
    let basis = points
        .iter()
        .map(|p| fe_basis_at(mesh, p))
        .collect::<Result<Vec<_>>>()?;
    let n = points.len();
    let mut d = Mat::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let mut s = 0.0;
            for &(p, wp) in &basis[i] {
                for &(q, wq) in &basis[j] {
                    s += wp * wq * table.get(p, q);
                }
            }
            d[(i, j)] = s;
            d[(j, i)] = s;
        }
    }
    Ok(d)
}

/// σ̂_i = (k+1)-th smallest off-diagonal distance, k = min(⌊√N⌋, N − 1).
pub fn local_bandwidths(d: &Mat<f64>) -> Result<Vec<f64>> {
    let n = d.nrows();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 neurons, got {n}")));
    }
    let k = ((n as f64).sqrt().floor() as usize).min(n - 1);
    let mut row = Vec::with_capacity(n - 1);
    let mut sigma = Vec::with_capacity(n);
    for i in 0..n {
        row.clear();
        row.extend((0..n).filter(|&j| j != i).map(|j| d[(i, j)]));
        row.sort_by(f64::total_cmp);
        let s = row[k.min(row.len() - 1)];
        if !(s > 0.0) {
            return Err(Error::ZeroBandwidth(i));
        }
        sigma.push(s);
    }
    Ok(sigma)
}

pub fn geometric_kernel(d: &Mat<f64>, sigma: &[f64]) -> Mat<f64> {
    let n = d.nrows();
    Mat::from_fn(n, n, |i, j| {
        if i == j {
            0.0
        } else {
            (-d[(i, j)] * d[(i, j)] / (sigma[i] * sigma[j])).exp()
        }
    })
}

/// Linear-interpolation percentile of ascending `sorted` at `tau` percent.
pub fn percentile(sorted: &[f64], tau: f64) -> f64 {
    let n = sorted.len();
    let pos = tau / 100.0 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(n - 1);
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Symmetric binary edge mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EdgeMask {
    pub n: usize,
    pub data: Vec<bool>,
}

impl EdgeMask {
    pub fn get(&self, i: usize, j: usize) -> bool {
        self.data[i * self.n + j]
    }

    pub fn from_fn(n: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                data[i * n + j] = i != j && f(i, j);
            }
        }
        Self { n, data }
    }

    /// Undirected edges (i < j).
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let mut e = Vec::new();
        for i in 0..self.n {
            for j in i + 1..self.n {
                if self.get(i, j) {
                    e.push((i, j));
                }
            }
        }
        e
    }

    pub fn edge_count(&self) -> usize {
        self.edges().len()
    }
}

pub fn percentile_mask(w: &Mat<f64>, tau: f64) -> Result<(EdgeMask, f64)> {
    let n = w.nrows();
    if n < 2 {
        return Err(Error::InvalidParameter(format!("need at least 2 neurons, got {n}")));
    }
    if !(0.0..=100.0).contains(&tau) {
        return Err(Error::InvalidParameter(format!("percentile {tau} outside [0, 100]")));
    }
    let mut v = Vec::with_capacity(n * (n - 1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            v.push(w[(i, j)]);
        }
    }
    v.sort_by(f64::total_cmp);
    let a = percentile(&v, tau);
    let mask = EdgeMask::from_fn(n, |i, j| {
        let x = if i < j { w[(i, j)] } else { w[(j, i)] };
        x >= a
    });
    Ok((mask, a))
}

/// Breadth-first search from node 0 reaches every node.
pub fn validate_connectivity(mask: &EdgeMask) -> bool {
    let n = mask.n;
    if n == 0 {
        return true;
    }
    let mut seen = vec![false; n];
    let mut queue = VecDeque::from([0usize]);
    seen[0] = true;
    let mut count = 1;
    while let Some(u) = queue.pop_front() {
        for v in 0..n {
            if !seen[v] && mask.get(u, v) {
                seen[v] = true;
                count += 1;
                queue.push_back(v);
            }
        }
    }
    count == n
}

/// Input, hidden and output index sets (0-based).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IoSets {
    /// n_in smallest field values, ascending.
    pub j_in: Vec<usize>,
    /// Remaining indices, ascending.
    pub j_int: Vec<usize>,
    /// n_out largest field values, descending.
    pub j_out: Vec<usize>,
}

pub fn select_io_neurons(u: &[f64], n_in: usize, n_out: usize) -> Result<IoSets> {
    let n = u.len();
    if n_in + n_out > n {
        return Err(Error::InvalidParameter(format!(
            "n_in + n_out = {} exceeds N = {n}",
            n_in + n_out
        )));
    }
    let mut asc: Vec<usize> = (0..n).collect();
    asc.sort_by(|&a, &b| u[a].total_cmp(&u[b]).then(a.cmp(&b)));
    let mut desc: Vec<usize> = (0..n).collect();
    desc.sort_by(|&a, &b| u[b].total_cmp(&u[a]).then(a.cmp(&b)));
    let j_in: Vec<usize> = asc[..n_in].to_vec();
    let j_out: Vec<usize> = desc.into_iter().filter(|i| !j_in.contains(i)).take(n_out).collect();
    let j_int = (0..n).filter(|i| !j_in.contains(i) && !j_out.contains(i)).collect();
    Ok(IoSets { j_in, j_int, j_out })
}

/// Everything about the graph that does not depend on the weight germs.
#[derive(Clone, Debug)]
pub struct GraphTopology {
    pub neuron_distances: Mat<f64>,
    pub bandwidths: Vec<f64>,
    pub kernel: Mat<f64>,
    pub mask: EdgeMask,
    pub threshold: f64,
    pub io: IoSets,
}
