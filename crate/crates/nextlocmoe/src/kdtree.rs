//! Exact k-nearest-neighbor lookup over 2-D points via a median-split
//! k-d tree. Ordering is by squared distance with location id as the
//! tie-breaker, so results are fully deterministic; a subtree is pruned
//! only when the splitting plane is strictly farther than the current
//! worst candidate.

use crate::data::Location;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Neighbor {
    pub id: u64,
    pub d2: f64,
}

impl Neighbor {
    /// Sort key: squared distance, then id.
    pub fn key(&self) -> (f64, u64) {
        (self.d2, self.id)
    }

    fn worse_than(&self, other: &Neighbor) -> bool {
        // Lexicographic (d2, id); total_cmp keeps NaN out of UB territory.
        match self.d2.total_cmp(&other.d2) {
            std::cmp::Ordering::Equal => self.id > other.id,
            ord => ord == std::cmp::Ordering::Greater,
        }
    }
}

#[derive(Clone, Copy)]
struct Point {
    x: f64,
    y: f64,
    id: u64,
}

struct Node {
    point: Point,
    left: Option<usize>,
    right: Option<usize>,
}

pub struct KdTree {
    nodes: Vec<Node>,
    root: Option<usize>,
}

impl KdTree {
    pub fn build(points: &[(f64, f64, u64)]) -> KdTree {
        let mut pts: Vec<Point> = points
            .iter()
            .map(|&(x, y, id)| Point { x, y, id })
            .collect();
        let mut tree = KdTree {
            nodes: Vec::with_capacity(pts.len()),
            root: None,
        };
        let n = pts.len();
        tree.root = tree.build_rec(&mut pts, 0, n, 0);
        tree
    }

    pub fn from_locations(locations: &[Location]) -> KdTree {
        let pts: Vec<(f64, f64, u64)> =
            locations.iter().map(|l| (l.x, l.y, l.id)).collect();
        Self::build(&pts)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn build_rec(&mut self, pts: &mut [Point], lo: usize, hi: usize, depth: usize) -> Option<usize> {
        if lo >= hi {
            return None;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = depth % 2;
        pts[lo..hi].select_nth_unstable_by(mid - lo, |a, b| {
            let (ka, kb) = if axis == 0 {
                ((a.x, a.id), (b.x, b.id))
            } else {
                ((a.y, a.id), (b.y, b.id))
            };
            ka.0.total_cmp(&kb.0).then(ka.1.cmp(&kb.1))
        });
        let point = pts[mid];
        let idx = self.nodes.len();
        self.nodes.push(Node {
            point,
            left: None,
            right: None,
        });
        let left = self.build_rec(pts, lo, mid, depth + 1);
        let right = self.build_rec(pts, mid + 1, hi, depth + 1);
        self.nodes[idx].left = left;
        self.nodes[idx].right = right;
        Some(idx)
    }

    /// The `k` nearest stored points to `(x, y)`, sorted by `(d2, id)`
    /// ascending. Returns fewer than `k` when the tree is smaller.
    pub fn nearest(&self, x: f64, y: f64, k: usize) -> Vec<Neighbor> {
        let mut best: Vec<Neighbor> = Vec::with_capacity(k + 1);
        if k == 0 {
            return best;
        }
        self.search(self.root, x, y, k, 0, &mut best);
        best
    }

    fn search(
        &self,
        node: Option<usize>,
        x: f64,
        y: f64,
        k: usize,
        depth: usize,
        best: &mut Vec<Neighbor>,
    ) {
        let Some(idx) = node else { return };
        let n = &self.nodes[idx];
        let dx = n.point.x - x;
        let dy = n.point.y - y;
        let cand = Neighbor {
            id: n.point.id,
            d2: dx * dx + dy * dy,
        };
        // Insert into the sorted candidate list, keeping at most k.
        let pos = best.partition_point(|b| cand.worse_than(b));
        if pos < k {
            best.insert(pos, cand);
            best.truncate(k);
        }

        // Descend the side containing the query first.
        let axis = depth % 2;
        let split_delta = if axis == 0 { dx } else { dy };
        let query_on_left = if axis == 0 { x <= n.point.x } else { y <= n.point.y };
        let (near, far) = if query_on_left {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        self.search(near, x, y, k, depth + 1, best);
        let plane_d2 = split_delta * split_delta;
        let must_visit = best.len() < k
            || plane_d2 <= best.last().map(|w| w.d2).unwrap_or(f64::INFINITY);
        if must_visit {
            self.search(far, x, y, k, depth + 1, best);
        }
    }
}

/// Brute-force reference with identical ordering semantics.
pub fn linear_scan(points: &[(f64, f64, u64)], x: f64, y: f64, k: usize) -> Vec<Neighbor> {
    let mut all: Vec<Neighbor> = points
        .iter()
        .map(|&(px, py, id)| {
            let (dx, dy) = (px - x, py - y);
            Neighbor {
                id,
                d2: dx * dx + dy * dy,
            }
        })
        .collect();
    all.sort_by(|a, b| a.d2.total_cmp(&b.d2).then(a.id.cmp(&b.id)));
    all.truncate(k);
    all
}
