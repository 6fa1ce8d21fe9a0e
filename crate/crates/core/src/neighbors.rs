//! Exact nearest-neighbor search over a static cloud (k-d tree).
//!
//! Results are identical to an exhaustive scan: same squared distance and,
//! among equidistant points, the lowest point index.

use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf { start: usize, end: usize },
    Split { axis: usize, value: f64, left: usize, right: usize },
}

/// Immutable spatial index; safe to share across threads for queries.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<[f64; 3]>,
    // Point indices, permuted so that each leaf owns a contiguous range.
    order: Vec<usize>,
    nodes: Vec<Node>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub squared_distance: f64,
}

#[inline]
pub(crate) fn squared_distance(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

impl NeighborIndex {
    pub fn build(cloud: &PointCloud) -> Result<Self> {
        Self::from_points(cloud.points.iter().map(|p| [p.x, p.y, p.z]).collect())
    }

    pub fn from_points(points: Vec<[f64; 3]>) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::EmptyCloud("cannot index an empty cloud"));
        }
        let mut index = Self {
            order: (0..points.len()).collect(),
            points,
            nodes: Vec::new(),
        };
        let n = index.order.len();
        index.build_node(0, n);
        Ok(index)
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for &i in &self.order[start..end] {
            for a in 0..3 {
                lo[a] = lo[a].min(self.points[i][a]);
                hi[a] = hi[a].max(self.points[i][a]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
            .unwrap_or(0);
        if hi[axis] - lo[axis] <= 0.0 {
            // All points coincide.
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Split {
            axis,
            value,
            left: 0,
            right: 0,
        });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        if let Node::Split {
            left: l, right: r, ..
        } = &mut self.nodes[id]
        {
            *l = left;
            *r = right;
        }
        id
    }

    pub fn nearest(&self, query: &Point3) -> Neighbor {
        self.nearest_raw(&[query.x, query.y, query.z])
    }

    pub fn nearest_raw(&self, query: &[f64; 3]) -> Neighbor {
        let mut best = Neighbor {
            index: usize::MAX,
            squared_distance: f64::INFINITY,
        };
        self.search(0, query, &mut best);
        best
    }

    pub fn nearest_all(&self, queries: &[Point3]) -> Vec<Neighbor> {
        queries.iter().map(|q| self.nearest(q)).collect()
    }

    fn search(&self, node: usize, q: &[f64; 3], best: &mut Neighbor) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let d = squared_distance(q, &self.points[i]);
                    if d < best.squared_distance || (d == best.squared_distance && i < best.index) {
                        *best = Neighbor {
                            index: i,
                            squared_distance: d,
                        };
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let delta = q[axis] - value;
                let (near, far) = if delta < 0.0 { (left, right) } else { (right, left) };
                self.search(near, q, best);
                // `<=` keeps equidistant candidates reachable for the index tie rule.
                if delta * delta <= best.squared_distance {
                    self.search(far, q, best);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute(points: &[[f64; 3]], q: &[f64; 3]) -> Neighbor {
        let mut best = Neighbor {
            index: usize::MAX,
            squared_distance: f64::INFINITY,
        };
        for (i, p) in points.iter().enumerate() {
            let d = (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2) + (q[2] - p[2]).powi(2);
            if d < best.squared_distance {
                best = Neighbor {
                    index: i,
                    squared_distance: d,
                };
            }
        }
        best
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<[f64; 3]> {
        (0..n)
            .map(|_| {
                [
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                    rng.gen_range(-scale..scale),
                ]
            })
            .collect()
    }

    #[test]
    fn empty_cloud_rejected() {
        assert!(NeighborIndex::build(&PointCloud::default()).is_err());
    }

    #[test]
    fn single_point() {
        let idx = NeighborIndex::from_points(vec![[1.0, 2.0, 3.0]]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for q in random_points(&mut rng, 20, 10.0) {
            assert_eq!(idx.nearest_raw(&q).index, 0);
        }
    }

    #[test]
    fn hand_example() {
        let idx = NeighborIndex::from_points(vec![[1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]).unwrap();
        let n = idx.nearest_raw(&[0.0, 0.0, 0.0]);
        assert_eq!(n.index, 0);
        assert_eq!(n.squared_distance, 1.0);
        let n = idx.nearest_raw(&[0.0, 2.0, 0.0]);
        assert_eq!((n.index, n.squared_distance), (1, 0.0));
    }

    #[test]
    fn duplicates_resolve_to_lowest_index() {
        let mut pts = vec![[5.0, 5.0, 5.0]; 30];
        pts.extend(vec![[0.0, 0.0, 0.0]; 30]);
        let idx = NeighborIndex::from_points(pts).unwrap();
        assert_eq!(idx.nearest_raw(&[0.1, 0.0, 0.0]).index, 30);
        assert_eq!(idx.nearest_raw(&[5.0, 5.0, 4.9]).index, 0);
        // Equidistant from two distinct points.
        let idx = NeighborIndex::from_points(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]).unwrap();
        assert_eq!(idx.nearest_raw(&[0.0, 0.0, 0.0]).index, 0);
    }

    #[test]
    fn matches_brute_force_200() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let pts = random_points(&mut rng, 200, 5.0);
        let idx = NeighborIndex::from_points(pts.clone()).unwrap();
        for q in pts.iter().chain(random_points(&mut rng, 200, 6.0).iter()) {
            assert_eq!(idx.nearest_raw(q), brute(&pts, q));
        }
    }

    #[test]
    fn matches_brute_force_500_by_100() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts = random_points(&mut rng, 500, 20.0);
        let idx = NeighborIndex::from_points(pts.clone()).unwrap();
        for q in random_points(&mut rng, 100, 25.0) {
            assert_eq!(idx.nearest_raw(&q), brute(&pts, &q));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn equals_exhaustive_search(
            // Integer grid coordinates force many exact ties.
            pts in prop::collection::vec(prop::array::uniform3(-6i32..6), 1..1000),
            queries in prop::collection::vec(prop::array::uniform3(-14i32..14), 1..40),
        ) {
            let pts: Vec<[f64; 3]> = pts.iter().map(|p| p.map(|c| c as f64 * 0.5)).collect();
            let idx = NeighborIndex::from_points(pts.clone()).unwrap();
            for q in &queries {
                let q = q.map(|c| c as f64 * 0.25);
                prop_assert_eq!(idx.nearest_raw(&q), brute(&pts, &q));
            }
        }
    }
}
