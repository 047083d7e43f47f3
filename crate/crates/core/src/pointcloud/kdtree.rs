use nalgebra::Vector3;

use super::PointCloudError;

const LEAF_SIZE: usize = 8;

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

/// Static k-d tree over a point set.
///
/// Queries are exact: results equal an exhaustive scan, with equal distances
/// resolved towards the lowest point id.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    points: Vec<Vector3<f64>>,
    order: Vec<usize>,
    nodes: Vec<Node>,
}

/// Candidate ordering: squared distance first, then point id.
fn better(a: (f64, usize), b: (f64, usize)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

impl NeighborIndex {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut index = NeighborIndex {
            points: points.to_vec(),
            order: (0..points.len()).collect(),
            nodes: Vec::new(),
        };
        if !points.is_empty() {
            index.build_node(0, points.len());
        }
        index
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: usize) -> &Vector3<f64> {
        &self.points[id]
    }

    fn build_node(&mut self, start: usize, end: usize) -> usize {
        let id = self.nodes.len();
        if end - start <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { start, end });
            return id;
        }
        let mut lo = Vector3::repeat(f64::INFINITY);
        let mut hi = Vector3::repeat(f64::NEG_INFINITY);
        for &i in &self.order[start..end] {
            lo = lo.inf(&self.points[i]);
            hi = hi.sup(&self.points[i]);
        }
        let axis = (hi - lo).imax();
        let mid = start + (end - start) / 2;
        let points = &self.points;
        self.order[start..end].select_nth_unstable_by(mid - start, |&a, &b| {
            points[a][axis].total_cmp(&points[b][axis])
        });
        let value = self.points[self.order[mid]][axis];
        self.nodes.push(Node::Leaf { start, end });
        let left = self.build_node(start, mid);
        let right = self.build_node(mid, end);
        self.nodes[id] = Node::Split {
            axis,
            value,
            left,
            right,
        };
        id
    }

    /// Closest indexed point to `query`: `(id, euclidean distance)`.
    pub fn nearest(&self, query: &Vector3<f64>) -> Result<(usize, f64), PointCloudError> {
        if self.is_empty() {
            return Err(PointCloudError::EmptyIndex);
        }
        let mut best = (f64::INFINITY, usize::MAX);
        self.nearest_in(0, query, &mut best);
        Ok((best.1, best.0.sqrt()))
    }

    fn nearest_in(&self, node: usize, q: &Vector3<f64>, best: &mut (f64, usize)) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = ((self.points[i] - q).norm_squared(), i);
                    if better(cand, *best) {
                        *best = cand;
                    }
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.nearest_in(near, q, best);
                if diff * diff <= best.0 {
                    self.nearest_in(far, q, best);
                }
            }
        }
    }

    /// The `k` closest points sorted by (distance, id).
    pub fn k_nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<(usize, f64)> {
        let mut heap: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 && !self.is_empty() {
            self.knn_in(0, query, k, &mut heap);
        }
        heap.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    fn knn_in(&self, node: usize, q: &Vector3<f64>, k: usize, found: &mut Vec<(f64, usize)>) {
        match self.nodes[node] {
            Node::Leaf { start, end } => {
                for &i in &self.order[start..end] {
                    let cand = ((self.points[i] - q).norm_squared(), i);
                    if found.len() == k && !better(cand, found[k - 1]) {
                        continue;
                    }
                    let pos = found.partition_point(|&c| better(c, cand));
                    found.insert(pos, cand);
                    found.truncate(k);
                }
            }
            Node::Split {
                axis,
                value,
                left,
                right,
            } => {
                let diff = q[axis] - value;
                let (near, far) = if diff < 0.0 { (left, right) } else { (right, left) };
                self.knn_in(near, q, k, found);
                if found.len() < k || diff * diff <= found[k - 1].0 {
                    self.knn_in(far, q, k, found);
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

    fn brute_nearest(points: &[Vector3<f64>], q: &Vector3<f64>) -> (usize, f64) {
        let mut best = (f64::INFINITY, usize::MAX);
        for (i, p) in points.iter().enumerate() {
            let d = (p - q).norm_squared();
            if d < best.0 {
                best = (d, i);
            }
        }
        (best.1, best.0.sqrt())
    }

    #[test]
    fn single_point() {
        let idx = NeighborIndex::build(&[Vector3::zeros()]);
        let (id, d) = idx.nearest(&Vector3::new(1.0, 1.0, 1.0)).unwrap();
        assert_eq!(id, 0);
        assert!((d - 3f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn empty_index_errors() {
        let idx = NeighborIndex::build(&[]);
        assert!(matches!(
            idx.nearest(&Vector3::zeros()),
            Err(PointCloudError::EmptyIndex)
        ));
        assert!(idx.k_nearest(&Vector3::zeros(), 3).is_empty());
    }

    #[test]
    fn ties_resolve_to_lowest_id() {
        let mut pts: Vec<Vector3<f64>> = (0..10)
            .map(|i| Vector3::new(10.0 + i as f64, 5.0, 0.0))
            .collect();
        pts[3] = Vector3::new(1.0, 0.0, 0.0);
        pts[7] = Vector3::new(-1.0, 0.0, 0.0);
        let idx = NeighborIndex::build(&pts);
        assert_eq!(idx.nearest(&Vector3::zeros()).unwrap().0, 3);
        // Many duplicates straddling split planes.
        let dup = vec![Vector3::new(0.5, 0.5, 0.5); 40];
        let idx = NeighborIndex::build(&dup);
        assert_eq!(idx.nearest(&Vector3::zeros()).unwrap().0, 0);
        let knn: Vec<usize> = idx.k_nearest(&Vector3::zeros(), 5).iter().map(|x| x.0).collect();
        assert_eq!(knn, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn matches_exhaustive_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts: Vec<Vector3<f64>> = (0..500)
            .map(|_| {
                Vector3::new(
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                    rng.random_range(-10.0..10.0),
                )
            })
            .collect();
        let idx = NeighborIndex::build(&pts);
        for _ in 0..100 {
            let q = Vector3::new(
                rng.random_range(-12.0..12.0),
                rng.random_range(-12.0..12.0),
                rng.random_range(-12.0..12.0),
            );
            assert_eq!(idx.nearest(&q).unwrap(), brute_nearest(&pts, &q));
            let knn = idx.k_nearest(&q, 7);
            let mut all: Vec<(f64, usize)> =
                pts.iter().enumerate().map(|(i, p)| ((p - q).norm_squared(), i)).collect();
            all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let expect: Vec<usize> = all.iter().take(7).map(|x| x.1).collect();
            assert_eq!(knn.iter().map(|x| x.0).collect::<Vec<_>>(), expect);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(128))]
        #[test]
        fn nearest_equals_brute_force(
            pts in prop::collection::vec(prop::array::uniform3(-5i32..5), 1..200),
            queries in prop::collection::vec(prop::array::uniform3(-60i32..60), 1..20),
        ) {
            // Integer lattice coordinates make exact ties common.
            let pts: Vec<Vector3<f64>> = pts.iter().map(|p| Vector3::new(p[0] as f64, p[1] as f64, p[2] as f64)).collect();
            let idx = NeighborIndex::build(&pts);
            for q in &queries {
                let q = Vector3::new(q[0] as f64 / 10.0, q[1] as f64 / 10.0, q[2] as f64 / 10.0);
                prop_assert_eq!(idx.nearest(&q).unwrap(), brute_nearest(&pts, &q));
            }
        }
    }
}
