//! Communication topology and the Laplacian algebra behind the stability
//! argument.
//!
//! Followers are numbered `0..m` internally and the leader occupies slot `m`
//! in every augmented matrix. Follower edges are undirected and weighted;
//! leader links are directed toward the followers (the leader listens to
//! nobody), which is why the augmented Laplacian has a zero last row.

use ndarray::{Array1, Array2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error("at least one follower is required")]
    NoFollowers,
    #[error("edge endpoint {index} outside 1..={count}")]
    EndpointOutOfRange { index: usize, count: usize },
    #[error("self loop on agent {0}")]
    SelfLoop(usize),
    #[error("edge ({i}, {j}) has nonpositive weight {weight}")]
    NonpositiveWeight { i: usize, j: usize, weight: f64 },
    #[error("edge ({0}, {1}) declared twice")]
    DuplicateEdge(usize, usize),
    #[error("leader link to agent {0} declared twice")]
    DuplicateLeaderLink(usize),
    #[error("graph is not connected once leader links are included")]
    Disconnected,
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix asymmetry {0:.3e} exceeds tolerance {1:.3e}")]
    NotSymmetric(f64, f64),
    #[error("eigensolver stalled with off-diagonal norm {0:.3e} after {1} sweeps")]
    NoConvergence(f64, usize),
}

/// Validated follower network plus leader links.
///
/// Edges and links are keyed by 1-based agent numbers at the construction
/// boundary, matching how scenarios name agents; everything stored inside is
/// 0-based.
#[derive(Clone, Debug)]
pub struct Topology {
    follower_count: usize,
    adjacency: Array2<f64>,
    leader_weights: Array1<f64>,
}

impl Topology {
    pub fn new(
        follower_count: usize,
        edges: &[(usize, usize, f64)],
        leader_links: &[(usize, f64)],
    ) -> Result<Self, GraphError> {
        if follower_count == 0 {
            return Err(GraphError::NoFollowers);
        }
        let m = follower_count;
        let mut adjacency = Array2::zeros((m, m));
        for &(i, j, weight) in edges {
            for index in [i, j] {
                if index < 1 || index > m {
                    return Err(GraphError::EndpointOutOfRange { index, count: m });
                }
            }
            if i == j {
                return Err(GraphError::SelfLoop(i));
            }
            if !(weight > 0.0) {
                return Err(GraphError::NonpositiveWeight { i, j, weight });
            }
            let (a, b) = (i - 1, j - 1);
            if adjacency[[a, b]] != 0.0 {
                return Err(GraphError::DuplicateEdge(i, j));
            }
            adjacency[[a, b]] = weight;
            adjacency[[b, a]] = weight;
        }
        let mut leader_weights = Array1::zeros(m);
        for &(i, weight) in leader_links {
            if i < 1 || i > m {
                return Err(GraphError::EndpointOutOfRange { index: i, count: m });
            }
            if !(weight > 0.0) {
                return Err(GraphError::NonpositiveWeight {
                    i,
                    j: m + 1,
                    weight,
                });
            }
            if leader_weights[i - 1] != 0.0 {
                return Err(GraphError::DuplicateLeaderLink(i));
            }
            leader_weights[i - 1] = weight;
        }

        let topology = Topology {
            follower_count,
            adjacency,
            leader_weights,
        };
        if !topology.augmented_connected() {
            return Err(GraphError::Disconnected);
        }
        Ok(topology)
    }

    /// Breadth-first reachability from the leader over the augmented graph,
    /// treating leader links as undirected for the purpose of connectivity.
    fn augmented_connected(&self) -> bool {
        let m = self.follower_count;
        let mut seen = vec![false; m + 1];
        let mut queue = std::collections::VecDeque::new();
        seen[m] = true;
        queue.push_back(m);
        while let Some(node) = queue.pop_front() {
            for next in 0..m {
                if seen[next] {
                    continue;
                }
                let linked = if node == m {
                    self.leader_weights[next] > 0.0
                } else {
                    self.adjacency[[node, next]] > 0.0
                };
                if linked {
                    seen[next] = true;
                    queue.push_back(next);
                }
            }
            if node != m && !seen[m] && self.leader_weights[node] > 0.0 {
                seen[m] = true;
                queue.push_back(m);
            }
        }
        seen.into_iter().all(|s| s)
    }

    pub fn follower_count(&self) -> usize {
        self.follower_count
    }

    pub fn edge_weight(&self, i: usize, j: usize) -> f64 {
        self.adjacency[[i, j]]
    }

    pub fn leader_weight(&self, i: usize) -> f64 {
        self.leader_weights[i]
    }

    /// Neighbors of follower `i` in ascending index order, with the leader
    /// (reported as index `m`) last. The fixed order makes every downstream
    /// summation deterministic.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        let m = self.follower_count;
        let mut out = Vec::new();
        for j in 0..m {
            let w = self.adjacency[[i, j]];
            if w > 0.0 {
                out.push((j, w));
            }
        }
        if self.leader_weights[i] > 0.0 {
            out.push((m, self.leader_weights[i]));
        }
        out
    }
}

/// The three augmented Laplacians used by the closed loop.
#[derive(Clone, Debug)]
pub struct Laplacians {
    /// Leader row zeroed: generates the tracking error dynamics.
    pub directed: Array2<f64>,
    /// Laplacian of the graph with leader links treated as undirected.
    pub undirected: Array2<f64>,
    /// `undirected * directed + directed^T * undirected`, the matrix whose
    /// spectrum certifies stability.
    pub symmetrized: Array2<f64>,
}

pub fn laplacians(topology: &Topology) -> Laplacians {
    let m = topology.follower_count();
    let p = m + 1;
    let mut undirected = Array2::zeros((p, p));
    for i in 0..m {
        for j in 0..m {
            undirected[[i, j]] = -topology.edge_weight(i, j);
        }
        undirected[[i, m]] = -topology.leader_weight(i);
        undirected[[m, i]] = -topology.leader_weight(i);
    }
    for i in 0..p {
        let mut degree = 0.0;
        for j in 0..p {
            if j != i {
                degree -= undirected[[i, j]];
            }
        }
        undirected[[i, i]] = degree;
    }

    let mut directed = undirected.clone();
    directed.row_mut(m).fill(0.0);

    // With Psi exactly symmetric, L^T Psi = (Psi L)^T, so building the sum
    // from one product keeps the result symmetric to the last bit.
    let product = matmul(&undirected, &directed);
    let mut symmetrized = Array2::zeros((p, p));
    for i in 0..p {
        for j in 0..p {
            symmetrized[[i, j]] = product[[i, j]] + product[[j, i]];
        }
    }

    Laplacians {
        directed,
        undirected,
        symmetrized,
    }
}

/// Plain triple-loop product with a fixed accumulation order.
fn matmul(a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
    let (n, k) = a.dim();
    let (k2, m) = b.dim();
    assert_eq!(k, k2, "inner dimensions must agree");
    let mut out = Array2::zeros((n, m));
    for i in 0..n {
        for j in 0..m {
            let mut acc = 0.0;
            for l in 0..k {
                acc += a[[i, l]] * b[[l, j]];
            }
            out[[i, j]] = acc;
        }
    }
    out
}

/// Spectral summary of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct Spectrum {
    /// Ascending eigenvalues.
    pub eigenvalues: Vec<f64>,
    /// How many eigenvalues lie within `tolerance` of zero.
    pub zero_multiplicity: usize,
    /// Largest absolute entry of `A - A^T` observed before symmetrizing.
    pub asymmetry: f64,
}

/// Checks symmetry within `tolerance`, then diagonalizes and counts the
/// near-zero eigenvalues with the same tolerance.
pub fn spectral_check(matrix: &Array2<f64>, tolerance: f64) -> Result<Spectrum, GraphError> {
    let (rows, cols) = matrix.dim();
    if rows != cols {
        return Err(GraphError::NotSquare { rows, cols });
    }
    let mut asymmetry = 0.0_f64;
    for i in 0..rows {
        for j in (i + 1)..rows {
            asymmetry = asymmetry.max((matrix[[i, j]] - matrix[[j, i]]).abs());
        }
    }
    if asymmetry > tolerance {
        return Err(GraphError::NotSymmetric(asymmetry, tolerance));
    }
    let eigenvalues = symmetric_eigenvalues(matrix)?;
    let zero_multiplicity = eigenvalues.iter().filter(|v| v.abs() <= tolerance).count();
    Ok(Spectrum {
        eigenvalues,
        zero_multiplicity,
        asymmetry,
    })
}

/// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations, ascending.
///
/// Row-major sweeps with a fixed pivot order keep the computation
/// deterministic. Convergence is declared when the off-diagonal Frobenius
/// norm drops below 1e-12 relative to the matrix scale; 100 sweeps is far
/// more than the handful needed at the sizes used here.
pub fn symmetric_eigenvalues(matrix: &Array2<f64>) -> Result<Vec<f64>, GraphError> {
    const MAX_SWEEPS: usize = 100;
    let (rows, cols) = matrix.dim();
    if rows != cols {
        return Err(GraphError::NotSquare { rows, cols });
    }
    let n = rows;
    // Work on the symmetric part so tiny input asymmetry cannot bias sweeps.
    let mut a = Array2::zeros((n, n));
    for i in 0..n {
        for j in 0..n {
            a[[i, j]] = 0.5 * (matrix[[i, j]] + matrix[[j, i]]);
        }
    }
    let scale = frobenius(&a).max(1.0);
    let tolerance = 1e-12 * scale;

    for _sweep in 0..MAX_SWEEPS {
        if off_diagonal_norm(&a) <= tolerance {
            let mut eigenvalues: Vec<f64> = (0..n).map(|i| a[[i, i]]).collect();
            eigenvalues.sort_by(|x, y| x.partial_cmp(y).expect("diagonal stays finite"));
            return Ok(eigenvalues);
        }
        for p in 0..n.saturating_sub(1) {
            for q in (p + 1)..n {
                let apq = a[[p, q]];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[[q, q]] - a[[p, p]]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    1.0 / (tau - (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[[k, p]];
                    let akq = a[[k, q]];
                    a[[k, p]] = c * akp - s * akq;
                    a[[k, q]] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[[p, k]];
                    let aqk = a[[q, k]];
                    a[[p, k]] = c * apk - s * aqk;
                    a[[q, k]] = s * apk + c * aqk;
                }
                a[[p, q]] = 0.0;
                a[[q, p]] = 0.0;
            }
        }
    }
    Err(GraphError::NoConvergence(off_diagonal_norm(&a), MAX_SWEEPS))
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn off_diagonal_norm(a: &Array2<f64>) -> f64 {
    let n = a.nrows();
    let mut sum = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                sum += a[[i, j]] * a[[i, j]];
            }
        }
    }
    sum.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// The five-follower benchmark network used across the test suite:
    /// edges (1,2) (1,5) (2,5) (3,4) (3,5) (4,5) at unit weight, leader
    /// attached to agent 2.
    pub fn benchmark_topology() -> Topology {
        Topology::new(
            5,
            &[
                (1, 2, 1.0),
                (1, 5, 1.0),
                (2, 5, 1.0),
                (3, 4, 1.0),
                (3, 5, 1.0),
                (4, 5, 1.0),
            ],
            &[(2, 1.0)],
        )
        .expect("benchmark network is valid")
    }

    #[test]
    fn benchmark_directed_laplacian_is_exact() {
        let lap = laplacians(&benchmark_topology());
        let expected = array![
            [2.0, -1.0, 0.0, 0.0, -1.0, 0.0],
            [-1.0, 3.0, 0.0, 0.0, -1.0, -1.0],
            [0.0, 0.0, 2.0, -1.0, -1.0, 0.0],
            [0.0, 0.0, -1.0, 2.0, -1.0, 0.0],
            [-1.0, -1.0, -1.0, -1.0, 4.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        ];
        assert_eq!(lap.directed, expected);
    }

    #[test]
    fn undirected_laplacian_mirrors_leader_link() {
        let lap = laplacians(&benchmark_topology());
        assert_eq!(lap.undirected[[5, 1]], -1.0);
        assert_eq!(lap.undirected[[1, 5]], -1.0);
        assert_eq!(lap.undirected[[5, 5]], 1.0);
        // Follower rows agree with the directed version.
        for i in 0..5 {
            for j in 0..6 {
                assert_eq!(lap.undirected[[i, j]], lap.directed[[i, j]]);
            }
        }
    }

    #[test]
    fn symmetrized_matrix_is_bitwise_symmetric_with_zero_row_sums() {
        let lap = laplacians(&benchmark_topology());
        let n = lap.symmetrized.nrows();
        for i in 0..n {
            let mut row_sum = 0.0;
            for j in 0..n {
                assert_eq!(lap.symmetrized[[i, j]], lap.symmetrized[[j, i]]);
                row_sum += lap.symmetrized[[i, j]];
            }
            assert!(row_sum.abs() < 1e-12, "row {i} sums to {row_sum}");
        }
    }

    #[test]
    fn benchmark_spectrum_has_simple_zero_and_positive_rest() {
        let lap = laplacians(&benchmark_topology());
        let spectrum = spectral_check(&lap.symmetrized, 1e-8).unwrap();
        assert_eq!(spectrum.zero_multiplicity, 1);
        assert!(spectrum.eigenvalues[0].abs() <= 1e-8);
        for v in &spectrum.eigenvalues[1..] {
            assert!(*v > 1e-8);
        }
        // Nonzero eigenvalues of this particular network, frozen from an
        // independent evaluation of the 6x6 product.
        let expected = [
            0.186648856290,
            3.349755621762,
            18.0,
            26.692332294636,
            51.771263227312,
        ];
        for (got, want) in spectrum.eigenvalues[1..].iter().zip(expected) {
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
    }

    #[test]
    fn benchmark_follower_block_is_positive_definite() {
        let lap = laplacians(&benchmark_topology());
        let block = lap.directed.slice(ndarray::s![0..5, 0..5]).to_owned();
        let eig = symmetric_eigenvalues(&block).unwrap();
        let expected = [
            0.135677464872,
            1.221135663717,
            3.0,
            3.567246145244,
            5.075940726167,
        ];
        for (got, want) in eig.iter().zip(expected) {
            assert!((got - want).abs() < 1e-9, "got {got}, want {want}");
        }
    }

    #[test]
    fn single_follower_chain_hand_values() {
        // One follower tied to the leader at unit weight. By hand:
        // L = [[1, -1], [0, 0]], Psi = [[1, -1], [-1, 1]],
        // Psi*L + L^T*Psi = [[2, -2], [-2, 2]] with eigenvalues {0, 4}.
        let topology = Topology::new(1, &[], &[(1, 1.0)]).unwrap();
        let lap = laplacians(&topology);
        assert_eq!(lap.directed, array![[1.0, -1.0], [0.0, 0.0]]);
        assert_eq!(lap.undirected, array![[1.0, -1.0], [-1.0, 1.0]]);
        assert_eq!(lap.symmetrized, array![[2.0, -2.0], [-2.0, 2.0]]);
        let spectrum = spectral_check(&lap.symmetrized, 1e-8).unwrap();
        assert!((spectrum.eigenvalues[0]).abs() < 1e-12);
        assert!((spectrum.eigenvalues[1] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn eigenvalues_of_identity_and_diagonal() {
        let eye: Array2<f64> = Array2::eye(3);
        assert_eq!(symmetric_eigenvalues(&eye).unwrap(), vec![1.0, 1.0, 1.0]);
        let d = array![[3.0, 0.0], [0.0, -2.0]];
        assert_eq!(symmetric_eigenvalues(&d).unwrap(), vec![-2.0, 3.0]);
    }

    #[test]
    fn eigenvalues_of_tridiagonal_match_closed_form() {
        // Eigenvalues of the 3x3 second-difference matrix are 2 - sqrt(2),
        // 2, 2 + sqrt(2).
        let a = array![[2.0, -1.0, 0.0], [-1.0, 2.0, -1.0], [0.0, -1.0, 2.0]];
        let eig = symmetric_eigenvalues(&a).unwrap();
        let sqrt2 = 2.0_f64.sqrt();
        assert!((eig[0] - (2.0 - sqrt2)).abs() < 1e-12);
        assert!((eig[1] - 2.0).abs() < 1e-12);
        assert!((eig[2] - (2.0 + sqrt2)).abs() < 1e-12);
    }

    #[test]
    fn two_by_two_matches_quadratic_formula() {
        let cases = [(1.0, 2.0, -1.0), (4.0, 0.5, 3.0), (-2.0, 1.5, -2.0)];
        for (a, b, c) in cases {
            let m = array![[a, b], [b, c]];
            let eig = symmetric_eigenvalues(&m).unwrap();
            let mean = 0.5 * (a + c);
            let disc = (0.25 * (a - c) * (a - c) + b * b).sqrt();
            assert!((eig[0] - (mean - disc)).abs() < 1e-12);
            assert!((eig[1] - (mean + disc)).abs() < 1e-12);
        }
    }

    #[test]
    fn spectral_check_rejects_asymmetry_and_shape() {
        let bad = array![[1.0, 2.0], [0.0, 1.0]];
        assert!(matches!(
            spectral_check(&bad, 1e-8),
            Err(GraphError::NotSymmetric(..))
        ));
        let rect = Array2::<f64>::zeros((2, 3));
        assert!(matches!(
            spectral_check(&rect, 1e-8),
            Err(GraphError::NotSquare { .. })
        ));
    }

    #[test]
    fn construction_rejects_malformed_networks() {
        assert!(matches!(
            Topology::new(0, &[], &[]),
            Err(GraphError::NoFollowers)
        ));
        assert!(matches!(
            Topology::new(2, &[(1, 1, 1.0)], &[(1, 1.0)]),
            Err(GraphError::SelfLoop(1))
        ));
        assert!(matches!(
            Topology::new(2, &[(1, 3, 1.0)], &[(1, 1.0)]),
            Err(GraphError::EndpointOutOfRange { index: 3, .. })
        ));
        assert!(matches!(
            Topology::new(2, &[(1, 2, 0.0)], &[(1, 1.0)]),
            Err(GraphError::NonpositiveWeight { .. })
        ));
        assert!(matches!(
            Topology::new(2, &[(1, 2, 1.0), (2, 1, 2.0)], &[(1, 1.0)]),
            Err(GraphError::DuplicateEdge(2, 1))
        ));
        assert!(matches!(
            Topology::new(2, &[(1, 2, 1.0)], &[(1, 1.0), (1, 2.0)]),
            Err(GraphError::DuplicateLeaderLink(1))
        ));
        // No leader link leaves the leader unreachable.
        assert!(matches!(
            Topology::new(2, &[(1, 2, 1.0)], &[]),
            Err(GraphError::Disconnected)
        ));
        // Island follower.
        assert!(matches!(
            Topology::new(3, &[(1, 2, 1.0)], &[(1, 1.0)]),
            Err(GraphError::Disconnected)
        ));
    }

    #[test]
    fn follower_components_each_need_a_leader_link() {
        // Two components, both grounded: valid even though followers alone
        // are disconnected.
        let t = Topology::new(4, &[(1, 2, 1.0), (3, 4, 1.0)], &[(1, 1.0), (3, 1.0)]);
        assert!(t.is_ok());
        let lap = laplacians(&t.unwrap());
        let spectrum = spectral_check(&lap.symmetrized, 1e-8).unwrap();
        assert_eq!(spectrum.zero_multiplicity, 1);
    }

    #[test]
    fn neighbor_listing_is_sorted_with_leader_last() {
        let topology = benchmark_topology();
        assert_eq!(topology.neighbors(4), vec![(0, 1.0), (1, 1.0), (2, 1.0), (3, 1.0)]);
        assert_eq!(topology.neighbors(1), vec![(0, 1.0), (4, 1.0), (5, 1.0)]);
    }
}
