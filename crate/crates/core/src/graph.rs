//! Skeleton graphs and the dense matrices derived from them: adjacency,
//! degree, normalized adjacency/Laplacian, the symmetrically modulated
//! adjacency and its hop powers.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::scalar::Scalar;

const H36M17: &str = include_str!("../data/h36m17.json");
const H36M16: &str = include_str!("../data/h36m16.json");

/// Undirected skeleton graph: joints, bones, root joint and left/right pairs.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkeletonTopology {
    #[serde(rename = "joints")]
    pub joint_names: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    pub root: usize,
    #[serde(default)]
    pub flip_pairs: Vec<(usize, usize)>,
}

impl SkeletonTopology {
    /// Validates and returns the topology.
    pub fn new(
        joint_names: Vec<String>,
        edges: Vec<(usize, usize)>,
        root: usize,
        flip_pairs: Vec<(usize, usize)>,
    ) -> Result<Self> {
        let topology = Self {
            joint_names,
            edges,
            root,
            flip_pairs,
        };
        topology.validate()?;
        Ok(topology)
    }

    /// Unnamed topology with joints `j0..j{n-1}`; mostly for tests and random graphs.
    pub fn from_edges(n: usize, edges: Vec<(usize, usize)>) -> Result<Self> {
        Self::new(
            (0..n).map(|i| format!("j{i}")).collect(),
            edges,
            0,
            Vec::new(),
        )
    }

    /// Path graph on `n` nodes.
    pub fn path(n: usize) -> Result<Self> {
        Self::from_edges(n, (1..n).map(|i| (i - 1, i)).collect())
    }

    /// The 17-joint Human3.6M-style skeleton.
    pub fn h36m17() -> Self {
        serde_json::from_str::<Self>(H36M17)
            .expect("bundled skeleton parses")
            .validated()
            .expect("bundled skeleton is valid")
    }

    /// The 16-joint variant without the neck/nose joint.
    pub fn h36m16() -> Self {
        serde_json::from_str::<Self>(H36M16)
            .expect("bundled skeleton parses")
            .validated()
            .expect("bundled skeleton is valid")
    }

    /// Bundled skeleton with the given joint count, if there is one.
    pub fn builtin(num_joints: usize) -> Option<Self> {
        match num_joints {
            16 => Some(Self::h36m16()),
            17 => Some(Self::h36m17()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str::<Self>(text)?.validated()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    fn validated(self) -> Result<Self> {
        self.validate()?;
        Ok(self)
    }

    pub fn num_joints(&self) -> usize {
        self.joint_names.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.num_joints();
        if n == 0 {
            return Err(Error::Topology("skeleton has no joints".into()));
        }
        if self.root >= n {
            return Err(Error::Topology(format!(
                "root {} out of range for {n} joints",
                self.root
            )));
        }
        let mut seen = BTreeSet::new();
        for &(i, j) in &self.edges {
            if i >= n || j >= n {
                return Err(Error::Topology(format!(
                    "edge ({i}, {j}) out of range for {n} joints"
                )));
            }
            if i == j {
                return Err(Error::Topology(format!("self-loop edge at joint {i}")));
            }
            if !seen.insert((i.min(j), i.max(j))) {
                return Err(Error::Topology(format!("duplicate edge ({i}, {j})")));
            }
        }
        let mut paired = BTreeSet::new();
        for &(l, r) in &self.flip_pairs {
            if l >= n || r >= n {
                return Err(Error::Topology(format!(
                    "flip pair ({l}, {r}) out of range"
                )));
            }
            if l == r || !paired.insert(l) || !paired.insert(r) {
                return Err(Error::Topology(format!(
                    "flip pairs are not an involution (joint {l} or {r} repeated)"
                )));
            }
        }
        self.check_connected()
    }

    fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut nbrs = vec![Vec::new(); self.num_joints()];
        for &(i, j) in &self.edges {
            nbrs[i].push(j);
            nbrs[j].push(i);
        }
        nbrs
    }

    fn check_connected(&self) -> Result<()> {
        let n = self.num_joints();
        let nbrs = self.neighbors();
        let mut reached = vec![false; n];
        let mut queue = VecDeque::from([self.root]);
        reached[self.root] = true;
        while let Some(u) = queue.pop_front() {
            for &v in &nbrs[u] {
                if !reached[v] {
                    reached[v] = true;
                    queue.push_back(v);
                }
            }
        }
        let stranded: Vec<&str> = (0..n)
            .filter(|&i| !reached[i])
            .map(|i| self.joint_names[i].as_str())
            .collect();
        if stranded.is_empty() {
            Ok(())
        } else {
            Err(Error::Topology(format!(
                "graph is disconnected; joints unreachable from root '{}': {}",
                self.joint_names[self.root],
                stranded.join(", ")
            )))
        }
    }

    /// Index map applied by a horizontal flip (left/right swap).
    pub fn flip_permutation(&self) -> Vec<usize> {
        let mut perm: Vec<usize> = (0..self.num_joints()).collect();
        for &(l, r) in &self.flip_pairs {
            perm[l] = r;
            perm[r] = l;
        }
        perm
    }

    /// Relabels joints so that old joint `i` becomes `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let n = self.num_joints();
        let mut names = vec![String::new(); n];
        for (i, name) in self.joint_names.iter().enumerate() {
            names[perm[i]] = name.clone();
        }
        Self::new(
            names,
            self.edges
                .iter()
                .map(|&(i, j)| (perm[i], perm[j]))
                .collect(),
            perm[self.root],
            self.flip_pairs
                .iter()
                .map(|&(l, r)| (perm[l], perm[r]))
                .collect(),
        )
    }
}

/// Binary symmetric adjacency with zero diagonal.
pub fn build_adjacency<T: Scalar>(topology: &SkeletonTopology) -> Result<Matrix<T>> {
    topology.validate()?;
    let n = topology.num_joints();
    let mut a = Matrix::zeros(n, n);
    for &(i, j) in &topology.edges {
        a[(i, j)] = T::one();
        a[(j, i)] = T::one();
    }
    Ok(a)
}

/// Returns `(Â, L)` with `Â = D^(-1/2) A D^(-1/2)` and `L = I − Â`.
pub fn normalize_adjacency<T: Scalar>(a: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    a.require_square("normalize_adjacency")?;
    let asym = a.asymmetry()?;
    if asym > T::symmetry_tol() {
        return Err(Error::NotSymmetric(asym.to_f64_lossy()));
    }
    let n = a.rows();
    let mut inv_sqrt = Vec::with_capacity(n);
    for i in 0..n {
        let d = a.row(i).iter().fold(T::zero(), |s, &x| s + x);
        if d <= T::zero() {
            return Err(Error::ZeroDegree(i));
        }
        inv_sqrt.push(d.sqrt().recip());
    }
    let a_hat = Matrix::from_fn(n, n, |i, j| inv_sqrt[i] * a[(i, j)] * inv_sqrt[j]);
    let lap = Matrix::from_fn(n, n, |i, j| {
        let delta = if i == j { T::one() } else { T::zero() };
        delta - a_hat[(i, j)]
    });
    Ok((a_hat, lap))
}

/// `Ǎ = Â + (Q + Qᵀ)/2`.
pub fn modulate_adjacency<T: Scalar>(a_hat: &Matrix<T>, q: &Matrix<T>) -> Result<Matrix<T>> {
    a_hat.check_same_shape("modulate_adjacency", q)?;
    a_hat.require_square("modulate_adjacency")?;
    let half = T::of(0.5);
    let n = a_hat.rows();
    Ok(Matrix::from_fn(n, n, |i, j| {
        a_hat[(i, j)] + half * (q[(i, j)] + q[(j, i)])
    }))
}

/// `[Ǎ¹, …, Ǎᴷ]` by repeated dense products.
pub fn hop_powers<T: Scalar>(a_check: &Matrix<T>, k: usize) -> Result<Vec<Matrix<T>>> {
    if k == 0 {
        return Err(Error::InvalidArgument(
            "hop count K must be at least 1".into(),
        ));
    }
    a_check.require_square("hop_powers")?;
    let mut powers = Vec::with_capacity(k);
    powers.push(a_check.clone());
    for _ in 1..k {
        let next = a_check.matmul(powers.last().expect("nonempty"))?;
        powers.push(next);
    }
    Ok(powers)
}

/// Splits a square matrix into its diagonal and off-diagonal parts.
pub fn decouple_self_connections<T: Scalar>(m: &Matrix<T>) -> Result<(Matrix<T>, Matrix<T>)> {
    m.require_square("decouple_self_connections")?;
    let n = m.rows();
    let diag = Matrix::from_fn(n, n, |i, j| if i == j { m[(i, j)] } else { T::zero() });
    let off = Matrix::from_fn(n, n, |i, j| if i == j { T::zero() } else { m[(i, j)] });
    Ok((diag, off))
}

/// Adjacency-modulation matrix drawn uniformly from `[-0.01, 0.01]`.
pub fn init_adjacency_modulation<T: Scalar, R: Rng + ?Sized>(n: usize, rng: &mut R) -> Matrix<T> {
    Matrix::from_fn(n, n, |_, _| T::of(rng.random_range(-0.01..=0.01)))
}

/// Every matrix derived from a skeleton, for a fixed modulation `Q`.
#[derive(Clone, Debug)]
pub struct GraphMatrices<T> {
    pub adjacency: Matrix<T>,
    pub degree: Matrix<T>,
    pub normalized_adjacency: Matrix<T>,
    pub normalized_laplacian: Matrix<T>,
    pub modulated_adjacency: Matrix<T>,
    pub hop_powers: Vec<Matrix<T>>,
}

impl<T: Scalar> GraphMatrices<T> {
    /// Builds all matrices; `q = None` means no adjacency modulation.
    pub fn new(topology: &SkeletonTopology, q: Option<&Matrix<T>>, hops: usize) -> Result<Self> {
        let adjacency = build_adjacency::<T>(topology)?;
        let n = adjacency.rows();
        let degrees: Vec<T> = (0..n)
            .map(|i| adjacency.row(i).iter().fold(T::zero(), |s, &x| s + x))
            .collect();
        let (normalized_adjacency, normalized_laplacian) = normalize_adjacency(&adjacency)?;
        let modulated_adjacency = match q {
            Some(q) => modulate_adjacency(&normalized_adjacency, q)?,
            None => normalized_adjacency.clone(),
        };
        let hop_powers = hop_powers(&modulated_adjacency, hops)?;
        Ok(Self {
            degree: Matrix::from_diag(&degrees),
            adjacency,
            normalized_adjacency,
            normalized_laplacian,
            modulated_adjacency,
            hop_powers,
        })
    }

    pub fn num_joints(&self) -> usize {
        self.adjacency.rows()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn p3() -> SkeletonTopology {
        SkeletonTopology::path(3).unwrap()
    }

    #[test]
    fn p3_adjacency() {
        let a = build_adjacency::<f64>(&p3()).unwrap();
        assert_eq!(
            a,
            Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 1.0], [0.0, 1.0, 0.0]])
        );
    }

    #[test]
    fn h36m17_adjacency_counts() {
        let topo = SkeletonTopology::h36m17();
        assert_eq!(topo.edges.len(), 16);
        let a = build_adjacency::<f64>(&topo).unwrap();
        let total: f64 = a.as_slice().iter().sum();
        assert_eq!(total, 32.0);
        let mut degree = vec![0.0; 17];
        for &(i, j) in &topo.edges {
            degree[i] += 1.0;
            degree[j] += 1.0;
        }
        for (i, &d) in degree.iter().enumerate() {
            assert_eq!(a.row(i).iter().sum::<f64>(), d);
        }
    }

    #[test]
    fn h36m16_is_valid_tree() {
        let topo = SkeletonTopology::h36m16();
        assert_eq!(topo.num_joints(), 16);
        assert_eq!(topo.edges.len(), 15);
    }

    #[test]
    fn duplicate_edge_rejected() {
        let err = SkeletonTopology::from_edges(3, vec![(0, 1), (1, 2), (1, 0)]).unwrap_err();
        assert!(err.to_string().contains("duplicate edge"), "{err}");
    }

    #[test]
    fn self_loop_rejected() {
        assert!(SkeletonTopology::from_edges(2, vec![(0, 1), (1, 1)]).is_err());
    }

    #[test]
    fn disconnected_names_isolated_joints() {
        let err = SkeletonTopology::new(
            vec!["a".into(), "b".into(), "c".into(), "d".into()],
            vec![(0, 1), (2, 3)],
            0,
            vec![],
        )
        .unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("disconnected") && msg.contains("c, d"),
            "{msg}"
        );
    }

    #[test]
    fn flip_pairs_must_be_involution() {
        let err = SkeletonTopology::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![(0, 1), (1, 2)],
            1,
            vec![(0, 2), (2, 1)],
        )
        .unwrap_err();
        assert!(err.to_string().contains("involution"));
    }

    #[test]
    fn p3_normalized_entries() {
        let a = build_adjacency::<f64>(&p3()).unwrap();
        let (a_hat, lap) = normalize_adjacency(&a).unwrap();
        assert!((a_hat[(0, 1)] - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((a_hat[(0, 1)] - 0.70710678).abs() < 1e-8);
        assert!(a_hat.asymmetry().unwrap() < 1e-12);
        assert!(lap.asymmetry().unwrap() < 1e-12);
        assert_eq!(lap[(1, 1)], 1.0);
    }

    #[test]
    fn k2_normalized_is_adjacency() {
        let topo = SkeletonTopology::path(2).unwrap();
        let a = build_adjacency::<f64>(&topo).unwrap();
        let (a_hat, _) = normalize_adjacency(&a).unwrap();
        assert_eq!(a_hat, Matrix::from_rows(&[[0.0, 1.0], [1.0, 0.0]]));
    }

    #[test]
    fn zero_degree_rejected() {
        let a = Matrix::from_rows(&[[0.0, 1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]]);
        assert!(matches!(normalize_adjacency(&a), Err(Error::ZeroDegree(2))));
    }

    #[test]
    fn modulation_cases() {
        let a = build_adjacency::<f64>(&p3()).unwrap();
        let (a_hat, _) = normalize_adjacency(&a).unwrap();

        let zero = Matrix::zeros(3, 3);
        assert_eq!(modulate_adjacency(&a_hat, &zero).unwrap(), a_hat);

        let mut q = Matrix::zeros(3, 3);
        q[(0, 2)] = 0.2;
        let m = modulate_adjacency(&a_hat, &q).unwrap();
        assert!((m[(0, 2)] - 0.1).abs() < 1e-15);
        assert!((m[(2, 0)] - 0.1).abs() < 1e-15);

        let anti = Matrix::from_rows(&[[0.0, 0.3, -0.2], [-0.3, 0.0, 0.5], [0.2, -0.5, 0.0]]);
        assert!(
            modulate_adjacency(&a_hat, &anti)
                .unwrap()
                .max_abs_diff(&a_hat)
                .unwrap()
                < 1e-15
        );

        let bad = Matrix::zeros(2, 2);
        assert!(modulate_adjacency(&a_hat, &bad).is_err());
    }

    #[test]
    fn hop_powers_cases() {
        let a = build_adjacency::<f64>(&p3()).unwrap();
        let (a_hat, _) = normalize_adjacency(&a).unwrap();
        let powers = hop_powers(&a_hat, 3).unwrap();
        assert_eq!(powers.len(), 3);
        assert_eq!(powers[0], a_hat);
        assert!((powers[1][(0, 2)] - 0.5).abs() < 1e-15);
        let third = a_hat.matmul(&powers[1]).unwrap();
        assert!(third.max_abs_diff(&powers[2]).unwrap() < 1e-12);
        assert!(hop_powers(&a_hat, 0).is_err());
    }

    #[test]
    fn decoupling_cases() {
        let eye = Matrix::<f64>::identity(4);
        let (d, o) = decouple_self_connections(&eye).unwrap();
        assert_eq!(d, eye);
        assert_eq!(o, Matrix::zeros(4, 4));

        let a = build_adjacency::<f64>(&p3()).unwrap();
        let (a_hat, _) = normalize_adjacency(&a).unwrap();
        let (d, o) = decouple_self_connections(&a_hat).unwrap();
        assert_eq!(d, Matrix::zeros(3, 3));
        assert_eq!(o, a_hat);

        let sq = a_hat.matmul(&a_hat).unwrap();
        let (d, _) = decouple_self_connections(&sq).unwrap();
        for i in 0..3 {
            let row_norm: f64 = a_hat.row(i).iter().map(|x| x * x).sum();
            assert!((d[(i, i)] - row_norm).abs() < 1e-15);
        }
        assert!((d[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((d[(1, 1)] - 1.0).abs() < 1e-15);
        assert!((d[(2, 2)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn topology_json_roundtrip() {
        let topo = SkeletonTopology::h36m17();
        let text = serde_json::to_string(&topo).unwrap();
        assert!(text.contains("\"joints\""));
        assert_eq!(SkeletonTopology::from_json(&text).unwrap(), topo);
    }

    #[test]
    fn graph_matrices_f32() {
        let g = GraphMatrices::<f32>::new(&SkeletonTopology::h36m17(), None, 3).unwrap();
        assert_eq!(g.hop_powers.len(), 3);
        assert_eq!(g.degree[(0, 0)], 3.0);
        assert_eq!(g.degree[(8, 8)], 4.0);
    }
}
