use diseasemap::gmrf::{constraint_set, iid_structure, interaction_structure, rw2_structure, InteractionKind};
use diseasemap::graph::{icar_structure, AdjacencyGraph};
use diseasemap::synth;
use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;

/// Ring graph with a chord, so every size has a nontrivial structure.
fn graph(n: usize) -> AdjacencyGraph {
    let mut pairs: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    if n > 3 {
        pairs.push((0, 2));
    }
    AdjacencyGraph::from_index_pairs(n, pairs).unwrap()
}

fn numerical_rank(m: &DMatrix<f64>) -> usize {
    let eig = SymmetricEigen::new(m.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    eig.eigenvalues.iter().filter(|v| v.abs() > 1e-8 * max).count()
}

#[test]
fn dense_kronecker_brute_force() {
    for n in 3..=5 {
        for t in 3..=5 {
            let rs = icar_structure::<f64>(&graph(n)).unwrap();
            let rt = rw2_structure::<f64>(t).unwrap();
            for kind in InteractionKind::ALL {
                let s = if kind.structured_space() {
                    rs.matrix().to_dense()
                } else {
                    DMatrix::identity(n, n)
                };
                let tm = if kind.structured_time() {
                    rt.matrix().to_dense()
                } else {
                    DMatrix::identity(t, t)
                };
                let expected = s.kronecker(&tm);
                let got = interaction_structure(kind, &rs, &rt).unwrap();
                let dense = got.matrix().to_dense();
                let scale = expected.amax().max(1.0);
                assert!((&dense - &expected).amax() <= 1e-8 * scale, "({n},{t}) {kind}");
                let nullity = n * t - numerical_rank(&s) * numerical_rank(&tm);
                assert_eq!(got.rank_deficiency(), nullity, "({n},{t}) {kind}");
                assert_eq!(n * t - numerical_rank(&dense), nullity);
                let a = constraint_set(&got);
                assert_eq!(a.len(), nullity);
            }
        }
    }
}

#[test]
fn kronecker_vec_identity() {
    let mut rng = synth::rng(2);
    for (n, t) in [(3, 4), (5, 3), (4, 5)] {
        let rs = icar_structure::<f64>(&graph(n)).unwrap();
        let rt = rw2_structure::<f64>(t).unwrap();
        let q = interaction_structure(InteractionKind::IV, &rs, &rt).unwrap();
        let x = DMatrix::<f64>::from_fn(n, t, |_, _| rng.random_range(-1.0..1.0));
        // Time-fastest layout: entry (i, t) sits at i·T + t.
        let flat: Vec<f64> = (0..n)
            .flat_map(|i| (0..t).map(move |s| (i, s)))
            .map(|(i, s)| x[(i, s)])
            .collect();
        let lhs = q.matrix().mul_vec(&flat);
        let rhs = rs.matrix().to_dense() * &x * rt.matrix().to_dense().transpose();
        for i in 0..n {
            for s in 0..t {
                assert!((lhs[i * t + s] - rhs[(i, s)]).abs() < 1e-10);
            }
        }
    }
}

#[test]
fn icar_rows_sum_to_zero_and_rw2_kills_lines() {
    for n in 3..=8 {
        let r = icar_structure::<f64>(&graph(n)).unwrap();
        let ones = vec![1.0; n];
        assert!(r.matrix().mul_vec(&ones).iter().all(|v| v.abs() < 1e-12));
        let rw = rw2_structure::<f64>(n).unwrap();
        let line: Vec<f64> = (0..n).map(|t| 2.5 - 0.7 * t as f64).collect();
        assert!(rw.matrix().mul_vec(&line).iter().all(|v| v.abs() < 1e-10));
        assert_eq!(rw.rank_deficiency(), 2);
        assert_eq!(iid_structure::<f64>(n).unwrap().rank_deficiency(), 0);
    }
}

#[test]
fn disconnected_graph_has_one_null_vector_per_component() {
    let g = AdjacencyGraph::from_index_pairs(5, [(0, 1), (1, 2), (3, 4)]).unwrap();
    let r = icar_structure::<f64>(&g).unwrap();
    assert_eq!(r.rank_deficiency(), 2);
    assert_eq!(numerical_rank(&r.matrix().to_dense()), 3);
}
