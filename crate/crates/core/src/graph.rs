//! Areal units and their contiguity structure.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::RegionShape;
use crate::gmrf::{StructureKind, StructureMatrix};
use crate::scalar::Scalar;
use crate::sparse::CsrMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub id: String,
    pub name: String,
    pub population: f64,
    /// Surface in km², used for population density when polygons are absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub area_km2: Option<f64>,
}

/// Regions in canonical order: lexicographic by id, fixed at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionSet {
    regions: Vec<Region>,
    index: BTreeMap<String, usize>,
}

impl RegionSet {
    pub fn new(mut regions: Vec<Region>) -> Result<Self> {
        regions.sort_by(|a, b| a.id.cmp(&b.id));
        let mut index = BTreeMap::new();
        for (i, r) in regions.iter().enumerate() {
            if !(r.population > 0.0 && r.population.is_finite()) {
                return Err(Error::InvalidPopulation {
                    id: r.id.clone(),
                    population: r.population,
                });
            }
            if index.insert(r.id.clone(), i).is_some() {
                return Err(Error::DuplicateRegion(r.id.clone()));
            }
        }
        Ok(Self { regions, index })
    }

    /// Reads a CSV with header `id,name,population` and an optional
    /// `area_km2` column.
    pub fn from_csv_reader<R: std::io::Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let regions = rdr
            .deserialize::<Region>()
            .collect::<std::result::Result<Vec<_>, _>>()?;
        Self::new(regions)
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_csv_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let with_area = self.regions.iter().any(|r| r.area_km2.is_some());
        if with_area {
            w.write_record(["id", "name", "population", "area_km2"])?;
        } else {
            w.write_record(["id", "name", "population"])?;
        }
        for r in &self.regions {
            let mut rec = vec![r.id.clone(), r.name.clone(), r.population.to_string()];
            if with_area {
                rec.push(r.area_km2.map(|a| a.to_string()).unwrap_or_default());
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.regions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn get(&self, i: usize) -> &Region {
        &self.regions[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Region> {
        self.regions.iter()
    }

    pub fn ids(&self) -> Vec<String> {
        self.regions.iter().map(|r| r.id.clone()).collect()
    }

    pub fn populations(&self) -> Vec<f64> {
        self.regions.iter().map(|r| r.population).collect()
    }
}

/// Undirected contiguity graph over the canonical region indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AdjacencyGraph {
    neighbors: Vec<Vec<usize>>,
}

impl AdjacencyGraph {
    /// Builds a graph from index pairs. Duplicate pairs (in either
    /// orientation) are merged; self-loops are rejected.
    pub fn from_index_pairs(n: usize, pairs: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut sets = vec![BTreeSet::new(); n];
        for (a, b) in pairs {
            if a >= n || b >= n {
                return Err(Error::UnknownRegion(format!("index {}", a.max(b))));
            }
            if a == b {
                return Err(Error::Mismatch(format!("self-loop on region index {a}")));
            }
            sets[a].insert(b);
            sets[b].insert(a);
        }
        Ok(Self {
            neighbors: sets.into_iter().map(|s| s.into_iter().collect()).collect(),
        })
    }

    pub fn n(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    /// `N_i` for every region.
    pub fn neighbor_counts(&self) -> Vec<usize> {
        self.neighbors.iter().map(Vec::len).collect()
    }

    /// Each undirected edge once, as `(i, j)` with `i < j`.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        self.neighbors
            .iter()
            .enumerate()
            .flat_map(|(i, ns)| ns.iter().filter(move |&&j| j > i).map(move |&j| (i, j)))
            .collect()
    }

    pub fn isolated(&self) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.neighbors[i].is_empty()).collect()
    }

    /// Connected-component label per region (labels in order of first
    /// appearance) and the number of components.
    pub fn components(&self) -> (Vec<usize>, usize) {
        let n = self.n();
        let mut label = vec![usize::MAX; n];
        let mut count = 0;
        for start in 0..n {
            if label[start] != usize::MAX {
                continue;
            }
            let mut stack = vec![start];
            label[start] = count;
            while let Some(i) = stack.pop() {
                for &j in &self.neighbors[i] {
                    if label[j] == usize::MAX {
                        label[j] = count;
                        stack.push(j);
                    }
                }
            }
            count += 1;
        }
        (label, count)
    }

    pub fn adjacency_dense<T: Scalar>(&self) -> DMatrix<T> {
        let n = self.n();
        let mut a = DMatrix::zeros(n, n);
        for (i, j) in self.edges() {
            a[(i, j)] = T::one();
            a[(j, i)] = T::one();
        }
        a
    }
}

/// Builds the contiguity graph from region ids. Every id must belong to the
/// region set; isolated regions are accepted with a warning.
pub fn build_adjacency<S: AsRef<str>>(regions: &RegionSet, pairs: &[(S, S)]) -> Result<AdjacencyGraph> {
    let idx = |id: &str| regions.index_of(id).ok_or_else(|| Error::UnknownRegion(id.to_string()));
    let index_pairs = pairs
        .iter()
        .map(|(a, b)| Ok((idx(a.as_ref())?, idx(b.as_ref())?)))
        .collect::<Result<Vec<_>>>()?;
    let graph = AdjacencyGraph::from_index_pairs(regions.len(), index_pairs)?;
    for i in graph.isolated() {
        warn!("region `{}` has no neighbours", regions.get(i).id);
    }
    Ok(graph)
}

#[derive(Debug, Deserialize)]
struct NeighborRow {
    id_a: String,
    id_b: String,
}

/// Reads a neighbour file (CSV header `id_a,id_b`) as id pairs.
pub fn read_neighbor_pairs(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    rdr.deserialize::<NeighborRow>()
        .map(|r| r.map(|r| (r.id_a, r.id_b)).map_err(Error::from))
        .collect()
}

pub fn write_neighbor_pairs(path: impl AsRef<Path>, regions: &RegionSet, graph: &AdjacencyGraph) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["id_a", "id_b"])?;
    for (i, j) in graph.edges() {
        w.write_record([&regions.get(i).id, &regions.get(j).id])?;
    }
    w.flush()?;
    Ok(())
}

/// Derives contiguity from polygons: two regions are neighbours when they
/// share at least one vertex (within `tol` km).
pub fn adjacency_from_polygons(regions: &RegionSet, shapes: &[RegionShape], tol: f64) -> Result<AdjacencyGraph> {
    let mut by_index: Vec<Option<&RegionShape>> = vec![None; regions.len()];
    for s in shapes {
        let i = regions
            .index_of(&s.id)
            .ok_or_else(|| Error::UnknownRegion(s.id.clone()))?;
        by_index[i] = Some(s);
    }
    let cell = tol.max(1e-12);
    let key = |p: [f64; 2]| ((p[0] / cell).round() as i64, (p[1] / cell).round() as i64);
    let mut owners: BTreeMap<(i64, i64), BTreeSet<usize>> = BTreeMap::new();
    for (i, shape) in by_index.iter().enumerate() {
        let Some(shape) = shape else { continue };
        for v in shape.vertices() {
            let (kx, ky) = key(v);
            // Neighbouring hash cells catch vertices that straddle a cell edge.
            for dx in -1..=1 {
                for dy in -1..=1 {
                    owners.entry((kx + dx, ky + dy)).or_default().insert(i);
                }
            }
        }
    }
    let mut pairs = BTreeSet::new();
    for (i, shape) in by_index.iter().enumerate() {
        let Some(shape) = shape else { continue };
        for v in shape.vertices() {
            if let Some(set) = owners.get(&key(v)) {
                for &j in set {
                    if j == i || pairs.contains(&(i.min(j), i.max(j))) {
                        continue;
                    }
                    let close = by_index[j]
                        .is_some_and(|other| other.vertices().any(|w| (w[0] - v[0]).hypot(w[1] - v[1]) <= tol));
                    if close {
                        pairs.insert((i.min(j), i.max(j)));
                    }
                }
            }
        }
    }
    AdjacencyGraph::from_index_pairs(regions.len(), pairs)
}

/// Row-standardised neighbourhood weights: `w_ij = 1/N_i` for neighbours.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsMatrix<T> {
    pub matrix: CsrMatrix<T>,
}

pub fn row_standardize<T: Scalar>(graph: &AdjacencyGraph) -> WeightsMatrix<T> {
    let mut triplets = Vec::new();
    for i in 0..graph.n() {
        let ns = graph.neighbors(i);
        if ns.is_empty() {
            continue;
        }
        let w = T::one() / T::from_usize_lossy(ns.len());
        triplets.extend(ns.iter().map(|&j| (i, j, w)));
    }
    WeightsMatrix {
        matrix: CsrMatrix::from_triplets(graph.n(), triplets),
    }
}

/// ICAR structure `R_s = diag(N) − A`. The null space is spanned by the
/// normalised indicator vectors of the connected components.
pub fn icar_structure<T: Scalar>(graph: &AdjacencyGraph) -> Result<StructureMatrix<T>> {
    let n = graph.n();
    let mut triplets = Vec::new();
    for i in 0..n {
        let ns = graph.neighbors(i);
        if !ns.is_empty() {
            triplets.push((i, i, T::from_usize_lossy(ns.len())));
        }
        triplets.extend(ns.iter().map(|&j| (i, j, -T::one())));
    }
    let (labels, count) = graph.components();
    let mut null_basis = DMatrix::zeros(n, count);
    let mut sizes = vec![0usize; count];
    for &c in &labels {
        sizes[c] += 1;
    }
    for (i, &c) in labels.iter().enumerate() {
        null_basis[(i, c)] = T::one() / T::from_usize_lossy(sizes[c]).sqrt();
    }
    StructureMatrix::new(StructureKind::Icar, CsrMatrix::from_triplets(n, triplets), null_basis)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn regions(n: usize) -> RegionSet {
        RegionSet::new(
            (0..n)
                .map(|i| Region {
                    id: format!("r{i}"),
                    name: format!("Region {i}"),
                    population: 1000.0,
                    area_km2: None,
                })
                .collect(),
        )
        .unwrap()
    }

    fn path3() -> AdjacencyGraph {
        AdjacencyGraph::from_index_pairs(3, [(0, 1), (1, 2)]).unwrap()
    }

    #[test]
    fn path_and_star_degrees() {
        assert_eq!(path3().neighbor_counts(), vec![1, 2, 1]);
        let star = AdjacencyGraph::from_index_pairs(4, [(0, 1), (0, 2), (0, 3)]).unwrap();
        assert_eq!(star.neighbor_counts(), vec![3, 1, 1, 1]);
    }

    #[test]
    fn duplicates_are_merged_and_unknown_ids_rejected() {
        let rs = regions(3);
        let g = build_adjacency(&rs, &[("r0", "r1"), ("r1", "r0"), ("r1", "r2")]).unwrap();
        assert_eq!(g.neighbor_counts(), vec![1, 2, 1]);
        let err = build_adjacency(&rs, &[("r0", "nope")]).unwrap_err();
        assert!(matches!(err, Error::UnknownRegion(id) if id == "nope"));
    }

    #[test]
    fn canonical_order_is_lexicographic() {
        let rs = RegionSet::new(vec![
            Region {
                id: "b".into(),
                name: "B".into(),
                population: 1.0,
                area_km2: None,
            },
            Region {
                id: "a".into(),
                name: "A".into(),
                population: 2.0,
                area_km2: None,
            },
        ])
        .unwrap();
        assert_eq!(rs.ids(), vec!["a", "b"]);
        assert_eq!(rs.index_of("b"), Some(1));
    }

    #[test]
    fn invalid_regions_rejected() {
        let bad = RegionSet::new(vec![Region {
            id: "a".into(),
            name: "A".into(),
            population: 0.0,
            area_km2: None,
        }]);
        assert!(matches!(bad, Err(Error::InvalidPopulation { .. })));
        let dup = RegionSet::new(vec![
            Region {
                id: "a".into(),
                name: "A".into(),
                population: 1.0,
                area_km2: None,
            },
            Region {
                id: "a".into(),
                name: "A2".into(),
                population: 1.0,
                area_km2: None,
            },
        ]);
        assert!(matches!(dup, Err(Error::DuplicateRegion(_))));
    }

    #[test]
    fn row_standardized_weights() {
        let w = row_standardize::<f64>(&path3()).matrix.to_dense();
        assert_eq!(w.row(1).iter().copied().collect::<Vec<_>>(), vec![0.5, 0.0, 0.5]);
        let star = AdjacencyGraph::from_index_pairs(4, [(0, 1), (0, 2), (0, 3)]).unwrap();
        let w = row_standardize::<f64>(&star).matrix.to_dense();
        let third = 1.0 / 3.0;
        assert_eq!(
            w.row(0).iter().copied().collect::<Vec<_>>(),
            vec![0.0, third, third, third]
        );
        let single = AdjacencyGraph::from_index_pairs(1, []).unwrap();
        assert_eq!(row_standardize::<f64>(&single).matrix.to_dense(), DMatrix::zeros(1, 1));
    }

    #[test]
    fn icar_path_graph() {
        let r = icar_structure::<f64>(&path3()).unwrap();
        let expected = DMatrix::from_row_slice(3, 3, &[1.0, -1.0, 0.0, -1.0, 2.0, -1.0, 0.0, -1.0, 1.0]);
        assert_eq!(r.matrix().to_dense(), expected);
        assert_eq!(r.rank(), 2);
    }

    #[test]
    fn icar_two_components() {
        let g = AdjacencyGraph::from_index_pairs(4, [(0, 1), (2, 3)]).unwrap();
        let r = icar_structure::<f64>(&g).unwrap();
        assert_eq!(r.rank(), 2);
        assert_eq!(r.rank_deficiency(), 2);
    }

    #[test]
    fn isolated_region_gets_zero_row_and_own_null_vector() {
        let g = AdjacencyGraph::from_index_pairs(3, [(0, 1)]).unwrap();
        assert_eq!(g.isolated(), vec![2]);
        let r = icar_structure::<f64>(&g).unwrap();
        assert_eq!(r.rank_deficiency(), 2);
        assert!(r.matrix().row(2).next().is_none());
    }

    #[test]
    fn structure_equals_degree_times_identity_minus_weights() {
        let g = AdjacencyGraph::from_index_pairs(5, [(0, 1), (1, 2), (2, 3), (3, 0), (0, 2)]).unwrap();
        let r = icar_structure::<f64>(&g).unwrap().matrix().to_dense();
        let w = row_standardize::<f64>(&g).matrix.to_dense();
        let counts = g.neighbor_counts();
        for i in 0..5 {
            if counts[i] == 0 {
                continue;
            }
            for j in 0..5 {
                let id = if i == j { 1.0 } else { 0.0 };
                let v = counts[i] as f64 * (id - w[(i, j)]);
                assert!((v - r[(i, j)]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn shared_vertex_contiguity() {
        use crate::geometry::Polygon;
        let rs = regions(3);
        let shapes = vec![
            RegionShape::new("r0", vec![Polygon::rectangle([0.0, 0.0], [1.0, 1.0])]),
            RegionShape::new("r1", vec![Polygon::rectangle([1.0, 0.0], [2.0, 1.0])]),
            RegionShape::new("r2", vec![Polygon::rectangle([5.0, 5.0], [6.0, 6.0])]),
        ];
        let g = adjacency_from_polygons(&rs, &shapes, 1e-6).unwrap();
        assert_eq!(g.edges(), vec![(0, 1)]);
    }
}
