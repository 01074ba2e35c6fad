use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Location, Point, RegionShape};
use crate::graph::RegionSet;

/// Regular lattice of prediction points over the study area.
#[derive(Debug, Clone)]
pub struct Grid {
    pub spacing: f64,
    pub points: Vec<Point>,
    /// Canonical region index containing each point, if any.
    pub region_assignment: Vec<Option<usize>>,
    /// Centroid per region, used when a region receives no grid point.
    pub centroids: Vec<Point>,
    pub bbox: BoundingBox,
}

impl Grid {
    pub fn points_in(&self, region: usize) -> impl Iterator<Item = usize> + '_ {
        self.region_assignment
            .iter()
            .enumerate()
            .filter(move |(_, a)| **a == Some(region))
            .map(|(k, _)| k)
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.centroids.len()];
        for r in self.region_assignment.iter().flatten() {
            c[*r] += 1;
        }
        c
    }
}

/// Orders shapes by canonical region index; every region needs a shape.
pub fn shapes_by_index<'a>(regions: &RegionSet, shapes: &'a [RegionShape]) -> Result<Vec<&'a RegionShape>> {
    let mut out: Vec<Option<&RegionShape>> = vec![None; regions.len()];
    for s in shapes {
        let i = regions
            .index_of(&s.id)
            .ok_or_else(|| Error::UnknownRegion(s.id.clone()))?;
        out[i] = Some(s);
    }
    out.into_iter()
        .enumerate()
        .map(|(i, s)| s.ok_or_else(|| Error::Mismatch(format!("region `{}` has no polygon", regions.get(i).id))))
        .collect()
}

/// Assigns a point to the first (smallest-id) region containing it,
/// boundaries included.
pub fn assign_point(shapes: &[&RegionShape], p: Point) -> Option<usize> {
    shapes
        .iter()
        .position(|s| s.bbox().contains(p) && s.locate(p) != Location::Outside)
}

/// Cell-centred lattice anchored at the bounding-box minimum corner: points
/// at `min + (k + ½)·spacing` inside the box.
pub fn make_grid(regions: &RegionSet, shapes: &[RegionShape], spacing_km: f64) -> Result<Grid> {
    if !(spacing_km > 0.0 && spacing_km.is_finite()) {
        return Err(Error::OutOfRange(format!(
            "grid spacing must be positive, got {spacing_km}"
        )));
    }
    let ordered = shapes_by_index(regions, shapes)?;
    for s in &ordered {
        s.validate()?;
    }
    let mut bbox = BoundingBox::empty();
    for s in &ordered {
        bbox.merge(&s.bbox());
    }
    let mut points = Vec::new();
    let mut assignment = Vec::new();
    let mut y = bbox.min[1] + 0.5 * spacing_km;
    while y < bbox.max[1] {
        let mut x = bbox.min[0] + 0.5 * spacing_km;
        while x < bbox.max[0] {
            points.push([x, y]);
            assignment.push(assign_point(&ordered, [x, y]));
            x += spacing_km;
        }
        y += spacing_km;
    }
    Ok(Grid {
        spacing: spacing_km,
        points,
        region_assignment: assignment,
        centroids: ordered.iter().map(|s| s.centroid()).collect(),
        bbox,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArealValue {
    pub value: f64,
    /// True when the region had no grid point and the centroid estimate was used.
    pub centroid_fallback: bool,
}

/// Unweighted mean of the grid estimates falling in each region. Regions
/// without grid points take `centroid_estimate(region, centroid)`.
pub fn areal_average<F>(estimates: &[f64], grid: &Grid, mut centroid_estimate: F) -> Vec<ArealValue>
where
    F: FnMut(usize, Point) -> f64,
{
    assert_eq!(estimates.len(), grid.points.len(), "one estimate per grid point");
    let n = grid.centroids.len();
    let mut sum = vec![0.0; n];
    let mut count = vec![0usize; n];
    for (k, a) in grid.region_assignment.iter().enumerate() {
        if let Some(r) = a {
            sum[*r] += estimates[k];
            count[*r] += 1;
        }
    }
    (0..n)
        .map(|r| {
            if count[r] > 0 {
                ArealValue {
                    value: sum[r] / count[r] as f64,
                    centroid_fallback: false,
                }
            } else {
                ArealValue {
                    value: centroid_estimate(r, grid.centroids[r]),
                    centroid_fallback: true,
                }
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;
    use crate::graph::Region;

    fn regions(ids: &[&str]) -> RegionSet {
        RegionSet::new(
            ids.iter()
                .map(|id| Region {
                    id: id.to_string(),
                    name: id.to_string(),
                    population: 1.0,
                    area_km2: None,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn square_with_spacing_fifty_has_four_points() {
        let rs = regions(&["a"]);
        let shapes = vec![RegionShape::new(
            "a",
            vec![Polygon::rectangle([0.0, 0.0], [100.0, 100.0])],
        )];
        let g = make_grid(&rs, &shapes, 50.0).unwrap();
        assert_eq!(g.points, vec![[25.0, 25.0], [75.0, 25.0], [25.0, 75.0], [75.0, 75.0]]);
        assert!(g.region_assignment.iter().all(|a| *a == Some(0)));
    }

    #[test]
    fn shared_boundary_goes_to_smaller_id() {
        let rs = regions(&["a", "b"]);
        let shapes = vec![
            RegionShape::new("b", vec![Polygon::rectangle([10.0, 0.0], [20.0, 10.0])]),
            RegionShape::new("a", vec![Polygon::rectangle([0.0, 0.0], [10.0, 10.0])]),
        ];
        let ordered = shapes_by_index(&rs, &shapes).unwrap();
        assert_eq!(assign_point(&ordered, [10.0, 5.0]), Some(0));
        assert_eq!(assign_point(&ordered, [15.0, 5.0]), Some(1));
        assert_eq!(assign_point(&ordered, [25.0, 5.0]), None);
    }

    #[test]
    fn bad_spacing_and_degenerate_polygons() {
        let rs = regions(&["a"]);
        let shapes = vec![RegionShape::new("a", vec![Polygon::rectangle([0.0, 0.0], [1.0, 1.0])])];
        assert!(make_grid(&rs, &shapes, 0.0).is_err());
        let flat = vec![RegionShape::new("a", vec![Polygon::rectangle([0.0, 0.0], [1.0, 0.0])])];
        assert!(matches!(make_grid(&rs, &flat, 1.0), Err(Error::DegeneratePolygon(_))));
    }

    #[test]
    fn averages_and_fallback() {
        let rs = regions(&["a", "b"]);
        let shapes = vec![
            RegionShape::new("a", vec![Polygon::rectangle([0.0, 0.0], [30.0, 10.0])]),
            RegionShape::new("b", vec![Polygon::rectangle([30.0, 0.0], [32.0, 2.0])]),
        ];
        let g = make_grid(&rs, &shapes, 10.0).unwrap();
        assert_eq!(g.counts(), vec![3, 0]);
        let est = vec![1.0, 2.0, 3.0, 9.0];
        let mut calls = 0;
        let out = areal_average(&est[..g.points.len()], &g, |r, c| {
            calls += 1;
            assert_eq!(r, 1);
            assert_eq!(c, [31.0, 1.0]);
            42.0
        });
        assert_eq!(calls, 1);
        assert_eq!(
            out[0],
            ArealValue {
                value: 2.0,
                centroid_fallback: false
            }
        );
        assert_eq!(
            out[1],
            ArealValue {
                value: 42.0,
                centroid_fallback: true
            }
        );
    }
}
