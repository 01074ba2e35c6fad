//! Planar polygon handling for region outlines: GeoJSON ingestion,
//! point-in-polygon classification, areas and centroids.
//!
//! Coordinates are planar kilometres. Geographic projections are not handled.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

pub type Point = [f64; 2];

/// One polygon: an outer ring followed by zero or more holes. Rings are
/// stored open (the closing vertex is dropped).
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    pub rings: Vec<Vec<Point>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Location {
    Inside,
    Boundary,
    Outside,
}

/// Outline of a region, possibly made of several disjoint polygons.
#[derive(Debug, Clone)]
pub struct RegionShape {
    pub id: String,
    pub polygons: Vec<Polygon>,
    /// Original GeoJSON geometry object, kept for re-export.
    pub geometry: Value,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min: Point,
    pub max: Point,
}

impl BoundingBox {
    pub fn empty() -> Self {
        Self {
            min: [f64::INFINITY; 2],
            max: [f64::NEG_INFINITY; 2],
        }
    }

    pub fn include(&mut self, p: Point) {
        for k in 0..2 {
            self.min[k] = self.min[k].min(p[k]);
            self.max[k] = self.max[k].max(p[k]);
        }
    }

    pub fn merge(&mut self, other: &BoundingBox) {
        self.include(other.min);
        self.include(other.max);
    }

    pub fn expanded(&self, by: f64) -> Self {
        Self {
            min: [self.min[0] - by, self.min[1] - by],
            max: [self.max[0] + by, self.max[1] + by],
        }
    }

    pub fn contains(&self, p: Point) -> bool {
        p[0] >= self.min[0] && p[0] <= self.max[0] && p[1] >= self.min[1] && p[1] <= self.max[1]
    }

    fn diameter(&self) -> f64 {
        ((self.max[0] - self.min[0]).powi(2) + (self.max[1] - self.min[1]).powi(2)).sqrt()
    }
}

fn ring_signed_area(ring: &[Point]) -> f64 {
    let n = ring.len();
    let mut a = 0.0;
    for k in 0..n {
        let p = ring[k];
        let q = ring[(k + 1) % n];
        a += p[0] * q[1] - q[0] * p[1];
    }
    0.5 * a
}

fn on_segment(p: Point, a: Point, b: Point, tol: f64) -> bool {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / len2).clamp(0.0, 1.0)
    };
    let cx = a[0] + t * dx - p[0];
    let cy = a[1] + t * dy - p[1];
    (cx * cx + cy * cy).sqrt() <= tol
}

fn ring_crossings(ring: &[Point], p: Point) -> bool {
    let n = ring.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (ring[i], ring[j]);
        if (a[1] > p[1]) != (b[1] > p[1]) {
            let x = (b[0] - a[0]) * (p[1] - a[1]) / (b[1] - a[1]) + a[0];
            if p[0] < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

impl Polygon {
    pub fn new(rings: Vec<Vec<Point>>) -> Self {
        let rings = rings
            .into_iter()
            .map(|mut r| {
                if r.len() > 1 && r.first() == r.last() {
                    r.pop();
                }
                r
            })
            .collect();
        Self { rings }
    }

    /// Axis-aligned rectangle, counter-clockwise.
    pub fn rectangle(min: Point, max: Point) -> Self {
        Self::new(vec![vec![min, [max[0], min[1]], max, [min[0], max[1]]]])
    }

    pub fn area(&self) -> f64 {
        let mut rings = self.rings.iter();
        let outer = rings.next().map(|r| ring_signed_area(r).abs()).unwrap_or(0.0);
        outer - rings.map(|r| ring_signed_area(r).abs()).sum::<f64>()
    }

    pub fn bbox(&self) -> BoundingBox {
        let mut b = BoundingBox::empty();
        for p in self.rings.iter().flatten() {
            b.include(*p);
        }
        b
    }

    pub fn is_degenerate(&self) -> bool {
        match self.rings.first() {
            None => true,
            Some(outer) => outer.len() < 3 || self.area() <= 0.0 || !self.area().is_finite(),
        }
    }

    pub fn locate(&self, p: Point) -> Location {
        let tol = 1e-9 * self.bbox().diameter().max(1.0);
        for ring in &self.rings {
            let n = ring.len();
            for k in 0..n {
                if on_segment(p, ring[k], ring[(k + 1) % n], tol) {
                    return Location::Boundary;
                }
            }
        }
        let mut rings = self.rings.iter();
        let in_outer = rings.next().is_some_and(|r| ring_crossings(r, p));
        if in_outer && !rings.any(|h| ring_crossings(h, p)) {
            Location::Inside
        } else {
            Location::Outside
        }
    }

    /// Area-weighted centroid of the outer ring minus holes.
    pub fn centroid(&self) -> Point {
        let mut cx = 0.0;
        let mut cy = 0.0;
        let mut total = 0.0;
        for (k, ring) in self.rings.iter().enumerate() {
            let a = ring_signed_area(ring);
            let sign = if k == 0 { a.signum() } else { -a.signum() };
            let n = ring.len();
            let (mut rx, mut ry) = (0.0, 0.0);
            for i in 0..n {
                let p = ring[i];
                let q = ring[(i + 1) % n];
                let cross = p[0] * q[1] - q[0] * p[1];
                rx += (p[0] + q[0]) * cross;
                ry += (p[1] + q[1]) * cross;
            }
            // rx / (6a) is the ring centroid; weight it by |a|.
            cx += sign * rx / 6.0;
            cy += sign * ry / 6.0;
            total += sign * a;
        }
        if total == 0.0 {
            let ring = &self.rings[0];
            let n = ring.len() as f64;
            return [
                ring.iter().map(|p| p[0]).sum::<f64>() / n,
                ring.iter().map(|p| p[1]).sum::<f64>() / n,
            ];
        }
        [cx / total, cy / total]
    }
}

impl RegionShape {
    pub fn new(id: impl Into<String>, polygons: Vec<Polygon>) -> Self {
        let geometry = polygons_to_geojson(&polygons);
        Self {
            id: id.into(),
            polygons,
            geometry,
        }
    }

    pub fn area(&self) -> f64 {
        self.polygons.iter().map(Polygon::area).sum()
    }

    pub fn bbox(&self) -> BoundingBox {
        let mut b = BoundingBox::empty();
        for p in &self.polygons {
            b.merge(&p.bbox());
        }
        b
    }

    pub fn locate(&self, p: Point) -> Location {
        let mut best = Location::Outside;
        for poly in &self.polygons {
            match poly.locate(p) {
                Location::Inside => return Location::Inside,
                Location::Boundary => best = Location::Boundary,
                Location::Outside => {}
            }
        }
        best
    }

    /// Centroid of the largest part.
    pub fn centroid(&self) -> Point {
        self.polygons
            .iter()
            .max_by(|a, b| a.area().total_cmp(&b.area()))
            .map(Polygon::centroid)
            .unwrap_or([f64::NAN, f64::NAN])
    }

    pub fn vertices(&self) -> impl Iterator<Item = Point> + '_ {
        self.polygons.iter().flat_map(|p| p.rings.iter().flatten().copied())
    }

    pub fn validate(&self) -> Result<()> {
        if self.polygons.is_empty() || self.polygons.iter().any(Polygon::is_degenerate) {
            return Err(Error::DegeneratePolygon(self.id.clone()));
        }
        Ok(())
    }
}

fn polygons_to_geojson(polygons: &[Polygon]) -> Value {
    let ring_json = |ring: &Vec<Point>| {
        let mut pts: Vec<Value> = ring.iter().map(|p| serde_json::json!([p[0], p[1]])).collect();
        if let Some(first) = ring.first() {
            pts.push(serde_json::json!([first[0], first[1]]));
        }
        Value::Array(pts)
    };
    let poly_json = |p: &Polygon| Value::Array(p.rings.iter().map(ring_json).collect());
    if polygons.len() == 1 {
        serde_json::json!({"type": "Polygon", "coordinates": poly_json(&polygons[0])})
    } else {
        serde_json::json!({
            "type": "MultiPolygon",
            "coordinates": polygons.iter().map(poly_json).collect::<Vec<_>>()
        })
    }
}

fn parse_point(v: &Value) -> Result<Point> {
    let arr = v
        .as_array()
        .filter(|a| a.len() >= 2)
        .ok_or_else(|| Error::Parse("coordinate must be an array of two numbers".into()))?;
    let x = arr[0].as_f64();
    let y = arr[1].as_f64();
    match (x, y) {
        (Some(x), Some(y)) if x.is_finite() && y.is_finite() => Ok([x, y]),
        _ => Err(Error::Parse("non-numeric or non-finite coordinate".into())),
    }
}

fn parse_polygon(v: &Value) -> Result<Polygon> {
    let rings = v
        .as_array()
        .ok_or_else(|| Error::Parse("polygon coordinates must be an array of rings".into()))?
        .iter()
        .map(|ring| {
            ring.as_array()
                .ok_or_else(|| Error::Parse("ring must be an array".into()))?
                .iter()
                .map(parse_point)
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Polygon::new(rings))
}

fn feature_id(feature: &Value) -> Option<String> {
    let as_string = |v: &Value| match v {
        Value::String(s) => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    };
    feature
        .get("properties")
        .and_then(|p| p.get("id"))
        .and_then(as_string)
        .or_else(|| feature.get("id").and_then(as_string))
}

/// Parses a GeoJSON `FeatureCollection` whose features carry an `id`
/// (either as `properties.id` or the feature-level `id`).
pub fn parse_geojson(text: &str) -> Result<Vec<RegionShape>> {
    let root: Value = serde_json::from_str(text)?;
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| Error::Parse("expected a FeatureCollection with `features`".into()))?;
    let mut seen = BTreeMap::new();
    let mut shapes = Vec::with_capacity(features.len());
    for f in features {
        let id = feature_id(f).ok_or_else(|| Error::Parse("feature without `id`".into()))?;
        let geometry = f
            .get("geometry")
            .cloned()
            .ok_or_else(|| Error::Parse(format!("feature `{id}` has no geometry")))?;
        let coords = geometry
            .get("coordinates")
            .ok_or_else(|| Error::Parse(format!("feature `{id}` has no coordinates")))?;
        let polygons = match geometry.get("type").and_then(Value::as_str) {
            Some("Polygon") => vec![parse_polygon(coords)?],
            Some("MultiPolygon") => coords
                .as_array()
                .ok_or_else(|| Error::Parse("MultiPolygon coordinates must be an array".into()))?
                .iter()
                .map(parse_polygon)
                .collect::<Result<Vec<_>>>()?,
            other => {
                return Err(Error::Parse(format!(
                    "feature `{id}`: unsupported geometry type {other:?}"
                )))
            }
        };
        if seen.insert(id.clone(), ()).is_some() {
            return Err(Error::DuplicateRegion(id));
        }
        shapes.push(RegionShape { id, polygons, geometry });
    }
    Ok(shapes)
}

pub fn read_geojson(path: impl AsRef<Path>) -> Result<Vec<RegionShape>> {
    parse_geojson(&std::fs::read_to_string(path)?)
}

/// Serialises shapes as a `FeatureCollection`, attaching the given
/// properties object to each feature (matched by index).
pub fn to_feature_collection(features: &[(&RegionShape, Value)]) -> Value {
    let feats: Vec<Value> = features
        .iter()
        .map(|(shape, props)| {
            let mut props = props.clone();
            if let Value::Object(map) = &mut props {
                map.entry("id").or_insert_with(|| Value::String(shape.id.clone()));
            }
            serde_json::json!({
                "type": "Feature",
                "id": shape.id,
                "properties": props,
                "geometry": shape.geometry,
            })
        })
        .collect();
    serde_json::json!({"type": "FeatureCollection", "features": feats})
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_locate_and_area() {
        let sq = Polygon::rectangle([0.0, 0.0], [10.0, 10.0]);
        assert_eq!(sq.area(), 100.0);
        assert_eq!(sq.locate([5.0, 5.0]), Location::Inside);
        assert_eq!(sq.locate([10.0, 5.0]), Location::Boundary);
        assert_eq!(sq.locate([0.0, 0.0]), Location::Boundary);
        assert_eq!(sq.locate([11.0, 5.0]), Location::Outside);
        assert_eq!(sq.centroid(), [5.0, 5.0]);
    }

    #[test]
    fn holes_are_excluded() {
        let p = Polygon::new(vec![
            vec![[0.0, 0.0], [10.0, 0.0], [10.0, 10.0], [0.0, 10.0]],
            vec![[4.0, 4.0], [6.0, 4.0], [6.0, 6.0], [4.0, 6.0]],
        ]);
        assert_eq!(p.area(), 96.0);
        assert_eq!(p.locate([5.0, 5.0]), Location::Outside);
        assert_eq!(p.locate([1.0, 1.0]), Location::Inside);
    }

    #[test]
    fn geojson_roundtrip_keeps_ids() {
        let text = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"id":"a"},"geometry":{"type":"Polygon","coordinates":[[[0,0],[1,0],[1,1],[0,1],[0,0]]]}},
            {"type":"Feature","id":7,"properties":{},"geometry":{"type":"MultiPolygon","coordinates":[[[[2,0],[3,0],[3,1],[2,1],[2,0]]]]}}
        ]}"#;
        let shapes = parse_geojson(text).unwrap();
        assert_eq!(shapes[0].id, "a");
        assert_eq!(shapes[1].id, "7");
        assert_eq!(shapes[0].polygons[0].rings[0].len(), 4);
        assert_eq!(shapes[1].area(), 1.0);
        let fc = to_feature_collection(&[(&shapes[0], serde_json::json!({"x": 1}))]);
        assert_eq!(fc["features"][0]["properties"]["id"], "a");
    }

    #[test]
    fn degenerate_polygon_rejected() {
        let s = RegionShape::new("z", vec![Polygon::new(vec![vec![[0.0, 0.0], [1.0, 1.0]]])]);
        assert!(matches!(s.validate(), Err(Error::DegeneratePolygon(_))));
    }
}
