//! Road geometry intake and geodesic point sampling.
//!
//! Roads arrive as a GeoJSON `FeatureCollection` of `LineString` /
//! `MultiLineString` features. Each line becomes a [`RoadSegment`] that is
//! sampled at a fixed arc-length interval on a spherical earth, and every
//! sample point gets one or two planned camera views.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

/// IUGG mean earth radius in meters.
pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

/// Default sampling interval in meters.
pub const DEFAULT_INTERVAL_M: f64 = 5.0;

/// Central angles closer to pi than this are treated as antipodal.
const ANTIPODAL_EPS: f64 = 1e-9;

/// Relative slack used when deciding whether the last interval multiple
/// still fits on the segment.
const FLOOR_SLACK: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeoError {
    #[error("malformed road {id}: {reason}")]
    MalformedRoad { id: String, reason: String },
    #[error("duplicate segment id {0}")]
    DuplicateSegmentId(String),
    #[error("offset {offset_m} m outside segment of length {length_m} m")]
    OffsetOutOfRange { offset_m: f64, length_m: f64 },
    #[error("segment {0} has zero length")]
    EmptySegment(String),
    #[error("invalid sampling interval {0}")]
    InvalidInterval(f64),
    #[error("invalid camera parameters: {0}")]
    InvalidCamera(String),
}

/// A WGS84 position in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub lat: f64,
    pub lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Option<Self> {
        let point = Self { lat, lon };
        point.is_valid().then_some(point)
    }

    pub fn is_valid(&self) -> bool {
        self.lat.is_finite()
            && self.lon.is_finite()
            && (-90.0..=90.0).contains(&self.lat)
            && (-180.0..=180.0).contains(&self.lon)
    }

    fn to_unit(self) -> [f64; 3] {
        let (lat, lon) = (self.lat.to_radians(), self.lon.to_radians());
        [lat.cos() * lon.cos(), lat.cos() * lon.sin(), lat.sin()]
    }

    fn from_unit(v: [f64; 3]) -> Self {
        let lat = v[2].atan2((v[0] * v[0] + v[1] * v[1]).sqrt());
        let lon = v[1].atan2(v[0]);
        Self {
            lat: lat.to_degrees(),
            lon: lon.to_degrees(),
        }
    }
}

/// Great-circle distance in meters on a sphere of radius [`EARTH_RADIUS_M`].
pub fn haversine_m(a: GeoPoint, b: GeoPoint) -> f64 {
    EARTH_RADIUS_M * central_angle(a, b)
}

fn central_angle(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dphi = phi2 - phi1;
    let dlambda = (b.lon - a.lon).to_radians();
    let h = (dphi / 2.0).sin().powi(2) + phi1.cos() * phi2.cos() * (dlambda / 2.0).sin().powi(2);
    2.0 * h.clamp(0.0, 1.0).sqrt().asin()
}

/// Initial forward azimuth from `a` toward `b`, in `[0, 360)`.
pub fn initial_bearing_deg(a: GeoPoint, b: GeoPoint) -> f64 {
    let (phi1, phi2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlambda = (b.lon - a.lon).to_radians();
    let y = dlambda.sin() * phi2.cos();
    let x = phi1.cos() * phi2.sin() - phi1.sin() * phi2.cos() * dlambda.cos();
    normalize_deg(y.atan2(x).to_degrees())
}

/// Wraps any angle into `[0, 360)`.
pub fn normalize_deg(deg: f64) -> f64 {
    let wrapped = deg.rem_euclid(360.0);
    // rem_euclid can round up to exactly 360 for tiny negative inputs
    if wrapped >= 360.0 {
        0.0
    } else {
        wrapped
    }
}

/// Point at fraction `t` of the great-circle arc from `a` to `b`.
fn slerp(a: GeoPoint, b: GeoPoint, t: f64) -> GeoPoint {
    let (ua, ub) = (a.to_unit(), b.to_unit());
    let omega = central_angle(a, b);
    if omega == 0.0 {
        return a;
    }
    let sin_omega = omega.sin();
    let wa = ((1.0 - t) * omega).sin() / sin_omega;
    let wb = (t * omega).sin() / sin_omega;
    GeoPoint::from_unit([
        wa * ua[0] + wb * ub[0],
        wa * ua[1] + wb * ub[1],
        wa * ua[2] + wb * ub[2],
    ])
}

/// One polyline road piece: the unit of assessment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoadSegment {
    pub id: String,
    pub name: Option<String>,
    pub vertices: Vec<GeoPoint>,
    pub length_m: f64,
    /// Cumulative arc length at each vertex; first entry is 0.
    #[serde(skip)]
    cumulative_m: Vec<f64>,
}

impl RoadSegment {
    /// Builds a segment, collapsing consecutive duplicate vertices.
    pub fn new(
        id: impl Into<String>,
        name: Option<String>,
        vertices: Vec<GeoPoint>,
    ) -> Result<Self, GeoError> {
        let id = id.into();
        let malformed = |reason: &str| GeoError::MalformedRoad {
            id: id.clone(),
            reason: reason.to_string(),
        };
        if let Some(bad) = vertices.iter().find(|p| !p.is_valid()) {
            return Err(malformed(&format!(
                "coordinate out of range (lat {}, lon {})",
                bad.lat, bad.lon
            )));
        }
        if vertices.iter().any(|p| p.lat.abs() == 90.0) {
            return Err(malformed("vertex at a pole"));
        }
        let mut deduped: Vec<GeoPoint> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if deduped.last() != Some(&p) {
                deduped.push(p);
            }
        }
        if deduped.len() < 2 {
            return Err(malformed("fewer than 2 distinct vertices"));
        }
        let mut cumulative_m = Vec::with_capacity(deduped.len());
        cumulative_m.push(0.0);
        let mut total = 0.0;
        for pair in deduped.windows(2) {
            let angle = central_angle(pair[0], pair[1]);
            if (std::f64::consts::PI - angle).abs() < ANTIPODAL_EPS {
                return Err(malformed("antipodal edge"));
            }
            total += angle * EARTH_RADIUS_M;
            cumulative_m.push(total);
        }
        Ok(Self {
            id,
            name,
            vertices: deduped,
            length_m: total,
            cumulative_m,
        })
    }

    /// The same road traversed end to start.
    pub fn reversed(&self) -> Self {
        let mut vertices = self.vertices.clone();
        vertices.reverse();
        Self::new(self.id.clone(), self.name.clone(), vertices)
            .expect("reversal preserves validity")
    }

    /// Position and forward bearing at an arc offset from the first vertex.
    ///
    /// At a vertex shared by two edges the outgoing edge decides the bearing;
    /// the final vertex uses the arrival azimuth of the last edge.
    pub fn interpolate_along(&self, offset_m: f64) -> Result<(GeoPoint, f64), GeoError> {
        if !(0.0..=self.length_m).contains(&offset_m) {
            return Err(GeoError::OffsetOutOfRange {
                offset_m,
                length_m: self.length_m,
            });
        }
        let last = self.vertices.len() - 1;
        if offset_m == self.length_m {
            let bearing = normalize_deg(
                initial_bearing_deg(self.vertices[last], self.vertices[last - 1]) + 180.0,
            );
            return Ok((self.vertices[last], bearing));
        }
        // Edge i spans cumulative[i]..cumulative[i + 1]; pick the one whose
        // start is the last cumulative value <= offset.
        let edge = self.cumulative_m.partition_point(|&c| c <= offset_m) - 1;
        let (a, b) = (self.vertices[edge], self.vertices[edge + 1]);
        let along = offset_m - self.cumulative_m[edge];
        if along == 0.0 {
            return Ok((a, initial_bearing_deg(a, b)));
        }
        let edge_len = self.cumulative_m[edge + 1] - self.cumulative_m[edge];
        let position = slerp(a, b, along / edge_len);
        Ok((position, initial_bearing_deg(position, b)))
    }
}

/// All segments from one roads document, in document order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RoadSet {
    pub segments: Vec<RoadSegment>,
}

impl RoadSet {
    pub fn get(&self, id: &str) -> Option<&RoadSegment> {
        self.segments.iter().find(|s| s.id == id)
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

/// Parses a GeoJSON `FeatureCollection` of road lines.
///
/// Feature ids come from `properties.id`, falling back to the feature-level
/// `id` member. Part `i` of a `MultiLineString` becomes segment `"<id>-<i>"`.
pub fn load_roads(doc: &str) -> Result<RoadSet, GeoError> {
    let root: Value = serde_json::from_str(doc).map_err(|e| GeoError::MalformedRoad {
        id: "<document>".into(),
        reason: format!("invalid JSON: {e}"),
    })?;
    let doc_err = |reason: &str| GeoError::MalformedRoad {
        id: "<document>".into(),
        reason: reason.into(),
    };
    if root.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
        return Err(doc_err("not a FeatureCollection"));
    }
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| doc_err("missing features array"))?;

    let mut segments = Vec::new();
    let mut seen = HashSet::new();
    for (position, feature) in features.iter().enumerate() {
        let id = feature_id(feature).ok_or_else(|| GeoError::MalformedRoad {
            id: format!("<feature {position}>"),
            reason: "missing id property".into(),
        })?;
        let malformed = |reason: String| GeoError::MalformedRoad {
            id: id.clone(),
            reason,
        };
        let name = feature
            .get("properties")
            .and_then(|p| p.get("name").or_else(|| p.get("FULLNAME")))
            .and_then(Value::as_str)
            .map(str::to_string);
        let geometry = feature
            .get("geometry")
            .filter(|g| !g.is_null())
            .ok_or_else(|| malformed("missing geometry".into()))?;
        let coords = geometry
            .get("coordinates")
            .ok_or_else(|| malformed("geometry without coordinates".into()))?;
        let parts: Vec<(String, &Value)> = match geometry.get("type").and_then(Value::as_str) {
            Some("LineString") => vec![(id.clone(), coords)],
            Some("MultiLineString") => coords
                .as_array()
                .ok_or_else(|| malformed("MultiLineString coordinates not an array".into()))?
                .iter()
                .enumerate()
                .map(|(i, part)| (format!("{id}-{i}"), part))
                .collect(),
            other => {
                return Err(malformed(format!(
                    "unsupported geometry type {}",
                    other.unwrap_or("<none>")
                )))
            }
        };
        for (segment_id, line) in parts {
            let vertices = parse_line(line).map_err(|reason| GeoError::MalformedRoad {
                id: segment_id.clone(),
                reason,
            })?;
            if !seen.insert(segment_id.clone()) {
                return Err(GeoError::DuplicateSegmentId(segment_id));
            }
            segments.push(RoadSegment::new(segment_id, name.clone(), vertices)?);
        }
    }
    Ok(RoadSet { segments })
}

fn feature_id(feature: &Value) -> Option<String> {
    let raw = feature
        .get("properties")
        .and_then(|p| p.get("id"))
        .or_else(|| feature.get("id"))?;
    match raw {
        Value::String(s) if !s.is_empty() => Some(s.clone()),
        Value::Number(n) => Some(n.to_string()),
        _ => None,
    }
}

fn parse_line(line: &Value) -> Result<Vec<GeoPoint>, String> {
    let positions = line.as_array().ok_or("coordinates not an array")?;
    positions
        .iter()
        .map(|pos| {
            let pair = pos.as_array().filter(|p| p.len() >= 2).ok_or("bad position")?;
            let lon = pair[0].as_f64().ok_or("non-numeric longitude")?;
            let lat = pair[1].as_f64().ok_or("non-numeric latitude")?;
            GeoPoint::new(lat, lon)
                .ok_or_else(|| format!("coordinate out of range (lat {lat}, lon {lon})"))
        })
        .collect()
}

/// A sampled location along a segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplePoint {
    pub segment_id: String,
    pub index: usize,
    pub offset_m: f64,
    pub position: GeoPoint,
    pub forward_bearing_deg: f64,
}

/// Samples at offsets `k * interval_m` for `k = 0..=floor(length / interval)`.
pub fn sample_segment(segment: &RoadSegment, interval_m: f64) -> Result<Vec<SamplePoint>, GeoError> {
    if !(interval_m.is_finite() && interval_m > 0.0) {
        return Err(GeoError::InvalidInterval(interval_m));
    }
    if segment.length_m <= 0.0 {
        return Err(GeoError::EmptySegment(segment.id.clone()));
    }
    let count = (segment.length_m / interval_m * (1.0 + FLOOR_SLACK)).floor() as usize + 1;
    (0..count)
        .map(|k| {
            let offset_m = (k as f64 * interval_m).min(segment.length_m);
            let (position, forward_bearing_deg) = segment.interpolate_along(offset_m)?;
            Ok(SamplePoint {
                segment_id: segment.id.clone(),
                index: k,
                offset_m,
                position,
                forward_bearing_deg,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    Forward,
    #[default]
    Perpendicular,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CameraDefaults {
    pub fov_deg: f64,
    pub pitch_deg: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl Default for CameraDefaults {
    fn default() -> Self {
        Self {
            fov_deg: 90.0,
            pitch_deg: 0.0,
            width_px: 640,
            height_px: 640,
        }
    }
}

impl CameraDefaults {
    pub fn validate(&self) -> Result<(), GeoError> {
        if !(self.fov_deg > 0.0 && self.fov_deg <= 120.0) {
            return Err(GeoError::InvalidCamera(format!("fov {} not in (0, 120]", self.fov_deg)));
        }
        if !(-90.0..=90.0).contains(&self.pitch_deg) {
            return Err(GeoError::InvalidCamera(format!(
                "pitch {} not in [-90, 90]",
                self.pitch_deg
            )));
        }
        if self.width_px == 0 || self.height_px == 0 {
            return Err(GeoError::InvalidCamera("image size must be positive".into()));
        }
        Ok(())
    }
}

/// A planned camera shot at a sample point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewSpec {
    pub sample: SamplePoint,
    pub heading_deg: f64,
    pub fov_deg: f64,
    pub pitch_deg: f64,
    pub width_px: u32,
    pub height_px: u32,
}

impl ViewSpec {
    /// Heading rounded to whole degrees in `[0, 360)`.
    pub fn heading_whole_deg(&self) -> u32 {
        (self.heading_deg.round() as u32) % 360
    }
}

/// Forward mode: one view along the road. Perpendicular mode: left then right.
pub fn plan_views(sample: &SamplePoint, mode: ViewMode, camera: &CameraDefaults) -> Vec<ViewSpec> {
    let bearing = sample.forward_bearing_deg;
    let headings = match mode {
        ViewMode::Forward => vec![normalize_deg(bearing)],
        ViewMode::Perpendicular => {
            vec![normalize_deg(bearing - 90.0), normalize_deg(bearing + 90.0)]
        }
    };
    headings
        .into_iter()
        .map(|heading_deg| ViewSpec {
            sample: sample.clone(),
            heading_deg,
            fov_deg: camera.fov_deg,
            pitch_deg: camera.pitch_deg,
            width_px: camera.width_px,
            height_px: camera.height_px,
        })
        .collect()
}

/// Renders sample points as a GeoJSON `FeatureCollection` of `Point`s.
pub fn samples_to_geojson(samples: &[SamplePoint]) -> Value {
    let features: Vec<Value> = samples
        .iter()
        .map(|s| {
            json!({
                "type": "Feature",
                "geometry": {"type": "Point", "coordinates": [s.position.lon, s.position.lat]},
                "properties": {
                    "segment_id": s.segment_id,
                    "index": s.index,
                    "offset_m": s.offset_m,
                    "forward_bearing_deg": s.forward_bearing_deg,
                }
            })
        })
        .collect();
    json!({"type": "FeatureCollection", "features": features})
}

/// Inverse of [`samples_to_geojson`].
pub fn samples_from_geojson(doc: &str) -> Result<Vec<SamplePoint>, GeoError> {
    let bad = |reason: String| GeoError::MalformedRoad {
        id: "<sampling>".into(),
        reason,
    };
    let root: Value = serde_json::from_str(doc).map_err(|e| bad(e.to_string()))?;
    let features = root
        .get("features")
        .and_then(Value::as_array)
        .ok_or_else(|| bad("missing features".into()))?;
    features
        .iter()
        .map(|f| {
            let props = f.get("properties").ok_or_else(|| bad("missing properties".into()))?;
            let coords = f
                .pointer("/geometry/coordinates")
                .and_then(Value::as_array)
                .filter(|c| c.len() >= 2)
                .ok_or_else(|| bad("missing point coordinates".into()))?;
            let num = |v: Option<&Value>, what: &str| {
                v.and_then(Value::as_f64).ok_or_else(|| bad(format!("missing {what}")))
            };
            Ok(SamplePoint {
                segment_id: props
                    .get("segment_id")
                    .and_then(Value::as_str)
                    .ok_or_else(|| bad("missing segment_id".into()))?
                    .to_string(),
                index: props
                    .get("index")
                    .and_then(Value::as_u64)
                    .ok_or_else(|| bad("missing index".into()))? as usize,
                offset_m: num(props.get("offset_m"), "offset_m")?,
                position: GeoPoint {
                    lon: num(coords.first(), "lon")?,
                    lat: num(coords.get(1), "lat")?,
                },
                forward_bearing_deg: num(props.get("forward_bearing_deg"), "bearing")?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pt(lat: f64, lon: f64) -> GeoPoint {
        GeoPoint::new(lat, lon).unwrap()
    }

    /// Closed-form equatorial arc: 2*pi*R*(degrees/360).
    fn equatorial_arc_m(deg: f64) -> f64 {
        2.0 * std::f64::consts::PI * EARTH_RADIUS_M * deg / 360.0
    }

    #[test]
    fn haversine_examples() {
        assert_eq!(haversine_m(pt(0.0, 0.0), pt(0.0, 0.0)), 0.0);
        let one_degree = haversine_m(pt(0.0, 0.0), pt(0.0, 1.0));
        assert!((one_degree - 111_195.08).abs() < 0.01, "{one_degree}");
        assert!((one_degree - equatorial_arc_m(1.0)).abs() < 1e-6);
        let quarter = haversine_m(pt(0.0, 0.0), pt(90.0, 0.0));
        assert!((quarter - 10_007_557.2).abs() < 0.1, "{quarter}");
    }

    #[test]
    fn interpolate_boundaries() {
        let seg = RoadSegment::new("s", None, vec![pt(0.0, 0.0), pt(0.0, 1.0)]).unwrap();
        let (p0, b0) = seg.interpolate_along(0.0).unwrap();
        assert_eq!(p0, pt(0.0, 0.0));
        assert!((b0 - 90.0).abs() < 1e-12);

        let (mid, bearing) = seg.interpolate_along(seg.length_m / 2.0).unwrap();
        assert!(mid.lat.abs() < 1e-9 && (mid.lon - 0.5).abs() < 1e-9, "{mid:?}");
        assert!((bearing - 90.0).abs() < 1e-9);

        let (end, _) = seg.interpolate_along(seg.length_m).unwrap();
        assert_eq!(end, pt(0.0, 1.0));

        assert!(matches!(
            seg.interpolate_along(seg.length_m + 1.0),
            Err(GeoError::OffsetOutOfRange { .. })
        ));
        assert!(seg.interpolate_along(-0.5).is_err());
    }

    #[test]
    fn shared_vertex_uses_outgoing_edge() {
        // east, then north
        let seg = RoadSegment::new(
            "corner",
            None,
            vec![pt(0.0, 0.0), pt(0.0, 0.001), pt(0.001, 0.001)],
        )
        .unwrap();
        let corner_offset = seg.cumulative_m[1];
        let (p, bearing) = seg.interpolate_along(corner_offset).unwrap();
        assert_eq!(p, pt(0.0, 0.001));
        assert!(bearing.abs() < 1e-6 || (bearing - 360.0).abs() < 1e-6, "{bearing}");
    }

    fn straight_segment(length_m: f64) -> RoadSegment {
        let lon = length_m / EARTH_RADIUS_M * 180.0 / std::f64::consts::PI;
        RoadSegment::new("s", None, vec![pt(0.0, 0.0), pt(0.0, lon)]).unwrap()
    }

    #[test]
    fn sampling_floor_rule() {
        let offsets = |len: f64| -> Vec<f64> {
            sample_segment(&straight_segment(len), 5.0)
                .unwrap()
                .iter()
                .map(|s| s.offset_m)
                .collect()
        };
        let twenty = offsets(20.0);
        assert_eq!(twenty.len(), 5);
        for (got, want) in twenty.iter().zip([0.0, 5.0, 10.0, 15.0, 20.0]) {
            assert!((got - want).abs() < 1e-9);
        }
        assert_eq!(offsets(12.0), vec![0.0, 5.0, 10.0]);
        assert_eq!(offsets(1000.0).len(), 201);

        let samples = sample_segment(&straight_segment(12.0), 5.0).unwrap();
        assert!(samples.iter().enumerate().all(|(i, s)| s.index == i));
        assert!(matches!(
            sample_segment(&straight_segment(12.0), 0.0),
            Err(GeoError::InvalidInterval(_))
        ));
    }

    #[test]
    fn view_planning() {
        let sample = |bearing: f64| SamplePoint {
            segment_id: "s".into(),
            index: 0,
            offset_m: 0.0,
            position: pt(0.0, 0.0),
            forward_bearing_deg: bearing,
        };
        let cam = CameraDefaults::default();
        let headings = |b: f64, m: ViewMode| -> Vec<f64> {
            plan_views(&sample(b), m, &cam).iter().map(|v| v.heading_deg).collect()
        };
        assert_eq!(headings(0.0, ViewMode::Perpendicular), vec![270.0, 90.0]);
        assert_eq!(headings(45.0, ViewMode::Forward), vec![45.0]);
        assert_eq!(headings(350.0, ViewMode::Perpendicular), vec![260.0, 80.0]);
    }

    #[test]
    fn load_roads_shapes() {
        let one = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"id":"A"},
             "geometry":{"type":"LineString","coordinates":[[0,0],[0.001,0]]}}]}"#;
        let set = load_roads(one).unwrap();
        assert_eq!(set.len(), 1);
        assert_eq!(set.segments[0].vertices.len(), 2);

        let no_geom = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"id":"A"}}]}"#;
        assert!(matches!(load_roads(no_geom), Err(GeoError::MalformedRoad { .. })));

        let multi = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"id":"R7"},
             "geometry":{"type":"MultiLineString","coordinates":[
                [[0,0],[0.001,0]], [[0,0.01],[0.001,0.01]]]}}]}"#;
        let ids: Vec<_> = load_roads(multi)
            .unwrap()
            .segments
            .into_iter()
            .map(|s| s.id)
            .collect();
        assert_eq!(ids, vec!["R7-0", "R7-1"]);

        let dup = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"id":"A"},"geometry":{"type":"LineString","coordinates":[[0,0],[0.001,0]]}},
            {"type":"Feature","properties":{"id":"A"},"geometry":{"type":"LineString","coordinates":[[0,1],[0.001,1]]}}]}"#;
        assert_eq!(load_roads(dup), Err(GeoError::DuplicateSegmentId("A".into())));

        let short = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"id":"A"},"geometry":{"type":"LineString","coordinates":[[0,0]]}}]}"#;
        assert!(matches!(load_roads(short), Err(GeoError::MalformedRoad { .. })));

        let out_of_range = r#"{"type":"FeatureCollection","features":[
            {"type":"Feature","properties":{"id":"A"},"geometry":{"type":"LineString","coordinates":[[0,0],[0,95]]}}]}"#;
        assert!(matches!(load_roads(out_of_range), Err(GeoError::MalformedRoad { .. })));
    }

    #[test]
    fn rejects_poles_and_antipodes() {
        assert!(RoadSegment::new("p", None, vec![pt(90.0, 0.0), pt(89.0, 0.0)]).is_err());
        assert!(RoadSegment::new("a", None, vec![pt(0.0, 0.0), pt(0.0, 180.0)]).is_err());
    }

    #[test]
    fn geojson_round_trip() {
        let samples = sample_segment(&straight_segment(20.0), 5.0).unwrap();
        let doc = samples_to_geojson(&samples).to_string();
        assert_eq!(samples_from_geojson(&doc).unwrap(), samples);
    }
}
