//! Semantic sub-street partitioning.
//!
//! Streets are cut into sub-streets at their crossings with other streets:
//! find all intersections along each street, prune crossings closer than a
//! minimum gap (keeping the earlier one), split at the surviving interior
//! crossings, then repeatedly fold sub-streets holding fewer than a minimum
//! number of locations into their better-populated same-street neighbor.
//! Locations are assigned to the nearest street centerline, and each
//! location's neighborhood comes from polygon containment, so the final
//! label is a full sub-street [`Address`].

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{Address, StreetGraph, UtmCoord};

/// Distance tolerance (meters) for endpoint/boundary coincidence tests.
const GEOM_EPS: f64 = 1e-9;

/// One crossing along a street: arclength position, the intersection point,
/// and the name of the street crossed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Crossing {
    pub t: f64,
    pub point: UtmCoord,
    pub other_street: String,
}

/// A contiguous arclength span of one street between split points.
/// `start_cross`/`end_cross` name the bounding cross streets; `None` marks
/// the street's own terminus (terminal crossings contribute no names).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubStreet {
    pub street: String,
    pub start_t: f64,
    pub end_t: f64,
    pub start_cross: Option<String>,
    pub end_cross: Option<String>,
    pub location_ids: Vec<String>,
}

/// Aggregate counts reported after partitioning.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionSummary {
    pub locations: usize,
    pub streets: usize,
    pub neighborhoods: usize,
    pub sub_streets: usize,
    pub distinct_addresses: usize,
}

/// Intersection of two segments in parametric form. Returns the parameter
/// along `(p0, p1)` and the point; endpoint contact counts. Parallel and
/// collinear pairs yield `None`.
pub fn seg_intersect(
    p0: UtmCoord,
    p1: UtmCoord,
    q0: UtmCoord,
    q1: UtmCoord,
) -> Option<(f64, UtmCoord)> {
    let r = (p1.easting - p0.easting, p1.northing - p0.northing);
    let s = (q1.easting - q0.easting, q1.northing - q0.northing);
    let denom = r.0 * s.1 - r.1 * s.0;
    let scale = (r.0.abs() + r.1.abs()).max(s.0.abs() + s.1.abs());
    if denom.abs() <= GEOM_EPS * scale * scale {
        return None;
    }
    let qp = (q0.easting - p0.easting, q0.northing - p0.northing);
    let t = (qp.0 * s.1 - qp.1 * s.0) / denom;
    let u = (qp.0 * r.1 - qp.1 * r.0) / denom;
    let tol = 1e-12;
    if t < -tol || t > 1.0 + tol || u < -tol || u > 1.0 + tol {
        return None;
    }
    let t = t.clamp(0.0, 1.0);
    Some((
        t,
        UtmCoord::new(p0.easting + t * r.0, p0.northing + t * r.1),
    ))
}

/// Distance from a point to a segment, plus the parameter of the closest
/// point along the segment.
pub fn point_segment_distance(p: UtmCoord, a: UtmCoord, b: UtmCoord) -> (f64, f64) {
    let ab = (b.easting - a.easting, b.northing - a.northing);
    let ap = (p.easting - a.easting, p.northing - a.northing);
    let len2 = ab.0 * ab.0 + ab.1 * ab.1;
    let t = if len2 > 0.0 {
        ((ap.0 * ab.0 + ap.1 * ab.1) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let closest = UtmCoord::new(a.easting + t * ab.0, a.northing + t * ab.1);
    (p.dist(&closest), t)
}

/// Distance from a point to a polyline, plus the arclength of the closest
/// point measured from the polyline start.
pub fn point_polyline_distance(p: UtmCoord, polyline: &[UtmCoord]) -> Result<(f64, f64)> {
    if polyline.len() < 2 {
        return Err(Error::Invalid("polyline needs at least two points".into()));
    }
    let mut best = (f64::INFINITY, 0.0);
    let mut offset = 0.0;
    for pair in polyline.windows(2) {
        let seg_len = pair[0].dist(&pair[1]);
        let (d, t) = point_segment_distance(p, pair[0], pair[1]);
        if d < best.0 {
            best = (d, offset + t * seg_len);
        }
        offset += seg_len;
    }
    Ok(best)
}

/// Even-odd polygon containment with the boundary counted as inside.
pub fn point_in_polygon(p: UtmCoord, polygon: &[UtmCoord]) -> bool {
    if polygon.len() < 3 {
        return false;
    }
    let n = polygon.len();
    for i in 0..n {
        let (d, _) = point_segment_distance(p, polygon[i], polygon[(i + 1) % n]);
        if d <= GEOM_EPS {
            return true;
        }
    }
    let mut inside = false;
    for i in 0..n {
        let a = polygon[i];
        let b = polygon[(i + 1) % n];
        if (a.northing > p.northing) != (b.northing > p.northing) {
            let x = a.easting
                + (p.northing - a.northing) * (b.easting - a.easting) / (b.northing - a.northing);
            if p.easting < x {
                inside = !inside;
            }
        }
    }
    inside
}

/// Resolves the neighborhood containing a point; points on shared
/// boundaries go to the lexicographically smallest matching name.
pub fn neighborhood_of(graph: &StreetGraph, p: UtmCoord, location_id: &str) -> Result<String> {
    let mut best: Option<&str> = None;
    for nb in &graph.neighborhoods {
        if point_in_polygon(p, &nb.polygon) {
            best = match best {
                Some(cur) if cur <= nb.name.as_str() => Some(cur),
                _ => Some(&nb.name),
            };
        }
    }
    best.map(|s| s.to_string())
        .ok_or_else(|| Error::LocationOutsideNeighborhoods(location_id.to_string()))
}

fn polyline_length(polyline: &[UtmCoord]) -> f64 {
    polyline.windows(2).map(|w| w[0].dist(&w[1])).sum()
}

/// All crossings along every street, sorted by arclength (ties by crossing
/// street name) and deduplicated.
pub fn find_intersections(graph: &StreetGraph) -> Result<BTreeMap<String, Vec<Crossing>>> {
    let mut out: BTreeMap<String, Vec<Crossing>> = BTreeMap::new();
    for street in &graph.streets {
        if street.polyline.len() < 2 {
            return Err(Error::Invalid(format!(
                "street {} has a degenerate polyline",
                street.name
            )));
        }
        let mut crossings = Vec::new();
        for other in &graph.streets {
            if other.name == street.name {
                continue;
            }
            let mut offset = 0.0;
            for seg in street.polyline.windows(2) {
                let seg_len = seg[0].dist(&seg[1]);
                for oseg in other.polyline.windows(2) {
                    if let Some((t, point)) = seg_intersect(seg[0], seg[1], oseg[0], oseg[1]) {
                        crossings.push(Crossing {
                            t: offset + t * seg_len,
                            point,
                            other_street: other.name.clone(),
                        });
                    }
                }
                offset += seg_len;
            }
        }
        crossings.sort_by(|a, b| {
            a.t.partial_cmp(&b.t)
                .expect("finite arclengths")
                .then_with(|| a.other_street.cmp(&b.other_street))
        });
        crossings.dedup_by(|b, a| (b.t - a.t).abs() <= GEOM_EPS && b.other_street == a.other_street);
        out.insert(street.name.clone(), crossings);
    }
    Ok(out)
}

/// Greedy left-to-right pruning: keep the first crossing, then keep each
/// next crossing only if it sits at least `min_gap_m` beyond the last kept
/// one.
pub fn prune_crossings(crossings: &[Crossing], min_gap_m: f64) -> Vec<Crossing> {
    let mut kept: Vec<Crossing> = Vec::new();
    for c in crossings {
        match kept.last() {
            Some(last) if c.t - last.t < min_gap_m => {}
            _ => kept.push(c.clone()),
        }
    }
    kept
}

/// Splits a street at its interior crossings: `k` interior split points
/// yield `k + 1` sub-streets. Crossings at the street termini are not split
/// points and contribute no bounding names.
pub fn split_street(street: &str, street_len: f64, kept: &[Crossing]) -> Vec<SubStreet> {
    let mut interior: Vec<&Crossing> = kept
        .iter()
        .filter(|c| c.t > GEOM_EPS && c.t < street_len - GEOM_EPS)
        .collect();
    // Two streets crossing at the same interior point would split twice at
    // one spot; keep the first name only.
    interior.dedup_by(|b, a| (b.t - a.t).abs() <= GEOM_EPS);

    let mut subs = Vec::new();
    let mut start_t = 0.0;
    let mut start_cross: Option<String> = None;
    for c in &interior {
        subs.push(SubStreet {
            street: street.to_string(),
            start_t,
            end_t: c.t,
            start_cross: start_cross.clone(),
            end_cross: Some(c.other_street.clone()),
            location_ids: Vec::new(),
        });
        start_t = c.t;
        start_cross = Some(c.other_street.clone());
    }
    subs.push(SubStreet {
        street: street.to_string(),
        start_t,
        end_t: street_len,
        start_cross,
        end_cross: None,
        location_ids: Vec::new(),
    });
    subs
}

/// Assigns each location to its nearest street centerline (ties go to the
/// lexicographically smaller street name), returning the street and the
/// arclength of the closest point.
pub fn assign_locations_to_streets(
    graph: &StreetGraph,
    locations: &BTreeMap<String, UtmCoord>,
) -> Result<BTreeMap<String, (String, f64)>> {
    if graph.streets.is_empty() {
        return Err(Error::EmptyInput("street graph has no streets".into()));
    }
    let mut out = BTreeMap::new();
    for (id, coord) in locations {
        let mut best: Option<(f64, &str, f64)> = None;
        for street in &graph.streets {
            let (d, t) = point_polyline_distance(*coord, &street.polyline)?;
            best = match best {
                None => Some((d, &street.name, t)),
                Some((bd, bname, _)) if d < bd || (d == bd && street.name.as_str() < bname) => {
                    Some((d, &street.name, t))
                }
                other => other,
            };
        }
        let (_, name, t) = best.expect("at least one street");
        out.insert(id.clone(), (name.to_string(), t));
    }
    Ok(out)
}

/// Folds sub-streets with fewer than `min_locations` locations into their
/// adjacent same-street neighbor with more locations (ties prefer the
/// earlier span), until every sub-street meets the minimum or is the last
/// one left on its street.
pub fn merge_small(subs: &mut BTreeMap<String, Vec<SubStreet>>, min_locations: usize) {
    loop {
        let mut target: Option<(String, usize)> = None;
        'outer: for (street, list) in subs.iter() {
            if list.len() < 2 {
                continue;
            }
            for (i, sub) in list.iter().enumerate() {
                if sub.location_ids.len() < min_locations {
                    target = Some((street.clone(), i));
                    break 'outer;
                }
            }
        }
        let Some((street, i)) = target else { break };
        let list = subs.get_mut(&street).expect("street present");
        let neighbor = if i == 0 {
            i + 1
        } else if i + 1 == list.len() {
            i - 1
        } else if list[i + 1].location_ids.len() > list[i - 1].location_ids.len() {
            i + 1
        } else {
            i - 1
        };
        let (left, right) = if neighbor < i { (neighbor, i) } else { (i, neighbor) };
        let removed = list.remove(right);
        let kept = &mut list[left];
        kept.end_t = removed.end_t;
        kept.end_cross = removed.end_cross;
        kept.location_ids.extend(removed.location_ids);
        kept.location_ids.sort();
    }
}

/// Full pipeline: crossings, pruning, splitting, location assignment,
/// small-sub-street merging, and neighborhood resolution. Returns each
/// location's sub-street address plus summary counts.
pub fn partition_city(
    graph: &StreetGraph,
    locations: &BTreeMap<String, UtmCoord>,
    min_gap_m: f64,
    min_locations: usize,
) -> Result<(BTreeMap<String, Address>, PartitionSummary)> {
    if locations.is_empty() {
        return Err(Error::EmptyInput("no locations to partition".into()));
    }
    if !(min_gap_m >= 0.0) {
        return Err(Error::InvalidConfig("min_gap_m must be >= 0".into()));
    }
    let crossings = find_intersections(graph)?;

    let mut subs: BTreeMap<String, Vec<SubStreet>> = BTreeMap::new();
    for street in &graph.streets {
        let kept = prune_crossings(&crossings[&street.name], min_gap_m);
        let len = polyline_length(&street.polyline);
        subs.insert(street.name.clone(), split_street(&street.name, len, &kept));
    }

    let assignment = assign_locations_to_streets(graph, locations)?;
    for (loc, (street, t)) in &assignment {
        let list = subs.get_mut(street).expect("assigned street exists");
        let idx = list
            .iter()
            .position(|s| *t >= s.start_t - GEOM_EPS && *t <= s.end_t + GEOM_EPS)
            .expect("arclength falls inside the street span");
        list[idx].location_ids.push(loc.clone());
    }

    merge_small(&mut subs, min_locations);

    let mut labels = BTreeMap::new();
    let mut distinct = std::collections::BTreeSet::new();
    for list in subs.values() {
        for sub in list {
            let mut bounds: Vec<&str> = Vec::new();
            if let Some(c) = &sub.start_cross {
                bounds.push(c);
            }
            if let Some(c) = &sub.end_cross {
                bounds.push(c);
            }
            for loc in &sub.location_ids {
                let nbhd = neighborhood_of(graph, locations[loc], loc)?;
                let addr = Address::new(&sub.street, &bounds, &nbhd);
                distinct.insert(crate::geodata::address_to_text(&addr));
                labels.insert(loc.clone(), addr);
            }
        }
    }

    let summary = PartitionSummary {
        locations: locations.len(),
        streets: graph.streets.len(),
        neighborhoods: graph.neighborhoods.len(),
        sub_streets: subs.values().map(|l| l.len()).sum(),
        distinct_addresses: distinct.len(),
    };
    Ok((labels, summary))
}
