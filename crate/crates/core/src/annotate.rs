//! Street-level annotation from reverse-geocoding results.
//!
//! Each location's coordinate is looked up through a [`GeocodeClient`];
//! rooftop-precision entries are excluded (they carry house numbers, not
//! street addresses), the remaining formatted strings are parsed as
//! `"street, neighborhood, ..."`, and the most frequent (street,
//! neighborhood) pair wins with ties going to the earliest entry. Locations
//! with no usable result inherit the label of the nearest labeled location.
//! Manual corrections override everything afterwards.
//!
//! Only the replayable fixture backend is implemented; a live HTTP backend
//! is deliberately absent so annotation runs are reproducible.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{apply_annotations, Address, Dataset, UtmCoord};
use crate::seeding::derive_seed;

/// One reverse-geocoding hit: a formatted address string plus the
/// provider's precision class (e.g. `"ROOFTOP"`, `"GEOMETRIC_CENTER"`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeocodeEntry {
    pub formatted: String,
    pub location_type: String,
}

/// Source of reverse-geocoding results.
pub trait GeocodeClient {
    fn reverse_geocode(&self, coord: UtmCoord) -> Result<Vec<GeocodeEntry>>;
}

/// Coordinates are quantized to 0.1 m when keyed into a fixture, so lookups
/// tolerate float noise below that scale.
pub fn fixture_key(coord: UtmCoord) -> String {
    let e = (coord.easting * 10.0).round() as i64;
    let n = (coord.northing * 10.0).round() as i64;
    format!("{e}:{n}")
}

/// Replayable geocoding backend: a map from quantized coordinates to the
/// entries a provider once returned. Missing coordinates yield no results.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct FixtureClient {
    pub entries: BTreeMap<String, Vec<GeocodeEntry>>,
}

impl FixtureClient {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: e.line(),
            msg: e.to_string(),
        })
    }

    pub fn to_file(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("fixture serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn insert(&mut self, coord: UtmCoord, entries: Vec<GeocodeEntry>) {
        self.entries.insert(fixture_key(coord), entries);
    }
}

impl GeocodeClient for FixtureClient {
    fn reverse_geocode(&self, coord: UtmCoord) -> Result<Vec<GeocodeEntry>> {
        Ok(self.entries.get(&fixture_key(coord)).cloned().unwrap_or_default())
    }
}

/// Extracts the street-level (street, neighborhood) label from geocoding
/// entries: rooftop entries are dropped, formatted strings split on `", "`
/// (at least two parts required), and the most frequent pair wins; ties go
/// to the pair seen earliest.
pub fn extract_address(entries: &[GeocodeEntry]) -> Result<(String, String)> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("geocode entries".into()));
    }
    let mut counts: BTreeMap<(String, String), (usize, usize)> = BTreeMap::new();
    let mut order = 0usize;
    for entry in entries {
        if entry.location_type == "ROOFTOP" {
            continue;
        }
        let parts: Vec<&str> = entry.formatted.split(", ").collect();
        if parts.len() < 2 || parts[0].is_empty() || parts[1].is_empty() {
            continue;
        }
        let key = (parts[0].to_string(), parts[1].to_string());
        let slot = counts.entry(key).or_insert((0, order));
        slot.0 += 1;
        order += 1;
    }
    counts
        .into_iter()
        .max_by(|a, b| {
            // Highest count wins; on ties the earliest first occurrence.
            a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1))
        })
        .map(|((street, nbhd), _)| (street, nbhd))
        .ok_or(Error::NoStreetLevelResult)
}

/// Labels each missing location with the label of the nearest labeled
/// location (euclidean distance; ties prefer the lexicographically smaller
/// labeled location id).
pub fn interpolate_missing(
    labeled: &BTreeMap<String, (String, String)>,
    coords: &BTreeMap<String, UtmCoord>,
    missing: &[String],
) -> Result<BTreeMap<String, (String, String)>> {
    if missing.is_empty() {
        return Ok(BTreeMap::new());
    }
    if labeled.is_empty() {
        return Err(Error::Invalid(
            "no location produced a street-level result; nothing to interpolate from".into(),
        ));
    }
    let mut out = BTreeMap::new();
    for id in missing {
        let here = coords
            .get(id)
            .ok_or_else(|| Error::Invalid(format!("no coordinate for location {id}")))?;
        let mut best: Option<(f64, &String)> = None;
        for (other, _) in labeled {
            let d = here.dist(&coords[other]);
            best = match best {
                None => Some((d, other)),
                Some((bd, bid)) if d < bd || (d == bd && other < bid) => Some((d, other)),
                keep => keep,
            };
        }
        let (_, nearest) = best.expect("labeled is non-empty");
        out.insert(id.clone(), labeled[nearest].clone());
    }
    Ok(out)
}

/// Counts of how each location got its label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotateReport {
    pub geocoded: usize,
    pub interpolated: usize,
    pub corrected: usize,
}

/// Annotates every location of a dataset through a geocoding client, with
/// nearest-neighbor fallback and final manual corrections. Produced
/// addresses are street-level (no sub-street bounds) unless a correction
/// supplies them.
///
/// Only a seeded-uniform `ceil(sample_fraction * location_count)` subset of
/// locations is actually geocoded, modeling a budgeted annotation pass; the
/// rest inherit the nearest geocoded label. Fraction 1.0 queries everything.
pub fn annotate_dataset(
    ds: &Dataset,
    client: &dyn GeocodeClient,
    corrections: &BTreeMap<String, Address>,
    sample_fraction: f64,
    seed: u64,
) -> Result<(Dataset, AnnotateReport)> {
    if !(sample_fraction > 0.0 && sample_fraction <= 1.0) {
        return Err(Error::InvalidConfig(format!(
            "sample_fraction must be in (0, 1], got {sample_fraction}"
        )));
    }
    let coords = crate::geodata::location_coords(ds)?;
    if coords.is_empty() {
        return Err(Error::EmptyInput("dataset has no samples".into()));
    }

    let mut ids: Vec<&String> = coords.keys().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "annotate-sample"));
    ids.shuffle(&mut rng);
    let query_n = ((sample_fraction * ids.len() as f64).ceil() as usize).min(ids.len());
    let queried: std::collections::BTreeSet<&String> = ids[..query_n].iter().copied().collect();

    let mut labeled: BTreeMap<String, (String, String)> = BTreeMap::new();
    let mut missing: Vec<String> = Vec::new();
    for (id, coord) in &coords {
        if !queried.contains(id) {
            missing.push(id.clone());
            continue;
        }
        let entries = client.reverse_geocode(*coord)?;
        match extract_address(&entries) {
            Ok(pair) => {
                labeled.insert(id.clone(), pair);
            }
            Err(Error::EmptyInput(_)) | Err(Error::NoStreetLevelResult) => missing.push(id.clone()),
            Err(e) => return Err(e),
        }
    }
    let geocoded = labeled.len();
    let interpolated = interpolate_missing(&labeled, &coords, &missing)?;
    let n_interpolated = interpolated.len();
    labeled.extend(interpolated);

    let mut addresses: BTreeMap<String, Address> = labeled
        .into_iter()
        .map(|(id, (street, nbhd))| (id, Address::new(&street, &[], &nbhd)))
        .collect();
    let mut corrected = 0;
    for (id, addr) in corrections {
        if !coords.contains_key(id) {
            return Err(Error::Invalid(format!(
                "correction references unknown location {id}"
            )));
        }
        addresses.insert(id.clone(), addr.clone());
        corrected += 1;
    }

    let annotated = apply_annotations(ds, &addresses)?;
    Ok((
        annotated,
        AnnotateReport {
            geocoded,
            interpolated: n_interpolated,
            corrected,
        },
    ))
}
