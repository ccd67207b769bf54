//! Synthetic street-grid city generator.
//!
//! Produces a geo-tagged image dataset plus the matching street graph. The
//! city is a `rows x cols` grid: horizontal streets `H00..` at constant
//! northing, vertical streets `V00..` at constant easting, spaced
//! `spacing_m` apart, with four quadrant neighborhoods split on interior
//! grid lines. Locations sit strictly inside street segments, so no
//! location ever coincides with an intersection.
//!
//! Every location belongs to exactly one sub-street class; each class gets
//! a persistent unit signature vector and each image view observes that
//! signature plus isotropic gaussian noise. [`oracle_labels`] computes the
//! ground-truth sub-street address of every location by grid arithmetic,
//! independent of any geometric partitioning code.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geodata::{
    address_tokens, Address, Dataset, Neighborhood, Sample, Street, StreetGraph, UtmCoord,
};
use crate::seeding::derive_seed;

/// Words used to build image captions. Kept lowercase and comma-free so the
/// shared tokenizer treats them verbatim.
pub const CAPTION_POOL: [&str; 12] = [
    "a", "quiet", "busy", "street", "view", "with", "trees", "shops", "cars", "bikes", "fences",
    "awnings",
];

/// Quadrant neighborhood names, lexicographically ordered.
const QUADRANTS: [&str; 4] = ["NE", "NW", "SE", "SW"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CityConfig {
    /// Number of horizontal streets (>= 2).
    pub rows: usize,
    /// Number of vertical streets (>= 2).
    pub cols: usize,
    /// Grid spacing in meters (> 0).
    pub spacing_m: f64,
    /// Locations placed on each street segment between adjacent crossings.
    pub locations_per_segment: usize,
    /// Image views per location.
    pub views_per_location: usize,
    /// Feature vector dimension.
    pub feature_dim: usize,
    /// Standard deviation of per-view feature noise (>= 0).
    pub noise_sigma: f64,
    /// Norm of each class signature vector (> 0).
    pub signature_scale: f64,
    /// Base seed for all generator streams.
    pub seed: u64,
    /// Tag stored in the dataset and used by merges for namespacing.
    pub city_tag: String,
}

impl Default for CityConfig {
    fn default() -> Self {
        CityConfig {
            rows: 4,
            cols: 6,
            spacing_m: 160.0,
            locations_per_segment: 6,
            views_per_location: 6,
            feature_dim: 32,
            noise_sigma: 0.04,
            signature_scale: 1.0,
            seed: 17,
            city_tag: "grid".into(),
        }
    }
}

impl CityConfig {
    fn validate(&self) -> Result<()> {
        if self.rows < 2 || self.cols < 2 {
            return Err(Error::InvalidConfig(format!(
                "grid needs rows >= 2 and cols >= 2, got {}x{}",
                self.rows, self.cols
            )));
        }
        if !(self.spacing_m > 0.0) {
            return Err(Error::InvalidConfig("spacing_m must be > 0".into()));
        }
        if self.locations_per_segment == 0 || self.views_per_location == 0 {
            return Err(Error::InvalidConfig(
                "locations_per_segment and views_per_location must be >= 1".into(),
            ));
        }
        if self.feature_dim < 4 {
            return Err(Error::InvalidConfig(format!(
                "feature_dim must be >= 4, got {}",
                self.feature_dim
            )));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be >= 0".into()));
        }
        if !(self.signature_scale > 0.0) {
            return Err(Error::InvalidConfig("signature_scale must be > 0".into()));
        }
        Ok(())
    }
}

fn street_name(axis: char, idx: usize) -> String {
    format!("{axis}{idx:02}")
}

/// Interior split-line indices: the quadrant boundary runs along the grid
/// line of street index `rows/2` (resp. `cols/2`).
fn split_indices(cfg: &CityConfig) -> (usize, usize) {
    (cfg.rows / 2, cfg.cols / 2)
}

/// Resolves the quadrant containing a point. Points on a split line match
/// several closed quadrants; the lexicographically smallest name wins.
fn quadrant_of(cfg: &CityConfig, coord: UtmCoord) -> String {
    let (row_split, col_split) = split_indices(cfg);
    let e_split = col_split as f64 * cfg.spacing_m;
    let n_split = row_split as f64 * cfg.spacing_m;
    let east = coord.easting >= e_split;
    let west = coord.easting <= e_split;
    let north = coord.northing >= n_split;
    let south = coord.northing <= n_split;
    // QUADRANTS is sorted, so the first match is the lexicographic minimum.
    for name in QUADRANTS {
        let ok = match name {
            "NE" => north && east,
            "NW" => north && west,
            "SE" => south && east,
            "SW" => south && west,
            _ => unreachable!(),
        };
        if ok {
            return name.to_string();
        }
    }
    unreachable!("every in-grid point lies in some quadrant");
}

/// Bounding cross streets of segment `seg` on a street crossed by `n_cross`
/// perpendicular streets. Terminal crossings (street endpoints) are not
/// split points and contribute no bounding names.
fn segment_bounds(axis: char, seg: usize, n_cross: usize) -> Vec<String> {
    let last_seg = n_cross - 2;
    let mut bounds = Vec::new();
    if seg > 0 {
        bounds.push(street_name(axis, seg));
    }
    if seg < last_seg {
        bounds.push(street_name(axis, seg + 1));
    }
    bounds
}

struct LocationSpec {
    location_id: String,
    coord: UtmCoord,
    address: Address,
}

/// Enumerates every location in a fixed traversal order: horizontal streets
/// by row, then vertical streets by column; segments left-to-right or
/// bottom-to-top; locations by their in-segment index.
fn enumerate_locations(cfg: &CityConfig) -> Vec<LocationSpec> {
    let s = cfg.spacing_m;
    let lps = cfg.locations_per_segment;
    let mut out = Vec::new();

    for row in 0..cfg.rows {
        let main = street_name('H', row);
        for seg in 0..cfg.cols - 1 {
            let bounds = segment_bounds('V', seg, cfg.cols);
            let bound_refs: Vec<&str> = bounds.iter().map(|b| b.as_str()).collect();
            for k in 0..lps {
                let frac = (k + 1) as f64 / (lps + 1) as f64;
                let coord = UtmCoord::new((seg as f64 + frac) * s, row as f64 * s);
                out.push(LocationSpec {
                    location_id: format!("{main}-s{seg}-l{k}"),
                    coord,
                    address: Address::new(&main, &bound_refs, &quadrant_of(cfg, coord)),
                });
            }
        }
    }
    for col in 0..cfg.cols {
        let main = street_name('V', col);
        for seg in 0..cfg.rows - 1 {
            let bounds = segment_bounds('H', seg, cfg.rows);
            let bound_refs: Vec<&str> = bounds.iter().map(|b| b.as_str()).collect();
            for k in 0..lps {
                let frac = (k + 1) as f64 / (lps + 1) as f64;
                let coord = UtmCoord::new(col as f64 * s, (seg as f64 + frac) * s);
                out.push(LocationSpec {
                    location_id: format!("{main}-s{seg}-l{k}"),
                    coord,
                    address: Address::new(&main, &bound_refs, &quadrant_of(cfg, coord)),
                });
            }
        }
    }
    out
}

/// Ground-truth sub-street address of every location, derived purely from
/// grid arithmetic. Matches geometric partitioning whenever the grid
/// spacing exceeds the crossing-prune gap and every segment holds at least
/// the merge minimum of locations.
pub fn oracle_labels(cfg: &CityConfig) -> Result<BTreeMap<String, Address>> {
    cfg.validate()?;
    Ok(enumerate_locations(cfg)
        .into_iter()
        .map(|l| (l.location_id, l.address))
        .collect())
}

/// The street graph of a grid city: 2-point centerlines plus the four
/// closed quadrant rectangles.
pub fn grid_graph(cfg: &CityConfig) -> Result<StreetGraph> {
    cfg.validate()?;
    let s = cfg.spacing_m;
    let e_max = (cfg.cols - 1) as f64 * s;
    let n_max = (cfg.rows - 1) as f64 * s;
    let (row_split, col_split) = split_indices(cfg);
    let e_split = col_split as f64 * s;
    let n_split = row_split as f64 * s;

    let mut streets = Vec::new();
    for row in 0..cfg.rows {
        let n = row as f64 * s;
        streets.push(Street {
            name: street_name('H', row),
            polyline: vec![UtmCoord::new(0.0, n), UtmCoord::new(e_max, n)],
        });
    }
    for col in 0..cfg.cols {
        let e = col as f64 * s;
        streets.push(Street {
            name: street_name('V', col),
            polyline: vec![UtmCoord::new(e, 0.0), UtmCoord::new(e, n_max)],
        });
    }

    let rect = |e0: f64, e1: f64, n0: f64, n1: f64| {
        vec![
            UtmCoord::new(e0, n0),
            UtmCoord::new(e1, n0),
            UtmCoord::new(e1, n1),
            UtmCoord::new(e0, n1),
        ]
    };
    let neighborhoods = vec![
        Neighborhood {
            name: "NE".into(),
            polygon: rect(e_split, e_max, n_split, n_max),
        },
        Neighborhood {
            name: "NW".into(),
            polygon: rect(0.0, e_split, n_split, n_max),
        },
        Neighborhood {
            name: "SE".into(),
            polygon: rect(e_split, e_max, 0.0, n_split),
        },
        Neighborhood {
            name: "SW".into(),
            polygon: rect(0.0, e_split, 0.0, n_split),
        },
    ];
    Ok(StreetGraph {
        streets,
        neighborhoods,
    })
}

fn standard_normal_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Generates the image dataset (without addresses) and the street graph.
///
/// Feature model: each distinct oracle address class owns a unit-norm
/// signature scaled by `signature_scale`; a view's feature vector is its
/// class signature plus `noise_sigma`-scaled gaussian noise. Captions are
/// seeded random word strings from [`CAPTION_POOL`]. The vocabulary covers
/// every oracle address token plus the caption pool, so later annotation
/// never needs new tokens.
pub fn generate_city(cfg: &CityConfig) -> Result<(Dataset, StreetGraph)> {
    cfg.validate()?;
    let locations = enumerate_locations(cfg);
    let graph = grid_graph(cfg)?;

    // Vocabulary: address tokens in traversal order, then caption words.
    let mut vocab: Vec<String> = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for loc in &locations {
        for token in address_tokens(&loc.address) {
            if seen.insert(token.clone()) {
                vocab.push(token);
            }
        }
    }
    for word in CAPTION_POOL {
        if seen.insert(word.to_string()) {
            vocab.push(word.to_string());
        }
    }

    // One unit signature per distinct address class, drawn in sorted class
    // order so the stream does not depend on traversal details.
    let mut classes: Vec<String> = locations
        .iter()
        .map(|l| crate::geodata::address_to_text(&l.address))
        .collect();
    classes.sort();
    classes.dedup();
    let mut sig_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "signatures"));
    let mut signatures: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for class in &classes {
        let mut v = standard_normal_vec(&mut sig_rng, cfg.feature_dim);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm < 1e-12 {
            return Err(Error::Invalid(format!(
                "degenerate signature draw for class {class}"
            )));
        }
        for x in &mut v {
            *x *= cfg.signature_scale / norm;
        }
        signatures.insert(class.clone(), v);
    }

    let mut noise_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "noise"));
    let mut caption_rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "captions"));

    let mut samples = Vec::new();
    for loc in &locations {
        let class = crate::geodata::address_to_text(&loc.address);
        let signature = &signatures[&class];
        for view in 0..cfg.views_per_location {
            let mut features = signature.clone();
            if cfg.noise_sigma > 0.0 {
                for f in &mut features {
                    let z: f64 = noise_rng.sample(StandardNormal);
                    *f += cfg.noise_sigma * z;
                }
            }
            let len = caption_rng.gen_range(4..=8);
            let caption_tokens: Vec<String> = (0..len)
                .map(|_| CAPTION_POOL[caption_rng.gen_range(0..CAPTION_POOL.len())].to_string())
                .collect();
            samples.push(Sample {
                image_id: format!("{}-v{view}", loc.location_id),
                location_id: loc.location_id.clone(),
                coord: loc.coord,
                features,
                caption_tokens,
                address: None,
            });
        }
    }

    Ok((
        Dataset {
            feature_dim: cfg.feature_dim,
            vocab,
            city_tag: cfg.city_tag.clone(),
            samples,
        },
        graph,
    ))
}
