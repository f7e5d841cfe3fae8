//! Radar reflectivity grids, the RGR1 container, and station tables.
//!
//! RGR1 layout (little-endian):
//!
//! | field          | type   | bytes |
//! |----------------|--------|-------|
//! | magic `RGR1`   | [u8;4] | 4     |
//! | version (= 1)  | u8     | 1     |
//! | height         | u32    | 4     |
//! | width          | u32    | 4     |
//! | resolution_km  | f32    | 4     |
//! | timestamp      | i64    | 8     |
//! | origin_lat     | f64    | 8     |
//! | origin_lon     | f64    | 8     |
//! | values         | f32 × height·width, row-major, north row first |
//!
//! Missing cells are stored as quiet NaN.

use std::collections::HashSet;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

pub const RGR1_MAGIC: [u8; 4] = *b"RGR1";
pub const RGR1_VERSION: u8 = 1;
pub const RGR1_HEADER_LEN: usize = 41;

/// Default upper bound on reflectivity classes.
pub const DEFAULT_R_MAX: u32 = 100;

/// Kilometres per degree of latitude (mean Earth radius 6371.0088 km).
pub const KM_PER_DEG_LAT: f64 = 6371.0088 * std::f64::consts::PI / 180.0;

#[derive(Debug, Error)]
pub enum GridError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("bad magic {0:?}, expected \"RGR1\"")]
    BadMagic([u8; 4]),
    #[error("unsupported RGR1 version {0}")]
    UnsupportedVersion(u8),
    #[error("file truncated: {len} bytes, header needs {RGR1_HEADER_LEN}")]
    Truncated { len: usize },
    #[error("payload mismatch: header declares {height}x{width} ({expected} bytes), payload has {actual} bytes")]
    PayloadMismatch {
        height: u32,
        width: u32,
        expected: usize,
        actual: usize,
    },
    #[error("invalid grid dimensions {height}x{width} with {len} values")]
    Dimensions { height: usize, width: usize, len: usize },
    #[error("resolution must be positive and finite, got {0}")]
    Resolution(f32),
    #[error("pooling factor {factor} does not divide grid {height}x{width}")]
    PoolFactor { factor: usize, height: usize, width: usize },
    #[error("station table: {0}")]
    Stations(String),
    #[error("stations outside the grid: {}", .0.join(", "))]
    StationsOutside(Vec<String>),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
}

/// One timestamped reflectivity field in dBZ.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarGrid {
    timestamp: i64,
    height: usize,
    width: usize,
    resolution_km: f32,
    origin_lat: f64,
    origin_lon: f64,
    values: Vec<f32>,
}

/// Placement of a grid on the Earth: north-west cell centre plus cell size.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridGeometry {
    pub height: usize,
    pub width: usize,
    pub resolution_km: f64,
    pub origin_lat: f64,
    pub origin_lon: f64,
}

impl RadarGrid {
    pub fn new(
        timestamp: i64,
        height: usize,
        width: usize,
        resolution_km: f32,
        origin_lat: f64,
        origin_lon: f64,
        values: Vec<f32>,
    ) -> Result<Self, GridError> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(GridError::Dimensions {
                height,
                width,
                len: values.len(),
            });
        }
        if !(resolution_km.is_finite() && resolution_km > 0.0) {
            return Err(GridError::Resolution(resolution_km));
        }
        Ok(Self {
            timestamp,
            height,
            width,
            resolution_km,
            origin_lat,
            origin_lon,
            values,
        })
    }

    pub fn timestamp(&self) -> i64 {
        self.timestamp
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn resolution_km(&self) -> f32 {
        self.resolution_km
    }

    pub fn origin(&self) -> (f64, f64) {
        (self.origin_lat, self.origin_lon)
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.width + col]
    }

    pub fn geometry(&self) -> GridGeometry {
        GridGeometry {
            height: self.height,
            width: self.width,
            resolution_km: self.resolution_km as f64,
            origin_lat: self.origin_lat,
            origin_lon: self.origin_lon,
        }
    }

    pub fn has_missing(&self) -> bool {
        self.values.iter().any(|v| v.is_nan())
    }

    /// Same grid with every value passed through [`clamp_reflectivity`].
    pub fn clamped(&self, r_max: u32) -> RadarGrid {
        let values = self
            .values
            .iter()
            .map(|&v| clamp_reflectivity(v as f64, r_max) as f32)
            .collect();
        RadarGrid {
            values,
            ..self.clone()
        }
    }

    /// Same geometry and timestamp, different payload.
    pub fn with_values(&self, values: Vec<f32>) -> Result<RadarGrid, GridError> {
        RadarGrid::new(
            self.timestamp,
            self.height,
            self.width,
            self.resolution_km,
            self.origin_lat,
            self.origin_lon,
            values,
        )
    }

    /// Exact byte equality, NaN payloads included.
    pub fn bit_eq(&self, other: &RadarGrid) -> bool {
        self.timestamp == other.timestamp
            && self.height == other.height
            && self.width == other.width
            && self.resolution_km.to_bits() == other.resolution_km.to_bits()
            && self.origin_lat.to_bits() == other.origin_lat.to_bits()
            && self.origin_lon.to_bits() == other.origin_lon.to_bits()
            && self
                .values
                .iter()
                .zip(&other.values)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::with_capacity(RGR1_HEADER_LEN + 4 * self.values.len());
        buf.extend_from_slice(&RGR1_MAGIC);
        buf.push(RGR1_VERSION);
        buf.extend_from_slice(&(self.height as u32).to_le_bytes());
        buf.extend_from_slice(&(self.width as u32).to_le_bytes());
        buf.extend_from_slice(&self.resolution_km.to_le_bytes());
        buf.extend_from_slice(&self.timestamp.to_le_bytes());
        buf.extend_from_slice(&self.origin_lat.to_le_bytes());
        buf.extend_from_slice(&self.origin_lon.to_le_bytes());
        for v in &self.values {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, GridError> {
        if bytes.len() < 4 {
            return Err(GridError::Truncated { len: bytes.len() });
        }
        let magic: [u8; 4] = bytes[0..4].try_into().unwrap();
        if magic != RGR1_MAGIC {
            return Err(GridError::BadMagic(magic));
        }
        if bytes.len() < RGR1_HEADER_LEN {
            return Err(GridError::Truncated { len: bytes.len() });
        }
        let version = bytes[4];
        if version != RGR1_VERSION {
            return Err(GridError::UnsupportedVersion(version));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
        let f64_at = |o: usize| f64::from_le_bytes(bytes[o..o + 8].try_into().unwrap());
        let height = u32_at(5);
        let width = u32_at(9);
        let resolution_km = f32::from_le_bytes(bytes[13..17].try_into().unwrap());
        let timestamp = i64::from_le_bytes(bytes[17..25].try_into().unwrap());
        let origin_lat = f64_at(25);
        let origin_lon = f64_at(33);
        let payload = &bytes[RGR1_HEADER_LEN..];
        let expected = (height as usize) * (width as usize) * 4;
        if payload.len() != expected {
            return Err(GridError::PayloadMismatch {
                height,
                width,
                expected,
                actual: payload.len(),
            });
        }
        let values = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        RadarGrid::new(
            timestamp,
            height as usize,
            width as usize,
            resolution_km,
            origin_lat,
            origin_lon,
            values,
        )
    }
}

pub fn read_radar_grid(path: impl AsRef<Path>) -> Result<RadarGrid, GridError> {
    let bytes = fs::read(path)?;
    RadarGrid::from_bytes(&bytes)
}

pub fn write_radar_grid(grid: &RadarGrid, path: impl AsRef<Path>) -> Result<(), GridError> {
    let mut file = fs::File::create(path)?;
    file.write_all(&grid.to_bytes())?;
    Ok(())
}

/// Clamp a reflectivity into `[-0.5, r_max - 0.5]`. NaN (missing) passes through.
pub fn clamp_reflectivity(r: f64, r_max: u32) -> f64 {
    if r.is_nan() {
        return r;
    }
    (-0.5f64).max(r).min(r_max as f64 - 0.5)
}

/// Downsample by averaging `factor`×`factor` blocks, ignoring missing cells.
pub fn mean_pool(grid: &RadarGrid, factor: usize) -> Result<RadarGrid, GridError> {
    let (h, w) = (grid.height, grid.width);
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return Err(GridError::PoolFactor {
            factor,
            height: h,
            width: w,
        });
    }
    let (ph, pw) = (h / factor, w / factor);
    let mut values = Vec::with_capacity(ph * pw);
    for pr in 0..ph {
        for pc in 0..pw {
            let mut sum = 0.0f64;
            let mut count = 0usize;
            for r in pr * factor..(pr + 1) * factor {
                for c in pc * factor..(pc + 1) * factor {
                    let v = grid.values[r * w + c];
                    if !v.is_nan() {
                        sum += v as f64;
                        count += 1;
                    }
                }
            }
            values.push(if count == 0 {
                f32::NAN
            } else {
                (sum / count as f64) as f32
            });
        }
    }
    // The pooled cell centre sits half a coarse cell minus half a fine cell
    // south-east of the original origin.
    let shift_cells = (factor as f64 - 1.0) / 2.0;
    let res = grid.resolution_km as f64;
    let lat = grid.origin_lat - shift_cells * res / KM_PER_DEG_LAT;
    let lon = grid.origin_lon + shift_cells * res / km_per_deg_lon(grid.origin_lat);
    RadarGrid::new(
        grid.timestamp,
        ph,
        pw,
        grid.resolution_km * factor as f32,
        lat,
        lon,
        values,
    )
}

fn km_per_deg_lon(lat: f64) -> f64 {
    KM_PER_DEG_LAT * lat.to_radians().cos()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Station {
    pub id: String,
    pub lat: f64,
    pub lon: f64,
    /// Grid cell once bound to a geometry.
    pub pixel: Option<(usize, usize)>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StationTable {
    stations: Vec<Station>,
}

#[derive(Deserialize)]
struct StationRecord {
    station_id: String,
    lat: f64,
    lon: f64,
}

impl StationTable {
    pub fn new(stations: Vec<Station>) -> Result<Self, GridError> {
        let mut seen = HashSet::new();
        for s in &stations {
            if !seen.insert(s.id.as_str()) {
                return Err(GridError::Stations(format!("duplicate station id {}", s.id)));
            }
        }
        Ok(Self { stations })
    }

    pub fn stations(&self) -> &[Station] {
        &self.stations
    }

    pub fn len(&self) -> usize {
        self.stations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stations.is_empty()
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.stations.iter().position(|s| s.id == id)
    }

    /// Reads a CSV with header `station_id,lat,lon`.
    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self, GridError> {
        let mut reader = csv::Reader::from_path(path)?;
        let headers = reader.headers()?.clone();
        if headers.iter().collect::<Vec<_>>() != ["station_id", "lat", "lon"] {
            return Err(GridError::Stations(format!(
                "unexpected header {:?}",
                headers.iter().collect::<Vec<_>>()
            )));
        }
        let mut stations = Vec::new();
        for rec in reader.deserialize() {
            let rec: StationRecord = rec?;
            stations.push(Station {
                id: rec.station_id,
                lat: rec.lat,
                lon: rec.lon,
                pixel: None,
            });
        }
        Self::new(stations)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<(), GridError> {
        let mut out = String::from("station_id,lat,lon\n");
        for s in &self.stations {
            out.push_str(&format!("{},{:?},{:?}\n", s.id, s.lat, s.lon));
        }
        fs::write(path, out)?;
        Ok(())
    }

    /// Binds every station to the nearest cell centre of `geometry`.
    ///
    /// Ties go to the smaller row, then the smaller column.
    pub fn bind(&self, geometry: &GridGeometry) -> Result<StationTable, GridError> {
        let mut outside = Vec::new();
        let mut stations = Vec::with_capacity(self.stations.len());
        for s in &self.stations {
            let (row_f, col_f) = geometry.fractional_cell(s.lat, s.lon);
            let row = nearest_index(row_f);
            let col = nearest_index(col_f);
            if row < 0 || col < 0 || row >= geometry.height as i64 || col >= geometry.width as i64 {
                outside.push(s.id.clone());
                continue;
            }
            stations.push(Station {
                pixel: Some((row as usize, col as usize)),
                ..s.clone()
            });
        }
        if !outside.is_empty() {
            return Err(GridError::StationsOutside(outside));
        }
        Ok(StationTable { stations })
    }
}

/// Nearest integer with exact halves rounded down.
fn nearest_index(x: f64) -> i64 {
    (x - 0.5).ceil() as i64
}

impl GridGeometry {
    /// Fractional (row, col) of a coordinate, cell centres at integers.
    pub fn fractional_cell(&self, lat: f64, lon: f64) -> (f64, f64) {
        let row = (self.origin_lat - lat) * KM_PER_DEG_LAT / self.resolution_km;
        let col = (lon - self.origin_lon) * km_per_deg_lon(self.origin_lat) / self.resolution_km;
        (row, col)
    }

    /// Latitude/longitude of a cell centre.
    pub fn cell_center(&self, row: usize, col: usize) -> (f64, f64) {
        let lat = self.origin_lat - row as f64 * self.resolution_km / KM_PER_DEG_LAT;
        let lon = self.origin_lon + col as f64 * self.resolution_km / km_per_deg_lon(self.origin_lat);
        (lat, lon)
    }
}


#[cfg(test)]
mod props {
    use super::*;
    use proptest::prelude::*;

    fn grid_strategy() -> impl Strategy<Value = RadarGrid> {
        (1usize..6, 1usize..6, 1usize..4).prop_flat_map(|(bh, bw, f)| {
            let (h, w) = (bh * f, bw * f);
            proptest::collection::vec(prop_oneof![9 => -10.0f32..120.0, 1 => Just(f32::NAN)], h * w)
                .prop_map(move |v| RadarGrid::new(1_500_000, h, w, 1.0, 37.5, 127.0, v).unwrap())
        })
    }

    proptest! {
        #[test]
        fn clamp_is_idempotent_and_bounded(r in -1e3f64..1e3, r_max in 1u32..400) {
            let once = clamp_reflectivity(r, r_max);
            prop_assert_eq!(clamp_reflectivity(once, r_max), once);
            prop_assert!((-0.5..=r_max as f64 - 0.5).contains(&once));
        }

        #[test]
        fn read_after_write_is_identity(g in grid_strategy()) {
            prop_assert!(RadarGrid::from_bytes(&g.to_bytes()).unwrap().bit_eq(&g));
        }

        #[test]
        fn mean_pool_conserves_mass(v in proptest::collection::vec(-10.0f32..120.0, 36), f in prop::sample::select(vec![1usize, 2, 3, 6])) {
            let g = RadarGrid::new(0, 6, 6, 1.0, 37.5, 127.0, v).unwrap();
            let pooled = mean_pool(&g, f).unwrap();
            let before: f64 = g.values().iter().map(|&x| x as f64).sum();
            let after: f64 = pooled.values().iter().map(|&x| x as f64).sum::<f64>() * (f * f) as f64;
            prop_assert!((before - after).abs() <= 1e-4 * before.abs().max(1.0));
        }
    }
}
