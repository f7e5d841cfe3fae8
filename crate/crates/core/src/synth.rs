//! Deterministic synthetic radar sequences with known reflectivity→rain law.
//!
//! Fields are advecting Gaussian reflectivity bumps over a constant
//! background. True rain rates come from the scenario's Z-R law applied to the
//! stored 32-bit frame values, so the Z-R baseline with the same law is an
//! exact oracle for station accumulations.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::{NaiveDate, TimeZone, Utc};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::baselines::{zr_rate, ZrParams};
use crate::dataset::{
    make_splits, precip_class, DataError, DataStore, Observations, PrecipClass, SplitCatalog, FRAMES,
    FRAME_STEP_MIN, LEADS, LEAD_STEP_MIN,
};
use crate::grid::{write_radar_grid, GridError, RadarGrid, Station, StationTable, DEFAULT_R_MAX};

/// Relative tolerance on the achieved HEAVY label fraction.
pub const PREVALENCE_TOLERANCE: f64 = 0.2;
const BISECTION_STEPS: usize = 60;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("infeasible scenario: {0}")]
    Infeasible(String),
    #[error("prevalence {target} unreachable: closest achievable fraction {achieved}")]
    Unreachable { target: f64, achieved: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthScenario {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub resolution_km: f32,
    pub origin_lat: f64,
    pub origin_lon: f64,
    /// Rain cells per sequence.
    pub n_cells: usize,
    /// Peak reflectivity above background (dBZ), sampled uniformly.
    pub amplitude_dbz: (f64, f64),
    /// Gaussian standard deviation in cells, sampled uniformly.
    pub sigma_cells: (f64, f64),
    /// Largest steering speed in cells per 10 minutes.
    pub max_speed: f64,
    pub background_dbz: f64,
    /// Target fraction of HEAVY station labels.
    pub heavy_prevalence: f64,
    pub zr: ZrParams,
    pub r_max: u32,
    /// Multiplier on every amplitude; tuned to reach the target prevalence.
    pub amplitude_scale: f64,
}

impl SynthScenario {
    /// A 64×64, 1 km scenario with about 2% HEAVY labels.
    pub fn desk(seed: u64) -> Self {
        Self {
            seed,
            height: 64,
            width: 64,
            resolution_km: 1.0,
            origin_lat: 37.5,
            origin_lon: 127.0,
            n_cells: 10,
            amplitude_dbz: (18.0, 42.0),
            sigma_cells: (3.0, 7.0),
            max_speed: 0.5,
            background_dbz: 2.0,
            heavy_prevalence: 0.02,
            zr: ZrParams::FITTED,
            r_max: DEFAULT_R_MAX,
            amplitude_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Infeasible(m.to_string()));
        if self.height == 0 || self.width == 0 {
            return bad("grid must be non-empty");
        }
        if !(self.resolution_km > 0.0) {
            return bad("resolution must be positive");
        }
        let top = self.r_max as f64 - 0.5;
        let (lo, hi) = self.amplitude_dbz;
        if !(0.0 <= lo && lo <= hi && hi <= top) {
            return bad("amplitudes must lie in [0, r_max - 0.5]");
        }
        if !(self.background_dbz >= -0.5 && self.background_dbz <= top) {
            return bad("background must lie in [-0.5, r_max - 0.5]");
        }
        if !(self.sigma_cells.0 > 0.0 && self.sigma_cells.0 <= self.sigma_cells.1) {
            return bad("cell widths must be positive");
        }
        if !(self.max_speed >= 0.0) {
            return bad("speed must be non-negative");
        }
        if !(self.heavy_prevalence > 0.0 && self.heavy_prevalence < 1.0) {
            return bad("prevalence target must lie in (0, 1)");
        }
        if !(self.amplitude_scale >= 0.0 && self.amplitude_scale.is_finite()) {
            return bad("amplitude scale must be finite and non-negative");
        }
        Ok(())
    }
}

/// One advecting Gaussian rain cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainCell {
    pub row: f64,
    pub col: f64,
    pub amplitude: f64,
    pub sigma: f64,
    /// Cells per frame.
    pub velocity: (f64, f64),
}

fn mix(seed: u64, start: i64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ (start as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Rain cells of the sequence starting at `start`, deterministic in `(seed, start)`.
pub fn sequence_cells(s: &SynthScenario, start: i64, length: usize) -> Vec<RainCell> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(s.seed, start));
    let angle = rng.gen_range(0.0..std::f64::consts::TAU);
    let speed = s.max_speed * rng.gen_range(0.3f64..1.0).sqrt();
    let wind = (speed * angle.sin(), speed * angle.cos());
    let jitter = 0.15 * s.max_speed;
    (0..s.n_cells)
        .map(|_| {
            let velocity = (
                wind.0 + rng.gen_range(-1.0..=1.0) * jitter,
                wind.1 + rng.gen_range(-1.0..=1.0) * jitter,
            );
            // place cells so that they cross the grid around mid-sequence
            let mid = length as f64 / 2.0;
            let row = rng.gen_range(0.0..s.height as f64) - velocity.0 * mid;
            let col = rng.gen_range(0.0..s.width as f64) - velocity.1 * mid;
            RainCell {
                row,
                col,
                amplitude: rng.gen_range(s.amplitude_dbz.0..=s.amplitude_dbz.1),
                sigma: rng.gen_range(s.sigma_cells.0..=s.sigma_cells.1),
                velocity,
            }
        })
        .collect()
}

/// Unscaled sum of bumps at `(row, col)` in frame `k`.
fn bump_sum(cells: &[RainCell], k: usize, row: usize, col: usize) -> f64 {
    let mut total = 0.0;
    for c in cells {
        let dr = row as f64 - (c.row + c.velocity.0 * k as f64);
        let dc = col as f64 - (c.col + c.velocity.1 * k as f64);
        total += c.amplitude * (-(dr * dr + dc * dc) / (2.0 * c.sigma * c.sigma)).exp();
    }
    total
}

fn field_value(s: &SynthScenario, bumps: f64) -> f32 {
    let top = s.r_max as f64 - 0.5;
    (s.background_dbz + s.amplitude_scale * bumps).clamp(-0.5, top) as f32
}

/// Frames plus per-pixel true rain rates.
#[derive(Debug, Clone)]
pub struct SynthSequence {
    pub frames: Vec<RadarGrid>,
    /// Row-major rates (mm/hr) per frame.
    pub rates: Vec<Vec<f64>>,
}

/// `length` frames at 10-minute spacing starting at `start`.
pub fn gen_sequence(s: &SynthScenario, start: i64, length: usize) -> Result<SynthSequence, SynthError> {
    s.validate()?;
    let cells = sequence_cells(s, start, length);
    let mut frames = Vec::with_capacity(length);
    let mut rates = Vec::with_capacity(length);
    for k in 0..length {
        let mut values = Vec::with_capacity(s.height * s.width);
        for r in 0..s.height {
            for c in 0..s.width {
                values.push(field_value(s, bump_sum(&cells, k, r, c)));
            }
        }
        rates.push(values.iter().map(|&v| zr_rate(v as f64, s.zr)).collect());
        frames.push(RadarGrid::new(
            start + k as i64 * FRAME_STEP_MIN,
            s.height,
            s.width,
            s.resolution_km,
            s.origin_lat,
            s.origin_lon,
            values,
        )?);
    }
    Ok(SynthSequence { frames, rates })
}

/// Accumulation over the seven frames ending at `end` (mean rate × 1 h) and its class.
pub fn gen_station_truth(
    rates: &[Vec<f64>],
    width: usize,
    pixels: &[(usize, usize)],
    end: usize,
) -> Vec<(f64, PrecipClass)> {
    pixels
        .iter()
        .map(|&(r, c)| {
            let accum = window_mean(rates[end + 1 - FRAMES..=end].iter().map(|f| f[r * width + c]));
            (accum, precip_class(accum).expect("rates are finite and non-negative"))
        })
        .collect()
}

/// Sums in order, then divides by the count (the Z-R estimator's exact arithmetic).
fn window_mean(values: impl Iterator<Item = f64>) -> f64 {
    let mut total = 0.0;
    let mut n = 0usize;
    for v in values {
        total += v;
        n += 1;
    }
    total / n as f64
}

/// Sizes and calendar placement of a synthetic archive.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPlan {
    /// Summer sequences in 2014–2018 (pre-training and fine-tuning training data).
    pub train_sequences: usize,
    /// Summer sequences in 2019.
    pub val_sequences: usize,
    /// Summer sequences in 2020.
    pub test_sequences: usize,
    /// Frames per sequence; 48 frames give six anchors with all six lead times.
    pub sequence_frames: usize,
    pub n_stations: usize,
    /// Stations are placed inside `[offset, offset + size)` on both axes.
    pub patch_offset: usize,
    pub patch_size: usize,
}

impl SynthPlan {
    pub fn validate(&self, s: &SynthScenario) -> Result<(), SynthError> {
        let min_frames = FRAMES + (LEADS as i64 * LEAD_STEP_MIN / FRAME_STEP_MIN) as usize;
        if self.sequence_frames < min_frames {
            return Err(SynthError::Infeasible(format!(
                "sequences need at least {min_frames} frames"
            )));
        }
        if self.patch_offset + self.patch_size > s.height.min(s.width) {
            return Err(SynthError::Infeasible("station patch exceeds the grid".into()));
        }
        if self.n_stations == 0 || self.n_stations > self.patch_size * self.patch_size {
            return Err(SynthError::Infeasible(format!(
                "cannot place {} stations in a {}x{} patch",
                self.n_stations, self.patch_size, self.patch_size
            )));
        }
        if self.train_sequences > 5 * 4 * 28 || self.val_sequences > 4 * 28 || self.test_sequences > 4 * 28 {
            return Err(SynthError::Infeasible("too many sequences for the calendar layout".into()));
        }
        Ok(())
    }
}

fn minutes(y: i32, m: u32, d: u32, h: u32) -> i64 {
    let dt = NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(h, 0, 0).unwrap();
    Utc.from_utc_datetime(&dt).timestamp() / 60
}

/// Sequence start times: one per day, June–September, cycling through the years.
pub fn sequence_starts(plan: &SynthPlan) -> Vec<i64> {
    let place = |years: &[i32], i: usize| {
        let y = years[i % years.len()];
        let rest = i / years.len();
        minutes(y, 6 + (rest % 4) as u32, 1 + (rest / 4 % 28) as u32, 0)
    };
    let train_years = [2014, 2015, 2016, 2017, 2018];
    let mut starts: Vec<i64> = (0..plan.train_sequences).map(|i| place(&train_years, i)).collect();
    starts.extend((0..plan.val_sequences).map(|i| place(&[2019], i)));
    starts.extend((0..plan.test_sequences).map(|i| place(&[2020], i)));
    starts
}

/// A generated archive ready for training and evaluation.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub scenario: SynthScenario,
    pub plan: SynthPlan,
    pub frames: Vec<RadarGrid>,
    pub stations: StationTable,
    pub observations: Observations,
    pub splits: SplitCatalog,
}

impl SynthDataset {
    pub fn store(&self) -> Result<DataStore, SynthError> {
        Ok(DataStore::new(
            self.frames.clone(),
            &self.stations,
            self.observations.clone(),
            self.scenario.r_max,
        )?)
    }

    /// Fraction of HEAVY labels among all observations.
    pub fn heavy_fraction(&self) -> f64 {
        heavy_fraction(self.observations_iter())
    }

    fn observations_iter(&self) -> impl Iterator<Item = f64> + '_ {
        let ts: BTreeSet<i64> = self.frames.iter().map(|f| f.timestamp()).collect();
        ts.into_iter()
            .flat_map(move |t| (0..self.stations.len()).filter_map(move |s| self.observations.get(s, t)))
    }

    /// `frames/<ts>.rgr`, `stations.csv`, `observations.csv`, `splits/*.txt`.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), SynthError> {
        let dir = dir.as_ref();
        let frames = dir.join("frames");
        std::fs::create_dir_all(&frames).map_err(DataError::from)?;
        for f in &self.frames {
            write_radar_grid(f, frames.join(format!("{:012}.rgr", f.timestamp())))?;
        }
        self.stations.write_csv(dir.join("stations.csv"))?;
        self.observations.write_csv(dir.join("observations.csv"), &self.stations)?;
        self.splits.write_dir(dir.join("splits"))?;
        Ok(())
    }
}

fn heavy_fraction(accums: impl Iterator<Item = f64>) -> f64 {
    let (mut heavy, mut total) = (0usize, 0usize);
    for a in accums {
        total += 1;
        if precip_class(a).map(|c| c == PrecipClass::Heavy).unwrap_or(false) {
            heavy += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        heavy as f64 / total as f64
    }
}

fn place_stations(s: &SynthScenario, plan: &SynthPlan) -> Result<(StationTable, Vec<(usize, usize)>), SynthError> {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(s.seed, -1));
    let mut chosen = BTreeSet::new();
    while chosen.len() < plan.n_stations {
        let r = plan.patch_offset + rng.gen_range(0..plan.patch_size);
        let c = plan.patch_offset + rng.gen_range(0..plan.patch_size);
        chosen.insert((r, c));
    }
    let probe = RadarGrid::new(0, s.height, s.width, s.resolution_km, s.origin_lat, s.origin_lon, vec![0.0; s.height * s.width])?;
    let geo = probe.geometry();
    let pixels: Vec<(usize, usize)> = chosen.into_iter().collect();
    let stations = pixels
        .iter()
        .enumerate()
        .map(|(i, &(r, c))| {
            let (lat, lon) = geo.cell_center(r, c);
            Station {
                id: format!("S{i:03}"),
                lat,
                lon,
                pixel: None,
            }
        })
        .collect();
    let table = StationTable::new(stations)?.bind(&geo)?;
    let bound: Vec<_> = table.stations().iter().map(|s| s.pixel.unwrap()).collect();
    debug_assert_eq!(bound, pixels);
    Ok((table, pixels))
}

/// Station-pixel bump sums for every frame of every sequence (scale-independent).
fn station_bumps(s: &SynthScenario, plan: &SynthPlan, starts: &[i64], pixels: &[(usize, usize)]) -> Vec<Vec<Vec<f64>>> {
    starts
        .iter()
        .map(|&start| {
            let cells = sequence_cells(s, start, plan.sequence_frames);
            (0..plan.sequence_frames)
                .map(|k| pixels.iter().map(|&(r, c)| bump_sum(&cells, k, r, c)).collect())
                .collect()
        })
        .collect()
}

fn label_accums(s: &SynthScenario, bumps: &[Vec<Vec<f64>>]) -> Vec<f64> {
    let mut out = Vec::new();
    for seq in bumps {
        let rates: Vec<Vec<f64>> = seq
            .iter()
            .map(|f| f.iter().map(|&b| zr_rate(field_value(s, b) as f64, s.zr)).collect())
            .collect();
        let n_st = seq.first().map_or(0, Vec::len);
        for end in FRAMES - 1..seq.len() {
            for st in 0..n_st {
                out.push(window_mean(rates[end + 1 - FRAMES..=end].iter().map(|f| f[st])));
            }
        }
    }
    out
}

/// Generates an archive whose HEAVY label fraction is within ±20% (relative)
/// of `scenario.heavy_prevalence`, tuning the amplitude scale by bisection.
pub fn gen_imbalanced_set(scenario: &SynthScenario, plan: &SynthPlan) -> Result<SynthDataset, SynthError> {
    scenario.validate()?;
    plan.validate(scenario)?;
    let target = scenario.heavy_prevalence;
    let starts = sequence_starts(plan);
    let (stations, pixels) = place_stations(scenario, plan)?;
    let bumps = station_bumps(scenario, plan, &starts, &pixels);

    let fraction_at = |scale: f64| {
        let s = SynthScenario {
            amplitude_scale: scale,
            ..scenario.clone()
        };
        heavy_fraction(label_accums(&s, &bumps).into_iter())
    };
    // fraction is non-decreasing in the scale
    let (mut lo, mut hi) = (0.0, 1.0);
    while fraction_at(hi) < target {
        hi *= 2.0;
        if hi > 1e3 {
            return Err(SynthError::Unreachable {
                target,
                achieved: fraction_at(hi),
            });
        }
    }
    let mut best = (hi, fraction_at(hi));
    for _ in 0..BISECTION_STEPS {
        let mid = 0.5 * (lo + hi);
        let f = fraction_at(mid);
        if (f - target).abs() < (best.1 - target).abs() {
            best = (mid, f);
        }
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    if (best.1 - target).abs() > PREVALENCE_TOLERANCE * target {
        return Err(SynthError::Unreachable {
            target,
            achieved: best.1,
        });
    }
    let tuned = SynthScenario {
        amplitude_scale: best.0,
        ..scenario.clone()
    };

    let mut frames = Vec::with_capacity(starts.len() * plan.sequence_frames);
    let mut observations = Observations::new();
    for &start in &starts {
        let seq = gen_sequence(&tuned, start, plan.sequence_frames)?;
        for end in FRAMES - 1..plan.sequence_frames {
            let t = start + end as i64 * FRAME_STEP_MIN;
            for (st, (accum, _)) in gen_station_truth(&seq.rates, tuned.width, &pixels, end).into_iter().enumerate() {
                observations.insert(st, t, accum);
            }
        }
        frames.extend(seq.frames);
    }
    let timestamps: Vec<i64> = frames.iter().map(|f| f.timestamp()).collect();
    let splits = make_splits(&timestamps)?;
    Ok(SynthDataset {
        scenario: tuned,
        plan: plan.clone(),
        frames,
        stations,
        observations,
        splits,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::zr_hourly_estimate;
    use std::sync::Arc;

    fn small() -> SynthScenario {
        SynthScenario {
            height: 32,
            width: 32,
            n_cells: 4,
            ..SynthScenario::desk(5)
        }
    }

    #[test]
    fn sequences_are_deterministic() {
        let s = small();
        let a = gen_sequence(&s, 1000, 5).unwrap();
        let b = gen_sequence(&s, 1000, 5).unwrap();
        assert!(a.frames.iter().zip(&b.frames).all(|(x, y)| x.bit_eq(y)));
        let c = gen_sequence(&s, 1010, 5).unwrap();
        assert!(!a.frames[0].bit_eq(&c.frames[0]));
    }

    #[test]
    fn zero_velocity_is_stationary() {
        let s = SynthScenario {
            max_speed: 0.0,
            ..small()
        };
        let seq = gen_sequence(&s, 0, 6).unwrap();
        assert!(seq.frames.iter().all(|f| f.values() == seq.frames[0].values()));
    }

    #[test]
    fn mass_is_conserved_away_from_edges() {
        let s = SynthScenario {
            height: 64,
            width: 64,
            ..small()
        };
        let cells = [RainCell {
            row: 30.0,
            col: 28.0,
            amplitude: 30.0,
            sigma: 3.0,
            velocity: (0.4, 0.3),
        }];
        let mass = |k: usize| -> f64 {
            (0..64)
                .flat_map(|r| (0..64).map(move |c| (r, c)))
                .map(|(r, c)| field_value(&s, bump_sum(&cells, k, r, c)) as f64 - s.background_dbz)
                .sum()
        };
        let m0 = mass(0);
        for k in 1..6 {
            assert!((mass(k) - m0).abs() / m0 < 0.01);
        }
    }

    #[test]
    fn station_truth_examples() {
        let constant = |v: f64| vec![vec![v]; 7];
        let (a, c) = gen_station_truth(&constant(2.0), 1, &[(0, 0)], 6)[0];
        assert_eq!((a, c), (2.0, PrecipClass::Light));
        assert_eq!(gen_station_truth(&constant(12.0), 1, &[(0, 0)], 6)[0].1, PrecipClass::Heavy);
        let ramp: Vec<Vec<f64>> = (0..7).map(|k| vec![14.0 * k as f64 / 6.0]).collect();
        let (a, c) = gen_station_truth(&ramp, 1, &[(0, 0)], 6)[0];
        assert!((a - 7.0).abs() < 1e-12);
        assert_eq!(c, PrecipClass::Light);
    }

    #[test]
    fn zr_estimate_reproduces_truth_exactly() {
        let s = small();
        let seq = gen_sequence(&s, 0, 9).unwrap();
        let frames: Vec<Arc<RadarGrid>> = seq.frames[2..9].iter().cloned().map(Arc::new).collect();
        let pixels: Vec<(usize, usize)> = (0..32).map(|i| (i, (7 * i) % 32)).collect();
        let truth = gen_station_truth(&seq.rates, 32, &pixels, 8);
        for (p, (accum, _)) in pixels.iter().zip(truth) {
            let est = zr_hourly_estimate(&frames, s.zr, *p).unwrap();
            assert_eq!(est.accum_mm.to_bits(), accum.to_bits());
        }
    }

    #[test]
    fn invalid_scenarios_rejected() {
        let zero = SynthScenario {
            heavy_prevalence: 0.0,
            ..small()
        };
        assert!(matches!(zero.validate(), Err(SynthError::Infeasible(_))));
        let loud = SynthScenario {
            amplitude_dbz: (10.0, 120.0),
            ..small()
        };
        assert!(loud.validate().is_err());
    }

    fn plan() -> SynthPlan {
        SynthPlan {
            train_sequences: 30,
            val_sequences: 4,
            test_sequences: 4,
            sequence_frames: 48,
            n_stations: 40,
            patch_offset: 21,
            patch_size: 22,
        }
    }

    #[test]
    fn prevalence_is_reached_and_deterministic() {
        let s = SynthScenario::desk(3);
        let d = gen_imbalanced_set(&s, &plan()).unwrap();
        let f = d.heavy_fraction();
        assert!((0.016..=0.024).contains(&f), "fraction {f}");
        let again = gen_imbalanced_set(&s, &plan()).unwrap();
        assert_eq!(again.scenario.amplitude_scale, d.scenario.amplitude_scale);
        assert_eq!(again.heavy_fraction(), f);
        assert_eq!(d.stations.len(), 40);
        for st in d.stations.stations() {
            let (r, c) = st.pixel.unwrap();
            assert!((21..43).contains(&r) && (21..43).contains(&c));
        }
    }

    #[test]
    fn splits_are_populated() {
        let d = gen_imbalanced_set(&SynthScenario::desk(3), &plan()).unwrap();
        assert_eq!(d.splits.finetune_train.len(), 30 * 48);
        assert_eq!(d.splits.pretrain_train.len(), 30 * 48);
        assert_eq!(d.splits.finetune_val.len(), 4 * 48);
        assert_eq!(d.splits.test.len(), 4 * 48);
        let store = d.store().unwrap();
        let anchors = store.usable_anchors(&d.splits.test, true);
        assert_eq!(anchors.len(), 4 * 6);
    }
}
