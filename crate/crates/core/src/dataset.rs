//! Precipitation classes, model input assembly, sample catalogues and temporal splits.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::sync::Arc;

use chrono::{DateTime, Datelike};
use serde::Deserialize;
use thiserror::Error;

use crate::grid::{GridError, GridGeometry, RadarGrid, StationTable};
use crate::tensor::Tensor;

/// Number of input radar frames (t−60 … t).
pub const FRAMES: usize = 7;
/// Minutes between consecutive radar frames.
pub const FRAME_STEP_MIN: i64 = 10;
/// Number of nowcast lead times (60 … 360 minutes).
pub const LEADS: usize = 6;
pub const LEAD_STEP_MIN: i64 = 60;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("precipitation rate must be finite and non-negative, got {0}")]
    InvalidRate(f64),
    #[error("target index {0} outside 1..=6")]
    TargetIndex(usize),
    #[error("frame {index} is {got_h}x{got_w}, expected {want_h}x{want_w}")]
    FrameDims {
        index: usize,
        got_h: usize,
        got_w: usize,
        want_h: usize,
        want_w: usize,
    },
    #[error("expected {FRAMES} frames, got {0}")]
    FrameCount(usize),
    #[error("frame timestamps must step by exactly 10 minutes")]
    FrameSpacing,
    #[error("stations outside the output patch: {}", .0.join(", "))]
    OutsidePatch(Vec<String>),
    #[error("unknown station id {0} in observations")]
    UnknownStation(String),
    #[error("invalid observation for {station} at {timestamp}: {value}")]
    InvalidObservation {
        station: String,
        timestamp: i64,
        value: f64,
    },
    #[error("timestamp {0} is not a valid date")]
    BadTimestamp(i64),
    #[error("split file {path}: {reason}")]
    SplitFile { path: String, reason: String },
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Ordinal precipitation class; `Others < Light < Heavy`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum PrecipClass {
    Others = 0,
    Light = 1,
    Heavy = 2,
}

impl PrecipClass {
    pub const ALL: [PrecipClass; 3] = [PrecipClass::Others, PrecipClass::Light, PrecipClass::Heavy];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Member of the merged RAIN event (LIGHT or HEAVY).
    pub fn is_rain(self) -> bool {
        self != PrecipClass::Others
    }
}

impl fmt::Display for PrecipClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PrecipClass::Others => "OTHERS",
            PrecipClass::Light => "LIGHT",
            PrecipClass::Heavy => "HEAVY",
        })
    }
}

/// Binary events scored by the verification metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Event {
    /// LIGHT or HEAVY (at least 1 mm/hr).
    Rain,
    Heavy,
}

impl Event {
    pub const ALL: [Event; 2] = [Event::Rain, Event::Heavy];

    pub fn contains(self, class: PrecipClass) -> bool {
        match self {
            Event::Rain => class.is_rain(),
            Event::Heavy => class == PrecipClass::Heavy,
        }
    }

    /// Soft membership from class probabilities `(p_OTHERS, p_LIGHT, p_HEAVY)`.
    pub fn soft_membership(self, probs: [f64; 3]) -> f64 {
        match self {
            Event::Rain => probs[1] + probs[2],
            Event::Heavy => probs[2],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Event::Rain => "RAIN",
            Event::Heavy => "HEAVY",
        }
    }
}

/// Classify an hourly rate: `< 1` OTHERS, `[1, 10)` LIGHT, `≥ 10` HEAVY.
pub fn precip_class(rate_mm_per_hr: f64) -> Result<PrecipClass, DataError> {
    if !rate_mm_per_hr.is_finite() || rate_mm_per_hr < 0.0 {
        return Err(DataError::InvalidRate(rate_mm_per_hr));
    }
    Ok(if rate_mm_per_hr >= 10.0 {
        PrecipClass::Heavy
    } else if rate_mm_per_hr >= 1.0 {
        PrecipClass::Light
    } else {
        PrecipClass::Others
    })
}

/// A label at a station pixel (full-grid coordinates).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationLabel {
    pub station: usize,
    pub row: usize,
    pub col: usize,
    pub class: PrecipClass,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StationTarget {
    pub station: usize,
    pub row: usize,
    pub col: usize,
    pub accum_mm: f64,
}

#[derive(Debug, Clone)]
pub struct NowcastSample {
    /// Oldest first, newest (time t) last.
    pub frames: Vec<Arc<RadarGrid>>,
    /// Lead time is `60 * target_index` minutes.
    pub target_index: usize,
    pub labels: Vec<StationLabel>,
}

#[derive(Debug, Clone)]
pub struct EstimationSample {
    pub frames: Vec<Arc<RadarGrid>>,
    pub targets: Vec<StationTarget>,
}

/// One-hot encoding of the target time, identical at every pixel.
pub fn encode_target_time(target_index: usize, height: usize, width: usize) -> Result<Tensor, DataError> {
    if !(1..=LEADS).contains(&target_index) {
        return Err(DataError::TargetIndex(target_index));
    }
    let mut t = Tensor::zeros([1, LEADS, height, width]);
    t.channel_mut(0, target_index - 1).fill(1.0);
    Ok(t)
}

fn check_frames(frames: &[Arc<RadarGrid>]) -> Result<(usize, usize), DataError> {
    if frames.len() != FRAMES {
        return Err(DataError::FrameCount(frames.len()));
    }
    let (h, w) = (frames[0].height(), frames[0].width());
    for (i, f) in frames.iter().enumerate() {
        if f.height() != h || f.width() != w {
            return Err(DataError::FrameDims {
                index: i,
                got_h: f.height(),
                got_w: f.width(),
                want_h: h,
                want_w: w,
            });
        }
    }
    Ok((h, w))
}

fn frames_tensor(frames: &[Arc<RadarGrid>], extra_channels: usize) -> Result<Tensor, DataError> {
    let (h, w) = check_frames(frames)?;
    let mut t = Tensor::zeros([1, FRAMES + extra_channels, h, w]);
    for (c, f) in frames.iter().enumerate() {
        for (dst, &src) in t.channel_mut(0, c).iter_mut().zip(f.values()) {
            *dst = src as f64;
        }
    }
    Ok(t)
}

/// 13-channel input: frames oldest→newest, then the six target-time channels.
pub fn assemble_nowcast_input(sample: &NowcastSample) -> Result<Tensor, DataError> {
    let mut t = frames_tensor(&sample.frames, LEADS)?;
    if !(1..=LEADS).contains(&sample.target_index) {
        return Err(DataError::TargetIndex(sample.target_index));
    }
    t.channel_mut(0, FRAMES + sample.target_index - 1).fill(1.0);
    Ok(t)
}

/// 7-channel input: frames oldest→newest.
pub fn assemble_estimation_input(sample: &EstimationSample) -> Result<Tensor, DataError> {
    frames_tensor(&sample.frames, 0)
}

/// Same as [`assemble_nowcast_input`] for a bare frame window.
pub fn nowcast_input(frames: &[Arc<RadarGrid>], target_index: usize) -> Result<Tensor, DataError> {
    assemble_nowcast_input(&NowcastSample {
        frames: frames.to_vec(),
        target_index,
        labels: Vec::new(),
    })
}

pub fn bind_station(table: &StationTable, geometry: &GridGeometry) -> Result<StationTable, DataError> {
    Ok(table.bind(geometry)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Pretrain,
    Finetune,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Timestamp lists for every split of both phases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SplitCatalog {
    pub pretrain_train: Vec<i64>,
    pub pretrain_val: Vec<i64>,
    pub finetune_train: Vec<i64>,
    pub finetune_val: Vec<i64>,
    pub test: Vec<i64>,
}

impl SplitCatalog {
    pub fn get(&self, phase: Phase, split: Split) -> &[i64] {
        match (phase, split) {
            (Phase::Pretrain, Split::Train) => &self.pretrain_train,
            (Phase::Pretrain, Split::Val) => &self.pretrain_val,
            (Phase::Finetune, Split::Train) => &self.finetune_train,
            (Phase::Finetune, Split::Val) => &self.finetune_val,
            (_, Split::Test) => &self.test,
        }
    }

    fn named(&self) -> [(&'static str, &Vec<i64>); 5] {
        [
            ("pretrain-train", &self.pretrain_train),
            ("pretrain-val", &self.pretrain_val),
            ("finetune-train", &self.finetune_train),
            ("finetune-val", &self.finetune_val),
            ("test", &self.test),
        ]
    }

    /// Writes one `<split>.txt` per list, one timestamp per line.
    pub fn write_dir(&self, dir: impl AsRef<Path>) -> Result<(), DataError> {
        fs::create_dir_all(dir.as_ref())?;
        for (name, list) in self.named() {
            let body: String = list.iter().map(|t| format!("{t}\n")).collect();
            fs::write(dir.as_ref().join(format!("{name}.txt")), body)?;
        }
        Ok(())
    }

    pub fn read_dir(dir: impl AsRef<Path>) -> Result<Self, DataError> {
        let read = |name: &str| -> Result<Vec<i64>, DataError> {
            let path = dir.as_ref().join(format!("{name}.txt"));
            let text = fs::read_to_string(&path)?;
            text.lines()
                .filter(|l| !l.trim().is_empty())
                .map(|l| {
                    l.trim().parse::<i64>().map_err(|e| DataError::SplitFile {
                        path: path.display().to_string(),
                        reason: format!("{l:?}: {e}"),
                    })
                })
                .collect()
        };
        Ok(Self {
            pretrain_train: read("pretrain-train")?,
            pretrain_val: read("pretrain-val")?,
            finetune_train: read("finetune-train")?,
            finetune_val: read("finetune-val")?,
            test: read("test")?,
        })
    }
}

fn year_month(timestamp_min: i64) -> Result<(i32, u32), DataError> {
    let dt = DateTime::from_timestamp(timestamp_min * 60, 0).ok_or(DataError::BadTimestamp(timestamp_min))?;
    Ok((dt.year(), dt.month()))
}

/// Assigns timestamps to splits by calendar date.
///
/// Pre-training: train 2014–2018, validation 2019, every month.
/// Fine-tuning: the same years restricted to June–September, test 2020 June–September.
pub fn make_splits(timestamps: &[i64]) -> Result<SplitCatalog, DataError> {
    let mut cat = SplitCatalog::default();
    let mut sorted = timestamps.to_vec();
    sorted.sort_unstable();
    sorted.dedup();
    for t in sorted {
        let (year, month) = year_month(t)?;
        let summer = (6..=9).contains(&month);
        match year {
            2014..=2018 => {
                cat.pretrain_train.push(t);
                if summer {
                    cat.finetune_train.push(t);
                }
            }
            2019 => {
                cat.pretrain_val.push(t);
                if summer {
                    cat.finetune_val.push(t);
                }
            }
            2020 if summer => cat.test.push(t),
            _ => {}
        }
    }
    Ok(cat)
}

/// Precipitation accumulated over the 60 minutes ending at the timestamp.
#[derive(Debug, Clone, Default)]
pub struct Observations {
    by_key: HashMap<(usize, i64), f64>,
}

#[derive(Deserialize)]
struct ObservationRecord {
    station_id: String,
    timestamp_minutes: i64,
    accum_mm_60min: f64,
}

impl Observations {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, station: usize, timestamp: i64, accum_mm: f64) {
        self.by_key.insert((station, timestamp), accum_mm);
    }

    pub fn get(&self, station: usize, timestamp: i64) -> Option<f64> {
        self.by_key.get(&(station, timestamp)).copied()
    }

    pub fn len(&self) -> usize {
        self.by_key.len()
    }

    pub fn is_empty(&self) -> bool {
        self.by_key.is_empty()
    }

    /// Reads `station_id,timestamp_minutes,accum_mm_60min`.
    pub fn read_csv(path: impl AsRef<Path>, stations: &StationTable) -> Result<Self, DataError> {
        let mut reader = csv::Reader::from_path(path)?;
        let mut obs = Observations::new();
        for rec in reader.deserialize() {
            let rec: ObservationRecord = rec?;
            let idx = stations
                .index_of(&rec.station_id)
                .ok_or_else(|| DataError::UnknownStation(rec.station_id.clone()))?;
            if !rec.accum_mm_60min.is_finite() || rec.accum_mm_60min < 0.0 {
                return Err(DataError::InvalidObservation {
                    station: rec.station_id,
                    timestamp: rec.timestamp_minutes,
                    value: rec.accum_mm_60min,
                });
            }
            obs.insert(idx, rec.timestamp_minutes, rec.accum_mm_60min);
        }
        Ok(obs)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, stations: &StationTable) -> Result<(), DataError> {
        let mut rows: Vec<_> = self.by_key.iter().collect();
        rows.sort_by_key(|((s, t), _)| (*t, *s));
        let mut out = String::from("station_id,timestamp_minutes,accum_mm_60min\n");
        for ((s, t), v) in rows {
            out.push_str(&format!("{},{},{:?}\n", stations.stations()[*s].id, t, v));
        }
        fs::write(path, out)?;
        Ok(())
    }
}

/// Radar archive, bound stations and gauge observations.
#[derive(Debug, Clone)]
pub struct DataStore {
    grids: BTreeMap<i64, Arc<RadarGrid>>,
    stations: StationTable,
    observations: Observations,
    geometry: GridGeometry,
}

impl DataStore {
    /// Grids are clamped to `[-0.5, r_max - 0.5]` and stations bound to the shared geometry.
    pub fn new(
        grids: Vec<RadarGrid>,
        stations: &StationTable,
        observations: Observations,
        r_max: u32,
    ) -> Result<Self, DataError> {
        let first = grids.first().ok_or_else(|| DataError::FrameCount(0))?;
        let geometry = first.geometry();
        let mut map = BTreeMap::new();
        for (i, g) in grids.into_iter().enumerate() {
            if g.height() != geometry.height || g.width() != geometry.width {
                return Err(DataError::FrameDims {
                    index: i,
                    got_h: g.height(),
                    got_w: g.width(),
                    want_h: geometry.height,
                    want_w: geometry.width,
                });
            }
            map.insert(g.timestamp(), Arc::new(g.clamped(r_max)));
        }
        let stations = bind_station(stations, &geometry)?;
        Ok(Self {
            grids: map,
            stations,
            observations,
            geometry,
        })
    }

    /// Loads `frames/*.rgr`, `stations.csv` and `observations.csv` from a data directory.
    pub fn load_dir(dir: impl AsRef<Path>, r_max: u32) -> Result<Self, DataError> {
        let dir = dir.as_ref();
        let mut paths: Vec<_> = fs::read_dir(dir.join("frames"))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "rgr"))
            .collect();
        paths.sort();
        let grids = paths
            .iter()
            .map(crate::grid::read_radar_grid)
            .collect::<Result<Vec<_>, _>>()?;
        let stations = StationTable::read_csv(dir.join("stations.csv"))?;
        let observations = Observations::read_csv(dir.join("observations.csv"), &stations)?;
        Self::new(grids, &stations, observations, r_max)
    }

    /// Every grid mean-pooled by `factor`, stations re-bound to the coarser geometry.
    pub fn pooled(&self, factor: usize) -> Result<Self, DataError> {
        let grids = self
            .grids
            .values()
            .map(|g| crate::grid::mean_pool(g, factor))
            .collect::<Result<Vec<_>, _>>()?;
        let unbound = StationTable::new(
            self.stations
                .stations()
                .iter()
                .map(|s| crate::grid::Station { pixel: None, ..s.clone() })
                .collect(),
        )?;
        // values are already clamped, so re-clamping is a no-op
        Self::new(grids, &unbound, self.observations.clone(), u32::MAX)
    }

    pub fn geometry(&self) -> GridGeometry {
        self.geometry
    }

    pub fn stations(&self) -> &StationTable {
        &self.stations
    }

    pub fn observations(&self) -> &Observations {
        &self.observations
    }

    pub fn grid(&self, timestamp: i64) -> Option<&Arc<RadarGrid>> {
        self.grids.get(&timestamp)
    }

    pub fn timestamps(&self) -> impl Iterator<Item = i64> + '_ {
        self.grids.keys().copied()
    }

    pub fn station_pixel(&self, station: usize) -> (usize, usize) {
        self.stations.stations()[station].pixel.expect("stations are bound at construction")
    }

    /// Errors unless every station lies inside the model's output patch.
    pub fn check_patch(&self, offset: usize, out_hw: usize) -> Result<(), DataError> {
        let outside: Vec<String> = self
            .stations
            .stations()
            .iter()
            .filter(|s| {
                let (r, c) = s.pixel.unwrap();
                r < offset || c < offset || r >= offset + out_hw || c >= offset + out_hw
            })
            .map(|s| s.id.clone())
            .collect();
        if outside.is_empty() {
            Ok(())
        } else {
            Err(DataError::OutsidePatch(outside))
        }
    }

    /// The seven frames t−60 … t, or `None` when any is absent or has missing cells.
    pub fn frame_window(&self, t: i64) -> Option<Vec<Arc<RadarGrid>>> {
        (0..FRAMES as i64)
            .map(|k| {
                let ts = t - (FRAMES as i64 - 1 - k) * FRAME_STEP_MIN;
                self.grids.get(&ts).filter(|g| !g.has_missing()).cloned()
            })
            .collect()
    }

    fn class_labels(&self, window_end: i64) -> Vec<StationLabel> {
        (0..self.stations.len())
            .filter_map(|s| {
                let accum = self.observations.get(s, window_end)?;
                let class = precip_class(accum).ok()?;
                let (row, col) = self.station_pixel(s);
                Some(StationLabel { station: s, row, col, class })
            })
            .collect()
    }

    /// Stations without an observation for the label window are dropped individually.
    pub fn nowcast_sample(&self, t: i64, target_index: usize) -> Option<NowcastSample> {
        if !(1..=LEADS).contains(&target_index) {
            return None;
        }
        let frames = self.frame_window(t)?;
        let labels = self.class_labels(t + target_index as i64 * LEAD_STEP_MIN);
        Some(NowcastSample {
            frames,
            target_index,
            labels,
        })
    }

    pub fn estimation_sample(&self, t: i64) -> Option<EstimationSample> {
        let frames = self.frame_window(t)?;
        let targets = (0..self.stations.len())
            .filter_map(|s| {
                let accum_mm = self.observations.get(s, t)?;
                let (row, col) = self.station_pixel(s);
                Some(StationTarget { station: s, row, col, accum_mm })
            })
            .collect();
        Some(EstimationSample { frames, targets })
    }

    /// Class at the station for the hour ending at `t`.
    pub fn current_class(&self, station: usize, t: i64) -> Option<PrecipClass> {
        precip_class(self.observations.get(station, t)?).ok()
    }

    /// Anchors from `candidates` that have a complete, gap-free input window
    /// and, when `lookahead` is set, every pre-training target frame.
    pub fn usable_anchors(&self, candidates: &[i64], lookahead: bool) -> Vec<i64> {
        candidates
            .iter()
            .copied()
            .filter(|&t| self.frame_window(t).is_some())
            .filter(|&t| {
                !lookahead
                    || (1..=LEADS as i64).all(|k| {
                        self.grids
                            .get(&(t + k * LEAD_STEP_MIN))
                            .is_some()
                    })
            })
            .collect()
    }
}

/// Anchors drawn from one store.
#[derive(Debug, Clone)]
pub struct SampleSet<'a> {
    pub store: &'a DataStore,
    pub anchors: Vec<i64>,
}

impl<'a> SampleSet<'a> {
    pub fn new(store: &'a DataStore, anchors: Vec<i64>) -> Self {
        Self { store, anchors }
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Station;
    use chrono::{NaiveDate, TimeZone, Utc};

    fn minutes(y: i32, m: u32, d: u32) -> i64 {
        let date = NaiveDate::from_ymd_opt(y, m, d).unwrap().and_hms_opt(0, 0, 0).unwrap();
        Utc.from_utc_datetime(&date).timestamp() / 60
    }

    #[test]
    fn class_thresholds() {
        assert_eq!(precip_class(0.5).unwrap(), PrecipClass::Others);
        assert_eq!(precip_class(1.0).unwrap(), PrecipClass::Light);
        assert_eq!(precip_class(9.999).unwrap(), PrecipClass::Light);
        assert_eq!(precip_class(10.0).unwrap(), PrecipClass::Heavy);
        assert!(precip_class(-0.1).is_err());
        assert!(precip_class(f64::NAN).is_err());
    }

    #[test]
    fn target_time_one_hot() {
        let t = encode_target_time(3, 2, 2).unwrap();
        assert_eq!(t.shape(), [1, 6, 2, 2]);
        for c in 0..6 {
            let expect = if c == 2 { 1.0 } else { 0.0 };
            assert!(t.channel(0, c).iter().all(|&v| v == expect));
        }
        let t = encode_target_time(1, 1, 1).unwrap();
        assert_eq!(t.data(), &[1.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
        assert!(encode_target_time(0, 1, 1).is_err());
        assert!(encode_target_time(7, 1, 1).is_err());
    }

    fn frames(h: usize, w: usize) -> Vec<Arc<RadarGrid>> {
        (0..7)
            .map(|k| {
                Arc::new(
                    RadarGrid::new(k * 10, h, w, 1.0, 38.0, 126.0, vec![k as f32; h * w]).unwrap(),
                )
            })
            .collect()
    }

    #[test]
    fn nowcast_input_layout() {
        let sample = NowcastSample {
            frames: frames(3, 4),
            target_index: 2,
            labels: vec![],
        };
        let t = assemble_nowcast_input(&sample).unwrap();
        assert_eq!(t.shape(), [1, 13, 3, 4]);
        for k in 0..7 {
            assert!(t.channel(0, k).iter().all(|&v| v == k as f64));
        }
        assert!(t.channel(0, 8).iter().all(|&v| v == 1.0));
        assert!(t.channel(0, 7).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_index_changes_input() {
        let f = frames(2, 2);
        let inputs: Vec<_> = (1..=6).map(|k| nowcast_input(&f, k).unwrap()).collect();
        for i in 0..6 {
            for j in i + 1..6 {
                assert_ne!(inputs[i].data(), inputs[j].data());
            }
        }
    }

    #[test]
    fn estimation_input_layout_and_errors() {
        let sample = EstimationSample {
            frames: frames(2, 2),
            targets: vec![],
        };
        let t = assemble_estimation_input(&sample).unwrap();
        assert_eq!(t.shape(), [1, 7, 2, 2]);
        assert_eq!(t.channel(0, 6)[0], 6.0);

        let mut bad = frames(2, 2);
        bad[3] = Arc::new(RadarGrid::new(30, 3, 2, 1.0, 38.0, 126.0, vec![0.0; 6]).unwrap());
        let err = assemble_estimation_input(&EstimationSample { frames: bad, targets: vec![] });
        assert!(matches!(err, Err(DataError::FrameDims { index: 3, .. })));
    }

    #[test]
    fn splits_by_calendar() {
        let spring = minutes(2017, 3, 15);
        let test = minutes(2020, 7, 1);
        let val = minutes(2019, 8, 1);
        let summer = minutes(2016, 6, 1);
        let cat = make_splits(&[spring, test, val, summer, minutes(2021, 7, 1), minutes(2020, 1, 5)]).unwrap();
        assert_eq!(cat.pretrain_train, vec![summer, spring]);
        assert_eq!(cat.finetune_train, vec![summer]);
        assert_eq!(cat.pretrain_val, vec![val]);
        assert_eq!(cat.finetune_val, vec![val]);
        assert_eq!(cat.test, vec![test]);
    }

    #[test]
    fn split_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cat = make_splits(&[minutes(2015, 7, 2), minutes(2019, 6, 3), minutes(2020, 9, 30)]).unwrap();
        cat.write_dir(dir.path()).unwrap();
        assert_eq!(SplitCatalog::read_dir(dir.path()).unwrap(), cat);
    }

    fn tiny_store() -> DataStore {
        let grids: Vec<_> = (0..50)
            .map(|k| RadarGrid::new(k * 10, 8, 8, 1.0, 38.0, 126.0, vec![20.0 + k as f32; 64]).unwrap())
            .collect();
        let geo = grids[0].geometry();
        let (lat, lon) = geo.cell_center(4, 4);
        let (lat2, lon2) = geo.cell_center(2, 5);
        let table = StationTable::new(vec![
            Station { id: "a".into(), lat, lon, pixel: None },
            Station { id: "b".into(), lat: lat2, lon: lon2, pixel: None },
        ])
        .unwrap();
        let mut obs = Observations::new();
        for t in (0..500).step_by(10) {
            obs.insert(0, t, 12.0);
            if t != 120 {
                obs.insert(1, t, 0.2);
            }
        }
        DataStore::new(grids, &table, obs, 100).unwrap()
    }

    #[test]
    fn samples_drop_missing_stations_only() {
        let store = tiny_store();
        let s = store.nowcast_sample(60, 1).unwrap();
        assert_eq!(s.labels.len(), 1);
        assert_eq!(s.labels[0].class, PrecipClass::Heavy);
        assert_eq!((s.labels[0].row, s.labels[0].col), (4, 4));
        let ts: Vec<_> = s.frames.iter().map(|f| f.timestamp()).collect();
        assert_eq!(ts, vec![0, 10, 20, 30, 40, 50, 60]);
        assert_eq!(store.nowcast_sample(70, 1).unwrap().labels.len(), 2);
        assert!(store.nowcast_sample(50, 1).is_none());
    }

    #[test]
    fn nan_window_is_skipped() {
        let mut grids: Vec<_> = (0..10)
            .map(|k| RadarGrid::new(k * 10, 2, 2, 1.0, 38.0, 126.0, vec![1.0; 4]).unwrap())
            .collect();
        grids[3] = grids[3].with_values(vec![1.0, f32::NAN, 1.0, 1.0]).unwrap();
        let store = DataStore::new(grids, &StationTable::default(), Observations::new(), 100).unwrap();
        assert!(store.frame_window(60).is_none());
        assert!(store.frame_window(90).is_none());
        assert_eq!(store.usable_anchors(&[60, 90, 100], false), Vec::<i64>::new());
        let grids: Vec<_> = (0..12)
            .map(|k| RadarGrid::new(k * 10, 2, 2, 1.0, 38.0, 126.0, vec![1.0; 4]).unwrap())
            .collect();
        let store = DataStore::new(grids, &StationTable::default(), Observations::new(), 100).unwrap();
        assert_eq!(store.usable_anchors(&[60, 100, 110, 120], false), vec![60, 100, 110]);
    }

    #[test]
    fn patch_check_lists_outsiders() {
        let store = tiny_store();
        store.check_patch(2, 4).unwrap();
        match store.check_patch(3, 2) {
            Err(DataError::OutsidePatch(ids)) => assert_eq!(ids, vec!["b"]),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn observation_csv_round_trip() {
        let store = tiny_store();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("obs.csv");
        store.observations().write_csv(&p, store.stations()).unwrap();
        let back = Observations::read_csv(&p, store.stations()).unwrap();
        assert_eq!(back.len(), store.observations().len());
        assert_eq!(back.get(1, 130), Some(0.2));
        assert_eq!(back.get(1, 120), None);
    }

    #[test]
    fn pooled_store_rebinds_stations() {
        let store = tiny_store();
        let p = store.pooled(2).unwrap();
        assert_eq!(p.geometry().height, 4);
        assert_eq!(p.station_pixel(0), (2, 2));
    }
}
