//! Observation streams and their CSV format.
//!
//! The shared schema is four columns: `time_index,age_index,value,denominator`.
//! `time_index` refers to the stream's own reporting grid. `denominator` is
//! the binomial sample size where one exists, the log-scale standard error for
//! point-estimate streams, and blank otherwise.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamKind {
    ConfirmedCases,
    GpConsultations,
    ViroPositivity,
    SeroPrevalence,
    HospAdmissions,
    Deaths,
    IcuPrevalence,
    PointEstimateLogScale,
}

impl StreamKind {
    /// Streams whose values are counts out of an observed denominator.
    pub fn requires_denominator(self) -> bool {
        matches!(
            self,
            StreamKind::ViroPositivity | StreamKind::SeroPrevalence | StreamKind::PointEstimateLogScale
        )
    }

    /// Streams whose values must be nonnegative integers.
    pub fn is_count(self) -> bool {
        !matches!(self, StreamKind::PointEstimateLogScale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Observation {
    pub time_index: usize,
    pub age_index: usize,
    pub value: f64,
    pub denominator: Option<f64>,
    /// Start of the reporting interval, in days; derived from the grid.
    pub day: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataStream {
    pub kind: StreamKind,
    pub grid: TimeGrid,
    pub obs: Vec<Observation>,
}

impl DataStream {
    pub fn new(kind: StreamKind, grid: TimeGrid, mut obs: Vec<Observation>) -> Result<Self> {
        obs.sort_by(|a, b| (a.time_index, a.age_index).cmp(&(b.time_index, b.age_index)));
        for pair in obs.windows(2) {
            if pair[0].time_index == pair[1].time_index && pair[0].age_index == pair[1].age_index {
                return Err(Error::Config(format!(
                    "duplicate observation at time_index {} age_index {}",
                    pair[0].time_index, pair[0].age_index
                )));
            }
        }
        for o in &mut obs {
            if o.time_index >= grid.len {
                return Err(Error::Config(format!(
                    "time_index {} outside reporting grid of length {}",
                    o.time_index, grid.len
                )));
            }
            o.day = grid.time(o.time_index);
            if kind.is_count() {
                if o.value < 0.0 || o.value.fract() != 0.0 {
                    return Err(Error::Config(format!(
                        "stream value {} is not a nonnegative integer count",
                        o.value
                    )));
                }
                if let Some(n) = o.denominator {
                    if n < o.value || n.fract() != 0.0 {
                        return Err(Error::Config(format!(
                            "denominator {} inconsistent with count {}",
                            n, o.value
                        )));
                    }
                }
            } else if let Some(n) = o.denominator {
                if !(n > 0.0) {
                    return Err(Error::Config(format!(
                        "point-estimate scale column must be positive, got {n}"
                    )));
                }
            }
            if kind.requires_denominator() && o.denominator.is_none() {
                return Err(Error::Config(format!(
                    "stream kind {kind:?} requires a denominator at every row"
                )));
            }
        }
        Ok(Self { kind, grid, obs })
    }

    pub fn len(&self) -> usize {
        self.obs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.obs.is_empty()
    }

    /// The observations belonging to one age band, as their own stream.
    pub fn filter_age(&self, age_index: usize) -> Self {
        Self {
            kind: self.kind,
            grid: self.grid,
            obs: self.obs.iter().filter(|o| o.age_index == age_index).cloned().collect(),
        }
    }

    pub fn max_age_index(&self) -> Option<usize> {
        self.obs.iter().map(|o| o.age_index).max()
    }

    pub fn read_csv<R: Read>(reader: R, kind: StreamKind, grid: TimeGrid) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let expected = ["time_index", "age_index", "value", "denominator"];
        let got: Vec<&str> = headers.iter().collect();
        if got != expected {
            return Err(Error::Config(format!(
                "stream CSV header {:?} does not match {:?}",
                got, expected
            )));
        }
        let mut obs = Vec::new();
        for rec in rdr.records() {
            let rec = rec?;
            let parse = |field: &str, name: &str| -> Result<f64> {
                field.trim().parse::<f64>().map_err(|_| {
                    Error::Config(format!("cannot parse {name} value '{field}' in stream CSV"))
                })
            };
            let denominator = match rec.get(3).map(str::trim) {
                None | Some("") => None,
                Some(s) => Some(parse(s, "denominator")?),
            };
            obs.push(Observation {
                time_index: parse(rec.get(0).unwrap_or(""), "time_index")? as usize,
                age_index: parse(rec.get(1).unwrap_or(""), "age_index")? as usize,
                value: parse(rec.get(2).unwrap_or(""), "value")?,
                denominator,
                day: 0.0,
            });
        }
        Self::new(kind, grid, obs)
    }

    pub fn read_csv_path<P: AsRef<Path>>(path: P, kind: StreamKind, grid: TimeGrid) -> Result<Self> {
        let f = std::fs::File::open(path.as_ref())?;
        Self::read_csv(f, kind, grid)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["time_index", "age_index", "value", "denominator"])?;
        for o in &self.obs {
            w.write_record(&[
                o.time_index.to_string(),
                o.age_index.to_string(),
                o.value.to_string(),
                o.denominator.map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_csv_path<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let f = std::fs::File::create(path.as_ref())?;
        self.write_csv(f)
    }
}

/// Streams for one fitting run, keyed by the role they play in the model
/// (for example "sero_post" or "gp_consultations").
#[derive(Debug, Clone, Default)]
pub struct StreamSet {
    streams: BTreeMap<String, DataStream>,
}

impl StreamSet {
    pub fn insert(&mut self, role: &str, stream: DataStream) -> Result<()> {
        if self.streams.contains_key(role) {
            return Err(Error::Config(format!("duplicate stream role '{role}'")));
        }
        self.streams.insert(role.to_string(), stream);
        Ok(())
    }

    pub fn get(&self, role: &str) -> Result<&DataStream> {
        self.streams
            .get(role)
            .ok_or_else(|| Error::Config(format!("no stream bound for role '{role}'")))
    }

    pub fn maybe(&self, role: &str) -> Option<&DataStream> {
        self.streams.get(role)
    }

    pub fn roles(&self) -> impl Iterator<Item = &str> {
        self.streams.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DataStream)> {
        self.streams.iter().map(|(k, v)| (k.as_str(), v))
    }
}

/// Manifest entry pointing at one stream CSV and its reporting grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StreamFileEntry {
    pub path: String,
    pub grid: GridEntry,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GridEntry {
    pub origin: f64,
    pub step: f64,
    pub len: usize,
}

impl GridEntry {
    pub fn to_grid(self) -> Result<TimeGrid> {
        TimeGrid::new(self.origin, self.step, self.len)
    }
}
