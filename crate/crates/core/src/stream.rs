//! Time-indexed sample streams and rolling construction of adaptation tasks.
//!
//! A task at tick `t` pairs the `memory_k` ticks before `t` (train window)
//! with the `horizon_tau` ticks starting at `t` (test window). Ticks are
//! counted from the first timestamp of the stream.

use std::io::{Read, Write};
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub timestamp: i64,
    pub features: Vec<f64>,
    pub label: f64,
}

impl Sample {
    pub fn new(timestamp: i64, features: Vec<f64>, label: f64) -> Self {
        Self {
            timestamp,
            features,
            label,
        }
    }
}

/// Ordered samples sharing one feature dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeIndexedStream {
    samples: Vec<Sample>,
    period_length: u64,
    feature_dim: usize,
}

impl TimeIndexedStream {
    pub fn new(samples: Vec<Sample>, period_length: u64) -> Result<Self> {
        if period_length == 0 {
            return Err(Error::InvalidStream("period_length must be >= 1".into()));
        }
        let first = samples
            .first()
            .ok_or_else(|| Error::InvalidStream("stream has no samples".into()))?;
        let feature_dim = first.features.len();
        if feature_dim == 0 {
            return Err(Error::InvalidStream("feature dimension must be >= 1".into()));
        }
        for (i, s) in samples.iter().enumerate() {
            if s.features.len() != feature_dim {
                return Err(Error::InvalidStream(format!(
                    "sample {i} has {} features, expected {feature_dim}",
                    s.features.len()
                )));
            }
            if !s.label.is_finite() || s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidStream(format!(
                    "sample {i} (timestamp {}) has a non-finite value",
                    s.timestamp
                )));
            }
            if i > 0 && s.timestamp < samples[i - 1].timestamp {
                return Err(Error::InvalidStream(format!(
                    "timestamps not sorted: {} follows {} at row {i}",
                    s.timestamp,
                    samples[i - 1].timestamp
                )));
            }
        }
        Ok(Self {
            samples,
            period_length,
            feature_dim,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn period_length(&self) -> u64 {
        self.period_length
    }

    pub fn first_tick(&self) -> i64 {
        self.samples[0].timestamp
    }

    pub fn last_tick(&self) -> i64 {
        self.samples[self.samples.len() - 1].timestamp
    }

    /// Number of ticks covered, first to last inclusive.
    pub fn tick_length(&self) -> u64 {
        (self.last_tick() - self.first_tick()) as u64 + 1
    }

    /// Index range of samples with `start <= timestamp < end`.
    pub fn index_range(&self, start: i64, end: i64) -> Range<usize> {
        let lo = self.samples.partition_point(|s| s.timestamp < start);
        let hi = self.samples.partition_point(|s| s.timestamp < end);
        lo..hi.max(lo)
    }

    pub fn read_csv<R: Read>(reader: R, period_length: u64) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let headers = rdr.headers()?.clone();
        let cols: Vec<&str> = headers.iter().map(str::trim).collect();
        if cols.len() < 3 || cols[0] != "timestamp" || cols[cols.len() - 1] != "label" {
            return Err(Error::InvalidStream(
                "header must be `timestamp,f0,...,f{m-1},label`".into(),
            ));
        }
        let m = cols.len() - 2;
        for (j, c) in cols[1..=m].iter().enumerate() {
            if *c != format!("f{j}") {
                return Err(Error::InvalidStream(format!(
                    "feature column {j} named `{c}`, expected `f{j}`"
                )));
            }
        }
        let mut samples = Vec::new();
        for (row, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let bad = |what: &str| Error::InvalidStream(format!("row {}: bad {what}", row + 1));
            let timestamp: i64 = rec[0].trim().parse().map_err(|_| bad("timestamp"))?;
            let features = (1..=m)
                .map(|j| rec[j].trim().parse::<f64>().map_err(|_| bad("feature")))
                .collect::<Result<Vec<_>>>()?;
            let label: f64 = rec[m + 1].trim().parse().map_err(|_| bad("label"))?;
            samples.push(Sample::new(timestamp, features, label));
        }
        Self::new(samples, period_length)
    }

    pub fn from_csv_path(path: impl AsRef<Path>, period_length: u64) -> Result<Self> {
        let f = std::fs::File::open(path)?;
        Self::read_csv(std::io::BufReader::new(f), period_length)
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["timestamp".to_string()];
        header.extend((0..self.feature_dim).map(|j| format!("f{j}")));
        header.push("label".into());
        w.write_record(&header)?;
        for s in &self.samples {
            let mut rec = Vec::with_capacity(self.feature_dim + 2);
            rec.push(s.timestamp.to_string());
            rec.extend(s.features.iter().map(f64::to_string));
            rec.push(s.label.to_string());
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Rolling task geometry, all in ticks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskParams {
    pub memory_k: u64,
    pub horizon_tau: u64,
    pub interval: u64,
    /// Admit tasks whose memory window is clipped by the start of the stream.
    #[serde(default)]
    pub allow_partial_memory: bool,
}

impl TaskParams {
    pub fn new(memory_k: u64, horizon_tau: u64, interval: u64) -> Self {
        Self {
            memory_k,
            horizon_tau,
            interval,
            allow_partial_memory: false,
        }
    }
}

/// One (train window, test window) pair at a rolling timestamp.
#[derive(Debug, Clone)]
pub struct AdaptationTask<'a> {
    stream: &'a TimeIndexedStream,
    task_time: i64,
    train_ticks: Range<i64>,
    test_ticks: Range<i64>,
    train: Range<usize>,
    test: Range<usize>,
}

impl<'a> AdaptationTask<'a> {
    /// Task at absolute tick `task_time` with train ticks
    /// `[train_start, task_time)` and test ticks `[task_time, test_end)`.
    pub fn new(
        stream: &'a TimeIndexedStream,
        train_start: i64,
        task_time: i64,
        test_end: i64,
    ) -> Result<Self> {
        if !(train_start < task_time && task_time < test_end) {
            return Err(Error::InvalidTaskParams(format!(
                "task windows [{train_start}, {task_time}) / [{task_time}, {test_end}) are empty"
            )));
        }
        Ok(Self {
            stream,
            task_time,
            train_ticks: train_start..task_time,
            test_ticks: task_time..test_end,
            train: stream.index_range(train_start, task_time),
            test: stream.index_range(task_time, test_end),
        })
    }

    pub fn stream(&self) -> &'a TimeIndexedStream {
        self.stream
    }

    pub fn task_time(&self) -> i64 {
        self.task_time
    }

    pub fn train_ticks(&self) -> Range<i64> {
        self.train_ticks.clone()
    }

    pub fn test_ticks(&self) -> Range<i64> {
        self.test_ticks.clone()
    }

    pub fn train_window(&self) -> &'a [Sample] {
        &self.stream.samples()[self.train.clone()]
    }

    pub fn test_window(&self) -> &'a [Sample] {
        &self.stream.samples()[self.test.clone()]
    }

    pub fn train_indices(&self) -> Range<usize> {
        self.train.clone()
    }

    pub fn test_indices(&self) -> Range<usize> {
        self.test.clone()
    }
}

/// Chronological train/test partition of tasks.
#[derive(Debug, Clone)]
pub struct TaskSplit<'a> {
    pub train_tasks: Vec<AdaptationTask<'a>>,
    pub test_tasks: Vec<AdaptationTask<'a>>,
    pub split_time: i64,
}

/// Number of tasks [`generate_tasks`] yields for a stream of `length` ticks
/// with a full memory window.
pub fn task_count(length: u64, memory_k: u64, horizon_tau: u64, interval: u64) -> u64 {
    if length < memory_k + horizon_tau || interval == 0 {
        0
    } else {
        (length - memory_k - horizon_tau) / interval + 1
    }
}

/// Tasks at ticks `k, k+interval, ...` (relative to the stream start) while
/// `t + tau <= length`. With `allow_partial_memory` the first task sits at
/// `interval` and early train windows are clipped at the stream start.
pub fn generate_tasks<'a>(
    stream: &'a TimeIndexedStream,
    params: &TaskParams,
) -> Result<Vec<AdaptationTask<'a>>> {
    let TaskParams {
        memory_k,
        horizon_tau,
        interval,
        allow_partial_memory,
    } = *params;
    if memory_k == 0 || horizon_tau == 0 || interval == 0 {
        return Err(Error::InvalidTaskParams(
            "memory_k, horizon_tau and interval must all be >= 1".into(),
        ));
    }
    let length = stream.tick_length();
    let first_offset = if allow_partial_memory {
        interval.min(memory_k)
    } else {
        memory_k
    };
    if length < first_offset + horizon_tau {
        return Err(Error::InsufficientStream {
            length,
            required: first_offset + horizon_tau,
        });
    }
    let origin = stream.first_tick();
    let mut tasks = Vec::new();
    let mut t = first_offset;
    while t + horizon_tau <= length {
        let train_start = t.saturating_sub(memory_k);
        tasks.push(AdaptationTask::new(
            stream,
            origin + train_start as i64,
            origin + t as i64,
            origin + (t + horizon_tau) as i64,
        )?);
        t += interval;
    }
    Ok(tasks)
}

/// Partition tasks at `split_time`: a task belongs to the train side only if
/// its whole test window ends at or before `split_time`.
pub fn split_tasks<'a>(tasks: Vec<AdaptationTask<'a>>, split_time: i64) -> Result<TaskSplit<'a>> {
    let (train_tasks, test_tasks): (Vec<_>, Vec<_>) = tasks
        .into_iter()
        .partition(|t| t.test_ticks().end <= split_time);
    if train_tasks.is_empty() || test_tasks.is_empty() {
        return Err(Error::DegenerateSplit {
            train: train_tasks.len(),
            test: test_tasks.len(),
        });
    }
    Ok(TaskSplit {
        train_tasks,
        test_tasks,
        split_time,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(len: i64) -> TimeIndexedStream {
        let samples = (0..len)
            .map(|t| Sample::new(t, vec![t as f64], 2.0 * t as f64))
            .collect();
        TimeIndexedStream::new(samples, 5).unwrap()
    }

    #[test]
    fn sixteen_tasks_on_length_100() {
        let s = ramp(100);
        let tasks = generate_tasks(&s, &TaskParams::new(20, 5, 5)).unwrap();
        let times: Vec<i64> = tasks.iter().map(|t| t.task_time()).collect();
        assert_eq!(times, (20..=95).step_by(5).collect::<Vec<_>>());
        assert_eq!(tasks.len() as u64, task_count(100, 20, 5, 5));
    }

    #[test]
    fn exactly_one_task_fits() {
        let s = ramp(25);
        let tasks = generate_tasks(&s, &TaskParams::new(20, 5, 1)).unwrap();
        assert_eq!(tasks.len(), 1);
        assert_eq!(tasks[0].task_time(), 20);
        assert_eq!(tasks[0].train_window().len(), 20);
        assert_eq!(tasks[0].test_window().len(), 5);
    }

    #[test]
    fn too_short_stream_is_rejected() {
        let s = ramp(24);
        let err = generate_tasks(&s, &TaskParams::new(20, 5, 1)).unwrap_err();
        assert!(matches!(err, Error::InsufficientStream { length: 24, required: 25 }));
        assert!(err.to_string().contains("insufficient stream"));
    }

    #[test]
    fn partial_memory_starts_early() {
        let s = ramp(30);
        let p = TaskParams {
            allow_partial_memory: true,
            ..TaskParams::new(20, 5, 5)
        };
        let tasks = generate_tasks(&s, &p).unwrap();
        assert_eq!(tasks[0].task_time(), 5);
        assert_eq!(tasks[0].train_window().len(), 5);
        assert_eq!(tasks.last().unwrap().train_window().len(), 20);
    }

    #[test]
    fn split_ten_six() {
        let s = ramp(100);
        let tasks = generate_tasks(&s, &TaskParams::new(20, 5, 5)).unwrap();
        // task 10 sits at t=65 and its test window ends at 70
        let split = split_tasks(tasks, 70).unwrap();
        assert_eq!(split.train_tasks.len(), 10);
        assert_eq!(split.test_tasks.len(), 6);
    }

    #[test]
    fn straddling_task_goes_to_test_side() {
        let s = ramp(100);
        let tasks = generate_tasks(&s, &TaskParams::new(20, 5, 5)).unwrap();
        let split = split_tasks(tasks, 68).unwrap();
        assert_eq!(split.train_tasks.len(), 9);
        assert_eq!(split.test_tasks[0].task_time(), 65);
        for t in &split.train_tasks {
            assert!(t.test_ticks().end <= 68);
        }
    }

    #[test]
    fn degenerate_split() {
        let s = ramp(100);
        let tasks = generate_tasks(&s, &TaskParams::new(20, 5, 5)).unwrap();
        let err = split_tasks(tasks, 0).unwrap_err();
        assert!(err.to_string().contains("degenerate split"));
    }

    #[test]
    fn unsorted_rows_rejected() {
        let csv = "timestamp,f0,label\n1,0.5,1.0\n0,0.2,2.0\n";
        let err = TimeIndexedStream::read_csv(csv.as_bytes(), 1).unwrap_err();
        assert!(err.to_string().contains("not sorted"));
    }

    #[test]
    fn csv_header_checked() {
        let csv = "time,f0,label\n0,0.5,1.0\n";
        assert!(TimeIndexedStream::read_csv(csv.as_bytes(), 1).is_err());
        let csv = "timestamp,x,label\n0,0.5,1.0\n";
        assert!(TimeIndexedStream::read_csv(csv.as_bytes(), 1).is_err());
    }

    #[test]
    fn csv_roundtrip() {
        let s = ramp(10);
        let mut buf = Vec::new();
        s.write_csv(&mut buf).unwrap();
        let back = TimeIndexedStream::read_csv(buf.as_slice(), 5).unwrap();
        assert_eq!(back, s);
    }
}
