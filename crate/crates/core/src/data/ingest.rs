//! CSV ingestion of real recordings.
//!
//! Schema: a header `subject,activity,rate,ax,ay,az,gx,gy,gz`, then one row
//! per sample. `activity` is a class index in `0..8` or one of
//! [`ACTIVITY_NAMES`]. Consecutive rows of one subject with the same activity
//! and rate form one recording; rows of different subjects may interleave.

use std::collections::HashMap;
use std::fs::File;
use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::synth::stratified_train_counts;
use super::{
    featurize, slide_interval, windows, ClientShard, RawRecording, Sample, NUM_CLASSES,
    REFERENCE_INTERVAL, REFERENCE_SECS, WINDOW_LEN,
};
use crate::error::{Error, Result};
use crate::model::derive_seed;

pub const ACTIVITY_NAMES: [&str; NUM_CLASSES] = [
    "forward_lying",
    "front_knees_lying",
    "sideward_lying",
    "back_sitting_chair",
    "sit_chair",
    "car_step_in",
    "car_step_out",
    "daily",
];

const HEADER: [&str; 9] = [
    "subject", "activity", "rate", "ax", "ay", "az", "gx", "gy", "gz",
];

pub fn ingest_csv(path: impl AsRef<Path>) -> Result<Vec<RawRecording>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    ingest_csv_reader(file)
}

fn parse_activity(field: &str, line: usize) -> Result<usize> {
    let field = field.trim();
    if let Ok(idx) = field.parse::<usize>() {
        if idx < NUM_CLASSES {
            return Ok(idx);
        }
    }
    ACTIVITY_NAMES
        .iter()
        .position(|&name| name == field)
        .ok_or_else(|| Error::Parse {
            line,
            message: format!("unknown activity label {field:?}"),
        })
}

fn parse_num<T: std::str::FromStr>(field: &str, name: &str, line: usize) -> Result<T> {
    field.trim().parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {name} value {field:?}"),
    })
}

pub fn ingest_csv_reader(input: impl Read) -> Result<Vec<RawRecording>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_reader(input);
    let mut records = reader.records();

    let header = match records.next() {
        Some(Ok(h)) => h,
        Some(Err(e)) => return Err(csv_error(e, 1)),
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "missing header".into(),
            })
        }
    };
    let names: Vec<&str> = header.iter().map(str::trim).collect();
    if names != HEADER {
        return Err(Error::Parse {
            line: 1,
            message: format!(
                "expected header {}, found {}",
                HEADER.join(","),
                names.join(",")
            ),
        });
    }

    // Open recording per subject: (index into `recordings`, activity, rate bits).
    let mut open: HashMap<u32, (usize, usize, u64)> = HashMap::new();
    let mut recordings: Vec<(u32, usize, f64, Vec<Sample>)> = Vec::new();
    for (row, record) in records.enumerate() {
        let fallback_line = row + 2;
        let record = record.map_err(|e| csv_error(e, fallback_line))?;
        let line = record
            .position()
            .map_or(fallback_line, |p| p.line() as usize);
        if record.len() != HEADER.len() {
            return Err(Error::Parse {
                line,
                message: format!("expected {} fields, found {}", HEADER.len(), record.len()),
            });
        }
        let subject: u32 = parse_num(&record[0], "subject", line)?;
        let activity = parse_activity(&record[1], line)?;
        let rate: f64 = parse_num(&record[2], "rate", line)?;
        if !(rate > 0.0) || !rate.is_finite() {
            return Err(Error::Parse {
                line,
                message: format!("sample rate must be positive, found {rate}"),
            });
        }
        let mut sample = [0.0; 6];
        for (k, v) in sample.iter_mut().enumerate() {
            *v = parse_num::<f64>(&record[3 + k], HEADER[3 + k], line)?;
            if !v.is_finite() {
                return Err(Error::Parse {
                    line,
                    message: format!("non-finite {} value", HEADER[3 + k]),
                });
            }
        }
        let key = (activity, rate.to_bits());
        match open.get(&subject) {
            Some(&(idx, a, r)) if (a, r) == key => recordings[idx].3.push(sample),
            _ => {
                open.insert(subject, (recordings.len(), activity, rate.to_bits()));
                recordings.push((subject, activity, rate, vec![sample]));
            }
        }
    }
    Ok(recordings
        .into_iter()
        .map(|(subject, activity, rate, signal)| RawRecording::new(subject, activity, signal, rate))
        .collect())
}

fn csv_error(e: csv::Error, fallback_line: usize) -> Error {
    let line = e.position().map_or(fallback_line, |p| p.line() as usize);
    Error::Parse {
        line,
        message: e.to_string(),
    }
}

/// One shard per subject, in order of first appearance. Each recording is
/// windowed with the slide interval scaled to its duration; the images are
/// split 80/20 per class after a seeded shuffle.
pub fn shards_from_recordings(recordings: &[RawRecording], seed: u64) -> Result<Vec<ClientShard>> {
    let mut subjects: Vec<u32> = Vec::new();
    for rec in recordings {
        if !subjects.contains(&rec.subject_id) {
            subjects.push(rec.subject_id);
        }
    }
    subjects
        .iter()
        .enumerate()
        .map(|(client_id, &subject)| {
            let mut per_class = vec![Vec::new(); NUM_CLASSES];
            for rec in recordings.iter().filter(|r| r.subject_id == subject) {
                let interval = slide_interval(rec.duration, REFERENCE_INTERVAL, REFERENCE_SECS)?;
                for w in windows(rec, WINDOW_LEN, interval)? {
                    per_class[rec.activity_class].push(featurize(w, rec.activity_class)?);
                }
            }
            let mut counts = [0; NUM_CLASSES];
            for (c, imgs) in per_class.iter().enumerate() {
                counts[c] = imgs.len();
            }
            let train_counts = stratified_train_counts(&counts);
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, client_id as u64));
            let (mut train, mut test) = (Vec::new(), Vec::new());
            for (c, mut imgs) in per_class.into_iter().enumerate() {
                imgs.shuffle(&mut rng);
                let rest = imgs.split_off(train_counts[c]);
                train.extend(imgs);
                test.extend(rest);
            }
            Ok(ClientShard::new(client_id, train, test))
        })
        .collect()
}
