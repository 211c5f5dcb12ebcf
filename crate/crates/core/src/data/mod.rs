//! Activity recordings, sliding-window featurization into 20x20 RGB images,
//! and per-client shards.

mod ingest;
mod synth;

pub use ingest::{ingest_csv, ingest_csv_reader, shards_from_recordings, ACTIVITY_NAMES};
pub use synth::{
    flagship_profiles, synth_dataset, synth_dataset_with_noise, HeterogeneityProfile, DEFAULT_NOISE,
};

use std::io::Write;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Batch;

pub const NUM_CLASSES: usize = 8;
pub const IMAGE_SIDE: usize = 20;
pub const IMAGE_CHANNELS: usize = 3;
/// Samples per window: one per pixel of a 20x20 channel.
pub const WINDOW_LEN: usize = IMAGE_SIDE * IMAGE_SIDE;
pub const FEATURE_LEN: usize = WINDOW_LEN * IMAGE_CHANNELS;
pub const SAMPLE_RATE_HZ: f64 = 40.0;
/// Reference slide interval, in samples, for a recording of `REFERENCE_SECS`.
pub const REFERENCE_INTERVAL: usize = 40;
pub const REFERENCE_SECS: f64 = 10.0;

/// One sample: three accelerations then three angular velocities.
pub type Sample = [f64; 6];

#[derive(Debug, Clone, PartialEq)]
pub struct RawRecording {
    pub subject_id: u32,
    pub activity_class: usize,
    pub signal: Vec<Sample>,
    pub sample_rate: f64,
    /// Seconds; equals `signal.len() / sample_rate`.
    pub duration: f64,
}

impl RawRecording {
    pub fn new(
        subject_id: u32,
        activity_class: usize,
        signal: Vec<Sample>,
        sample_rate: f64,
    ) -> Self {
        let duration = signal.len() as f64 / sample_rate;
        Self {
            subject_id,
            activity_class,
            signal,
            sample_rate,
            duration,
        }
    }
}

/// A 20x20 image with three channels stored pixel-interleaved: the value of
/// channel `k` at row `r`, column `c` is `pixels[(r * 20 + c) * 3 + k]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureImage {
    pub label: usize,
    pub pixels: Vec<f64>,
}

impl FeatureImage {
    pub fn pixel(&self, row: usize, col: usize, channel: usize) -> f64 {
        self.pixels[(row * IMAGE_SIDE + col) * IMAGE_CHANNELS + channel]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientShard {
    pub client_id: usize,
    pub train: Vec<FeatureImage>,
    pub test: Vec<FeatureImage>,
    pub class_histogram: [usize; NUM_CLASSES],
}

impl ClientShard {
    pub fn new(client_id: usize, train: Vec<FeatureImage>, test: Vec<FeatureImage>) -> Self {
        let mut class_histogram = [0; NUM_CLASSES];
        for img in &train {
            class_histogram[img.label] += 1;
        }
        Self {
            client_id,
            train,
            test,
            class_histogram,
        }
    }

    pub fn train_batch(&self) -> Batch {
        to_batch(&self.train)
    }

    pub fn test_batch(&self) -> Batch {
        to_batch(&self.test)
    }

    /// One JSON object per line: `{"label": .., "pixels": [1200 floats]}`,
    /// training images first, then test images.
    pub fn write_jsonl(&self, mut out: impl Write) -> std::io::Result<()> {
        for img in self.train.iter().chain(&self.test) {
            serde_json::to_writer(&mut out, img)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

fn to_batch(images: &[FeatureImage]) -> Batch {
    let rows: Vec<Vec<f64>> = images.iter().map(|i| i.pixels.clone()).collect();
    let labels = images.iter().map(|i| i.label).collect();
    if rows.is_empty() {
        return Batch::empty(FEATURE_LEN);
    }
    Batch::from_rows(&rows, labels).expect("feature images have a fixed length")
}

/// Slide interval scaled to the recording duration:
/// `round(i0 * t_type / t0)`, never below 1.
pub fn slide_interval(t_type: f64, i0: usize, t0: f64) -> Result<usize> {
    if !(t_type > 0.0) || !(t0 > 0.0) {
        return Err(Error::input("durations must be positive"));
    }
    if i0 == 0 {
        return Err(Error::input("reference interval must be >= 1"));
    }
    let scaled = (i0 as f64 * t_type / t0).round();
    Ok((scaled as usize).max(1))
}

/// Windows of `window_len` samples starting at `0, interval, 2*interval, ...`
/// while a full window fits.
pub fn windows(rec: &RawRecording, window_len: usize, interval: usize) -> Result<Vec<&[Sample]>> {
    if interval == 0 || window_len == 0 {
        return Err(Error::input("window length and interval must be >= 1"));
    }
    if window_len > rec.signal.len() {
        warn!(
            "recording of subject {} ({} samples) is shorter than a {window_len}-sample window",
            rec.subject_id,
            rec.signal.len()
        );
        return Ok(Vec::new());
    }
    Ok((0..=rec.signal.len() - window_len)
        .step_by(interval)
        .map(|start| &rec.signal[start..start + window_len])
        .collect())
}

/// Maps a 400-sample window to an image: R, G and B carry the x, y and z
/// accelerations, each min-max normalized over the window and laid out
/// row-major. A channel that is constant over the window maps to 0.5.
pub fn featurize(window: &[Sample], label: usize) -> Result<FeatureImage> {
    if window.len() != WINDOW_LEN {
        return Err(Error::input(format!(
            "window has {} samples, expected {WINDOW_LEN}",
            window.len()
        )));
    }
    if label >= NUM_CLASSES {
        return Err(Error::input(format!("label {label} out of range")));
    }
    let mut pixels = vec![0.0; FEATURE_LEN];
    for channel in 0..IMAGE_CHANNELS {
        let (lo, hi) = window
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s[channel]), hi.max(s[channel]))
            });
        let span = hi - lo;
        for (i, s) in window.iter().enumerate() {
            let v = if span > 0.0 && span.is_finite() {
                ((s[channel] - lo) / span).clamp(0.0, 1.0)
            } else {
                0.5
            };
            pixels[i * IMAGE_CHANNELS + channel] = v;
        }
    }
    Ok(FeatureImage { label, pixels })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recording(len: usize) -> RawRecording {
        let signal = (0..len)
            .map(|i| [i as f64, 0.0, 1.0, 0.0, 0.0, 0.0])
            .collect();
        RawRecording::new(1, 0, signal, SAMPLE_RATE_HZ)
    }

    #[test]
    fn reference_interval_for_fall_recordings() {
        assert_eq!(slide_interval(10.0, 40, 10.0).unwrap(), 40);
    }

    #[test]
    fn interval_scales_with_duration() {
        assert_eq!(slide_interval(600.0, 40, 10.0).unwrap(), 2400);
        assert_eq!(slide_interval(10.0, 1, 10.0).unwrap(), 1);
        assert_eq!(slide_interval(0.01, 1, 10.0).unwrap(), 1);
    }

    #[test]
    fn nonpositive_duration_is_rejected() {
        assert!(slide_interval(0.0, 40, 10.0).is_err());
        assert!(slide_interval(10.0, 40, -1.0).is_err());
    }

    #[test]
    fn window_counts() {
        assert_eq!(windows(&recording(400), 400, 40).unwrap().len(), 1);
        let rec = recording(480);
        let w = windows(&rec, 400, 40).unwrap();
        assert_eq!(w.len(), 3);
        let starts: Vec<f64> = w.iter().map(|w| w[0][0]).collect();
        assert_eq!(starts, vec![0.0, 40.0, 80.0]);
        // 600 s at 40 Hz with the scaled interval: floor((24000 - 400) / 2400) + 1.
        assert_eq!(windows(&recording(24_000), 400, 2400).unwrap().len(), 10);
    }

    #[test]
    fn window_longer_than_signal_is_empty() {
        assert!(windows(&recording(399), 400, 40).unwrap().is_empty());
    }

    #[test]
    fn constant_window_is_mid_grey() {
        let window = vec![[3.0; 6]; WINDOW_LEN];
        let img = featurize(&window, 1).unwrap();
        assert!(img.pixels.iter().all(|&p| p == 0.5));
    }

    #[test]
    fn ramp_hits_both_endpoints() {
        let rec = recording(WINDOW_LEN);
        let img = featurize(&rec.signal, 0).unwrap();
        assert_eq!(img.pixel(0, 0, 0), 0.0);
        assert_eq!(img.pixel(19, 19, 0), 1.0);
        assert_eq!(img.pixels.len(), FEATURE_LEN);
    }

    #[test]
    fn wrong_window_length_is_rejected() {
        assert!(featurize(&vec![[0.0; 6]; 399], 0).is_err());
    }

    #[test]
    fn featurize_ignores_positive_affine_rescaling() {
        let window: Vec<Sample> = (0..WINDOW_LEN)
            .map(|i| {
                let t = i as f64 * 0.1;
                [t.sin(), (2.0 * t).cos(), t * t * 0.01, 0.0, 0.0, 0.0]
            })
            .collect();
        let scaled: Vec<Sample> = window
            .iter()
            .map(|s| {
                let mut out = *s;
                for v in out.iter_mut() {
                    *v = 2.5 * *v - 7.0;
                }
                out
            })
            .collect();
        let a = featurize(&window, 3).unwrap();
        let b = featurize(&scaled, 3).unwrap();
        for (x, y) in a.pixels.iter().zip(&b.pixels) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
