//! Synthetic stand-in for a smartphone activity dataset.
//!
//! Each client is one subject with its own gains, tilt and timing habits.
//! Recordings are generated per class at 40 Hz, windowed with the
//! duration-scaled slide interval, and featurized. Class sample counts follow
//! the client's [`HeterogeneityProfile`] by largest-remainder apportionment.

use log::warn;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{
    featurize, slide_interval, windows, ClientShard, FeatureImage, RawRecording, Sample,
    NUM_CLASSES, REFERENCE_INTERVAL, REFERENCE_SECS, SAMPLE_RATE_HZ, WINDOW_LEN,
};
use crate::error::{Error, Result};
use crate::model::derive_seed;

/// Recording length per class: four falls, three fall-like transitions
/// (sit on chair, car step in, car step out) and pooled daily activity.
const CLASS_SECS: [f64; NUM_CLASSES] = [10.0, 10.0, 10.0, 10.0, 20.0, 15.0, 15.0, 600.0];

const UPRIGHT: [f64; 3] = [0.0, 1.0, 0.0];
/// Resting gravity direction after each fall.
const FALL_REST: [[f64; 3]; 4] = [
    [0.0, 0.05, 1.0],
    [0.0, 0.55, 0.8],
    [1.0, 0.1, 0.1],
    [-0.2, 0.8, -0.55],
];
/// Direction of the impact spike of each fall.
const FALL_IMPACT: [[f64; 3]; 4] = [
    [0.2, -0.6, 1.0],
    [0.0, 1.0, 0.6],
    [1.0, -0.4, 0.0],
    [-0.5, -1.0, -0.3],
];
const SEATED: [f64; 3] = [0.25, 0.8, 0.5];
/// Scale of each fall's rest and impact directions around the table mean;
/// below 1 the falls look more alike and differ mostly in the impact.
const REST_SEPARATION: f64 = 0.3;
const IMPACT_SEPARATION: f64 = 0.5;
/// Standard deviation of the per-recording perturbation of those directions.
const ORIENTATION_JITTER: f64 = 0.1;
/// Fall onset varies by up to this many seconds around the subject's habit.
const ONSET_SPREAD_SECS: f64 = 3.5;
const TILT_SIGMA: f64 = 0.05;
const TRAIN_FRACTION: f64 = 0.8;

/// Per-client sample budget and class mixture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeterogeneityProfile {
    pub n_samples: usize,
    pub class_weights: [f64; NUM_CLASSES],
}

impl HeterogeneityProfile {
    pub fn balanced(n_samples: usize) -> Self {
        Self {
            n_samples,
            class_weights: [1.0 / NUM_CLASSES as f64; NUM_CLASSES],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self
            .class_weights
            .iter()
            .any(|&w| !(w >= 0.0) || !w.is_finite())
        {
            return Err(Error::config(
                "class weights must be finite and nonnegative",
            ));
        }
        let sum: f64 = self.class_weights.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "class weights sum to {sum}, expected 1"
            )));
        }
        Ok(())
    }

    /// Class counts by largest-remainder apportionment; ties go to the
    /// lowest class index. Counts always sum to `n_samples`.
    pub fn class_counts(&self) -> [usize; NUM_CLASSES] {
        apportion(self.n_samples, &self.class_weights)
    }
}

fn apportion(total: usize, weights: &[f64; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let sum: f64 = weights.iter().sum();
    let mut counts = [0usize; NUM_CLASSES];
    if total == 0 || sum <= 0.0 {
        return counts;
    }
    let quotas: Vec<f64> = weights.iter().map(|w| total as f64 * w / sum).collect();
    for (c, q) in quotas.iter().enumerate() {
        counts[c] = (q.floor() as usize).min(total);
    }
    let assigned: usize = counts.iter().sum();
    let mut order: Vec<usize> = (0..NUM_CLASSES).filter(|&c| weights[c] > 0.0).collect();
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &c in order.iter().cycle().take(total.saturating_sub(assigned)) {
        counts[c] += 1;
    }
    counts
}

/// Training counts per class for a stratified 80/20 split: the training
/// total is `floor(0.8 * n)`, each class gets `floor(0.8 * n_c)`, and the
/// shortfall goes to the classes with the largest fractional parts.
pub(crate) fn stratified_train_counts(counts: &[usize; NUM_CLASSES]) -> [usize; NUM_CLASSES] {
    let total: usize = counts.iter().sum();
    let target = total * 4 / 5;
    let mut train = [0usize; NUM_CLASSES];
    let mut remainders = Vec::new();
    for (c, &n) in counts.iter().enumerate() {
        train[c] = n * 4 / 5;
        remainders.push((c, (n as f64 * TRAIN_FRACTION).fract()));
    }
    remainders.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    let mut missing = target - train.iter().sum::<usize>();
    for &(c, _) in &remainders {
        if missing == 0 {
            break;
        }
        if train[c] < counts[c] {
            train[c] += 1;
            missing -= 1;
        }
    }
    train
}

/// Traits that make one simulated subject differ from another.
struct Subject {
    gain: [f64; 3],
    tilt: [f64; 3],
    freq_scale: f64,
    reaction_secs: f64,
}

impl Subject {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        let tilt = Normal::new(0.0, TILT_SIGMA).expect("valid sigma");
        Self {
            gain: [0; 3].map(|_| rng.gen_range(0.8..1.2)),
            tilt: [0; 3].map(|_| tilt.sample(rng)),
            freq_scale: rng.gen_range(0.85..1.15),
            reaction_secs: rng.gen_range(3.5..5.5),
        }
    }
}

fn smoothstep(t: f64, at: f64, width: f64) -> f64 {
    1.0 / (1.0 + (-(t - at) / width).exp())
}

fn lerp3(a: [f64; 3], b: [f64; 3], s: f64) -> [f64; 3] {
    [0, 1, 2].map(|k| a[k] + (b[k] - a[k]) * s)
}

/// Per-recording randomness: event time, gait and the orientation targets.
struct Motion {
    event: f64,
    gait: (f64, f64, f64),
    rest: [f64; 3],
    impact: [f64; 3],
    seated: [f64; 3],
}

/// Gravity direction, periodic motion and transient acceleration of one
/// recording as a function of time.
fn accel_at(class: usize, t: f64, m: &Motion, subject: &Subject) -> [f64; 3] {
    let (freq, amp, phase) = m.gait;
    let event = m.event;
    let w = 2.0 * std::f64::consts::PI * freq * subject.freq_scale;
    let step = amp * (w * t + phase).sin();
    let step2 = 0.4 * amp * (2.0 * w * t + 1.3 * phase).sin();
    let sway = [0.3 * step2, step + step2, 0.25 * step];
    let (orientation, motion, transient) = match class {
        0..=3 => {
            let s = smoothstep(t, event, 0.15);
            let moving = 1.0 - s;
            let dt = t - event;
            let impact = if dt >= 0.0 {
                2.2 * (-dt / 0.2).exp()
            } else {
                0.0
            };
            (
                lerp3(UPRIGHT, m.rest, s),
                sway.map(|v| v * moving),
                m.impact.map(|v| v * impact),
            )
        }
        4 => {
            let s = smoothstep(t, event, 0.6);
            (
                lerp3(UPRIGHT, m.seated, s),
                sway.map(|v| 0.3 * v * (1.0 - s)),
                [0.0; 3],
            )
        }
        5 | 6 => {
            // Car step in: walking then seated; car step out is the reverse.
            let s = smoothstep(t, event, 0.4);
            let seated = if class == 5 { s } else { 1.0 - s };
            let bump = 0.8 * (-((t - event) / 0.3).powi(2)).exp();
            (
                lerp3(UPRIGHT, m.seated, seated),
                sway.map(|v| v * (1.0 - seated)),
                [bump, -0.5 * bump, 0.7 * bump],
            )
        }
        _ => (UPRIGHT, sway, [0.0; 3]),
    };
    [0, 1, 2]
        .map(|k| subject.gain[k] * (orientation[k] + subject.tilt[k] + motion[k] + transient[k]))
}

fn synth_recording(
    subject_id: u32,
    class: usize,
    subject: &Subject,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> RawRecording {
    let secs = CLASS_SECS[class];
    let n = (secs * SAMPLE_RATE_HZ).round() as usize;
    let event = match class {
        0..=3 => (subject.reaction_secs + rng.gen_range(-ONSET_SPREAD_SECS..ONSET_SPREAD_SECS))
            .clamp(0.5, secs - 0.5),
        _ => rng.gen_range(0.3..0.7) * secs,
    };
    // Daily recordings pick one of standing, walking, jogging or stairs.
    let gait = match class {
        7 => match rng.gen_range(0..4) {
            0 => (0.3, 0.05, rng.gen_range(0.0..6.28)),
            1 => (1.8, 0.5, rng.gen_range(0.0..6.28)),
            2 => (2.7, 1.1, rng.gen_range(0.0..6.28)),
            _ => (1.4, 0.6, rng.gen_range(0.0..6.28)),
        },
        _ => (1.6, 0.25, rng.gen_range(0.0..6.28)),
    };
    let jitter = Normal::new(0.0, ORIENTATION_JITTER).expect("valid sigma");
    let mut jittered = |v: [f64; 3]| v.map(|x| x + jitter.sample(rng));
    let f = class.min(3);
    let squeeze = |table: &[[f64; 3]; 4], sep: f64| {
        let mean = [0, 1, 2].map(|k| table.iter().map(|v| v[k]).sum::<f64>() / 4.0);
        [0, 1, 2].map(|k| mean[k] + sep * (table[f][k] - mean[k]))
    };
    let motion = Motion {
        event,
        gait,
        rest: jittered(squeeze(&FALL_REST, REST_SEPARATION)),
        impact: jittered(squeeze(&FALL_IMPACT, IMPACT_SEPARATION)),
        seated: jittered(SEATED),
    };
    let normal = Normal::new(0.0, noise).expect("valid sigma");
    let signal: Vec<Sample> = (0..n)
        .map(|i| {
            let t = i as f64 / SAMPLE_RATE_HZ;
            let a = accel_at(class, t, &motion, subject);
            let a_prev = accel_at(class, t - 1.0 / SAMPLE_RATE_HZ, &motion, subject);
            let mut sample = [0.0; 6];
            for k in 0..3 {
                sample[k] = a[k] + normal.sample(rng);
                // Angular velocity proxy: rate of change of the acceleration.
                sample[3 + k] = (a[k] - a_prev[k]) * SAMPLE_RATE_HZ * 0.1 + normal.sample(rng);
            }
            sample
        })
        .collect();
    RawRecording::new(subject_id, class, signal, SAMPLE_RATE_HZ)
}

/// Featurized windows of `class` for one subject, generating recordings until
/// `count` windows exist.
fn class_images(
    client_id: usize,
    class: usize,
    count: usize,
    subject: &Subject,
    noise: f64,
    seed: u64,
) -> Vec<FeatureImage> {
    let interval = slide_interval(CLASS_SECS[class], REFERENCE_INTERVAL, REFERENCE_SECS)
        .expect("class durations are positive");
    let mut images = Vec::with_capacity(count);
    let mut recording = 0u64;
    while images.len() < count {
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(seed, (class as u64) << 32 | recording));
        let rec = synth_recording(client_id as u32, class, subject, noise, &mut rng);
        let wins = windows(&rec, WINDOW_LEN, interval).expect("positive interval");
        for w in wins.into_iter().take(count - images.len()) {
            images.push(featurize(w, class).expect("window has the image length"));
        }
        recording += 1;
    }
    images
}

/// Standard deviation of the additive sensor noise, in units of g.
pub const DEFAULT_NOISE: f64 = 0.12;

/// Generates one shard per profile. Client `i` draws everything from a stream
/// derived from `(seed, i)`, so shards do not depend on generation order.
pub fn synth_dataset(profiles: &[HeterogeneityProfile], seed: u64) -> Result<Vec<ClientShard>> {
    synth_dataset_with_noise(profiles, seed, DEFAULT_NOISE)
}

pub fn synth_dataset_with_noise(
    profiles: &[HeterogeneityProfile],
    seed: u64,
    noise: f64,
) -> Result<Vec<ClientShard>> {
    if !(noise > 0.0) {
        return Err(Error::config("noise must be > 0"));
    }
    profiles
        .iter()
        .enumerate()
        .map(|(client_id, profile)| {
            profile.validate()?;
            if profile.n_samples == 0 {
                warn!("client {client_id} has a zero-sample profile; its shard is empty");
                return Ok(ClientShard::new(client_id, Vec::new(), Vec::new()));
            }
            let client_seed = derive_seed(seed, client_id as u64);
            let mut rng = ChaCha8Rng::seed_from_u64(client_seed);
            let subject = Subject::draw(&mut rng);
            let counts = profile.class_counts();
            let train_counts = stratified_train_counts(&counts);
            let mut train = Vec::new();
            let mut test = Vec::new();
            for class in 0..NUM_CLASSES {
                let mut images = class_images(
                    client_id,
                    class,
                    counts[class],
                    &subject,
                    noise,
                    client_seed,
                );
                images.shuffle(&mut rng);
                let rest = images.split_off(train_counts[class]);
                train.extend(images);
                test.extend(rest);
            }
            Ok(ClientShard::new(client_id, train, test))
        })
        .collect()
}

/// Client mixture for the flagship experiment: a large client with all
/// classes, a 101-sample client holding only the four falls, a 570-sample
/// client dominated by daily activity (431 samples), and 100 to 220 samples
/// for each remaining client with class weights varying up to threefold.
pub fn flagship_profiles(n_clients: usize, seed: u64) -> Result<Vec<HeterogeneityProfile>> {
    if n_clients < 3 {
        return Err(Error::config(
            "the flagship mixture needs at least 3 clients",
        ));
    }
    let mut profiles = vec![
        HeterogeneityProfile::balanced(831),
        HeterogeneityProfile {
            n_samples: 101,
            class_weights: [0.25, 0.25, 0.25, 0.25, 0.0, 0.0, 0.0, 0.0],
        },
        {
            let rest = 139.0 / 570.0 / 7.0;
            let mut w = [rest; NUM_CLASSES];
            w[7] = 431.0 / 570.0;
            HeterogeneityProfile {
                n_samples: 570,
                class_weights: w,
            }
        },
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xF1A6));
    for _ in 3..n_clients {
        let mut raw = [0.0; NUM_CLASSES];
        for w in raw.iter_mut() {
            *w = 0.5 + rng.gen::<f64>();
        }
        let sum: f64 = raw.iter().sum();
        profiles.push(HeterogeneityProfile {
            n_samples: rng.gen_range(100..=220),
            class_weights: raw.map(|w| w / sum),
        });
    }
    Ok(profiles)
}
