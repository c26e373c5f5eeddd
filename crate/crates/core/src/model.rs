//! Record-length and background-traffic model behind the simulator.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::profile::{Browser, Connection, OperationalProfile, Os, TrafficCondition};
use crate::trace::MAX_RECORD_LEN;

/// Distribution of one kind of record length.
///
/// `Gaussian` is a rounded normal centred on `center` whose support is
/// clamped to `center ± jitter`; the standard deviation is `jitter / 4`, so
/// the clamp sits at four sigma. `Uniform` draws integers from `lo..=hi`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LengthDist {
    Gaussian { center: u16, jitter: u16 },
    Uniform { lo: u16, hi: u16 },
}

impl LengthDist {
    pub fn gaussian(center: u16, jitter: u16) -> Self {
        LengthDist::Gaussian { center, jitter }
    }

    pub fn center(&self) -> u16 {
        match *self {
            LengthDist::Gaussian { center, .. } => center,
            LengthDist::Uniform { lo, hi } => lo + (hi - lo) / 2,
        }
    }

    pub fn jitter(&self) -> u16 {
        match *self {
            LengthDist::Gaussian { jitter, .. } => jitter,
            LengthDist::Uniform { lo, hi } => (hi - lo) / 2,
        }
    }

    /// Smallest and largest value a sample can take.
    pub fn support(&self) -> (u16, u16) {
        let (lo, hi) = match *self {
            LengthDist::Gaussian { center, jitter } => (center.saturating_sub(jitter), center.saturating_add(jitter)),
            LengthDist::Uniform { lo, hi } => (lo, hi),
        };
        (lo.clamp(1, MAX_RECORD_LEN), hi.clamp(1, MAX_RECORD_LEN))
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> u16 {
        let v: i64 = match *self {
            LengthDist::Gaussian { center, jitter: 0 } => center as i64,
            LengthDist::Gaussian { center, jitter } => {
                let sigma = jitter as f64 / 4.0;
                let normal = Normal::new(0.0, sigma).expect("positive sigma");
                let dev = normal.sample(rng).round() as i64;
                center as i64 + dev.clamp(-(jitter as i64), jitter as i64)
            }
            LengthDist::Uniform { lo, hi } => rng.random_range(lo..=hi) as i64,
        };
        v.clamp(1, MAX_RECORD_LEN as i64) as u16
    }

    fn shifted(self, delta: i32) -> Self {
        match self {
            LengthDist::Gaussian { center, jitter } => LengthDist::Gaussian {
                center: (center as i32 + delta).clamp(1, MAX_RECORD_LEN as i32) as u16,
                jitter,
            },
            other => other,
        }
    }

    fn jitter_scaled(self, num: u16, den: u16) -> Self {
        match self {
            LengthDist::Gaussian { center, jitter } => LengthDist::Gaussian {
                center,
                jitter: (jitter as u32 * num as u32 / den as u32) as u16,
            },
            other => other,
        }
    }

    fn with_jitter(self, jitter: u16) -> Self {
        match self {
            LengthDist::Gaussian { center, .. } => LengthDist::Gaussian { center, jitter },
            other => other,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SideChannelModel {
    /// Client record sent when a question appears.
    pub type1_len: LengthDist,
    /// Client record sent when the viewer picks the non-default branch.
    pub type2_len: LengthDist,
    pub chunk_req_len: LengthDist,
    /// Background client records per second (Poisson arrivals).
    pub noise_rate_hz: f64,
    pub noise_len: LengthDist,
    /// Chunks of the default branch requested during the choice window.
    pub prefetch_chunks: u32,
}

impl Default for SideChannelModel {
    fn default() -> Self {
        Self {
            type1_len: LengthDist::gaussian(710, 8),
            type2_len: LengthDist::gaussian(910, 8),
            chunk_req_len: LengthDist::gaussian(450, 40),
            noise_rate_hz: 0.5,
            noise_len: LengthDist::Uniform { lo: 80, hi: 1460 },
            prefetch_chunks: 3,
        }
    }
}

impl SideChannelModel {
    /// Same centres, no jitter, no background records.
    pub fn noiseless(&self) -> Self {
        Self {
            type1_len: self.type1_len.with_jitter(0),
            type2_len: self.type2_len.with_jitter(0),
            chunk_req_len: self.chunk_req_len.with_jitter(0),
            noise_rate_hz: 0.0,
            ..self.clone()
        }
    }

    /// Replaces the jitter of both control-record distributions.
    pub fn with_control_jitter(&self, jitter: u16) -> Self {
        Self {
            type1_len: self.type1_len.with_jitter(jitter),
            type2_len: self.type2_len.with_jitter(jitter),
            ..self.clone()
        }
    }

    /// Type-1 and type-2 supports cannot touch.
    pub fn is_separated(&self) -> bool {
        let gap = (self.type1_len.center() as i32 - self.type2_len.center() as i32).abs();
        gap > self.type1_len.jitter() as i32 + self.type2_len.jitter() as i32
    }

    pub fn validate(&self) -> Result<(), String> {
        for (name, d) in [
            ("type1_len", self.type1_len),
            ("type2_len", self.type2_len),
            ("chunk_req_len", self.chunk_req_len),
            ("noise_len", self.noise_len),
        ] {
            if let LengthDist::Uniform { lo, hi } = d {
                if lo > hi {
                    return Err(format!("{name}: uniform lo {lo} above hi {hi}"));
                }
            }
        }
        if !self.noise_rate_hz.is_finite() || self.noise_rate_hz < 0.0 {
            return Err(format!(
                "noise_rate_hz {} must be a non-negative number",
                self.noise_rate_hz
            ));
        }
        Ok(())
    }
}

/// Adjusts a model to the capture conditions of `profile`.
///
/// Firefox sends control records 1 byte longer; the OS moves chunk requests
/// by up to 10 bytes; wireless links widen every jitter by a quarter; busier
/// times of day add background traffic. Jitter scaling is skipped if it would
/// make type-1 and type-2 supports touch on a model where they did not.
pub fn model_for_profile(profile: &OperationalProfile, base: &SideChannelModel) -> SideChannelModel {
    let control_shift = match profile.browser {
        Browser::Chrome => 0,
        Browser::Firefox => 1,
    };
    let chunk_shift = match profile.os {
        Os::Windows => 0,
        Os::Linux => -10,
        Os::Mac => 10,
    };
    let noise_scale = match profile.traffic_condition {
        TrafficCondition::Morning => 1.0,
        TrafficCondition::Noon => 1.2,
        TrafficCondition::Night => 1.5,
    };
    let shifted = SideChannelModel {
        type1_len: base.type1_len.shifted(control_shift),
        type2_len: base.type2_len.shifted(control_shift),
        chunk_req_len: base.chunk_req_len.shifted(chunk_shift),
        noise_rate_hz: base.noise_rate_hz * noise_scale,
        ..base.clone()
    };
    if profile.connection == Connection::Wired {
        return shifted;
    }
    let widened = SideChannelModel {
        type1_len: shifted.type1_len.jitter_scaled(5, 4),
        type2_len: shifted.type2_len.jitter_scaled(5, 4),
        chunk_req_len: shifted.chunk_req_len.jitter_scaled(5, 4),
        ..shifted.clone()
    };
    if base.is_separated() && !widened.is_separated() {
        shifted
    } else {
        widened
    }
}
