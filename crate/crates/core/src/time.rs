//! Microsecond timestamps and durations.
//!
//! Every timestamp in the system is an unsigned count of microseconds since an
//! epoch (the simulation epoch, or the Unix epoch in live mode). Subtracting two
//! timestamps yields a signed [`Duration`].

use std::fmt;
use std::ops::{Add, AddAssign, Mul, Neg, Sub};
use std::str::FromStr;

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};

/// Point in time, microseconds since the epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(u64);

impl Timestamp {
    pub const ZERO: Timestamp = Timestamp(0);
    pub const MAX: Timestamp = Timestamp(u64::MAX);

    pub const fn from_micros(micros: u64) -> Self {
        Timestamp(micros)
    }

    pub const fn from_millis(millis: u64) -> Self {
        Timestamp(millis * 1_000)
    }

    pub const fn from_secs(secs: u64) -> Self {
        Timestamp(secs * 1_000_000)
    }

    pub const fn as_micros(self) -> u64 {
        self.0
    }

    /// Wall-clock time since the Unix epoch.
    pub fn now_wall() -> Self {
        let micros = std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_micros() as u64)
            .unwrap_or(0);
        Timestamp(micros)
    }

    /// Signed difference `self - earlier`.
    pub fn since(self, earlier: Timestamp) -> Duration {
        Duration(self.0 as i64 - earlier.0 as i64)
    }

    /// Age of `earlier` as seen at `self`, clamped at zero when `earlier` lies in the future.
    pub fn age_of(self, earlier: Timestamp) -> Duration {
        Duration(self.0.saturating_sub(earlier.0) as i64)
    }
}

impl Sub for Timestamp {
    type Output = Duration;

    fn sub(self, rhs: Timestamp) -> Duration {
        self.since(rhs)
    }
}

impl Add<Duration> for Timestamp {
    type Output = Timestamp;

    /// Saturates at zero and at `u64::MAX`.
    fn add(self, rhs: Duration) -> Timestamp {
        if rhs.0 >= 0 {
            Timestamp(self.0.saturating_add(rhs.0 as u64))
        } else {
            Timestamp(self.0.saturating_sub(rhs.0.unsigned_abs()))
        }
    }
}

impl AddAssign<Duration> for Timestamp {
    fn add_assign(&mut self, rhs: Duration) {
        *self = *self + rhs;
    }
}

impl Sub<Duration> for Timestamp {
    type Output = Timestamp;

    fn sub(self, rhs: Duration) -> Timestamp {
        self + (-rhs)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}us", self.0)
    }
}

/// Signed span of time in microseconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Duration(i64);

impl Duration {
    pub const ZERO: Duration = Duration(0);

    pub const fn from_micros(micros: i64) -> Self {
        Duration(micros)
    }

    pub const fn from_millis(millis: i64) -> Self {
        Duration(millis * 1_000)
    }

    pub const fn from_secs(secs: i64) -> Self {
        Duration(secs * 1_000_000)
    }

    pub fn from_secs_f64(secs: f64) -> Self {
        Duration((secs * 1e6).round() as i64)
    }

    pub const fn as_micros(self) -> i64 {
        self.0
    }

    pub fn as_millis_f64(self) -> f64 {
        self.0 as f64 / 1e3
    }

    pub fn as_secs_f64(self) -> f64 {
        self.0 as f64 / 1e6
    }

    pub const fn is_negative(self) -> bool {
        self.0 < 0
    }

    pub fn abs(self) -> Duration {
        Duration(self.0.abs())
    }

    pub fn to_std(self) -> std::time::Duration {
        std::time::Duration::from_micros(self.0.max(0) as u64)
    }
}

impl Add for Duration {
    type Output = Duration;

    fn add(self, rhs: Duration) -> Duration {
        Duration(self.0.saturating_add(rhs.0))
    }
}

impl AddAssign for Duration {
    fn add_assign(&mut self, rhs: Duration) {
        *self = *self + rhs;
    }
}

impl Sub for Duration {
    type Output = Duration;

    fn sub(self, rhs: Duration) -> Duration {
        Duration(self.0.saturating_sub(rhs.0))
    }
}

impl Neg for Duration {
    type Output = Duration;

    fn neg(self) -> Duration {
        Duration(-self.0)
    }
}

impl Mul<f64> for Duration {
    type Output = Duration;

    fn mul(self, rhs: f64) -> Duration {
        Duration((self.0 as f64 * rhs).round() as i64)
    }
}

impl fmt::Display for Duration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = self.0;
        if v != 0 && v % 1_000_000 == 0 {
            write!(f, "{}s", v / 1_000_000)
        } else if v != 0 && v % 1_000 == 0 {
            write!(f, "{}ms", v / 1_000)
        } else {
            write!(f, "{}us", v)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid duration {0:?}: expected <number><unit> with unit one of us, ms, s, m")]
pub struct ParseDurationError(String);

impl FromStr for Duration {
    type Err = ParseDurationError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        let err = || ParseDurationError(s.to_string());
        let split = t
            .find(|c: char| c.is_ascii_alphabetic())
            .ok_or_else(err)?;
        let (num, unit) = t.split_at(split);
        let value: f64 = num.trim().parse().map_err(|_| err())?;
        let scale = match unit.trim() {
            "us" => 1.0,
            "ms" => 1e3,
            "s" => 1e6,
            "m" | "min" => 60e6,
            _ => return Err(err()),
        };
        Ok(Duration((value * scale).round() as i64))
    }
}

impl Serialize for Duration {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Duration {
    /// Accepts either an integer number of microseconds or a string such as `"500ms"`.
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Micros(i64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Micros(m) => Ok(Duration(m)),
            Raw::Text(s) => s.parse().map_err(de::Error::custom),
        }
    }
}

/// A duration limit that may be switched off.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Bound {
    #[default]
    Unlimited,
    Limited(Duration),
}

impl Bound {
    pub fn millis(ms: i64) -> Self {
        Bound::Limited(Duration::from_millis(ms))
    }

    pub fn limit(self) -> Option<Duration> {
        match self {
            Bound::Unlimited => None,
            Bound::Limited(d) => Some(d),
        }
    }

    /// `true` when `value` does not exceed the bound.
    pub fn admits(self, value: Duration) -> bool {
        match self {
            Bound::Unlimited => true,
            Bound::Limited(d) => value <= d,
        }
    }
}

impl fmt::Display for Bound {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bound::Unlimited => f.write_str("unlimited"),
            Bound::Limited(d) => d.fmt(f),
        }
    }
}

impl Serialize for Bound {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Bound {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Micros(i64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Micros(m) => Ok(Bound::Limited(Duration(m))),
            Raw::Text(s) if s.trim() == "unlimited" => Ok(Bound::Unlimited),
            Raw::Text(s) => s.parse().map(Bound::Limited).map_err(de::Error::custom),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subtraction_is_signed() {
        let a = Timestamp::from_millis(400);
        let b = Timestamp::from_millis(1000);
        assert_eq!(b - a, Duration::from_millis(600));
        assert_eq!(a - b, Duration::from_millis(-600));
        assert_eq!(a.age_of(b), Duration::ZERO);
    }

    #[test]
    fn duration_text_round_trip() {
        for s in ["500ms", "5s", "250us", "0us"] {
            let d: Duration = s.parse().unwrap();
            assert_eq!(d.to_string(), s);
        }
        assert_eq!("1.5s".parse::<Duration>().unwrap(), Duration::from_millis(1500));
        assert_eq!("2m".parse::<Duration>().unwrap(), Duration::from_secs(120));
        assert!("12".parse::<Duration>().is_err());
        assert!("12parsecs".parse::<Duration>().is_err());
    }

    #[test]
    fn bound_serde() {
        let b: Bound = serde_json::from_str("\"unlimited\"").unwrap();
        assert_eq!(b, Bound::Unlimited);
        let b: Bound = serde_json::from_str("\"25ms\"").unwrap();
        assert_eq!(b, Bound::millis(25));
        let b: Bound = serde_json::from_str("1000").unwrap();
        assert_eq!(b, Bound::millis(1));
        assert_eq!(serde_json::to_string(&Bound::millis(25)).unwrap(), "\"25ms\"");
    }

    #[test]
    fn timestamp_add_saturates() {
        assert_eq!(Timestamp::from_micros(5) + Duration::from_micros(-10), Timestamp::ZERO);
        assert_eq!(Timestamp::MAX + Duration::from_micros(1), Timestamp::MAX);
    }
}
