//! Links with latency and serialized bandwidth, plus the transfer ledger.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::time::{Duration, Timestamp};

/// Bytes per second, or no cap.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Bandwidth {
    #[default]
    Unlimited,
    BytesPerSec(u64),
}

impl Bandwidth {
    pub fn gbps(g: f64) -> Self {
        Bandwidth::BytesPerSec((g * 125_000_000.0) as u64)
    }

    pub fn mbps(m: f64) -> Self {
        Bandwidth::BytesPerSec((m * 125_000.0) as u64)
    }

    pub fn bytes_per_sec(self) -> Option<u64> {
        match self {
            Bandwidth::Unlimited => None,
            Bandwidth::BytesPerSec(b) => Some(b),
        }
    }

    /// Time to push `bytes` through at this rate, rounded up to a microsecond.
    pub fn transmit(self, bytes: u64) -> Duration {
        match self {
            Bandwidth::Unlimited => Duration::ZERO,
            Bandwidth::BytesPerSec(0) => Duration::from_micros(i64::MAX / 4),
            Bandwidth::BytesPerSec(b) => {
                let us = (bytes as u128 * 1_000_000).div_ceil(b as u128);
                Duration::from_micros(us.min(i64::MAX as u128 / 4) as i64)
            }
        }
    }

    fn min(self, other: Bandwidth) -> Bandwidth {
        match (self, other) {
            (Bandwidth::Unlimited, o) | (o, Bandwidth::Unlimited) => o,
            (Bandwidth::BytesPerSec(a), Bandwidth::BytesPerSec(b)) => Bandwidth::BytesPerSec(a.min(b)),
        }
    }
}

impl fmt::Display for Bandwidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Bandwidth::Unlimited => f.write_str("unlimited"),
            Bandwidth::BytesPerSec(b) => write!(f, "{b}"),
        }
    }
}

impl FromStr for Bandwidth {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s == "unlimited" {
            return Ok(Bandwidth::Unlimited);
        }
        let units = [("gbps", 125_000_000.0), ("mbps", 125_000.0), ("kbps", 125.0)];
        for (suffix, scale) in units {
            if let Some(n) = s.strip_suffix(suffix) {
                let v: f64 = n.trim().parse().map_err(|_| format!("bad bandwidth {s:?}"))?;
                return Ok(Bandwidth::BytesPerSec((v * scale) as u64));
            }
        }
        s.parse().map(Bandwidth::BytesPerSec).map_err(|_| format!("bad bandwidth {s:?}"))
    }
}

impl Serialize for Bandwidth {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Unlimited => s.serialize_str("unlimited"),
            Bandwidth::BytesPerSec(b) => s.serialize_u64(*b),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            N(u64),
            S(String),
        }
        match Raw::deserialize(d)? {
            Raw::N(n) => Ok(Bandwidth::BytesPerSec(n)),
            Raw::S(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// One message's trip over a link.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transfer {
    pub from: usize,
    pub to: usize,
    pub bytes: u64,
    /// Transmission window; the receiver sees the message `latency` after `end`.
    pub start: Timestamp,
    pub end: Timestamp,
    pub kind: &'static str,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct Link {
    pub latency: Duration,
    pub bandwidth: Bandwidth,
    pub up: bool,
}

/// Frames up to this size interleave with bulk transfers instead of queueing
/// behind them.
pub const MTU: u64 = 1500;

/// Full mesh over `n` nodes. A transfer holds the sender's uplink, the
/// directed link and the receiver's downlink for `bytes / min(rates)`.
/// Frames of at most [`MTU`] bytes neither wait for nor hold these.
pub struct Network {
    names: Vec<String>,
    links: Vec<Vec<Link>>,
    link_free: Vec<Vec<Timestamp>>,
    nic_up: Vec<Bandwidth>,
    nic_down: Vec<Bandwidth>,
    up_free: Vec<Timestamp>,
    down_free: Vec<Timestamp>,
    ledger: Vec<Transfer>,
}

impl Network {
    pub(crate) fn new(names: Vec<String>, links: Vec<Vec<Link>>, nic_up: Vec<Bandwidth>, nic_down: Vec<Bandwidth>) -> Self {
        let n = names.len();
        Network {
            names,
            links,
            link_free: vec![vec![Timestamp::ZERO; n]; n],
            nic_up,
            nic_down,
            up_free: vec![Timestamp::ZERO; n],
            down_free: vec![Timestamp::ZERO; n],
            ledger: Vec::new(),
        }
    }

    pub fn name(&self, node: usize) -> &str {
        &self.names[node]
    }

    pub fn is_up(&self, a: usize, b: usize) -> bool {
        a == b || self.links[a][b].up
    }

    /// Send `bytes` from `from` to `to` at `now`; returns the arrival time.
    /// Messages to self arrive immediately and are not recorded.
    pub fn send(&mut self, from: usize, to: usize, bytes: u64, now: Timestamp, kind: &'static str) -> Timestamp {
        if from == to {
            return now;
        }
        let link = self.links[from][to];
        let rate = link.bandwidth.min(self.nic_up[from]).min(self.nic_down[to]);
        if bytes <= MTU {
            let end = now + rate.transmit(bytes);
            self.ledger.push(Transfer {
                from,
                to,
                bytes,
                start: now,
                end,
                kind,
            });
            return end + link.latency;
        }
        let mut start = now.max(self.link_free[from][to]);
        if self.nic_up[from] != Bandwidth::Unlimited {
            start = start.max(self.up_free[from]);
        }
        if self.nic_down[to] != Bandwidth::Unlimited {
            start = start.max(self.down_free[to]);
        }
        let end = start + rate.transmit(bytes);
        if link.bandwidth != Bandwidth::Unlimited {
            self.link_free[from][to] = end;
        }
        if self.nic_up[from] != Bandwidth::Unlimited {
            self.up_free[from] = end;
        }
        if self.nic_down[to] != Bandwidth::Unlimited {
            self.down_free[to] = end;
        }
        self.ledger.push(Transfer {
            from,
            to,
            bytes,
            start,
            end,
            kind,
        });
        end + link.latency
    }

    pub fn ledger(&self) -> &[Transfer] {
        &self.ledger
    }

    pub fn nic(&self, node: usize) -> (Bandwidth, Bandwidth) {
        (self.nic_up[node], self.nic_down[node])
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MB: u64 = 1_000_000;

    fn net(bw: Bandwidth, lat_ms: i64) -> Network {
        let link = Link {
            latency: Duration::from_millis(lat_ms),
            bandwidth: bw,
            up: true,
        };
        Network::new(
            vec!["a".into(), "b".into(), "c".into()],
            vec![vec![link; 3]; 3],
            vec![Bandwidth::Unlimited; 3],
            vec![Bandwidth::Unlimited; 3],
        )
    }

    #[test]
    fn latency_plus_size_over_rate() {
        let mut n = net(Bandwidth::BytesPerSec(1000), 10);
        let t = n.send(0, 1, 500, Timestamp::ZERO, "x");
        assert_eq!(t, Timestamp::from_millis(510));
    }

    #[test]
    fn serialized_per_direction() {
        let mut n = net(Bandwidth::BytesPerSec(MB), 0);
        assert_eq!(n.send(0, 1, MB, Timestamp::ZERO, "x"), Timestamp::from_secs(1));
        assert_eq!(n.send(0, 1, MB, Timestamp::ZERO, "x"), Timestamp::from_secs(2));
        // the reverse direction and other links are independent
        assert_eq!(n.send(1, 0, MB, Timestamp::ZERO, "x"), Timestamp::from_secs(1));
        assert_eq!(n.send(0, 2, MB, Timestamp::ZERO, "x"), Timestamp::from_secs(1));
    }

    #[test]
    fn nic_cap_is_shared_across_links() {
        let mut n = net(Bandwidth::Unlimited, 0);
        n.nic_up[0] = Bandwidth::BytesPerSec(MB);
        assert_eq!(n.send(0, 1, MB, Timestamp::ZERO, "x"), Timestamp::from_secs(1));
        assert_eq!(n.send(0, 2, MB, Timestamp::ZERO, "x"), Timestamp::from_secs(2));
        assert_eq!(n.send(1, 2, MB, Timestamp::ZERO, "x"), Timestamp::ZERO);
    }

    #[test]
    fn small_frames_skip_the_queue() {
        let mut n = net(Bandwidth::BytesPerSec(1000), 0);
        assert_eq!(n.send(0, 1, 10_000, Timestamp::ZERO, "x"), Timestamp::from_secs(10));
        assert_eq!(n.send(0, 1, 100, Timestamp::ZERO, "x"), Timestamp::from_millis(100));
        assert_eq!(n.send(0, 1, 10_000, Timestamp::ZERO, "x"), Timestamp::from_secs(20));
    }

    #[test]
    fn loopback_is_free() {
        let mut n = net(Bandwidth::BytesPerSec(1), 100);
        assert_eq!(n.send(2, 2, 1 << 20, Timestamp::from_millis(3), "x"), Timestamp::from_millis(3));
        assert!(n.ledger().is_empty());
    }

    #[test]
    fn bandwidth_parsing() {
        assert_eq!("unlimited".parse::<Bandwidth>().unwrap(), Bandwidth::Unlimited);
        assert_eq!("1gbps".parse::<Bandwidth>().unwrap(), Bandwidth::BytesPerSec(125_000_000));
        assert_eq!("20mbps".parse::<Bandwidth>().unwrap(), Bandwidth::BytesPerSec(2_500_000));
        assert_eq!("42".parse::<Bandwidth>().unwrap(), Bandwidth::BytesPerSec(42));
        let j = serde_json::to_string(&Bandwidth::BytesPerSec(7)).unwrap();
        assert_eq!(j, "7");
        assert_eq!(serde_json::from_str::<Bandwidth>("\"unlimited\"").unwrap(), Bandwidth::Unlimited);
    }
}
