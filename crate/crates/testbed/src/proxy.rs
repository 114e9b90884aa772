//! User-space impairment proxy: the portable stand-in for kernel traffic
//! control.
//!
//! Applications send datagrams to their machine's relay wrapped in a small
//! envelope naming the real destination. The relay shapes them with the
//! entry for that destination and forwards the payload.

use std::collections::{BTreeMap, HashMap};
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};
use std::time::Duration;

use fogbed_core::netem::{AgentNetworkConfig, ImpairmentSpec};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use tokio::net::UdpSocket;
use tokio::time::Instant;

/// A payload scheduled for delivery `at` on the shaper's clock.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Scheduled {
    pub at: Duration,
    pub payload: Vec<u8>,
}

/// Per-destination shaping state. Pure: time is passed in, randomness is
/// seeded.
#[derive(Debug)]
pub struct Shaper {
    rng: StdRng,
    busy_until: Duration,
    held: Option<(Duration, Scheduled)>,
}

impl Shaper {
    pub fn new(seed: u64) -> Self {
        Shaper { rng: StdRng::seed_from_u64(seed), busy_until: Duration::ZERO, held: None }
    }

    fn sample_delay(&mut self, spec: &ImpairmentSpec) -> Duration {
        let mean = spec.injected_delay.0 as f64;
        let sd = spec.dispersion.0 as f64;
        let us = if sd > 0.0 {
            Normal::new(mean, sd).expect("finite parameters").sample(&mut self.rng).max(0.0)
        } else {
            mean
        };
        Duration::from_micros(us.round() as u64)
    }

    /// Shapes one message arriving at `now` and returns what to deliver.
    pub fn shape(&mut self, spec: &ImpairmentSpec, now: Duration, mut payload: Vec<u8>) -> Vec<Scheduled> {
        if self.rng.random::<f64>() < spec.loss.value() {
            return Vec::new();
        }
        if !payload.is_empty() && self.rng.random::<f64>() < spec.corruption.value() {
            let bit = self.rng.random_range(0..payload.len() * 8);
            payload[bit / 8] ^= 1 << (bit % 8);
        }
        let start = now.max(self.busy_until);
        let tx = spec.rate_bps.map_or(Duration::ZERO, |r| {
            Duration::from_nanos((payload.len() as u64 * 8).saturating_mul(1_000_000_000) / r.max(1))
        });
        self.busy_until = start + tx;
        let at = self.busy_until + self.sample_delay(spec);

        let mut out = Vec::new();
        if self.rng.random::<f64>() < spec.duplicate.value() {
            out.push(Scheduled { at, payload: payload.clone() });
        }
        let msg = Scheduled { at, payload };
        if self.held.is_none() && self.rng.random::<f64>() < spec.reorder.value() {
            self.held = Some((now, msg));
            return out;
        }
        out.push(msg);
        if let Some((_, mut held)) = self.held.take() {
            held.at = held.at.max(at);
            out.push(held);
        }
        out
    }

    /// Releases a held-back message that has waited at least `max_hold`.
    pub fn flush(&mut self, now: Duration, max_hold: Duration) -> Option<Scheduled> {
        if self.held.as_ref().is_some_and(|(since, _)| now.saturating_sub(*since) >= max_hold) {
            self.held.take().map(|(_, mut m)| {
                m.at = m.at.max(now);
                m
            })
        } else {
            None
        }
    }
}

pub const ENVELOPE_MAGIC: u8 = 0xFB;

/// Wraps `payload` for the relay: magic, family, address, port, payload.
pub fn encode_envelope(dst: SocketAddr, payload: &[u8]) -> Vec<u8> {
    let mut out = vec![ENVELOPE_MAGIC];
    match dst.ip() {
        IpAddr::V4(a) => {
            out.push(4);
            out.extend(a.octets());
        }
        IpAddr::V6(a) => {
            out.push(6);
            out.extend(a.octets());
        }
    }
    out.extend(dst.port().to_be_bytes());
    out.extend(payload);
    out
}

pub fn decode_envelope(buf: &[u8]) -> Option<(SocketAddr, &[u8])> {
    let (&magic, rest) = buf.split_first()?;
    if magic != ENVELOPE_MAGIC {
        return None;
    }
    let (&family, rest) = rest.split_first()?;
    let (ip, rest): (IpAddr, &[u8]) = match family {
        4 if rest.len() >= 4 => {
            let o: [u8; 4] = rest[..4].try_into().ok()?;
            (Ipv4Addr::from(o).into(), &rest[4..])
        }
        6 if rest.len() >= 16 => {
            let o: [u8; 16] = rest[..16].try_into().ok()?;
            (Ipv6Addr::from(o).into(), &rest[16..])
        }
        _ => return None,
    };
    if rest.len() < 2 {
        return None;
    }
    let port = u16::from_be_bytes([rest[0], rest[1]]);
    Some((SocketAddr::new(ip, port), &rest[2..]))
}

#[derive(Debug, Default, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct TargetStats {
    pub received: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Default)]
struct Counters {
    malformed: AtomicU64,
    targets: Mutex<BTreeMap<IpAddr, TargetStats>>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct RelayStats {
    pub malformed: u64,
    pub targets: BTreeMap<IpAddr, TargetStats>,
}

/// The impairment table shared between the agent and its relay.
#[derive(Debug, Clone, Default)]
pub struct ProxyTable {
    entries: Arc<RwLock<HashMap<IpAddr, ImpairmentSpec>>>,
}

impl ProxyTable {
    pub fn replace(&self, config: &AgentNetworkConfig) {
        let map = config.entries.iter().map(|e| (e.target_address, e.clone())).collect();
        *self.entries.write().expect("table lock") = map;
    }

    pub fn get(&self, ip: &IpAddr) -> Option<ImpairmentSpec> {
        self.entries.read().expect("table lock").get(ip).cloned()
    }

    pub fn len(&self) -> usize {
        self.entries.read().expect("table lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// How long a reordered message may wait for a successor.
const MAX_HOLD: Duration = Duration::from_millis(50);

/// A running relay. Dropping it does not stop the tasks; abort via the
/// returned handle or let the runtime shut down.
#[derive(Debug, Clone)]
pub struct Relay {
    pub local_addr: SocketAddr,
    counters: Arc<Counters>,
}

impl Relay {
    pub fn stats(&self) -> RelayStats {
        RelayStats {
            malformed: self.counters.malformed.load(Ordering::Relaxed),
            targets: self.counters.targets.lock().expect("stats lock").clone(),
        }
    }
}

/// Binds the relay on `bind` and starts forwarding.
pub async fn spawn_relay(bind: SocketAddr, table: ProxyTable, seed: u64) -> std::io::Result<Relay> {
    let socket = Arc::new(UdpSocket::bind(bind).await?);
    let local_addr = socket.local_addr()?;
    let counters = Arc::new(Counters::default());
    let epoch = Instant::now();
    let shapers: Arc<Mutex<HashMap<SocketAddr, Shaper>>> = Arc::default();

    let deliver = {
        let socket = socket.clone();
        let counters = counters.clone();
        move |dst: SocketAddr, m: Scheduled| {
            let socket = socket.clone();
            let counters = counters.clone();
            tokio::spawn(async move {
                tokio::time::sleep_until(epoch + m.at).await;
                if socket.send_to(&m.payload, dst).await.is_ok() {
                    counters.targets.lock().expect("stats lock").entry(dst.ip()).or_default().delivered += 1;
                }
            });
        }
    };

    {
        let shapers = shapers.clone();
        let deliver = deliver.clone();
        tokio::spawn(async move {
            let mut tick = tokio::time::interval(Duration::from_millis(10));
            loop {
                tick.tick().await;
                let now = epoch.elapsed();
                let released: Vec<_> = shapers
                    .lock()
                    .expect("shaper lock")
                    .iter_mut()
                    .filter_map(|(dst, s)| s.flush(now, MAX_HOLD).map(|m| (*dst, m)))
                    .collect();
                for (dst, m) in released {
                    deliver(dst, m);
                }
            }
        });
    }

    let recv_counters = counters.clone();
    tokio::spawn(async move {
        let mut buf = vec![0u8; 65_536];
        let mut next_seed = seed;
        loop {
            let Ok((n, _from)) = socket.recv_from(&mut buf).await else { continue };
            let Some((dst, payload)) = decode_envelope(&buf[..n]) else {
                recv_counters.malformed.fetch_add(1, Ordering::Relaxed);
                continue;
            };
            let now = epoch.elapsed();
            let spec = table.get(&dst.ip());
            let out = match &spec {
                Some(spec) => {
                    let mut shapers = shapers.lock().expect("shaper lock");
                    let shaper = shapers.entry(dst).or_insert_with(|| {
                        next_seed = next_seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
                        Shaper::new(next_seed)
                    });
                    shaper.shape(spec, now, payload.to_vec())
                }
                None => vec![Scheduled { at: now, payload: payload.to_vec() }],
            };
            {
                let mut stats = recv_counters.targets.lock().expect("stats lock");
                let s = stats.entry(dst.ip()).or_default();
                s.received += 1;
                if out.is_empty() {
                    s.dropped += 1;
                }
            }
            for m in out {
                deliver(dst, m);
            }
        }
    });

    Ok(Relay { local_addr, counters })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fogbed_core::units::{Micros, Probability};
    use fogbed_core::NodeId;

    fn spec() -> ImpairmentSpec {
        ImpairmentSpec::passthrough(NodeId::from("B"), "127.0.0.1".parse().unwrap())
    }

    fn p(x: f64) -> Probability {
        Probability::new(x).unwrap()
    }

    #[test]
    fn zero_spec_is_identity() {
        let mut s = Shaper::new(1);
        for i in 0..100u8 {
            let now = Duration::from_millis(i as u64);
            assert_eq!(s.shape(&spec(), now, vec![i; 8]), vec![Scheduled { at: now, payload: vec![i; 8] }]);
        }
    }

    #[test]
    fn full_loss_delivers_nothing() {
        let mut s = Shaper::new(2);
        let sp = ImpairmentSpec { loss: Probability::CERTAIN, ..spec() };
        assert!((0..1000).all(|i| s.shape(&sp, Duration::from_micros(i), vec![1]).is_empty()));
    }

    #[test]
    fn fixed_delay() {
        let mut s = Shaper::new(3);
        let sp = ImpairmentSpec { injected_delay: Micros(50_000), ..spec() };
        let out = s.shape(&sp, Duration::from_secs(1), vec![0]);
        assert_eq!(out[0].at, Duration::from_millis(1050));
    }

    #[test]
    fn statistics_match_spec() {
        let mut s = Shaper::new(4);
        let sp = ImpairmentSpec {
            injected_delay: Micros(20_000),
            dispersion: Micros(5_000),
            loss: p(0.1),
            corruption: p(0.05),
            duplicate: p(0.03),
            ..spec()
        };
        let n = 20_000;
        let (mut sent, mut copies, mut corrupted, mut delay_sum) = (0usize, 0usize, 0usize, 0f64);
        for i in 0..n {
            let now = Duration::from_millis(i as u64);
            let out = s.shape(&sp, now, vec![0u8; 16]);
            if !out.is_empty() {
                sent += 1;
            }
            copies += out.len();
            for m in &out {
                corrupted += usize::from(m.payload.iter().any(|b| *b != 0));
                delay_sum += (m.at - now).as_secs_f64();
            }
        }
        let loss = 1.0 - sent as f64 / n as f64;
        let dup = copies as f64 / sent as f64 - 1.0;
        assert!((loss - 0.1).abs() < 0.02, "loss {loss}");
        assert!((dup - 0.03).abs() < 0.02, "dup {dup}");
        assert!((corrupted as f64 / copies as f64 - 0.05).abs() < 0.02);
        assert!((delay_sum / copies as f64 - 0.020).abs() < 0.001);
    }

    #[test]
    fn dispersion_truncated_at_zero() {
        let mut s = Shaper::new(5);
        let sp = ImpairmentSpec { injected_delay: Micros(1_000), dispersion: Micros(10_000), ..spec() };
        let now = Duration::from_secs(10);
        for _ in 0..1000 {
            assert!(s.shape(&sp, now, vec![]).iter().all(|m| m.at >= now));
        }
    }

    #[test]
    fn reorder_holds_one_back() {
        let mut s = Shaper::new(6);
        let sp = ImpairmentSpec { reorder: p(1.0), ..spec() };
        let t = Duration::from_millis;
        assert!(s.shape(&sp, t(0), vec![1]).is_empty());
        let out = s.shape(&sp, t(1), vec![2]);
        // second is sent first, then the held one
        assert_eq!(out.iter().map(|m| m.payload[0]).collect::<Vec<_>>(), [2, 1]);
        assert!(s.shape(&sp, t(2), vec![3]).is_empty());
        assert!(s.flush(t(10), Duration::from_millis(50)).is_none());
        assert_eq!(s.flush(t(60), Duration::from_millis(50)).unwrap().payload, [3]);
    }

    #[test]
    fn rate_cap_serializes() {
        let mut s = Shaper::new(7);
        // 1 Mbit/s: 125 bytes take 1 ms
        let sp = ImpairmentSpec { rate_bps: Some(1_000_000), ..spec() };
        let ats: Vec<_> = (0..4).map(|_| s.shape(&sp, Duration::ZERO, vec![0; 125])[0].at).collect();
        assert_eq!(ats, (1..=4).map(Duration::from_millis).collect::<Vec<_>>());
    }

    #[test]
    fn envelope_round_trip() {
        for dst in ["127.3.1.4:5003", "[::1]:9"] {
            let dst: SocketAddr = dst.parse().unwrap();
            let enc = encode_envelope(dst, b"hello");
            assert_eq!(decode_envelope(&enc), Some((dst, &b"hello"[..])));
        }
        assert_eq!(decode_envelope(b"plain"), None);
        assert_eq!(decode_envelope(&[ENVELOPE_MAGIC, 4, 1, 2]), None);
    }

    #[tokio::test]
    async fn relay_forwards_and_blocks() {
        let sink = UdpSocket::bind("127.0.0.1:0").await.unwrap();
        let dst = sink.local_addr().unwrap();
        let table = ProxyTable::default();
        let relay = spawn_relay("127.0.0.1:0".parse().unwrap(), table.clone(), 1).await.unwrap();
        let client = UdpSocket::bind("127.0.0.1:0").await.unwrap();

        client.send_to(&encode_envelope(dst, b"a"), relay.local_addr).await.unwrap();
        let mut buf = [0u8; 16];
        let (n, _) = tokio::time::timeout(Duration::from_secs(2), sink.recv_from(&mut buf)).await.unwrap().unwrap();
        assert_eq!(&buf[..n], b"a");

        let mut cfg = AgentNetworkConfig::empty(NodeId::from("A"));
        cfg.entries.push(ImpairmentSpec::blocked(NodeId::from("B"), dst.ip()));
        table.replace(&cfg);
        for _ in 0..50 {
            client.send_to(&encode_envelope(dst, b"b"), relay.local_addr).await.unwrap();
        }
        assert!(tokio::time::timeout(Duration::from_millis(300), sink.recv_from(&mut buf)).await.is_err());
        tokio::time::sleep(Duration::from_millis(50)).await;
        let stats = relay.stats().targets[&dst.ip()].clone();
        assert_eq!((stats.received, stats.dropped, stats.delivered), (51, 50, 1));
    }
}
