//! Live streaming: wire protocol, the bounded frame queue and the
//! producer/consumer loop.
//!
//! Frames arrive as length-prefixed little-endian records:
//!
//! ```text
//! u32 payload length (bytes after this field) = 8 + 12 * N
//! u32 frame index
//! u32 point count N
//! N x 3 f32 xyz
//! ```
//!
//! Poses leave in the same framing: payload length, frame index, value count
//! `17 + 15 * joints`, then that many f32.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::{Condvar, Mutex};
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use movin_core::inference::Session;
use movin_core::lidar::PointCloudFrame;
use movin_core::postprocess::{FootCleanup, FootIkConfig};
use movin_core::skeleton::PoseFeatures;

use crate::error::{Error, Result};

/// Drop-oldest queue depth between the producer and the consumer.
pub const QUEUE_CAPACITY: usize = 4;
/// Largest accepted payload; a bigger prefix is treated as a corrupt stream.
pub const MAX_PAYLOAD: usize = 64 << 20;

pub fn encode_frame(frame: &PointCloudFrame) -> Vec<u8> {
    let n = frame.points.len();
    let mut out = Vec::with_capacity(4 + 8 + 12 * n);
    out.extend_from_slice(&((8 + 12 * n) as u32).to_le_bytes());
    out.extend_from_slice(&(frame.frame_index as u32).to_le_bytes());
    out.extend_from_slice(&(n as u32).to_le_bytes());
    for v in frame.points.iter().flatten() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn encode_pose(frame_index: u64, pose: &PoseFeatures) -> Vec<u8> {
    let values = pose.to_vec();
    let mut out = Vec::with_capacity(4 + 8 + 4 * values.len());
    out.extend_from_slice(&((8 + 4 * values.len()) as u32).to_le_bytes());
    out.extend_from_slice(&(frame_index as u32).to_le_bytes());
    out.extend_from_slice(&(values.len() as u32).to_le_bytes());
    for v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Reads one record as `(index, count, payload after the count)`. A clean end
/// of stream before the length prefix yields `None`.
fn read_record(reader: &mut impl Read, item: usize) -> Result<Option<(u32, u32, Vec<u8>)>> {
    let mut len = [0u8; 4];
    match reader.read(&mut len[..1]) {
        Ok(0) => return Ok(None),
        Ok(_) => {}
        Err(e) => return Err(Error::Stream(format!("read failed: {e}"))),
    }
    reader.read_exact(&mut len[1..]).map_err(truncated)?;
    let len = u32::from_le_bytes(len) as usize;
    if !(8..=MAX_PAYLOAD).contains(&len) {
        return Err(Error::Stream(format!("implausible payload length {len}")));
    }
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload).map_err(truncated)?;
    let index = u32::from_le_bytes(payload[0..4].try_into().expect("four bytes"));
    let count = u32::from_le_bytes(payload[4..8].try_into().expect("four bytes"));
    if (count as usize).checked_mul(item) != Some(len - 8) {
        return Err(Error::Stream(format!("record {index}: {count} items do not fill {} payload bytes", len - 8)));
    }
    payload.drain(..8);
    Ok(Some((index, count, payload)))
}

fn truncated(e: io::Error) -> Error {
    Error::Stream(format!("stream ended inside a record: {e}"))
}

fn f32s(bytes: &[u8]) -> impl Iterator<Item = f32> + '_ {
    bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")))
}

pub fn read_frame(reader: &mut impl Read) -> Result<Option<PointCloudFrame>> {
    let Some((index, _, payload)) = read_record(reader, 12)? else {
        return Ok(None);
    };
    let flat: Vec<f32> = f32s(&payload).collect();
    let points = flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    Ok(Some(PointCloudFrame { points, frame_index: u64::from(index) }))
}

/// One pose record as `(frame index, raw values)`.
pub fn read_pose(reader: &mut impl Read) -> Result<Option<(u64, Vec<f32>)>> {
    Ok(read_record(reader, 4)?.map(|(index, _, payload)| (u64::from(index), f32s(&payload).collect())))
}

/// Frames read from `reader` until a clean end of stream.
pub fn frames_from(mut reader: impl Read) -> impl Iterator<Item = Result<PointCloudFrame>> {
    let mut done = false;
    std::iter::from_fn(move || {
        if done {
            return None;
        }
        let item = read_frame(&mut reader).transpose();
        done = !matches!(item, Some(Ok(_)));
        item
    })
}

/// Emits `frames` no faster than `rate_hz`, measured from the first frame.
pub fn paced<I: Iterator>(frames: I, rate_hz: f64) -> impl Iterator<Item = I::Item> {
    let period = Duration::from_secs_f64(1.0 / rate_hz);
    let mut start = None;
    frames.enumerate().map(move |(k, f)| {
        let start = *start.get_or_insert_with(Instant::now);
        let due = start + period * k as u32;
        if let Some(wait) = due.checked_duration_since(Instant::now()) {
            thread::sleep(wait);
        }
        f
    })
}

struct QueueState<T> {
    items: VecDeque<T>,
    closed: bool,
    received: u64,
    dropped: u64,
}

/// Bounded single-producer single-consumer queue that evicts its oldest item
/// when full, so the consumer always sees the freshest frames.
pub struct FrameQueue<T> {
    capacity: usize,
    state: Mutex<QueueState<T>>,
    ready: Condvar,
}

impl<T> FrameQueue<T> {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "queue capacity must be positive");
        let state = QueueState { items: VecDeque::with_capacity(capacity), closed: false, received: 0, dropped: 0 };
        Self { capacity, state: Mutex::new(state), ready: Condvar::new() }
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, QueueState<T>> {
        // a panicking peer cannot leave the bookkeeping half-updated
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    /// Enqueues `item`, returning the evicted oldest item if the queue was full.
    pub fn push(&self, item: T) -> Option<T> {
        let mut s = self.lock();
        s.received += 1;
        let evicted = if s.items.len() == self.capacity {
            s.dropped += 1;
            s.items.pop_front()
        } else {
            None
        };
        s.items.push_back(item);
        drop(s);
        self.ready.notify_one();
        evicted
    }

    /// Blocks for the next item; `None` once the queue is closed and drained.
    pub fn pop(&self) -> Option<T> {
        let mut s = self.lock();
        loop {
            if let Some(item) = s.items.pop_front() {
                return Some(item);
            }
            if s.closed {
                return None;
            }
            s = self.ready.wait(s).unwrap_or_else(|p| p.into_inner());
        }
    }

    pub fn close(&self) {
        self.lock().closed = true;
        self.ready.notify_all();
    }

    pub fn len(&self) -> usize {
        self.lock().items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(received, dropped)` so far.
    pub fn counts(&self) -> (u64, u64) {
        let s = self.lock();
        (s.received, s.dropped)
    }
}

/// Outcome of a streaming run. `received = processed + dropped + rejected`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StreamReport {
    pub received: u64,
    pub processed: u64,
    /// Evicted by the queue before the consumer reached them.
    pub dropped: u64,
    /// Malformed scans refused by the session.
    pub rejected: u64,
    pub p50_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
    /// Why the source stopped early, if it did.
    pub disconnect: Option<String>,
}

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

#[derive(Clone, Debug, Default)]
pub struct StreamOptions {
    pub foot_ik: Option<FootIkConfig>,
    pub queue_capacity: Option<usize>,
}

/// Runs a producer thread that drains `source` into the bounded queue while
/// the calling thread steps `session` and hands each pose to `sink` with the
/// sender's frame index. A source error ends the run cleanly and is recorded
/// in the report; a sink error aborts it.
pub fn run_stream<S>(
    session: &mut Session<'_>,
    source: S,
    sink: &mut dyn FnMut(u64, &PoseFeatures) -> Result<()>,
    options: &StreamOptions,
) -> Result<StreamReport>
where
    S: Iterator<Item = Result<PointCloudFrame>> + Send,
{
    let queue = FrameQueue::new(options.queue_capacity.unwrap_or(QUEUE_CAPACITY));
    let skeleton = session.model().skeleton();
    let mut cleanup = options.foot_ik.map(FootCleanup::new);
    let mut latencies = Vec::new();
    let mut rejected = 0;
    let (disconnect, outcome) = thread::scope(|scope| {
        let producer = scope.spawn(|| {
            let mut reason = None;
            for item in source {
                match item {
                    Ok(frame) => {
                        queue.push(frame);
                    }
                    Err(e) => {
                        reason = Some(e.to_string());
                        break;
                    }
                }
            }
            queue.close();
            reason
        });
        let outcome = (|| -> Result<()> {
            while let Some(frame) = queue.pop() {
                let t0 = Instant::now();
                let pose = match session.step(&frame) {
                    Ok(p) => p,
                    Err(_) => {
                        rejected += 1;
                        continue;
                    }
                };
                let pose = match cleanup.as_mut() {
                    Some(c) => c.apply(&pose, skeleton)?.pose,
                    None => pose,
                };
                latencies.push(t0.elapsed().as_secs_f64() * 1e3);
                sink(frame.frame_index, &pose)?;
            }
            Ok(())
        })();
        // the producer never blocks on the queue; join waits for its source to end
        (producer.join().expect("frame producer panicked"), outcome)
    });
    outcome?;
    let (received, dropped) = queue.counts();
    latencies.sort_by(f64::total_cmp);
    Ok(StreamReport {
        received,
        processed: latencies.len() as u64,
        dropped,
        rejected,
        p50_ms: percentile(&latencies, 0.5),
        p99_ms: percentile(&latencies, 0.99),
        max_ms: latencies.last().copied().unwrap_or(0.0),
        disconnect,
    })
}

/// Accepts one connection on `listener`, streams its frames through
/// `session` and writes each pose back on the same socket.
pub fn serve_connection(
    listener: &TcpListener,
    session: &mut Session<'_>,
    options: &StreamOptions,
    also: &mut dyn FnMut(u64, &PoseFeatures) -> Result<()>,
) -> Result<StreamReport> {
    let (socket, _) = listener.accept().map_err(|e| Error::Stream(format!("accept failed: {e}")))?;
    let reader = socket.try_clone().map_err(|e| Error::Stream(format!("socket clone failed: {e}")))?;
    let mut writer = io::BufWriter::new(socket);
    let mut sink = |index: u64, pose: &PoseFeatures| -> Result<()> {
        writer
            .write_all(&encode_pose(index, pose))
            .and_then(|_| writer.flush())
            .map_err(|e| Error::Stream(format!("pose write failed: {e}")))?;
        also(index, pose)
    };
    run_stream(session, frames_from(io::BufReader::new(reader)), &mut sink, options)
}

/// Client side: sends `frames` at `rate_hz`, then half-closes and collects
/// every pose record the server returns.
pub fn send_frames(addr: impl ToSocketAddrs, frames: &[PointCloudFrame], rate_hz: f64) -> Result<Vec<(u64, Vec<f32>)>> {
    let socket = TcpStream::connect(addr).map_err(|e| Error::Stream(format!("connect failed: {e}")))?;
    let mut reader = io::BufReader::new(socket.try_clone().map_err(|e| Error::Stream(e.to_string()))?);
    thread::scope(|scope| {
        let sender = scope.spawn(|| -> Result<()> {
            let mut w = &socket;
            for f in paced(frames.iter(), rate_hz) {
                w.write_all(&encode_frame(f)).map_err(|e| Error::Stream(format!("frame write failed: {e}")))?;
            }
            socket.shutdown(std::net::Shutdown::Write).map_err(|e| Error::Stream(e.to_string()))
        });
        let mut poses = Vec::new();
        while let Some(p) = read_pose(&mut reader)? {
            poses.push(p);
        }
        sender.join().expect("frame sender panicked")?;
        Ok(poses)
    })
}
