use std::io::Cursor;
use std::net::TcpListener;
use std::thread;
use std::time::Duration;

use movin::stream::{
    encode_frame, encode_pose, frames_from, paced, percentile, read_frame, read_pose, run_stream, send_frames, serve_connection,
    FrameQueue, StreamOptions, QUEUE_CAPACITY,
};
use movin::Error;
use movin_core::dataset::{simulate_sequence, Split};
use movin_core::inference::{init_session, LatentPolicy};
use movin_core::lidar::{PointCloudFrame, SensorConfig};
use movin_core::motion::{MotionCategory, MotionSpec};
use movin_core::network::{ModelConfig, MovinModel};
use movin_core::postprocess::FootIkConfig;
use movin_core::skeleton::{PoseFeatures, Skeleton};
use proptest::prelude::*;

fn model() -> MovinModel {
    MovinModel::new(ModelConfig::reduced(21), Skeleton::default_humanoid(), 2).unwrap()
}

fn scans(seconds: f64) -> Vec<PointCloudFrame> {
    let spec = MotionSpec::new(MotionCategory::Walk, seconds);
    simulate_sequence("s".into(), &spec, &SensorConfig::default(), Split::Test, 9).unwrap().scans
}

#[test]
fn frame_records_round_trip_and_end_cleanly() {
    let frames = scans(1.0)[..10].to_vec();
    let mut wire = Vec::new();
    for f in &frames {
        wire.extend(encode_frame(f));
    }
    let back: Vec<_> = frames_from(Cursor::new(wire)).collect::<Result<_, _>>().unwrap();
    assert_eq!(back, frames);
}

#[test]
fn frame_layout_is_length_index_count_points() {
    let f = PointCloudFrame { points: vec![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]], frame_index: 7 };
    let bytes = encode_frame(&f);
    assert_eq!(bytes.len(), 4 + 8 + 24);
    assert_eq!(u32::from_le_bytes(bytes[0..4].try_into().unwrap()), 32);
    assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 7);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
    assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1.0);
}

#[test]
fn pose_records_carry_the_full_feature_vector() {
    let pose = PoseFeatures::rest(&Skeleton::default_humanoid(), nalgebra::Vector3::new(0.0, 1.0, 3.0), 0.5);
    let bytes = encode_pose(42, &pose);
    let (index, values) = read_pose(&mut Cursor::new(bytes)).unwrap().unwrap();
    assert_eq!(index, 42);
    assert_eq!(values.len(), 17 + 21 * 15);
    assert_eq!(values, pose.to_vec().iter().map(|&v| v as f32).collect::<Vec<_>>());
}

#[test]
fn truncated_and_inconsistent_records_are_errors() {
    let f = PointCloudFrame { points: vec![[0.0; 3]; 4], frame_index: 1 };
    let bytes = encode_frame(&f);
    assert!(matches!(read_frame(&mut Cursor::new(&bytes[..bytes.len() - 1])), Err(Error::Stream(_))));
    assert!(matches!(read_frame(&mut Cursor::new(&bytes[..2])), Err(Error::Stream(_))));
    let mut lying = bytes.clone();
    lying[8..12].copy_from_slice(&5u32.to_le_bytes());
    assert!(matches!(read_frame(&mut Cursor::new(lying)), Err(Error::Stream(_))));
    let mut huge = bytes;
    huge[0..4].copy_from_slice(&u32::MAX.to_le_bytes());
    assert!(matches!(read_frame(&mut Cursor::new(huge)), Err(Error::Stream(_))));
    assert!(read_frame(&mut Cursor::new(Vec::new())).unwrap().is_none());
}

#[test]
fn queue_evicts_the_oldest_when_full() {
    let q = FrameQueue::new(QUEUE_CAPACITY);
    for k in 0u32..6 {
        let evicted = q.push(k);
        assert_eq!(evicted, k.checked_sub(4));
    }
    assert_eq!(q.len(), 4);
    assert_eq!(q.counts(), (6, 2));
    q.close();
    let drained: Vec<_> = std::iter::from_fn(|| q.pop()).collect();
    assert_eq!(drained, vec![2, 3, 4, 5]);
}

#[test]
fn pop_blocks_until_an_item_or_close() {
    let q = FrameQueue::new(2);
    thread::scope(|s| {
        s.spawn(|| {
            thread::sleep(Duration::from_millis(30));
            q.push(1);
            thread::sleep(Duration::from_millis(30));
            q.close();
        });
        assert_eq!(q.pop(), Some(1));
        assert_eq!(q.pop(), None);
    });
}

#[test]
fn paced_stream_loses_nothing() {
    let m = model();
    let frames = scans(10.0);
    assert_eq!(frames.len(), 200);
    let mut session = init_session(&m, None, LatentPolicy::Zero, 0).unwrap();
    let mut emitted = Vec::new();
    let mut sink = |i: u64, p: &PoseFeatures| {
        assert!(p.is_finite());
        emitted.push(i);
        Ok(())
    };
    let source = paced(frames.clone().into_iter().map(Ok), 20.0);
    let report = run_stream(&mut session, source, &mut sink, &StreamOptions::default()).unwrap();
    assert_eq!((report.received, report.processed, report.dropped, report.rejected), (200, 200, 0, 0));
    assert_eq!(emitted, (0..200).collect::<Vec<u64>>());
    assert!(report.p50_ms >= 0.0 && report.p99_ms >= report.p50_ms && report.max_ms >= report.p99_ms);
    assert!(report.disconnect.is_none());
}

#[test]
fn slow_consumer_drops_oldest_frames_and_counts_them() {
    let m = model();
    let frames = scans(2.0);
    let mut session = init_session(&m, None, LatentPolicy::Zero, 0).unwrap();
    let mut emitted = Vec::new();
    let mut sink = |i: u64, _: &PoseFeatures| {
        emitted.push(i);
        thread::sleep(Duration::from_millis(25));
        Ok(())
    };
    let report = run_stream(&mut session, frames.clone().into_iter().map(Ok), &mut sink, &StreamOptions::default()).unwrap();
    assert_eq!(report.received, 40);
    assert!(report.dropped > 0, "{report:?}");
    assert_eq!(report.received, report.processed + report.dropped + report.rejected);
    assert_eq!(emitted.len() as u64, report.processed);
    assert!(emitted.windows(2).all(|w| w[0] < w[1]));
    // the newest frame always survives eviction
    assert_eq!(*emitted.last().unwrap(), 39);
}

#[test]
fn source_failure_ends_the_run_with_a_report() {
    let m = model();
    let frames = scans(1.0);
    let mut session = init_session(&m, None, LatentPolicy::Zero, 0).unwrap();
    let source = frames[..5].iter().cloned().map(Ok).chain(std::iter::once(Err(Error::Stream("link lost".into()))));
    let mut sink = |_: u64, _: &PoseFeatures| Ok(());
    let report = run_stream(&mut session, source, &mut sink, &StreamOptions::default()).unwrap();
    assert_eq!(report.processed, 5);
    assert!(report.disconnect.unwrap().contains("link lost"));
}

#[test]
fn malformed_frames_are_rejected_not_fatal() {
    let m = model();
    let mut frames = scans(1.0)[..10].to_vec();
    frames[3].points[0][0] = f32::INFINITY;
    let mut session = init_session(&m, None, LatentPolicy::Zero, 0).unwrap();
    let mut sink = |_: u64, _: &PoseFeatures| Ok(());
    let opts = StreamOptions { foot_ik: Some(FootIkConfig::default()), queue_capacity: Some(64) };
    let report = run_stream(&mut session, frames.into_iter().map(Ok), &mut sink, &opts).unwrap();
    assert_eq!((report.processed, report.rejected, report.dropped), (9, 1, 0));
    assert_eq!(session.steps(), 9);
}

#[test]
fn tcp_round_trip_returns_one_pose_per_frame() {
    let m = model();
    let frames = scans(1.5);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let mut session = init_session(&m, None, LatentPolicy::Zero, 0).unwrap();
    let (report, returned) = thread::scope(|s| {
        let client = s.spawn(|| send_frames(addr, &frames, 40.0).unwrap());
        let mut also = |_: u64, _: &PoseFeatures| Ok(());
        let report = serve_connection(&listener, &mut session, &StreamOptions::default(), &mut also).unwrap();
        (report, client.join().unwrap())
    });
    assert_eq!(report.processed, 30);
    assert_eq!(returned.len(), 30);
    assert!(returned.iter().enumerate().all(|(t, (i, v))| *i == t as u64 && v.len() == 17 + 21 * 15));
}

#[test]
fn percentile_uses_nearest_rank() {
    let v: Vec<f64> = (1..=100).map(f64::from).collect();
    assert_eq!(percentile(&v, 0.5), 50.0);
    assert_eq!(percentile(&v, 0.99), 99.0);
    assert_eq!(percentile(&[], 0.5), 0.0);
    assert_eq!(percentile(&[3.0], 0.99), 3.0);
}

proptest! {
    #[test]
    fn queue_accounting_holds(pushes in 0usize..40, capacity in 1usize..6) {
        let q = FrameQueue::new(capacity);
        for k in 0..pushes {
            q.push(k);
        }
        let (received, dropped) = q.counts();
        prop_assert_eq!(received as usize, pushes);
        prop_assert_eq!(dropped as usize, pushes.saturating_sub(capacity));
        prop_assert_eq!(q.len(), pushes.min(capacity));
    }
}
