//! Real-socket roles: a server that collects FEATURE frames from edge
//! connections through the frame barrier, and an edge client that streams
//! one device's frames.
//!
//! One reader thread per connection feeds a channel; the barrier and
//! inference run on the serving thread. Wall-clock numbers are reported,
//! never asserted.

use std::collections::BTreeSet;
use std::io::Write;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc;
use std::time::{Duration, Instant};

use crate::fusion::FusionConfig;
use crate::geometry::CalibrationFile;
use crate::model::{Detection, NetworkSpec, Weights};
use crate::pointcloud::PointCloud;
use crate::protocol::{
    encode_message, read_frame, Message, ResultMessage, WireDetection,
};
use crate::runtime::{edge_step, server_infer, FrameBarrier, RuntimeError};

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub listen: String,
    pub devices: Vec<u16>,
    pub timeout_ms: f64,
    /// Send RESULT frames back to connected edges after each release.
    pub send_results: bool,
}

/// One released frame as served, with measured wall time from first arrival
/// to inference completion.
#[derive(Debug, Clone)]
pub struct ServedFrame {
    pub frame_id: u64,
    pub complete: bool,
    pub detections: Vec<Detection>,
    pub wall_ms: f64,
}

#[derive(Debug, Clone)]
pub struct ServeOutcome {
    pub local_addr: SocketAddr,
    pub frames: Vec<ServedFrame>,
    pub duplicates: u64,
    pub late: u64,
}

enum Event {
    Msg(Message),
    Done(u16),
    Failed(String),
}

/// Serves one session: accepts one connection per expected device, collects
/// FEATURE frames through the barrier, runs inference per release, and
/// returns once every device said BYE and the buffer is drained.
/// `on_ready` fires with the bound address before accepting.
pub fn serve(
    cfg: &ServeConfig,
    calibration: &CalibrationFile,
    spec: &NetworkSpec,
    weights: &Weights,
    fusion: &FusionConfig,
    on_ready: impl FnOnce(SocketAddr),
) -> Result<ServeOutcome, RuntimeError> {
    let listener =
        TcpListener::bind(&cfg.listen).map_err(|e| RuntimeError::Net(format!("bind {}: {e}", cfg.listen)))?;
    let local_addr = listener
        .local_addr()
        .map_err(|e| RuntimeError::Net(e.to_string()))?;
    on_ready(local_addr);
    log::info!("serving on {local_addr}, expecting {} devices", cfg.devices.len());

    let (tx, rx) = mpsc::channel::<Event>();
    let mut writers: Vec<TcpStream> = Vec::new();
    let mut reader_handles = Vec::new();
    for _ in 0..cfg.devices.len() {
        let (stream, peer) = listener
            .accept()
            .map_err(|e| RuntimeError::Net(format!("accept: {e}")))?;
        log::debug!("connection from {peer}");
        if cfg.send_results {
            if let Ok(w) = stream.try_clone() {
                writers.push(w);
            }
        }
        let tx = tx.clone();
        reader_handles.push(std::thread::spawn(move || reader_loop(stream, tx)));
    }
    drop(tx);

    let start = Instant::now();
    let now_us = |start: Instant| start.elapsed().as_micros() as u64;
    let mut barrier = FrameBarrier::new(cfg.devices.iter().copied(), cfg.timeout_ms);
    let mut done: BTreeSet<u16> = BTreeSet::new();
    let mut frames: Vec<ServedFrame> = Vec::new();
    let mut first_arrival: std::collections::BTreeMap<u64, Instant> = Default::default();

    let handle_release = |release: crate::runtime::FrameRelease,
                              frames: &mut Vec<ServedFrame>,
                              writers: &mut Vec<TcpStream>,
                              first_arrival: &std::collections::BTreeMap<u64, Instant>|
     -> Result<(), RuntimeError> {
        let dets = server_infer(&release.tensors, calibration, fusion, spec, weights)?;
        let wall_ms = first_arrival
            .get(&release.frame_id)
            .map(|t| t.elapsed().as_secs_f64() * 1e3)
            .unwrap_or(0.0);
        if cfg.send_results {
            let msg = Message::Result(ResultMessage {
                frame_id: release.frame_id,
                detections: dets
                    .iter()
                    .map(|d| WireDetection {
                        center: [d.center[0] as f32, d.center[1] as f32, d.center[2] as f32],
                        size: [d.size[0] as f32, d.size[1] as f32, d.size[2] as f32],
                        score: d.score,
                        class_id: d.class_id as u16,
                    })
                    .collect(),
            });
            if let Ok(bytes) = encode_message(&msg) {
                writers.retain_mut(|w| w.write_all(&bytes).is_ok());
            }
        }
        frames.push(ServedFrame {
            frame_id: release.frame_id,
            complete: release.complete,
            detections: dets,
            wall_ms,
        });
        Ok(())
    };

    loop {
        match rx.recv_timeout(Duration::from_millis(2)) {
            Ok(Event::Msg(Message::Feature(msg))) => {
                first_arrival.entry(msg.frame_id).or_insert_with(Instant::now);
                if let Some(r) = barrier.offer(msg.device_id, msg.frame_id, msg.tensor, now_us(start))
                {
                    handle_release(r, &mut frames, &mut writers, &first_arrival)?;
                }
            }
            Ok(Event::Msg(_)) => {}
            Ok(Event::Done(device)) => {
                done.insert(device);
            }
            Ok(Event::Failed(reason)) => {
                log::warn!("edge connection failed: {reason}");
            }
            Err(mpsc::RecvTimeoutError::Timeout) => {}
            Err(mpsc::RecvTimeoutError::Disconnected) => break,
        }
        for r in barrier.poll(now_us(start)) {
            handle_release(r, &mut frames, &mut writers, &first_arrival)?;
        }
        if done.len() == cfg.devices.len() {
            break;
        }
    }
    // End of stream: drain whatever is still buffered.
    for r in barrier.flush(now_us(start)) {
        handle_release(r, &mut frames, &mut writers, &first_arrival)?;
    }
    drop(writers);
    for h in reader_handles {
        let _ = h.join();
    }
    frames.sort_by_key(|f| f.frame_id);
    Ok(ServeOutcome {
        local_addr,
        frames,
        duplicates: barrier.duplicates,
        late: barrier.late,
    })
}

fn reader_loop(mut stream: TcpStream, tx: mpsc::Sender<Event>) {
    let mut device: Option<u16> = None;
    loop {
        match read_frame(&mut stream) {
            Ok(Message::Hello { device_id }) => {
                device = Some(device_id);
                let _ = tx.send(Event::Msg(Message::Hello { device_id }));
            }
            Ok(Message::Bye) => {
                let _ = tx.send(Event::Done(device.unwrap_or(u16::MAX)));
                return;
            }
            Ok(msg) => {
                let _ = tx.send(Event::Msg(msg));
            }
            Err(e) => {
                // EOF without BYE or a malformed frame both end the stream;
                // the device's remaining frames will time out.
                let _ = tx.send(Event::Failed(format!("device {device:?}: {e}")));
                let _ = tx.send(Event::Done(device.unwrap_or(u16::MAX)));
                return;
            }
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct EdgeReport {
    /// (frame id, sent bytes) per transmitted frame.
    pub frames: Vec<(u64, usize)>,
    pub results: Vec<ResultMessage>,
}

/// Streams one device's frames to the server: HELLO, one FEATURE per cloud,
/// BYE. With `read_results` the client then drains RESULT frames until the
/// server closes the connection.
pub fn edge_client(
    connect: &str,
    device_id: u16,
    clouds: &[PointCloud],
    spec: &NetworkSpec,
    weights: &Weights,
    read_results: bool,
) -> Result<EdgeReport, RuntimeError> {
    let mut stream = connect_with_retry(connect)?;
    stream
        .set_nodelay(true)
        .map_err(|e| RuntimeError::Net(e.to_string()))?;
    let hello = encode_message(&Message::Hello { device_id })?;
    stream
        .write_all(&hello)
        .map_err(|e| RuntimeError::Net(format!("hello: {e}")))?;

    let mut report = EdgeReport::default();
    for (frame_id, cloud) in clouds.iter().enumerate() {
        let frame_id = frame_id as u64;
        let bytes = edge_step(
            cloud,
            spec,
            weights,
            device_id,
            frame_id,
            frame_id * 100_000,
            &mut stream,
        )?;
        report.frames.push((frame_id, bytes));
    }
    let bye = encode_message(&Message::Bye)?;
    stream
        .write_all(&bye)
        .map_err(|e| RuntimeError::Net(format!("bye: {e}")))?;
    if read_results {
        loop {
            match read_frame(&mut stream) {
                Ok(Message::Result(r)) => report.results.push(r),
                Ok(_) => {}
                Err(_) => break, // server closed
            }
        }
    }
    Ok(report)
}

fn connect_with_retry(addr: &str) -> Result<TcpStream, RuntimeError> {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) if Instant::now() < deadline => {
                log::debug!("connect {addr}: {e}; retrying");
                std::thread::sleep(Duration::from_millis(50));
            }
            Err(e) => return Err(RuntimeError::Net(format!("connect {addr}: {e}"))),
        }
    }
}
