mod common;

use std::time::Duration;

use common::{eventually, Harness};
use futures::StreamExt;
use iohrt_core::protocol::{chunk_frame, encode_frame_packet, DeviceKind, FrameMeta, FramePacket, FLAG_ECHO};
use iohrt_core::time::now_ms;
use reqwest::StatusCode;
use serde_json::Value;
use tokio::net::UdpSocket;
use uuid::Uuid;

fn fake_jpeg(seq: u32, len: usize) -> Vec<u8> {
    let mut v = vec![0xFF, 0xD8];
    v.extend((0..len).map(|i| (i as u32 ^ seq) as u8));
    v.extend_from_slice(&[0xFF, 0xD9]);
    v
}

fn packets(uuid: Uuid, seq: u32, image: &[u8], max_chunk: usize) -> Vec<Vec<u8>> {
    chunk_frame(image, max_chunk, FrameMeta { device_uuid: uuid, frame_seq: seq, timestamp_ms: now_ms() })
        .unwrap()
        .iter()
        .map(|p| encode_frame_packet(p).unwrap())
        .collect()
}

async fn frame_stats(h: &Harness, token: &str) -> Value {
    h.get("/api/stats", token).await.1["frames"].clone()
}

async fn latest(h: &Harness, token: &str) -> Option<(u32, Vec<u8>)> {
    let resp = h.http.get(h.url("/api/cameras/cam/frame")).bearer_auth(token).send().await.unwrap();
    if resp.status() != StatusCode::OK {
        return None;
    }
    assert_eq!(resp.headers()["content-type"], "image/jpeg");
    let seq = resp.headers()["x-frame-seq"].to_str().unwrap().parse().unwrap();
    Some((seq, resp.bytes().await.unwrap().to_vec()))
}

#[tokio::test]
async fn two_chunk_frame_is_reassembled_and_served() {
    let h = Harness::start().await;
    let cam = h.connect_simple("cam", DeviceKind::Camera).await;
    let udp = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let viewer = h.login("viewer").await;
    assert!(latest(&h, &viewer).await.is_none());

    let image = fake_jpeg(0, 90_000);
    let dgrams = packets(cam.ack.uuid, 0, &image, 60_000);
    assert_eq!(dgrams.len(), 2);
    // Reverse order and a duplicate of each chunk.
    for d in dgrams.iter().rev().chain(dgrams.iter()) {
        udp.send_to(d, h.gw.frame_addr).await.unwrap();
    }
    let got = eventually(Duration::from_secs(3), || latest(&h, &viewer)).await.expect("frame served");
    assert_eq!(got, (0, image));
    let stats = eventually(Duration::from_secs(2), || async {
        let s = frame_stats(&h, &viewer).await;
        (s["frames_stored"] == 1 && s["datagrams"] == 4).then_some(s)
    })
    .await
    .expect("stats settle");
    assert_eq!(stats["duplicate_chunks"].as_u64().unwrap() + stats["late_chunks"].as_u64().unwrap(), 2, "{stats}");
    h.shutdown().await;
}

#[tokio::test]
async fn lost_chunk_drops_the_frame_and_counts_it() {
    let mut cfg = common::test_config();
    cfg.frame_assembly_timeout_ms = 100;
    let h = Harness::with_config(cfg).await;
    let cam = h.connect_simple("cam", DeviceKind::Camera).await;
    let udp = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let viewer = h.login("viewer").await;

    let dgrams = packets(cam.ack.uuid, 5, &fake_jpeg(5, 150_000), 60_000);
    assert_eq!(dgrams.len(), 3);
    udp.send_to(&dgrams[0], h.gw.frame_addr).await.unwrap();
    udp.send_to(&dgrams[2], h.gw.frame_addr).await.unwrap();
    let counted = eventually(Duration::from_secs(3), || async {
        (frame_stats(&h, &viewer).await["incomplete_frames"] == 1).then_some(())
    })
    .await;
    assert!(counted.is_some());
    assert!(latest(&h, &viewer).await.is_none());

    // The next frame is unaffected.
    let image = fake_jpeg(6, 1000);
    for d in packets(cam.ack.uuid, 6, &image, 60_000) {
        udp.send_to(&d, h.gw.frame_addr).await.unwrap();
    }
    let got = eventually(Duration::from_secs(3), || latest(&h, &viewer)).await.unwrap();
    assert_eq!(got, (6, image));
    h.shutdown().await;
}

#[tokio::test]
async fn older_frames_never_replace_newer_ones() {
    let h = Harness::start().await;
    let cam = h.connect_simple("cam", DeviceKind::Camera).await;
    let udp = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let viewer = h.login("viewer").await;
    for seq in [10u32, 9] {
        for d in packets(cam.ack.uuid, seq, &fake_jpeg(seq, 100), 60_000) {
            udp.send_to(&d, h.gw.frame_addr).await.unwrap();
        }
    }
    let late = eventually(Duration::from_secs(3), || async {
        let s = frame_stats(&h, &viewer).await;
        (s["datagrams"] == 2).then_some(s)
    })
    .await
    .unwrap();
    assert_eq!(late["late_chunks"], 1, "{late}");
    assert_eq!(latest(&h, &viewer).await.unwrap().0, 10);
    h.shutdown().await;
}

#[tokio::test]
async fn unknown_uuid_and_garbage_are_counted() {
    let h = Harness::start().await;
    let _cam = h.connect_simple("cam", DeviceKind::Camera).await;
    let udp = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let viewer = h.login("viewer").await;
    udp.send_to(b"garbage", h.gw.frame_addr).await.unwrap();
    for d in packets(Uuid::new_v4(), 0, &fake_jpeg(0, 10), 60_000) {
        udp.send_to(&d, h.gw.frame_addr).await.unwrap();
    }
    let s = eventually(Duration::from_secs(3), || async {
        let s = frame_stats(&h, &viewer).await;
        (s["datagrams"] == 2).then_some(s)
    })
    .await
    .unwrap();
    assert_eq!(s["bad_packets"], 1);
    assert_eq!(s["unknown_device"], 1);
    h.shutdown().await;
}

#[tokio::test]
async fn echo_probe_is_returned_verbatim() {
    let h = Harness::start().await;
    let udp = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let probe = FramePacket {
        flags: FLAG_ECHO,
        device_uuid: Uuid::nil(),
        frame_seq: 42,
        chunk_index: 0,
        chunk_count: 1,
        timestamp_ms: now_ms(),
        payload: vec![1, 2, 3],
    };
    let bytes = encode_frame_packet(&probe).unwrap();
    udp.send_to(&bytes, h.gw.frame_addr).await.unwrap();
    let mut buf = [0u8; 128];
    let (n, _) = tokio::time::timeout(Duration::from_secs(2), udp.recv_from(&mut buf)).await.unwrap().unwrap();
    assert_eq!(&buf[..n], &bytes[..]);
    h.shutdown().await;
}

/// Splits a multipart body into (seq, image) parts.
fn parse_parts(buf: &[u8]) -> (Vec<(u32, Vec<u8>)>, usize) {
    let mut out = Vec::new();
    let mut off = 0;
    loop {
        let rest = &buf[off..];
        let Some(head_end) = rest.windows(4).position(|w| w == b"\r\n\r\n") else { break };
        let head = std::str::from_utf8(&rest[..head_end]).unwrap();
        assert!(head.starts_with("--frame\r\n"), "{head}");
        let field = |name: &str| {
            head.lines()
                .find_map(|l| l.strip_prefix(name))
                .map(|v| v.trim().to_owned())
                .unwrap_or_else(|| panic!("missing {name}"))
        };
        let len: usize = field("Content-Length:").parse().unwrap();
        let seq: u32 = field("X-Frame-Seq:").parse().unwrap();
        let start = head_end + 4;
        if rest.len() < start + len + 2 {
            break;
        }
        out.push((seq, rest[start..start + len].to_vec()));
        off += start + len + 2;
    }
    (out, off)
}

#[tokio::test]
async fn stream_emits_strictly_increasing_sequences() {
    let h = Harness::start().await;
    let cam = h.connect_simple("cam", DeviceKind::Camera).await;
    let udp = UdpSocket::bind("127.0.0.1:0").await.unwrap();
    let viewer = h.login("viewer").await;
    let resp = h.http.get(h.url("/api/cameras/cam/stream")).bearer_auth(&viewer).send().await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("multipart/x-mixed-replace"));
    let mut body = resp.bytes_stream();

    let uuid = cam.ack.uuid;
    let addr = h.gw.frame_addr;
    let sender = tokio::spawn(async move {
        // Includes a reordered pair (4 before 3) that must not move the stream backwards.
        for seq in [0u32, 1, 2, 4, 3, 5, 6, 7, 8, 9] {
            for d in packets(uuid, seq, &fake_jpeg(seq, 2000), 60_000) {
                udp.send_to(&d, addr).await.unwrap();
            }
            tokio::time::sleep(Duration::from_millis(40)).await;
        }
    });

    let mut buf = Vec::new();
    let mut seqs = Vec::new();
    let deadline = tokio::time::Instant::now() + Duration::from_secs(5);
    while seqs.last() != Some(&9) && tokio::time::Instant::now() < deadline {
        let Ok(Some(chunk)) = tokio::time::timeout(Duration::from_secs(2), body.next()).await else { break };
        buf.extend_from_slice(&chunk.unwrap());
        let (parts, used) = parse_parts(&buf);
        buf.drain(..used);
        for (seq, image) in parts {
            assert_eq!(image, fake_jpeg(seq, 2000));
            seqs.push(seq);
        }
    }
    sender.await.unwrap();
    assert!(seqs.len() >= 5, "{seqs:?}");
    assert!(seqs.windows(2).all(|w| w[0] < w[1]), "{seqs:?}");
    assert_eq!(seqs.last(), Some(&9));
    h.shutdown().await;
}
