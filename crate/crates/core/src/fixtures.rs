//! Synthetic pcap corpora with known per-device payload patterns.
//!
//! Every fake device opens `sessions` TCP connections to its own server.
//! Each connection carries a handshake, one request (the device template
//! followed by seeded random bytes), one response and a FIN exchange.
//! UDP chatter is sprinkled in so the TCP filter has something to drop.

use std::fs;
use std::io;
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capture::{ethernet_frame, tcp_flags, FrameSpec, MacAddr, PcapWriter, Timestamp, IPPROTO_TCP, IPPROTO_UDP};
use crate::dataset::DeviceKind;
use crate::pipeline::MacMap;
use crate::transform::VECTOR_LEN;

#[derive(Debug, Error)]
pub enum FixtureError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid fixture spec: {0}")]
    Invalid(String),
}

fn default_files() -> usize {
    2
}

fn default_tail() -> usize {
    16
}

fn default_udp_every() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureDevice {
    pub name: String,
    /// `iot` or `non-iot`.
    pub kind: String,
    pub mac: String,
    pub sessions: usize,
    /// Request prefix as text. Ignored when `template_hex` is set.
    #[serde(default)]
    pub template: String,
    #[serde(default)]
    pub template_hex: Option<String>,
    /// Response prefix sent back by the server.
    #[serde(default)]
    pub response: String,
    /// Random bytes sent ahead of the template in each request.
    #[serde(default)]
    pub random_head: usize,
    /// Random bytes appended to each request and response.
    #[serde(default = "default_tail")]
    pub random_tail: usize,
    /// Fixed text written over the request at absolute offsets, after the
    /// head, template and tail are laid out.
    #[serde(default, rename = "field", skip_serializing_if = "Vec::is_empty")]
    pub fields: Vec<FixtureField>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureField {
    pub offset: usize,
    pub text: String,
}

impl FixtureDevice {
    fn template_bytes(&self) -> Result<Vec<u8>, FixtureError> {
        match &self.template_hex {
            Some(h) => {
                let clean: String = h.chars().filter(|c| !c.is_whitespace()).collect();
                if !clean.len().is_multiple_of(2) {
                    return Err(FixtureError::Invalid(format!("{}: odd-length template_hex", self.name)));
                }
                (0..clean.len())
                    .step_by(2)
                    .map(|i| {
                        u8::from_str_radix(&clean[i..i + 2], 16)
                            .map_err(|_| FixtureError::Invalid(format!("{}: bad hex in template", self.name)))
                    })
                    .collect()
            }
            None => Ok(self.template.as_bytes().to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FixtureSpec {
    pub seed: u64,
    #[serde(default = "default_files")]
    pub files: usize,
    /// One UDP datagram after every this many sessions (0 disables).
    #[serde(default = "default_udp_every")]
    pub udp_every: usize,
    #[serde(rename = "device")]
    pub devices: Vec<FixtureDevice>,
}

impl FixtureSpec {
    pub fn from_toml(text: &str) -> Result<Self, FixtureError> {
        toml::from_str(text).map_err(|e| FixtureError::Invalid(e.to_string()))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("fixture spec serialises")
    }

    /// MAC map text matching the devices.
    pub fn mac_map(&self) -> Result<MacMap, FixtureError> {
        let mut map = MacMap::default();
        for d in &self.devices {
            let mac: MacAddr = d.mac.parse().map_err(|e| FixtureError::Invalid(format!("{e}")))?;
            let kind: DeviceKind = d.kind.parse().map_err(FixtureError::Invalid)?;
            map.insert(mac, &d.name, kind);
        }
        Ok(map)
    }

    fn validate(&self) -> Result<(), FixtureError> {
        if self.files == 0 {
            return Err(FixtureError::Invalid("files must be at least 1".into()));
        }
        if self.devices.is_empty() {
            return Err(FixtureError::Invalid("no devices".into()));
        }
        if self.devices.len() > 200 {
            return Err(FixtureError::Invalid("at most 200 devices".into()));
        }
        for d in &self.devices {
            if d.template_bytes()?.is_empty() && d.random_head + d.random_tail == 0 && d.fields.is_empty() {
                return Err(FixtureError::Invalid(format!("{}: empty template and no random bytes", d.name)));
            }
            if d.sessions > 50_000 {
                return Err(FixtureError::Invalid(format!("{}: at most 50000 sessions per device", d.name)));
            }
        }
        Ok(())
    }

    /// Four well-separated devices (three IoT, one non-IoT).
    ///
    /// IoT requests are 784 bytes of random filler carrying two of three
    /// fixed protocol blocks; each pair of IoT devices shares exactly one
    /// block. With any IoT device withheld, its traffic carries one block
    /// of each remaining device and so resembles neither.
    pub fn desk_scale(seed: u64, sessions: usize) -> Self {
        const STREAM: (usize, &str) = (40, "\u{1}CAMv2\u{0}\u{0}\u{10}STREAM-KEEPALIVE id=cam-7731 fw=4.2.18");
        const UPLOAD: (usize, &str) = (300, "POST /cgi/measure HTTP/1.0\r\nContent-Type: application/octet-stream\r\n\r\n");
        const SOAP: (usize, &str) = (560, "<?xml version=\"1.0\"?><s:Envelope><s:Body><u:SetBinaryState>");
        let iot = |name: &str, mac: &str, blocks: [(usize, &str); 2]| FixtureDevice {
            name: name.into(),
            kind: "iot".into(),
            mac: mac.into(),
            sessions,
            template: String::new(),
            template_hex: None,
            response: "\u{1}ACK\u{0}".into(),
            random_head: 0,
            random_tail: VECTOR_LEN,
            fields: blocks
                .iter()
                .map(|&(offset, text)| FixtureField {
                    offset,
                    text: text.into(),
                })
                .collect(),
        };
        FixtureSpec {
            seed,
            files: 3,
            udp_every: 10,
            devices: vec![
                FixtureDevice {
                    name: "Workstation".into(),
                    kind: "non-iot".into(),
                    mac: "02:00:00:00:00:01".into(),
                    sessions,
                    template: "GET /index.html HTTP/1.1\r\nHost: www.example.org\r\nUser-Agent: Mozilla/5.0 (X11; Linux x86_64) Firefox/118.0\r\nAccept: text/html,application/xhtml+xml\r\nAccept-Language: en-US,en;q=0.5\r\n\r\n".into(),
                    template_hex: None,
                    response: "HTTP/1.1 200 OK\r\nContent-Type: text/html; charset=UTF-8\r\nServer: nginx\r\n\r\n<!doctype html><html><head><title>Example</title></head><body>".into(),
                    random_head: 0,
                    random_tail: 300,
                    fields: Vec::new(),
                },
                iot("Smart camera", "02:00:00:00:00:02", [STREAM, UPLOAD]),
                iot("Sleep sensor", "02:00:00:00:00:03", [UPLOAD, SOAP]),
                iot("Light switch", "02:00:00:00:00:04", [SOAP, STREAM]),
            ],
        }
    }
}

struct Frame {
    at: Timestamp,
    bytes: Vec<u8>,
}

fn random_bytes(rng: &mut ChaCha8Rng, n: usize) -> Vec<u8> {
    (0..n).map(|_| rng.random()).collect()
}

/// Packets of one synthetic TCP connection.
#[allow(clippy::too_many_arguments)]
fn session_frames(
    client: (MacAddr, Ipv4Addr, u16),
    server: (MacAddr, Ipv4Addr, u16),
    request: &[u8],
    response: &[u8],
    start: Timestamp,
    rng: &mut ChaCha8Rng,
) -> Vec<Frame> {
    let (cmac, cip, cport) = client;
    let (smac, sip, sport) = server;
    let mut cseq: u32 = rng.random();
    let mut sseq: u32 = rng.random();
    let mut t = start;
    let mut frames = Vec::new();
    let mut push = |from_client: bool, flags: u8, seq: u32, ack: u32, payload: &[u8], t: &mut Timestamp| {
        let spec = if from_client {
            FrameSpec {
                src_mac: cmac,
                dst_mac: smac,
                src_ip: cip,
                dst_ip: sip,
                src_port: cport,
                dst_port: sport,
                protocol: IPPROTO_TCP,
                tcp_flags: flags,
                seq,
                ack,
                payload,
            }
        } else {
            FrameSpec {
                src_mac: smac,
                dst_mac: cmac,
                src_ip: sip,
                dst_ip: cip,
                src_port: sport,
                dst_port: cport,
                protocol: IPPROTO_TCP,
                tcp_flags: flags,
                seq,
                ack,
                payload,
            }
        };
        frames.push(Frame {
            at: *t,
            bytes: ethernet_frame(&spec),
        });
        t.nanos += 1_000_000;
        if t.nanos >= 1_000_000_000 {
            t.nanos -= 1_000_000_000;
            t.secs += 1;
        }
    };
    use tcp_flags::{ACK, FIN, PSH, SYN};
    push(true, SYN, cseq, 0, &[], &mut t);
    push(false, SYN | ACK, sseq, cseq.wrapping_add(1), &[], &mut t);
    cseq = cseq.wrapping_add(1);
    sseq = sseq.wrapping_add(1);
    push(true, ACK, cseq, sseq, &[], &mut t);
    push(true, PSH | ACK, cseq, sseq, request, &mut t);
    cseq = cseq.wrapping_add(request.len() as u32);
    push(false, ACK, sseq, cseq, &[], &mut t);
    if !response.is_empty() {
        push(false, PSH | ACK, sseq, cseq, response, &mut t);
        sseq = sseq.wrapping_add(response.len() as u32);
        push(true, ACK, cseq, sseq, &[], &mut t);
    }
    push(true, FIN | ACK, cseq, sseq, &[], &mut t);
    push(false, FIN | ACK, sseq, cseq.wrapping_add(1), &[], &mut t);
    push(true, ACK, cseq.wrapping_add(1), sseq.wrapping_add(1), &[], &mut t);
    frames
}

/// Builds the pcap files in memory. Sessions are dealt round-robin across
/// devices and then across files.
pub fn generate(spec: &FixtureSpec) -> Result<Vec<Vec<u8>>, FixtureError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let router = MacAddr([0x02, 0xfe, 0, 0, 0, 1]);
    let templates: Vec<Vec<u8>> = spec.devices.iter().map(FixtureDevice::template_bytes).collect::<Result<_, _>>()?;
    let macs: Vec<MacAddr> = spec
        .devices
        .iter()
        .map(|d| d.mac.parse().map_err(|e| FixtureError::Invalid(format!("{e}"))))
        .collect::<Result<_, _>>()?;

    let mut files: Vec<Vec<Frame>> = (0..spec.files).map(|_| Vec::new()).collect();
    let mut clock = vec![Timestamp { secs: 1_600_000_000, nanos: 0 }; spec.files];
    let max_sessions = spec.devices.iter().map(|d| d.sessions).max().unwrap_or(0);
    let mut slot = 0usize;
    for round in 0..max_sessions {
        for (d, device) in spec.devices.iter().enumerate() {
            if round >= device.sessions {
                continue;
            }
            let file = slot % spec.files;
            slot += 1;
            let client_ip = Ipv4Addr::new(192, 168, 1, 10 + d as u8);
            let server_ip = Ipv4Addr::new(203, 0, 113, 10 + d as u8);
            let client_port = 10_000 + (round % 50_000) as u16;
            let mut request = random_bytes(&mut rng, device.random_head);
            request.extend_from_slice(&templates[d]);
            request.extend(random_bytes(&mut rng, device.random_tail));
            for f in &device.fields {
                let end = f.offset + f.text.len();
                if request.len() < end {
                    request.resize(end, 0);
                }
                request[f.offset..end].copy_from_slice(f.text.as_bytes());
            }
            let mut response = device.response.as_bytes().to_vec();
            if !response.is_empty() {
                response.extend(random_bytes(&mut rng, device.random_tail));
            }
            let frames = session_frames(
                (macs[d], client_ip, client_port),
                (router, server_ip, 443),
                &request,
                &response,
                clock[file],
                &mut rng,
            );
            clock[file].secs += 1;
            files[file].extend(frames);

            if spec.udp_every > 0 && slot.is_multiple_of(spec.udp_every) {
                let query = random_bytes(&mut rng, 32);
                let bytes = ethernet_frame(&FrameSpec {
                    src_mac: macs[d],
                    dst_mac: router,
                    src_ip: client_ip,
                    dst_ip: Ipv4Addr::new(192, 168, 1, 1),
                    src_port: 53_000,
                    dst_port: 53,
                    protocol: IPPROTO_UDP,
                    tcp_flags: 0,
                    seq: 0,
                    ack: 0,
                    payload: &query,
                });
                files[file].push(Frame { at: clock[file], bytes });
            }
        }
    }

    files
        .into_iter()
        .map(|frames| {
            let mut w = PcapWriter::new(Vec::new()).expect("writing to memory");
            for f in &frames {
                w.write_frame(f.at, &f.bytes).expect("writing to memory");
            }
            Ok(w.into_inner())
        })
        .collect()
}

/// Paths produced by [`write_fixtures`].
#[derive(Debug, Clone)]
pub struct FixtureOutput {
    pub pcaps: Vec<PathBuf>,
    pub mac_map: PathBuf,
    pub spec: PathBuf,
}

/// Writes `capture-NN.pcap` files, `devices.macmap` and a copy of the spec.
pub fn write_fixtures(spec: &FixtureSpec, out_dir: &Path) -> Result<FixtureOutput, FixtureError> {
    let io_err = |path: &Path| {
        let path = path.to_path_buf();
        move |source| FixtureError::Io { path, source }
    };
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let mut pcaps = Vec::new();
    for (i, bytes) in generate(spec)?.into_iter().enumerate() {
        let path = out_dir.join(format!("capture-{i:02}.pcap"));
        fs::write(&path, bytes).map_err(io_err(&path))?;
        pcaps.push(path);
    }
    let mac_map = out_dir.join("devices.macmap");
    fs::write(&mac_map, spec.mac_map()?.render()).map_err(io_err(&mac_map))?;
    let spec_path = out_dir.join("fixture.toml");
    fs::write(&spec_path, spec.to_toml()).map_err(io_err(&spec_path))?;
    Ok(FixtureOutput {
        pcaps,
        mac_map,
        spec: spec_path,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::capture::{parse_pcap, split_sessions};

    fn small() -> FixtureSpec {
        let mut s = FixtureSpec::desk_scale(5, 7);
        s.files = 2;
        s
    }

    #[test]
    fn same_seed_same_bytes() {
        assert_eq!(generate(&small()).unwrap(), generate(&small()).unwrap());
        let mut other = small();
        other.seed = 6;
        assert_ne!(generate(&small()).unwrap(), generate(&other).unwrap());
    }

    #[test]
    fn sessions_and_udp_counts() {
        let spec = small();
        let files = generate(&spec).unwrap();
        let mut sessions = 0;
        let mut udp = 0;
        for f in &files {
            let cap = parse_pcap(&f[..]).unwrap();
            udp += cap.skipped.udp;
            sessions += split_sessions(cap.packets).len();
        }
        assert_eq!(sessions, 4 * 7);
        assert_eq!(udp, (4 * 7 / 10) as u64);
    }

    #[test]
    fn desk_iot_devices_share_one_block_per_pair() {
        let spec = FixtureSpec::desk_scale(1, 3);
        let iot: Vec<&FixtureDevice> = spec.devices.iter().filter(|d| d.kind == "iot").collect();
        assert_eq!(iot.len(), 3);
        for (i, a) in iot.iter().enumerate() {
            for b in &iot[i + 1..] {
                assert_eq!(a.fields.iter().filter(|f| b.fields.contains(f)).count(), 1);
            }
        }
        let cap = parse_pcap(&generate(&spec).unwrap()[0][..]).unwrap();
        let camera: MacAddr = iot[0].mac.parse().unwrap();
        let request = cap
            .packets
            .iter()
            .find(|p| p.src_mac == camera && !p.tcp_payload.is_empty())
            .unwrap();
        assert_eq!(request.tcp_payload.len(), VECTOR_LEN);
        for f in &iot[0].fields {
            assert_eq!(&request.tcp_payload[f.offset..f.offset + f.text.len()], f.text.as_bytes());
        }
    }

    #[test]
    fn toml_round_trip() {
        let spec = small();
        assert_eq!(FixtureSpec::from_toml(&spec.to_toml()).unwrap(), spec);
        let text = r#"
            seed = 3
            [[device]]
            name = "a"
            kind = "iot"
            mac = "02:00:00:00:00:0a"
            sessions = 2
            template_hex = "aa aa aa"
        "#;
        let parsed = FixtureSpec::from_toml(text).unwrap();
        assert_eq!(parsed.files, 2);
        assert_eq!(parsed.devices[0].random_tail, 16);
        assert_eq!(parsed.devices[0].template_bytes().unwrap(), vec![0xaa; 3]);
    }

    #[test]
    fn rejects_bad_specs() {
        let mut s = small();
        s.devices[0].mac = "nope".into();
        assert!(matches!(generate(&s), Err(FixtureError::Invalid(_))));
        let mut s = small();
        s.files = 0;
        assert!(generate(&s).is_err());
    }
}
