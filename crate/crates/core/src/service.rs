//! Minimal client/server split of the deployment framework: the transform
//! stays with the client, the classifier runs behind a TCP service, and the
//! wire only ever carries protected pixels.
//!
//! Framing: `magic (4) | version (1) | payload length (4, BE) | payload`.
//! Requests carry one PNG image; responses carry a JSON document.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use ndarray::{Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::argmax_row;
use crate::imageio;
use crate::models::{ResNet, UNet};
use crate::scalar::Scalar;

const REQUEST_MAGIC: [u8; 4] = *b"PXVQ";
const RESPONSE_MAGIC: [u8; 4] = *b"PXVR";
const VERSION: u8 = 1;
/// Requests larger than this are rejected outright.
pub const MAX_PAYLOAD: usize = 8 * 1024 * 1024;
const READ_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "lowercase")]
pub enum WireResponse {
    Ok(ClassifyResponse),
    Error { reason: String },
}

/// Probability vector, argmax label, and the serving model's digest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ClassifyResponse {
    pub probabilities: Vec<f64>,
    pub label: usize,
    pub model_digest: String,
}

/// PNG bytes framed as a classification request.
pub fn encode_request(png: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(9 + png.len());
    out.extend_from_slice(&REQUEST_MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(png.len() as u32).to_be_bytes());
    out.extend_from_slice(png);
    out
}

fn write_response(stream: &mut TcpStream, response: &WireResponse) -> std::io::Result<()> {
    let body = serde_json::to_vec(response).expect("wire response serializes");
    stream.write_all(&RESPONSE_MAGIC)?;
    stream.write_all(&[VERSION])?;
    stream.write_all(&(body.len() as u32).to_be_bytes())?;
    stream.write_all(&body)?;
    stream.flush()
}

enum FrameOutcome {
    Payload(Vec<u8>),
    /// Clean end of stream before a new frame.
    Closed,
    /// The framing itself is broken; the reply was sent, drop the stream.
    Fatal,
}

fn read_request(stream: &mut TcpStream) -> FrameOutcome {
    let mut head = [0u8; 9];
    match stream.read_exact(&mut head) {
        Ok(()) => {}
        Err(_) => return FrameOutcome::Closed,
    }
    if head[..4] != REQUEST_MAGIC || head[4] != VERSION {
        let _ = write_response(
            stream,
            &WireResponse::Error {
                reason: "bad request frame (magic/version)".into(),
            },
        );
        return FrameOutcome::Fatal;
    }
    let len = u32::from_be_bytes(head[5..9].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        let _ = write_response(
            stream,
            &WireResponse::Error {
                reason: format!("payload of {len} bytes exceeds the {MAX_PAYLOAD} byte limit"),
            },
        );
        return FrameOutcome::Fatal;
    }
    let mut payload = vec![0u8; len];
    match stream.read_exact(&mut payload) {
        Ok(()) => FrameOutcome::Payload(payload),
        Err(_) => {
            let _ = write_response(
                stream,
                &WireResponse::Error {
                    reason: "truncated payload".into(),
                },
            );
            FrameOutcome::Fatal
        }
    }
}

/// Classify one decoded payload. Never sees anything but the submitted
/// (protected) pixels.
fn classify_payload<T: Scalar>(
    psi: &ResNet<T>,
    digest: &str,
    payload: &[u8],
) -> WireResponse {
    let image: Array3<T> = match imageio::decode_png(payload) {
        Ok(img) => img,
        Err(e) => {
            return WireResponse::Error {
                reason: e.to_string(),
            }
        }
    };
    let batch = match crate::eval::stack_pixels(&[&image]) {
        Ok(b) => b,
        Err(e) => {
            return WireResponse::Error {
                reason: e.to_string(),
            }
        }
    };
    match psi.classify(&batch) {
        Ok(probs) => {
            let row = probs.index_axis(Axis(0), 0);
            WireResponse::Ok(ClassifyResponse {
                probabilities: row.iter().map(|v| v.as_f64()).collect(),
                label: argmax_row(row),
                model_digest: digest.to_string(),
            })
        }
        Err(e) => WireResponse::Error {
            reason: e.to_string(),
        },
    }
}

pub struct ServerHandle {
    pub local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop_inner();
    }

    fn stop_inner(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // poke the blocking accept
        let _ = TcpStream::connect(self.local_addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.join.is_some() {
            self.stop_inner();
        }
    }
}

/// Run the classification service on `addr` (use port 0 for an ephemeral
/// port). The returned handle reports the bound address and stops the
/// service on shutdown/drop.
pub fn serve_classifier<T: Scalar + 'static>(
    psi: ResNet<T>,
    model_digest: String,
    addr: &str,
) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)
        .map_err(|e| Error::Transport {
            detail: format!("cannot bind {addr}: {e}"),
            retries: 1,
        })?;
    let local_addr = listener.local_addr().map_err(|e| Error::Transport {
        detail: format!("no local address: {e}"),
        retries: 1,
    })?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_flag = stop.clone();
    let psi = Arc::new(psi);

    let join = thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_flag.load(Ordering::SeqCst) {
                break;
            }
            let Ok(mut stream) = conn else { continue };
            let psi = psi.clone();
            let digest = model_digest.clone();
            thread::spawn(move || {
                let _ = stream.set_read_timeout(Some(READ_TIMEOUT));
                loop {
                    match read_request(&mut stream) {
                        FrameOutcome::Payload(payload) => {
                            let response = classify_payload(psi.as_ref(), &digest, &payload);
                            if write_response(&mut stream, &response).is_err() {
                                break;
                            }
                        }
                        FrameOutcome::Closed | FrameOutcome::Fatal => break,
                    }
                }
            });
        }
    });

    Ok(ServerHandle {
        local_addr,
        stop,
        join: Some(join),
    })
}

fn connect_with_retries(addr: &str, retries: usize) -> Result<TcpStream> {
    let mut attempts = 0;
    loop {
        attempts += 1;
        match TcpStream::connect(addr) {
            Ok(stream) => return Ok(stream),
            Err(e) => {
                if attempts > retries {
                    return Err(Error::Transport {
                        detail: format!("cannot connect to {addr}: {e}"),
                        retries: attempts,
                    });
                }
                thread::sleep(Duration::from_millis(100 * attempts as u64));
            }
        }
    }
}

fn read_wire_response(stream: &mut TcpStream) -> Result<WireResponse> {
    let mut head = [0u8; 9];
    stream.read_exact(&mut head).map_err(|e| Error::Transport {
        detail: format!("connection closed before response: {e}"),
        retries: 1,
    })?;
    if head[..4] != RESPONSE_MAGIC || head[4] != VERSION {
        return Err(Error::Protocol("bad response frame (magic/version)".into()));
    }
    let len = u32::from_be_bytes(head[5..9].try_into().unwrap()) as usize;
    if len > MAX_PAYLOAD {
        return Err(Error::Protocol(format!("response of {len} bytes is oversized")));
    }
    let mut body = vec![0u8; len];
    stream.read_exact(&mut body).map_err(|e| Error::Transport {
        detail: format!("truncated response: {e}"),
        retries: 1,
    })?;
    serde_json::from_slice(&body)
        .map_err(|e| Error::Protocol(format!("undecodable response body: {e}")))
}

/// Submit already-encoded PNG bytes for classification.
pub fn submit_png(png: &[u8], addr: &str, retries: usize) -> Result<ClassifyResponse> {
    let mut stream = connect_with_retries(addr, retries)?;
    stream
        .set_read_timeout(Some(READ_TIMEOUT))
        .map_err(|e| Error::Transport {
            detail: e.to_string(),
            retries: 1,
        })?;
    let frame = encode_request(png);
    stream.write_all(&frame).map_err(|e| Error::Transport {
        detail: format!("send failed: {e}"),
        retries: 1,
    })?;
    match read_wire_response(&mut stream)? {
        WireResponse::Ok(r) => Ok(r),
        WireResponse::Error { reason } => Err(Error::Protocol(reason)),
    }
}

/// Protect an image locally with the public transform and submit only the
/// protected pixels. Returns the service response together with the exact
/// payload that crossed the wire (so callers can audit it).
pub fn client_protect_and_submit<T: Scalar>(
    transform: &UNet<T>,
    image: &Array3<T>,
    addr: &str,
    retries: usize,
) -> Result<(ClassifyResponse, Vec<u8>)> {
    let batch = crate::eval::stack_pixels(&[image])?;
    let protected = transform.infer(&batch)?;
    let png = imageio::encode_png(&protected.index_axis(Axis(0), 0).to_owned())?;
    let response = submit_png(&png, addr, retries)?;
    Ok((response, png))
}
