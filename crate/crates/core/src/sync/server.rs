//! TCP front end for [`Synchronizer`].
//!
//! One thread per connection. Requests are answered in order; responses are
//! buffered and flushed once no further request is already waiting in the
//! read buffer, so pipelined clients get batched writes.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;

use super::Synchronizer;
use crate::wire::{self, ErrorBody, ErrorCode, FrameRead, ResponseEnvelope, HEADER_LEN};

/// Direction tag for captured client-to-server frames.
pub const CAPTURE_IN: u8 = b'>';
/// Direction tag for captured server-to-client frames.
pub const CAPTURE_OUT: u8 = b'<';

// Flushed per frame so a killed server still leaves a complete capture.
type Capture = Arc<Mutex<BufWriter<File>>>;

fn capture(cap: &Option<Capture>, dir: u8, body: &[u8]) {
    if let Some(cap) = cap {
        let mut w = cap.lock().unwrap_or_else(|p| p.into_inner());
        let _ = w
            .write_all(&[dir])
            .and_then(|()| w.write_all(&(body.len() as u32).to_be_bytes()))
            .and_then(|()| w.write_all(body))
            .and_then(|()| w.flush());
    }
}

/// Reads a capture file back as `(direction, body)` pairs.
pub fn read_capture(path: &Path) -> io::Result<Vec<(u8, Vec<u8>)>> {
    let bytes = std::fs::read(path)?;
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        if bytes.len() - pos < 1 + HEADER_LEN {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "truncated capture header"));
        }
        let dir = bytes[pos];
        let len = u32::from_be_bytes(bytes[pos + 1..pos + 5].try_into().unwrap()) as usize;
        pos += 1 + HEADER_LEN;
        let body = bytes
            .get(pos..pos + len)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "truncated capture body"))?;
        out.push((dir, body.to_vec()));
        pos += len;
    }
    Ok(out)
}

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    connections: Arc<Mutex<Vec<(TcpStream, JoinHandle<()>)>>>,
    sync: Arc<Synchronizer>,
    capture: Option<Capture>,
}

impl ServerHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn synchronizer(&self) -> &Arc<Synchronizer> {
        &self.sync
    }

    /// Blocks until the accept loop exits (it only does so after `shutdown`).
    pub fn wait(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting, closes open connections, and flushes the log and capture.
    pub fn shutdown(mut self) -> io::Result<()> {
        self.stop_inner()
    }

    fn stop_inner(&mut self) -> io::Result<()> {
        if self.stop.swap(true, Ordering::SeqCst) && self.acceptor.is_none() {
            return Ok(());
        }
        // Wake the blocking accept.
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        let open: Vec<_> = self.connections.lock().unwrap_or_else(|p| p.into_inner()).drain(..).collect();
        for (stream, worker) in open {
            let _ = stream.shutdown(Shutdown::Both);
            let _ = worker.join();
        }
        if let Some(cap) = &self.capture {
            cap.lock().unwrap_or_else(|p| p.into_inner()).flush()?;
        }
        self.sync.flush()
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        let _ = self.stop_inner();
    }
}

/// Binds `addr` and serves `sync` on background threads.
pub fn serve(
    sync: Arc<Synchronizer>,
    addr: impl ToSocketAddrs,
    capture_path: Option<&Path>,
) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let capture = match capture_path {
        Some(p) => Some(Arc::new(Mutex::new(BufWriter::new(File::create(p)?)))),
        None => None,
    };
    let stop = Arc::new(AtomicBool::new(false));
    let connections: Arc<Mutex<Vec<(TcpStream, JoinHandle<()>)>>> = Arc::new(Mutex::new(Vec::new()));

    let acceptor = {
        let (stop, connections, sync, capture) = (stop.clone(), connections.clone(), sync.clone(), capture.clone());
        std::thread::spawn(move || {
            for conn in listener.incoming() {
                if stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = conn else { continue };
                let _ = stream.set_nodelay(true);
                let Ok(control) = stream.try_clone() else { continue };
                let (sync, capture) = (sync.clone(), capture.clone());
                let worker = std::thread::spawn(move || {
                    let _ = serve_connection(&sync, stream, &capture);
                });
                let mut open = connections.lock().unwrap_or_else(|p| p.into_inner());
                open.retain(|(_, w)| !w.is_finished());
                open.push((control, worker));
            }
        })
    };

    Ok(ServerHandle {
        addr,
        stop,
        acceptor: Some(acceptor),
        connections,
        sync,
        capture,
    })
}

fn error_response(id: u64, code: ErrorCode, message: String) -> ResponseEnvelope {
    ResponseEnvelope {
        id,
        result: Err(ErrorBody::new(code, message)),
    }
}

fn serve_connection(sync: &Synchronizer, stream: TcpStream, cap: &Option<Capture>) -> io::Result<()> {
    let mut reader = BufReader::with_capacity(64 * 1024, stream.try_clone()?);
    let mut writer = BufWriter::with_capacity(64 * 1024, stream);
    loop {
        let response = match wire::read_frame(&mut reader)? {
            FrameRead::Eof => break,
            FrameRead::TooLarge(len) => error_response(
                0,
                ErrorCode::FrameTooLarge,
                format!("frame of {len} bytes exceeds the limit"),
            ),
            FrameRead::Body(body) => {
                capture(cap, CAPTURE_IN, &body);
                match wire::decode_request_body(&body) {
                    Ok(env) => sync.handle(env),
                    Err(e) => error_response(e.request_id().unwrap_or(0), e.code(), e.to_string()),
                }
            }
        };
        let body = wire::encode_response_body(&response);
        let body = if body.len() > wire::MAX_FRAME {
            wire::encode_response_body(&error_response(
                response.id,
                ErrorCode::Internal,
                "response exceeds the frame limit".into(),
            ))
        } else {
            body
        };
        capture(cap, CAPTURE_OUT, &body);
        wire::write_frame(&mut writer, &body)?;
        if reader.buffer().is_empty() {
            writer.flush()?;
        }
    }
    writer.flush()
}
