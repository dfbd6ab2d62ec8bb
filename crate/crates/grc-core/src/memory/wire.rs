//! Framed TCP protocol for the memory store.
//!
//! Every message starts with a 4-byte big-endian frame length followed by
//! a UTF-8 JSON command header. Put requests and get responses carry a
//! second frame of raw payload bytes whose length the header declares.
//! Responses use the same framing with `{status, error?}`.

use super::store::ListEntry;
use super::{CompressedMemory, MemoryMeta, MemoryStore};
use crate::error::{GrcError, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;

/// Frames larger than this are rejected.
pub const DEFAULT_FRAME_CAP: usize = 64 * 1024 * 1024;

#[derive(Debug, Serialize, Deserialize)]
struct Request {
    op: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    doc_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<MemoryMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    payload_len: Option<u64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Response {
    status: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    meta: Option<MemoryMeta>,
    #[serde(skip_serializing_if = "Option::is_none")]
    payload_len: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    records: Option<Vec<ListEntry>>,
}

impl Response {
    fn ok() -> Self {
        Response {
            status: "ok".into(),
            error: None,
            meta: None,
            payload_len: None,
            records: None,
        }
    }

    fn error(message: String) -> Self {
        Response {
            status: "error".into(),
            error: Some(message),
            meta: None,
            payload_len: None,
            records: None,
        }
    }
}

fn write_frame(stream: &mut TcpStream, bytes: &[u8]) -> Result<()> {
    stream.write_all(&(bytes.len() as u32).to_be_bytes())?;
    stream.write_all(bytes)?;
    Ok(())
}

fn read_exact_len(stream: &mut TcpStream, len: usize) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    stream.read_exact(&mut buf)?;
    Ok(buf)
}

fn read_frame(stream: &mut TcpStream, cap: usize) -> Result<Vec<u8>> {
    let mut len_bytes = [0u8; 4];
    stream.read_exact(&mut len_bytes)?;
    let len = u32::from_be_bytes(len_bytes) as usize;
    if len > cap {
        return Err(GrcError::Protocol(format!(
            "frame of {len} bytes exceeds cap {cap}"
        )));
    }
    read_exact_len(stream, len)
}

fn send_json(stream: &mut TcpStream, response: &Response) -> Result<()> {
    write_frame(stream, &serde_json::to_vec(response)?)
}

/// Running server; dropping the handle leaves the thread running, call
/// [`ServerHandle::shutdown`] to stop it.
pub struct ServerHandle {
    pub addr: SocketAddr,
    stop: Arc<AtomicBool>,
    join: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn shutdown(mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock the accept loop.
        let _ = TcpStream::connect(self.addr);
        if let Some(join) = self.join.take() {
            let _ = join.join();
        }
    }
}

/// Serve the store on `addr`; connections are handled concurrently, one
/// thread each.
pub fn serve(store: Arc<MemoryStore>, addr: &str) -> Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let stop_accept = stop.clone();
    let join = std::thread::spawn(move || {
        for conn in listener.incoming() {
            if stop_accept.load(Ordering::SeqCst) {
                break;
            }
            let Ok(stream) = conn else { continue };
            let store = store.clone();
            std::thread::spawn(move || {
                let _ = handle_connection(stream, &store);
            });
        }
    });
    Ok(ServerHandle {
        addr,
        stop,
        join: Some(join),
    })
}

fn handle_connection(mut stream: TcpStream, store: &MemoryStore) -> Result<()> {
    loop {
        let header = match read_frame(&mut stream, DEFAULT_FRAME_CAP) {
            Ok(h) => h,
            Err(GrcError::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => {
                // Connection-scoped error: report and drop the connection,
                // since framing can no longer be trusted.
                let _ = send_json(&mut stream, &Response::error(e.to_string()));
                return Ok(());
            }
        };
        let request: Request = match serde_json::from_slice(&header) {
            Ok(r) => r,
            Err(e) => {
                let _ = send_json(&mut stream, &Response::error(format!("malformed header: {e}")));
                return Ok(());
            }
        };
        match handle_request(&mut stream, store, request) {
            Ok(()) => {}
            Err(e) => {
                let _ = send_json(&mut stream, &Response::error(e.to_string()));
            }
        }
    }
}

fn handle_request(stream: &mut TcpStream, store: &MemoryStore, request: Request) -> Result<()> {
    match request.op.as_str() {
        "put" => {
            let meta = request
                .meta
                .ok_or_else(|| GrcError::Protocol("put requires meta".into()))?;
            let declared = request
                .payload_len
                .ok_or_else(|| GrcError::Protocol("put requires payload_len".into()))?
                as usize;
            if declared != meta.expected_payload_len() {
                // Drain nothing: the framing is broken by contract, so
                // answer and close via the caller's error path.
                return Err(GrcError::Protocol(format!(
                    "declared payload {declared} != expected {}",
                    meta.expected_payload_len()
                )));
            }
            if declared > DEFAULT_FRAME_CAP {
                return Err(GrcError::Protocol("payload exceeds frame cap".into()));
            }
            let payload = read_exact_len(stream, declared)?;
            let memory = CompressedMemory { meta, payload };
            store.put(&memory)?;
            send_json(stream, &Response::ok())
        }
        "get" => {
            let doc_id = request
                .doc_id
                .ok_or_else(|| GrcError::Protocol("get requires doc_id".into()))?;
            let memory = store.get(&doc_id)?;
            let mut response = Response::ok();
            response.payload_len = Some(memory.payload.len() as u64);
            response.meta = Some(memory.meta);
            send_json(stream, &response)?;
            stream.write_all(&memory.payload)?;
            Ok(())
        }
        "list" => {
            let mut response = Response::ok();
            response.records = Some(store.list());
            send_json(stream, &response)
        }
        "delete" => {
            let doc_id = request
                .doc_id
                .ok_or_else(|| GrcError::Protocol("delete requires doc_id".into()))?;
            store.delete(&doc_id)?;
            send_json(stream, &Response::ok())
        }
        other => Err(GrcError::Protocol(format!("unknown op {other:?}"))),
    }
}

/// Blocking client mirroring the store operations over the wire.
pub struct MemoryClient {
    stream: TcpStream,
}

impl MemoryClient {
    pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<Self> {
        Ok(MemoryClient {
            stream: TcpStream::connect(addr)?,
        })
    }

    fn request(&mut self, request: &Request) -> Result<Response> {
        write_frame(&mut self.stream, &serde_json::to_vec(request)?)?;
        let frame = read_frame(&mut self.stream, DEFAULT_FRAME_CAP)?;
        let response: Response = serde_json::from_slice(&frame)?;
        if response.status != "ok" {
            return Err(GrcError::Protocol(
                response.error.unwrap_or_else(|| "unknown server error".into()),
            ));
        }
        Ok(response)
    }

    pub fn put(&mut self, memory: &CompressedMemory) -> Result<()> {
        memory.validate()?;
        let request = Request {
            op: "put".into(),
            doc_id: None,
            meta: Some(memory.meta.clone()),
            payload_len: Some(memory.payload.len() as u64),
        };
        write_frame(&mut self.stream, &serde_json::to_vec(&request)?)?;
        self.stream.write_all(&memory.payload)?;
        let frame = read_frame(&mut self.stream, DEFAULT_FRAME_CAP)?;
        let response: Response = serde_json::from_slice(&frame)?;
        if response.status != "ok" {
            return Err(GrcError::Protocol(
                response.error.unwrap_or_else(|| "unknown server error".into()),
            ));
        }
        Ok(())
    }

    pub fn get(&mut self, doc_id: &str) -> Result<CompressedMemory> {
        let response = self.request(&Request {
            op: "get".into(),
            doc_id: Some(doc_id.to_owned()),
            meta: None,
            payload_len: None,
        })?;
        let meta = response
            .meta
            .ok_or_else(|| GrcError::Protocol("get response missing meta".into()))?;
        let len = response
            .payload_len
            .ok_or_else(|| GrcError::Protocol("get response missing payload_len".into()))?
            as usize;
        let payload = read_exact_len(&mut self.stream, len)?;
        let memory = CompressedMemory { meta, payload };
        memory.validate()?;
        Ok(memory)
    }

    pub fn list(&mut self) -> Result<Vec<ListEntry>> {
        let response = self.request(&Request {
            op: "list".into(),
            doc_id: None,
            meta: None,
            payload_len: None,
        })?;
        response
            .records
            .ok_or_else(|| GrcError::Protocol("list response missing records".into()))
    }

    pub fn delete(&mut self, doc_id: &str) -> Result<()> {
        self.request(&Request {
            op: "delete".into(),
            doc_id: Some(doc_id.to_owned()),
            meta: None,
            payload_len: None,
        })?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn start_server() -> (tempfile::TempDir, Arc<MemoryStore>, ServerHandle) {
        let dir = tempfile::tempdir().unwrap();
        let store = Arc::new(MemoryStore::open(dir.path()).unwrap());
        let handle = serve(store.clone(), "127.0.0.1:0").unwrap();
        (dir, store, handle)
    }

    #[test]
    fn loopback_round_trip_is_bitwise() {
        let (_dir, store, handle) = start_server();
        let mut rng = ChaCha8Rng::seed_from_u64(20);
        let mem = crate::memory::store::tests::random_memory(&mut rng, "wire-doc");
        let mut client = MemoryClient::connect(handle.addr).unwrap();
        client.put(&mem).unwrap();
        assert_eq!(client.get("wire-doc").unwrap(), mem);
        // And matches the in-process view of the same store.
        assert_eq!(store.get("wire-doc").unwrap(), mem);
        let listing = client.list().unwrap();
        assert_eq!(listing.len(), 1);
        client.delete("wire-doc").unwrap();
        assert!(client.get("wire-doc").is_err());
        handle.shutdown();
    }

    #[test]
    fn concurrent_puts_to_distinct_keys() {
        let (_dir, _store, handle) = start_server();
        let addr = handle.addr;
        let threads: Vec<_> = (0..4)
            .map(|i| {
                std::thread::spawn(move || {
                    let mut rng = ChaCha8Rng::seed_from_u64(30 + i);
                    let mem = crate::memory::store::tests::random_memory(
                        &mut rng,
                        &format!("doc-{i}"),
                    );
                    let mut client = MemoryClient::connect(addr).unwrap();
                    client.put(&mem).unwrap();
                    mem
                })
            })
            .collect();
        let memories: Vec<_> = threads.into_iter().map(|t| t.join().unwrap()).collect();
        let mut client = MemoryClient::connect(addr).unwrap();
        for mem in &memories {
            assert_eq!(&client.get(&mem.meta.doc_id).unwrap(), mem);
        }
        handle.shutdown();
    }

    #[test]
    fn oversize_frame_is_rejected() {
        let (_dir, _store, handle) = start_server();
        let mut stream = TcpStream::connect(handle.addr).unwrap();
        // The declared length alone exceeds the cap; the server rejects
        // before any body bytes arrive.
        let huge = (DEFAULT_FRAME_CAP as u32 + 1).to_be_bytes();
        stream.write_all(&huge).unwrap();
        let mut len_bytes = [0u8; 4];
        stream.read_exact(&mut len_bytes).unwrap();
        let len = u32::from_be_bytes(len_bytes) as usize;
        let mut frame = vec![0u8; len];
        stream.read_exact(&mut frame).unwrap();
        let response: Response = serde_json::from_slice(&frame).unwrap();
        assert_eq!(response.status, "error");
        handle.shutdown();
    }

    #[test]
    fn malformed_header_gets_error_response() {
        let (_dir, _store, handle) = start_server();
        let mut stream = TcpStream::connect(handle.addr).unwrap();
        let garbage = b"this is not json";
        stream
            .write_all(&(garbage.len() as u32).to_be_bytes())
            .unwrap();
        stream.write_all(garbage).unwrap();
        let mut len_bytes = [0u8; 4];
        stream.read_exact(&mut len_bytes).unwrap();
        let mut frame = vec![0u8; u32::from_be_bytes(len_bytes) as usize];
        stream.read_exact(&mut frame).unwrap();
        let response: Response = serde_json::from_slice(&frame).unwrap();
        assert_eq!(response.status, "error");
        handle.shutdown();
    }
}
