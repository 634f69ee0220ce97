use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;

use serde::{Deserialize, Serialize};
use tiny_http::{Header, Method, Request, Response, Server};

use super::extract::{check_window, extract, ExtractionRequest, SpanScorer};
use crate::error::{Error, Result};

/// Answer of `GET /health`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HealthInfo {
    pub status: String,
    pub vocab_size: usize,
    pub d: usize,
    pub types: Vec<String>,
}

/// A running service. Dropping it stops the workers.
pub struct ServiceHandle {
    server: Arc<Server>,
    workers: Vec<JoinHandle<()>>,
    addr: SocketAddr,
}

impl ServiceHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn port(&self) -> u16 {
        self.addr.port()
    }

    /// Blocks until the workers exit (they only do after [`Self::shutdown`]).
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Serves `POST /extract` and `GET /health` on `addr` (port 0 picks a free
/// port) with `workers` threads sharing the read-only scorer.
pub fn serve(scorer: Arc<dyn SpanScorer>, health: HealthInfo, addr: &str, workers: usize) -> Result<ServiceHandle> {
    let server = Server::http(addr).map_err(|e| Error::Config(format!("cannot listen on {addr}: {e}")))?;
    let addr = server
        .server_addr()
        .to_ip()
        .ok_or_else(|| Error::Config(format!("{addr} is not an IP address")))?;
    let server = Arc::new(server);
    let health = Arc::new(health);
    let workers = (0..workers.max(1))
        .map(|_| {
            let (server, scorer, health) = (Arc::clone(&server), Arc::clone(&scorer), Arc::clone(&health));
            std::thread::spawn(move || {
                while let Ok(req) = server.recv() {
                    handle(req, scorer.as_ref(), &health);
                }
            })
        })
        .collect();
    log::info!("listening on {addr}");
    Ok(ServiceHandle { server, workers, addr })
}

fn json_response(status: u16, body: String) -> Response<std::io::Cursor<Vec<u8>>> {
    let header = Header::from_bytes("Content-Type", "application/json").expect("static header");
    Response::from_string(body).with_status_code(status).with_header(header)
}

fn error_body(message: &str) -> String {
    serde_json::json!({ "error": message }).to_string()
}

/// Status code and JSON body for one request.
pub fn respond(method: &str, path: &str, body: &[u8], scorer: &dyn SpanScorer, health: &HealthInfo) -> (u16, String) {
    match (method, path) {
        ("GET", "/health") => (200, serde_json::to_string(health).expect("health serializes")),
        ("POST", "/extract") => {
            let req: ExtractionRequest = match serde_json::from_slice(body) {
                Ok(r) => r,
                Err(e) => return (400, error_body(&format!("malformed request: {e}"))),
            };
            // texts that would be cut are refused rather than silently truncated
            match check_window(scorer, &req).and_then(|()| extract(scorer, &req)) {
                Ok(r) => (200, serde_json::to_string(&r).expect("result serializes")),
                Err(e @ (Error::TextTooLong | Error::InvalidArgument(_))) => (400, error_body(&e.to_string())),
                Err(e) => (500, error_body(&e.to_string())),
            }
        }
        (_, "/health" | "/extract") => (405, error_body("method not allowed")),
        _ => (404, error_body("not found")),
    }
}

fn handle(mut req: Request, scorer: &dyn SpanScorer, health: &HealthInfo) {
    let mut body = Vec::new();
    let (status, text) = match req.as_reader().read_to_end(&mut body) {
        Ok(_) => {
            let method = match req.method() {
                Method::Get => "GET",
                Method::Post => "POST",
                _ => "OTHER",
            };
            let path = req.url().split('?').next().unwrap_or("").to_string();
            respond(method, &path, &body, scorer, health)
        }
        Err(e) => (400, error_body(&format!("unreadable body: {e}"))),
    };
    if let Err(e) = req.respond(json_response(status, text)) {
        log::warn!("failed to send response: {e}");
    }
}
