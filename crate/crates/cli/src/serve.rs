//! Reference observer server: answers the line protocol with the heuristic
//! backend, over stdio or HTTP.

use std::io::{BufRead, Write};
use std::sync::Arc;
use std::thread;

use anyhow::Context;
use tiny_http::{Header, Method, Response, Server};

use condense_core::observer::wire::{decode_request, encode_error, encode_response, sniff_canvas_id};
use condense_core::observer::ObserverBackend;

/// Handles one request line; malformed input yields an error record.
pub fn answer(backend: &dyn ObserverBackend, line: &str) -> String {
    match decode_request(line) {
        Ok(req) => match backend.detect(&req) {
            Ok(dets) => encode_response(req.canvas_id, &dets),
            Err(e) => encode_error(req.canvas_id, &e.to_string()),
        },
        Err(e) => encode_error(sniff_canvas_id(line), &e.to_string()),
    }
}

pub fn serve_stdio(backend: &dyn ObserverBackend) -> anyhow::Result<()> {
    let stdin = std::io::stdin();
    let mut out = std::io::stdout().lock();
    for line in stdin.lock().lines() {
        let line = line.context("reading request")?;
        if line.trim().is_empty() {
            continue;
        }
        writeln!(out, "{}", answer(backend, &line))?;
        out.flush()?;
    }
    Ok(())
}

pub fn serve_http(backend: Arc<dyn ObserverBackend>, addr: &str, threads: usize) -> anyhow::Result<()> {
    let server = Arc::new(Server::http(addr).map_err(|e| anyhow::anyhow!("binding {addr}: {e}"))?);
    let bound = server
        .server_addr()
        .to_ip()
        .context("server is not bound to an IP address")?;
    println!("listening on http://{bound}");
    std::io::stdout().flush()?;
    let json = Header::from_bytes(&b"Content-Type"[..], &b"application/json"[..]).expect("static header");
    let handles: Vec<_> = (0..threads.max(1))
        .map(|_| {
            let server = server.clone();
            let backend = backend.clone();
            let json = json.clone();
            thread::spawn(move || {
                for mut request in server.incoming_requests() {
                    let (status, body) = match (request.method(), request.url()) {
                        (Method::Get, "/health") => (200, r#"{"status":"ok"}"#.to_string()),
                        (Method::Post, "/score") => {
                            let mut body = String::new();
                            match request.as_reader().read_to_string(&mut body) {
                                Ok(_) => (200, answer(backend.as_ref(), &body)),
                                Err(e) => (400, encode_error(0, &format!("reading body: {e}"))),
                            }
                        }
                        _ => (404, r#"{"error":"not found"}"#.to_string()),
                    };
                    let resp = Response::from_string(body)
                        .with_status_code(status)
                        .with_header(json.clone());
                    if let Err(e) = request.respond(resp) {
                        log::warn!("responding: {e}");
                    }
                }
            })
        })
        .collect();
    for h in handles {
        let _ = h.join();
    }
    Ok(())
}
