//! Serves mock services over the wire protocol. Used to exercise the HTTP
//! backends and the conformance checker end to end without real models.

use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use reasonseg::backends::{wire, BackendError, ChatBackend, EmbedBackend, SegmentBackend};
use reasonseg::pipeline::fixtures::MockServices;
use serde_json::{json, Value};

pub struct MockServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

struct Routes {
    chat: Option<Box<dyn ChatBackend>>,
    segment: Box<dyn SegmentBackend>,
    embed: Option<Box<dyn EmbedBackend>>,
}

impl Routes {
    fn handle(&self, path: &str, body: &str) -> (u16, Value) {
        let v: Value = match serde_json::from_str(body) {
            Ok(v) => v,
            Err(e) => return (400, json!({ "error": format!("body is not JSON: {e}") })),
        };
        // decode failures are the caller's fault, service failures are ours
        let (decoded, served): (Result<(), BackendError>, Result<Value, BackendError>) = match path {
            "/chat" => match (&self.chat, wire::decode_chat_request(&v)) {
                (None, _) => return (404, json!({ "error": "no chat fixtures loaded" })),
                (_, Err(e)) => (Err(e), Ok(Value::Null)),
                (Some(c), Ok(r)) => (Ok(()), c.chat(&r).map(|r| wire::encode_chat_response(&r))),
            },
            "/segment" => match wire::decode_segment_request(&v) {
                Err(e) => (Err(e), Ok(Value::Null)),
                Ok(r) => (Ok(()), self.segment.segment(&r).map(|r| wire::encode_segment_response(&r))),
            },
            "/embed" => match (&self.embed, wire::decode_embed_request(&v)) {
                (None, _) => return (404, json!({ "error": "no embed fixtures loaded" })),
                (_, Err(e)) => (Err(e), Ok(Value::Null)),
                (Some(m), Ok(r)) => (Ok(()), m.embed(&r).map(|r| wire::encode_embed_response(&r))),
            },
            other => return (404, json!({ "error": format!("no route {other}") })),
        };
        match (decoded, served) {
            (Err(e), _) => (400, json!({ "error": e.to_string() })),
            (Ok(()), Ok(v)) => (200, v),
            (Ok(()), Err(e)) => (500, json!({ "error": e.to_string() })),
        }
    }
}

impl MockServer {
    /// Binds `addr` (port 0 picks a free port) and serves on `workers` threads.
    pub fn start(services: MockServices, addr: &str, workers: usize) -> std::io::Result<Self> {
        let server = tiny_http::Server::http(addr).map_err(std::io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| std::io::Error::other("not an IP listener"))?;
        let server = Arc::new(server);
        let routes = Arc::new(Routes {
            chat: services.chat.map(|c| Box::new(c) as Box<dyn ChatBackend>),
            segment: Box::new(services.segment),
            embed: services.embed.map(|e| Box::new(e) as Box<dyn EmbedBackend>),
        });
        let workers = (0..workers.max(1))
            .map(|_| {
                let server = server.clone();
                let routes = routes.clone();
                thread::spawn(move || {
                    for mut req in server.incoming_requests() {
                        let mut body = String::new();
                        let (code, v) = match req.as_reader().read_to_string(&mut body) {
                            Ok(_) => routes.handle(req.url(), &body),
                            Err(e) => (400, json!({ "error": e.to_string() })),
                        };
                        let header = tiny_http::Header::from_bytes("content-type", "application/json")
                            .expect("static header");
                        let resp = tiny_http::Response::from_string(v.to_string())
                            .with_status_code(code)
                            .with_header(header);
                        if let Err(e) = req.respond(resp) {
                            log::warn!("respond: {e}");
                        }
                    }
                })
            })
            .collect();
        Ok(Self { server, addr, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self, endpoint: &str) -> String {
        format!("http://{}/{endpoint}", self.addr)
    }

    /// Serves until the process exits.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for MockServer {
    fn drop(&mut self) {
        self.server.unblock();
        for _ in 1..self.workers.len() {
            self.server.unblock();
        }
    }
}
