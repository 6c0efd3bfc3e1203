//! A minimal HTTP/1.1 server standing in for the model bridge.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::thread;

pub struct Request {
    pub method: String,
    pub path: String,
    pub body: String,
}

pub type Handler = dyn Fn(&Request) -> (u16, String) + Send + Sync;

pub struct StubServer {
    pub url: String,
    pub log: Arc<Mutex<Vec<Request>>>,
}

impl StubServer {
    pub fn start(handler: impl Fn(&Request) -> (u16, String) + Send + Sync + 'static) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}", listener.local_addr().unwrap());
        let log = Arc::new(Mutex::new(Vec::new()));
        let handler: Arc<Handler> = Arc::new(handler);
        let thread_log = Arc::clone(&log);
        thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let (h, l) = (Arc::clone(&handler), Arc::clone(&thread_log));
                thread::spawn(move || serve(stream, &*h, &l));
            }
        });
        Self { url, log }
    }

    pub fn count(&self, path: &str) -> usize {
        self.log.lock().unwrap().iter().filter(|r| r.path == path).count()
    }

    pub fn last_body(&self, path: &str) -> Option<String> {
        self.log.lock().unwrap().iter().rev().find(|r| r.path == path).map(|r| r.body.clone())
    }
}

fn serve(stream: TcpStream, handler: &Handler, log: &Mutex<Vec<Request>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or("").to_string();
    let path = parts.next().unwrap_or("").to_string();
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        if reader.read_line(&mut h).unwrap_or(0) == 0 || h == "\r\n" {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap_or(0);
            }
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let req = Request { method, path, body: String::from_utf8(body).unwrap() };
    let (status, text) = handler(&req);
    log.lock().unwrap().push(req);
    let mut stream = stream;
    let _ = write!(
        stream,
        "HTTP/1.1 {status} X\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{text}",
        text.len()
    );
}

/// `/schedule` body for a local ᾱ table.
pub fn schedule_body(alpha_bars: &[f64]) -> String {
    serde_json::json!({ "T": alpha_bars.len(), "alpha_bars": alpha_bars }).to_string()
}
