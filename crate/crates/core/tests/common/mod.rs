#![allow(dead_code)]

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde_json::{json, Value};
use storybook_core::promptgen::{
    DESCRIBE_INSTRUCTION, DESCRIPTOR_INSTRUCTION, SUMMARIZE_INSTRUCTION,
};

pub const ELEPHANTS: &str = "The idea of the herd of elephants made the little prince laugh.";
pub const ELEPHANTS_DESCRIBED: &str =
    "The little prince laughing, surrounded by a herd of elephants";
pub const ELEPHANTS_SUMMARY: &str = "The little prince laughing with elephants";

pub fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

pub fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/golden")
        .join(name)
}

/// How the mock answers every request.
#[derive(Clone, Debug)]
pub enum Reply {
    /// Look up (instruction, input) in the table; echo the input otherwise.
    Table(HashMap<(String, String), String>),
    Status(u16),
    Malformed,
    /// Wait this long before answering with an echo.
    Delay(Duration),
}

/// The worked example's three completions.
pub fn worked_example_table() -> HashMap<(String, String), String> {
    let mut t = HashMap::new();
    t.insert(
        (DESCRIBE_INSTRUCTION.to_string(), ELEPHANTS.to_string()),
        ELEPHANTS_DESCRIBED.to_string(),
    );
    t.insert(
        (
            SUMMARIZE_INSTRUCTION.to_string(),
            ELEPHANTS_DESCRIBED.to_string(),
        ),
        ELEPHANTS_SUMMARY.to_string(),
    );
    t.insert(
        (
            DESCRIPTOR_INSTRUCTION.to_string(),
            ELEPHANTS_SUMMARY.to_string(),
        ),
        format!("{ELEPHANTS_SUMMARY}, symmetrical face, beautiful eyes"),
    );
    t
}

pub struct MockLlm {
    pub url: String,
    /// Parsed JSON bodies and Authorization headers, in arrival order.
    pub requests: Arc<Mutex<Vec<(Value, Option<String>)>>>,
}

impl MockLlm {
    pub fn start(reply: Reply) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let url = format!("http://{}/complete", listener.local_addr().unwrap());
        let requests = Arc::new(Mutex::new(Vec::new()));
        let log = Arc::clone(&requests);
        std::thread::spawn(move || {
            for stream in listener.incoming() {
                let Ok(stream) = stream else { break };
                let reply = reply.clone();
                let log = Arc::clone(&log);
                std::thread::spawn(move || serve(stream, &reply, &log));
            }
        });
        Self { url, requests }
    }
}

fn serve(stream: TcpStream, reply: &Reply, log: &Mutex<Vec<(Value, Option<String>)>>) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut len = 0usize;
    let mut auth = None;
    let mut line = String::new();
    reader.read_line(&mut line).unwrap(); // request line
    loop {
        line.clear();
        if reader.read_line(&mut line).unwrap() == 0 || line.trim().is_empty() {
            break;
        }
        let (name, value) = line.split_once(':').unwrap_or((&line, ""));
        match name.trim().to_ascii_lowercase().as_str() {
            "content-length" => len = value.trim().parse().unwrap(),
            "authorization" => auth = Some(value.trim().to_string()),
            _ => {}
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let req: Value = serde_json::from_slice(&body).unwrap();
    log.lock().unwrap().push((req.clone(), auth));
    let input = req["input"].as_str().unwrap_or_default().to_string();
    let (status, payload) = match reply {
        Reply::Table(t) => {
            let key = (
                req["instruction"].as_str().unwrap_or_default().to_string(),
                input.clone(),
            );
            let completion = t.get(&key).cloned().unwrap_or(input);
            (200, json!({ "completion": completion }).to_string())
        }
        Reply::Status(code) => (*code, "{}".to_string()),
        Reply::Malformed => (200, "{\"text\": 3".to_string()),
        Reply::Delay(d) => {
            std::thread::sleep(*d);
            (200, json!({ "completion": input }).to_string())
        }
    };
    let mut s = stream;
    let _ = write!(
        s,
        "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
        payload.len()
    );
}
