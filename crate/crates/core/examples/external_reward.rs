// Score reports with an external embedding service. A throwaway local
// server stands in for the real one: it embeds texts as letter counts.

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use longrep::metrics::{cosine_reward, HttpEncoder, ReportEncoder};

fn letter_counts(text: &str) -> Vec<f64> {
    let mut v = vec![0.0; 26];
    for b in text.bytes().filter(u8::is_ascii_alphabetic) {
        v[(b.to_ascii_lowercase() - b'a') as usize] += 1.0;
    }
    v
}

fn serve(listener: TcpListener, requests: usize) -> std::io::Result<()> {
    for stream in listener.incoming().take(requests) {
        let mut stream = stream?;
        let mut reader = BufReader::new(stream.try_clone()?);
        let mut len = 0;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line)?;
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                len = v.trim().parse().unwrap_or(0);
            }
            if line == "\r\n" || line.is_empty() {
                break;
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body)?;
        let req: serde_json::Value = serde_json::from_slice(&body)?;
        let texts = req["texts"].as_array().cloned().unwrap_or_default();
        let embeddings: Vec<Vec<f64>> = texts.iter().map(|t| letter_counts(t.as_str().unwrap_or(""))).collect();
        let out = serde_json::json!({ "embeddings": embeddings }).to_string();
        write!(stream, "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{out}", out.len())?;
    }
    Ok(())
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let url = format!("http://{}", listener.local_addr()?);
    let server = std::thread::spawn(move || serve(listener, 3));

    let enc = HttpEncoder::new(&url, Duration::from_secs(5));
    println!("posting to {}", enc.endpoint());
    let reference = "The heart is enlarged. Cardiomegaly.";
    for candidate in ["The heart is enlarged. Cardiomegaly.", "Heart size is normal. No acute process.", "zzz"] {
        let r = cosine_reward(candidate, reference, &enc)?;
        println!("{:.4}  {candidate}", r.value);
    }
    server.join().expect("server thread")?;

    // A dead endpoint surfaces as an error rather than a zero reward.
    let dead = HttpEncoder::new(&url, Duration::from_millis(200));
    assert!(dead.embed(&["x"]).is_err());
    Ok(())
}
