//! HTTP behaviour of the bundle server.

use std::io::{Read, Write};
use std::net::TcpStream;
use std::path::Path;

use tokio::net::TcpListener;

fn get(addr: std::net::SocketAddr, path: &str, extra: &str) -> (String, Vec<u8>) {
    let mut s = TcpStream::connect(addr).unwrap();
    write!(s, "GET {path} HTTP/1.1\r\nHost: localhost\r\nConnection: close\r\n{extra}\r\n").unwrap();
    let mut buf = Vec::new();
    s.read_to_end(&mut buf).unwrap();
    let split = buf.windows(4).position(|w| w == b"\r\n\r\n").expect("header end");
    (String::from_utf8_lossy(&buf[..split]).to_lowercase(), buf[split + 4..].to_vec())
}

fn header<'a>(head: &'a str, name: &str) -> Option<&'a str> {
    head.lines().find_map(|l| l.strip_prefix(&format!("{name}: ")))
}

fn with_server(dir: &Path, test: impl FnOnce(std::net::SocketAddr)) {
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(TcpListener::bind("127.0.0.1:0")).unwrap();
    let addr = listener.local_addr().unwrap();
    rt.spawn(oblique::serve::serve_on(listener, dir.to_path_buf()));
    test(addr);
}

#[test]
fn serves_manifest_ranges_and_cors() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = br#"{"version": 1, "note": "0123456789"}"#;
    std::fs::write(dir.path().join("manifest.json"), manifest).unwrap();
    with_server(dir.path(), |addr| {
        let (head, body) = get(addr, "/manifest.json", "");
        assert!(head.starts_with("http/1.1 200"), "{head}");
        assert_eq!(header(&head, "content-length"), Some(manifest.len().to_string().as_str()));
        assert_eq!(body, manifest);

        let (head, body) = get(addr, "/manifest.json", "Range: bytes=2-8\r\n");
        assert!(head.starts_with("http/1.1 206"), "{head}");
        assert_eq!(body, &manifest[2..=8]);

        let (head, _) = get(addr, "/manifest.json", "Origin: http://viewer.local\r\n");
        assert_eq!(header(&head, "access-control-allow-origin"), Some("*"));

        let (head, _) = get(addr, "/missing.png", "");
        assert!(head.starts_with("http/1.1 404"), "{head}");
    });
}

#[test]
fn refuses_a_directory_without_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let rt = tokio::runtime::Runtime::new().unwrap();
    let listener = rt.block_on(TcpListener::bind("127.0.0.1:0")).unwrap();
    let r = rt.block_on(oblique::serve::serve_on(listener, dir.path().to_path_buf()));
    assert!(matches!(r, Err(oblique::Error::MissingFile(_))));
}
