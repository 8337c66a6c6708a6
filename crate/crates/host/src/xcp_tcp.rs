//! The USB-like XCP transport: frames over TCP, served by the session actor.

use std::io::{Read, Write};
use std::net::TcpStream;

use mcds_core::xcp::{Channel, TransportError, XcpFrame, HEADER_LEN};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::TcpListener;

use crate::api::SessionHandle;

/// Accepts connections and answers each request frame in order.
pub async fn serve(listener: TcpListener, handle: SessionHandle) {
    loop {
        let Ok((sock, peer)) = listener.accept().await else { continue };
        log::info!("xcp client {peer} connected");
        let h = handle.clone();
        tokio::spawn(async move {
            if let Err(e) = connection(sock, h).await {
                log::info!("xcp client {peer}: {e}");
            }
        });
    }
}

async fn connection(mut sock: tokio::net::TcpStream, h: SessionHandle) -> std::io::Result<()> {
    loop {
        let mut head = [0u8; HEADER_LEN];
        sock.read_exact(&mut head).await?;
        let len = u16::from_le_bytes([head[0], head[1]]) as usize;
        let mut buf = head.to_vec();
        buf.resize(HEADER_LEN + len, 0);
        sock.read_exact(&mut buf[HEADER_LEN..]).await?;
        let resp = match XcpFrame::decode(&buf) {
            Ok((req, _)) => h.xcp(req).await,
            Err(e) => return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, e)),
        };
        let out = resp.encode().map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))?;
        sock.write_all(&out).await?;
    }
}

/// Blocking client side of the TCP transport.
pub struct TcpChannel {
    stream: TcpStream,
}

impl TcpChannel {
    pub fn connect(addr: impl std::net::ToSocketAddrs) -> std::io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpChannel { stream })
    }
}

fn io(e: std::io::Error) -> TransportError {
    match e.kind() {
        std::io::ErrorKind::UnexpectedEof | std::io::ErrorKind::ConnectionReset | std::io::ErrorKind::BrokenPipe => TransportError::Closed,
        _ => TransportError::Io(e.to_string()),
    }
}

impl Channel for TcpChannel {
    fn exchange(&mut self, request: &[u8]) -> Result<Vec<u8>, TransportError> {
        self.stream.write_all(request).map_err(io)?;
        let mut head = [0u8; HEADER_LEN];
        self.stream.read_exact(&mut head).map_err(io)?;
        let len = u16::from_le_bytes([head[0], head[1]]) as usize;
        let mut buf = head.to_vec();
        buf.resize(HEADER_LEN + len, 0);
        self.stream.read_exact(&mut buf[HEADER_LEN..]).map_err(io)?;
        Ok(buf)
    }
}
