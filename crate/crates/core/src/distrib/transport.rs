use std::io::{BufReader, BufWriter, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;

use super::wire::{read_frame, write_frame, Control, Frame};

/// A frame as seen by the receiving locality, or a local stop request.
#[derive(Debug)]
pub enum Incoming {
    Frame { source: u32, frame: Frame },
    Stop,
}

#[derive(Debug, thiserror::Error)]
pub enum TransportError {
    #[error("unknown target locality {0}")]
    UnknownTarget(u32),
    #[error("link to locality {target} is closed")]
    Closed { target: u32 },
    #[error("connecting to locality {target} at {addr}: {source}")]
    Connect { target: u32, addr: SocketAddr, source: std::io::Error },
    #[error("sending to locality {target} failed after {attempts} attempts: {source}")]
    Send { target: u32, attempts: u32, source: std::io::Error },
    #[error("handshake: {0}")]
    Handshake(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Reliable, per-(source, target) FIFO frame delivery. Safe to call from any
/// thread.
pub trait Transport: Send + Sync {
    fn rank(&self) -> u32;
    fn world_size(&self) -> u32;
    /// Sends a frame and returns the number of bytes put on the wire.
    fn send(&self, target: u32, frame: Frame) -> Result<usize, TransportError>;
}

/// Everything a locality needs from its transport.
pub struct Endpoint {
    pub transport: Arc<dyn Transport>,
    pub inbox: Receiver<Incoming>,
    /// Feeds the same inbox; used to stop the receive loop.
    pub inbox_tx: Sender<Incoming>,
}

pub struct InProcTransport {
    rank: u32,
    peers: Vec<Sender<Incoming>>,
}

impl Transport for InProcTransport {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn world_size(&self) -> u32 {
        self.peers.len() as u32
    }

    fn send(&self, target: u32, frame: Frame) -> Result<usize, TransportError> {
        let tx = self.peers.get(target as usize).ok_or(TransportError::UnknownTarget(target))?;
        let n = match &frame {
            Frame::Parcel(p) => p.payload.len(),
            Frame::Snapshot { bytes, .. } => bytes.len(),
            Frame::Control(_) => 0,
        };
        tx.send(Incoming::Frame { source: self.rank, frame }).map_err(|_| TransportError::Closed { target })?;
        Ok(n)
    }
}

/// Channel-connected endpoints for `world_size` localities in one process.
pub fn inproc_endpoints(world_size: u32) -> Vec<Endpoint> {
    let (txs, rxs): (Vec<_>, Vec<_>) = (0..world_size).map(|_| channel()).unzip();
    rxs.into_iter()
        .enumerate()
        .map(|(r, inbox)| Endpoint {
            transport: Arc::new(InProcTransport { rank: r as u32, peers: txs.clone() }),
            inbox,
            inbox_tx: txs[r].clone(),
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TcpOptions {
    /// Connection/send attempts before giving up.
    pub retries: u32,
    pub retry_delay: Duration,
}

impl Default for TcpOptions {
    fn default() -> Self {
        TcpOptions { retries: 50, retry_delay: Duration::from_millis(100) }
    }
}

struct Link {
    addr: SocketAddr,
    stream: Option<BufWriter<TcpStream>>,
}

/// One outgoing TCP connection per peer (including self) carries every frame
/// this rank sends to it, so ordering per pair is the stream order.
pub struct TcpTransport {
    rank: u32,
    links: Vec<Mutex<Link>>,
    incoming: Arc<Mutex<Vec<TcpStream>>>,
    accept_thread: Option<JoinHandle<()>>,
    options: TcpOptions,
}

fn connect(
    rank: u32,
    target: u32,
    addr: SocketAddr,
    opts: &TcpOptions,
) -> Result<BufWriter<TcpStream>, TransportError> {
    let mut last = None;
    for _ in 0..opts.retries.max(1) {
        match TcpStream::connect(addr) {
            Ok(s) => {
                s.set_nodelay(true)?;
                let mut w = BufWriter::new(s);
                write_frame(&mut w, &Frame::Control(Control::Hello { rank }))?;
                w.flush()?;
                return Ok(w);
            }
            Err(e) => {
                last = Some(e);
                std::thread::sleep(opts.retry_delay);
            }
        }
    }
    Err(TransportError::Connect { target, addr, source: last.unwrap() })
}

fn reader_loop(stream: TcpStream, inbox: Sender<Incoming>) {
    let mut r = BufReader::new(stream);
    let source = match read_frame(&mut r) {
        Ok(Some(Frame::Control(Control::Hello { rank }))) => rank,
        _ => return,
    };
    while let Ok(Some(frame)) = read_frame(&mut r) {
        if inbox.send(Incoming::Frame { source, frame }).is_err() {
            return;
        }
    }
}

impl TcpTransport {
    /// Starts accepting on `listener` and connects to every peer address
    /// (`peers[rank]` is this rank's own address).
    pub fn start(
        rank: u32,
        listener: TcpListener,
        peers: Vec<SocketAddr>,
        options: TcpOptions,
    ) -> Result<Endpoint, TransportError> {
        if rank as usize >= peers.len() {
            return Err(TransportError::Handshake(format!("rank {rank} outside peer list of {}", peers.len())));
        }
        let (tx, inbox) = channel();
        let incoming = Arc::new(Mutex::new(Vec::new()));
        let expected = peers.len();
        let accept_tx = tx.clone();
        let accepted = incoming.clone();
        let accept_thread = std::thread::Builder::new().name(format!("amt-accept-{rank}")).spawn(move || {
            for _ in 0..expected {
                let Ok((stream, _)) = listener.accept() else { return };
                let _ = stream.set_nodelay(true);
                if let Ok(clone) = stream.try_clone() {
                    accepted.lock().push(clone);
                }
                let tx = accept_tx.clone();
                let _ =
                    std::thread::Builder::new().name(format!("amt-recv-{rank}")).spawn(move || reader_loop(stream, tx));
            }
        })?;
        let mut links = Vec::with_capacity(peers.len());
        for (t, addr) in peers.iter().enumerate() {
            let stream = connect(rank, t as u32, *addr, &options)?;
            links.push(Mutex::new(Link { addr: *addr, stream: Some(stream) }));
        }
        let transport = TcpTransport { rank, links, incoming, accept_thread: Some(accept_thread), options };
        Ok(Endpoint { transport: Arc::new(transport), inbox, inbox_tx: tx })
    }
}

impl Transport for TcpTransport {
    fn rank(&self) -> u32 {
        self.rank
    }

    fn world_size(&self) -> u32 {
        self.links.len() as u32
    }

    fn send(&self, target: u32, frame: Frame) -> Result<usize, TransportError> {
        let link = self.links.get(target as usize).ok_or(TransportError::UnknownTarget(target))?;
        let mut link = link.lock();
        let mut attempts = 0;
        loop {
            attempts += 1;
            if link.stream.is_none() {
                let addr = link.addr;
                link.stream = Some(connect(self.rank, target, addr, &self.options)?);
            }
            let w = link.stream.as_mut().unwrap();
            match write_frame(w, &frame).and_then(|n| w.flush().map(|_| n)) {
                Ok(n) => return Ok(n),
                Err(e) => {
                    link.stream = None;
                    if attempts >= self.options.retries.max(1) {
                        return Err(TransportError::Send { target, attempts, source: e });
                    }
                    std::thread::sleep(self.options.retry_delay);
                }
            }
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for l in &self.links {
            if let Some(w) = l.lock().stream.take() {
                if let Ok(s) = w.into_inner() {
                    let _ = s.shutdown(Shutdown::Both);
                }
            }
        }
        for s in self.incoming.lock().drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        if let Some(t) = self.accept_thread.take() {
            if t.is_finished() {
                let _ = t.join();
            }
        }
    }
}

/// Binds `world_size` listeners on 127.0.0.1 and connects them all, for
/// running a TCP world inside one process.
pub fn tcp_loopback_endpoints(world_size: u32, options: TcpOptions) -> Result<Vec<Endpoint>, TransportError> {
    let listeners: Vec<TcpListener> =
        (0..world_size).map(|_| TcpListener::bind("127.0.0.1:0")).collect::<Result<_, _>>()?;
    let addrs: Vec<SocketAddr> = listeners.iter().map(|l| l.local_addr()).collect::<Result<_, _>>()?;
    let handles: Vec<JoinHandle<Result<Endpoint, TransportError>>> = listeners
        .into_iter()
        .enumerate()
        .map(|(r, l)| {
            let addrs = addrs.clone();
            let opts = options.clone();
            std::thread::spawn(move || TcpTransport::start(r as u32, l, addrs, opts))
        })
        .collect();
    handles.into_iter().map(|h| h.join().expect("tcp setup thread panicked")).collect()
}
