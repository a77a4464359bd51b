//! Real sockets: one connection per `(peer, channel)` and direction.
//!
//! A connection starts with a hello frame naming the sender and the logical
//! channel. Each connection gets a reader thread that moves whole frames
//! into the node's inbox, so writers never wait on a slow consumer and a
//! frame is only ever surfaced complete. Replies may travel back over the
//! connection a request arrived on, so a node can answer peers whose
//! endpoint it has never been told.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use lowcomm_core::mesh::PeerAddr;
use lowcomm_core::wire::{decode_hello, encode_hello, Channel, Frame, FrameKind, FRAME_HEADER_LEN};

use super::{Result, Task, TaskFn, Traffic, Transport, TransportError, FOREVER};

const CONNECT_TIMEOUT: Duration = Duration::from_secs(5);
const ACCEPT_POLL: Duration = Duration::from_millis(5);

struct Conn {
    id: u64,
    stream: Mutex<TcpStream>,
}

#[derive(Default)]
struct Inbox {
    seq: u64,
    queues: BTreeMap<Channel, VecDeque<(u64, String, Frame)>>,
    /// Open connections per link; a link with none left that has been seen
    /// before reads as down.
    live: HashMap<(String, Channel), usize>,
}

impl Inbox {
    fn take(&mut self, channels: &[Channel], from: Option<&str>) -> Option<(String, Channel, Frame)> {
        let mut best: Option<(u64, Channel, usize)> = None;
        for &c in channels {
            if let Some(q) = self.queues.get(&c) {
                if let Some(i) = q.iter().position(|(_, src, _)| from.is_none_or(|f| f == src)) {
                    let seq = q[i].0;
                    if best.is_none_or(|(s, _, _)| seq < s) {
                        best = Some((seq, c, i));
                    }
                }
            }
        }
        let (_, c, i) = best?;
        let (_, src, frame) = self.queues.get_mut(&c)?.remove(i)?;
        Some((src, c, frame))
    }
}

struct Inner {
    id: String,
    listen: SocketAddr,
    start: Instant,
    closed: AtomicBool,
    next_conn: AtomicU64,
    peers: Mutex<HashMap<String, String>>,
    conns: Mutex<HashMap<(String, Channel), Arc<Conn>>>,
    streams: Mutex<Vec<TcpStream>>,
    inbox: Mutex<Inbox>,
    cv: Condvar,
    bytes_sent: AtomicU64,
    bytes_received: AtomicU64,
    frames_sent: AtomicU64,
    frames_received: AtomicU64,
    tasks: Mutex<HashMap<u64, JoinHandle<()>>>,
    next_task: AtomicU64,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|e| e.into_inner())
}

fn read_frame(s: &mut TcpStream) -> io::Result<Frame> {
    let mut h = [0u8; FRAME_HEADER_LEN];
    s.read_exact(&mut h)?;
    let (len, kind) = Frame::parse_header(h).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
    let mut payload = vec![0u8; len];
    s.read_exact(&mut payload)?;
    Frame::new(kind, payload).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))
}

fn write_frame(s: &mut TcpStream, f: &Frame) -> io::Result<()> {
    let mut buf = Vec::with_capacity(f.wire_len());
    buf.extend_from_slice(&f.header());
    buf.extend_from_slice(&f.payload);
    s.write_all(&buf)
}

impl Inner {
    fn attach(self: &Arc<Self>, peer: String, channel: Channel, stream: TcpStream) -> io::Result<Arc<Conn>> {
        let reader = stream.try_clone()?;
        lock(&self.streams).push(stream.try_clone()?);
        let conn = Arc::new(Conn { id: self.next_conn.fetch_add(1, Ordering::Relaxed), stream: Mutex::new(stream) });
        let used = lock(&self.conns).entry((peer.clone(), channel)).or_insert_with(|| conn.clone()).clone();
        *lock(&self.inbox).live.entry((peer.clone(), channel)).or_default() += 1;
        let me = Arc::clone(self);
        let id = conn.id;
        std::thread::Builder::new().name(format!("{}<-{peer}", self.id)).spawn(move || me.read_loop(reader, peer, channel, id))?;
        Ok(used)
    }

    fn read_loop(self: Arc<Self>, mut s: TcpStream, peer: String, channel: Channel, conn: u64) {
        while let Ok(f) = read_frame(&mut s) {
            self.bytes_received.fetch_add(f.wire_len() as u64, Ordering::Relaxed);
            self.frames_received.fetch_add(1, Ordering::Relaxed);
            let mut ib = lock(&self.inbox);
            ib.seq += 1;
            let seq = ib.seq;
            ib.queues.entry(channel).or_default().push_back((seq, peer.clone(), f));
            drop(ib);
            self.cv.notify_all();
        }
        let _ = s.shutdown(Shutdown::Both);
        {
            let mut conns = lock(&self.conns);
            if conns.get(&(peer.clone(), channel)).is_some_and(|c| c.id == conn) {
                conns.remove(&(peer.clone(), channel));
            }
        }
        if let Some(n) = lock(&self.inbox).live.get_mut(&(peer, channel)) {
            *n = n.saturating_sub(1);
        }
        self.cv.notify_all();
    }

    fn accept_loop(self: Arc<Self>, listener: TcpListener) {
        while !self.closed.load(Ordering::Relaxed) {
            match listener.accept() {
                Ok((s, _)) => {
                    let me = Arc::clone(&self);
                    std::thread::spawn(move || {
                        if let Err(e) = me.handshake(s) {
                            log::debug!("{}: rejected connection: {e}", me.id);
                        }
                    });
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => std::thread::sleep(ACCEPT_POLL),
                Err(e) => {
                    log::warn!("{}: accept failed: {e}", self.id);
                    std::thread::sleep(ACCEPT_POLL);
                }
            }
        }
    }

    fn handshake(self: &Arc<Self>, mut s: TcpStream) -> io::Result<()> {
        s.set_nonblocking(false)?;
        s.set_nodelay(true)?;
        s.set_read_timeout(Some(CONNECT_TIMEOUT))?;
        let hello = read_frame(&mut s)?;
        if hello.kind != FrameKind::Hello {
            return Err(io::Error::new(io::ErrorKind::InvalidData, "expected hello"));
        }
        let (peer, channel) = decode_hello(&hello.payload).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        s.set_read_timeout(None)?;
        self.attach(peer, channel, s).map(|_| ())
    }

    fn connection(self: &Arc<Self>, to: &str, channel: Channel) -> Result<Arc<Conn>> {
        if let Some(c) = lock(&self.conns).get(&(to.to_string(), channel)) {
            return Ok(c.clone());
        }
        let down = || TransportError::LinkDown(to.to_string());
        let endpoint = if to == self.id { self.listen.to_string() } else { lock(&self.peers).get(to).cloned().ok_or_else(down)? };
        let addr = endpoint.to_socket_addrs().ok().and_then(|mut a| a.next()).ok_or_else(down)?;
        let mut s = TcpStream::connect_timeout(&addr, CONNECT_TIMEOUT).map_err(|_| down())?;
        s.set_nodelay(true).map_err(|_| down())?;
        let hello = Frame::new(FrameKind::Hello, encode_hello(&self.id, channel)).expect("hello fits a frame");
        write_frame(&mut s, &hello).map_err(|_| down())?;
        self.attach(to.to_string(), channel, s).map_err(|_| down())
    }
}

/// A node's TCP endpoint. Cloning shares the node.
#[derive(Clone)]
pub struct TcpNet {
    inner: Arc<Inner>,
}

impl TcpNet {
    /// Listens on `addr` (port 0 picks a free one) as node `id`.
    pub fn bind(id: &str, addr: &str) -> io::Result<TcpNet> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let inner = Arc::new(Inner {
            id: id.to_string(),
            listen: listener.local_addr()?,
            start: Instant::now(),
            closed: AtomicBool::new(false),
            next_conn: AtomicU64::new(0),
            peers: Mutex::new(HashMap::new()),
            conns: Mutex::new(HashMap::new()),
            streams: Mutex::new(Vec::new()),
            inbox: Mutex::new(Inbox::default()),
            cv: Condvar::new(),
            bytes_sent: AtomicU64::new(0),
            bytes_received: AtomicU64::new(0),
            frames_sent: AtomicU64::new(0),
            frames_received: AtomicU64::new(0),
            tasks: Mutex::new(HashMap::new()),
            next_task: AtomicU64::new(0),
        });
        let me = Arc::clone(&inner);
        std::thread::Builder::new().name(format!("{id}-accept")).spawn(move || me.accept_loop(listener))?;
        Ok(TcpNet { inner })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.inner.listen
    }

    /// Closes every connection and stops accepting; pending and future
    /// calls fail with [`TransportError::Crashed`].
    pub fn shutdown(&self) {
        self.inner.closed.store(true, Ordering::Relaxed);
        for s in lock(&self.inner.streams).drain(..) {
            let _ = s.shutdown(Shutdown::Both);
        }
        lock(&self.inner.conns).clear();
        self.inner.cv.notify_all();
    }

    fn alive(&self) -> Result<()> {
        if self.inner.closed.load(Ordering::Relaxed) {
            return Err(TransportError::Crashed);
        }
        Ok(())
    }

    fn wait_for<T>(&self, timeout: Duration, mut f: impl FnMut(&mut Inbox) -> Option<Result<T>>) -> Result<T> {
        let until = if timeout == FOREVER { None } else { Instant::now().checked_add(timeout) };
        let mut ib = lock(&self.inner.inbox);
        loop {
            self.alive()?;
            if let Some(r) = f(&mut ib) {
                return r;
            }
            ib = match until {
                None => self.inner.cv.wait(ib).unwrap_or_else(|e| e.into_inner()),
                Some(u) => {
                    let now = Instant::now();
                    if now >= u {
                        return Err(TransportError::Timeout);
                    }
                    self.inner.cv.wait_timeout(ib, u - now).unwrap_or_else(|e| e.into_inner()).0
                }
            };
        }
    }
}

impl Transport for TcpNet {
    fn local_id(&self) -> &str {
        &self.inner.id
    }

    fn send(&self, to: &str, channel: Channel, frame: Frame) -> Result<()> {
        self.alive()?;
        let conn = self.inner.connection(to, channel)?;
        let r = write_frame(&mut lock(&conn.stream), &frame);
        if r.is_err() {
            let mut conns = lock(&self.inner.conns);
            if conns.get(&(to.to_string(), channel)).is_some_and(|c| c.id == conn.id) {
                conns.remove(&(to.to_string(), channel));
            }
            let _ = lock(&conn.stream).shutdown(Shutdown::Both);
            return Err(TransportError::LinkDown(to.to_string()));
        }
        self.inner.bytes_sent.fetch_add(frame.wire_len() as u64, Ordering::Relaxed);
        self.inner.frames_sent.fetch_add(1, Ordering::Relaxed);
        Ok(())
    }

    fn recv(&self, from: &str, channel: Channel, timeout: Duration) -> Result<Frame> {
        let key = (from.to_string(), channel);
        self.wait_for(timeout, |ib| {
            if let Some((_, _, f)) = ib.take(&[channel], Some(from)) {
                return Some(Ok(f));
            }
            (ib.live.get(&key) == Some(&0)).then(|| Err(TransportError::LinkDown(from.to_string())))
        })
    }

    fn recv_any(&self, channels: &[Channel], timeout: Duration) -> Result<(String, Channel, Frame)> {
        self.wait_for(timeout, |ib| ib.take(channels, None).map(Ok))
    }

    fn flush(&self, to: &str, channel: Channel) -> Result<()> {
        self.alive()?;
        if let Some(c) = lock(&self.inner.conns).get(&(to.to_string(), channel)).cloned() {
            lock(&c.stream).flush().map_err(|_| TransportError::LinkDown(to.to_string()))?;
        }
        Ok(())
    }

    fn register_peer(&self, addr: &PeerAddr) {
        if addr.id != self.inner.id && !addr.endpoint.is_empty() && !addr.endpoint.starts_with("sim:") {
            lock(&self.inner.peers).insert(addr.id.clone(), addr.endpoint.clone());
        }
    }

    fn endpoint(&self) -> String {
        self.inner.listen.to_string()
    }

    fn now(&self) -> Duration {
        self.inner.start.elapsed()
    }

    fn sleep(&self, d: Duration) -> Result<()> {
        self.alive()?;
        std::thread::sleep(d);
        self.alive()
    }

    fn charge(&self, _d: Duration) -> Result<()> {
        self.alive()
    }

    fn spawn(&self, name: &str, f: TaskFn) -> Task {
        let id = self.inner.next_task.fetch_add(1, Ordering::Relaxed);
        let net = self.clone();
        let handle = std::thread::Builder::new()
            .name(format!("{}/{name}", self.inner.id))
            .spawn(move || f(Box::new(net)))
            .expect("spawn task thread");
        lock(&self.inner.tasks).insert(id, handle);
        Task(id)
    }

    fn join(&self, task: Task) -> Result<()> {
        let h = lock(&self.inner.tasks).remove(&task.0);
        if let Some(h) = h {
            let _ = h.join();
        }
        Ok(())
    }

    fn traffic(&self) -> Traffic {
        let i = &self.inner;
        Traffic {
            bytes_sent: i.bytes_sent.load(Ordering::Relaxed),
            bytes_received: i.bytes_received.load(Ordering::Relaxed),
            frames_sent: i.frames_sent.load(Ordering::Relaxed),
            frames_received: i.frames_received.load(Ordering::Relaxed),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pair() -> (TcpNet, TcpNet) {
        let a = TcpNet::bind("a", "127.0.0.1:0").unwrap();
        let b = TcpNet::bind("b", "127.0.0.1:0").unwrap();
        a.register_peer(&PeerAddr::new("b", b.endpoint()));
        (a, b)
    }

    fn frame(kind: FrameKind, n: usize, fill: u8) -> Frame {
        Frame::new(kind, vec![fill; n]).unwrap()
    }

    #[test]
    fn frames_arrive_whole_and_in_order() {
        let (a, b) = pair();
        for i in 0..50u8 {
            a.send("b", Channel::Ring, frame(FrameKind::AllreduceChunk, 1 + i as usize * 1000, i)).unwrap();
        }
        for i in 0..50u8 {
            let f = b.recv("a", Channel::Ring, Duration::from_secs(5)).unwrap();
            assert_eq!(f, frame(FrameKind::AllreduceChunk, 1 + i as usize * 1000, i));
        }
        assert_eq!(a.traffic().frames_sent, 50);
        assert_eq!(b.traffic().bytes_received, a.traffic().bytes_sent);
    }

    #[test]
    fn reply_over_incoming_connection() {
        let (a, b) = pair();
        a.send("b", Channel::Control, frame(FrameKind::KvOp, 3, 1)).unwrap();
        let (from, ch, _) = b.recv_any(&[Channel::Control, Channel::Heartbeat], Duration::from_secs(5)).unwrap();
        assert_eq!((from.as_str(), ch), ("a", Channel::Control));
        // b was never told a's endpoint.
        b.send("a", Channel::Control, frame(FrameKind::KvOp, 2, 9)).unwrap();
        assert_eq!(a.recv("b", Channel::Control, Duration::from_secs(5)).unwrap().payload, vec![9, 9]);
    }

    #[test]
    fn timeout_and_link_down_are_distinct() {
        let (a, b) = pair();
        a.send("b", Channel::Ring, frame(FrameKind::Probe, 1, 0)).unwrap();
        b.recv("a", Channel::Ring, Duration::from_secs(5)).unwrap();
        assert_eq!(b.recv("a", Channel::Ring, Duration::from_millis(50)), Err(TransportError::Timeout));
        a.shutdown();
        assert_eq!(b.recv("a", Channel::Ring, Duration::from_secs(5)), Err(TransportError::LinkDown("a".into())));
        assert_eq!(a.send("b", Channel::Ring, frame(FrameKind::Probe, 1, 0)), Err(TransportError::Crashed));
        let c = TcpNet::bind("c", "127.0.0.1:0").unwrap();
        assert_eq!(c.send("nobody", Channel::Ring, frame(FrameKind::Probe, 1, 0)), Err(TransportError::LinkDown("nobody".into())));
    }
}
