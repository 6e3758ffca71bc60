use std::io::{ErrorKind, Read};

use super::{decode_header, decode_message, Decoded, ProtocolError, HEADER_SIZE, MAX_BODY_SIZE};

/// Incremental re-assembly of messages from arbitrarily fragmented bytes.
///
/// After any decode error the decoder is poisoned: there is no attempt to
/// resynchronize, the connection should be dropped.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
    start: usize,
    poisoned: bool,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, data: &[u8]) {
        if self.start > 0 && self.start == self.buf.len() {
            self.buf.clear();
            self.start = 0;
        }
        self.buf.extend_from_slice(data);
    }

    /// Bytes held that do not yet form a complete message.
    pub fn buffered(&self) -> usize {
        self.buf.len() - self.start
    }

    pub fn is_poisoned(&self) -> bool {
        self.poisoned
    }

    /// Returns the next complete message, `Ok(None)` if more bytes are needed.
    pub fn next_message(&mut self) -> Result<Option<Decoded>, ProtocolError> {
        if self.poisoned {
            return Err(ProtocolError::MalformedBody {
                type_name: "stream",
                reason: "decoder failed earlier".into(),
            });
        }
        let pending = &self.buf[self.start..];
        if pending.len() < HEADER_SIZE {
            return Ok(None);
        }
        let result = decode_header(pending).and_then(|header| {
            if header.body_size > MAX_BODY_SIZE {
                return Err(ProtocolError::BodySizeMismatch {
                    declared: header.body_size,
                    actual: (pending.len() - HEADER_SIZE) as u64,
                });
            }
            let total = HEADER_SIZE + header.body_size as usize;
            if pending.len() < total {
                return Ok(None);
            }
            decode_message(&pending[..total]).map(|m| Some((m, total)))
        });
        match result {
            Ok(Some((msg, used))) => {
                self.start += used;
                if self.start > 64 * 1024 && self.start * 2 > self.buf.len() {
                    self.buf.drain(..self.start);
                    self.start = 0;
                }
                Ok(Some(msg))
            }
            Ok(None) => Ok(None),
            Err(e) => {
                self.poisoned = true;
                Err(e)
            }
        }
    }

    /// Steps over a complete message whose header is valid but whose body
    /// failed to decode (bad CRC, unknown type, malformed body) and clears the
    /// poisoned state. Returns false when the header itself is unusable, in
    /// which case the stream cannot be resynchronized.
    pub fn skip_frame(&mut self) -> bool {
        let pending = &self.buf[self.start..];
        let Ok(header) = decode_header(pending) else {
            return false;
        };
        if header.body_size > MAX_BODY_SIZE {
            return false;
        }
        let total = HEADER_SIZE + header.body_size as usize;
        if pending.len() < total {
            return false;
        }
        self.start += total;
        self.poisoned = false;
        true
    }

    /// Call at end of input: errors if a partial message is still buffered.
    pub fn finish(&self) -> Result<(), ProtocolError> {
        match self.buffered() {
            0 => Ok(()),
            buffered => Err(ProtocolError::UnexpectedEof { buffered }),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum StreamError {
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("read failed: {0}")]
    Io(#[from] std::io::Error),
}

/// Blocking iterator of messages over any byte source.
pub struct MessageReader<R> {
    src: R,
    decoder: FrameDecoder,
    chunk: Vec<u8>,
    done: bool,
}

pub fn frame_stream<R: Read>(src: R) -> MessageReader<R> {
    MessageReader {
        src,
        decoder: FrameDecoder::new(),
        chunk: vec![0; 16 * 1024],
        done: false,
    }
}

impl<R: Read> Iterator for MessageReader<R> {
    type Item = Result<Decoded, StreamError>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        loop {
            match self.decoder.next_message() {
                Ok(Some(msg)) => return Some(Ok(msg)),
                Ok(None) => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
            match self.src.read(&mut self.chunk) {
                Ok(0) => {
                    self.done = true;
                    return self.decoder.finish().err().map(|e| Err(e.into()));
                }
                Ok(n) => self.decoder.push(&self.chunk[..n]),
                Err(e) if e.kind() == ErrorKind::Interrupted => {}
                Err(e) => {
                    self.done = true;
                    return Some(Err(e.into()));
                }
            }
        }
    }
}
