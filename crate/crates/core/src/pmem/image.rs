use std::fmt;
use std::sync::Arc;

const CHUNK: usize = 4096;

type Chunk = [u8; CHUNK];

/// Byte image of a device, held as copy-on-write 4 KiB chunks so that
/// clones share every chunk neither side has modified.
#[derive(Clone)]
pub struct DeviceImage {
    chunks: Vec<Arc<Chunk>>,
    len: u64,
}

impl DeviceImage {
    pub fn zeroed(len: u64) -> Self {
        let zero = Arc::new([0u8; CHUNK]);
        DeviceImage {
            chunks: vec![zero; (len as usize).div_ceil(CHUNK)],
            len,
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Self {
        let mut img = Self::zeroed(bytes.len() as u64);
        img.write(0, bytes);
        img
    }

    pub fn len(&self) -> u64 {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    fn pieces(
        offset: u64,
        len: usize,
    ) -> impl Iterator<Item = (usize, std::ops::Range<usize>, std::ops::Range<usize>)> {
        let mut done = 0usize;
        std::iter::from_fn(move || {
            if done == len {
                return None;
            }
            let at = offset as usize + done;
            let in_chunk = at % CHUNK;
            let n = (CHUNK - in_chunk).min(len - done);
            let item = (at / CHUNK, in_chunk..in_chunk + n, done..done + n);
            done += n;
            Some(item)
        })
    }

    /// Copies bytes out; the range must be in bounds.
    pub fn read(&self, offset: u64, buf: &mut [u8]) {
        assert!(offset + buf.len() as u64 <= self.len, "read beyond image");
        for (c, src, dst) in Self::pieces(offset, buf.len()) {
            buf[dst].copy_from_slice(&self.chunks[c][src]);
        }
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) {
        assert!(offset + data.len() as u64 <= self.len, "write beyond image");
        for (c, dst, src) in Self::pieces(offset, data.len()) {
            if self.chunks[c][dst.clone()] != data[src.clone()] {
                Arc::make_mut(&mut self.chunks[c])[dst].copy_from_slice(&data[src]);
            }
        }
    }

    /// Whether the bytes at `offset` equal `data`.
    pub fn matches(&self, offset: u64, data: &[u8]) -> bool {
        Self::pieces(offset, data.len()).all(|(c, img, d)| self.chunks[c][img] == data[d])
    }

    pub fn slice(&self, offset: u64, len: usize) -> Vec<u8> {
        let mut buf = vec![0; len];
        self.read(offset, &mut buf);
        buf
    }

    pub fn to_vec(&self) -> Vec<u8> {
        self.slice(0, self.len as usize)
    }
}

impl PartialEq for DeviceImage {
    fn eq(&self, other: &Self) -> bool {
        self.len == other.len
            && self
                .chunks
                .iter()
                .zip(&other.chunks)
                .all(|(a, b)| Arc::ptr_eq(a, b) || a == b)
    }
}

impl Eq for DeviceImage {}

impl fmt::Debug for DeviceImage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("DeviceImage")
            .field("len", &self.len)
            .finish()
    }
}

impl From<Vec<u8>> for DeviceImage {
    fn from(bytes: Vec<u8>) -> Self {
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clones_share_until_written() {
        let mut a = DeviceImage::zeroed(3 * 4096 + 100);
        a.write(4090, &[1; 12]);
        let mut b = a.clone();
        assert_eq!(a, b);
        b.write(12300, &[9]);
        assert_ne!(a, b);
        assert_eq!(
            a.slice(4088, 16),
            [0, 0, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 1, 0, 0]
        );
        assert!(b.matches(12300, &[9]));
        assert_eq!(b.to_vec().len(), 3 * 4096 + 100);
        assert!(Arc::ptr_eq(&a.chunks[0], &b.chunks[0]));
    }
}
