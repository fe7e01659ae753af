//! Binary emissions container.
//!
//! ```text
//! magic    8 bytes  "ICRFEMIT"
//! version  u32      1
//! m        u32      label count
//! l        u32      chain length
//! count    u64      number of examples
//! then `count` records:
//!   id_len u32, id UTF-8 bytes, l*m f32 logits (row-major, slot-major)
//! ```
//!
//! All integers and floats are little-endian. Logits are widened to f64 on
//! load.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::emission::EmissionMatrix;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"ICRFEMIT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmissionsHeader {
    pub labels: u32,
    pub length: u32,
    pub count: u64,
}

pub struct EmissionWriter<W: Write> {
    inner: W,
    header: EmissionsHeader,
    written: u64,
}

impl<W: Write> EmissionWriter<W> {
    pub fn new(mut inner: W, header: EmissionsHeader) -> Result<Self> {
        inner.write_all(MAGIC)?;
        inner.write_all(&VERSION.to_le_bytes())?;
        inner.write_all(&header.labels.to_le_bytes())?;
        inner.write_all(&header.length.to_le_bytes())?;
        inner.write_all(&header.count.to_le_bytes())?;
        Ok(EmissionWriter {
            inner,
            header,
            written: 0,
        })
    }

    pub fn write(&mut self, id: &str, z: &EmissionMatrix) -> Result<()> {
        if z.rows() != self.header.length as usize || z.cols() != self.header.labels as usize {
            return Err(Error::Shape(format!(
                "example {id:?} is {}x{}, header declares {}x{}",
                z.rows(),
                z.cols(),
                self.header.length,
                self.header.labels
            )));
        }
        if self.written == self.header.count {
            return Err(Error::Shape(format!(
                "header declares {} examples; refusing to write more",
                self.header.count
            )));
        }
        let id_len = u32::try_from(id.len())
            .map_err(|_| Error::Format(format!("example id of {} bytes is too long", id.len())))?;
        self.inner.write_all(&id_len.to_le_bytes())?;
        self.inner.write_all(id.as_bytes())?;
        for &v in z.as_slice() {
            self.inner.write_all(&(v as f32).to_le_bytes())?;
        }
        self.written += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<W> {
        if self.written != self.header.count {
            return Err(Error::Shape(format!(
                "header declares {} examples but {} were written",
                self.header.count, self.written
            )));
        }
        self.inner.flush()?;
        Ok(self.inner)
    }
}

/// Write every example to `path`. Shapes are taken from the first matrix.
pub fn store_emissions<P: AsRef<Path>>(
    path: P,
    labels: usize,
    length: usize,
    examples: &[(String, EmissionMatrix)],
) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let header = header_for(labels, length, examples.len())?;
    let mut w = EmissionWriter::new(file, header)?;
    for (id, z) in examples {
        w.write(id, z)?;
    }
    w.finish()?;
    Ok(())
}

fn header_for(labels: usize, length: usize, count: usize) -> Result<EmissionsHeader> {
    let narrow = |v: usize, what: &str| {
        u32::try_from(v).map_err(|_| Error::Format(format!("{what} {v} exceeds u32")))
    };
    Ok(EmissionsHeader {
        labels: narrow(labels, "label count")?,
        length: narrow(length, "chain length")?,
        count: count as u64,
    })
}

/// Streaming reader yielding `(id, matrix)` pairs in file order.
pub struct EmissionReader<R: Read> {
    inner: R,
    header: EmissionsHeader,
    read: u64,
    done: bool,
}

impl EmissionReader<BufReader<File>> {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        Self::new(BufReader::new(File::open(path)?))
    }
}

impl<R: Read> EmissionReader<R> {
    pub fn new(mut inner: R) -> Result<Self> {
        let mut fixed = [0u8; 28];
        let got = read_full(&mut inner, &mut fixed)?;
        if got < 8 || &fixed[..8] != MAGIC {
            return Err(Error::Format("bad magic, not an emissions file".into()));
        }
        if got < fixed.len() {
            return Err(Error::Truncation(format!(
                "header is {got} bytes, expected {}",
                fixed.len()
            )));
        }
        let version = u32::from_le_bytes(fixed[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported emissions version {version}"
            )));
        }
        let header = EmissionsHeader {
            labels: u32::from_le_bytes(fixed[12..16].try_into().unwrap()),
            length: u32::from_le_bytes(fixed[16..20].try_into().unwrap()),
            count: u64::from_le_bytes(fixed[20..28].try_into().unwrap()),
        };
        Ok(EmissionReader {
            inner,
            header,
            read: 0,
            done: false,
        })
    }

    pub fn header(&self) -> EmissionsHeader {
        self.header
    }

    fn next_record(&mut self) -> Result<Option<(String, EmissionMatrix)>> {
        if self.read == self.header.count {
            let mut probe = [0u8; 1];
            if read_full(&mut self.inner, &mut probe)? != 0 {
                return Err(Error::Format(format!(
                    "trailing bytes after {} declared examples",
                    self.header.count
                )));
            }
            return Ok(None);
        }
        let index = self.read;

        let mut len = [0u8; 4];
        let got = read_full(&mut self.inner, &mut len)?;
        if got < len.len() {
            return Err(Error::Truncation(format!(
                "file ends before example {index} of {}",
                self.header.count
            )));
        }
        let id_len = u32::from_le_bytes(len) as usize;
        let mut id = vec![0u8; id_len];
        if read_full(&mut self.inner, &mut id)? < id_len {
            return Err(Error::Truncation(format!("id of example {index} is cut short")));
        }
        let id = String::from_utf8(id)
            .map_err(|_| Error::Format(format!("id of example {index} is not UTF-8")))?;

        let (rows, cols) = (self.header.length as usize, self.header.labels as usize);
        let row_bytes = cols * 4;
        let mut payload = vec![0u8; rows * row_bytes];
        let got = read_full(&mut self.inner, &mut payload)?;
        if got < payload.len() {
            if row_bytes > 0 && got % row_bytes == 0 {
                return Err(Error::Shape(format!(
                    "example {id:?} has {} rows, header declares l={rows} (m={cols})",
                    got / row_bytes
                )));
            }
            return Err(Error::Truncation(format!(
                "payload of example {id:?} is cut short ({got} of {} bytes)",
                payload.len()
            )));
        }
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Format(format!(
                "example {id:?} contains non-finite logits"
            )));
        }
        self.read += 1;
        Ok(Some((id, EmissionMatrix::new(rows, cols, data)?)))
    }
}

impl<R: Read> Iterator for EmissionReader<R> {
    type Item = Result<(String, EmissionMatrix)>;

    fn next(&mut self) -> Option<Self::Item> {
        if self.done {
            return None;
        }
        match self.next_record() {
            Ok(Some(rec)) => Some(Ok(rec)),
            Ok(None) => {
                self.done = true;
                None
            }
            Err(e) => {
                self.done = true;
                Some(Err(e))
            }
        }
    }
}

/// Read all examples from `path`.
pub fn load_emissions(path: impl AsRef<Path>) -> Result<(EmissionsHeader, Vec<(String, EmissionMatrix)>)> {
    let reader = EmissionReader::open(path)?;
    let header = reader.header();
    let records = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, records))
}

/// Fill `buf` as far as the stream allows; returns the byte count read.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Cursor;

    fn encode(header: EmissionsHeader, records: &[(String, EmissionMatrix)]) -> Vec<u8> {
        let mut w = EmissionWriter::new(Vec::new(), header).unwrap();
        for (id, z) in records {
            w.write(id, z).unwrap();
        }
        w.finish().unwrap()
    }

    fn decode(bytes: &[u8]) -> Result<Vec<(String, EmissionMatrix)>> {
        EmissionReader::new(Cursor::new(bytes))?.collect()
    }

    #[test]
    fn byte_layout() {
        let z = EmissionMatrix::new(1, 2, vec![1.0, -2.5]).unwrap();
        let bytes = encode(
            EmissionsHeader { labels: 2, length: 1, count: 1 },
            &[("ab".into(), z)],
        );
        let mut want = Vec::new();
        want.extend_from_slice(b"ICRFEMIT");
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(&1u32.to_le_bytes());
        want.extend_from_slice(&1u64.to_le_bytes());
        want.extend_from_slice(&2u32.to_le_bytes());
        want.extend_from_slice(b"ab");
        want.extend_from_slice(&1.0f32.to_le_bytes());
        want.extend_from_slice(&(-2.5f32).to_le_bytes());
        assert_eq!(bytes, want);
    }

    #[test]
    fn empty_file_is_valid() {
        let bytes = encode(EmissionsHeader { labels: 5, length: 3, count: 0 }, &[]);
        assert_eq!(bytes.len(), 28);
        assert!(decode(&bytes).unwrap().is_empty());
    }

    #[test]
    fn short_payload_is_shape_error() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.extend_from_slice(&141u32.to_le_bytes());
        bytes.extend_from_slice(&5u32.to_le_bytes());
        bytes.extend_from_slice(&1u64.to_le_bytes());
        bytes.extend_from_slice(&1u32.to_le_bytes());
        bytes.push(b'a');
        bytes.extend(std::iter::repeat_n(0u8, 4 * 141 * 4));
        assert!(matches!(decode(&bytes), Err(Error::Shape(_))));

        bytes.extend_from_slice(&[0, 0]);
        assert!(matches!(decode(&bytes), Err(Error::Truncation(_))));
    }

    #[test]
    fn bad_magic_version_and_trailing_bytes() {
        let good = encode(EmissionsHeader { labels: 1, length: 1, count: 0 }, &[]);
        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad[8] = 2;
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        let mut bad = good.clone();
        bad.push(0);
        assert!(matches!(decode(&bad), Err(Error::Format(_))));
        assert!(matches!(decode(&good[..20]), Err(Error::Truncation(_))));
    }

    #[test]
    fn missing_records_are_truncation() {
        let z = EmissionMatrix::zeros(2, 2);
        let mut bytes = encode(
            EmissionsHeader { labels: 2, length: 2, count: 1 },
            &[("a".into(), z)],
        );
        bytes[20] = 2; // count = 2
        assert!(matches!(decode(&bytes), Err(Error::Truncation(_))));
    }

    #[test]
    fn writer_checks_shapes() {
        let mut w = EmissionWriter::new(
            Vec::new(),
            EmissionsHeader { labels: 3, length: 2, count: 1 },
        )
        .unwrap();
        assert!(matches!(
            w.write("a", &EmissionMatrix::zeros(2, 2)),
            Err(Error::Shape(_))
        ));
        assert!(w.finish().is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.bin");
        let recs = vec![
            ("one".to_string(), EmissionMatrix::new(2, 2, vec![0.5, 1.0, -3.0, 8.25]).unwrap()),
            ("två".to_string(), EmissionMatrix::new(2, 2, vec![0.0, -0.0, 1e-3f32 as f64, 7.0]).unwrap()),
        ];
        store_emissions(&path, 2, 2, &recs).unwrap();
        let (header, back) = load_emissions(&path).unwrap();
        assert_eq!(header, EmissionsHeader { labels: 2, length: 2, count: 2 });
        assert_eq!(back, recs);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            l in 1usize..5,
            m in 1usize..6,
            raw in proptest::collection::vec(
                proptest::collection::vec(proptest::num::f32::NORMAL | proptest::num::f32::ZERO, 30), 0..4),
        ) {
            let records: Vec<(String, EmissionMatrix)> = raw
                .iter()
                .enumerate()
                .map(|(k, vals)| {
                    let data = vals[..l * m].iter().map(|&v| f64::from(v)).collect();
                    (format!("ex{k}"), EmissionMatrix::new(l, m, data).unwrap())
                })
                .collect();
            let header = EmissionsHeader { labels: m as u32, length: l as u32, count: records.len() as u64 };
            let bytes = encode(header, &records);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(back.len(), records.len());
            for ((ia, za), (ib, zb)) in back.iter().zip(&records) {
                prop_assert_eq!(ia, ib);
                for (a, b) in za.as_slice().iter().zip(zb.as_slice()) {
                    prop_assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            prop_assert_eq!(encode(header, &back), bytes);
        }
    }
}
