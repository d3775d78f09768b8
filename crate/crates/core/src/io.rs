//! On-disk formats: event files (text and binary), PGM previews and raw
//! `.eci` count images.
//!
//! Text events: header `# evs <width> <height>`, then one `t x y p` line per
//! event (`p` is `1` or `-1`). Other lines starting with `#` are comments.
//!
//! Binary events: `EVS1`, u32 width, u32 height, u64 count, then `count`
//! records of (u64 t, u16 x, u16 y, i8 p). Little-endian throughout.
//!
//! `.eci`: `ECI1`, u32 height, u32 width, u8 polarity tag (0 pos, 1 neg,
//! 2 all), then `height·width` u32 counts, row-major, little-endian.

use std::fs;
use std::io::{BufRead, BufReader};
use std::path::Path;

use crate::error::{Error, Result};
use crate::event::{Event, EventCountImage, EventStream, Polarity, PolarityTag};

pub const EVENTS_MAGIC: &[u8; 4] = b"EVS1";
pub const ECI_MAGIC: &[u8; 4] = b"ECI1";
const EVENT_RECORD_LEN: usize = 8 + 2 + 2 + 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventFormat {
    Text,
    Binary,
}

impl std::str::FromStr for EventFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "text" | "txt" => Ok(EventFormat::Text),
            "binary" | "bin" => Ok(EventFormat::Binary),
            other => Err(Error::Usage(format!("unknown event format `{other}` (text|binary)"))),
        }
    }
}

pub fn encode_text(stream: &EventStream) -> String {
    use std::fmt::Write as _;
    let mut out = format!("# evs {} {}\n", stream.width(), stream.height());
    for e in stream.events() {
        let _ = writeln!(out, "{} {} {} {}", e.t, e.x, e.y, e.p.sign());
    }
    out
}

pub fn decode_text(src: impl BufRead) -> Result<EventStream> {
    let mut geometry = None;
    let mut events = Vec::new();
    for (lineno, line) in src.lines().enumerate() {
        let line = line.map_err(|e| Error::Data(format!("line {}: {e}", lineno + 1)))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            let mut parts = rest.split_whitespace();
            if geometry.is_none() && parts.next() == Some("evs") {
                let dims: Vec<usize> = parts
                    .map(|p| p.parse::<usize>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::Data(format!("line {}: bad header: {e}", lineno + 1)))?;
                if dims.len() != 2 {
                    return Err(Error::Data(format!("line {}: header needs width and height", lineno + 1)));
                }
                geometry = Some((dims[0], dims[1]));
            }
            continue;
        }
        if geometry.is_none() {
            return Err(Error::Data("missing `# evs <width> <height>` header".into()));
        }
        let bad = |what: &str| Error::Data(format!("line {}: {what}: `{line}`", lineno + 1));
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(bad("expected `t x y p`"));
        }
        let t = fields[0].parse::<u64>().map_err(|_| bad("bad timestamp"))?;
        let x = fields[1].parse::<u16>().map_err(|_| bad("bad x"))?;
        let y = fields[2].parse::<u16>().map_err(|_| bad("bad y"))?;
        let p = fields[3].parse::<i64>().map_err(|_| bad("bad polarity"))?;
        let p = Polarity::from_sign(p).map_err(|_| bad("polarity must be 1 or -1"))?;
        events.push(Event::new(t, x, y, p));
    }
    let (w, h) = geometry.ok_or_else(|| Error::Data("missing `# evs <width> <height>` header".into()))?;
    EventStream::new(w, h, events)
}

pub fn encode_binary(stream: &EventStream) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + stream.len() * EVENT_RECORD_LEN);
    out.extend_from_slice(EVENTS_MAGIC);
    out.extend_from_slice(&(stream.width() as u32).to_le_bytes());
    out.extend_from_slice(&(stream.height() as u32).to_le_bytes());
    out.extend_from_slice(&(stream.len() as u64).to_le_bytes());
    for e in stream.events() {
        out.extend_from_slice(&e.t.to_le_bytes());
        out.extend_from_slice(&e.x.to_le_bytes());
        out.extend_from_slice(&e.y.to_le_bytes());
        out.push(e.p.sign() as u8);
    }
    out
}

pub fn decode_binary(bytes: &[u8]) -> Result<EventStream> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != EVENTS_MAGIC {
        return Err(Error::Data("not an EVS1 event file".into()));
    }
    let width = r.u32()? as usize;
    let height = r.u32()? as usize;
    let count = r.u64()? as usize;
    if r.remaining() != count.saturating_mul(EVENT_RECORD_LEN) {
        return Err(Error::Data(format!(
            "EVS1 header declares {count} events but payload holds {} bytes",
            r.remaining()
        )));
    }
    let mut events = Vec::with_capacity(count);
    for _ in 0..count {
        let t = r.u64()?;
        let x = r.u16()?;
        let y = r.u16()?;
        let p = r.u8()? as i8;
        events.push(Event::new(t, x, y, Polarity::from_sign(i64::from(p))?));
    }
    EventStream::new(width, height, events)
}

/// Read an event file, detecting the format from its leading bytes.
pub fn read_events(path: &Path) -> Result<EventStream> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.starts_with(EVENTS_MAGIC) {
        decode_binary(&bytes)
    } else {
        decode_text(BufReader::new(bytes.as_slice()))
    }
}

pub fn write_events(path: &Path, stream: &EventStream, format: EventFormat) -> Result<()> {
    let bytes = match format {
        EventFormat::Text => encode_text(stream).into_bytes(),
        EventFormat::Binary => encode_binary(stream),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn encode_eci(img: &EventCountImage) -> Vec<u8> {
    let mut out = Vec::with_capacity(13 + 4 * img.counts().len());
    out.extend_from_slice(ECI_MAGIC);
    out.extend_from_slice(&(img.height() as u32).to_le_bytes());
    out.extend_from_slice(&(img.width() as u32).to_le_bytes());
    out.push(img.tag().code());
    for c in img.counts() {
        out.extend_from_slice(&c.to_le_bytes());
    }
    out
}

pub fn decode_eci(bytes: &[u8]) -> Result<EventCountImage> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != ECI_MAGIC {
        return Err(Error::Data("not an ECI1 file".into()));
    }
    let height = r.u32()? as usize;
    let width = r.u32()? as usize;
    let tag = PolarityTag::from_code(r.u8()?)?;
    let cells = width.checked_mul(height).ok_or_else(|| Error::Data("ECI1 dims overflow".into()))?;
    if r.remaining() != cells.saturating_mul(4) {
        return Err(Error::Data(format!("ECI1 payload size mismatch for {height}x{width}")));
    }
    let counts = (0..cells).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    EventCountImage::from_counts(width, height, tag, counts)
}

/// Plain (ASCII) PGM with `maxval` equal to the largest count. An all-zero
/// image is written with `maxval = 1`; counts above 65535 are rescaled.
pub fn encode_pgm(img: &EventCountImage) -> String {
    use std::fmt::Write as _;
    let max = img.max().max(1);
    let (maxval, scale) = if max > 65535 { (65535u32, 65535.0 / f64::from(max)) } else { (max, 1.0) };
    let mut out = format!("P2\n{} {}\n{}\n", img.width(), img.height(), maxval);
    for row in img.counts().chunks(img.width()) {
        let line: Vec<String> = row
            .iter()
            .map(|&c| if scale == 1.0 { c.to_string() } else { ((f64::from(c) * scale).round() as u32).to_string() })
            .collect();
        let _ = writeln!(out, "{}", line.join(" "));
    }
    out
}

pub fn write_eci(path: &Path, img: &EventCountImage) -> Result<()> {
    fs::write(path, encode_eci(img)).map_err(|e| Error::io(path, e))
}

pub fn read_eci(path: &Path) -> Result<EventCountImage> {
    decode_eci(&fs::read(path).map_err(|e| Error::io(path, e))?)
}

pub fn write_pgm(path: &Path, img: &EventCountImage) -> Result<()> {
    fs::write(path, encode_pgm(img)).map_err(|e| Error::io(path, e))
}

/// Writes `<stem>.eci` and `<stem>.pgm` into `dir`.
pub fn dump_count_image(dir: &Path, stem: &str, img: &EventCountImage) -> Result<()> {
    write_eci(&dir.join(format!("{stem}.eci")), img)?;
    write_pgm(&dir.join(format!("{stem}.pgm")), img)
}

pub(crate) struct ByteReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::Data(format!("truncated input at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut a = [0u8; N];
        a.copy_from_slice(self.take(N)?);
        Ok(a)
    }

    pub(crate) fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub(crate) fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::event::stack_count_image;
    use crate::synth::uniform_random_stream;

    #[test]
    fn text_binary_agree() {
        let s = uniform_random_stream(1, 32, 20, 300, 100_000);
        let from_text = decode_text(encode_text(&s).as_bytes()).unwrap();
        let from_bin = decode_binary(&encode_binary(&s)).unwrap();
        assert_eq!(from_text, s);
        assert_eq!(from_bin, s);
    }

    #[test]
    fn text_comments_and_errors() {
        let src = "# a comment\n# evs 4 2\n# another\n10 1 1 1\n\n12 3 0 -1\n";
        let s = decode_text(src.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!((s.width(), s.height()), (4, 2));
        assert!(decode_text("0 0 0 1\n".as_bytes()).is_err());
        assert!(decode_text("# evs 4 4\n0 0 0 0\n".as_bytes()).is_err());
        assert!(decode_text("# evs 4 4\n0 9 0 1\n".as_bytes()).is_err());
        assert!(decode_text("# evs 4 4\n5 0 0 1\n4 0 0 1\n".as_bytes()).is_err());
    }

    #[test]
    fn binary_layout() {
        let s = EventStream::new(3, 2, vec![Event::new(258, 2, 1, Polarity::Negative)]).unwrap();
        let b = encode_binary(&s);
        assert_eq!(&b[..4], b"EVS1");
        assert_eq!(&b[4..8], &3u32.to_le_bytes());
        assert_eq!(&b[8..12], &2u32.to_le_bytes());
        assert_eq!(&b[12..20], &1u64.to_le_bytes());
        assert_eq!(&b[20..28], &258u64.to_le_bytes());
        assert_eq!(&b[28..32], &[2, 0, 1, 0]);
        assert_eq!(b[32], 0xff);
        assert!(decode_binary(&b[..b.len() - 1]).is_err());
    }

    #[test]
    fn eci_bytes_round_trip() {
        let s = uniform_random_stream(4, 7, 5, 200, 1000);
        let img = stack_count_image(&s, PolarityTag::Negative);
        let bytes = encode_eci(&img);
        assert_eq!(bytes.len(), 13 + 4 * 35);
        assert_eq!(&bytes[4..8], &5u32.to_le_bytes());
        assert_eq!(bytes[12], 1);
        let back = decode_eci(&bytes).unwrap();
        assert_eq!(back, img);
        assert_eq!(encode_eci(&back), bytes);
    }

    #[test]
    fn pgm_header() {
        let img = EventCountImage::from_counts(3, 1, PolarityTag::All, vec![0, 4, 2]).unwrap();
        assert_eq!(encode_pgm(&img), "P2\n3 1\n4\n0 4 2\n");
        let zero = EventCountImage::zeros(2, 1, PolarityTag::All);
        assert!(encode_pgm(&zero).starts_with("P2\n2 1\n1\n"));
    }
}
