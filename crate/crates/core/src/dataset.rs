//! Dataset files: scenes plus their simulated detections.
//!
//! Layout (all text lines end in `\n`):
//!
//! ```text
//! LAINDS version=1 digest=<hex> scenes=<n> pixels=<hex|raw>
//! scene size=<s> entities=<ne> instances=<ni> detections=<nd> feature_dim=<d>
//! pixels <nbytes>
//! <payload>
//! e <class> <x1> <y1> <x2> <y2>                                    (ne lines)
//! i <human> <object> <object_class> <verb> <category> <hbox×4> <obox×4>  (ni lines)
//! d <class> <confidence> <x1> <y1> <x2> <y2> <feature×d>           (nd lines)
//! end
//! ```
//!
//! The pixel payload is `size·size·3` little-endian `f32` values: either
//! `nbytes` raw bytes followed by `\n`, or `2·nbytes` lowercase hex digits
//! followed by `\n`. Floats in text lines use Rust's shortest round-trip
//! formatting, so a write/read cycle is lossless.

use std::fmt::Write as _;
use std::path::Path;

use crate::detect::{simulate_detections, Detection, DetectorConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::geometry::BBox;
use crate::scene::{generate_scene, Entity, HoiInstance, Scene, SceneSpec};

pub const FORMAT_VERSION: u32 = 1;
const MAGIC: &str = "LAINDS";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PixelEncoding {
    Hex,
    Raw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub scene: Scene,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub digest: String,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn scenes(&self) -> impl Iterator<Item = &Scene> {
        self.records.iter().map(|r| &r.scene)
    }

    pub fn to_bytes(&self, enc: PixelEncoding) -> Vec<u8> {
        let mut out = Vec::new();
        let enc_name = match enc {
            PixelEncoding::Hex => "hex",
            PixelEncoding::Raw => "raw",
        };
        out.extend_from_slice(
            format!(
                "{MAGIC} version={FORMAT_VERSION} digest={} scenes={} pixels={enc_name}\n",
                self.digest,
                self.records.len()
            )
            .as_bytes(),
        );
        for r in &self.records {
            write_record(&mut out, r, enc);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        let (at, header) = cur.line()?;
        let fields = Fields::new(header, at);
        if fields.tokens.first().map(|t| t.1) != Some(MAGIC) {
            return Err(parse_err(at, "missing LAINDS magic"));
        }
        let version: u32 = fields.key("version")?;
        if version != FORMAT_VERSION {
            return Err(parse_err(at, format!("unsupported version {version}")));
        }
        let digest: String = fields.key("digest")?;
        let n: usize = fields.key("scenes")?;
        let enc = match fields.key::<String>("pixels")?.as_str() {
            "hex" => PixelEncoding::Hex,
            "raw" => PixelEncoding::Raw,
            other => return Err(parse_err(at, format!("unknown pixel encoding `{other}`"))),
        };
        let mut records = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            records.push(read_record(&mut cur, enc)?);
        }
        if cur.pos != bytes.len() {
            return Err(parse_err(cur.pos, "trailing bytes after last record"));
        }
        Ok(Self { digest, records })
    }

    pub fn write(&self, path: &Path, enc: PixelEncoding) -> Result<()> {
        std::fs::write(path, self.to_bytes(enc)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Seeds of scene `index` in a corpus drawn from `seed`: one for rendering,
/// one for the detector.
pub fn record_seeds(seed: u64, index: usize) -> (u64, u64) {
    let base = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (index as u64).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    (base, base ^ 0x94d0_49bb_1331_11eb)
}

/// `n` scenes with detections; identical output for either `exec`.
pub fn generate_records(
    spec: &SceneSpec,
    detector: &DetectorConfig,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<Vec<Record>> {
    exec.map_range(n, |i| {
        let (s, d) = record_seeds(seed, i);
        let scene = generate_scene(spec, s)?;
        let detections = simulate_detections(&scene, detector, d)?;
        Ok(Record { scene, detections })
    })
    .into_iter()
    .collect()
}

fn write_record(out: &mut Vec<u8>, r: &Record, enc: PixelEncoding) {
    let s = &r.scene;
    let dim = r.detections.first().map_or(0, |d| d.feature.len());
    let nbytes = s.pixels.len() * 4;
    let mut head = format!(
        "scene size={} entities={} instances={} detections={} feature_dim={dim}\npixels {nbytes}\n",
        s.size,
        s.entities.len(),
        s.instances.len(),
        r.detections.len()
    );
    out.extend_from_slice(head.as_bytes());
    head.clear();
    match enc {
        PixelEncoding::Raw => {
            for p in &s.pixels {
                out.extend_from_slice(&p.to_le_bytes());
            }
        }
        PixelEncoding::Hex => {
            for p in &s.pixels {
                for b in p.to_le_bytes() {
                    let _ = write!(head, "{b:02x}");
                }
            }
            out.extend_from_slice(head.as_bytes());
        }
    }
    let mut text = String::from("\n");
    for e in &s.entities {
        let _ = writeln!(text, "e {} {}", e.class, join(&e.bbox));
    }
    for i in &s.instances {
        let _ = writeln!(
            text,
            "i {} {} {} {} {} {} {}",
            i.human,
            i.object,
            i.object_class,
            i.verb,
            i.category,
            join(&i.human_box),
            join(&i.object_box)
        );
    }
    for d in &r.detections {
        let _ = writeln!(
            text,
            "d {} {} {} {}",
            d.class,
            d.confidence,
            join(&d.bbox),
            join(&d.feature)
        );
    }
    text.push_str("end\n");
    out.extend_from_slice(text.as_bytes());
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

fn parse_err(offset: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        offset,
        message: message.into(),
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    /// Next `\n`-terminated line as UTF-8, with its starting offset.
    fn line(&mut self) -> Result<(usize, &'a str)> {
        let start = self.pos;
        let rest = &self.bytes[start..];
        let nl = rest
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| parse_err(start, "unexpected end of file"))?;
        let s = std::str::from_utf8(&rest[..nl]).map_err(|e| parse_err(start + e.valid_up_to(), "invalid UTF-8"))?;
        self.pos = start + nl + 1;
        Ok((start, s))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(parse_err(self.bytes.len(), format!("payload truncated, expected {n} bytes")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
}

/// Whitespace tokens with their byte offsets.
struct Fields<'a> {
    tokens: Vec<(usize, &'a str)>,
    line_at: usize,
}

impl<'a> Fields<'a> {
    fn new(line: &'a str, at: usize) -> Self {
        let base = line.as_ptr() as usize;
        let tokens = line
            .split_ascii_whitespace()
            .map(|t| (at + t.as_ptr() as usize - base, t))
            .collect();
        Self { tokens, line_at: at }
    }

    fn key<T: std::str::FromStr>(&self, name: &str) -> Result<T> {
        let (at, tok) = self
            .tokens
            .iter()
            .find(|(_, t)| t.split_once('=').map(|(k, _)| k) == Some(name))
            .ok_or_else(|| parse_err(self.line_at, format!("missing `{name}=`")))?;
        let v = &tok[name.len() + 1..];
        v.parse()
            .map_err(|_| parse_err(*at, format!("bad value `{v}` for `{name}`")))
    }

    fn expect_tag(&self, tag: &str, count: usize) -> Result<()> {
        if self.tokens.first().map(|t| t.1) != Some(tag) {
            return Err(parse_err(self.line_at, format!("expected `{tag}` line")));
        }
        if self.tokens.len() != count + 1 {
            return Err(parse_err(
                self.line_at,
                format!("`{tag}` line needs {count} fields, found {}", self.tokens.len() - 1),
            ));
        }
        Ok(())
    }

    fn at<T: std::str::FromStr>(&self, i: usize) -> Result<T> {
        let (at, tok) = self.tokens[i];
        tok.parse().map_err(|_| parse_err(at, format!("cannot parse `{tok}`")))
    }

    fn bbox(&self, from: usize) -> Result<BBox> {
        Ok([self.at(from)?, self.at(from + 1)?, self.at(from + 2)?, self.at(from + 3)?])
    }
}

fn read_record(cur: &mut Cursor, enc: PixelEncoding) -> Result<Record> {
    let (at, line) = cur.line()?;
    let f = Fields::new(line, at);
    if f.tokens.first().map(|t| t.1) != Some("scene") {
        return Err(parse_err(at, "expected `scene` line"));
    }
    let size: usize = f.key("size")?;
    let ne: usize = f.key("entities")?;
    let ni: usize = f.key("instances")?;
    let nd: usize = f.key("detections")?;
    let dim: usize = f.key("feature_dim")?;

    let (at, line) = cur.line()?;
    let pf = Fields::new(line, at);
    pf.expect_tag("pixels", 1)?;
    let nbytes: usize = pf.at(1)?;
    if nbytes != size * size * 12 {
        return Err(parse_err(at, format!("pixel byte count {nbytes} does not match size {size}")));
    }
    let payload_at = cur.pos;
    let raw: Vec<u8> = match enc {
        PixelEncoding::Raw => cur.take(nbytes)?.to_vec(),
        PixelEncoding::Hex => {
            let hex = cur.take(nbytes * 2)?;
            hex.chunks(2)
                .enumerate()
                .map(|(i, pair)| {
                    std::str::from_utf8(pair)
                        .ok()
                        .and_then(|s| u8::from_str_radix(s, 16).ok())
                        .ok_or_else(|| parse_err(payload_at + 2 * i, "bad hex digit"))
                })
                .collect::<Result<_>>()?
        }
    };
    if cur.take(1)? != b"\n" {
        return Err(parse_err(cur.pos - 1, "expected newline after pixel payload"));
    }
    let pixels = raw
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();

    let mut entities = Vec::with_capacity(ne.min(1024));
    for _ in 0..ne {
        let (at, line) = cur.line()?;
        let f = Fields::new(line, at);
        f.expect_tag("e", 5)?;
        entities.push(Entity {
            class: f.at(1)?,
            bbox: f.bbox(2)?,
        });
    }
    let mut instances = Vec::with_capacity(ni.min(1024));
    for _ in 0..ni {
        let (at, line) = cur.line()?;
        let f = Fields::new(line, at);
        f.expect_tag("i", 13)?;
        let inst = HoiInstance {
            human: f.at(1)?,
            object: f.at(2)?,
            object_class: f.at(3)?,
            verb: f.at(4)?,
            category: f.at(5)?,
            human_box: f.bbox(6)?,
            object_box: f.bbox(10)?,
        };
        if inst.human >= ne || inst.object >= ne {
            return Err(parse_err(at, "instance references a missing entity"));
        }
        instances.push(inst);
    }
    let mut detections = Vec::with_capacity(nd.min(1024));
    for _ in 0..nd {
        let (at, line) = cur.line()?;
        let f = Fields::new(line, at);
        f.expect_tag("d", 6 + dim)?;
        detections.push(Detection {
            class: f.at(1)?,
            confidence: f.at(2)?,
            bbox: f.bbox(3)?,
            feature: (7..7 + dim).map(|i| f.at(i)).collect::<Result<_>>()?,
        });
    }
    let (at, line) = cur.line()?;
    if line != "end" {
        return Err(parse_err(at, "expected `end`"));
    }
    Ok(Record {
        scene: Scene {
            size,
            pixels,
            entities,
            instances,
        },
        detections,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::category::CategorySpace;
    use crate::detect::{simulate_detections, DetectorConfig};
    use crate::scene::{generate_scene, SceneSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn sample(n: u64) -> Dataset {
        let spec = SceneSpec::new(CategorySpace::toy(4, 3).unwrap()).unwrap();
        let det = DetectorConfig {
            box_jitter: 0.02,
            feature_noise: 0.1,
            class_flip: 0.1,
            ..DetectorConfig::noiseless(4)
        };
        let records = (0..n)
            .map(|seed| {
                let scene = generate_scene(&spec, seed).unwrap();
                let detections = simulate_detections(&scene, &det, seed).unwrap();
                Record { scene, detections }
            })
            .collect();
        Dataset {
            digest: "abc123".into(),
            records,
        }
    }

    #[test]
    fn round_trip_both_encodings() {
        let ds = sample(10);
        for enc in [PixelEncoding::Hex, PixelEncoding::Raw] {
            let back = Dataset::from_bytes(&ds.to_bytes(enc)).unwrap();
            assert_eq!(back, ds);
        }
    }

    #[test]
    fn empty_dataset_is_valid() {
        let ds = Dataset {
            digest: "d".into(),
            records: vec![],
        };
        let bytes = ds.to_bytes(PixelEncoding::Raw);
        assert_eq!(bytes, b"LAINDS version=1 digest=d scenes=0 pixels=raw\n");
        assert_eq!(Dataset::from_bytes(&bytes).unwrap(), ds);
    }

    #[test]
    fn truncation_is_a_parse_error() {
        let ds = sample(3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for enc in [PixelEncoding::Hex, PixelEncoding::Raw] {
            let bytes = ds.to_bytes(enc);
            for _ in 0..200 {
                let cut = rng.gen_range(0..bytes.len());
                match Dataset::from_bytes(&bytes[..cut]) {
                    Err(Error::Parse { offset, .. }) => assert!(offset <= cut),
                    other => panic!("cut at {cut}: {other:?}"),
                }
            }
        }
    }

    #[test]
    fn corrupted_field_reports_offset() {
        let ds = sample(1);
        let text = String::from_utf8(ds.to_bytes(PixelEncoding::Hex)).unwrap();
        let pos = text.find("\ne ").unwrap() + 3;
        let mut bad = text.into_bytes();
        bad[pos] = b'x';
        match Dataset::from_bytes(&bad) {
            Err(Error::Parse { offset, .. }) => assert_eq!(offset, pos),
            other => panic!("{other:?}"),
        }
    }
}
