//! Minimal DICOM part-10 reader and writer for explicit-VR little-endian data.
//!
//! Only the handful of acquisition tags needed to build a [`MetadataRecord`]
//! are decoded. Every other element is skipped by its length, including
//! sequences and encapsulated pixel data with undefined length, which are
//! walked item by item without being interpreted.

use super::record::{canonical_str, MetadataRecord};
use super::IngestError;

/// A (group, element) pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Tag(pub u16, pub u16);

pub mod tags {
    use super::Tag;

    pub const TRANSFER_SYNTAX_UID: Tag = Tag(0x0002, 0x0010);
    pub const MANUFACTURER: Tag = Tag(0x0008, 0x0070);
    pub const SERIES_DESCRIPTION: Tag = Tag(0x0008, 0x103E);
    pub const SCANNER_MODEL: Tag = Tag(0x0008, 0x1090);
    pub const SEQUENCE_TYPE: Tag = Tag(0x0018, 0x0020);
    pub const SEQUENCE_VARIANT: Tag = Tag(0x0018, 0x0021);
    pub const SLICE_THICKNESS: Tag = Tag(0x0018, 0x0050);
    pub const REPETITION_TIME: Tag = Tag(0x0018, 0x0080);
    pub const ECHO_TIME: Tag = Tag(0x0018, 0x0081);
    pub const INVERSION_TIME: Tag = Tag(0x0018, 0x0082);
    pub const FIELD_STRENGTH: Tag = Tag(0x0018, 0x0087);
    pub const FLIP_ANGLE: Tag = Tag(0x0018, 0x1314);
    pub const PIXEL_SPACING: Tag = Tag(0x0028, 0x0030);
    pub const PIXEL_DATA: Tag = Tag(0x7FE0, 0x0010);

    pub const ITEM: Tag = Tag(0xFFFE, 0xE000);
    pub const ITEM_DELIMITATION: Tag = Tag(0xFFFE, 0xE00D);
    pub const SEQUENCE_DELIMITATION: Tag = Tag(0xFFFE, 0xE0DD);
}

pub const EXPLICIT_VR_LITTLE_ENDIAN: &str = "1.2.840.10008.1.2.1";

const PREAMBLE_LEN: usize = 128;
const MAGIC: &[u8; 4] = b"DICM";
const UNDEFINED_LENGTH: u32 = 0xFFFF_FFFF;
const MAX_NESTING: usize = 32;

/// VRs whose explicit encoding uses two reserved bytes and a 32-bit length.
fn has_long_length(vr: [u8; 2]) -> bool {
    matches!(
        &vr,
        b"OB"
            | b"OD"
            | b"OF"
            | b"OL"
            | b"OV"
            | b"OW"
            | b"SQ"
            | b"SV"
            | b"UC"
            | b"UN"
            | b"UR"
            | b"UT"
            | b"UV"
    )
}

struct Header {
    tag: Tag,
    len: u32,
    value_at: usize,
}

fn read_u16(bytes: &[u8], at: usize) -> Result<u16, IngestError> {
    bytes
        .get(at..at + 2)
        .map(|b| u16::from_le_bytes([b[0], b[1]]))
        .ok_or(IngestError::TruncatedElement { offset: at })
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32, IngestError> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(IngestError::TruncatedElement { offset: at })
}

fn read_header(bytes: &[u8], at: usize) -> Result<Header, IngestError> {
    let tag = Tag(read_u16(bytes, at)?, read_u16(bytes, at + 2)?);
    if tag.0 == 0xFFFE {
        // item and delimiter tags carry no VR
        let len = read_u32(bytes, at + 4)?;
        return Ok(Header {
            tag,
            len,
            value_at: at + 8,
        });
    }
    let vr = bytes
        .get(at + 4..at + 6)
        .map(|b| [b[0], b[1]])
        .ok_or(IngestError::TruncatedElement { offset: at })?;
    if !vr.iter().all(u8::is_ascii_uppercase) {
        return Err(IngestError::UnsupportedTransferSyntax(format!(
            "no explicit VR at offset {at}"
        )));
    }
    if has_long_length(vr) {
        let len = read_u32(bytes, at + 8)?;
        Ok(Header {
            tag,
            len,
            value_at: at + 12,
        })
    } else {
        let len = u32::from(read_u16(bytes, at + 6)?);
        Ok(Header {
            tag,
            len,
            value_at: at + 8,
        })
    }
}

/// Returns the offset just past a defined-length value.
fn skip_defined(bytes: &[u8], header: &Header) -> Result<usize, IngestError> {
    let end = header
        .value_at
        .checked_add(header.len as usize)
        .filter(|end| *end <= bytes.len())
        .ok_or(IngestError::TruncatedElement {
            offset: header.value_at,
        })?;
    Ok(end)
}

/// Walks an undefined-length sequence (or encapsulated pixel data) and returns
/// the offset just past its sequence delimitation item.
fn skip_undefined_sequence(
    bytes: &[u8],
    mut at: usize,
    depth: usize,
) -> Result<usize, IngestError> {
    if depth > MAX_NESTING {
        return Err(IngestError::MalformedSequence { offset: at });
    }
    loop {
        let h = read_header(bytes, at)?;
        match h.tag {
            tags::SEQUENCE_DELIMITATION => return Ok(h.value_at),
            tags::ITEM if h.len == UNDEFINED_LENGTH => {
                at = skip_item_dataset(bytes, h.value_at, depth + 1)?;
            }
            tags::ITEM => at = skip_defined(bytes, &h)?,
            _ => return Err(IngestError::MalformedSequence { offset: at }),
        }
    }
}

/// Skips the elements of an undefined-length item up to its delimiter.
fn skip_item_dataset(bytes: &[u8], mut at: usize, depth: usize) -> Result<usize, IngestError> {
    if depth > MAX_NESTING {
        return Err(IngestError::MalformedSequence { offset: at });
    }
    loop {
        let h = read_header(bytes, at)?;
        if h.tag == tags::ITEM_DELIMITATION {
            return Ok(h.value_at);
        }
        at = if h.len == UNDEFINED_LENGTH {
            skip_undefined_sequence(bytes, h.value_at, depth + 1)?
        } else {
            skip_defined(bytes, &h)?
        };
    }
}

fn text_value(raw: &[u8]) -> String {
    String::from_utf8_lossy(raw)
        .trim_matches(|c: char| c == '\0' || c.is_whitespace())
        .to_string()
}

/// Parses a decimal-string value, splitting multi-valued strings on `\`.
pub fn parse_decimal_string(field: &'static str, raw: &str) -> Result<Vec<f64>, IngestError> {
    raw.split('\\')
        .map(|part| {
            let p = part.trim();
            p.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| IngestError::MalformedNumeric {
                    field,
                    value: raw.to_string(),
                })
        })
        .collect()
}

fn single_decimal(field: &'static str, raw: &str) -> Result<f64, IngestError> {
    let values = parse_decimal_string(field, raw)?;
    match values.as_slice() {
        [v] => Ok(*v),
        _ => Err(IngestError::MalformedNumeric {
            field,
            value: raw.to_string(),
        }),
    }
}

#[derive(Default)]
struct Collected {
    manufacturer: Option<String>,
    scanner_model: Option<String>,
    series_description: Option<String>,
    sequence_type: Option<String>,
    sequence_variant: Option<String>,
    tr: Option<String>,
    te: Option<String>,
    ti: Option<String>,
    field_strength: Option<String>,
    flip_angle: Option<String>,
    slice_thickness: Option<String>,
    pixel_spacing: Option<String>,
}

/// Reads acquisition metadata from a DICOM part-10 byte stream.
///
/// The returned record has an empty `source_id`; callers that know where the
/// bytes came from fill it in.
pub fn parse_dicom_tags(bytes: &[u8]) -> Result<MetadataRecord, IngestError> {
    if bytes.len() < PREAMBLE_LEN + MAGIC.len() || &bytes[PREAMBLE_LEN..PREAMBLE_LEN + 4] != MAGIC {
        return Err(IngestError::MissingMagic);
    }
    let mut c = Collected::default();
    let mut at = PREAMBLE_LEN + MAGIC.len();
    while at < bytes.len() {
        let h = read_header(bytes, at)?;
        if h.len == UNDEFINED_LENGTH {
            at = skip_undefined_sequence(bytes, h.value_at, 0)?;
            continue;
        }
        let end = skip_defined(bytes, &h)?;
        let raw = &bytes[h.value_at..end];
        let slot = match h.tag {
            tags::TRANSFER_SYNTAX_UID => {
                let uid = text_value(raw);
                if uid != EXPLICIT_VR_LITTLE_ENDIAN {
                    return Err(IngestError::UnsupportedTransferSyntax(uid));
                }
                None
            }
            tags::MANUFACTURER => Some(&mut c.manufacturer),
            tags::SCANNER_MODEL => Some(&mut c.scanner_model),
            tags::SERIES_DESCRIPTION => Some(&mut c.series_description),
            tags::SEQUENCE_TYPE => Some(&mut c.sequence_type),
            tags::SEQUENCE_VARIANT => Some(&mut c.sequence_variant),
            tags::REPETITION_TIME => Some(&mut c.tr),
            tags::ECHO_TIME => Some(&mut c.te),
            tags::INVERSION_TIME => Some(&mut c.ti),
            tags::FIELD_STRENGTH => Some(&mut c.field_strength),
            tags::FLIP_ANGLE => Some(&mut c.flip_angle),
            tags::SLICE_THICKNESS => Some(&mut c.slice_thickness),
            tags::PIXEL_SPACING => Some(&mut c.pixel_spacing),
            _ => None,
        };
        if let Some(slot) = slot {
            let v = text_value(raw);
            *slot = (!v.is_empty()).then_some(v);
        }
        at = end;
    }
    build_record(c)
}

fn build_record(c: Collected) -> Result<MetadataRecord, IngestError> {
    let te = c.te.ok_or(IngestError::MissingRequiredTag("TE"))?;
    let tr = c.tr.ok_or(IngestError::MissingRequiredTag("TR"))?;
    let opt = |field, v: Option<String>| -> Result<Option<f64>, IngestError> {
        v.map(|s| single_decimal(field, &s)).transpose()
    };
    let voxel_spacing_mm = match (c.pixel_spacing, c.slice_thickness) {
        (Some(ps), Some(th)) => {
            let inplane = parse_decimal_string("pixel_spacing", &ps)?;
            let [row, col] = inplane[..] else {
                return Err(IngestError::MalformedNumeric {
                    field: "pixel_spacing",
                    value: ps,
                });
            };
            Some([row, col, single_decimal("slice_thickness", &th)?])
        }
        _ => None,
    };
    let record = MetadataRecord {
        manufacturer: canonical_str(c.manufacturer.as_deref().unwrap_or("")),
        scanner_model: canonical_str(c.scanner_model.as_deref().unwrap_or("")),
        field_strength_tesla: opt("field_strength_tesla", c.field_strength)?.unwrap_or(0.0),
        sequence_type: canonical_str(c.sequence_type.as_deref().unwrap_or("")),
        sequence_variant: canonical_str(c.sequence_variant.as_deref().unwrap_or("")),
        series_description: c.series_description,
        flip_angle_deg: opt("flip_angle_deg", c.flip_angle)?.unwrap_or(0.0),
        te_ms: single_decimal("te_ms", &te)?,
        tr_ms: single_decimal("tr_ms", &tr)?,
        ti_ms: opt("ti_ms", c.ti)?,
        voxel_spacing_mm,
        num_slices: None,
        source_id: String::new(),
    }
    .canonicalize();
    record.validate()?;
    Ok(record)
}

/// Writes explicit-VR little-endian part-10 streams. Elements are emitted in
/// call order; callers are responsible for ascending tag order.
#[derive(Debug, Clone)]
pub struct DicomWriter {
    buf: Vec<u8>,
}

impl Default for DicomWriter {
    fn default() -> Self {
        Self::new()
    }
}

impl DicomWriter {
    /// Preamble, magic and a file meta group declaring explicit-VR little-endian.
    pub fn new() -> Self {
        let mut w = Self::bare();
        w.text(tags::TRANSFER_SYNTAX_UID, *b"UI", EXPLICIT_VR_LITTLE_ENDIAN);
        w
    }

    /// Preamble and magic only.
    pub fn bare() -> Self {
        let mut buf = vec![0u8; PREAMBLE_LEN];
        buf.extend_from_slice(MAGIC);
        Self { buf }
    }

    pub fn element(&mut self, tag: Tag, vr: [u8; 2], value: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(&tag.0.to_le_bytes());
        self.buf.extend_from_slice(&tag.1.to_le_bytes());
        self.buf.extend_from_slice(&vr);
        if has_long_length(vr) {
            self.buf.extend_from_slice(&[0, 0]);
            self.buf
                .extend_from_slice(&(value.len() as u32).to_le_bytes());
        } else {
            self.buf
                .extend_from_slice(&(value.len() as u16).to_le_bytes());
        }
        self.buf.extend_from_slice(value);
        self
    }

    /// Text element padded to even length (NUL for UI, space otherwise).
    pub fn text(&mut self, tag: Tag, vr: [u8; 2], value: &str) -> &mut Self {
        let mut bytes = value.as_bytes().to_vec();
        if bytes.len() % 2 == 1 {
            bytes.push(if &vr == b"UI" { 0 } else { b' ' });
        }
        self.element(tag, vr, &bytes)
    }

    pub fn decimals(&mut self, tag: Tag, values: &[f64]) -> &mut Self {
        let s = values
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join("\\");
        self.text(tag, *b"DS", &s)
    }

    /// An undefined-length sequence holding the given raw item payloads,
    /// each wrapped as an undefined-length item.
    pub fn undefined_sequence(&mut self, tag: Tag, items: &[Vec<u8>]) -> &mut Self {
        self.buf.extend_from_slice(&tag.0.to_le_bytes());
        self.buf.extend_from_slice(&tag.1.to_le_bytes());
        self.buf.extend_from_slice(b"SQ\0\0");
        self.buf.extend_from_slice(&UNDEFINED_LENGTH.to_le_bytes());
        for item in items {
            self.delimiter(tags::ITEM, UNDEFINED_LENGTH);
            self.buf.extend_from_slice(item);
            self.delimiter(tags::ITEM_DELIMITATION, 0);
        }
        self.delimiter(tags::SEQUENCE_DELIMITATION, 0);
        self
    }

    fn delimiter(&mut self, tag: Tag, len: u32) {
        self.buf.extend_from_slice(&tag.0.to_le_bytes());
        self.buf.extend_from_slice(&tag.1.to_le_bytes());
        self.buf.extend_from_slice(&len.to_le_bytes());
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Serializes a record's acquisition tags, in ascending tag order.
/// `voxel_spacing_mm` is written as pixel spacing (row, column) plus slice
/// thickness. `source_id` and `num_slices` are not represented.
pub fn write_fixture(record: &MetadataRecord) -> Vec<u8> {
    let mut w = DicomWriter::new();
    w.text(tags::MANUFACTURER, *b"LO", &record.manufacturer);
    if let Some(desc) = &record.series_description {
        w.text(tags::SERIES_DESCRIPTION, *b"LO", desc);
    }
    w.text(tags::SCANNER_MODEL, *b"LO", &record.scanner_model);
    w.text(tags::SEQUENCE_TYPE, *b"CS", &record.sequence_type);
    w.text(tags::SEQUENCE_VARIANT, *b"CS", &record.sequence_variant);
    if let Some([_, _, thickness]) = record.voxel_spacing_mm {
        w.decimals(tags::SLICE_THICKNESS, &[thickness]);
    }
    w.decimals(tags::REPETITION_TIME, &[record.tr_ms]);
    w.decimals(tags::ECHO_TIME, &[record.te_ms]);
    if let Some(ti) = record.ti_ms {
        w.decimals(tags::INVERSION_TIME, &[ti]);
    }
    w.decimals(tags::FIELD_STRENGTH, &[record.field_strength_tesla]);
    w.decimals(tags::FLIP_ANGLE, &[record.flip_angle_deg]);
    if let Some([row, col, _]) = record.voxel_spacing_mm {
        w.decimals(tags::PIXEL_SPACING, &[row, col]);
    }
    w.finish()
}
