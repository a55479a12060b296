//! Regenerates the DICOM fixture corpus under `tests/fixtures/dicom` and its
//! `expected.json` outcome table.
//!
//! ```text
//! cargo run -p mrcontrast-core --example write_dicom_fixtures
//! ```

use mrcontrast::ingest::dicom::tags;
use mrcontrast::ingest::{write_fixture, DicomWriter, MetadataRecord, Tag};
use mrcontrast::synth::default_protocols;
use serde_json::json;
use std::collections::BTreeMap;

fn main() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/dicom");
    let mut expected = BTreeMap::new();
    let mut put = |name: &str, bytes: Vec<u8>, exp: serde_json::Value| {
        std::fs::write(dir.join(name), bytes).unwrap();
        expected.insert(name.to_string(), exp);
    };
    let protos = default_protocols(5, 5);
    // 52 per scanner/plane block: 50 SE then FLAIR, STIR
    let picks = [
        (0, "siemens_ax_se_short"),
        (37, "siemens_ax_se_long"),
        (50, "siemens_ax_flair"),
        (51, "siemens_ax_stir"),
        (57, "siemens_cor_se"),
        (115, "siemens_sag_se"),
        (173, "ge_ax_se"),
        (207, "ge_ax_stir"),
        (231, "ge_cor_se"),
        (290, "ge_sag_se"),
        (362, "philips_ax_flair"),
        (406, "philips_cor_se"),
        (465, "philips_sag_se"),
    ];
    for (i, name) in picks {
        let r = protos[i].clone();
        put(
            &format!("{name}.dcm"),
            write_fixture(&r),
            json!({ "record": r }),
        );
    }
    let base = protos[10].clone();
    let aniso = MetadataRecord {
        voxel_spacing_mm: Some([0.5, 0.75, 3.0]),
        ..base.clone()
    };
    put(
        "multi_valued_spacing.dcm",
        write_fixture(&aniso),
        json!({ "record": aniso }),
    );
    let nodesc = MetadataRecord {
        series_description: None,
        voxel_spacing_mm: None,
        ..base.clone()
    };
    put(
        "no_description_no_spacing.dcm",
        write_fixture(&nodesc),
        json!({ "record": nodesc }),
    );

    let mut w = DicomWriter::new();
    w.text(tags::REPETITION_TIME, *b"DS", "2000")
        .text(tags::ECHO_TIME, *b"DS", "30");
    let bare = MetadataRecord {
        manufacturer: "UNKNOWN".into(),
        scanner_model: "UNKNOWN".into(),
        field_strength_tesla: 0.0,
        sequence_type: "UNKNOWN".into(),
        sequence_variant: "UNKNOWN".into(),
        series_description: None,
        flip_angle_deg: 0.0,
        te_ms: 30.0,
        tr_ms: 2000.0,
        ti_ms: None,
        voxel_spacing_mm: None,
        num_slices: None,
        source_id: String::new(),
    };
    put(
        "only_te_tr_missing_ti.dcm",
        w.finish(),
        json!({ "record": bare }),
    );

    let mut w = DicomWriter::new();
    w.text(tags::MANUFACTURER, *b"LO", "  siemens ")
        .text(tags::SEQUENCE_TYPE, *b"CS", "se")
        .text(tags::REPETITION_TIME, *b"DS", "+4.5E3")
        .text(tags::ECHO_TIME, *b"DS", " 9.0e1 ");
    let padded = MetadataRecord {
        manufacturer: "SIEMENS".into(),
        sequence_type: "SE".into(),
        te_ms: 90.0,
        tr_ms: 4500.0,
        ..bare.clone()
    };
    put(
        "padded_exponent_strings.dcm",
        w.finish(),
        json!({ "record": padded }),
    );

    let mut nested = DicomWriter::bare();
    nested.text(Tag(0x0008, 0x1150), *b"UI", "1.2.3");
    let item = nested.finish()[132..].to_vec();
    let mut w = DicomWriter::new();
    w.text(tags::MANUFACTURER, *b"LO", "GE");
    w.undefined_sequence(Tag(0x0008, 0x1140), &[item.clone(), item]);
    w.text(tags::REPETITION_TIME, *b"DS", "500")
        .text(tags::ECHO_TIME, *b"DS", "12")
        .text(tags::INVERSION_TIME, *b"DS", "300");
    w.element(Tag(0x0019, 0x1001), *b"UN", &[1, 2, 3, 4]);
    w.element(tags::PIXEL_DATA, *b"OW", &[0u8; 64]);
    let seq = MetadataRecord {
        manufacturer: "GE".into(),
        te_ms: 12.0,
        tr_ms: 500.0,
        ti_ms: Some(300.0),
        ..bare.clone()
    };
    put(
        "sequence_private_pixel_data.dcm",
        w.finish(),
        json!({ "record": seq }),
    );

    let full = write_fixture(&protos[51]);
    put(
        "truncated_half.dcm",
        full[..full.len() / 2].to_vec(),
        json!({ "error": "TruncatedElement" }),
    );
    put(
        "truncated_last_byte.dcm",
        full[..full.len() - 1].to_vec(),
        json!({ "error": "TruncatedElement" }),
    );
    put(
        "truncated_in_preamble.dcm",
        full[..100].to_vec(),
        json!({ "error": "MissingMagic" }),
    );
    put(
        "not_dicom.dcm",
        b"plain text, not a DICOM stream".to_vec(),
        json!({ "error": "MissingMagic" }),
    );
    let mut w = DicomWriter::new();
    w.text(tags::REPETITION_TIME, *b"DS", "2000");
    put(
        "missing_te.dcm",
        w.finish(),
        json!({ "error": "MissingRequiredTag" }),
    );
    let mut w = DicomWriter::new();
    w.text(tags::REPETITION_TIME, *b"DS", "2000")
        .text(tags::ECHO_TIME, *b"DS", "3O");
    put(
        "malformed_te.dcm",
        w.finish(),
        json!({ "error": "MalformedNumeric" }),
    );
    let mut w = DicomWriter::new();
    w.text(tags::REPETITION_TIME, *b"DS", "2000")
        .text(tags::ECHO_TIME, *b"DS", "10\\20");
    put(
        "multi_valued_te.dcm",
        w.finish(),
        json!({ "error": "MalformedNumeric" }),
    );
    let mut w = DicomWriter::bare();
    w.text(tags::TRANSFER_SYNTAX_UID, *b"UI", "1.2.840.10008.1.2.2")
        .text(tags::ECHO_TIME, *b"DS", "10");
    put(
        "big_endian_syntax.dcm",
        w.finish(),
        json!({ "error": "UnsupportedTransferSyntax" }),
    );
    let mut w = DicomWriter::new();
    w.text(tags::SLICE_THICKNESS, *b"DS", "3")
        .text(tags::REPETITION_TIME, *b"DS", "2000")
        .text(tags::ECHO_TIME, *b"DS", "10")
        .text(tags::PIXEL_SPACING, *b"DS", "0\\0.5");
    put(
        "zero_pixel_spacing.dcm",
        w.finish(),
        json!({ "error": "InvalidValue" }),
    );

    std::fs::write(
        dir.join("expected.json"),
        serde_json::to_string_pretty(&expected).unwrap() + "\n",
    )
    .unwrap();
}
