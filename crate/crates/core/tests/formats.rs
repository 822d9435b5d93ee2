mod common;

use std::io::Write;

use ugsp::checkpoint::Checkpoint;
use ugsp::ppm::{decode_pnm, encode_pnm};
use ugsp::sparse::FlopsLedger;
use ugsp::uen::{read_labels, write_labels, LabelPlane, MaskLabels};
use ugsp::{Error, Tensor};

#[test]
fn save_load_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    for c in common::format_round_trips(dir.path()).unwrap() {
        assert!(c.ok(), "{}: {} > {}", c.name, c.value, c.bound);
    }
}

#[test]
fn truncated_or_foreign_files_are_rejected() {
    let mut ck = Checkpoint::default();
    ck.push("vfi.a", &Tensor::<f32>::ones([1, 1, 2, 2]));
    let mut bytes = Vec::new();
    ck.write(&mut bytes).unwrap();
    for cut in [0, 7, 12, bytes.len() - 3] {
        assert!(matches!(Checkpoint::read(&bytes[..cut]), Err(Error::Format { .. })), "cut {cut}");
    }
    let mut trailing = bytes.clone();
    trailing.push(0);
    assert!(Checkpoint::read(&trailing[..]).is_err());

    let plane = LabelPlane {
        h: 3,
        w: 5,
        bits: (0..15).map(|i| i % 3 == 0).collect(),
    };
    let labels = vec![MaskLabels {
        sample_id: 42,
        planes: [plane.clone(), plane.clone(), plane],
    }];
    let mut lb = Vec::new();
    write_labels(&mut lb, &labels).unwrap();
    assert_eq!(read_labels(&lb[..]).unwrap(), labels);
    assert!(read_labels(&lb[..lb.len() - 1]).is_err());
    assert!(read_labels(&b"UGSPCKPT"[..]).is_err());
    assert!(read_labels(&b"UGSPLBL1"[..]).unwrap().is_empty());
}

#[test]
fn label_bits_are_lsb_first() {
    let plane = LabelPlane {
        h: 1,
        w: 9,
        bits: vec![true, false, false, false, false, false, false, false, true],
    };
    let labels = vec![MaskLabels {
        sample_id: 1,
        planes: [plane.clone(), plane.clone(), plane],
    }];
    let mut lb = Vec::new();
    write_labels(&mut lb, &labels).unwrap();
    // magic, id, then (h, w, 2 bytes) per plane.
    assert_eq!(lb.len(), 8 + 8 + 3 * (8 + 2));
    assert_eq!(&lb[24..26], &[0b0000_0001, 0b0000_0001]);
}

#[test]
fn pnm_headers_and_quantisation() {
    let img = Tensor::<f64>::from_fn([1, 3, 2, 3], |[_, c, y, x]| (c * 6 + y * 3 + x) as f64 / 17.0);
    let bytes = encode_pnm(&img).unwrap();
    assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
    let back: Tensor<f64> = decode_pnm(&bytes).unwrap();
    assert!(back.max_abs_diff(&img) <= 0.5 / 255.0 + 1e-12);
    assert_eq!(encode_pnm(&back).unwrap(), bytes);
    assert!(encode_pnm(&Tensor::<f64>::zeros([2, 3, 2, 2])).is_err());
    assert!(encode_pnm(&Tensor::<f64>::zeros([1, 2, 2, 2])).is_err());
}

#[test]
fn ledger_export_round_trips_through_a_file() {
    let mut l = FlopsLedger::new();
    l.record("vfi.block2.conv0", 3, 144, 144, 64, 20, true);
    l.record("vfi.enc.l0.conv0", 3, 3, 32, 1024, 1024, false);
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ledger.txt");
    std::fs::File::create(&p).unwrap().write_all(l.to_kv().as_bytes()).unwrap();
    let back = FlopsLedger::from_kv(&std::fs::read_to_string(&p).unwrap()).unwrap();
    assert_eq!(back.records, l.records);
    assert!(FlopsLedger::from_kv("layer=x K=3 C_in=1").is_err());
}
