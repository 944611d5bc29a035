use std::fs;

use genrep::dataio::{
    export_pgm, export_ppm, format_g6, import_pgm, load_tensor, save_tensor, write_metrics_csv, Cell, RunConfig,
};
use genrep::{Error, LabelMap, SeededRng, Tensor};

#[test]
fn twelve_float_vector_is_108_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.grt");
    save_tensor(&p, &Tensor::from_vec((0..12).map(f64::from).collect())).unwrap();
    assert_eq!(fs::metadata(&p).unwrap().len(), 108);
}

#[test]
fn roundtrip_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.grt");
    let mut rng = SeededRng::new(4);
    let mut data: Vec<f64> = (0..128).map(|_| rng.normal()).collect();
    data[0] = -0.0;
    data[1] = f64::MIN_POSITIVE / 2.0;
    let t = Tensor::new(vec![8, 4, 4], data).unwrap();
    save_tensor(&p, &t).unwrap();
    let back = load_tensor(&p).unwrap();
    assert_eq!(back.shape(), t.shape());
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&back), bits(&t));
}

#[test]
fn bad_magic_and_truncation_are_format_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("t.grt");
    save_tensor(&p, &Tensor::from_vec(vec![1.0, 2.0])).unwrap();
    let mut bytes = fs::read(&p).unwrap();
    bytes[3] = b'0';
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_tensor(&p), Err(Error::Format(_))));
    bytes[3] = b'1';
    bytes.pop();
    fs::write(&p, &bytes).unwrap();
    assert!(matches!(load_tensor(&p), Err(Error::Format(_))));
}

#[test]
fn class_grays_and_pgm_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("l.pgm");
    let labels = LabelMap::new(2, 3, 3, vec![0, 1, 2, 2, 1, 0]).unwrap();
    export_pgm(&p, &labels).unwrap();
    let bytes = fs::read(&p).unwrap();
    assert_eq!(&bytes[..bytes.len() - 6], b"P5\n3 2\n255\n");
    assert_eq!(&bytes[bytes.len() - 6..], &[0, 127, 255, 255, 127, 0]);
    assert_eq!(import_pgm(&p, 3).unwrap(), labels);
}

#[test]
fn zero_image_gives_zero_payload() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("z.ppm");
    export_ppm(&p, &Tensor::zeros(&[3, 4, 5])).unwrap();
    let bytes = fs::read(&p).unwrap();
    let header = b"P6\n5 4\n255\n";
    assert_eq!(&bytes[..header.len()], header);
    assert!(bytes[header.len()..].iter().all(|&b| b == 0));
    assert_eq!(bytes.len(), header.len() + 60);
}

#[test]
fn csv_header_written_once() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.csv");
    write_metrics_csv(&p, &["a", "b"], &[]).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), "a,b\n");
    write_metrics_csv(&p, &["a", "b"], &[vec![Cell::from(1usize), Cell::from(0.5)]]).unwrap();
    write_metrics_csv(&p, &["a", "b"], &[vec![Cell::from(2usize), Cell::from(0.25)]]).unwrap();
    assert_eq!(fs::read_to_string(&p).unwrap(), "a,b\n1,0.5\n2,0.25\n");
    assert!(write_metrics_csv(&p, &["x"], &[]).is_err());
}

#[test]
fn six_significant_digits_match_golden_file() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("g6.csv");
    let values: [(&str, Cell); 10] = [
        ("third", (1.0 / 3.0).into()),
        ("half", 0.5.into()),
        ("big", 123456789.0.into()),
        ("tiny", 1e-5.into()),
        ("small", (2.0 / 3.0 * 1e-4).into()),
        ("round", 100000.0.into()),
        ("million", 1234567.0.into()),
        ("neg", (-0.000123456).into()),
        ("zero", 0.0.into()),
        ("count", 42usize.into()),
    ];
    let rows: Vec<Vec<Cell>> = values.into_iter().map(|(n, v)| vec![Cell::from(n), v]).collect();
    write_metrics_csv(&p, &["name", "value"], &rows).unwrap();
    let golden = include_str!("golden/g6.csv");
    assert_eq!(fs::read_to_string(&p).unwrap(), golden);
    assert_eq!(format_g6(999999.5), "1e+06");
}

#[test]
fn config_rejects_unknown_keys_and_roundtrips() {
    assert!(matches!(RunConfig::parse("bogus = 1\n"), Err(Error::Config(_))));
    let cfg = RunConfig::parse("seed = 7\nfractions = 1/64, 1/4\n").unwrap();
    assert_eq!(cfg.seed, 7);
    assert_eq!(RunConfig::parse(&cfg.to_text()).unwrap(), cfg);
}
