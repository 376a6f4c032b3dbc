use dpmf_wasm_demo::{buffer_rows, meanfield_rows, passage_rows, BUFFER_WIDTH, MEANFIELD_WIDTH, PASSAGE_WIDTH};

#[test]
fn buffer_table_shape_and_cap() {
    let rows = buffer_rows(0.2, 1.0, &[0.2, 1.4, 0.3]).unwrap();
    assert_eq!(rows.len() % BUFFER_WIDTH, 0);
    let n = rows.len() / BUFFER_WIDTH;
    assert_eq!(n, 2001);
    let active = rows.chunks(BUFFER_WIDTH).filter(|r| r[4] == 1.0).count();
    assert!(active > 0 && active < n);
    assert!(rows.chunks(BUFFER_WIDTH).all(|r| r[3] >= 0.0));
}

#[test]
fn passage_matches_closed_form() {
    let rows = passage_rows(1.0, 0.5, 4.0).unwrap();
    assert_eq!(rows.len(), PASSAGE_WIDTH * 2000);
    let err = rows.chunks(PASSAGE_WIDTH).map(|r| (r[1] - r[2]).abs()).fold(0.0, f64::max);
    assert!(err < 1e-2, "{err}");
}

#[test]
fn meanfield_curve_is_monotone() {
    let rows = meanfield_rows(0.5, 0.1, 2.0).unwrap();
    assert_eq!(rows.len() % MEANFIELD_WIDTH, 0);
    let f: Vec<f64> = rows.chunks(MEANFIELD_WIDTH).map(|r| r[1]).collect();
    assert!(f.windows(2).all(|w| w[1] >= w[0] - 1e-12));
    assert!(*f.last().unwrap() > 0.0);
}

#[test]
fn bad_input_is_an_error() {
    assert!(buffer_rows(0.2, 1.0, &[0.5]).is_err());
    assert!(buffer_rows(0.0, 1.0, &[0.5, 1.0]).is_err());
    assert!(passage_rows(1.0, 0.5, 0.0).is_err());
    assert!(meanfield_rows(-1.0, 0.1, 1.0).is_err());
}
