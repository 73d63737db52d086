use volimpute::surfaces::grid::{cell_index, NUM_TENORS};
use volimpute::surfaces::{
    apply_mask_all, gen_eight_gauss, gen_synthetic_surfaces, read_csv, write_csv, EightGaussSpec, MaskSpec, Standardizer,
    DELTAS, TENOR_YEARS,
};
use volimpute::RngStream;

#[test]
fn csv_round_trip_with_missing_cells() {
    let ds = gen_synthetic_surfaces(30, 1).unwrap();
    let masked = apply_mask_all(&ds, &MaskSpec { rate: 0.3, seed: 2 }).unwrap();
    let mut buf = Vec::new();
    write_csv(&masked, &mut buf).unwrap();
    let back = read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.len(), 30);
    for (a, b) in masked.surfaces.iter().zip(&back.surfaces) {
        assert_eq!(a.date, b.date);
        assert_eq!(a.mask, b.mask);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!(x.to_bits() == y.to_bits() || (x.is_nan() && y.is_nan()));
        }
        assert_eq!(b.observed_count(), 40 - 12);
    }
}

#[test]
fn total_variance_grows_with_tenor_at_the_money() {
    let ds = gen_synthetic_surfaces(500, 2).unwrap();
    let atm = DELTAS.iter().position(|d| *d == 0.5).unwrap();
    for s in &ds.surfaces {
        for t in 1..NUM_TENORS {
            let prev = s.values[cell_index(t - 1, atm)].powi(2) * TENOR_YEARS[t - 1];
            let cur = s.values[cell_index(t, atm)].powi(2) * TENOR_YEARS[t];
            assert!(cur >= prev, "{} tenor {t}", s.date);
        }
    }
}

#[test]
fn standardisation_round_trips() {
    let ds = gen_synthetic_surfaces(100, 3).unwrap();
    let st = Standardizer::fit(&ds).unwrap();
    let m = st.transform(&ds.surfaces).unwrap();
    for (i, s) in ds.surfaces.iter().enumerate() {
        let back = st.inverse_row(m.values.row(i));
        for (a, b) in back.iter().zip(&s.values) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn eight_gauss_has_unit_rms_and_eight_modes() {
    let spec = EightGaussSpec::default();
    let x = gen_eight_gauss(100_000, &spec, &mut RngStream::new(4)).unwrap();
    let n = x.rows() as f64;
    let ms = x.data().iter().map(|v| v * v).sum::<f64>() / (n * 2.0);
    assert!((ms - 1.0).abs() < 0.02, "mean square per coordinate {ms}");
    let mut counts = [0usize; 8];
    for i in 0..x.rows() {
        let a = x.at(i, 1).atan2(x.at(i, 0)).rem_euclid(std::f64::consts::TAU);
        counts[((a / (std::f64::consts::TAU / 8.0)).round() as usize) % 8] += 1;
    }
    for c in counts {
        assert!((c as f64 / n - 0.125).abs() < 0.005, "{counts:?}");
    }
}
