use std::ffi::{CStr, CString};
use std::ptr;

use extvae_ffi::*;

fn last_error() -> String {
    let p = extvae_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn grid_sites(n: usize) -> *mut ExtvaeSites {
    let xy: Vec<f64> = (0..n * n)
        .flat_map(|i| [(i % n) as f64 * 10.0 / (n - 1) as f64, (i / n) as f64 * 10.0 / (n - 1) as f64])
        .collect();
    let mut sites = ptr::null_mut();
    assert_eq!(unsafe { extvae_sites_new(xy.as_ptr(), n * n, &mut sites) }, ExtvaeStatus::Ok);
    sites
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(extvae_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_pointers_are_reported() {
    let mut out = ptr::null_mut();
    let s = unsafe { extvae_sites_new(ptr::null(), 3, &mut out) };
    assert_eq!(s, ExtvaeStatus::NullPointer);
    assert!(last_error().contains("xy"));
    assert!(out.is_null());
    unsafe { extvae_field_free(ptr::null_mut()) };
    assert_eq!(unsafe { extvae_sites_len(ptr::null()) }, 0);
}

#[test]
fn success_clears_last_error() {
    let mut out = ptr::null_mut();
    unsafe { extvae_sites_new(ptr::null(), 1, &mut out) };
    assert!(!extvae_last_error().is_null());
    let sites = grid_sites(2);
    assert!(extvae_last_error().is_null());
    unsafe { extvae_sites_free(sites) };
}

#[test]
fn bad_arguments_map_to_argument_status() {
    let sites = grid_sites(3);
    let mut field = ptr::null_mut();
    let s = unsafe { extvae_simulate(9, 0.5, sites, 10, 1, &mut field) };
    assert_eq!(s, ExtvaeStatus::InvalidArgument);
    assert!(last_error().contains("model"));
    let mut v = [0.0; 4];
    let s = unsafe { extvae_sample_tilted_ps(1.5, 0.0, 1, 4, v.as_mut_ptr()) };
    assert_eq!(s, ExtvaeStatus::InvalidArgument);
    unsafe { extvae_sites_free(sites) };
}

#[test]
fn unreadable_csv_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bad.csv");
    std::fs::write(&p, "t,site_id,x,y,value\n0,0,0,0,oops\n").unwrap();
    let c = CString::new(p.to_str().unwrap()).unwrap();
    let mut field = ptr::null_mut();
    assert_eq!(unsafe { extvae_field_read_csv(c.as_ptr(), ExtvaeScale::Raw, &mut field) }, ExtvaeStatus::Data);
    assert!(last_error().contains("bad.csv:2"), "{}", last_error());
}

#[test]
fn field_round_trips_through_csv() {
    let sites = grid_sites(3);
    let mut field = ptr::null_mut();
    assert_eq!(unsafe { extvae_simulate(3, 0.5, sites, 6, 7, &mut field) }, ExtvaeStatus::Ok);
    let (mut nt, mut ns) = (0, 0);
    assert_eq!(unsafe { extvae_field_shape(field, &mut nt, &mut ns) }, ExtvaeStatus::Ok);
    assert_eq!((nt, ns), (6, 9));
    let mut a = vec![0.0; 54];
    assert_eq!(unsafe { extvae_field_values(field, a.as_mut_ptr(), 54) }, ExtvaeStatus::Ok);
    assert_eq!(unsafe { extvae_field_values(field, a.as_mut_ptr(), 53) }, ExtvaeStatus::InvalidArgument);

    let dir = tempfile::tempdir().unwrap();
    let c = CString::new(dir.path().join("f.csv").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { extvae_field_write_csv(field, c.as_ptr()) }, ExtvaeStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { extvae_field_read_csv(c.as_ptr(), ExtvaeScale::Raw, &mut back) }, ExtvaeStatus::Ok);
    let mut b = vec![0.0; 54];
    assert_eq!(unsafe { extvae_field_values(back, b.as_mut_ptr(), 54) }, ExtvaeStatus::Ok);
    assert_eq!(a, b);
    unsafe {
        extvae_field_free(back);
        extvae_field_free(field);
        extvae_sites_free(sites);
    }
}

#[test]
fn tilted_ps_draws_match_the_laplace_transform() {
    let (alpha, theta, s) = (0.5, 1.0, 1.0);
    let n = 200_000;
    let mut v = vec![0.0; n];
    assert_eq!(unsafe { extvae_sample_tilted_ps(alpha, theta, 3, n, v.as_mut_ptr()) }, ExtvaeStatus::Ok);
    let lt = v.iter().map(|z| (-s * z).exp()).sum::<f64>() / n as f64;
    let exact = (-(f64::powf(theta + s, alpha) - f64::powf(theta, alpha))).exp();
    assert!((lt - exact).abs() < 0.01, "{lt} vs {exact}");
}

#[test]
fn gev_fit_recovers_gumbel_location() {
    // Gumbel(0, 1) quantiles at plotting positions.
    let n = 2000;
    let x: Vec<f64> = (1..=n).map(|i| -(-((i as f64 - 0.5) / n as f64).ln()).ln()).collect();
    let (mut p, mut se) = ([0.0; 3], [0.0; 3]);
    assert_eq!(unsafe { extvae_fit_gev(x.as_ptr(), n, p.as_mut_ptr(), se.as_mut_ptr()) }, ExtvaeStatus::Ok);
    assert!(p[0].abs() < 0.05 && (p[1] - 1.0).abs() < 0.05 && p[2].abs() < 0.05, "{p:?}");
    assert!(se.iter().all(|s| *s > 0.0));
}

#[test]
fn crps_of_a_point_ensemble_is_absolute_error() {
    let mut out = 0.0;
    assert_eq!(unsafe { extvae_crps_ensemble([2.0].as_ptr(), 1, 5.0, &mut out) }, ExtvaeStatus::Ok);
    assert!((out - 3.0).abs() < 1e-12);
}

#[test]
fn train_emulate_and_reload() {
    let sites = grid_sites(4);
    let mut field = ptr::null_mut();
    assert_eq!(unsafe { extvae_simulate(3, 0.5, sites, 20, 2, &mut field) }, ExtvaeStatus::Ok);
    let mut model = ptr::null_mut();
    let s = unsafe { extvae_model_train(field, 2, 8.0, 5, 4, &mut model) };
    assert_eq!(s, ExtvaeStatus::Ok, "{}", last_error());
    assert_eq!(unsafe { extvae_model_n_knots(model) }, 4);

    let dir = tempfile::tempdir().unwrap();
    let c = CString::new(dir.path().join("state.json").to_str().unwrap()).unwrap();
    assert_eq!(unsafe { extvae_model_save(model, c.as_ptr()) }, ExtvaeStatus::Ok);
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { extvae_model_load(c.as_ptr(), &mut loaded) }, ExtvaeStatus::Ok);

    let (mut e1, mut e2) = (ptr::null_mut(), ptr::null_mut());
    assert_eq!(unsafe { extvae_emulate(model, field, 2, 9, &mut e1) }, ExtvaeStatus::Ok);
    assert_eq!(unsafe { extvae_emulate(loaded, field, 2, 9, &mut e2) }, ExtvaeStatus::Ok);
    let (mut a, mut b) = (vec![0.0; 640], vec![0.0; 640]);
    assert_eq!(unsafe { extvae_field_values(e1, a.as_mut_ptr(), 640) }, ExtvaeStatus::Ok);
    assert_eq!(unsafe { extvae_field_values(e2, b.as_mut_ptr(), 640) }, ExtvaeStatus::Ok);
    assert_eq!(a, b);
    assert!(a.iter().all(|v| v.is_finite() && *v > 0.0));
    unsafe {
        extvae_field_free(e1);
        extvae_field_free(e2);
        extvae_model_free(loaded);
        extvae_model_free(model);
        extvae_field_free(field);
        extvae_sites_free(sites);
    }
}

#[test]
fn header_declares_every_export() {
    let h = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/extvae.h")).unwrap();
    for name in [
        "extvae_last_error",
        "extvae_sites_new",
        "extvae_field_read_csv",
        "extvae_simulate",
        "extvae_model_train",
        "extvae_emulate",
        "extvae_empirical_chi",
        "EXTVAE_STATUS_PANIC = 5",
    ] {
        assert!(h.contains(name), "{name} missing from header");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler, skipping");
        return;
    };
    assert!(cc.status.success());
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"extvae.h\"\nint main(void) { ExtvaeSites *s = 0; double xy[2] = {0, 0};\n\
         ExtvaeStatus st = extvae_sites_new(xy, 1, &s); extvae_sites_free(s); return st == EXTVAE_STATUS_OK ? 0 : 1; }\n",
    )
    .unwrap();
    let out = std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(concat!(env!("CARGO_MANIFEST_DIR"), "/include"))
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
