use std::ffi::{CStr, CString};
use std::ptr;

use munet_ffi::*;

fn tiny_config() -> MunetNetworkConfig {
    MunetNetworkConfig {
        stages: 3,
        base_features: 4,
        in_channels: 1,
        out_classes: 3,
        input_extent: 16,
        variant: 1,
        width_num: 1,
        width_den: 1,
    }
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(munet_last_error()) }.to_string_lossy().into_owned()
}

fn new_net(config: &MunetNetworkConfig, seed: u64) -> *mut MunetNetwork {
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { munet_network_new(config, seed, &mut net) }, MunetStatus::Ok, "{}", last_error());
    assert!(!net.is_null());
    net
}

fn inputs(n: usize, e: usize, seed: u64) -> Vec<f64> {
    // Small LCG: the test only needs varied, reproducible values.
    let mut s = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
    (0..n * e * e)
        .map(|_| {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (s >> 11) as f64 / (1u64 << 53) as f64
        })
        .collect()
}

fn predict(net: *mut MunetNetwork, images: &[f64], n: usize, e: usize) -> Vec<f64> {
    let mut scores = vec![0.0; n * 3 * e * e];
    let st = unsafe { munet_network_predict(net, images.as_ptr(), images.len(), n, e, e, scores.as_mut_ptr(), scores.len()) };
    assert_eq!(st, MunetStatus::Ok, "{}", last_error());
    scores
}

#[test]
fn handle_lifecycle_and_config() {
    let cfg = tiny_config();
    let net = new_net(&cfg, 1);
    let mut back = MunetNetworkConfig { variant: 9, ..cfg };
    assert_eq!(unsafe { munet_network_config(net, &mut back) }, MunetStatus::Ok);
    assert_eq!(back, cfg);
    assert!(unsafe { munet_network_param_count(net) } > 0);
    unsafe { munet_network_free(net) };
    unsafe { munet_network_free(ptr::null_mut()) };

    let mut desk = cfg;
    assert_eq!(unsafe { munet_network_config_desk(&mut desk) }, MunetStatus::Ok);
    assert_eq!((desk.stages, desk.input_extent, desk.width_num, desk.width_den), (3, 64, 1, 8));
}

#[test]
fn invalid_inputs_report_status_and_message() {
    let mut net = ptr::null_mut();
    let bad = MunetNetworkConfig { input_extent: 18, ..tiny_config() };
    assert_ne!(unsafe { munet_network_new(&bad, 0, &mut net) }, MunetStatus::Ok);
    assert!(net.is_null());
    assert!(!last_error().is_empty());

    let net = new_net(&tiny_config(), 2);
    let images = inputs(1, 16, 3);
    let mut scores = vec![0.0; 10];
    let st = unsafe { munet_network_predict(net, images.as_ptr(), images.len(), 1, 16, 16, scores.as_mut_ptr(), scores.len()) };
    assert_eq!(st, MunetStatus::InvalidArgument);
    let st = unsafe { munet_network_predict(net, images.as_ptr(), images.len(), 1, 8, 8, scores.as_mut_ptr(), scores.len()) };
    assert_ne!(st, MunetStatus::Ok);
    unsafe { munet_network_free(net) };

    let missing = CString::new("/nonexistent/dir/x.ckpt").unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { munet_network_load(missing.as_ptr(), &mut out) }, MunetStatus::Io);
    assert_eq!(unsafe { munet_network_load(ptr::null(), &mut out) }, MunetStatus::NullPointer);
}

#[test]
fn save_load_predict_is_bit_identical() {
    let dir = tempfile::tempdir().unwrap();
    let path = CString::new(dir.path().join("w.ckpt").to_str().unwrap()).unwrap();
    let net = new_net(&tiny_config(), 7);
    assert_eq!(unsafe { munet_network_save(net, path.as_ptr()) }, MunetStatus::Ok, "{}", last_error());
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { munet_network_load(path.as_ptr(), &mut loaded) }, MunetStatus::Ok, "{}", last_error());
    for seed in 0..3 {
        let x = inputs(2, 16, seed);
        let (a, b) = (predict(net, &x, 2, 16), predict(loaded, &x, 2, 16));
        assert!(a.iter().zip(&b).all(|(p, q)| p.to_bits() == q.to_bits()));
        assert!(a.iter().all(|v| v.is_finite()));
    }
    unsafe {
        munet_network_free(net);
        munet_network_free(loaded);
    }

    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    let mut out = ptr::null_mut();
    assert_eq!(unsafe { munet_network_load(junk.as_ptr(), &mut out) }, MunetStatus::Corrupt);
}

#[test]
fn metrics_and_permeation_through_the_abi() {
    let dims = [4usize, 4];
    let spacing = [1.0, 1.0];
    let mut truth = [0u16; 16];
    let mut pred = [0u16; 16];
    truth[..4].fill(1);
    pred[2..6].fill(1);
    let mut m = std::mem::MaybeUninit::<MunetClassMetrics>::uninit();
    let st = unsafe { munet_evaluate_class(pred.as_ptr(), truth.as_ptr(), dims.as_ptr(), spacing.as_ptr(), 2, 1, m.as_mut_ptr()) };
    assert_eq!(st, MunetStatus::Ok, "{}", last_error());
    let m = unsafe { m.assume_init() };
    assert_eq!((m.dsc.state, m.dsc.value), (MunetMetricState::Value, 50.0));
    assert_eq!(m.rvd.value, 0.0);

    let mut m2 = std::mem::MaybeUninit::<MunetClassMetrics>::uninit();
    let st = unsafe { munet_evaluate_class(pred.as_ptr(), truth.as_ptr(), dims.as_ptr(), spacing.as_ptr(), 2, 2, m2.as_mut_ptr()) };
    assert_eq!(st, MunetStatus::Ok);
    let m2 = unsafe { m2.assume_init() };
    assert_eq!(m2.assd.state, MunetMetricState::NotApplicable);
    assert!(m2.assd.value.is_nan());

    let bad_spacing = [1.0, 0.0];
    let mut m3 = std::mem::MaybeUninit::<MunetClassMetrics>::uninit();
    let st = unsafe { munet_evaluate_class(pred.as_ptr(), truth.as_ptr(), dims.as_ptr(), bad_spacing.as_ptr(), 2, 1, m3.as_mut_ptr()) };
    assert_eq!(st, MunetStatus::InvalidArgument);

    let b = [0.2, 0.4, 0.005, 0.0];
    let a = [0.1, 0.2, 0.0, 0.0];
    let obj = [1u8, 1, 0, 0];
    let mut rate = 0.0;
    assert_eq!(unsafe { munet_permeation_rate(a.as_ptr(), b.as_ptr(), obj.as_ptr(), 2, 2, false, &mut rate) }, MunetStatus::Ok);
    assert_eq!(rate, 0.5);
    let dark = [0u8, 0, 1, 1];
    assert_eq!(unsafe { munet_permeation_rate(a.as_ptr(), b.as_ptr(), dark.as_ptr(), 2, 2, false, &mut rate) }, MunetStatus::Ok);
    assert_eq!(rate, -0.5);
    let none = [0u8; 4];
    assert_eq!(unsafe { munet_permeation_rate(a.as_ptr(), b.as_ptr(), none.as_ptr(), 2, 2, false, &mut rate) }, MunetStatus::InvalidArgument);

    let hu = [-250.0, 0.0, 250.0];
    let mut out = [9.0; 3];
    assert_eq!(unsafe { munet_scale_intensity(hu.as_ptr(), out.as_mut_ptr(), 3, -250.0, 250.0) }, MunetStatus::Ok);
    assert_eq!(out, [0.0, 0.5, 1.0]);
    assert_eq!(unsafe { munet_scale_intensity(hu.as_ptr(), out.as_mut_ptr(), 3, 1.0, 1.0) }, MunetStatus::InvalidArgument);
}

#[test]
fn header_declares_every_export_and_compiles() {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(root.join("include/munet.h")).unwrap();
    let src = std::fs::read_to_string(root.join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = src
        .lines()
        .filter_map(|l| l.trim().strip_prefix("pub unsafe extern \"C\" fn ").or_else(|| l.trim().strip_prefix("pub extern \"C\" fn ")))
        .map(|l| l.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 12, "{exports:?}");
    for name in &exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }

    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping the header compile check");
        return;
    };
    let dir = tempfile::tempdir().unwrap();
    let c = dir.path().join("probe.c");
    std::fs::write(
        &c,
        "#include \"munet.h\"\n\
         int main(void) {\n\
           struct MunetNetworkConfig cfg;\n\
           struct MunetNetwork *net = 0;\n\
           if (munet_network_config_desk(&cfg) != MUNET_STATUS_OK) return 1;\n\
           if (munet_network_new(&cfg, 1, &net) != MUNET_STATUS_OK) return 2;\n\
           size_t n = munet_network_param_count(net);\n\
           munet_network_free(net);\n\
           return n == 0;\n\
         }\n",
    )
    .unwrap();
    let status = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(root.join("include"))
        .arg(&c)
        .status()
        .unwrap();
    assert!(status.success());
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok_and(|o| o.status.success()) {
            return Ok(cc);
        }
    }
    Err(())
}
