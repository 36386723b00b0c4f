use std::ffi::{CStr, CString};
use std::process::Command;
use std::ptr;

use hgnet::data::{save_checkpoint, Checkpoint};
use hgnet::hourglass::{Network, NetworkConfig};
use hgnet_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(hg_last_error()) }.to_string_lossy().into_owned()
}

fn toy() -> *mut HgNetwork {
    let json = CString::new(NetworkConfig::toy().to_json()).unwrap();
    let mut net = ptr::null_mut();
    assert_eq!(unsafe { hg_network_from_json(json.as_ptr(), 3, &mut net) }, HgStatus::Ok);
    assert!(!net.is_null());
    net
}

#[test]
fn counts_match_the_engine() {
    let net = toy();
    let (mut p, mut m) = (0u64, 0u64);
    unsafe {
        assert_eq!(hg_network_param_count(net, &mut p), HgStatus::Ok);
        assert_eq!(hg_network_madds(net, &mut m), HgStatus::Ok);
    }
    let (n, store) = Network::with_seed::<f32>(&NetworkConfig::toy(), 3).unwrap();
    let r = hgnet::complexity::count_madds(&n, &store, n.input_shape(1)).unwrap();
    assert_eq!(p, r.total_params);
    assert_eq!(m, r.total_madds);
    unsafe { hg_network_free(net) };
}

#[test]
fn forward_shapes_and_length_checks() {
    let net = toy();
    let (mut r, mut hr, mut j) = (0usize, 0usize, 0usize);
    assert_eq!(unsafe { hg_network_dims(net, &mut r, &mut hr, &mut j) }, HgStatus::Ok);
    assert_eq!((r, hr, j), (64, 16, 16));
    let images = vec![0.25f32; 2 * 3 * r * r];
    let mut heat = vec![f32::NAN; 2 * j * hr * hr];
    let st = unsafe { hg_network_forward(net, images.as_ptr(), images.len(), 2, heat.as_mut_ptr(), heat.len()) };
    assert_eq!(st, HgStatus::Ok, "{}", last_error());
    assert!(heat.iter().all(|v| v.is_finite()));
    assert_eq!(&heat[..j * hr * hr], &heat[j * hr * hr..]);

    let st = unsafe { hg_network_forward(net, images.as_ptr(), images.len() - 1, 2, heat.as_mut_ptr(), heat.len()) };
    assert_eq!(st, HgStatus::Usage);
    assert!(last_error().contains("images"));
    let st = unsafe { hg_network_forward(net, images.as_ptr(), images.len(), 2, ptr::null_mut(), heat.len()) };
    assert_eq!(st, HgStatus::Null);
    unsafe { hg_network_free(net) };
}

#[test]
fn bad_inputs_map_to_status_codes() {
    let mut net = ptr::null_mut();
    let bad = CString::new("{\"num_stacks\": 0}").unwrap();
    unsafe {
        assert_eq!(hg_network_from_json(ptr::null(), 0, &mut net), HgStatus::Null);
        assert_eq!(hg_network_from_json(bad.as_ptr(), 0, &mut net), HgStatus::Config);
        assert!(net.is_null());
        assert!(!last_error().is_empty());
        let missing = CString::new("/nonexistent/model.hgfg").unwrap();
        assert_eq!(hg_network_load_checkpoint(missing.as_ptr(), &mut net), HgStatus::Io);
        let mut p = 0u64;
        assert_eq!(hg_network_param_count(ptr::null(), &mut p), HgStatus::Null);
        assert_eq!(last_error(), "network is null");
        hg_network_free(ptr::null_mut());
    }
}

#[test]
fn checkpoint_roundtrip_through_handle() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.hgfg");
    let cfg = NetworkConfig::toy();
    let (_, store) = Network::with_seed::<f32>(&cfg, 9).unwrap();
    save_checkpoint(&path, &Checkpoint::new(cfg.clone(), store)).unwrap();

    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut loaded = ptr::null_mut();
    assert_eq!(unsafe { hg_network_load_checkpoint(c.as_ptr(), &mut loaded) }, HgStatus::Ok);
    let json = CString::new(cfg.to_json()).unwrap();
    let mut fresh = ptr::null_mut();
    assert_eq!(unsafe { hg_network_from_json(json.as_ptr(), 9, &mut fresh) }, HgStatus::Ok);

    let images: Vec<f32> = (0..3 * 64 * 64).map(|i| ((i % 17) as f32 - 8.0) / 8.0).collect();
    let mut a = vec![0f32; 16 * 16 * 16];
    let mut b = vec![0f32; 16 * 16 * 16];
    unsafe {
        assert_eq!(hg_network_forward(loaded, images.as_ptr(), images.len(), 1, a.as_mut_ptr(), a.len()), HgStatus::Ok);
        assert_eq!(hg_network_forward(fresh, images.as_ptr(), images.len(), 1, b.as_mut_ptr(), b.len()), HgStatus::Ok);
        hg_network_free(loaded);
        hg_network_free(fresh);
    }
    assert_eq!(a, b);
}

#[test]
fn pckh_and_tradeoff() {
    let gt = vec![10.0f64; 16 * 2];
    let mut pred = gt.clone();
    pred[0] += 5.0;
    pred[2] += 5.0 + 1e-9;
    let mut visible = vec![1u8; 16];
    visible[15] = 0;
    let head = [10.0f64];
    let mut acc = 0.0;
    let st = unsafe { hg_pckh(pred.as_ptr(), gt.as_ptr(), visible.as_ptr(), head.as_ptr(), 1, 0.5, &mut acc) };
    assert_eq!(st, HgStatus::Ok);
    // 13 scored joints (pelvis and thorax excluded, l_wrist hidden); r_knee misses.
    assert_eq!(acc, 12.0 / 13.0);
    let zero = [0.0f64];
    let st = unsafe { hg_pckh(pred.as_ptr(), gt.as_ptr(), visible.as_ptr(), zero.as_ptr(), 1, 0.5, &mut acc) };
    assert_eq!(st, HgStatus::Data);

    let base = HgModelStats {
        pckh: 85.0,
        params: 6.7e6,
        madds: 2.6e9,
    };
    let cand = HgModelStats {
        pckh: 84.0,
        params: 3.35e6,
        madds: 1.3e9,
    };
    let mut v = f64::NAN;
    unsafe {
        assert_eq!(hg_tradeoff(&base, &base, [1.0, 0.5, 0.5].as_ptr(), &mut v), HgStatus::Ok);
        assert_eq!(v, 0.0);
        assert_eq!(hg_tradeoff(&base, &cand, [1.0, 0.1, 0.0].as_ptr(), &mut v), HgStatus::Ok);
        assert!((v - 4.0).abs() < 1e-9, "{v}");
        assert_eq!(hg_tradeoff(&base, &cand, [-1.0, 0.0, 0.0].as_ptr(), &mut v), HgStatus::Usage);
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(hg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export_and_compiles() {
    let dir = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let header = std::fs::read_to_string(dir.join("include/hgnet.h")).unwrap();
    let src = std::fs::read_to_string(dir.join("src/lib.rs")).unwrap();
    for line in src.lines() {
        if let Some(rest) = line.split("extern \"C\" fn ").nth(1) {
            let name = rest.split('(').next().unwrap();
            assert!(header.contains(&format!("{name}(")), "{name} missing from header");
        }
    }
    for compiler in ["cc", "c++"] {
        let lang = if compiler == "cc" { "c" } else { "c++" };
        let Ok(out) = Command::new(compiler)
            .args(["-x", lang, "-fsyntax-only", "-Wall", "-Werror"])
            .arg(dir.join("include/hgnet.h"))
            .output()
        else {
            continue;
        };
        assert!(out.status.success(), "{compiler}: {}", String::from_utf8_lossy(&out.stderr));
    }
}
