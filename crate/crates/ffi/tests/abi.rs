use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use rmfnet_ffi::*;

fn last_error() -> String {
    let p = rmf_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn ev(t: u64, x: u16, y: u16, p: i8) -> RmfEvent {
    RmfEvent { t, x, y, p }
}

unsafe fn stream_with(w: usize, h: usize, events: &[RmfEvent]) -> *mut RmfStream {
    let mut s = ptr::null_mut();
    assert_eq!(rmf_stream_new(w, h, &mut s), RmfStatus::Ok);
    assert_eq!(rmf_stream_push(s, events.as_ptr(), events.len()), RmfStatus::Ok);
    s
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(rmf_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn push_len_get_and_stack() {
    unsafe {
        let s = stream_with(4, 2, &[ev(0, 0, 0, 1), ev(5, 3, 1, -1), ev(5, 0, 0, 1)]);
        assert_eq!(rmf_stream_len(s), 3);
        let (mut w, mut h) = (0, 0);
        assert_eq!(rmf_stream_size(s, &mut w, &mut h), RmfStatus::Ok);
        assert_eq!((w, h), (4, 2));
        let mut e = ev(0, 0, 0, 0);
        assert_eq!(rmf_stream_get(s, 1, &mut e), RmfStatus::Ok);
        assert_eq!(e, ev(5, 3, 1, -1));
        assert_eq!(rmf_stream_get(s, 3, &mut e), RmfStatus::InvalidArgument);

        let mut pos = [0u32; 8];
        let mut neg = [0u32; 8];
        let mut all = [0u32; 8];
        assert_eq!(rmf_stream_stack(s, 1, pos.as_mut_ptr(), 8), RmfStatus::Ok);
        assert_eq!(rmf_stream_stack(s, -1, neg.as_mut_ptr(), 8), RmfStatus::Ok);
        assert_eq!(rmf_stream_stack(s, 0, all.as_mut_ptr(), 8), RmfStatus::Ok);
        assert_eq!(pos, [2, 0, 0, 0, 0, 0, 0, 0]);
        assert_eq!(neg, [0, 0, 0, 0, 0, 0, 0, 1]);
        for i in 0..8 {
            assert_eq!(all[i], pos[i] + neg[i]);
        }
        assert_eq!(rmf_stream_stack(s, 0, all.as_mut_ptr(), 7), RmfStatus::BufferTooSmall);
        assert_eq!(rmf_stream_stack(s, 2, all.as_mut_ptr(), 8), RmfStatus::InvalidArgument);
        rmf_stream_free(s);
    }
}

#[test]
fn rejected_push_keeps_the_stream_unchanged() {
    unsafe {
        let s = stream_with(4, 4, &[ev(10, 1, 1, 1)]);
        let batch = [ev(11, 0, 0, 1), ev(9, 0, 0, 1)];
        assert_eq!(rmf_stream_push(s, batch.as_ptr(), 2), RmfStatus::Data);
        assert!(last_error().contains("precedes"));
        assert_eq!(rmf_stream_len(s), 1);
        let bad = [ev(12, 4, 0, 1)];
        assert_eq!(rmf_stream_push(s, bad.as_ptr(), 1), RmfStatus::Data);
        let zero = [ev(12, 0, 0, 0)];
        assert_eq!(rmf_stream_push(s, zero.as_ptr(), 1), RmfStatus::Data);
        assert_eq!(rmf_stream_len(s), 1);
        assert_eq!(rmf_stream_push(s, ptr::null(), 0), RmfStatus::Ok);
        rmf_stream_free(s);
    }
}

#[test]
fn null_arguments_are_reported_not_dereferenced() {
    unsafe {
        assert_eq!(rmf_stream_new(4, 4, ptr::null_mut()), RmfStatus::NullPointer);
        assert_eq!(rmf_stream_push(ptr::null_mut(), ptr::null(), 1), RmfStatus::NullPointer);
        assert_eq!(rmf_stream_len(ptr::null()), 0);
        let mut out = ptr::null_mut();
        assert_eq!(rmf_stream_read(ptr::null(), &mut out), RmfStatus::NullPointer);
        assert!(out.is_null());
        rmf_stream_free(ptr::null_mut());
        rmf_model_free(ptr::null_mut());
        rmf_model_reset(ptr::null_mut());
    }
}

#[test]
fn invalid_geometry_is_an_argument_error() {
    let mut s = ptr::null_mut();
    unsafe {
        let status = rmf_stream_new(0, 4, &mut s);
        assert_ne!(status, RmfStatus::Ok);
        assert!(s.is_null());
        assert!(!last_error().is_empty());
    }
}

#[test]
fn downsample_and_augment_match_the_core() {
    unsafe {
        let events: Vec<RmfEvent> = (0..40).map(|i| ev(i * 3, (i % 8) as u16, (i / 8) as u16, if i % 3 == 0 { -1 } else { 1 })).collect();
        let s = stream_with(8, 8, &events);
        let mut lr = ptr::null_mut();
        assert_eq!(rmf_stream_downsample(s, 2, &mut lr), RmfStatus::Ok);
        let (mut w, mut h) = (0, 0);
        rmf_stream_size(lr, &mut w, &mut h);
        assert_eq!((w, h, rmf_stream_len(lr)), (4, 4, 40));
        let mut e = ev(0, 0, 0, 0);
        rmf_stream_get(lr, 9, &mut e);
        assert_eq!(e, ev(27, 0, 0, -1));

        let flip = CString::new("polarity_flip").unwrap();
        let (mut a, mut b) = (ptr::null_mut(), ptr::null_mut());
        assert_eq!(rmf_stream_augment(s, flip.as_ptr(), 1, &mut a), RmfStatus::Ok);
        assert_eq!(rmf_stream_augment(a, flip.as_ptr(), 1, &mut b), RmfStatus::Ok);
        for i in 0..40 {
            let (mut x, mut y, mut z) = (e, e, e);
            rmf_stream_get(s, i, &mut x);
            rmf_stream_get(a, i, &mut y);
            rmf_stream_get(b, i, &mut z);
            assert_eq!(x, z);
            assert_eq!(x.p, -y.p);
        }
        let bogus = CString::new("no_such_method").unwrap();
        let mut c = ptr::null_mut();
        assert_ne!(rmf_stream_augment(s, bogus.as_ptr(), 1, &mut c), RmfStatus::Ok);
        assert!(c.is_null());
        for h in [s, lr, a, b] {
            rmf_stream_free(h);
        }
    }
}

#[test]
fn file_round_trip_in_both_formats() {
    let dir = tempfile::tempdir().unwrap();
    unsafe {
        let s = stream_with(6, 3, &[ev(1, 5, 2, 1), ev(2, 0, 1, -1)]);
        for (name, binary) in [("a.txt", 0), ("a.evs", 1)] {
            let p = cpath(&dir.path().join(name));
            assert_eq!(rmf_stream_write(s, p.as_ptr(), binary), RmfStatus::Ok);
            let mut back = ptr::null_mut();
            assert_eq!(rmf_stream_read(p.as_ptr(), &mut back), RmfStatus::Ok);
            assert_eq!(rmf_stream_len(back), 2);
            let mut e = ev(0, 0, 0, 0);
            rmf_stream_get(back, 0, &mut e);
            assert_eq!(e, ev(1, 5, 2, 1));
            rmf_stream_free(back);
        }
        let missing = cpath(&dir.path().join("none"));
        let mut out = ptr::null_mut();
        assert_eq!(rmf_stream_read(missing.as_ptr(), &mut out), RmfStatus::Data);
        rmf_stream_free(s);
    }
}

#[test]
fn model_load_infer_reset() {
    use rmfnet::model::{Model, ModelConfig};
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let cfg = ModelConfig { channels: 8, num_blocks: 1, scale: 2, ..ModelConfig::default() };
    let m = Model::<f32>::new(cfg, 3).unwrap();
    m.save(&ckpt).unwrap();

    unsafe {
        let mut missing = ptr::null_mut();
        let none = cpath(&dir.path().join("absent.ckpt"));
        assert_eq!(rmf_model_load(none.as_ptr(), &mut missing), RmfStatus::CheckpointNotFound);

        let mut model = ptr::null_mut();
        assert_eq!(rmf_model_load(cpath(&ckpt).as_ptr(), &mut model), RmfStatus::Ok);
        assert_eq!(rmf_model_scale(model), 2);
        let win = stream_with(4, 4, &[ev(0, 1, 1, 1), ev(3, 2, 2, -1), ev(7, 3, 0, 1)]);
        let mut first = vec![0f32; 2 * 8 * 8];
        let mut second = first.clone();
        let mut again = first.clone();
        assert_eq!(rmf_model_infer_window(model, win, first.as_mut_ptr(), first.len()), RmfStatus::Ok);
        assert!(first.iter().all(|v| v.is_finite()));
        assert_eq!(rmf_model_infer_window(model, win, second.as_mut_ptr(), second.len()), RmfStatus::Ok);
        rmf_model_reset(model);
        assert_eq!(rmf_model_infer_window(model, win, again.as_mut_ptr(), again.len()), RmfStatus::Ok);
        assert_eq!(first, again, "reset restores the initial recurrent state");
        assert_eq!(rmf_model_infer_window(model, win, again.as_mut_ptr(), 10), RmfStatus::BufferTooSmall);

        let wrong = stream_with(6, 6, &[ev(0, 1, 1, 1)]);
        let mut buf = vec![0f32; 2 * 12 * 12];
        assert_eq!(rmf_model_infer_window(model, wrong, buf.as_mut_ptr(), buf.len()), RmfStatus::Data);
        rmf_stream_free(wrong);
        rmf_stream_free(win);
        rmf_model_free(model);
    }
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/rmfnet.h")).unwrap();
    for name in [
        "rmf_version", "rmf_last_error", "rmf_stream_new", "rmf_stream_read", "rmf_stream_write", "rmf_stream_push",
        "rmf_stream_len", "rmf_stream_size", "rmf_stream_get", "rmf_stream_downsample", "rmf_stream_augment",
        "rmf_stream_stack", "rmf_stream_free", "rmf_model_load", "rmf_model_scale", "rmf_model_infer_window",
        "rmf_model_reset", "rmf_model_free", "typedef struct RmfStream RmfStream", "RMF_STATUS_CHECKPOINT_NOT_FOUND",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}

#[test]
fn header_compiles_as_c() {
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("t.c");
    std::fs::write(
        &src,
        "#include \"rmfnet.h\"\nint main(void) { RmfStream *s = 0; RmfStatus st = rmf_stream_new(4, 4, &s); rmf_stream_free(s); return (int)st; }\n",
    )
    .unwrap();
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", concat!(env!("CARGO_MANIFEST_DIR"), "/include")])
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    ["cc", "gcc", "clang"]
        .into_iter()
        .find(|c| std::process::Command::new(c).arg("--version").output().is_ok_and(|o| o.status.success()))
        .ok_or(())
}
