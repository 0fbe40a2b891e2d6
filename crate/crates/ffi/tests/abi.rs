use std::ffi::{CStr, CString};
use std::ptr;

use sltrain::harness::capture;
use sltrain::kernels::{Matrix, SeededRng};
use sltrain::model::{Model, ModelConfig, ParamMode};
use sltrain::sl_layer::SlLinear;
use sltrain_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(slt_last_error()) }.to_string_lossy().into_owned()
}

fn new_layer(d: usize, p: usize, r: usize, seed: u64) -> *mut SltLayer {
    let mut l = ptr::null_mut();
    assert_eq!(unsafe { slt_layer_new(d, p, r, 0.2, 8.0, seed, &mut l) }, SltStatus::Ok);
    l
}

#[test]
fn layer_matches_core() {
    let (d, p, r, n) = (6, 5, 2, 3);
    let l = new_layer(d, p, r, 9);
    let core = SlLinear::init(d, p, r, 0.2, 8.0, &mut SeededRng::new(9)).unwrap();
    let (mut dd, mut pp, mut rr, mut nnz) = (0, 0, 0, 0);
    assert_eq!(unsafe { slt_layer_shape(l, &mut dd, &mut pp, &mut rr, &mut nnz) }, SltStatus::Ok);
    assert_eq!((dd, pp, rr, nnz), (d, p, r, 6));

    let mut rng = SeededRng::new(1);
    let x: Vec<f64> = (0..p * n).map(|_| rng.normal()).collect();
    let dz: Vec<f64> = (0..d * n).map(|_| rng.normal()).collect();
    let mut z = vec![0.0; d * n];
    assert_eq!(unsafe { slt_layer_forward(l, x.as_ptr(), n, z.as_mut_ptr()) }, SltStatus::Ok);
    let xm = Matrix::new(p, n, x.clone()).unwrap();
    assert_eq!(z, core.forward(&xm).unwrap().into_vec());

    let (mut db, mut da, mut dv, mut dx) = (vec![0.0; d * r], vec![0.0; r * p], vec![0.0; nnz], vec![0.0; p * n]);
    let s = unsafe {
        slt_layer_backward(l, x.as_ptr(), dz.as_ptr(), n, db.as_mut_ptr(), da.as_mut_ptr(), dv.as_mut_ptr(), dx.as_mut_ptr())
    };
    assert_eq!(s, SltStatus::Ok);
    let g = core.backward(&xm, &Matrix::new(d, n, dz).unwrap()).unwrap();
    assert_eq!(db, g.db.into_vec());
    assert_eq!(da, g.da.into_vec());
    assert_eq!(dv, g.dv);
    assert_eq!(dx, g.dx.into_vec());

    let mut w = vec![0.0; d * p];
    assert_eq!(unsafe { slt_layer_densify(l, w.as_mut_ptr()) }, SltStatus::Ok);
    assert_eq!(w, core.densify().into_vec());
    unsafe { slt_layer_free(l) };
}

#[test]
fn errors_set_status_and_message() {
    let mut l = ptr::null_mut();
    assert_eq!(unsafe { slt_layer_new(4, 4, 4, 0.2, 8.0, 0, &mut l) }, SltStatus::InvalidArgument);
    assert!(l.is_null());
    assert!(last_error().contains("rank"));
    assert_eq!(unsafe { slt_layer_new(4, 4, 1, 0.2, 8.0, 0, ptr::null_mut()) }, SltStatus::NullPointer);

    let l = new_layer(4, 4, 1, 0);
    assert!(last_error().is_empty());
    let x = [0.0; 4];
    assert_eq!(unsafe { slt_layer_forward(l, x.as_ptr(), 1, ptr::null_mut()) }, SltStatus::NullPointer);
    assert_eq!(unsafe { slt_layer_forward(ptr::null(), x.as_ptr(), 1, ptr::null_mut()) }, SltStatus::NullPointer);
    let bad = [f64::NAN; 4];
    let mut z = [0.0; 4];
    assert_eq!(unsafe { slt_layer_forward(l, bad.as_ptr(), 1, z.as_mut_ptr()) }, SltStatus::NumericalFailure);
    unsafe {
        slt_layer_free(l);
        slt_layer_free(ptr::null_mut());
    }
    assert!(!unsafe { CStr::from_ptr(slt_version()) }.to_bytes().is_empty());
}

#[test]
fn memory_estimates() {
    let counts = SltMemoryBreakdown {
        bf16_param_count: 43_540_000,
        int64_count: 760_000,
        trainable_count: 43_540_000,
        extra_optimizer_bf16: 0,
    };
    let mut r = SltMemoryReport::default();
    assert_eq!(unsafe { slt_estimate_memory(&counts, &mut r) }, SltStatus::Ok);
    assert_eq!((r.param_centi_g, r.optimizer_centi_g, r.total_centi_g), (9, 17, 26));
    assert_eq!(r.param_bytes, 2 * 43_540_000 + 8 * 760_000);

    let shapes = [512usize, 512, 1376, 512];
    let mut b = SltMemoryBreakdown::default();
    assert_eq!(unsafe { slt_count_sltrain(shapes.as_ptr(), 2, 1000, 8, 0.03, &mut b) }, SltStatus::Ok);
    let sparse = 7864 + 21135;
    assert_eq!(b.int64_count, sparse);
    assert_eq!(b.bf16_param_count, 1000 + 8 * (1024 + 1888) + sparse);
    assert_eq!(unsafe { slt_count_sltrain(shapes.as_ptr(), 2, 1000, 8, 0.0, &mut b) }, SltStatus::InvalidArgument);
}

#[test]
fn model_from_checkpoint() {
    let mut cfg = ModelConfig::micro(ParamMode::Sltrain);
    cfg.n_layers = 1;
    let model = Model::init(&cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    capture(&model, None, None).save(&path).unwrap();

    let c = CString::new(path.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { slt_model_load(c.as_ptr(), &mut h) }, SltStatus::Ok);
    let (mut vocab, mut trainable) = (0, 0);
    assert_eq!(unsafe { slt_model_info(h, &mut vocab, &mut trainable) }, SltStatus::Ok);
    assert_eq!((vocab, trainable), (256, model.trainable_count()));

    let tokens: Vec<u32> = b"the quick brown fox jumps over the lazy dog".iter().map(|&b| b as u32).collect();
    let mut ppl = 0.0;
    assert_eq!(unsafe { slt_model_perplexity(h, tokens.as_ptr(), tokens.len(), &mut ppl) }, SltStatus::Ok);
    assert_eq!(ppl, model.perplexity(&tokens).unwrap());
    let bad = [1u32, 999];
    assert_eq!(unsafe { slt_model_perplexity(h, bad.as_ptr(), 2, &mut ppl) }, SltStatus::InvalidArgument);
    unsafe { slt_model_free(h) };

    let missing = CString::new(dir.path().join("nope.bin").to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    assert_eq!(unsafe { slt_model_load(missing.as_ptr(), &mut h) }, SltStatus::Io);
    std::fs::write(&path, b"garbage").unwrap();
    assert_eq!(unsafe { slt_model_load(c.as_ptr(), &mut h) }, SltStatus::Format);
    assert!(h.is_null());
}

#[test]
fn header_compiles_as_c() {
    let header = concat!(env!("CARGO_MANIFEST_DIR"), "/include/sltrain.h");
    let text = std::fs::read_to_string(header).unwrap();
    for name in ["slt_layer_new", "slt_model_perplexity", "slt_estimate_memory", "SLT_STATUS_NUMERICAL_FAILURE"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(cc) = which_cc() else { return };
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("check.c");
    std::fs::write(
        &src,
        "#include \"sltrain.h\"\nint main(void) { SltLayer *l = 0; SltStatus s = slt_layer_new(4, 4, 1, 0.2, 2.0, 0, &l); return (int)s; }\n",
    )
    .unwrap();
    let inc = concat!(env!("CARGO_MANIFEST_DIR"), "/include");
    let out = std::process::Command::new(cc)
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I", inc])
        .arg(&src)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn which_cc() -> Result<&'static str, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if std::process::Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc);
        }
    }
    Err(())
}
