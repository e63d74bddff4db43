use std::ffi::{CStr, CString};
use std::path::Path;
use std::process::Command;
use std::ptr;

use dropclass_ffi::*;

fn last_error() -> String {
    let p = dc_last_error();
    assert!(!p.is_null(), "expected an error message");
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn small_model(seed: u64) -> *mut DcModel {
    let widths = [4usize, 4];
    let mut m = ptr::null_mut();
    assert_eq!(
        unsafe { dc_model_new(6, widths.as_ptr(), widths.len(), seed, &mut m) },
        DcStatus::Ok
    );
    m
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(dc_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn generate_train_predict_evaluate() {
    let mut train = ptr::null_mut();
    let mut test = ptr::null_mut();
    unsafe {
        assert_eq!(dc_dataset_generate(16, 12, 3, 0, &mut train), DcStatus::Ok);
        assert_eq!(dc_dataset_generate(16, 4, 3, 2, &mut test), DcStatus::Ok);
        assert_eq!(dc_dataset_len(train), 12);
        assert_eq!(dc_dataset_num_classes(train), 6);

        let model = small_model(1);
        let mut opts = dc_train_options_default(DcMode::Dropclass);
        opts.iterations = 5;
        opts.batch_size = 2;
        opts.learning_rate = 0.01;
        assert_eq!(
            dc_train(model, train, &opts),
            DcStatus::Ok,
            "{:?}",
            dc_last_error()
        );
        assert!(dc_last_error().is_null());

        let mut miou = -1.0;
        assert_eq!(dc_evaluate_miou(model, test, &mut miou), DcStatus::Ok);
        assert!((0.0..=1.0).contains(&miou));
        let mut corr = f64::NAN;
        assert_eq!(dc_weight_correlation(model, &mut corr), DcStatus::Ok);
        assert!(corr.is_finite());

        let image = vec![0.5f32; 8 * 8 * 3];
        let mut labels = vec![255u8; 64];
        assert_eq!(
            dc_model_predict(model, image.as_ptr(), 8, 8, labels.as_mut_ptr()),
            DcStatus::Ok
        );
        assert!(labels.iter().all(|&l| l < 6));

        dc_model_free(model);
        dc_dataset_free(train);
        dc_dataset_free(test);
    }
}

#[test]
fn training_through_the_abi_is_deterministic() {
    let mut train = ptr::null_mut();
    unsafe {
        assert_eq!(dc_dataset_generate(16, 8, 0, 0, &mut train), DcStatus::Ok);
        let (a, b) = (small_model(2), small_model(2));
        let mut opts = dc_train_options_default(DcMode::Baseline);
        opts.iterations = 4;
        opts.batch_size = 2;
        assert_eq!(dc_train(a, train, &opts), DcStatus::Ok);
        assert_eq!(dc_train(b, train, &opts), DcStatus::Ok);
        let dir = tempfile::tempdir().unwrap();
        let pa = CString::new(dir.path().join("a.dcm1").to_str().unwrap()).unwrap();
        let pb = CString::new(dir.path().join("b.dcm1").to_str().unwrap()).unwrap();
        assert_eq!(dc_model_save(a, pa.as_ptr()), DcStatus::Ok);
        assert_eq!(dc_model_save(b, pb.as_ptr()), DcStatus::Ok);
        assert_eq!(
            std::fs::read(dir.path().join("a.dcm1")).unwrap(),
            std::fs::read(dir.path().join("b.dcm1")).unwrap()
        );

        let mut loaded = ptr::null_mut();
        assert_eq!(dc_model_load(pa.as_ptr(), &mut loaded), DcStatus::Ok);
        assert_eq!(dc_model_num_classes(loaded), 6);
        for m in [a, b, loaded] {
            dc_model_free(m);
        }
        dc_dataset_free(train);
    }
}

#[test]
fn errors_map_to_codes_and_messages() {
    unsafe {
        let mut ds = ptr::null_mut();
        assert_eq!(
            dc_dataset_generate(16, 4, 0, 7, &mut ds),
            DcStatus::InvalidArgument
        );
        assert!(last_error().contains("split"));
        assert!(ds.is_null());

        assert_eq!(dc_dataset_generate(16, 0, 0, 0, &mut ds), DcStatus::Config);
        assert!(last_error().contains("datagen"));

        assert_eq!(
            dc_dataset_generate(16, 4, 0, 0, ptr::null_mut()),
            DcStatus::NullPointer
        );
        assert!(last_error().contains("out"));

        let missing = CString::new("/nonexistent/dir/model.dcm1").unwrap();
        let mut m = ptr::null_mut();
        assert_eq!(dc_model_load(missing.as_ptr(), &mut m), DcStatus::Io);
        assert!(m.is_null());

        let dir = tempfile::tempdir().unwrap();
        let junk = dir.path().join("junk.dcm1");
        std::fs::write(&junk, b"not a checkpoint").unwrap();
        let junk = CString::new(junk.to_str().unwrap()).unwrap();
        assert_eq!(dc_model_load(junk.as_ptr(), &mut m), DcStatus::Format);

        let widths = [0usize];
        assert_eq!(
            dc_model_new(6, widths.as_ptr(), 1, 0, &mut m),
            DcStatus::Config
        );
        assert_eq!(
            dc_model_new(6, ptr::null(), 1, 0, &mut m),
            DcStatus::NullPointer
        );

        let model = small_model(0);
        let image = [0.0f32; 3];
        let mut label = [0u8; 1];
        assert_eq!(
            dc_model_predict(model, image.as_ptr(), 0, 4, label.as_mut_ptr()),
            DcStatus::InvalidArgument
        );
        assert_eq!(
            dc_model_predict(ptr::null(), image.as_ptr(), 1, 1, label.as_mut_ptr()),
            DcStatus::NullPointer
        );
        let mut out = 0.0;
        assert_eq!(
            dc_evaluate_miou(model, ptr::null(), &mut out),
            DcStatus::NullPointer
        );
        dc_model_free(model);

        assert_eq!(dc_dataset_len(ptr::null()), 0);
        assert_eq!(dc_model_num_classes(ptr::null()), 0);
        dc_model_free(ptr::null_mut());
        dc_dataset_free(ptr::null_mut());
    }
}

#[test]
fn header_declares_the_api_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/dropclass.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for f in [
        "dc_last_error",
        "dc_version",
        "dc_dataset_generate",
        "dc_dataset_load",
        "dc_dataset_free",
        "dc_model_new",
        "dc_model_load",
        "dc_model_save",
        "dc_model_predict",
        "dc_model_free",
        "dc_train_options_default",
        "dc_train",
        "dc_evaluate_miou",
        "dc_weight_correlation",
    ] {
        assert!(text.contains(&format!("{f}(")), "header lacks {f}");
    }
    assert!(text.contains("typedef struct DcModel DcModel;"));

    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"dropclass.h\"\n\
         int main(void) {\n\
           DcModel *m = NULL;\n\
           size_t w[1] = {4};\n\
           DcStatus s = dc_model_new(6, w, 1, 0, &m);\n\
           DcTrainOptions o = dc_train_options_default(DC_MODE_DROPCLASS);\n\
           dc_model_free(m);\n\
           return s == DC_STATUS_OK && o.mode == DC_MODE_DROPCLASS ? 0 : 1;\n\
         }\n",
    )
    .unwrap();
    for compiler in [["cc", "-xc"], ["c++", "-xc++"]] {
        let status = Command::new(compiler[0])
            .args([compiler[1], "-fsyntax-only", "-Wall", "-Werror", "-I"])
            .arg(header.parent().unwrap())
            .arg(&src)
            .status();
        match status {
            Ok(s) => assert!(s.success(), "{} rejected the header", compiler[0]),
            Err(_) => eprintln!(
                "{} not available; header compile check skipped",
                compiler[0]
            ),
        }
    }
}
