//! Drives the C entry points the way a foreign caller would: raw pointers,
//! status codes, and `imtg_last_error` text.

use std::ffi::{CStr, CString};
use std::ptr;

use imontage::config::RunConfig;
use imontage::eval::{ip_score, masked_embed, DefaultExtractor};
use imontage::model::{init_params, param_count};
use imontage::pack::Image;
use imontage::train::{save_checkpoint, stream_rng, Checkpoint, RngState, INIT_STREAM};
use imontage_ffi::*;

const TINY_CFG: &str = r#"{
    "seed": 11,
    "model": {
        "dim": 32, "heads": 2, "depth_dual": 1, "depth_single": 1,
        "mlp_ratio": 2, "patch": 8, "l_text": 24, "freq_dim": 16,
        "rope": { "head_dim": 16, "split": [4, 6, 6] }
    },
    "sampler": { "steps": 2, "cfg_scale": 2.0 }
}"#;

fn cfg() -> CString {
    CString::new(TINY_CFG).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(imtg_last_error()) }
        .to_str()
        .unwrap()
        .to_string()
}

fn test_image(h: usize, w: usize, phase: f32) -> Image {
    let data = (0..h * w * 3)
        .map(|i| ((i as f32 * 0.37 + phase).sin() * 0.5 + 0.5).clamp(0.0, 1.0))
        .collect();
    Image::new(h, w, data)
}

fn view(img: &Image) -> ImtgImageView {
    ImtgImageView {
        data: img.data.as_ptr(),
        h: img.h,
        w: img.w,
    }
}

fn new_model(config: &CString) -> *mut ImtgModel {
    let mut model = ptr::null_mut();
    let st = unsafe { imtg_model_new(config.as_ptr(), &mut model) };
    assert_eq!(st, ImtgStatus::Ok, "{}", last_error());
    assert!(!model.is_null());
    model
}

#[test]
fn the_version_string_matches_the_crate() {
    let v = unsafe { CStr::from_ptr(imtg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn null_and_malformed_arguments_fail_without_crashing() {
    let mut model = ptr::null_mut();
    unsafe {
        assert_eq!(
            imtg_model_new(ptr::null(), &mut model),
            ImtgStatus::NullArgument
        );
        assert!(last_error().contains("config_json"));

        let c = cfg();
        assert_eq!(
            imtg_model_new(c.as_ptr(), ptr::null_mut()),
            ImtgStatus::NullArgument
        );

        let bad_utf8 = [0xffu8, 0xfe, 0x00];
        assert_eq!(
            imtg_model_new(bad_utf8.as_ptr() as *const _, &mut model),
            ImtgStatus::InvalidUtf8
        );

        let bad_json = CString::new("{\"no_such_key\": 1}").unwrap();
        assert_eq!(
            imtg_model_new(bad_json.as_ptr(), &mut model),
            ImtgStatus::Config
        );
        assert!(last_error().contains("no_such_key"), "{}", last_error());

        let bad_value = CString::new("{\"sampler\": {\"steps\": 0}}").unwrap();
        assert_eq!(
            imtg_model_new(bad_value.as_ptr(), &mut model),
            ImtgStatus::Config
        );
    }
}

#[test]
fn a_fresh_model_reports_the_training_time_parameter_count() {
    let run: RunConfig = serde_json::from_str(TINY_CFG).unwrap();
    let expected = param_count(&init_params::<f32, _>(
        &run.model,
        &mut stream_rng(run.seed, INIT_STREAM),
    ));

    let c = cfg();
    let model = new_model(&c);
    unsafe {
        assert_eq!(imtg_model_param_count(model), expected as u64);
        assert_eq!(imtg_model_step(model), 0);
        imtg_model_free(model);
    }
    unsafe {
        assert_eq!(imtg_model_param_count(ptr::null()), 0);
        assert_eq!(imtg_model_step(ptr::null()), 0);
    }
}

#[test]
fn sampling_is_deterministic_and_frames_are_viewable() {
    let c = cfg();
    let model = new_model(&c);
    let r = test_image(32, 32, 0.0);
    let refs = [view(&r)];
    let instruction = CString::new("show the scene").unwrap();

    let run = |seed: u64| -> Vec<Vec<f32>> {
        let mut frames = ptr::null_mut();
        let st = unsafe {
            imtg_sample(
                model,
                refs.as_ptr(),
                1,
                instruction.as_ptr(),
                2,
                32,
                32,
                seed,
                &mut frames,
            )
        };
        assert_eq!(st, ImtgStatus::Ok, "{}", last_error());
        let n = unsafe { imtg_frames_len(frames) };
        assert_eq!(n, 2);
        let mut out = Vec::new();
        for i in 0..n {
            let mut v = ImtgImageView {
                data: ptr::null(),
                h: 0,
                w: 0,
            };
            assert_eq!(
                unsafe { imtg_frames_view(frames, i, &mut v) },
                ImtgStatus::Ok
            );
            assert_eq!((v.h, v.w), (32, 32));
            out.push(unsafe { std::slice::from_raw_parts(v.data, v.h * v.w * 3) }.to_vec());
        }
        let mut v = ImtgImageView {
            data: ptr::null(),
            h: 0,
            w: 0,
        };
        assert_eq!(
            unsafe { imtg_frames_view(frames, n, &mut v) },
            ImtgStatus::InvalidArgument
        );
        unsafe { imtg_frames_free(frames) };
        out
    };

    let first = run(5);
    let again = run(5);
    let other = run(6);
    assert_eq!(first, again, "same seed must reproduce bit for bit");
    assert_ne!(first, other, "a different seed must move the noise");
    unsafe { imtg_model_free(model) };
}

#[test]
fn sampling_rejects_impossible_requests() {
    let c = cfg();
    let model = new_model(&c);
    let r = test_image(32, 32, 0.0);
    let refs = [view(&r)];
    let instruction = CString::new("show the scene").unwrap();
    let mut frames = ptr::null_mut();
    unsafe {
        assert_eq!(
            imtg_sample(
                model,
                refs.as_ptr(),
                0,
                instruction.as_ptr(),
                1,
                32,
                32,
                0,
                &mut frames
            ),
            ImtgStatus::InvalidArgument
        );
        assert_eq!(
            imtg_sample(
                model,
                refs.as_ptr(),
                1,
                instruction.as_ptr(),
                0,
                32,
                32,
                0,
                &mut frames
            ),
            ImtgStatus::InvalidArgument
        );
        // 30 is not a multiple of the patch size 8.
        assert_eq!(
            imtg_sample(
                model,
                refs.as_ptr(),
                1,
                instruction.as_ptr(),
                1,
                30,
                32,
                0,
                &mut frames
            ),
            ImtgStatus::InvalidArgument
        );
        assert!(last_error().contains("patch"), "{}", last_error());
        assert_eq!(
            imtg_sample(
                ptr::null(),
                refs.as_ptr(),
                1,
                instruction.as_ptr(),
                1,
                32,
                32,
                0,
                &mut frames
            ),
            ImtgStatus::NullArgument
        );
        imtg_model_free(model);
    }
}

#[test]
fn checkpoints_round_trip_and_reject_other_configs() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("checkpoint.imtg");
    let run: RunConfig = serde_json::from_str(TINY_CFG).unwrap();
    let params = init_params::<f32, _>(&run.model, &mut stream_rng(run.seed, INIT_STREAM));
    let cp = Checkpoint {
        step: 7,
        params,
        rng: RngState::capture(run.seed, &stream_rng(run.seed, INIT_STREAM)),
        moments: None,
    };
    save_checkpoint(&path, &cp, &run.digest()).unwrap();

    let c = cfg();
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    let mut model = ptr::null_mut();
    unsafe {
        let st = imtg_model_load(c.as_ptr(), c_path.as_ptr(), &mut model);
        assert_eq!(st, ImtgStatus::Ok, "{}", last_error());
        assert_eq!(imtg_model_step(model), 7);
        imtg_model_free(model);

        // Any config drift (here: the seed) orphans the checkpoint.
        let other = CString::new(TINY_CFG.replace("\"seed\": 11", "\"seed\": 12")).unwrap();
        assert_eq!(
            imtg_model_load(other.as_ptr(), c_path.as_ptr(), &mut model),
            ImtgStatus::Config
        );
        assert!(last_error().contains("config"), "{}", last_error());

        let missing = CString::new(dir.path().join("gone.imtg").to_str().unwrap()).unwrap();
        assert_eq!(
            imtg_model_load(c.as_ptr(), missing.as_ptr(), &mut model),
            ImtgStatus::Io
        );

        let garbled = dir.path().join("garbled.imtg");
        std::fs::write(&garbled, b"IMTGnot a checkpoint").unwrap();
        let c_garbled = CString::new(garbled.to_str().unwrap()).unwrap();
        assert_eq!(
            imtg_model_load(c.as_ptr(), c_garbled.as_ptr(), &mut model),
            ImtgStatus::Runtime
        );
    }
}

#[test]
fn metric_entry_points_agree_with_the_library() {
    let a = test_image(16, 24, 0.0);
    let b = test_image(16, 24, 1.3);
    let c = test_image(16, 24, 2.6);
    let views = [view(&a), view(&b), view(&c)];

    let embed = |img: &Image| {
        masked_embed(img, &vec![true; img.h * img.w], &DefaultExtractor).unwrap()
    };
    let gen_embs: Vec<_> = [&a, &b].iter().map(|i| embed(i)).collect();
    let ref_embs = vec![embed(&c)];

    unsafe {
        let mut ip = 0.0;
        assert_eq!(
            imtg_ip_score(views.as_ptr(), 2, views.as_ptr().add(2), 1, &mut ip),
            ImtgStatus::Ok
        );
        assert_eq!(ip, ip_score(&gen_embs, &ref_embs).unwrap());

        let mut same = 0.0;
        assert_eq!(
            imtg_ip_score(views.as_ptr(), 1, views.as_ptr(), 1, &mut same),
            ImtgStatus::Ok
        );
        assert_eq!(same, 1.0, "a set against itself scores exactly one");

        let mut tc = 0.0;
        assert_eq!(
            imtg_tc_score(views.as_ptr(), 3, &mut tc),
            ImtgStatus::Ok
        );
        assert!((-1.0..=1.0).contains(&tc));
        assert_eq!(
            imtg_tc_score(views.as_ptr(), 1, &mut tc),
            ImtgStatus::InvalidArgument
        );
        assert!(last_error().contains("two"), "{}", last_error());

        let mut p = 0.0;
        assert_eq!(
            imtg_psnr(&views[0], &views[0], &mut p),
            ImtgStatus::Ok
        );
        assert!(p.is_infinite() && p > 0.0);

        let mut m = -1.0;
        assert_eq!(
            imtg_motion_score(&views[0], &views[0], 8, 7, &mut m),
            ImtgStatus::Ok
        );
        assert_eq!(m, 0.0);
        assert_eq!(
            imtg_motion_score(&views[0], &views[0], 0, 7, &mut m),
            ImtgStatus::InvalidArgument
        );

        let shaped = test_image(8, 8, 0.5);
        assert_eq!(
            imtg_psnr(&views[0], &view(&shaped), &mut p),
            ImtgStatus::InvalidArgument
        );

        let empty = ImtgImageView {
            data: views[0].data,
            h: 0,
            w: 16,
        };
        assert_eq!(
            imtg_psnr(&empty, &views[0], &mut p),
            ImtgStatus::InvalidArgument
        );
        let null_data = ImtgImageView {
            data: ptr::null(),
            h: 16,
            w: 24,
        };
        assert_eq!(
            imtg_psnr(&null_data, &views[0], &mut p),
            ImtgStatus::NullArgument
        );
    }
}

#[test]
fn freeing_null_handles_is_a_no_op() {
    unsafe {
        imtg_model_free(ptr::null_mut());
        imtg_frames_free(ptr::null_mut());
        assert_eq!(imtg_frames_len(ptr::null()), 0);
    }
}

#[test]
fn the_generated_header_declares_the_whole_surface() {
    let header = std::fs::read_to_string(
        std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("include/imontage.h"),
    )
    .expect("the build script writes include/imontage.h");
    for symbol in [
        "imtg_version",
        "imtg_last_error",
        "imtg_model_new",
        "imtg_model_load",
        "imtg_model_param_count",
        "imtg_model_step",
        "imtg_model_free",
        "imtg_sample",
        "imtg_frames_len",
        "imtg_frames_view",
        "imtg_frames_free",
        "imtg_ip_score",
        "imtg_tc_score",
        "imtg_psnr",
        "imtg_motion_score",
        "typedef struct ImtgModel ImtgModel",
        "typedef struct ImtgFrames ImtgFrames",
        "IMTG_STATUS_OK = 0",
        "IMTG_STATUS_RUNTIME = 6",
    ] {
        assert!(header.contains(symbol), "header is missing {symbol:?}");
    }
}
