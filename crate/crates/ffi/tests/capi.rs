use std::ffi::CStr;
use std::process::Command;
use std::ptr;

use tokalign_ffi::*;

fn last_error() -> Option<String> {
    let p = tokalign_last_error();
    (!p.is_null()).then(|| unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned())
}

struct Set(*mut TokalignPromptSet);

impl Drop for Set {
    fn drop(&mut self) {
        unsafe { tokalign_prompt_set_free(self.0) }
    }
}

fn prompt_set(side: i32, dim: usize, globals: &[f64], tokens: &[f64], counts: &[usize]) -> Set {
    let mut out = ptr::null_mut();
    let status = unsafe {
        tokalign_prompt_set_new(
            side,
            counts.len(),
            dim,
            counts.as_ptr(),
            globals.as_ptr(),
            tokens.as_ptr(),
            &mut out,
        )
    };
    assert_eq!(status, TOKALIGN_OK, "{:?}", last_error());
    Set(out)
}

fn solve(cost: &[f64], a: &[f64], b: &[f64], lambda: f64, plan: &mut [f64]) -> (i32, TokalignSinkhornResult) {
    let mut result = TokalignSinkhornResult::default();
    let status = unsafe {
        tokalign_sinkhorn(
            cost.as_ptr(),
            a.len(),
            b.len(),
            a.as_ptr(),
            b.as_ptr(),
            lambda,
            1000,
            1e-9,
            plan.as_mut_ptr(),
            &mut result,
        )
    };
    (status, result)
}

#[test]
fn sinkhorn_single_point() {
    let mut plan = [0.0];
    let (status, r) = solve(&[0.3], &[1.0], &[1.0], 0.1, &mut plan);
    assert_eq!(status, TOKALIGN_OK);
    assert_eq!(plan, [1.0]);
    assert_eq!(r.transport_cost, 0.3);
    assert!(r.converged);
    assert!(last_error().is_none());
}

#[test]
fn sinkhorn_permutation() {
    let mut plan = [0.0; 4];
    let (status, r) = solve(&[0.0, 1.0, 1.0, 0.0], &[0.5, 0.5], &[0.5, 0.5], 0.01, &mut plan);
    assert_eq!(status, TOKALIGN_OK);
    assert!(r.transport_cost < 1e-6);
    for (t, want) in plan.iter().zip([0.5, 0.0, 0.0, 0.5]) {
        assert!((t - want).abs() < 1e-6);
    }
}

#[test]
fn sinkhorn_error_codes() {
    let mut plan = [0.0; 4];
    let (status, _) = solve(&[0.0, 1.0, 1.0, 0.0], &[0.7, 0.7], &[0.5, 0.5], 0.1, &mut plan);
    assert_eq!(status, TOKALIGN_ERR_INPUT);
    assert!(last_error().is_some());
    assert_eq!(plan, [0.0; 4]);

    let (status, _) = solve(&[1e300; 4], &[0.5, 0.5], &[0.5, 0.5], 1e-300, &mut plan);
    assert_eq!(status, TOKALIGN_ERR_NUMERICAL);
    assert!(last_error().unwrap().contains("diverged"));

    let status = unsafe {
        tokalign_sinkhorn([0.3].as_ptr(), 1, 1, [1.0].as_ptr(), [1.0].as_ptr(), 0.1, 10, 1e-6, ptr::null_mut(), ptr::null_mut())
    };
    assert_eq!(status, TOKALIGN_ERR_NULL);
    assert!(last_error().unwrap().contains("result_out"));

    // a later success clears the message
    let (status, _) = solve(&[0.3], &[1.0], &[1.0], 0.1, &mut [0.0]);
    assert_eq!(status, TOKALIGN_OK);
    assert!(last_error().is_none());
}

#[test]
fn exact_ot_picks_cheapest_permutation() {
    let cost = [3.0, 1.0, 2.0, 2.0, 3.0, 1.0, 1.0, 2.0, 3.0];
    let mut plan = [0.0; 9];
    let mut value = 0.0;
    let status = unsafe { tokalign_exact_ot_uniform(cost.as_ptr(), 3, plan.as_mut_ptr(), &mut value) };
    assert_eq!(status, TOKALIGN_OK);
    assert!((value - 1.0).abs() < 1e-15);
    let third = 1.0 / 3.0;
    assert_eq!(plan, [0.0, third, 0.0, 0.0, 0.0, third, third, 0.0, 0.0]);

    let status = unsafe { tokalign_exact_ot_uniform(cost.as_ptr(), 3, ptr::null_mut(), ptr::null_mut()) };
    assert_eq!(status, TOKALIGN_ERR_NULL);
}

#[test]
fn prompt_set_rejects_bad_input() {
    let mut out = ptr::null_mut();
    let zero = [0.0, 0.0];
    let status = unsafe { tokalign_prompt_set_new(TOKALIGN_SIDE_IMAGE, 1, 2, [1usize].as_ptr(), zero.as_ptr(), [1.0, 0.0].as_ptr(), &mut out) };
    assert_eq!(status, TOKALIGN_ERR_INPUT);
    assert!(out.is_null());

    let status = unsafe { tokalign_prompt_set_new(7, 1, 2, [1usize].as_ptr(), [1.0, 0.0].as_ptr(), [1.0, 0.0].as_ptr(), &mut out) };
    assert_eq!(status, TOKALIGN_ERR_INPUT);

    let status = unsafe { tokalign_prompt_set_new(TOKALIGN_SIDE_IMAGE, 1, 2, [1usize].as_ptr(), ptr::null(), [1.0, 0.0].as_ptr(), &mut out) };
    assert_eq!(status, TOKALIGN_ERR_NULL);
    assert!(last_error().unwrap().contains("globals"));

    unsafe { tokalign_prompt_set_free(ptr::null_mut()) };
    assert_eq!(unsafe { tokalign_prompt_set_len(ptr::null()) }, 0);
}

#[test]
fn identical_prompts_have_zero_distance() {
    let globals = [1.0, 2.0, 0.5];
    let tokens = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
    let image = prompt_set(TOKALIGN_SIDE_IMAGE, 3, &globals, &tokens, &[2]);
    let class = prompt_set(TOKALIGN_SIDE_CLASS, 3, &globals, &tokens, &[2]);
    assert_eq!(unsafe { tokalign_prompt_set_len(image.0) }, 1);

    let mut cfg = tokalign_align_config_default();
    cfg.lambda = 1e-3;
    cfg.max_iterations = 10_000;
    let mut d = f64::NAN;
    let status = unsafe { tokalign_hierarchical_distance(image.0, class.0, &cfg, &mut d) };
    assert_eq!(status, TOKALIGN_OK, "{:?}", last_error());
    assert!(d.abs() < 1e-9, "{d}");

    cfg.cost_mode = 5;
    let status = unsafe { tokalign_hierarchical_distance(image.0, class.0, &cfg, &mut d) };
    assert_eq!(status, TOKALIGN_ERR_INPUT);
    assert!(last_error().unwrap().contains("cost mode"));
}

#[test]
fn classify_duplicated_classes_is_uniform() {
    let image = prompt_set(TOKALIGN_SIDE_IMAGE, 2, &[1.0, 0.2, 0.3, 1.0], &[1.0, 0.0, 0.6, 0.8], &[1, 1]);
    let class = prompt_set(TOKALIGN_SIDE_CLASS, 2, &[0.5, 0.5, -1.0, 0.1], &[0.0, 1.0, 1.0, 1.0], &[1, 1]);
    let handles = [class.0 as *const _; 3];
    let mut bank = ptr::null_mut();
    assert_eq!(unsafe { tokalign_class_bank_new(handles.as_ptr(), 3, &mut bank) }, TOKALIGN_OK);
    assert_eq!(unsafe { tokalign_class_bank_len(bank) }, 3);

    let cfg = tokalign_align_config_default();
    let mut probs = [0.0; 3];
    let mut predicted = usize::MAX;
    let status = unsafe { tokalign_classify(image.0, bank, &cfg, probs.as_mut_ptr(), 3, &mut predicted) };
    assert_eq!(status, TOKALIGN_OK, "{:?}", last_error());
    for p in probs {
        assert!((p - 1.0 / 3.0).abs() < 1e-12);
    }
    assert_eq!(predicted, 0);

    let status = unsafe { tokalign_classify(image.0, bank, &cfg, probs.as_mut_ptr(), 2, ptr::null_mut()) };
    assert_eq!(status, TOKALIGN_ERR_INPUT);

    // class-side set passed as the image
    let status = unsafe { tokalign_classify(class.0, bank, &cfg, probs.as_mut_ptr(), 3, ptr::null_mut()) };
    assert_eq!(status, TOKALIGN_ERR_INPUT);

    unsafe { tokalign_class_bank_free(bank) };
}

#[test]
fn classify_prefers_matching_class() {
    let image = prompt_set(TOKALIGN_SIDE_IMAGE, 2, &[1.0, 0.0], &[1.0, 0.1], &[1]);
    let near = prompt_set(TOKALIGN_SIDE_CLASS, 2, &[1.0, 0.1], &[1.0, 0.0], &[1]);
    let far = prompt_set(TOKALIGN_SIDE_CLASS, 2, &[0.0, 1.0], &[-1.0, 0.5], &[1]);
    let handles = [far.0 as *const _, near.0 as *const _];
    let mut bank = ptr::null_mut();
    assert_eq!(unsafe { tokalign_class_bank_new(handles.as_ptr(), 2, &mut bank) }, TOKALIGN_OK);
    let cfg = tokalign_align_config_default();
    let mut probs = [0.0; 2];
    let mut predicted = 0;
    let status = unsafe { tokalign_classify(image.0, bank, &cfg, probs.as_mut_ptr(), 2, &mut predicted) };
    assert_eq!(status, TOKALIGN_OK);
    assert_eq!(predicted, 1);
    assert!(probs[1] > probs[0]);
    assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    unsafe { tokalign_class_bank_free(bank) };
}

#[test]
fn header_declares_exports_and_compiles() {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/include/tokalign.h");
    let header = std::fs::read_to_string(path).unwrap();
    for name in [
        "tokalign_last_error",
        "tokalign_align_config_default",
        "tokalign_sinkhorn",
        "tokalign_exact_ot_uniform",
        "tokalign_prompt_set_new",
        "tokalign_prompt_set_free",
        "tokalign_class_bank_new",
        "tokalign_class_bank_free",
        "tokalign_hierarchical_distance",
        "tokalign_classify",
        "typedef struct TokalignPromptSet TokalignPromptSet;",
        "#define TOKALIGN_ERR_NUMERICAL 3",
    ] {
        assert!(header.contains(name), "missing {name}");
    }
    match Command::new("cc").args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", path]).output() {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("cc not found, skipping header compile check"),
    }
}
