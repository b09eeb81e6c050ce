use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use pdegen_core::autodiff::Tensor;
use pdegen_core::distributed::ShardPlan;
use pdegen_core::model::{Generator, GeneratorConfig};
use pdegen_core::oracle::{compute_norms, solve_fdm, FdmConfig, Field};
use pdegen_core::pde_loss::initial_condition;
use pdegen_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(pdgn_last_error()) }.to_string_lossy().into_owned()
}

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn new_generator(n: usize, precision: PdgnPrecision) -> *mut PdgnGenerator {
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { pdgn_generator_new(n, 5, precision, &mut g) }, PdgnStatus::Ok);
    assert!(!g.is_null());
    g
}

fn infer(g: *const PdgnGenerator, c: f64) -> Vec<f64> {
    let n = unsafe { pdgn_generator_resolution(g) };
    let mut out = vec![0.0; n * n];
    assert_eq!(unsafe { pdgn_generator_infer(g, c, out.as_mut_ptr(), out.len()) }, PdgnStatus::Ok);
    out
}

#[test]
fn inference_matches_the_library() {
    for precision in [PdgnPrecision::F32, PdgnPrecision::F64] {
        let g = new_generator(16, precision);
        assert_eq!(unsafe { pdgn_generator_resolution(g) }, 16);
        let got = infer(g, 4.0);
        let ic = initial_condition(4.0, 16);
        let expect = match precision {
            PdgnPrecision::F32 => Generator::<f32>::new(GeneratorConfig::new(16, 5))
                .unwrap()
                .infer(&Tensor::from_f64(&[1, 16], &ic).unwrap())
                .unwrap()
                .to_f64_vec(),
            PdgnPrecision::F64 => Generator::<f64>::new(GeneratorConfig::new(16, 5))
                .unwrap()
                .infer(&Tensor::from_f64(&[1, 16], &ic).unwrap())
                .unwrap()
                .to_f64_vec(),
        };
        assert_eq!(got, expect);
        unsafe { pdgn_generator_free(g) };
    }
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = cpath(&dir.path().join("g.bin"));
    let g = new_generator(16, PdgnPrecision::F32);
    assert_eq!(unsafe { pdgn_generator_save(g, path.as_ptr()) }, PdgnStatus::Ok);
    let mut back = ptr::null_mut();
    assert_eq!(unsafe { pdgn_generator_load(path.as_ptr(), &mut back) }, PdgnStatus::Ok);
    assert_eq!(infer(g, 3.5), infer(back, 3.5));
    unsafe {
        pdgn_generator_free(g);
        pdgn_generator_free(back);
    }
}

#[test]
fn solve_and_norms_match_the_library() {
    let n = 32;
    let mut u = vec![0.0; n * n];
    assert_eq!(unsafe { pdgn_solve(3.0, n, 0, 0.0, u.as_mut_ptr(), u.len()) }, PdgnStatus::Ok);
    let reference = solve_fdm(3.0, &FdmConfig::default(), n).unwrap();
    assert_eq!(u, reference.data);

    let g = new_generator(n, PdgnPrecision::F64);
    let gen = infer(g, 3.0);
    let mut norms = [0.0; 3];
    assert_eq!(
        unsafe { pdgn_norms(n, gen.as_ptr(), u.as_ptr(), norms.as_mut_ptr()) },
        PdgnStatus::Ok
    );
    let r = compute_norms(&Field::new(n, 3.0, gen).unwrap(), &reference).unwrap();
    assert_eq!(norms, [r.norm_g, r.norm_fd, r.norm_delta]);
    unsafe { pdgn_generator_free(g) };
}

#[test]
fn shards_match_the_planner() {
    let plan = ShardPlan::new(100, 32, 8).unwrap();
    for mb in 0..plan.minibatches {
        for rank in 0..8 {
            let (mut s, mut e) = (0, 0);
            assert_eq!(unsafe { pdgn_shard(100, 32, 8, mb, rank, &mut s, &mut e) }, PdgnStatus::Ok);
            assert_eq!(s..e, plan.shard(mb, rank).unwrap());
        }
    }
    let (mut s, mut e) = (0, 0);
    assert_eq!(unsafe { pdgn_shard(4096, 1024, 4, 0, 1, &mut s, &mut e) }, PdgnStatus::Ok);
    assert_eq!((s, e), (256, 512));
}

#[test]
fn errors_are_reported() {
    let mut g = ptr::null_mut();
    assert_ne!(unsafe { pdgn_generator_new(12, 1, PdgnPrecision::F64, &mut g) }, PdgnStatus::Ok);
    assert!(g.is_null());
    assert!(!last_error().is_empty());

    let gen = new_generator(8, PdgnPrecision::F64);
    let mut short = vec![0.0; 10];
    let status = unsafe { pdgn_generator_infer(gen, 3.0, short.as_mut_ptr(), short.len()) };
    assert_eq!(status, PdgnStatus::InvalidArgument);
    assert!(last_error().contains("64 needed"), "{}", last_error());
    let mut out = vec![0.0; 64];
    assert_eq!(
        unsafe { pdgn_generator_infer(gen, f64::NAN, out.as_mut_ptr(), out.len()) },
        PdgnStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { pdgn_generator_infer(ptr::null(), 3.0, out.as_mut_ptr(), out.len()) },
        PdgnStatus::InvalidArgument
    );
    assert_eq!(unsafe { pdgn_generator_resolution(ptr::null()) }, 0);
    unsafe { pdgn_generator_free(gen) };
    unsafe { pdgn_generator_free(ptr::null_mut()) };

    let dir = tempfile::tempdir().unwrap();
    let missing = cpath(&dir.path().join("missing.bin"));
    assert_eq!(unsafe { pdgn_generator_load(missing.as_ptr(), &mut g) }, PdgnStatus::Io);
    let junk = dir.path().join("junk.bin");
    std::fs::write(&junk, b"not a checkpoint at all").unwrap();
    assert_eq!(unsafe { pdgn_generator_load(cpath(&junk).as_ptr(), &mut g) }, PdgnStatus::Format);
    assert_eq!(unsafe { pdgn_generator_load(ptr::null(), &mut g) }, PdgnStatus::InvalidArgument);

    let mut u = vec![0.0; 64];
    assert_eq!(unsafe { pdgn_solve(3.0, 8, 0, 1.5, u.as_mut_ptr(), u.len()) }, PdgnStatus::Config);
    assert_eq!(
        unsafe { pdgn_norms(8, u.as_ptr(), ptr::null(), u.as_mut_ptr()) },
        PdgnStatus::InvalidArgument
    );
    let (mut s, mut e) = (0, 0);
    assert_eq!(unsafe { pdgn_shard(10, 3, 4, 0, 0, &mut s, &mut e) }, PdgnStatus::Config);
    assert_eq!(unsafe { pdgn_shard(8, 4, 2, 0, 2, &mut s, &mut e) }, PdgnStatus::InvalidArgument);
}

#[test]
fn header_compiles_as_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/pdegen.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["pdgn_generator_load", "pdgn_generator_infer", "pdgn_solve", "pdgn_shard", "pdgn_last_error"] {
        assert!(text.contains(name), "{name} missing from the header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"pdegen.h\"\nint main(void) {\n  PdgnGenerator *g = 0;\n  \
         PdgnStatus s = pdgn_generator_new(16, 1, PDGN_PRECISION_F32, &g);\n  \
         return s == PDGN_STATUS_OK ? 0 : 1;\n}\n",
    )
    .unwrap();
    let status = match std::process::Command::new("cc")
        .args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"])
        .arg(header.parent().unwrap())
        .arg(&src)
        .status()
    {
        Ok(s) => s,
        Err(_) => {
            eprintln!("no C compiler found; header syntax not checked");
            return;
        }
    };
    assert!(status.success());
}
