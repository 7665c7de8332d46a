//! C ABI over the AESL library: opaque handles, status codes, and a
//! thread-local last-error message. The header `include/aesl.h` is generated
//! by cbindgen at build time.

use aesl_core::config::RunConfig;
use aesl_core::data::{generate, save_dataset, GeneratorConfig};
use aesl_core::error::AeslError;
use aesl_core::evaluation::{friedman, nemenyi_cd, RankTable};
use aesl_core::experiment::run_experiment;
use aesl_core::graph::{erg_pcc, load_graph_json, RelationGraph};
use aesl_core::trainer::restrict_graph;
use libc::{c_char, c_double, size_t};
use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

/// Result of every fallible call. Anything other than `Ok` leaves a
/// description in `aesl_last_error_message`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AeslStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    InvalidArgument = 3,
    InvalidConfig = 4,
    MissingFile = 5,
    IoError = 6,
    NumericError = 7,
    TrainingDiverged = 8,
    InternalError = 9,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(message: &str) {
    let sanitized = message.replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(sanitized).unwrap_or_default();
    });
}

fn status_for(err: &AeslError) -> AeslStatus {
    match err {
        AeslError::Config(_) | AeslError::Json(_) => AeslStatus::InvalidConfig,
        AeslError::MissingFile(_) => AeslStatus::MissingFile,
        AeslError::Io(_) | AeslError::Csv(_) => AeslStatus::IoError,
        AeslError::TrainingDiverged { .. } => AeslStatus::TrainingDiverged,
        AeslError::RunFailed { source, .. } => status_for(source),
        AeslError::ShapeMismatch { .. }
        | AeslError::NonScalarLoss { .. }
        | AeslError::ZeroCenteredNorm { .. }
        | AeslError::PropagationDiverged { .. }
        | AeslError::ZeroVariance { .. }
        | AeslError::DegenerateRanks(_) => AeslStatus::NumericError,
        AeslError::InvalidArgument(_) | AeslError::Validation(_) => AeslStatus::InvalidArgument,
    }
}

fn fail(err: &AeslError) -> AeslStatus {
    set_error(&err.to_string());
    status_for(err)
}

/// Guards the boundary: a Rust panic must not unwind into C.
fn guarded(body: impl FnOnce() -> AeslStatus) -> AeslStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => {
            set_error("internal panic");
            AeslStatus::InternalError
        }
    }
}

unsafe fn required_str<'a>(ptr: *const c_char, name: &str) -> Result<&'a str, AeslStatus> {
    if ptr.is_null() {
        set_error(&format!("{name} is null"));
        return Err(AeslStatus::NullPointer);
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        set_error(&format!("{name} is not valid UTF-8"));
        AeslStatus::InvalidUtf8
    })
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn aesl_last_error_message() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Library version as a static string.
#[no_mangle]
pub extern "C" fn aesl_version() -> *const c_char {
    static VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "\0");
    VERSION.as_ptr() as *const c_char
}

/// Generates a synthetic dataset from a generator-config JSON string and
/// writes manifest, CSVs, oracle graph, and prototypes into `out_dir`.
///
/// # Safety
/// `config_json` and `out_dir` must be valid NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn aesl_generate_dataset(
    config_json: *const c_char,
    out_dir: *const c_char,
) -> AeslStatus {
    guarded(|| {
        let config_text = match required_str(config_json, "config_json") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let out = match required_str(out_dir, "out_dir") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let config: GeneratorConfig = match serde_json::from_str(config_text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&format!("generator config: {e}"));
                return AeslStatus::InvalidConfig;
            }
        };
        match generate(&config).and_then(|ds| save_dataset(&ds, Path::new(out))) {
            Ok(_) => AeslStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Runs the full (method, seed) grid described by a run-config JSON string;
/// results land in the config's `out_dir`.
///
/// # Safety
/// `config_json` must be a valid NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn aesl_run_experiment(config_json: *const c_char) -> AeslStatus {
    guarded(|| {
        let config_text = match required_str(config_json, "config_json") {
            Ok(s) => s,
            Err(status) => return status,
        };
        let config: RunConfig = match serde_json::from_str(config_text) {
            Ok(c) => c,
            Err(e) => {
                set_error(&format!("run config: {e}"));
                return AeslStatus::InvalidConfig;
            }
        };
        match run_experiment(&config) {
            Ok(_) => AeslStatus::Ok,
            Err(e) => fail(&e),
        }
    })
}

/// Opaque label-relation graph handle.
pub struct AeslGraph {
    inner: RelationGraph,
}

/// Loads a relation-graph JSON export. Returns null on failure (see
/// `aesl_last_error_message`).
///
/// # Safety
/// `path` must be a valid NUL-terminated string. The returned handle must be
/// released with `aesl_graph_free`.
#[no_mangle]
pub unsafe extern "C" fn aesl_graph_load(path: *const c_char) -> *mut AeslGraph {
    let result = catch_unwind(AssertUnwindSafe(|| {
        let path = match required_str(path, "path") {
            Ok(s) => s,
            Err(_) => return ptr::null_mut(),
        };
        match load_graph_json(Path::new(path)) {
            Ok(graph) => Box::into_raw(Box::new(AeslGraph { inner: graph })),
            Err(e) => {
                fail(&e);
                ptr::null_mut()
            }
        }
    }));
    result.unwrap_or(ptr::null_mut())
}

/// Releases a graph handle. Null is tolerated.
///
/// # Safety
/// `graph` must be a handle from `aesl_graph_load` or null, and must not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn aesl_graph_free(graph: *mut AeslGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Number of labels in the graph; 0 for a null handle.
///
/// # Safety
/// `graph` must be a live handle from `aesl_graph_load` or null.
#[no_mangle]
pub unsafe extern "C" fn aesl_graph_label_count(graph: *const AeslGraph) -> size_t {
    if graph.is_null() {
        return 0;
    }
    (*graph).inner.label_count()
}

/// Pearson correlation of the off-diagonal entries of `graph` against the
/// matching labels of `oracle` (which may cover a superset of labels).
///
/// # Safety
/// Both handles must be live handles from `aesl_graph_load`; `out` must point
/// to a writable double.
#[no_mangle]
pub unsafe extern "C" fn aesl_graph_pcc(
    graph: *const AeslGraph,
    oracle: *const AeslGraph,
    out: *mut c_double,
) -> AeslStatus {
    guarded(|| {
        if graph.is_null() || oracle.is_null() || out.is_null() {
            set_error("graph, oracle, and out must be non-null");
            return AeslStatus::NullPointer;
        }
        let graph = &(*graph).inner;
        let oracle = &(*oracle).inner;
        let restricted = match restrict_graph(oracle, &graph.labels) {
            Ok(g) => g,
            Err(e) => return fail(&e),
        };
        match erg_pcc(graph, &restricted) {
            Ok(pcc) => {
                *out = pcc;
                AeslStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Critical difference of the Nemenyi test. `k` is the number of methods,
/// `n` the number of datasets.
///
/// # Safety
/// `out` must point to a writable double.
#[no_mangle]
pub unsafe extern "C" fn aesl_nemenyi_cd(
    q_alpha: c_double,
    k: size_t,
    n: size_t,
    out: *mut c_double,
) -> AeslStatus {
    guarded(|| {
        if out.is_null() {
            set_error("out is null");
            return AeslStatus::NullPointer;
        }
        match nemenyi_cd(q_alpha, k, n) {
            Ok(cd) => {
                *out = cd;
                AeslStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

/// Friedman statistics over a row-major rank matrix with `n_datasets` rows
/// and `k_methods` columns. Writes the chi-squared statistic and the derived
/// F statistic.
///
/// # Safety
/// `ranks` must point to `n_datasets * k_methods` doubles; `out_chi2` and
/// `out_ff` must point to writable doubles.
#[no_mangle]
pub unsafe extern "C" fn aesl_friedman(
    ranks: *const c_double,
    n_datasets: size_t,
    k_methods: size_t,
    out_chi2: *mut c_double,
    out_ff: *mut c_double,
) -> AeslStatus {
    guarded(|| {
        if ranks.is_null() || out_chi2.is_null() || out_ff.is_null() {
            set_error("ranks, out_chi2, and out_ff must be non-null");
            return AeslStatus::NullPointer;
        }
        let values = std::slice::from_raw_parts(ranks, n_datasets * k_methods);
        let table = RankTable {
            methods: (0..k_methods).map(|i| format!("m{i}")).collect(),
            ranks: values.chunks(k_methods).map(|row| row.to_vec()).collect(),
        };
        match friedman(&table) {
            Ok((chi2, ff)) => {
                *out_chi2 = chi2;
                *out_ff = ff;
                AeslStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::ffi::CString;

    fn cstr(s: &str) -> CString {
        CString::new(s).unwrap()
    }

    #[test]
    fn version_is_non_empty() {
        let v = unsafe { CStr::from_ptr(aesl_version()) };
        assert!(!v.to_str().unwrap().is_empty());
    }

    #[test]
    fn null_arguments_are_rejected_with_message() {
        let status = unsafe { aesl_generate_dataset(ptr::null(), ptr::null()) };
        assert_eq!(status, AeslStatus::NullPointer);
        let msg = unsafe { CStr::from_ptr(aesl_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("null"));
    }

    #[test]
    fn generate_and_inspect_graph_through_the_abi() {
        let dir = tempfile::tempdir().unwrap();
        let out = cstr(dir.path().to_str().unwrap());
        let config = cstr(
            r#"{ "seed": 3, "n_train": 60, "n_test": 30, "num_labels": 6,
                 "feature_dim": 8, "affective_dim": 3 }"#,
        );
        let status = unsafe { aesl_generate_dataset(config.as_ptr(), out.as_ptr()) };
        assert_eq!(status, AeslStatus::Ok);

        let graph_path = cstr(dir.path().join("oracle_graph.json").to_str().unwrap());
        let graph = unsafe { aesl_graph_load(graph_path.as_ptr()) };
        assert!(!graph.is_null());
        assert_eq!(unsafe { aesl_graph_label_count(graph) }, 6);

        let mut pcc = 0.0;
        let status = unsafe { aesl_graph_pcc(graph, graph, &mut pcc) };
        assert_eq!(status, AeslStatus::Ok);
        assert!((pcc - 1.0).abs() < 1e-12);
        unsafe { aesl_graph_free(graph) };
    }

    #[test]
    fn graph_load_failure_sets_message() {
        let path = cstr("/nonexistent/g.json");
        let graph = unsafe { aesl_graph_load(path.as_ptr()) };
        assert!(graph.is_null());
        let msg = unsafe { CStr::from_ptr(aesl_last_error_message()) };
        assert!(msg.to_str().unwrap().contains("nonexistent"));
    }

    #[test]
    fn bad_config_json_reports_invalid_config() {
        let bad = cstr("{ not json");
        let status = unsafe { aesl_run_experiment(bad.as_ptr()) };
        assert_eq!(status, AeslStatus::InvalidConfig);
    }

    #[test]
    fn run_experiment_through_the_abi() {
        let dir = tempfile::tempdir().unwrap();
        let config = format!(
            r#"{{
              "dataset": {{ "generate": {{ "seed": 5, "n_train": 48, "n_test": 24,
                "num_labels": 6, "feature_dim": 7, "affective_dim": 3,
                "label_cardinality": 2.5 }} }},
              "protocol": {{ "base": 0, "increment": 3 }},
              "methods": ["finetune"],
              "seeds": [0],
              "hyper": {{ "epochs": 1, "batch_size": 16,
                "dims": {{ "node_dim": 4, "gin_hidden": 6, "embed_dim": 5,
                           "latent_dim": 6, "semantic_dim": 5 }} }},
              "out_dir": {:?},
              "jobs": 1
            }}"#,
            dir.path().join("out").to_str().unwrap()
        );
        let config = cstr(&config);
        let status = unsafe { aesl_run_experiment(config.as_ptr()) };
        assert_eq!(status, AeslStatus::Ok, "{:?}", unsafe {
            CStr::from_ptr(aesl_last_error_message())
        });
        assert!(dir.path().join("out/results.csv").exists());
    }

    #[test]
    fn friedman_and_nemenyi_through_the_abi() {
        let ranks = [1.0, 2.0, 3.0, 2.0, 1.0, 3.0];
        let mut chi2 = 0.0;
        let mut ff = 0.0;
        let status = unsafe { aesl_friedman(ranks.as_ptr(), 2, 3, &mut chi2, &mut ff) };
        assert_eq!(status, AeslStatus::Ok);
        assert!((chi2 - 3.0).abs() < 1e-12);
        assert!((ff - 3.0).abs() < 1e-12);

        let mut cd = 0.0;
        let status = unsafe { aesl_nemenyi_cd(3.102, 9, 7, &mut cd) };
        assert_eq!(status, AeslStatus::Ok);
        assert!((cd - 4.540).abs() < 1e-3);

        // Degenerate agreement propagates as a numeric error.
        let tied = [1.0, 2.0, 3.0, 1.0, 2.0, 3.0];
        let status = unsafe { aesl_friedman(tied.as_ptr(), 2, 3, &mut chi2, &mut ff) };
        assert_eq!(status, AeslStatus::NumericError);
    }

    #[test]
    fn generated_header_exists_with_expected_symbols() {
        let header = include_str!("../include/aesl.h");
        for symbol in [
            "aesl_last_error_message",
            "aesl_version",
            "aesl_generate_dataset",
            "aesl_run_experiment",
            "aesl_graph_load",
            "aesl_graph_pcc",
            "aesl_nemenyi_cd",
            "aesl_friedman",
            "typedef struct AeslGraph AeslGraph",
        ] {
            assert!(header.contains(symbol), "header lacks {symbol}");
        }
    }
}
