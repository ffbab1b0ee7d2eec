//! C ABI over the `mmgraph` library.
//!
//! Every fallible function returns an [`MmgStatus`]; on failure the message
//! is kept per thread and can be copied out with [`mmg_last_error_message`].
//! Graphs and subgraphs are opaque handles released with their `_free`
//! functions. Dense matrices cross the boundary as row-major `double`
//! buffers owned by the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use mmgraph::analysis::dirichlet_energy;
use mmgraph::attention::{diffuse_attention, ppr_closed_form, HopDiffusionConfig};
use mmgraph::graph::{induce_subgraph, load_graph, parse_graph};
use mmgraph::numerics::row_softmax;
use mmgraph::pipeline::classify::{classify_by_similarity, ClassTaxonomy};
use mmgraph::{Error, Matrix, Modality, MultimodalGraph, Subgraph, SubgraphPolicy};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmgStatus {
    Ok = 0,
    NullPointer = 1,
    Validation = 2,
    Numeric = 3,
    Dimension = 4,
    Lookup = 5,
    Contract = 6,
    Io = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MmgModality {
    Text = 0,
    Image = 1,
}

impl From<MmgModality> for Modality {
    fn from(m: MmgModality) -> Self {
        match m {
            MmgModality::Text => Modality::Text,
            MmgModality::Image => Modality::Image,
        }
    }
}

/// Mirrors the library's subgraph policy.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MmgSubgraphPolicy {
    pub tau: usize,
    pub max_nodes: usize,
    pub keep_all_first_hop: bool,
    pub second_hop_sample_count: usize,
    pub rng_seed: u64,
}

/// Opaque graph handle.
pub struct MmgGraph(MultimodalGraph);

/// Opaque subgraph handle.
pub struct MmgSubgraph(Subgraph);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> MmgStatus {
    match e {
        Error::Numeric(_) | Error::Singular(_) => MmgStatus::Numeric,
        Error::Dimension(_) => MmgStatus::Dimension,
        Error::Lookup(_) | Error::LookupMsg(_) | Error::Attribute(_) => MmgStatus::Lookup,
        Error::Contract(_) | Error::Assembly(_) => MmgStatus::Contract,
        Error::Io(_) => MmgStatus::Io,
        Error::Validation(_) | Error::Json(_) => MmgStatus::Validation,
    }
}

enum Failure {
    Lib(Error),
    Null(&'static str),
    Buffer { needed: usize, given: usize },
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, recording any failure (including a panic) as the last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MmgStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            MmgStatus::Ok
        }
        Ok(Err(Failure::Lib(e))) => {
            let status = status_of(&e);
            set_error(e.to_string());
            status
        }
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is null"));
            MmgStatus::NullPointer
        }
        Ok(Err(Failure::Buffer { needed, given })) => {
            set_error(format!("buffer holds {given} elements, {needed} needed"));
            MmgStatus::BufferTooSmall
        }
        Err(_) => {
            set_error("internal panic".into());
            MmgStatus::Panic
        }
    }
}

unsafe fn non_null<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    unsafe { p.as_ref() }.ok_or(Failure::Null(what))
}

unsafe fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Failure::Lib(Error::Validation(format!("{what} is not valid UTF-8"))))
}

unsafe fn read_matrix(p: *const f64, rows: usize, cols: usize, what: &'static str) -> Result<Matrix, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let data = unsafe { std::slice::from_raw_parts(p, rows * cols) }.to_vec();
    Ok(Matrix::new(rows, cols, data)?)
}

unsafe fn write_out(m: &Matrix, out: *mut f64) -> Result<(), Failure> {
    if out.is_null() {
        return Err(Failure::Null("out"));
    }
    let src = m.as_slice();
    unsafe { ptr::copy_nonoverlapping(src.as_ptr(), out, src.len()) };
    Ok(())
}

/// Copies the calling thread's last error message, NUL-terminated and
/// truncated to `capacity`. Returns the full message length in bytes.
///
/// # Safety
/// `buffer` must be null or point to `capacity` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn mmg_last_error_message(buffer: *mut c_char, capacity: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buffer.is_null() && capacity > 0 {
            let n = msg.len().min(capacity - 1);
            unsafe {
                ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buffer, n);
                *buffer.add(n) = 0;
            }
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn mmg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses a graph from JSON text.
///
/// # Safety
/// `json` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmg_graph_from_json(json: *const c_char, out: *mut *mut MmgGraph) -> MmgStatus {
    guard(|| {
        let src = unsafe { c_str(json, "json") }?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let graph = parse_graph(src)?;
        unsafe { *out = Box::into_raw(Box::new(MmgGraph(graph))) };
        Ok(())
    })
}

/// Loads a graph file.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn mmg_graph_load(path: *const c_char, out: *mut *mut MmgGraph) -> MmgStatus {
    guard(|| {
        let path = unsafe { c_str(path, "path") }?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let graph = load_graph(path)?;
        unsafe { *out = Box::into_raw(Box::new(MmgGraph(graph))) };
        Ok(())
    })
}

/// # Safety
/// `graph` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmg_graph_free(graph: *mut MmgGraph) {
    if !graph.is_null() {
        drop(unsafe { Box::from_raw(graph) });
    }
}

/// # Safety
/// `graph` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mmg_graph_node_count(graph: *const MmgGraph, out: *mut usize) -> MmgStatus {
    guard(|| {
        let g = unsafe { non_null(graph, "graph") }?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        unsafe { *out = g.0.node_count() };
        Ok(())
    })
}

/// The library's default policy (`tau` 2, at most 11 nodes).
#[no_mangle]
pub extern "C" fn mmg_subgraph_policy_default() -> MmgSubgraphPolicy {
    let p = SubgraphPolicy::default();
    MmgSubgraphPolicy {
        tau: p.tau,
        max_nodes: p.max_nodes,
        keep_all_first_hop: p.keep_all_first_hop,
        second_hop_sample_count: p.second_hop_sample_count,
        rng_seed: p.rng_seed,
    }
}

/// Extracts the subgraph of `modality` around `target`.
///
/// # Safety
/// `graph` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mmg_subgraph_induce(
    graph: *const MmgGraph,
    target: u64,
    modality: MmgModality,
    policy: MmgSubgraphPolicy,
    out: *mut *mut MmgSubgraph,
) -> MmgStatus {
    guard(|| {
        let g = unsafe { non_null(graph, "graph") }?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let policy = SubgraphPolicy {
            tau: policy.tau,
            max_nodes: policy.max_nodes,
            keep_all_first_hop: policy.keep_all_first_hop,
            second_hop_sample_count: policy.second_hop_sample_count,
            rng_seed: policy.rng_seed,
        };
        let sg = induce_subgraph(&g.0, target, &policy, modality.into())?;
        unsafe { *out = Box::into_raw(Box::new(MmgSubgraph(sg))) };
        Ok(())
    })
}

/// # Safety
/// `subgraph` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn mmg_subgraph_free(subgraph: *mut MmgSubgraph) {
    if !subgraph.is_null() {
        drop(unsafe { Box::from_raw(subgraph) });
    }
}

/// Number of nodes in the subgraph, or 0 for a null handle.
///
/// # Safety
/// `subgraph` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mmg_subgraph_len(subgraph: *const MmgSubgraph) -> usize {
    unsafe { subgraph.as_ref() }.map_or(0, |s| s.0.len())
}

/// Copies node ids and hop labels, in subgraph order.
///
/// # Safety
/// `ids` and `hops` must each hold `capacity` elements.
#[no_mangle]
pub unsafe extern "C" fn mmg_subgraph_nodes(
    subgraph: *const MmgSubgraph,
    ids: *mut u64,
    hops: *mut usize,
    capacity: usize,
) -> MmgStatus {
    guard(|| {
        let s = unsafe { non_null(subgraph, "subgraph") }?;
        if ids.is_null() || hops.is_null() {
            return Err(Failure::Null("ids or hops"));
        }
        let n = s.0.len();
        if capacity < n {
            return Err(Failure::Buffer {
                needed: n,
                given: capacity,
            });
        }
        for (k, &(id, hop)) in s.0.ordered_nodes.iter().enumerate() {
            unsafe {
                *ids.add(k) = id;
                *hops.add(k) = hop;
            }
        }
        Ok(())
    })
}

/// Copies the `n x n` induced adjacency, row-major.
///
/// # Safety
/// `out` must hold `capacity` doubles.
#[no_mangle]
pub unsafe extern "C" fn mmg_subgraph_adjacency(
    subgraph: *const MmgSubgraph,
    out: *mut f64,
    capacity: usize,
) -> MmgStatus {
    guard(|| {
        let s = unsafe { non_null(subgraph, "subgraph") }?;
        let needed = s.0.len() * s.0.len();
        if capacity < needed {
            return Err(Failure::Buffer { needed, given: capacity });
        }
        unsafe { write_out(&s.0.adjacency, out) }
    })
}

/// Row softmax of `rows x cols` logits; `mask` (same shape, 0/1) may be null.
///
/// # Safety
/// Buffers must hold `rows * cols` doubles.
#[no_mangle]
pub unsafe extern "C" fn mmg_row_softmax(
    logits: *const f64,
    mask: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
) -> MmgStatus {
    guard(|| {
        let l = unsafe { read_matrix(logits, rows, cols, "logits") }?;
        let m = if mask.is_null() {
            None
        } else {
            Some(unsafe { read_matrix(mask, rows, cols, "mask") }?)
        };
        let s = row_softmax(&l, m.as_ref())?;
        unsafe { write_out(&s, out) }
    })
}

/// Truncated diffusion `Σ_{i=0}^{K} θ_i A^i` of a row-stochastic `n x n` matrix.
///
/// # Safety
/// `a` and `out` must hold `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mmg_diffuse(
    a: *const f64,
    n: usize,
    alpha: f64,
    steps: usize,
    renormalize: bool,
    out: *mut f64,
) -> MmgStatus {
    guard(|| {
        let a = unsafe { read_matrix(a, n, n, "a") }?;
        let config = HopDiffusionConfig {
            alpha,
            diffusion_steps: steps,
            renormalize_truncation: renormalize,
            ..Default::default()
        };
        let d = diffuse_attention(&a, &config)?;
        unsafe { write_out(&d, out) }
    })
}

/// Closed form `α (I - (1-α) A)^{-1}`.
///
/// # Safety
/// `a` and `out` must hold `n * n` doubles.
#[no_mangle]
pub unsafe extern "C" fn mmg_ppr(a: *const f64, n: usize, alpha: f64, out: *mut f64) -> MmgStatus {
    guard(|| {
        let a = unsafe { read_matrix(a, n, n, "a") }?;
        let p = ppr_closed_form(&a, alpha)?;
        unsafe { write_out(&p, out) }
    })
}

/// Dirichlet energy of `n x d` features over an `n x n` adjacency.
///
/// # Safety
/// `x` holds `n * d` doubles, `adjacency` `n * n`; `out` is writable.
#[no_mangle]
pub unsafe extern "C" fn mmg_dirichlet_energy(
    x: *const f64,
    n: usize,
    d: usize,
    adjacency: *const f64,
    out: *mut f64,
) -> MmgStatus {
    guard(|| {
        let x = unsafe { read_matrix(x, n, d, "x") }?;
        let adj = unsafe { read_matrix(adjacency, n, n, "adjacency") }?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let e = dirichlet_energy(&x, &adj)?;
        unsafe { *out = e };
        Ok(())
    })
}

/// Picks the class whose description best matches `response`.
///
/// # Safety
/// `ids` and `descriptions` hold `count` entries; strings are NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn mmg_classify(
    response: *const c_char,
    ids: *const u32,
    descriptions: *const *const c_char,
    count: usize,
    out_class: *mut u32,
) -> MmgStatus {
    guard(|| {
        let response = unsafe { c_str(response, "response") }?;
        if out_class.is_null() {
            return Err(Failure::Null("out_class"));
        }
        if count > 0 && (ids.is_null() || descriptions.is_null()) {
            return Err(Failure::Null("ids or descriptions"));
        }
        let mut classes = std::collections::BTreeMap::new();
        for k in 0..count {
            let id = unsafe { *ids.add(k) };
            let text = unsafe { c_str(*descriptions.add(k), "description") }?;
            if classes.insert(id, text.to_string()).is_some() {
                return Err(Failure::Lib(Error::Contract(format!("duplicate class id {id}"))));
            }
        }
        let taxonomy = ClassTaxonomy { classes };
        let class = classify_by_similarity(response, &taxonomy)?;
        unsafe { *out_class = class };
        Ok(())
    })
}
