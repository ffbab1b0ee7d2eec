use std::ffi::{CStr, CString};
use std::ptr;

use mmgraph_ffi::*;

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe { mmg_last_error_message(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

const PATH_GRAPH: &str = r#"{
  "nodes": [
    {"id": 1, "text": "a", "image_feature": null},
    {"id": 2, "text": "b", "image_feature": null},
    {"id": 3, "text": "c", "image_feature": null},
    {"id": 4, "text": "d", "image_feature": null}
  ],
  "text_edges": [[1, 2], [2, 3], [3, 4]]
}"#;

fn load(json: &str) -> *mut MmgGraph {
    let src = CString::new(json).unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { mmg_graph_from_json(src.as_ptr(), &mut g) }, MmgStatus::Ok);
    g
}

#[test]
fn graph_and_subgraph_handles() {
    let g = load(PATH_GRAPH);
    let mut n = 0;
    assert_eq!(unsafe { mmg_graph_node_count(g, &mut n) }, MmgStatus::Ok);
    assert_eq!(n, 4);

    let mut sg = ptr::null_mut();
    let policy = mmg_subgraph_policy_default();
    let status = unsafe { mmg_subgraph_induce(g, 1, MmgModality::Text, policy, &mut sg) };
    assert_eq!(status, MmgStatus::Ok, "{}", last_error());
    let len = unsafe { mmg_subgraph_len(sg) };
    assert_eq!(len, 3);
    let mut ids = vec![0u64; len];
    let mut hops = vec![0usize; len];
    assert_eq!(
        unsafe { mmg_subgraph_nodes(sg, ids.as_mut_ptr(), hops.as_mut_ptr(), len) },
        MmgStatus::Ok
    );
    assert_eq!(ids, [1, 2, 3]);
    assert_eq!(hops, [0, 1, 2]);
    let mut adj = vec![0.0; len * len];
    assert_eq!(unsafe { mmg_subgraph_adjacency(sg, adj.as_mut_ptr(), adj.len()) }, MmgStatus::Ok);
    assert_eq!(adj, [0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0]);
    let mut small = [0.0; 4];
    assert_eq!(
        unsafe { mmg_subgraph_adjacency(sg, small.as_mut_ptr(), small.len()) },
        MmgStatus::BufferTooSmall
    );

    let mut missing = ptr::null_mut();
    let status = unsafe { mmg_subgraph_induce(g, 99, MmgModality::Text, policy, &mut missing) };
    assert_eq!(status, MmgStatus::Lookup);
    assert!(last_error().contains("99"));
    assert!(missing.is_null());

    unsafe {
        mmg_subgraph_free(sg);
        mmg_graph_free(g);
        mmg_graph_free(ptr::null_mut());
    }
}

#[test]
fn bad_json_and_null_arguments() {
    let src = CString::new("{\"nodes\": [}").unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { mmg_graph_from_json(src.as_ptr(), &mut g) }, MmgStatus::Validation);
    assert!(last_error().contains("line"));
    assert_eq!(unsafe { mmg_graph_from_json(ptr::null(), &mut g) }, MmgStatus::NullPointer);
    let mut n = 0;
    assert_eq!(unsafe { mmg_graph_node_count(ptr::null(), &mut n) }, MmgStatus::NullPointer);
    assert_eq!(unsafe { mmg_subgraph_len(ptr::null()) }, 0);
}

#[test]
fn diffusion_matches_ppr_for_long_truncation() {
    let a = [0.5, 0.5, 0.0, 0.25, 0.25, 0.5, 0.0, 1.0, 0.0];
    let mut d = [0.0; 9];
    let mut p = [0.0; 9];
    assert_eq!(unsafe { mmg_diffuse(a.as_ptr(), 3, 0.5, 20, false, d.as_mut_ptr()) }, MmgStatus::Ok);
    assert_eq!(unsafe { mmg_ppr(a.as_ptr(), 3, 0.5, p.as_mut_ptr()) }, MmgStatus::Ok);
    for (x, y) in d.iter().zip(&p) {
        assert!((x - y).abs() < 1e-6);
    }
    for row in d.chunks(3) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
    let status = unsafe { mmg_diffuse(a.as_ptr(), 3, 0.0, 2, true, d.as_mut_ptr()) };
    assert_eq!(status, MmgStatus::Validation);
}

#[test]
fn softmax_and_energy() {
    let logits = [1.0, 2.0, 3.0, 0.0, 0.0, 0.0];
    let mask = [1.0, 1.0, 0.0, 1.0, 1.0, 1.0];
    let mut out = [0.0; 6];
    assert_eq!(
        unsafe { mmg_row_softmax(logits.as_ptr(), mask.as_ptr(), 2, 3, out.as_mut_ptr()) },
        MmgStatus::Ok
    );
    assert_eq!(out[2], 0.0);
    assert!((out[0] + out[1] - 1.0).abs() < 1e-12);
    assert!((out[3] - 1.0 / 3.0).abs() < 1e-12);

    let x = [1.0, 0.0, 0.0, 1.0];
    let adj = [0.0, 1.0, 1.0, 0.0];
    let mut e = f64::NAN;
    assert_eq!(
        unsafe { mmg_dirichlet_energy(x.as_ptr(), 2, 2, adj.as_ptr(), &mut e) },
        MmgStatus::Ok
    );
    assert!(e > 0.0);
    let same = [1.0, 2.0, 1.0, 2.0];
    unsafe { mmg_dirichlet_energy(same.as_ptr(), 2, 2, adj.as_ptr(), &mut e) };
    assert!(e.abs() < 1e-12);
}

#[test]
fn classify_through_c_strings() {
    let texts: Vec<CString> = ["red cotton shirt", "leather boot", "wool scarf"]
        .into_iter()
        .map(|s| CString::new(s).unwrap())
        .collect();
    let ptrs: Vec<_> = texts.iter().map(|s| s.as_ptr()).collect();
    let ids = [3u32, 7, 9];
    let response = CString::new("a leather boot").unwrap();
    let mut class = 0;
    let status =
        unsafe { mmg_classify(response.as_ptr(), ids.as_ptr(), ptrs.as_ptr(), ids.len(), &mut class) };
    assert_eq!(status, MmgStatus::Ok);
    assert_eq!(class, 7);

    let empty = unsafe { mmg_classify(response.as_ptr(), ptr::null(), ptr::null(), 0, &mut class) };
    assert_eq!(empty, MmgStatus::Contract);
    let dup = [3u32, 3, 9];
    let status =
        unsafe { mmg_classify(response.as_ptr(), dup.as_ptr(), ptrs.as_ptr(), 3, &mut class) };
    assert_eq!(status, MmgStatus::Contract);
}

#[test]
fn version_and_error_buffer_truncation() {
    let v = unsafe { CStr::from_ptr(mmg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let mut g = ptr::null_mut();
    unsafe { mmg_graph_from_json(ptr::null(), &mut g) };
    let full = unsafe { mmg_last_error_message(ptr::null_mut(), 0) };
    let mut buf = [1 as std::ffi::c_char; 4];
    assert_eq!(unsafe { mmg_last_error_message(buf.as_mut_ptr(), 4) }, full);
    assert_eq!(buf[3], 0);
}

#[test]
fn header_declares_every_export() {
    let header = include_str!("../include/mmgraph.h");
    for name in [
        "mmg_last_error_message",
        "mmg_version",
        "mmg_graph_from_json",
        "mmg_graph_load",
        "mmg_graph_free",
        "mmg_subgraph_induce",
        "mmg_subgraph_nodes",
        "mmg_subgraph_adjacency",
        "mmg_row_softmax",
        "mmg_diffuse",
        "mmg_ppr",
        "mmg_dirichlet_energy",
        "mmg_classify",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}
