use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{MultimodalGraph, NodeId, NodeRecord};
use crate::error::{Error, Result};
use crate::Modality;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphFile {
    nodes: Vec<NodeRecord>,
    #[serde(default)]
    text_edges: Vec<[NodeId; 2]>,
    #[serde(default)]
    image_edges: Vec<[NodeId; 2]>,
}

pub fn load_graph(path: impl AsRef<Path>) -> Result<MultimodalGraph> {
    let src = std::fs::read_to_string(path.as_ref())?;
    parse_graph(&src)
}

/// Parses the JSON graph format. Every rejection names the line of the
/// offending node or edge.
pub fn parse_graph(src: &str) -> Result<MultimodalGraph> {
    let file: GraphFile = serde_json::from_str(src)
        .map_err(|e| Error::Validation(format!("line {}: {e}", e.line())))?;
    let anchor = |key: &str, index: usize, msg: String| {
        let line = element_line(src, key, index).unwrap_or(0);
        Error::Validation(format!("line {line}: {key}[{index}]: {msg}"))
    };
    let mut graph = MultimodalGraph::new(Vec::new(), &[], &[])?;
    let mut image_dim = None;
    for (i, node) in file.nodes.into_iter().enumerate() {
        super::validate_node(&node, &mut image_dim).map_err(|e| anchor("nodes", i, e.to_string()))?;
        let id = node.id;
        if graph.nodes.insert(id, node).is_some() {
            return Err(anchor("nodes", i, format!("duplicate node id {id}")));
        }
    }
    for (key, modality, edges) in [
        ("text_edges", Modality::Text, &file.text_edges),
        ("image_edges", Modality::Image, &file.image_edges),
    ] {
        for (i, [a, b]) in edges.iter().enumerate() {
            graph
                .insert_edge(modality, *a, *b)
                .map_err(|msg| anchor(key, i, msg))?;
        }
    }
    Ok(graph)
}

/// Serializes with nodes and edges in ascending order, so equal graphs give
/// equal bytes.
pub fn write_graph(graph: &MultimodalGraph) -> Result<String> {
    let file = GraphFile {
        nodes: graph.nodes.values().cloned().collect(),
        text_edges: graph.text_edges.iter().map(|&(a, b)| [a, b]).collect(),
        image_edges: graph.image_edges.iter().map(|&(a, b)| [a, b]).collect(),
    };
    Ok(serde_json::to_string_pretty(&file)?)
}

/// 1-based line on which element `index` of the top-level array `key` starts.
fn element_line(src: &str, key: &str, index: usize) -> Option<usize> {
    let mut line = 1;
    let mut depth = 0usize;
    let mut in_string = false;
    let mut escaped = false;
    let mut string_start = 0;
    let mut last_string: Option<&str> = None;
    let mut current_key: Option<&str> = None;
    let mut in_target = false;
    let mut expect_element = false;
    let mut seen = 0usize;
    for (pos, ch) in src.char_indices() {
        if ch == '\n' {
            line += 1;
        }
        if in_string {
            if escaped {
                escaped = false;
            } else if ch == '\\' {
                escaped = true;
            } else if ch == '"' {
                in_string = false;
                last_string = Some(&src[string_start..pos]);
            }
            continue;
        }
        if in_target && expect_element && depth == 2 && !ch.is_whitespace() && ch != ']' {
            if seen == index {
                return Some(line);
            }
            seen += 1;
            expect_element = false;
        }
        match ch {
            '"' => {
                in_string = true;
                string_start = pos + 1;
            }
            ':' if depth == 1 => current_key = last_string.take(),
            '[' | '{' => {
                depth += 1;
                if depth == 2 && ch == '[' && current_key == Some(key) {
                    in_target = true;
                    expect_element = true;
                }
            }
            ']' | '}' => {
                if depth == 2 && in_target {
                    return None;
                }
                depth = depth.saturating_sub(1);
            }
            ',' if depth == 2 && in_target => expect_element = true,
            _ => {}
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;

    const SAMPLE: &str = r#"{
  "nodes": [
    {"id": 0, "text": "a [b] c", "image_feature": null},
    {"id": 1, "text": "second", "image_feature": [0.5, 1.5]},
    {"id": 2, "text": null, "image_feature": [1.0, 2.0]}
  ],
  "text_edges": [[0, 1]],
  "image_edges": [
    [1, 2]
  ]
}"#;

    #[test]
    fn parses_sample() {
        let g = parse_graph(SAMPLE).unwrap();
        assert_eq!(g.node_count(), 3);
        assert!(g.has_edge(Modality::Text, 1, 0));
        assert!(g.has_edge(Modality::Image, 2, 1));
        assert_eq!(g.image_dim(), Some(2));
    }

    #[test]
    fn write_then_parse_is_identity() {
        let g = parse_graph(SAMPLE).unwrap();
        let text = write_graph(&g).unwrap();
        assert_eq!(parse_graph(&text).unwrap(), g);
        assert_eq!(write_graph(&parse_graph(&text).unwrap()).unwrap(), text);
    }

    #[test]
    fn element_lines() {
        assert_eq!(element_line(SAMPLE, "nodes", 0), Some(3));
        assert_eq!(element_line(SAMPLE, "nodes", 2), Some(5));
        assert_eq!(element_line(SAMPLE, "text_edges", 0), Some(7));
        assert_eq!(element_line(SAMPLE, "image_edges", 0), Some(9));
        assert_eq!(element_line(SAMPLE, "image_edges", 1), None);
    }

    #[test]
    fn invariant_violations_are_line_anchored() {
        let bad_edge = SAMPLE.replace("[[0, 1]]", "[[0, 2]]");
        let err = parse_graph(&bad_edge).unwrap_err().to_string();
        assert!(err.contains("line 7"), "{err}");
        assert!(err.contains("no text attribute"), "{err}");

        let bad_node = SAMPLE.replace(r#""text": null, "image_feature": [1.0, 2.0]"#, r#""text": null, "image_feature": null"#);
        let err = parse_graph(&bad_node).unwrap_err().to_string();
        assert!(err.contains("line 5"), "{err}");

        let syntax = SAMPLE.replace("\"id\": 1,", "\"id\": ,");
        let err = parse_graph(&syntax).unwrap_err().to_string();
        assert!(err.contains("line 4"), "{err}");
    }
}
