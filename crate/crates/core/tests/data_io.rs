use std::fs;
use std::path::{Path, PathBuf};

use herald_core::data::{
    self, convert_hypergcn, graph_to_hypergraph, load_node_dataset, load_tu_dataset,
    save_node_dataset, GraphDataset, PlainGraph,
};
use herald_core::hypergraph::Hypergraph;
use herald_core::{Error, Tensor};

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures")
        .join(name)
}

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn tiny_fixture_parses_exactly() {
    let ds = load_node_dataset(&fixture("tiny4.json"), 0).unwrap();
    let expected = Hypergraph::with_weights(
        4,
        vec![vec![0, 1, 2], vec![2, 3], vec![1, 3]],
        vec![1.0, 2.0, 0.5],
    )
    .unwrap();
    assert_eq!(ds.name, "tiny4");
    assert_eq!(ds.hypergraph, expected);
    assert_eq!(
        ds.features,
        Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.5, 0.5], [0.25, 0.75]]).unwrap()
    );
    assert_eq!(ds.labels, vec![0, 1, 0, 1]);
    assert_eq!(
        (ds.train.clone(), ds.val.clone(), ds.test.clone()),
        (vec![0, 1], vec![2], vec![3])
    );
}

#[test]
fn canonical_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = load_node_dataset(&fixture("tiny4.json"), 0).unwrap();
    let path = dir.path().join("copy.json");
    save_node_dataset(&ds, &path).unwrap();
    assert_eq!(load_node_dataset(&path, 99).unwrap(), ds);
}

fn doc(overrides: &[(&str, &str)]) -> String {
    let mut fields = vec![
        ("format", "\"herald-hypergraph-dataset\""),
        ("version", "1"),
        ("name", "\"t\""),
        ("num_nodes", "3"),
        ("num_classes", "2"),
        ("hyperedges", "[[0, 1], [1, 2]]"),
        ("features", "[[1.0], [2.0], [3.0]]"),
        ("labels", "[0, 1, 0]"),
        ("masks", "{\"train\": [0], \"val\": [1], \"test\": [2]}"),
    ];
    for (k, v) in overrides {
        match fields.iter_mut().find(|(f, _)| f == k) {
            Some(slot) => slot.1 = v,
            None => fields.push((k, v)),
        }
    }
    let body: Vec<String> = fields
        .iter()
        .filter(|(_, v)| !v.is_empty())
        .map(|(k, v)| format!("  \"{k}\": {v}"))
        .collect();
    format!("{{\n{}\n}}\n", body.join(",\n"))
}

#[test]
fn malformed_documents_report_location() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "bad.json",
        "{\n  \"format\": \"herald-hypergraph-dataset\",\n  \"version\": 1,\n  oops\n}",
    );
    match load_node_dataset(&p, 0) {
        Err(Error::Parse { context, message }) => {
            assert!(context.ends_with("bad.json"));
            assert!(message.contains("line 4"), "{message}");
        }
        other => panic!("expected parse error, got {other:?}"),
    }
    let p = write(
        dir.path(),
        "tag.json",
        &doc(&[("format", "\"something-else\"")]),
    );
    assert!(matches!(load_node_dataset(&p, 0), Err(Error::Parse { .. })));
    let p = write(dir.path(), "version.json", &doc(&[("version", "7")]));
    assert!(matches!(load_node_dataset(&p, 0), Err(Error::Parse { .. })));
}

#[test]
fn invalid_contents_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    for (name, over) in [
        ("label", ("labels", "[0, 2, 0]")),
        ("ragged", ("features", "[[1.0], [2.0, 1.0], [3.0]]")),
        ("rows", ("features", "[[1.0], [2.0]]")),
        ("member", ("hyperedges", "[[0, 5]]")),
        ("empty_edge", ("hyperedges", "[[0, 1], []]")),
        (
            "overlap",
            ("masks", "{\"train\": [0], \"val\": [0], \"test\": [2]}"),
        ),
        ("weights", ("edge_weights", "[1.0, -1.0]")),
    ] {
        let p = write(dir.path(), &format!("{name}.json"), &doc(&[over]));
        assert!(
            matches!(load_node_dataset(&p, 0), Err(Error::Validation(_))),
            "{name} should fail validation"
        );
    }
}

#[test]
fn missing_masks_get_a_planted_split_and_isolated_nodes_are_patched() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(
        dir.path(),
        "nomask.json",
        &doc(&[
            ("num_nodes", "4"),
            ("features", "[[1.0], [2.0], [3.0], [4.0]]"),
            ("labels", "[0, 1, 0, 1]"),
            ("masks", ""),
        ]),
    );
    let ds = load_node_dataset(&p, 3).unwrap();
    assert_eq!(
        ds.hypergraph.hyperedges(),
        &[vec![0, 1], vec![1, 2], vec![3]]
    );
    let mut all: Vec<usize> = [ds.train.clone(), ds.val.clone(), ds.test.clone()].concat();
    all.sort_unstable();
    all.dedup();
    assert_eq!(all.len(), ds.train.len() + ds.val.len() + ds.test.len());
    assert_eq!(load_node_dataset(&p, 3).unwrap(), ds);
}

#[test]
fn tu_fixture_parses_exactly() {
    let tu = load_tu_dataset(&fixture("TOY")).unwrap();
    assert_eq!(tu.name, "TOY");
    assert_eq!(tu.num_classes, 2);
    assert_eq!(tu.class_values, vec![-1, 1]);
    assert_eq!(tu.num_node_labels, Some(3));
    assert_eq!(
        tu.graphs,
        vec![
            PlainGraph {
                num_nodes: 3,
                edges: vec![(0, 1), (1, 2)],
                node_labels: Some(vec![1, 0, 1]),
                label: 0,
            },
            PlainGraph {
                num_nodes: 4,
                edges: vec![(0, 1), (0, 2), (1, 2)],
                node_labels: Some(vec![0, 0, 2, 1]),
                label: 1,
            },
        ]
    );
    let ds = GraphDataset::from_tu(&tu, 8).unwrap();
    assert_eq!(ds.num_features, 3);
    assert_eq!(ds.samples[1].features.row_slice(2), &[0.0, 0.0, 1.0]);
    assert_eq!(ds.samples[1].hypergraph.hyperedges()[3], vec![3]);
    assert_eq!(ds.samples[0].hypergraph.hyperedges()[1], vec![0, 1, 2]);
}

fn copy_toy(dir: &Path, skip_node_labels: bool) {
    for entry in fs::read_dir(fixture("TOY")).unwrap() {
        let p = entry.unwrap().path();
        let name = p.file_name().unwrap().to_string_lossy().into_owned();
        if skip_node_labels && name.contains("node_labels") {
            continue;
        }
        fs::copy(&p, dir.join(name)).unwrap();
    }
}

#[test]
fn tu_degree_features_without_node_labels() {
    let dir = tempfile::tempdir().unwrap();
    copy_toy(dir.path(), true);
    let tu = load_tu_dataset(dir.path()).unwrap();
    assert_eq!(tu.num_node_labels, None);
    let ds = GraphDataset::from_tu(&tu, 1).unwrap();
    assert_eq!(ds.num_features, 2);
    // degrees 2, 2, 2, 0 with the cap at 1
    let x = &ds.samples[1].features;
    assert_eq!(
        x,
        &Tensor::from_rows(&[[0.0, 1.0], [0.0, 1.0], [0.0, 1.0], [1.0, 0.0]]).unwrap()
    );
}

#[test]
fn tu_inconsistencies_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    copy_toy(dir.path(), true);
    // a third graph with no nodes
    write(dir.path(), "TOY_graph_labels.txt", "-1\n1\n1\n");
    assert!(matches!(
        load_tu_dataset(dir.path()),
        Err(Error::Validation(_))
    ));

    let dir = tempfile::tempdir().unwrap();
    copy_toy(dir.path(), true);
    write(dir.path(), "TOY_A.txt", "1, 2\n3, 4\n");
    assert!(matches!(
        load_tu_dataset(dir.path()),
        Err(Error::Validation(_))
    ));

    let dir = tempfile::tempdir().unwrap();
    copy_toy(dir.path(), true);
    write(dir.path(), "TOY_A.txt", "1, 2\n2, x\n");
    match load_tu_dataset(dir.path()) {
        Err(Error::Parse { context, .. }) => assert!(context.ends_with("TOY_A.txt:2")),
        other => panic!("expected parse error, got {other:?}"),
    }

    let dir = tempfile::tempdir().unwrap();
    copy_toy(dir.path(), true);
    write(dir.path(), "TOY_A.txt", "1, 9\n");
    assert!(matches!(
        load_tu_dataset(dir.path()),
        Err(Error::Validation(_))
    ));
}

#[test]
fn neighbourhood_hypergraph_preserves_node_count() {
    let g = PlainGraph {
        num_nodes: 5,
        edges: vec![(0, 1), (1, 2), (2, 3)],
        node_labels: None,
        label: 0,
    };
    let h = graph_to_hypergraph(&g);
    assert_eq!(h.num_nodes(), 5);
    assert_eq!(h.num_edges(), 5);
    assert_eq!(h.hyperedges()[4], vec![4]);
    assert!(h.edge_weights().iter().all(|&w| w == 1.0));
}

#[test]
fn converter_reads_sparse_export_with_split() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    write(
        d,
        "hypergraph.json",
        r#"{"a": [0, 1], "b": [1, 2, 3], "c": [4, 5]}"#,
    );
    write(
        d,
        "features.json",
        r#"{"shape": [6, 3], "rows": [0, 1, 2, 3, 4, 5], "cols": [0, 1, 2, 0, 1, 2], "values": [1, 1, 1, 1, 1, 1]}"#,
    );
    write(
        d,
        "labels.json",
        "[[1, 0], [0, 1], [1, 0], [0, 1], [1, 0], [0, 1]]",
    );
    fs::create_dir(d.join("splits")).unwrap();
    write(
        &d.join("splits"),
        "1.json",
        r#"{"train": [0, 1], "test": [2, 3, 4, 5]}"#,
    );
    let ds = convert_hypergcn(d, "toy", Some(1), 0).unwrap();
    assert_eq!(ds.num_nodes(), 6);
    assert_eq!(ds.hypergraph.num_edges(), 3);
    assert_eq!(ds.labels, vec![0, 1, 0, 1, 0, 1]);
    assert_eq!(ds.features.get(5, 2), 1.0);
    assert_eq!(ds.train, vec![0, 1]);
    assert_eq!(ds.val.len(), 2);
    assert_eq!(ds.test.len(), 2);
    let out = d.join("toy.json");
    save_node_dataset(&ds, &out).unwrap();
    assert_eq!(load_node_dataset(&out, 0).unwrap(), ds);

    let unsplit = convert_hypergcn(d, "toy", None, 0).unwrap();
    assert_eq!(unsplit.features, ds.features);
    assert_eq!(unsplit.train.len(), 4);
}

#[test]
fn dataset_names_resolve_under_the_data_root() {
    let dir = tempfile::tempdir().unwrap();
    fs::copy(fixture("tiny4.json"), dir.path().join("tiny.json")).unwrap();
    fs::create_dir(dir.path().join("TOY")).unwrap();
    copy_toy(&dir.path().join("TOY"), false);
    std::env::set_var(data::DATA_DIR_ENV, dir.path());
    assert_eq!(
        data::find_node_dataset("tiny"),
        Some(dir.path().join("tiny.json"))
    );
    assert_eq!(data::find_tu_dataset("toy"), Some(dir.path().join("TOY")));
    assert_eq!(data::find_node_dataset("absent"), None);
}
