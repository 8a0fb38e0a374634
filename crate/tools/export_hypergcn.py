#!/usr/bin/env python3
"""Dump a HyperGCN pickle release to the JSON layout read by `herald convert-dataset`.

Usage: export_hypergcn.py <release-dir> <out-dir>

<release-dir> is e.g. data/cocitation/cora from the HyperGCN repository and
holds features.pickle, hypergraph.pickle, labels.pickle and splits/<k>.pickle.
Requires numpy and scipy to unpickle the feature matrix.
"""

import json
import pickle
import sys
from pathlib import Path


def load(path):
    with open(path, "rb") as f:
        return pickle.load(f)


def to_int_list(xs):
    return [int(x) for x in xs]


def export_features(features):
    if hasattr(features, "tocoo"):
        coo = features.tocoo()
        return {
            "shape": [int(coo.shape[0]), int(coo.shape[1])],
            "rows": to_int_list(coo.row),
            "cols": to_int_list(coo.col),
            "values": [float(v) for v in coo.data],
        }
    return [[float(v) for v in row] for row in features]


def export_labels(labels):
    rows = list(labels)
    if rows and hasattr(rows[0], "__len__"):
        return [[float(v) for v in row] for row in rows]
    return to_int_list(rows)


def main(argv):
    if len(argv) != 3:
        sys.exit(__doc__)
    src, out = Path(argv[1]), Path(argv[2])
    (out / "splits").mkdir(parents=True, exist_ok=True)

    hypergraph = load(src / "hypergraph.pickle")
    edges = {str(k): sorted(to_int_list(v)) for k, v in hypergraph.items()}
    (out / "hypergraph.json").write_text(json.dumps(edges))
    (out / "features.json").write_text(json.dumps(export_features(load(src / "features.pickle"))))
    (out / "labels.json").write_text(json.dumps(export_labels(load(src / "labels.pickle"))))

    for split in sorted((src / "splits").glob("*.pickle")):
        s = load(split)
        doc = {k: to_int_list(s[k]) for k in ("train", "val", "test") if k in s}
        (out / "splits" / f"{split.stem}.json").write_text(json.dumps(doc))


if __name__ == "__main__":
    main(sys.argv)
