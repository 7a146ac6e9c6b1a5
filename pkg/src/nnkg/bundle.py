"""On-disk graph bundle: binary triple arrays, dictionaries and a manifest.

Layout of a bundle directory::

    train.npy valid.npy test.npy   forward triples, int64 (n, 3)
    entities.dict relations.dict   ``id<TAB>name`` per line
    manifest.json                  counts and sha256 of every file

The per-split files hold only forward triples; inverse edges and the
adjacency index are rebuilt on load, which keeps the bundle small and the
bytes independent of the index layout.
"""

from __future__ import annotations

import hashlib
import json
import os

import numpy as np

from .kg import Dictionary, KGError, build_splits

FORMAT = "nnkg-graph"
VERSION = 1
SPLIT_NAMES = ("train", "valid", "test")


def file_hash(path):
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def save_bundle(directory, raw, entities, relations):
    """Write a bundle; returns the manifest dict."""
    os.makedirs(directory, exist_ok=True)
    files = {}
    for split in SPLIT_NAMES:
        name = f"{split}.npy"
        np.save(os.path.join(directory, name), np.ascontiguousarray(raw[split], dtype="<i8"))
        files[name] = None
    entities.save(os.path.join(directory, "entities.dict"))
    relations.save(os.path.join(directory, "relations.dict"))
    files["entities.dict"] = None
    files["relations.dict"] = None
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "entities": len(entities),
        "relations": len(relations),
        "triples": {s: int(len(raw[s])) for s in SPLIT_NAMES},
        "files": {name: file_hash(os.path.join(directory, name)) for name in sorted(files)},
    }
    with open(os.path.join(directory, "manifest.json"), "w", encoding="utf-8", newline="\n") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def find_bundle(path):
    """Accept a bundle directory or a run directory holding ``graph/``."""
    for candidate in (path, os.path.join(path, "graph")):
        if os.path.isfile(os.path.join(candidate, "manifest.json")):
            return candidate
    raise FileNotFoundError(f"no graph bundle (manifest.json) under {path}")


def read_manifest(directory):
    with open(os.path.join(directory, "manifest.json"), encoding="utf-8") as f:
        manifest = json.load(f)
    if manifest.get("format") != FORMAT:
        raise KGError(f"{directory}: not a graph bundle")
    if manifest.get("version") != VERSION:
        raise KGError(f"{directory}: bundle version {manifest.get('version')}, this build reads {VERSION}")
    return manifest


def load_bundle(path, check_hashes=True):
    """Returns ``(splits, raw, entities, relations, manifest)``."""
    directory = find_bundle(path)
    manifest = read_manifest(directory)
    if check_hashes:
        for name, digest in manifest["files"].items():
            if file_hash(os.path.join(directory, name)) != digest:
                raise KGError(f"{directory}/{name}: content hash does not match the manifest")
    entities = Dictionary.load(os.path.join(directory, "entities.dict"))
    relations = Dictionary.load(os.path.join(directory, "relations.dict"))
    raw = {}
    for split in SPLIT_NAMES:
        arr = np.load(os.path.join(directory, f"{split}.npy"), allow_pickle=False)
        if arr.ndim != 2 or arr.shape[1] != 3:
            raise KGError(f"{directory}/{split}.npy: expected an (n, 3) array, got shape {arr.shape}")
        raw[split] = arr.astype(np.int64)
    splits = build_splits(raw["train"], raw["valid"], raw["test"], len(entities), 2 * len(relations))
    return splits, raw, entities, relations, manifest


def stats_line(entities, relations, raw):
    """One-line dataset summary: entity, raw relation and per-split edge counts."""
    return (
        f"entities={len(entities)} relations={len(relations)} "
        f"train={len(raw['train'])} valid={len(raw['valid'])} test={len(raw['test'])}"
    )
