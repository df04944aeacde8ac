"""File formats: JSON documents for meshes, masks, models and contours; CSV tables.

Floats are written with Python's shortest round-trip repr, so reading a file back
gives bit-identical arrays and rewriting it gives identical bytes.
"""
from __future__ import annotations

import csv
import hashlib
import json
import os
from pathlib import Path

import numpy as np

from .contours import SliceContour, SliceSet
from .errors import ArchfitError
from .mesh import CenterlineCurve, Plane, TubeMesh, VoxelMask
from .ssm import FORMAT_VERSION, ShapeModel


class FormatError(ArchfitError):
    pass


def _dump(path, doc):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    text = json.dumps(doc, separators=(",", ":"), sort_keys=True, allow_nan=False)
    path.write_text(text + "\n")
    return path


def _load(path, kind):
    doc = json.loads(Path(path).read_text())
    if doc.get("kind") != kind:
        raise FormatError(f"{path}: expected a {kind!r} document, got {doc.get('kind')!r}")
    return doc


def _rows(a):
    return np.asarray(a, dtype=float).tolist()


# meshes -------------------------------------------------------------------------------


def mesh_doc(mesh: TubeMesh, extra=None) -> dict:
    doc = {
        "kind": "mesh",
        "n_rings": mesh.n_rings,
        "pts_per_ring": mesh.pts_per_ring,
        "nodes": _rows(mesh.nodes),
        "cells": mesh.cells.tolist(),
    }
    if extra:
        doc["fields"] = {k: _rows(v) for k, v in extra.items()}
    return doc


def save_mesh(path, mesh: TubeMesh, fields=None):
    """``fields`` maps names to per-node or per-cell scalar arrays (e.g. wall motion)."""
    return _dump(path, mesh_doc(mesh, fields))


def load_mesh(path) -> TubeMesh:
    doc = _load(path, "mesh")
    mesh = TubeMesh(np.array(doc["nodes"], dtype=float), doc["n_rings"], doc["pts_per_ring"])
    if doc["cells"] != mesh.cells.tolist():
        raise FormatError(f"{path}: cells do not match the tube topology")
    return mesh


# voxel masks ----------------------------------------------------------------------------


def rle_encode(flags) -> dict:
    """Run lengths of a flat boolean array, starting with the value of the first run."""
    flat = np.asarray(flags, dtype=bool).ravel()
    if flat.size == 0:
        return {"start": False, "runs": []}
    edges = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    return {"start": bool(flat[0]), "runs": np.diff(bounds).tolist()}


def rle_decode(rle, size) -> np.ndarray:
    runs = np.asarray(rle["runs"], dtype=np.int64)
    if runs.sum() != size:
        raise FormatError("run lengths do not add up to the grid size")
    vals = (np.arange(len(runs)) % 2 == 0) == bool(rle["start"])
    return np.repeat(vals, runs)


def save_mask(path, mask: VoxelMask):
    return _dump(path, {
        "kind": "voxel_mask",
        "origin": _rows(mask.origin),
        "spacing": _rows(mask.spacing),
        "dims": [int(d) for d in mask.dims],
        "occupancy": rle_encode(mask.occupancy),
    })


def load_mask(path) -> VoxelMask:
    doc = _load(path, "voxel_mask")
    dims = tuple(doc["dims"])
    occ = rle_decode(doc["occupancy"], int(np.prod(dims))).reshape(dims)
    return VoxelMask(np.array(doc["origin"]), doc["spacing"], dims, occ)


# shape models ---------------------------------------------------------------------------


def save_model(path, model: ShapeModel):
    return _dump(path, {
        "kind": "shape_model",
        "format_version": FORMAT_VERSION,
        "topology": list(model.topology),
        "mean": model.mean.ravel().tolist(),
        "modes": [m.ravel().tolist() for m in model.modes],
        "sigmas": model.sigmas.tolist(),
        "explained_variance_ratio": model.explained_variance_ratio.tolist(),
    })


def load_model(path) -> ShapeModel:
    doc = _load(path, "shape_model")
    if doc.get("format_version") != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported model format {doc.get('format_version')}")
    n_rings, ppr = doc["topology"]
    n = n_rings * ppr
    modes = np.array(doc["modes"], dtype=float).reshape(-1, n, 3)
    return ShapeModel(np.array(doc["mean"]).reshape(n, 3), modes, doc["sigmas"],
                      doc["explained_variance_ratio"], n_rings, ppr)


# contours and centerlines -------------------------------------------------------------


def _contour_doc(c: SliceContour) -> dict:
    return {
        "frame": int(c.frame),
        "station": None if c.station is None else int(c.station),
        "plane": {"origin": _rows(c.plane.origin), "normal": _rows(c.plane.normal)},
        "points": _rows(c.points),
    }


def save_slices(path, slices: SliceSet, meta=None):
    return _dump(path, {
        "kind": "slice_set",
        "frames": [[_contour_doc(c) for c in frame] for frame in slices.frames],
        "meta": meta or {},
    })


def load_slices(path) -> SliceSet:
    doc = _load(path, "slice_set")
    frames = []
    for frame in doc["frames"]:
        frames.append([
            SliceContour(Plane(np.array(c["plane"]["origin"]), np.array(c["plane"]["normal"])),
                         np.array(c["points"], dtype=float), c["frame"], c["station"])
            for c in frame
        ])
    return SliceSet(frames)


def save_centerlines(path, curves):
    return _dump(path, {"kind": "centerlines", "curves": [_rows(c.points) for c in curves]})


def load_centerlines(path) -> list:
    return [CenterlineCurve(np.array(c)) for c in _load(path, "centerlines")["curves"]]


def save_json(path, kind, payload):
    return _dump(path, {"kind": kind, **payload})


def load_json(path, kind):
    return _load(path, kind)


# tables -------------------------------------------------------------------------------


def write_csv(path, rows, fieldnames=None):
    rows = list(rows)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = list(rows[0]) if rows else []
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: _cell(r.get(k)) for k in fieldnames})
    return path


def _cell(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, np.integer):
        return int(v)
    return v


def read_csv(path) -> list:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def digests(paths) -> dict:
    return {os.fspath(p): sha256(p) for p in paths}
