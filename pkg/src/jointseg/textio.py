"""Small text formats: affines, b-tables, atlas class manifests, JSON reports."""

from __future__ import annotations

import json
import warnings
from pathlib import Path

import numpy as np

from .errors import DataError, FormatError, ProtocolError
from .gem import SharingGroups


def read_affine(path) -> np.ndarray:
    """4x4 (or 3x4) whitespace-separated matrix mapping subject to atlas world mm."""
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", UserWarning)  # empty file; caught by the shape check
            mat = np.loadtxt(path, ndmin=2)
    except (OSError, ValueError) as exc:
        raise FormatError(f"cannot read affine {path}: {exc}") from None
    if mat.shape == (3, 4):
        mat = np.vstack([mat, [0.0, 0.0, 0.0, 1.0]])
    if mat.shape != (4, 4) or not np.allclose(mat[3], [0, 0, 0, 1]):
        raise FormatError(f"{path}: expected a 4x4 affine with last row 0 0 0 1")
    if abs(np.linalg.det(mat[:3, :3])) < 1e-12:
        raise DataError(f"{path}: affine is singular")
    return mat


def write_affine(path, mat):
    np.savetxt(path, np.asarray(mat, float), fmt="%.17g")


def read_btable(bval_path, bvec_path):
    """bvals (one row) and bvecs (three rows, or one row of three per channel)."""
    out = []
    for kind, path in (("bvals", bval_path), ("bvecs", bvec_path)):
        if path is None:
            raise ProtocolError(f"missing {kind} file")
        try:
            out.append(np.loadtxt(path, ndmin=2))
        except OSError:
            raise ProtocolError(f"cannot read {kind} file {path}") from None
        except ValueError as exc:
            raise ProtocolError(f"malformed {kind} file {path}: {exc}") from None
    bvals, bvecs = out
    bvals = bvals.ravel()
    if bvecs.shape[0] == 3 and bvecs.shape[1] == len(bvals):
        bvecs = bvecs.T
    if bvecs.shape != (len(bvals), 3):
        raise ProtocolError(f"bvecs shape {bvecs.shape} does not match {len(bvals)} b-values")
    return bvals, bvecs


def write_btable(bval_path, bvec_path, bvals, bvecs):
    np.savetxt(bval_path, np.asarray(bvals, float)[None, :], fmt="%.10g")
    np.savetxt(bvec_path, np.asarray(bvecs, float).T, fmt="%.17g")


def manifest_path(atlas_path) -> Path:
    """``<stem>.classes.txt`` next to the atlas volume."""
    p = Path(atlas_path)
    name = p.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    return p.with_name(name + ".classes.txt")


def read_manifest(path, n_channels):
    """Class names and sharing groups, one line per atlas channel.

    Lines read ``index name [gaussian_group beta_group dsw_group]``; ``#``
    starts a comment. Missing group columns default to one group per class.
    """
    names, groups = [None] * n_channels, [[None] * n_channels for _ in range(3)]
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if len(parts) not in (2, 5):
            raise FormatError(f"{path}:{lineno}: expected 'index name' or five columns")
        try:
            idx = int(parts[0])
        except ValueError:
            raise FormatError(f"{path}:{lineno}: bad channel index {parts[0]!r}") from None
        if not 0 <= idx < n_channels or names[idx] is not None:
            raise FormatError(f"{path}:{lineno}: channel index {idx} out of range or repeated")
        names[idx] = parts[1]
        for k, g in enumerate(parts[2:]):
            groups[k][idx] = g
    if any(n is None for n in names):
        raise FormatError(f"{path}: manifest does not name every atlas channel")
    return names, groups


def write_manifest(path, names, sharing: SharingGroups = None):
    lines = ["# index name gaussian_group beta_group dsw_group"]
    for c, name in enumerate(names):
        if sharing is None:
            lines.append(f"{c} {name} {c} {c} {c}")
        else:
            lines.append(f"{c} {name} {sharing.gaussian[c]} {sharing.beta[c]} {sharing.dsw[c]}")
    Path(path).write_text("\n".join(lines) + "\n")


def _plain(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj).__name__}")


def write_json(path, data):
    Path(path).write_text(json.dumps(data, indent=2, sort_keys=True, default=_plain) + "\n")


def read_json(path):
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}:{exc.lineno}: {exc.msg}") from None
