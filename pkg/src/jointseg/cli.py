"""Command-line front end: ``jointseg segment | simulate | tensor-features``.

Exit codes: 0 success, 2 usage/config/protocol, 3 data/format/IO,
4 numerical failure. Errors print one line ``error: <category>: <message>``.
"""

from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

import numpy as np

from . import pipeline
from .config import read_config
from .dti import DWIProtocol, tensor_features
from .errors import ConfigError, JointSegError
from .gem import DiffusionFeatures
from .nifti import read_nifti, write_nifti
from .textio import read_affine, read_btable
from .volume import GridSpec, TensorVolume, Volume, logeuclidean_resample

log = logging.getLogger("jointseg")


def _dwi_inputs(args):
    if args.dwi is None:
        return None, None
    proto = DWIProtocol(*read_btable(args.bval, args.bvec))
    return read_nifti(args.dwi), proto


def cmd_segment(args) -> int:
    cfg = read_config(args.config, require_atlas=True, atlas=args.atlas)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.threads is not None:
        cfg.threads = args.threads
    if args.deterministic:
        cfg.deterministic = True
    if args.resolution is not None:
        cfg.resolution = args.resolution
    atlas, groups = pipeline.load_atlas(cfg.atlas)
    t1 = read_nifti(args.t1)
    features, dwi, proto = None, None, None
    if args.fa is not None or args.dirs is not None:
        if args.fa is None or args.dirs is None:
            raise ConfigError("--fa and --dirs must be given together")
        features = DiffusionFeatures(read_nifti(args.fa), read_nifti(args.dirs))
    else:
        dwi, proto = _dwi_inputs(args)
        if dwi is None:
            raise ConfigError("give --fa/--dirs or --dwi/--bval/--bvec")
    affine = read_affine(args.affine) if args.affine else None
    out = pipeline.segment(t1, atlas, cfg, features, dwi, proto, affine, groups, cfg.threads)
    pipeline.write_segmentation(out, args.out_dir, qc=args.qc)
    log.info("wrote %s", args.out_dir)
    return 0


def cmd_simulate(args) -> int:
    cfg = read_config(args.config)
    if args.n_classes is not None:
        cfg.simulate.n_classes = args.n_classes
    pipeline.simulate(cfg, args.out_dir, args.seed)
    return 0


def cmd_tensor_features(args) -> int:
    if args.tensor is not None:
        tensors = read_nifti(args.tensor)
        tensors = TensorVolume(tensors.grid, tensors.data)
        if args.resolution is not None:
            tensors = logeuclidean_resample(tensors, _iso_grid(tensors.grid, args.resolution))
        feats = tensor_features(tensors)
    else:
        if args.dwi is None:
            raise ConfigError("give --dwi with --bval/--bvec, or --tensor")
        dwi, proto = _dwi_inputs(args)
        target = _iso_grid(dwi.grid, args.resolution) if args.resolution is not None else None
        feats, tensors = pipeline.features_from_dwi(dwi, proto, args.shell, target)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_nifti(feats.fa, out / "fa.nii.gz", np.float32)
    write_nifti(feats.dirs, out / "dirs.nii.gz", np.float32)
    if args.write_tensors:
        write_nifti(Volume(tensors.grid, tensors.data), out / "tensors.nii.gz", np.float64)
    return 0


def _iso_grid(grid: GridSpec, res):
    spacing = grid.spacing
    extent = (np.asarray(grid.dims) - 1) * spacing
    dims = tuple(int(n) for n in np.floor(extent / res + 1e-9).astype(int) + 1)
    aff = grid.affine.copy()
    aff[:3, :3] = grid.affine[:3, :3] / spacing * res
    return GridSpec(dims, aff)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="jointseg", description="Joint sMRI/dMRI Bayesian segmentation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("segment", help="segment a subject with a probabilistic atlas")
    s.add_argument("--t1", required=True, help="structural volume (.nii/.nii.gz)")
    s.add_argument("--fa", help="fractional anisotropy volume")
    s.add_argument("--dirs", help="principal direction volume (3 channels)")
    s.add_argument("--dwi", help="diffusion-weighted volume, instead of --fa/--dirs")
    s.add_argument("--bval")
    s.add_argument("--bvec")
    s.add_argument("--atlas", help="atlas probabilities; overrides the config")
    s.add_argument("--config", help="YAML run configuration")
    s.add_argument("--affine", help="4x4 text affine (subject world -> atlas world); skips registration")
    s.add_argument("--out-dir", required=True)
    s.add_argument("--seed", type=int)
    s.add_argument("--threads", type=int)
    s.add_argument("--deterministic", action="store_true",
                   help="deterministic reductions (results never depend on --threads)")
    s.add_argument("--resolution", type=float, help="working grid spacing in mm")
    s.add_argument("--qc", action="store_true", help="write PNG label overlays")
    s.set_defaults(func=cmd_segment)

    m = sub.add_parser("simulate", help="write a synthetic atlas and subject")
    m.add_argument("--out-dir", required=True)
    m.add_argument("--config")
    m.add_argument("--seed", type=int)
    m.add_argument("--n-classes", type=int)
    m.set_defaults(func=cmd_simulate)

    t = sub.add_parser("tensor-features", help="fit tensors and write FA / principal directions")
    t.add_argument("--dwi")
    t.add_argument("--bval")
    t.add_argument("--bvec")
    t.add_argument("--tensor", help="6-channel tensor volume (xx yy zz xy xz yz)")
    t.add_argument("--shell", type=float, help="keep only this b-value shell (plus b=0)")
    t.add_argument("--resolution", type=float, help="log-Euclidean resampling to this spacing")
    t.add_argument("--write-tensors", action="store_true")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_tensor_features)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        with warnings.catch_warnings():
            if not args.verbose:
                warnings.simplefilter("ignore", RuntimeWarning)
            return args.func(args)
    except JointSegError as exc:
        print(f"error: {exc.category}: {_one_line(exc)}", file=sys.stderr)
        return exc.exit_code
    except OSError as exc:
        print(f"error: io: {_one_line(exc)}", file=sys.stderr)
        return 3


def _one_line(exc):
    return " ".join(str(exc).split())


if __name__ == "__main__":
    sys.exit(main())
