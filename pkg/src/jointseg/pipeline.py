"""End-to-end workflows behind the command line: simulate, tensor features, segment."""

from __future__ import annotations

import logging
import time
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import yaml

from . import synth
from .affine import RegistrationOptions, register_affine_mi
from .atlas import DeformationField, DeformedAtlas, ProbAtlas, control_grid_for
from .config import RunConfig
from .dti import DWIProtocol, fit_dti_wls, tensor_features
from .errors import ConfigError, DataError
from .gem import (ClassParams, DiffusionFeatures, GEMOptions, GEMResult, Hyperparams,
                  SharingGroups, run_gem, soft_template)
from .nifti import read_nifti, write_nifti
from .textio import manifest_path, read_manifest, write_json, write_manifest
from .volume import GridSpec, Volume, bounding_box, logeuclidean_resample, resample

log = logging.getLogger(__name__)


# -- inputs -----------------------------------------------------------------

def load_atlas(path):
    """Atlas volume plus the names/groups of its optional class manifest."""
    vol = read_nifti(path)
    data = vol.data.astype(float)
    total = data.sum(axis=3, keepdims=True)
    if np.any(data < 0) or not np.allclose(total, 1.0, atol=1e-4):
        raise DataError(f"{path}: atlas channels must be probabilities summing to one")
    vol = Volume(vol.grid, data / total)
    mpath = manifest_path(path)
    if mpath.exists():
        names, groups = read_manifest(mpath, vol.channels)
    else:
        names, groups = [], [[None] * vol.channels for _ in range(3)]
    return ProbAtlas(vol, names), groups


def _group_ids(labels):
    """Map arbitrary group labels (None = own group) to consecutive integers."""
    ids, out = {}, []
    for c, g in enumerate(labels):
        key = ("own", c) if g is None else ("g", str(g))
        out.append(ids.setdefault(key, len(ids)))
    return np.asarray(out)


def sharing_from(cfg: RunConfig, names, manifest_groups) -> SharingGroups:
    maps = []
    for k, attr in enumerate(("gaussian_group", "beta_group", "dsw_group")):
        labels = list(manifest_groups[k])
        for c, name in enumerate(names):
            spec = cfg.class_spec(name)
            if spec is not None and getattr(spec, attr) is not None:
                labels[c] = getattr(spec, attr)
        maps.append(_group_ids(labels))
    return SharingGroups(*maps)


def check_class_names(cfg: RunConfig, names):
    unknown = [c.name for c in cfg.classes if c.name not in names]
    unknown += [b for b in cfg.background if b not in names]
    if unknown:
        raise ConfigError(f"unknown class {unknown[0]!r}; atlas classes: {', '.join(names)}")


def hyper_from(cfg: RunConfig, names, prior, voxel_volume, n_channels) -> Hyperparams:
    """NIW hyperparameters; n_c defaults to the class prior volume (mm^3) when M_c is set."""
    means = np.zeros((len(names), n_channels))
    scales = np.zeros(len(names))
    for c, name in enumerate(names):
        spec = cfg.class_spec(name)
        if spec is None or spec.hypermean is None:
            continue
        m = np.atleast_1d(np.asarray(spec.hypermean, float))
        if m.shape != (n_channels,):
            raise ConfigError(f"class {name}: hypermean needs {n_channels} value(s)")
        means[c] = m
        scales[c] = spec.scale if spec.scale is not None else voxel_volume * prior[:, c].sum()
    return Hyperparams(means, scales)


def template_intensities(cfg: RunConfig, names):
    out = np.arange(len(names), dtype=float)
    for c, name in enumerate(names):
        spec = cfg.class_spec(name)
        if spec is None:
            continue
        if spec.template is not None:
            out[c] = spec.template
        elif spec.hypermean is not None:
            out[c] = float(np.atleast_1d(spec.hypermean)[0])
    return out


def features_from_dwi(dwi: Volume, proto: DWIProtocol, shell=None, target: GridSpec = None):
    tensors = fit_dti_wls(dwi, proto, shell)
    if target is not None and not target.same_as(tensors.grid):
        tensors = logeuclidean_resample(tensors, target)
    return tensor_features(tensors), tensors


def resample_features(feat: DiffusionFeatures, target: GridSpec) -> DiffusionFeatures:
    """FA trilinearly, directions by nearest neighbour (axes do not average)."""
    if target.same_as(feat.fa.grid):
        return feat
    fa = resample(feat.fa, target, "trilinear")
    fa = Volume(target, np.clip(fa.data, 0.0, 1.0))
    dirs = resample(feat.dirs, target, "nearest")
    return DiffusionFeatures(fa, dirs)


def working_grid(cfg: RunConfig, t1: Volume, atlas: ProbAtlas, affine, background_idx):
    """Grid at the configured resolution: the sMRI field of view, or a box
    around the atlas foreground when ``bbox.threshold`` is set."""
    if cfg.bbox.threshold is not None and background_idx:
        deformed = DeformedAtlas(atlas, t1.grid, affine)
        prior = deformed.prior(DeformationField.zeros(deformed.control))
        fg = [c for c in range(atlas.n_classes) if c not in background_idx]
        mass = Volume(t1.grid, prior[:, fg].sum(axis=1).reshape(t1.grid.dims))
        return bounding_box(mass, cfg.bbox.threshold, cfg.bbox.margin_mm, cfg.resolution)
    spacing = t1.grid.spacing
    if np.allclose(spacing, cfg.resolution):
        return t1.grid
    extent = (np.asarray(t1.grid.dims) - 1) * spacing
    dims = tuple(int(n) for n in np.floor(extent / cfg.resolution + 1e-9).astype(int) + 1)
    aff = np.eye(4)
    aff[:3, :3] = t1.grid.affine[:3, :3] / spacing * cfg.resolution
    aff[:3, 3] = t1.grid.affine[:3, 3]
    return GridSpec(dims, aff)


def gem_options(cfg: RunConfig, threads=None) -> GEMOptions:
    g = cfg.gem
    return GEMOptions(max_iter=g.it_max, tol=g.tol, deform_every=g.deform_every,
                      mstep_iter=g.mstep_iter, registration_iter=g.registration_iter,
                      grad_tol=g.grad_tol, stiffness=cfg.lambda_,
                      control_spacing=cfg.control_spacing, var_floor=g.var_floor,
                      kappa_init=g.kappa_init, threads=threads or cfg.threads)


# -- segmentation -----------------------------------------------------------

@dataclass(eq=False)
class SegmentOutput:
    result: GEMResult
    names: list
    grid: GridSpec
    report: dict
    t1: Volume


def segment(t1: Volume, atlas: ProbAtlas, cfg: RunConfig, features: DiffusionFeatures = None,
            dwi: Volume = None, proto: DWIProtocol = None, affine=None, manifest_groups=None,
            threads=None) -> SegmentOutput:
    """Register (unless ``affine`` is given), resample to the working grid and run GEM."""
    start = time.perf_counter()
    names = list(atlas.names)
    check_class_names(cfg, names)
    background_idx = [names.index(b) for b in cfg.background]
    manifest_groups = manifest_groups or [[None] * len(names) for _ in range(3)]
    if affine is None:
        reg = cfg.registration
        template = soft_template(atlas, template_intensities(cfg, names))
        if np.ptp(template.data) == 0:
            # a single class (or equal templates) leaves nothing to register against
            warnings.warn("constant registration template; using the identity affine",
                          RuntimeWarning, stacklevel=2)
            affine, affine_source = np.eye(4), "identity"
        else:
            affine = register_affine_mi(Volume(t1.grid, t1.data[..., :1]), template,
                                        RegistrationOptions(levels=reg.levels, bins=reg.bins,
                                                            dof=reg.dof)).matrix
            affine_source = "registered"
    else:
        affine_source = "provided"
    affine = np.asarray(affine, float)

    grid = working_grid(cfg, t1, atlas, affine, background_idx)
    S = t1 if grid.same_as(t1.grid) else resample(t1, grid, "trilinear")
    if features is None:
        if dwi is None or proto is None:
            raise ConfigError("segmentation needs FA and direction volumes, or DWI with bvals/bvecs")
        features, _ = features_from_dwi(dwi, proto, cfg.shell, grid)
    else:
        features = resample_features(features, grid)
    if not features.fa.grid.same_as(grid):
        raise DataError("diffusion features could not be brought onto the working grid")

    control = control_grid_for(grid, cfg.control_spacing)
    prior = DeformedAtlas(atlas, grid, affine, control).prior(DeformationField.zeros(control))
    hyper = hyper_from(cfg, names, prior, grid.voxel_volume, S.channels)
    sharing = sharing_from(cfg, names, manifest_groups)
    result = run_gem(S, features, atlas, hyper, sharing, gem_options(cfg, threads), affine,
                     background=background_idx)
    report = run_report(result, names, cfg, grid, affine_source)
    log.info("segmentation finished in %.1f s", time.perf_counter() - start)
    return SegmentOutput(result, names, grid, report, S)


def run_report(result: GEMResult, names, cfg: RunConfig, grid: GridSpec, affine_source="provided"):
    """Everything needed to reproduce or audit a run; no timing, so the
    report is a pure function of the inputs."""
    return {
        "bound_trace": [float(b) for b in result.bound_trace],
        "iterations": int(result.iterations),
        "converged": bool(result.converged),
        "classes": names,
        "parameters": result.params.to_dict(names),
        "expected_volumes_mm3": {n: float(v) for n, v in zip(names, result.volumes)},
        "masked_volume_mm3": float(result.mask.sum() * grid.voxel_volume),
        "working_grid": {"dims": list(grid.dims), "affine": grid.affine.tolist()},
        "affine": np.asarray(result.affine).tolist(),
        "affine_source": affine_source,
        "max_displacement_mm": float(np.abs(result.field.displacements).max()),
        "config": cfg.to_dict(),
    }


def write_segmentation(out: SegmentOutput, out_dir, qc=False):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    res = out.result
    write_nifti(res.labels, out_dir / "labels.nii.gz", np.int16)
    write_nifti(Volume(res.posteriors.grid, res.posteriors.data.astype(np.float32)),
                out_dir / "posteriors.nii.gz", np.float32)
    lines = ["class\tvolume_mm3"] + [f"{n}\t{v:.6f}" for n, v in zip(out.names, res.volumes)]
    (out_dir / "volumes.tsv").write_text("\n".join(lines) + "\n")
    write_json(out_dir / "report.json", out.report)
    write_json(out_dir / "timing.json", {"wall_time_s": res.wall_time})
    if qc:
        write_qc(out.t1, res.labels, out_dir)


def write_qc(t1: Volume, labels: Volume, out_dir):
    """Mid-slice label overlays on the sMRI, one PNG per axis."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    img = t1.data[..., 0]
    lab = labels.data[..., 0].astype(float)
    lab = np.where(lab > 0, lab, np.nan)
    for axis, name in enumerate(("sagittal", "coronal", "axial")):
        k = img.shape[axis] // 2
        fig, ax = plt.subplots(figsize=(4, 4))
        ax.imshow(np.take(img, k, axis=axis).T, cmap="gray", origin="lower")
        ax.imshow(np.take(lab, k, axis=axis).T, cmap="tab10", alpha=0.4, origin="lower",
                  interpolation="nearest")
        ax.set_axis_off()
        fig.savefig(Path(out_dir) / f"qc_{name}.png", dpi=80, bbox_inches="tight")
        plt.close(fig)


# -- simulation -------------------------------------------------------------

def truth_from(cfg: RunConfig) -> ClassParams:
    sim = cfg.simulate
    n = sim.n_classes
    t = sim.truth
    if n > 4 and not all(k in t for k in ("means", "variances", "alpha", "beta", "axes", "kappa")):
        raise ConfigError("simulate.truth must list every parameter when n_classes > 4")
    base = synth.default_truth(min(n, 4)) if n <= 4 else None
    try:
        means = np.asarray(t.get("means", base.means if base else None), float).reshape(n, -1)
        var = np.asarray(t.get("variances", base.covs[:, 0, 0] if base else None), float).reshape(n)
        axes = np.asarray(t.get("axes", base.axes if base else None), float).reshape(n, 3)
        params = ClassParams(
            means, var[:, None, None] * np.eye(means.shape[1]),
            t.get("alpha", base.alpha if base else None), t.get("beta", base.beta if base else None),
            axes / np.linalg.norm(axes, axis=1, keepdims=True), t.get("kappa", base.kappa if base else None))
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"simulate.truth: {exc}") from None
    return params


def simulate(cfg: RunConfig, out_dir, seed=None):
    """Write a synthetic atlas and subject drawn from the forward model."""
    seed = cfg.seed if seed is None else int(seed)
    sim = cfg.simulate
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    atlas = synth.default_atlas(tuple(sim.shape), sim.spacing, sim.n_classes, sim.width, sim.peak)
    truth = truth_from(cfg)
    control = control_grid_for(atlas.grid, cfg.control_spacing)
    fld = DeformationField.zeros(control, cfg.lambda_)
    if sim.displacement_mm > 0:
        rng = np.random.default_rng([seed, 1])
        fld = fld.with_displacements(rng.uniform(-sim.displacement_mm, sim.displacement_mm,
                                                 control.dims + (3,)))
    S, D, gt = synth.sample_dataset(atlas, truth, fld, seed=seed)

    write_nifti(Volume(atlas.grid, atlas.probs.data.astype(np.float32)), out_dir / "atlas.nii.gz", np.float32)
    write_manifest(manifest_path(out_dir / "atlas.nii.gz"), atlas.names)
    write_nifti(S, out_dir / "t1.nii.gz", np.float32)
    write_nifti(D.fa, out_dir / "fa.nii.gz", np.float32)
    write_nifti(D.dirs, out_dir / "dirs.nii.gz", np.float32)
    write_nifti(gt.labels, out_dir / "labels.nii.gz", np.int16)
    write_json(out_dir / "truth.json", {
        "seed": seed,
        "classes": atlas.names,
        "parameters": truth.to_dict(atlas.names),
        "label_counts": {n: int(np.sum(gt.labels.data == c + 1)) for c, n in enumerate(atlas.names)},
        "displacements_mm": fld.displacements.tolist(),
    })
    seg_cfg = {
        "atlas": "atlas.nii.gz",
        "resolution": float(sim.spacing),
        "lambda": cfg.lambda_,
        "seed": seed,
        "background": [atlas.names[0]] if sim.n_classes > 1 else [],
        "classes": [{"name": n, "template": float(truth.means[c, 0])} for c, n in enumerate(atlas.names)],
    }
    (out_dir / "config.yaml").write_text(yaml.safe_dump(seg_cfg, sort_keys=False))
    return S, D, gt, atlas

