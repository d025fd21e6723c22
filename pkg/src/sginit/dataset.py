"""Dataset directory layout and the flat key=value run configuration.

A dataset directory contains::

    intrinsics.txt        fx fy cx cy width height ('#' comments)
    depth_prior/%06d.pfm  per-frame prior depth, meters
    rel_poses.txt         TUM-format consecutive relative poses (optional
                          for naive runs)
    images/%06d.png       optional 8-bit images
    gt_traj.txt           optional TUM camera-to-world ground truth
    gt_depth/%06d.pfm     optional ground-truth depth

Frame indices are contiguous from zero and every map matches the intrinsics
dimensions.  Run configuration files hold one ``key = value`` per line,
'#' comments allowed; unknown keys are rejected and every key has a
documented default (see DEFAULTS).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image as PILImage

from .dba import SolverConfig
from .errors import ConfigError
from .geometry import CameraIntrinsics, InverseDepthMap, Pose, load_intrinsics, write_intrinsics
from .initialization import InitPolicy, PriorBundle
from .priors import (
    load_depth_map,
    load_relative_poses,
    load_stamped_poses,
    write_pfm,
    write_relative_poses,
    write_stamped_poses,
)
from .synth import ProviderConfig, SyntheticSequence


# ---------------------------------------------------------------------------
# Run configuration

DEFAULTS: dict[str, str] = {
    "init.mode": "geometry_guided",
    "init.chain_limit": "8",
    "solver.max_iterations": "15",
    "solver.damping": "1e-4",
    "solver.depth_floor": "1e-4",
    "solver.convergence_tol": "1e-6",
    "graph.window": "3",
    "keyframe.mean_flow_threshold": "2.0",
    "provider.kind": "oracle",
    "provider.noise_sigma": "0.0",
    "provider.search_radius": "8.0",
    "provider.weight_floor": "0.0",
    "provider.outlier_fraction": "0.0",
    "provider.outlier_magnitude": "0.0",
    "eval.alignment": "similarity",
    "eval.failure_threshold": "1.0",
    "seed": "0",
    # synthetic dataset generation and the ablation sweep
    "synth.scenario": "large_motion",
    "synth.num_frames": "0",  # 0 = scenario default
    "ablate.motions": "0.5,1.0",
    "ablate.providers": "oracle,bounded",
    "ablate.policies": "geometry_guided,naive",
}

_INT_KEYS = {"init.chain_limit", "solver.max_iterations", "graph.window", "seed", "synth.num_frames"}
_FLOAT_KEYS = {
    "solver.damping",
    "solver.depth_floor",
    "solver.convergence_tol",
    "keyframe.mean_flow_threshold",
    "provider.noise_sigma",
    "provider.search_radius",
    "provider.weight_floor",
    "provider.outlier_fraction",
    "provider.outlier_magnitude",
    "eval.failure_threshold",
}


@dataclass(frozen=True)
class RunConfig:
    values: dict[str, object] = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            max_iterations=self.values["solver.max_iterations"],
            damping=self.values["solver.damping"],
            depth_floor=self.values["solver.depth_floor"],
            convergence_tol=self.values["solver.convergence_tol"],
        )

    def provider_config(self) -> ProviderConfig:
        return ProviderConfig(
            kind=self.values["provider.kind"],
            noise_sigma=self.values["provider.noise_sigma"],
            search_radius=self.values["provider.search_radius"],
            weight_floor=self.values["provider.weight_floor"],
            outlier_fraction=self.values["provider.outlier_fraction"],
            outlier_magnitude=self.values["provider.outlier_magnitude"],
            rng_seed=self.values["seed"],
        )

    def init_policy(self) -> InitPolicy:
        return InitPolicy(
            mode=self.values["init.mode"],
            chain_limit=self.values["init.chain_limit"],
        )


def _convert(key: str, raw: str):
    try:
        if key in _INT_KEYS:
            return int(raw)
        if key in _FLOAT_KEYS:
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for config key {key}") from None
    return raw


def parse_run_config(text: str) -> RunConfig:
    values = {key: _convert(key, raw) for key, raw in DEFAULTS.items()}
    for lineno, raw_line in enumerate(text.splitlines(), start=1):
        line = raw_line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"config line {lineno}: expected key = value")
        key, raw = (part.strip() for part in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"config line {lineno}: unknown key {key!r}")
        values[key] = _convert(key, raw)
    return RunConfig(values)


def load_run_config(path) -> RunConfig:
    if path is None:
        return RunConfig({key: _convert(key, raw) for key, raw in DEFAULTS.items()})
    with open(path, "r", encoding="ascii") as fh:
        return parse_run_config(fh.read())


# ---------------------------------------------------------------------------
# Dataset directory

_FRAME_RE = re.compile(r"^(\d{6})\.pfm$")


def _scan_frames(directory: Path) -> int:
    """Number of frames in a %06d.pfm directory; indices must be contiguous."""
    if not directory.is_dir():
        raise ConfigError(f"missing directory {directory}")
    indices = sorted(
        int(m.group(1)) for p in directory.iterdir() if (m := _FRAME_RE.match(p.name))
    )
    if not indices:
        raise ConfigError(f"no %06d.pfm frames in {directory}")
    if indices != list(range(len(indices))):
        raise ConfigError(f"frame indices in {directory} are not contiguous from 0")
    return len(indices)


def _save_png(path: Path, image: np.ndarray) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    if arr.ndim == 2:
        arr = arr[..., None]
    if arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    PILImage.fromarray((arr * 255.0).round().astype(np.uint8)).save(path, format="PNG")


def _load_png(path: Path) -> np.ndarray:
    with PILImage.open(path) as img:
        return np.asarray(img.convert("RGB"), dtype=float) / 255.0


class DatasetLayout:
    """Read access to a dataset directory with layout validation."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise ConfigError(f"dataset directory {self.root} does not exist")
        intrinsics_path = self.root / "intrinsics.txt"
        if not intrinsics_path.is_file():
            raise ConfigError(f"missing {intrinsics_path}")
        self.intrinsics: CameraIntrinsics = load_intrinsics(intrinsics_path)
        self.num_frames = _scan_frames(self.root / "depth_prior")

    # --- priors ---

    def has_relative_poses(self) -> bool:
        return (self.root / "rel_poses.txt").is_file()

    def load_prior_depths(self) -> tuple[InverseDepthMap, ...]:
        maps = []
        for idx in range(self.num_frames):
            m = load_depth_map(self.root / "depth_prior" / f"{idx:06d}.pfm")
            if m.shape != self.intrinsics.shape:
                raise ConfigError(f"depth_prior frame {idx} shape {m.shape} does not match intrinsics")
            maps.append(m)
        return tuple(maps)

    def load_prior_bundle(self) -> PriorBundle:
        path = self.root / "rel_poses.txt"
        if not path.is_file():
            raise ConfigError(f"missing {path} (required for geometry-guided initialization)")
        relatives = load_relative_poses(path)
        depths = self.load_prior_depths()
        if len(relatives) != len(depths) - 1:
            raise ConfigError(
                f"{path} has {len(relatives)} relatives but {len(depths)} frames need {len(depths) - 1}"
            )
        return PriorBundle(depths, tuple(relatives))

    # --- ground truth ---

    def has_ground_truth(self) -> bool:
        return (self.root / "gt_traj.txt").is_file() and (self.root / "gt_depth").is_dir()

    def load_gt_trajectory(self) -> tuple[np.ndarray, list[Pose]]:
        return load_stamped_poses(self.root / "gt_traj.txt")

    def load_gt_depths(self) -> tuple[InverseDepthMap, ...]:
        n = _scan_frames(self.root / "gt_depth")
        if n != self.num_frames:
            raise ConfigError(f"gt_depth has {n} frames, priors have {self.num_frames}")
        maps = []
        for idx in range(n):
            m = load_depth_map(self.root / "gt_depth" / f"{idx:06d}.pfm")
            if m.shape != self.intrinsics.shape:
                raise ConfigError(f"gt_depth frame {idx} shape mismatch")
            maps.append(m)
        return tuple(maps)

    def load_images(self) -> tuple[np.ndarray, ...] | None:
        directory = self.root / "images"
        if not directory.is_dir():
            return None
        images = []
        for idx in range(self.num_frames):
            path = directory / f"{idx:06d}.png"
            if not path.is_file():
                raise ConfigError(f"missing image {path}")
            image = _load_png(path)
            if image.shape[:2] != self.intrinsics.shape:
                raise ConfigError(f"image {path} shape does not match intrinsics")
            images.append(image)
        return tuple(images)


def write_dataset(root, seq: SyntheticSequence, write_images: bool = True) -> None:
    """Serialize a synthetic sequence as a dataset directory; the priors are
    the (perfect) ground-truth depths and relative poses."""
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    write_intrinsics(root / "intrinsics.txt", seq.intrinsics)
    (root / "depth_prior").mkdir(exist_ok=True)
    (root / "gt_depth").mkdir(exist_ok=True)
    for idx, inv in enumerate(seq.inv_depths):
        depth = inv.to_depth().astype(np.float32).astype(float)
        write_pfm(root / "depth_prior" / f"{idx:06d}.pfm", depth)
        write_pfm(root / "gt_depth" / f"{idx:06d}.pfm", depth)
    bundle = seq.prior_bundle()
    write_relative_poses(root / "rel_poses.txt", bundle.relative_poses)
    write_stamped_poses(
        root / "gt_traj.txt",
        np.arange(seq.num_frames, dtype=float),
        seq.cam_to_world,
    )
    if write_images:
        (root / "images").mkdir(exist_ok=True)
        for idx, image in enumerate(seq.images):
            _save_png(root / "images" / f"{idx:06d}.png", image)
