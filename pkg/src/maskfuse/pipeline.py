"""The online loop: integrate every frame, lift keyframe masks, merge on schedule, filter, label."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .features import SidecarProvider, StubHashProvider
from .io import DatasetError, write_json, write_ply
from .mask_bank import MaskBank
from .merge import MergeConfig, MergeStats, merge_step
from .volume import Frame, FrameError, VoxelVolume

log = logging.getLogger(__name__)


@dataclass
class PipelineConfig:
    voxel_size: float = 0.05
    truncation: float = 0.10
    max_depth: float = 8.0
    occlusion_tolerance: float = 0.10
    surface_band: float = 0.5
    min_mask_voxels: int = 5
    tau_inclusion: float = 0.8
    tau_included: float = 0.1
    tau_sim: float = 2.3
    tau_supporter: float = 5.0
    tau_weight: float = 5.0
    keyframe_interval: int = 10
    merge_interval: int = 5
    provider: str = "auto"  # auto (sidecar when features/ exists) | stub | sidecar
    seed: int = 0
    feature_dim: int = 64

    def __post_init__(self):
        self.merge_config()  # validates thresholds
        if self.truncation < 2 * self.voxel_size - 1e-12:
            raise ValueError("truncation must be at least two voxels")
        if self.provider not in ("auto", "stub", "sidecar"):
            raise ValueError(f"unknown provider {self.provider!r}")
        if self.min_mask_voxels < 1:
            raise ValueError("min_mask_voxels must be >= 1")

    def merge_config(self) -> MergeConfig:
        return MergeConfig(
            self.tau_inclusion, self.tau_included, self.tau_sim, self.tau_supporter,
            self.tau_weight, self.keyframe_interval, self.merge_interval,
        )

    def make_volume(self, kernels=None) -> VoxelVolume:
        return VoxelVolume(
            self.voxel_size, self.truncation, self.max_depth, self.occlusion_tolerance,
            self.surface_band, kernels=kernels,
        )

    def to_text(self) -> str:
        return "".join(f"{f.name}={getattr(self, f.name)}\n" for f in fields(self))

    @classmethod
    def from_text(cls, text: str, source: str = "<config>") -> "PipelineConfig":
        kinds = {f.name: f.type for f in fields(cls)}
        values = {}
        for n, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{source}:{n}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in kinds:
                raise ValueError(f"{source}:{n}: unknown key {key!r}")
            cast = {"float": float, "int": int, "str": str}[kinds[key]]
            try:
                values[key] = cast(val)
            except ValueError:
                raise ValueError(f"{source}:{n}: bad value {val!r} for {key}") from None
        return cls(**values)

    @classmethod
    def load(cls, path) -> "PipelineConfig":
        return cls.from_text(Path(path).read_text(), str(path))


@dataclass
class SegmentationResult:
    points: np.ndarray
    labels: np.ndarray  # per point current mask ID, 0 = unassigned
    instances: list  # dicts: id, weight, voxel_count, semantic_feature
    merge_log: list = field(default_factory=list)
    frames_processed: int = 0
    tau_weight: float = 5.0
    snapshots: dict = field(default_factory=dict)

    def instance_ids(self) -> list[int]:
        return [inst["id"] for inst in self.instances]

    def export(self, out_dir, config: PipelineConfig | None = None, note: dict | None = None) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_ply(out / "points.ply", self.points, self.labels)
        write_json(
            out / "instances.json",
            [{"id": i["id"], "weight": i["weight"], "voxel_count": i["voxel_count"]} for i in self.instances],
        )
        with open(out / "runlog.jsonl", "w") as fh:
            for stats in self.merge_log:
                fh.write(json.dumps({"event": "merge", **stats.to_dict()}, sort_keys=True) + "\n")
            if note is not None:
                fh.write(json.dumps(note, sort_keys=True) + "\n")
        if config is not None:
            (out / "config.txt").write_text(config.to_text())


def default_provider(config: PipelineConfig, features_dir=None):
    stub = StubHashProvider(config.seed, config.feature_dim, config.feature_dim, quantum=config.voxel_size)
    if config.provider == "sidecar" or (config.provider == "auto" and features_dir is not None):
        if features_dir is None:
            raise DatasetError("provider=sidecar but the dataset has no features/ directory")
        return SidecarProvider(features_dir, geometric=stub)
    return stub


class OnlineSegmenter:
    """Consumes frames one at a time; the state after frame t never depends on later frames."""

    def __init__(self, config: PipelineConfig, provider=None, kernels=None, record_events: bool = False):
        self.config = config
        self.merge_config = config.merge_config()
        self.provider = provider if provider is not None else default_provider(config)
        self.volume = config.make_volume(kernels)
        sem_dim = getattr(self.provider, "semantic_dim", 0) or config.feature_dim
        self.bank = MaskBank(self.volume, sem_dim, self.provider.geometric_dim, record_events)
        self.merge_log: list[MergeStats] = []
        self.frames_processed = 0
        self.keyframes = 0
        self.discarded_masks = 0
        self._last_id = None
        self._shape = None
        self._finished = False

    def _check(self, frame: Frame) -> None:
        if self._last_id is not None and frame.frame_id <= self._last_id:
            raise DatasetError(f"frame {frame.frame_id}: frame IDs must strictly increase (previous {self._last_id})")
        shape = (frame.intrinsics.width, frame.intrinsics.height)
        if self._shape is not None and shape != self._shape:
            raise DatasetError(f"frame {frame.frame_id}: image size {shape} differs from earlier frames {self._shape}")
        self._shape = shape
        try:
            frame.validate()
        except FrameError as exc:
            raise DatasetError(str(exc)) from None

    def process(self, frame: Frame) -> None:
        if self._finished:
            raise RuntimeError("sequence already finished")
        self._check(frame)
        self._last_id = frame.frame_id
        self.volume.integrate_frame(frame)
        self.bank.add_frame(frame)
        if frame.frame_id % self.config.keyframe_interval == 0:
            self._ingest(frame)
            self.keyframes += 1
            if self.keyframes % self.config.merge_interval == 0:
                self._merge(frame.frame_id)
        self.frames_processed += 1

    def _refresh_surface(self) -> None:
        points, _ = self.volume.extract_surface_points()
        self.bank.set_surface(points, self.provider.pointwise_geometric(points))

    def _ingest(self, frame: Frame) -> None:
        if frame.mask_labels is None:
            return
        self._refresh_surface()
        for label in np.unique(frame.mask_labels):
            label = int(label)
            if label <= 0:
                continue
            voxels = self.volume.back_project_mask(frame, label)
            if voxels.size < self.config.min_mask_voxels:
                self.discarded_masks += 1
                continue
            self.bank.add_mask(voxels, frame.frame_id, self.provider.semantic(frame.frame_id, label))

    def _merge(self, frame_id) -> MergeStats:
        self._refresh_surface()
        stats = merge_step(self.bank, self.merge_config, len(self.merge_log), frame_id)
        self.merge_log.append(stats)
        log.debug("merge step %d: %d -> %d masks", stats.step, stats.masks_before, stats.masks_after)
        return stats

    def finish(self) -> "SegmentationResult":
        """Final merge step, then the filtered result."""
        if not self._finished:
            self._merge(self._last_id)
            self._finished = True
        return self.snapshot()

    def snapshot(self) -> SegmentationResult:
        """Current state filtered by weight; no merge is forced."""
        tau = self.merge_config.tau_weight
        keep = {i: self.bank.record(i) for i in self.bank.live_ids() if self.bank.record(i).weight > tau}
        points, keys = self.volume.extract_surface_points()
        labels = np.zeros(points.shape[0], dtype=np.int64)
        resolve = self.bank.mapping.resolve
        for n, key in enumerate(keys.tolist()):
            best = None
            for orig in self.volume.mask_ids_of(key):
                cur = resolve(orig)
                rec = keep.get(cur)
                if rec is None:
                    continue
                if best is None or rec.weight > best[0] or (rec.weight == best[0] and cur < best[1]):
                    best = (rec.weight, cur)
            if best is not None:
                labels[n] = best[1]
        instances = [
            {"id": i, "weight": int(r.weight), "voxel_count": int(r.voxels.shape[0]),
             "semantic_feature": r.semantic_feature.copy()}
            for i, r in sorted(keep.items())
        ]
        return SegmentationResult(points, labels, instances, list(self.merge_log), self.frames_processed, tau)


def run(dataset, config: PipelineConfig | None = None, provider=None, snapshots=(), kernels=None,
        segmenter_out: list | None = None) -> SegmentationResult:
    """Run the whole sequence.

    ``snapshots`` are fractions in (0, 1]; fraction f is taken after
    ``round(f * len(dataset))`` frames, and 1.0 is the final result.  They are
    returned in ``result.snapshots`` keyed by fraction.
    """
    config = config or PipelineConfig()
    seg = OnlineSegmenter(config, provider, kernels)
    if segmenter_out is not None:
        segmenter_out.append(seg)
    total = len(dataset)
    wanted = {}
    for f in snapshots:
        f = float(f)
        if not 0 < f <= 1:
            raise ValueError(f"snapshot fraction {f} outside (0, 1]")
        wanted[f] = max(1, int(round(f * total)))
    taken = {}
    for frame in dataset:
        seg.process(frame)
        for f, at in wanted.items():
            if f < 1.0 and at == seg.frames_processed:
                taken[f] = seg.snapshot()
    if seg.frames_processed == 0:
        raise DatasetError("dataset contains no frames")
    result = seg.finish()
    if 1.0 in wanted:
        taken[1.0] = result
    result.snapshots = taken
    return result
