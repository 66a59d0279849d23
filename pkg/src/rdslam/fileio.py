"""On-disk formats: prediction-volume files, frame index, trajectories, config, reports."""

from __future__ import annotations

import dataclasses
import os
import struct
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .features import ParamMode, PredictionVolume
from .geometry import CameraIntrinsics, Pose

MAGIC = b"RPVF"
VERSION = 1
HEADER = struct.Struct("<4s8I")  # magic, version, Hc, Wc, cell, channels, D, G, flags
FLAG_EMBEDDING = 1


class FeatureFileError(IOError):
    pass


class BadMagic(FeatureFileError):
    pass


class VersionMismatch(FeatureFileError):
    pass


class TruncatedFile(FeatureFileError):
    pass


class SizeMismatch(FeatureFileError):
    pass


def encode_volume(volume: PredictionVolume) -> bytes:
    hc, wc, ch = volume.logits.shape
    d = volume.descriptor_dim
    emb = volume.embedding
    g = 0 if emb is None else int(np.asarray(emb).size)
    flags = FLAG_EMBEDDING if emb is not None else 0
    parts = [
        HEADER.pack(MAGIC, VERSION, hc, wc, volume.cell, ch, d, g, flags),
        np.ascontiguousarray(volume.logits, dtype="<f4").tobytes(),
        np.ascontiguousarray(volume.descriptors, dtype="<f4").tobytes(),
    ]
    if emb is not None:
        parts.append(np.ascontiguousarray(emb, dtype="<f4").ravel().tobytes())
    return b"".join(parts)


def decode_volume(data: bytes) -> PredictionVolume:
    """Parse a feature file.

    A payload shorter than the header implies is reported as a size mismatch
    when it holds a whole number of descriptor planes (the header disagrees
    with the data), and as truncation otherwise. Trailing bytes are a size
    mismatch.
    """
    if len(data) < 4:
        raise TruncatedFile(f"file has {len(data)} bytes, header needs {HEADER.size}")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {data[:4]!r}")
    if len(data) < HEADER.size:
        raise TruncatedFile(f"file has {len(data)} bytes, header needs {HEADER.size}")
    _, version, hc, wc, cell, ch, d, g, flags = HEADER.unpack_from(data)
    if version != VERSION:
        raise VersionMismatch(f"version {version}, expected {VERSION}")
    if cell < 1 or ch != cell * cell + 1:
        raise SizeMismatch(f"channel count {ch} inconsistent with cell size {cell}")
    if flags & ~FLAG_EMBEDDING:
        raise FeatureFileError(f"unknown flags {flags:#x}")
    has_emb = bool(flags & FLAG_EMBEDDING)
    if not has_emb and g != 0:
        raise SizeMismatch("embedding size set without the embedding flag")
    n_cells = hc * wc
    n_logit = n_cells * ch
    n_desc = n_cells * d
    n_emb = g if has_emb else 0
    expected = 4 * (n_logit + n_desc + n_emb)
    payload = len(data) - HEADER.size
    if payload > expected:
        raise SizeMismatch(f"payload {payload} bytes, header implies {expected}")
    if payload < expected:
        rest = payload - 4 * (n_logit + n_emb)
        if n_cells > 0 and rest >= 0 and rest % (4 * n_cells) == 0:
            raise SizeMismatch(f"payload holds {rest // (4 * n_cells)} descriptor channels, header says {d}")
        raise TruncatedFile(f"payload {payload} bytes, header implies {expected}")
    off = HEADER.size
    logits = np.frombuffer(data, "<f4", n_logit, off).reshape(hc, wc, ch)
    off += 4 * n_logit
    desc = np.frombuffer(data, "<f4", n_desc, off).reshape(hc, wc, d)
    off += 4 * n_desc
    emb = np.frombuffer(data, "<f4", n_emb, off).copy() if has_emb else None
    try:
        return PredictionVolume(logits.copy(), desc.copy(), emb, cell=cell)
    except ValueError as exc:
        raise SizeMismatch(str(exc)) from exc


def write_feature_file(path, volume: PredictionVolume):
    Path(path).write_bytes(encode_volume(volume))


def read_feature_file(path) -> PredictionVolume:
    return decode_volume(Path(path).read_bytes())


# --- frame index -------------------------------------------------------------------

INDEX_NAME = "frames.txt"


def write_frame_index(directory, entries: list[tuple[int, float, str]]):
    lines = ["# index timestamp file"]
    lines += [f"{i} {ts:.9f} {name}" for i, ts, name in entries]
    (Path(directory) / INDEX_NAME).write_text("\n".join(lines) + "\n")


def read_frame_index(directory) -> list[tuple[int, float, str]]:
    path = Path(directory) / INDEX_NAME
    out = []
    for n, line in enumerate(path.read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 3:
            raise FeatureFileError(f"{path}:{n}: expected 'index timestamp file'")
        out.append((int(parts[0]), float(parts[1]), parts[2]))
    return out


def iter_feature_directory(directory):
    """Yield ``(index, timestamp, volume)`` in index order."""
    for i, ts, name in sorted(read_frame_index(directory)):
        yield i, ts, read_feature_file(Path(directory) / name)


def write_feature_directory(directory, frames) -> int:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ts, vol in frames:
        name = f"{i:06d}.rpvf"
        write_feature_file(directory / name, vol)
        entries.append((i, ts, name))
    write_frame_index(directory, entries)
    return len(entries)


# --- trajectories ------------------------------------------------------------------


@dataclass
class TrajectoryEstimate:
    """Camera-to-world positions and Hamilton quaternions ``(x, y, z, w)``."""

    timestamps: np.ndarray
    positions: np.ndarray
    quaternions: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=float).ravel()
        self.positions = np.asarray(self.positions, dtype=float).reshape(-1, 3)
        self.quaternions = np.asarray(self.quaternions, dtype=float).reshape(-1, 4)
        n = len(self.timestamps)
        if len(self.positions) != n or len(self.quaternions) != n:
            raise ValueError("timestamps, positions and quaternions differ in length")
        if n > 1 and not np.all(np.diff(self.timestamps) > 0):
            raise ValueError("timestamps must be strictly increasing")

    @classmethod
    def from_poses(cls, timestamps, poses: list[Pose]) -> "TrajectoryEstimate":
        """From world-to-camera poses."""
        if not poses:
            return cls(np.zeros(0), np.zeros((0, 3)), np.zeros((0, 4)))
        inv = [p.inverse() for p in poses]
        q = Rotation.from_matrix(np.array([p.R for p in inv])).as_quat()
        return cls(timestamps, np.array([p.t for p in inv]), q)

    def poses(self) -> list[Pose]:
        R = Rotation.from_quat(self.quaternions).as_matrix() if len(self.quaternions) else []
        return [Pose(Ri, ti).inverse() for Ri, ti in zip(R, self.positions)]


def _sig(x: float) -> str:
    return f"{x:.9g}"


def format_trajectory(traj: TrajectoryEstimate) -> str:
    lines = []
    for ts, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
        lines.append(" ".join(_sig(v) for v in (ts, *p, *q)))
    return "\n".join(lines) + ("\n" if lines else "")


def write_trajectory(path, traj: TrajectoryEstimate):
    Path(path).write_text(format_trajectory(traj))


def read_trajectory(path) -> TrajectoryEstimate:
    rows = []
    for n, line in enumerate(Path(path).read_text().splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        vals = line.replace(",", " ").split()
        if len(vals) != 8:
            raise ValueError(f"{path}:{n}: expected 8 values, got {len(vals)}")
        rows.append([float(v) for v in vals])
    a = np.array(rows, dtype=float).reshape(-1, 8)
    return TrajectoryEstimate(a[:, 0], a[:, 1:4], a[:, 4:8])


def write_points(path, points: np.ndarray):
    np.savetxt(path, np.asarray(points, dtype=float).reshape(-1, 3), fmt="%.9g")


def read_points(path) -> np.ndarray:
    return np.loadtxt(path, dtype=float, ndmin=2).reshape(-1, 3)


# --- configuration -----------------------------------------------------------------


class ConfigError(ValueError):
    pass


def _default_mapping():
    from .mapping import MappingParams

    return MappingParams()


def _default_loop():
    from .loop_closure import LoopParams

    return LoopParams()


def _default_synth():
    from .synth import WorldSpec

    return WorldSpec()


@dataclass
class CameraConfig:
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    width: int = 0
    height: int = 0

    def intrinsics(self) -> CameraIntrinsics | None:
        if self.fx <= 0:
            return None
        return CameraIntrinsics(self.fx, self.fy, self.cx, self.cy, self.width, self.height)


@dataclass
class OutputConfig:
    trajectory: str = ""
    stats: str = ""
    map: str = ""
    table: str = ""


@dataclass
class EvalConfig:
    estimate: str = ""
    groundtruth: str = ""
    cloud: str = ""
    points: str = ""
    alignment: str = "sim3"
    max_gap: float = 0.02


@dataclass
class ExperimentConfig:
    seeds: int = 3
    grid: int = 7
    max_fraction: float = 0.1
    target_frame: int = 5
    success_fraction: float = 0.01
    worlds: int = 20
    frames: int = 12
    landmarks: int = 400
    adjacent: int = 5
    anisotropy: float = 4.0
    noise: float = 1.0
    isotropic: bool = False


@dataclass
class PipelineConfig:
    """Everything a run needs; loaded from a flat ``key = value`` file.

    ``input`` is ``synthetic`` (world from the ``synth.*`` keys) or a
    directory of feature files with a frame index.
    """

    input: str = "synthetic"
    mode: str = "MC"
    loop: str = "off"
    coarse_to_fine: bool = True
    concurrent: bool = False
    seed: int = 0
    min_probability: float = 0.015
    nms_radius: int = 4
    bootstrap_parallax_deg: float = 3.0
    bootstrap_max_frames: int = 60
    local_neighbors: int = 10
    lost_fraction: float = 0.05
    camera: CameraConfig = field(default_factory=CameraConfig)
    synth: object = field(default_factory=_default_synth)
    mapping: object = field(default_factory=_default_mapping)
    loop_params: object = field(default_factory=_default_loop)
    output: OutputConfig = field(default_factory=OutputConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def validate(self):
        if self.mode not in {m.value for m in ParamMode}:
            raise ConfigError(f"mode must be one of EI, EC, MI, MC, got {self.mode!r}")
        if self.loop not in ("off", "detect", "on"):
            raise ConfigError(f"loop must be off, detect or on, got {self.loop!r}")
        if not 0.0 < self.min_probability < 1.0:
            raise ConfigError("min_probability must lie in (0, 1)")
        if self.nms_radius < 0:
            raise ConfigError("nms_radius must be >= 0")
        if self.eval.alignment not in ("sim3", "se3"):
            raise ConfigError("eval.alignment must be sim3 or se3")
        if not 0.0 < self.lost_fraction:
            raise ConfigError("lost_fraction must be positive")
        return self

    @property
    def param_mode(self) -> ParamMode:
        return ParamMode(self.mode)


def _parse_value(raw: str, current, hint):
    raw = raw.strip()
    target = type(current) if current is not None else hint
    if target is bool or isinstance(current, bool):
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {raw!r}")
    if current is None:
        if raw.lower() in ("", "none", "null"):
            return None
        try:
            return float(raw)
        except ValueError:
            return raw
    if isinstance(current, int):
        try:
            return int(raw)
        except ValueError:
            raise ConfigError(f"not an integer: {raw!r}") from None
    if isinstance(current, float):
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"not a number: {raw!r}") from None
    if isinstance(current, str):
        return raw
    raise ConfigError(f"cannot set a value of type {type(current).__name__}")


def _set_path(obj, parts: list[str], raw: str, key: str):
    name = parts[0]
    if not dataclasses.is_dataclass(obj) or name not in {f.name for f in dataclasses.fields(obj)}:
        raise ConfigError(f"unknown config key {key!r}")
    current = getattr(obj, name)
    if len(parts) > 1:
        value = _set_path(current, parts[1:], raw, key)
    else:
        if dataclasses.is_dataclass(current):
            raise ConfigError(f"{key!r} is a section, not a value")
        try:
            hints = typing.get_type_hints(type(obj))
        except (NameError, TypeError):
            hints = {}
        value = _parse_value(raw, current, hints.get(name))
        if isinstance(obj, PipelineConfig) and name == "mode":
            value = str(value).upper()
    # rebuilding (rather than setattr) reruns validation and works for frozen specs
    try:
        return dataclasses.replace(obj, **{name: value})
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{key}: {exc}") from exc


def apply_setting(cfg: PipelineConfig, key: str, raw: str) -> PipelineConfig:
    """Return ``cfg`` with the dotted ``key`` set from its text form."""
    return _set_path(cfg, key.strip().split("."), raw, key)


def parse_config(text: str, overrides: list[str] | None = None, base: PipelineConfig | None = None) -> PipelineConfig:
    cfg = base or PipelineConfig()
    items = []
    for n, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value'")
        k, v = line.split("=", 1)
        items.append((k.strip(), v))
    for o in overrides or []:
        if "=" not in o:
            raise ConfigError(f"override {o!r}: expected key=value")
        k, v = o.split("=", 1)
        items.append((k.strip(), v))
    for k, v in items:
        cfg = apply_setting(cfg, k, v)
    return cfg.validate()


def load_config(path, overrides: list[str] | None = None) -> PipelineConfig:
    text = Path(path).read_text()
    cfg = parse_config(text, overrides)
    base = Path(path).parent
    # relative paths are taken relative to the config file
    if cfg.input != "synthetic" and not os.path.isabs(cfg.input):
        cfg.input = str(base / cfg.input)
    for section in (cfg.output, cfg.eval):
        for f in dataclasses.fields(section):
            v = getattr(section, f.name)
            if isinstance(v, str) and v and f.name != "alignment" and not os.path.isabs(v):
                setattr(section, f.name, str(base / v))
    return cfg


def format_config(cfg: PipelineConfig) -> str:
    lines = []

    def walk(obj, prefix):
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            key = f"{prefix}{f.name}"
            if dataclasses.is_dataclass(v):
                walk(v, key + ".")
            elif isinstance(v, (bool, int, float, str)) or v is None:
                lines.append(f"{key} = {'none' if v is None else v}")

    walk(cfg, "")
    return "\n".join(lines) + "\n"


# --- reports -----------------------------------------------------------------------


def format_report(stats: dict) -> str:
    out = []
    for k in sorted(stats):
        v = stats[k]
        if isinstance(v, float):
            v = _sig(v)
        out.append(f"{k} = {v}")
    return "\n".join(out) + "\n"


def parse_report(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            v = v.strip()
            try:
                out[k.strip()] = int(v)
            except ValueError:
                try:
                    out[k.strip()] = float(v)
                except ValueError:
                    out[k.strip()] = v
    return out


def write_table(path, header: list[str], rows: list[list]):
    lines = [",".join(header)]
    for r in rows:
        lines.append(",".join(_sig(v) if isinstance(v, float) else str(v) for v in r))
    Path(path).write_text("\n".join(lines) + "\n")

