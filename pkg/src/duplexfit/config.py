"""Run configuration: one flat, documented key set read from TOML text."""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, fields

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib


class ConfigError(ValueError):
    def __init__(self, key: str, reason: str):
        super().__init__(f"{key}: {reason}")
        self.key = key
        self.reason = reason


def _opt(default, help: str, unit: str = "", check=None):
    return field(default=default, metadata={"help": help, "unit": unit, "check": check})


_pos = (lambda v: v > 0, "must be > 0")
_nonneg = (lambda v: v >= 0, "must be >= 0")
_frac = (lambda v: 0 <= v <= 1, "must lie in [0, 1]")
_ge2 = (lambda v: v >= 2, "must be >= 2")
_ge1 = (lambda v: v >= 1, "must be >= 1")


@dataclass(frozen=True)
class RunConfig:
    # general
    seed: int = _opt(0, "master random seed")
    threads: int = _opt(1, "torch intra-op threads", check=_ge1)
    grid_spacing: float = _opt(0.04, "template marching-cubes spacing", "canonical units", _pos)
    # synthetic scene
    n_frames: int = _opt(30, "frames in the synthetic sequence", check=_ge2)
    image_size: int = _opt(96, "square image side", "px", _ge2)
    fov_deg: float = _opt(50.0, "horizontal field of view", "deg", (lambda v: 0 < v < 180, "must be in (0, 180)"))
    orbit_radius: float = _opt(2.6, "camera distance from the animal", "canonical units", _pos)
    orbit_height: float = _opt(0.8, "camera height above ground", "canonical units")
    orbit_degrees: float = _opt(360.0, "total azimuth swept by the camera", "deg")
    camera_jitter_deg: float = _opt(2.0, "per-frame camera rotation jitter (std)", "deg", _nonneg)
    camera_jitter_trans: float = _opt(0.03, "per-frame camera position jitter (std)", "canonical units", _nonneg)
    gait_amplitude_deg: float = _opt(20.0, "leg swing amplitude", "deg", _nonneg)
    gait_cycles: float = _opt(1.0, "gait cycles over the sequence", check=_nonneg)
    head_turn_deg: float = _opt(20.0, "head yaw amplitude", "deg", _nonneg)
    root_drift: float = _opt(0.05, "amplitude of ground-truth root wander", "canonical units", _nonneg)
    shape_std: float = _opt(0.4, "std of ground-truth shape coefficients", check=_nonneg)
    kp_noise_px: float = _opt(1.0, "keypoint detection noise (std)", "px", _nonneg)
    emb_noise: float = _opt(0.02, "additive descriptor noise (std)", check=_nonneg)
    emb_outlier_frac: float = _opt(0.05, "fraction of pixels with random descriptors", check=_frac)
    texture: str = _opt("spots", "ground-truth texture: spots | red",
                        check=(lambda v: v in ("spots", "red"), "must be 'spots' or 'red'"))
    split: str = _opt("15/5", "train/test block sizes: 15/5 | 15/10 | 15/15",
                      check=(lambda v: v in ("15/5", "15/10", "15/15"), "must be 15/5, 15/10 or 15/15"))
    # renderer
    epsilon: float = _opt(0.05, "duplex shell half-thickness", "canonical units", _pos)
    n_samples: int = _opt(16, "EA samples per ray", check=_ge2)
    # loss weights
    w_cse: float = _opt(1.0, "dense correspondence reprojection weight", check=_nonneg)
    w_kp: float = _opt(0.1, "keypoint reprojection weight", check=_nonneg)
    w_photo: float = _opt(1.0, "photometric weight", check=_nonneg)
    w_mask: float = _opt(0.1, "silhouette Chamfer weight", check=_nonneg)
    w_arap: float = _opt(0.05, "ARAP weight", check=_nonneg)
    w_edge: float = _opt(0.05, "edge-length weight", check=_nonneg)
    huber_delta: float = _opt(4.0, "Huber threshold on reprojection residuals", "px", _pos)
    # optimisation
    iterations: int = _opt(2000, "stage-two iterations", check=_nonneg)
    warmup_frac: float = _opt(0.2, "fraction of iterations without the photometric term", check=_frac)
    minibatch: int = _opt(4, "frames per step", check=_ge1)
    photo_frames: int = _opt(2, "frames per step that are fully rendered for the photometric term", check=_ge1)
    lr_pose: float = _opt(1e-3, "Adam step for the pose network", check=_pos)
    lr_beta: float = _opt(1e-3, "Adam step for shape coefficients", check=_pos)
    lr_psi: float = _opt(1.5e-2, "Adam step for the texture field", check=_pos)
    lr_final_factor: float = _opt(0.05, "learning rates decay exponentially to this fraction by the last iteration",
                                  check=(lambda v: 0 < v <= 1, "must lie in (0, 1]"))
    checkpoint_every: int = _opt(0, "checkpoint period in iterations (0 = final only)", check=_nonneg)
    factorized: bool = _opt(True, "compose SfM cameras with the animal root (false = identity cameras)")
    # stage one
    match_stride: int = _opt(1, "pixel stride for dense matching", "px", _ge1)
    pnp_iters: int = _opt(200, "RANSAC iterations", check=_ge1)
    pnp_threshold_px: float = _opt(3.0, "RANSAC inlier threshold", "px", _pos)
    # models
    pose_width: int = _opt(64, "pose network hidden width", check=_ge1)
    pose_freqs: int = _opt(3, "timestamp encoding frequencies", check=_ge1)
    tex_resolution: int = _opt(64, "triplane resolution", check=_ge2)
    tex_channels: int = _opt(8, "channels per plane", check=_ge1)
    tex_width: int = _opt(32, "decoder hidden width", check=_ge1)
    sigma_scale: float = _opt(20.0, "opacity unit of the texture field", "1/canonical unit", _pos)
    chamfer_max_points: int = _opt(4096, "mask pixels kept for the Chamfer term", check=_ge1)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **kw) -> "RunConfig":
        return from_dict({**self.to_dict(), **kw})

    def to_toml(self) -> str:
        lines = []
        for f in fields(self):
            lines.append(f"# {f.metadata['help']}" + (f" [{f.metadata['unit']}]" if f.metadata["unit"] else ""))
            lines.append(f"{f.name} = {json.dumps(getattr(self, f.name))}")
        return "\n".join(lines) + "\n"

    @property
    def split_blocks(self):
        a, b = self.split.split("/")
        return int(a), int(b)


def from_dict(d: dict) -> RunConfig:
    known = {f.name: f for f in fields(RunConfig)}
    kw = {}
    for key, value in d.items():
        if key not in known:
            raise ConfigError(key, "unknown key")
        f = known[key]
        default = f.default
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ConfigError(key, "expected a boolean")
        elif isinstance(default, int):
            if isinstance(value, bool) or not isinstance(value, int):
                raise ConfigError(key, "expected an integer")
        elif isinstance(default, float):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(key, "expected a number")
            value = float(value)
            if not math.isfinite(value):
                raise ConfigError(key, "must be finite")
        elif isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(key, "expected a string")
        check = f.metadata["check"]
        if check is not None and not check[0](value):
            raise ConfigError(key, check[1])
        kw[key] = value
    return RunConfig(**kw)


def validate_config(text: str) -> RunConfig:
    """Parse TOML text, reject unknown keys, check ranges, fill defaults."""
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as e:
        raise ConfigError("<file>", f"not valid TOML ({e})") from None
    for k, v in data.items():
        if isinstance(v, dict):
            raise ConfigError(k, "nested tables are not supported; use flat keys")
    return from_dict(data)


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    text = "" if path is None else open(path).read()
    cfg = validate_config(text)
    return cfg.replace(**overrides) if overrides else cfg


def describe_keys() -> str:
    out = []
    for f in fields(RunConfig):
        unit = f" [{f.metadata['unit']}]" if f.metadata["unit"] else ""
        out.append(f"  {f.name} (default {json.dumps(f.default)}){unit}: {f.metadata['help']}")
    return "\n".join(out)
