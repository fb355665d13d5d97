"""Pipeline configuration: the spectral sizes, schedules and geometric
defaults every stage reads.  Values are the ones the method was tuned
with; fixtures and CLI runs override via JSON.
"""

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ContractError, FormatError


@dataclass(frozen=True)
class PipelineConfig:
    k: int = 65                    # per-shape basis size
    k_l: int = 52                  # latent (limit) basis size
    m: int = 20                    # global basis size
    zoomout: tuple = (20, 65, 5)   # refinement schedule (start, end, step)
    nn_max_distance: float = 10.0  # mm, initial-match gate
    band_offsets: tuple = (30.0, 60.0, 30.0, 50.0)  # top/bottom/lateral/depth mm
    icp: tuple = (100, 5, 0.02)    # iterations, trim period, trim fraction
    decimate_target: int = 10000   # preprocess size cap
    truncation: dict = field(default_factory=dict)  # per-analysis override
    out_dir: str = "surfmap-out"   # artifact tree root

    def __post_init__(self):
        if min(self.k, self.k_l, self.m) < 1:
            raise ContractError("basis sizes must be positive")
        if self.k_l > self.k:
            raise ContractError(f"k_l={self.k_l} exceeds k={self.k}")
        if self.m > self.k_l:
            raise ContractError(f"m={self.m} exceeds k_l={self.k_l}")
        object.__setattr__(self, "zoomout", tuple(self.zoomout))
        object.__setattr__(self, "band_offsets", tuple(self.band_offsets))
        object.__setattr__(self, "icp", tuple(self.icp))
        start, end, step = self.zoomout
        if not (1 <= start <= end <= self.k) or step < 1:
            raise ContractError(f"bad zoomout schedule {self.zoomout}")
        if self.nn_max_distance <= 0:
            raise ContractError("nn_max_distance must be positive")
        if len(self.band_offsets) != 4 or any(o < 0 for o in self.band_offsets):
            raise ContractError("band_offsets are four non-negative mm values")
        iters, every, frac = self.icp
        if iters < 1 or every < 1 or not 0 <= frac < 1:
            raise ContractError(f"bad icp parameters {self.icp}")
        if self.decimate_target < 4:
            raise ContractError("decimate_target must be >= 4")
        for name, t in self.truncation.items():
            if int(t) < 1:
                raise ContractError(f"truncation[{name!r}] must be >= 1")
        if not str(self.out_dir):
            raise ContractError("out_dir must be a non-empty path")

    def to_json(self, path=None):
        text = json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"
        if path is not None:
            Path(path).write_text(text)
        return text


def default_config():
    return PipelineConfig()


def load_config(path):
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise FormatError(f"{path} must hold a JSON object")
    known = set(PipelineConfig.__dataclass_fields__)
    unknown = set(doc) - known
    if unknown:
        raise ContractError(f"unknown config keys: {sorted(unknown)}")
    return PipelineConfig(**doc)
