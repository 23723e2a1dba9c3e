"""Self-describing JSON checkpoints.

Tensors are stored as ``{"shape": [...], "data": [...]}`` with ``repr`` floats,
so save -> load -> save reproduces the file byte for byte.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass
from dataclasses import field as dc_field
from pathlib import Path
from typing import Any

import numpy as np
import torch

from ..cfm import FieldConfig, VelocityField
from ..errors import CheckpointError
from ..fno import FnoConfig, FnoModel
from ..hierarchy import CounterfactualGrid, HierarchyState
from ..ndtape import DTYPE

FORMAT = "dhgflow-checkpoint"
VERSION = 1


def _tensor_to_json(t: torch.Tensor) -> dict:
    arr = t.detach().cpu().numpy()
    return {"shape": list(arr.shape), "data": [float(v) for v in arr.reshape(-1)]}


def _tensor_from_json(d: dict) -> torch.Tensor:
    return torch.tensor(d["data"], dtype=DTYPE).reshape(d["shape"])


def state_to_json(module: torch.nn.Module) -> dict:
    return {k: _tensor_to_json(v) for k, v in module.state_dict().items()}


def load_state(module: torch.nn.Module, state: dict) -> None:
    try:
        module.load_state_dict({k: _tensor_from_json(v) for k, v in state.items()})
    except (RuntimeError, KeyError) as exc:
        raise CheckpointError(f"state does not match model: {exc}") from None


def module_hash(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().numpy().astype(np.float64).tobytes())
    return h.hexdigest()


def fno_to_json(model: FnoModel) -> dict:
    return {
        "config": asdict(model.config),
        "layers_frozen": [layer.frozen for layer in model.layers],
        "io_frozen": model.io_frozen,
        "state": state_to_json(model),
    }


def fno_from_json(d: dict) -> FnoModel:
    model = FnoModel(FnoConfig(**d["config"]))
    load_state(model, d["state"])
    for layer, frozen in zip(model.layers, d["layers_frozen"]):
        layer.frozen = bool(frozen)
    model.io_frozen = bool(d["io_frozen"])
    return model


def field_to_json(field_: VelocityField) -> dict:
    cfg = asdict(field_.config)
    cfg["time_freqs"] = list(cfg["time_freqs"])
    return {"config": cfg, "state": state_to_json(field_)}


def field_from_json(d: dict) -> VelocityField:
    cfg = dict(d["config"])
    cfg["time_freqs"] = tuple(cfg["time_freqs"])
    model = VelocityField(FieldConfig(**cfg))
    load_state(model, d["state"])
    return model


def hierarchy_to_json(state: HierarchyState) -> dict:
    v = state.validators
    return {
        "init": {
            "length": v.validators[0].fc1.in_features - 3,
            "n_levels": v.n_levels,
            "hidden": v.validators[0].fc1.out_features,
            "clamp_max": state.backdoor.clamp_max,
            "grid": list(state.grid.temps),
        },
        "state": state_to_json(state),
    }


def hierarchy_from_json(d: dict) -> HierarchyState:
    init = dict(d["init"])
    grid = CounterfactualGrid(tuple(init.pop("grid")))
    state = HierarchyState(grid=grid, **init)
    load_state(state, d["state"])
    return state


@dataclass
class Checkpoint:
    stage: int
    config: dict
    fno: FnoModel | None = None
    field: VelocityField | None = None
    hierarchy: HierarchyState | None = None
    rng: dict = dc_field(default_factory=dict)
    extra: dict = dc_field(default_factory=dict)

    def to_json(self) -> str:
        doc = {
            "format": FORMAT,
            "version": VERSION,
            "stage": self.stage,
            "config": self.config,
            "fno": fno_to_json(self.fno) if self.fno is not None else None,
            "field": field_to_json(self.field) if self.field is not None else None,
            "hierarchy": hierarchy_to_json(self.hierarchy) if self.hierarchy is not None else None,
            "rng": self.rng,
            "extra": self.extra,
        }
        return json.dumps(doc, sort_keys=True, allow_nan=False) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Checkpoint":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"not a checkpoint: {exc}") from None
        if not isinstance(doc, dict) or doc.get("format") != FORMAT:
            raise CheckpointError("not a dhgflow checkpoint")
        if doc.get("version") != VERSION:
            raise CheckpointError(f"checkpoint version {doc.get('version')!r} unsupported (expected {VERSION})")
        return cls(
            stage=doc["stage"],
            config=doc["config"],
            fno=fno_from_json(doc["fno"]) if doc["fno"] is not None else None,
            field=field_from_json(doc["field"]) if doc["field"] is not None else None,
            hierarchy=hierarchy_from_json(doc["hierarchy"]) if doc["hierarchy"] is not None else None,
            rng=doc.get("rng", {}),
            extra=doc.get("extra", {}),
        )

    def save(self, path: str | Path) -> Path:
        p = Path(path)
        p.parent.mkdir(parents=True, exist_ok=True)
        p.write_text(self.to_json(), encoding="utf-8")
        return p

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        p = Path(path)
        if not p.is_file():
            raise CheckpointError(f"checkpoint not found: {p}")
        return cls.from_json(p.read_text(encoding="utf-8"))


def rng_state(np_rng: np.random.Generator | None = None, torch_gen: torch.Generator | None = None) -> dict[str, Any]:
    out: dict[str, Any] = {}
    if np_rng is not None:
        out["numpy"] = np_rng.bit_generator.state
    if torch_gen is not None:
        out["torch"] = torch_gen.get_state().tolist()
    return out


def restore_rng(state: dict) -> tuple[np.random.Generator | None, torch.Generator | None]:
    np_rng = torch_gen = None
    if "numpy" in state:
        np_rng = np.random.default_rng()
        np_rng.bit_generator.state = state["numpy"]
    if "torch" in state:
        torch_gen = torch.Generator()
        torch_gen.set_state(torch.tensor(state["torch"], dtype=torch.uint8))
    return np_rng, torch_gen
