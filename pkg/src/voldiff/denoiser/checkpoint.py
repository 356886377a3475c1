"""VDCK1 checkpoint files: one JSON header line followed by float32 little-endian arrays."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

from ..condition import ChannelLayout
from ..errors import FormatError
from ..schedule import NoiseSchedule
from .control import ControlAdapter
from .toynet import ToyNetConfig, ToyUNet

MAGIC = "VDCK1"
VERSION = 1


def save_checkpoint(path, model: torch.nn.Module, layout: ChannelLayout, schedule: NoiseSchedule,
                    meta: dict | None = None) -> None:
    kind = "control" if isinstance(model, ControlAdapter) else "unet"
    state = model.state_dict()
    arrays, blobs, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name].detach().cpu().numpy(), dtype="<f4")
        blob = arr.tobytes()
        arrays.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "magic": MAGIC,
        "version": VERSION,
        "kind": kind,
        "in_channels": model.in_channels,
        "net": model.cfg.to_json(),
        "layout": layout.to_json(),
        "schedule": schedule.to_json(),
        "meta": meta or {},
        "arrays": arrays,
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path, expected_layout: ChannelLayout | None = None):
    """Return (header, {name: float32 array}, layout, schedule)."""
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError(f"{path}: missing checkpoint header")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header") from exc
    if header.get("magic") != MAGIC or header.get("version") != VERSION:
        raise FormatError(f"{path}: expected {MAGIC} v{VERSION}, got {header.get('magic')} v{header.get('version')}")
    body = raw[nl + 1:]
    expected = sum(a["nbytes"] for a in header["arrays"])
    if len(body) != expected:
        raise FormatError(f"{path}: payload has {len(body)} bytes, header declares {expected}")
    arrays = {}
    for a in header["arrays"]:
        chunk = body[a["offset"]:a["offset"] + a["nbytes"]]
        arrays[a["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(a["shape"]).copy()
    layout = ChannelLayout.from_json(header["layout"])
    if expected_layout is not None:
        expected_layout.require(layout)
    return header, arrays, layout, NoiseSchedule.from_json(header["schedule"])


def build_model(header: dict, arrays: dict | None = None) -> torch.nn.Module:
    cfg = ToyNetConfig(**header["net"])
    alpha_bar = NoiseSchedule.from_json(header["schedule"]).alpha_bar
    model: torch.nn.Module = ToyUNet(int(header["in_channels"]), cfg, alpha_bar)
    if header["kind"] == "control":
        model = ControlAdapter(model)
    if arrays is not None:
        model.load_state_dict({k: torch.from_numpy(v) for k, v in arrays.items()})
    return model.eval()


def load_checkpoint(path, expected_layout: ChannelLayout | None = None):
    """Return (model, layout, schedule, header)."""
    header, arrays, layout, schedule = read_checkpoint(path, expected_layout)
    return build_model(header, arrays), layout, schedule, header
