"""Toy joint model: shared backbone feeding the fusion head and a box-denoising head.

The detector head is a deliberately small regressor: for each noisy box it
pools the deepest pyramid feature at the box center, appends a global
average feature, the noisy coordinates and a sinusoidal time embedding,
and maps through a two-layer perceptron (sigmoid output) to predicted
clean boxes.  Only the backbone is shared between tasks.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ParamSet, Tape, Var
from .diffusion import unscale_boxes, BOX_SCALE
from .fusion_net import (
    FusionNetConfig,
    backbone_forward,
    backbone_names,
    fusion_forward,
    init_fusion_params,
)
from .rng import SplitMix64

MODEL_FORMAT = "fusedet-model-v1"


@dataclass(frozen=True)
class ModelConfig:
    fusion: FusionNetConfig = FusionNetConfig()
    time_embed_dim: int = 8
    mlp_hidden: int = 64
    boxes_per_scene: int = 16
    diffusion_steps: int = 1000
    # detection-head weight scale; the head is shallow, so this directly
    # sets how hard the box objective pulls on the shared backbone
    det_init_gain: float = 4.0

    def to_json(self) -> dict:
        d = asdict(self)
        d["fusion"]["stage_channels"] = list(self.fusion.stage_channels)
        d["fusion"]["branches"] = list(self.fusion.branches)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ModelConfig":
        f = dict(d["fusion"])
        f["stage_channels"] = tuple(f["stage_channels"])
        f["branches"] = tuple(f["branches"])
        rest = {k: v for k, v in d.items() if k != "fusion"}
        return cls(fusion=FusionNetConfig(**f), **rest)


def time_embedding(t: int, total: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of the diffusion step at geometric frequencies."""
    half = dim // 2
    freqs = (1.0 / total) * (float(total) ** (np.arange(half) / max(half - 1, 1)))
    angles = t * freqs
    return np.concatenate([np.sin(angles), np.cos(angles)])


class ToyModel:
    """Parameter store plus the forward passes of both heads."""

    def __init__(self, cfg: ModelConfig, values: dict[str, np.ndarray]):
        self.cfg = cfg
        self.params = ParamSet(values, shared=backbone_names(cfg.fusion))

    @classmethod
    def create(cls, cfg: ModelConfig, seed: int) -> "ToyModel":
        rng = SplitMix64(seed).derive(0xB00)
        values = init_fusion_params(cfg.fusion, rng)
        feat_dim = cfg.fusion.stage_channels[-1]
        # local feature + (mass, row-centroid, col-centroid) scene summary + box + time
        in_dim = 4 * feat_dim + 4 + cfg.time_embed_dim
        gain = cfg.det_init_gain
        values["det.l1.w"] = rng.normals((in_dim, cfg.mlp_hidden)) * gain * np.sqrt(2.0 / in_dim)
        values["det.l1.b"] = np.zeros(cfg.mlp_hidden)
        values["det.l2.w"] = rng.normals((cfg.mlp_hidden, 4)) * np.sqrt(1.0 / cfg.mlp_hidden)
        values["det.l2.b"] = np.zeros(4)
        return cls(cfg, values)

    def place(self, tape: Tape) -> dict[str, Var]:
        return self.params.place(tape)

    def forward_fusion(self, pvars: dict[str, Var], x: Var, y: Var) -> tuple[Var, list[Var]]:
        return fusion_forward(pvars, x, y, self.cfg.fusion)

    def forward_denoiser(
        self, pvars: dict[str, Var], pyramid: list[Var], z_t: np.ndarray, t: int
    ) -> Var:
        """Predicted clean boxes in [0,1] coordinates for one noisy latent.

        Scene conditioning mixes the feature at the noisy box center, the
        global average feature, and per-channel activation centroids (the
        mean position of each channel's mass) — average pooling alone is
        position-blind, which a box regressor cannot afford.
        """
        feat = pyramid[-1]
        c, h, w = feat.value.shape
        n = z_t.shape[0]
        tape = feat.tape
        centers = unscale_boxes(z_t)[:, :2]
        cols = np.clip((centers[:, 0] * w).astype(np.intp), 0, w - 1)
        rows = np.clip((centers[:, 1] * h).astype(np.intp), 0, h - 1)

        def squash(v):
            # bounded map v/(1+|v|): backbone activations are unnormalized and
            # an unbounded detector input feeds its own gradient back into the
            # backbone, which plain GD cannot contain
            return v / (ad.absolute(v) + 1.0)

        local = squash(ad.gather_pixels(feat, rows, cols))
        mass = ad.mean(feat, axis=(1, 2))
        row_grid = np.broadcast_to(((np.arange(h) + 0.5) / h)[None, :, None], (c, h, w))
        col_grid = np.broadcast_to(((np.arange(w) + 0.5) / w)[None, None, :], (c, h, w))
        denom = mass + 1e-6  # features are post-ReLU, so mass is nonnegative
        cen_r = ad.mean(feat * tape.constant(row_grid.copy()), axis=(1, 2)) / denom
        cen_c = ad.mean(feat * tape.constant(col_grid.copy()), axis=(1, 2)) / denom
        scene_vec = ad.reshape(ad.concat([squash(mass), cen_r, cen_c], axis=0), (1, 3 * c))
        ones = tape.constant(np.ones((n, 1)))
        scene_tiled = ad.matmul(ones, scene_vec)
        zvar = tape.constant(z_t / BOX_SCALE)  # keep MLP inputs O(1)
        temb = tape.constant(np.tile(time_embedding(t, self.cfg.diffusion_steps, self.cfg.time_embed_dim), (n, 1)))
        inp = ad.concat([local, scene_tiled, zvar, temb], axis=1)
        hdn = ad.relu(ad.linear(inp, pvars["det.l1.w"], pvars["det.l1.b"]))
        return ad.linear(hdn, pvars["det.l2.w"], pvars["det.l2.b"])

    def denoiser_for_scene(self, visible: np.ndarray, infrared: np.ndarray):
        """Closure (z_t, t) -> predicted boxes, with the pyramid computed once."""
        tape = Tape()
        pvars = self.place(tape)
        x = tape.constant(np.asarray(visible)[None])
        y = tape.constant(np.asarray(infrared)[None])
        pyramid = backbone_forward(pvars, x, y, self.cfg.fusion)

        def denoiser(z_t: np.ndarray, t: int) -> np.ndarray:
            return self.forward_denoiser(pvars, pyramid, z_t, t).value

        return denoiser

    def save(self, path: str | Path) -> None:
        payload = {
            "format": MODEL_FORMAT,
            "config": self.cfg.to_json(),
            "shared": sorted(self.params.shared),
            "params": {
                name: {
                    "shape": list(arr.shape),
                    "data": base64.b64encode(np.ascontiguousarray(arr, dtype="<f8").tobytes()).decode("ascii"),
                }
                for name, arr in self.params.values.items()
            },
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "ToyModel":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("format") != MODEL_FORMAT:
            raise ValueError(f"unrecognized model file format: {payload.get('format')!r}")
        cfg = ModelConfig.from_json(payload["config"])
        values = {}
        for name, rec in payload["params"].items():
            arr = np.frombuffer(base64.b64decode(rec["data"]), dtype="<f8").reshape(rec["shape"])
            values[name] = arr.astype(np.float64)
        model = cls(cfg, values)
        if sorted(model.params.shared) != payload["shared"]:
            raise ValueError("model file shared-mask does not match its config")
        return model
