"""Binary checkpoint format for the trained sub-models.

Layout: 8-byte magic ``PIGRAND1``, an unsigned 64-bit little-endian byte
count, that many bytes of UTF-8 JSON metadata, then the little-endian
float64 payload in fixed order: connectivity W1 row-major, b1, W2, b2,
followed by the dissipation net in the same order.  Laser parameters,
feature scales, and training metadata live in the JSON block; JSON floats
are written with ``repr`` semantics, so the whole file round-trips
bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .submodels import FeatureScales, MlpParams, softplus

MAGIC = b"PIGRAND1"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    phi: MlpParams
    psi: MlpParams
    scales: FeatureScales
    laser_intensity: float = 0.0
    laser_eta_raw: float = 0.0
    material: str = ""
    training_meta: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    @property
    def laser_eta(self) -> float:
        """Effective decay rate; the raw value is softplus-reparameterized."""
        return float(softplus(self.laser_eta_raw))


def _mlp_payload(params: MlpParams) -> np.ndarray:
    return np.concatenate([
        params.W1.ravel(), params.b1, params.w2, np.array([params.b2]),
    ])


def _mlp_meta(params: MlpParams) -> dict:
    return {
        "input_dim": params.input_dim,
        "hidden_width": params.hidden_width,
        "output_transform": params.output_transform,
    }


def _mlp_from(meta: dict, flat: np.ndarray) -> MlpParams:
    d, h = int(meta["input_dim"]), int(meta["hidden_width"])
    need = h * d + h + h + 1
    if flat.shape[0] != need:
        raise CheckpointError("truncated checkpoint: parameter block too short")
    w1, rest = flat[:h * d].reshape(h, d), flat[h * d:]
    return MlpParams(W1=w1.copy(), b1=rest[:h].copy(), w2=rest[h:2 * h].copy(),
                     b2=float(rest[2 * h]), output_transform=str(meta["output_transform"]))


def save_checkpoint(ckpt: Checkpoint, path: str) -> None:
    meta = {
        "version": ckpt.version,
        "material": ckpt.material,
        "t_ref": ckpt.scales.t_ref,
        "rho_ref": ckpt.scales.rho_ref,
        "sid_ref": ckpt.scales.sid_ref,
        "laser_intensity": ckpt.laser_intensity,
        "laser_eta_raw": ckpt.laser_eta_raw,
        "phi": _mlp_meta(ckpt.phi),
        "psi": _mlp_meta(ckpt.psi),
        "training": ckpt.training_meta,
    }
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = np.concatenate([_mlp_payload(ckpt.phi), _mlp_payload(ckpt.psi)])
    payload = np.ascontiguousarray(payload, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(meta_bytes)))
        fh.write(meta_bytes)
        fh.write(payload.tobytes())


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    if len(blob) < 16:
        raise CheckpointError(f"{path}: truncated checkpoint")
    (meta_len,) = struct.unpack("<Q", blob[8:16])
    if len(blob) < 16 + meta_len:
        raise CheckpointError(f"{path}: truncated checkpoint metadata")
    try:
        meta = json.loads(blob[16:16 + meta_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: malformed checkpoint metadata ({exc})")
    if int(meta.get("version", -1)) != FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {meta.get('version')}"
        )
    payload = blob[16 + meta_len:]
    if len(payload) % 8 != 0:
        raise CheckpointError(f"{path}: truncated checkpoint payload")
    flat = np.frombuffer(payload, dtype="<f8")
    phi_meta, psi_meta = meta["phi"], meta["psi"]
    n_phi = (phi_meta["input_dim"] + 2) * phi_meta["hidden_width"] + 1
    n_psi = (psi_meta["input_dim"] + 2) * psi_meta["hidden_width"] + 1
    if flat.shape[0] != n_phi + n_psi:
        raise CheckpointError(f"{path}: truncated checkpoint payload")
    return Checkpoint(
        phi=_mlp_from(phi_meta, flat[:n_phi]),
        psi=_mlp_from(psi_meta, flat[n_phi:]),
        scales=FeatureScales(t_ref=float(meta["t_ref"]),
                             rho_ref=float(meta["rho_ref"]),
                             sid_ref=float(meta["sid_ref"])),
        laser_intensity=float(meta["laser_intensity"]),
        laser_eta_raw=float(meta["laser_eta_raw"]),
        material=str(meta.get("material", "")),
        training_meta=dict(meta.get("training", {})),
        version=int(meta["version"]),
    )
