"""Trained-estimator container and its on-disk checkpoint format.

A checkpoint is a single self-describing file: a magic string, a JSON header
(metadata, support-transform table, prior, site geometry, architecture
descriptors, named tensor index), then raw little-endian float64 tensor
bytes.  Writing is fully deterministic, so identical training runs produce
byte-identical files, and loading reproduces draws bit-exactly.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import ConfigError
from .flow import CouplingFlow, SupportTransform, flow_inverse
from .model import PriorSpec
from .spatial import SiteSet
from .summaries import RAlphaNet, RXNet

__all__ = ["TrainedEstimator", "save_checkpoint", "load_checkpoint"]

_MAGIC = b"AMXCKPT1\n"


def _sites_payload(sites: SiteSet) -> dict:
    return {
        "site_id": list(sites.site_id),
        "coords": sites.coords.tolist(),
        "covariates": sites.covariates.tolist(),
        "dist": sites.dist.tolist(),
    }


def _sites_from_payload(payload: dict) -> SiteSet:
    return SiteSet(
        tuple(payload["site_id"]),
        np.asarray(payload["coords"], dtype=float),
        np.asarray(payload["covariates"], dtype=float),
        np.asarray(payload["dist"], dtype=float),
    )


@dataclass
class TrainedEstimator:
    """Frozen summary network + flow pair with everything needed to draw."""

    kind: str  # "ralpha" | "rx"
    net: torch.nn.Module
    flow: CouplingFlow
    transform: SupportTransform
    variant_name: str
    covmodel_name: str
    sites: SiteSet
    prior: PriorSpec
    seed: int
    train_config: dict = field(default_factory=dict)
    training_log: list = field(default_factory=list)  # [{batch, train_loss, heldout_loss}]

    @property
    def target_names(self) -> tuple:
        return self.transform.names

    def draw_posterior(self, condition: np.ndarray, n_draws: int, rng) -> np.ndarray:
        """n_draws parameter vectors from the amortized conditional posterior.

        Latents come from the caller's stream; the inverse pass plus the
        support transform guarantees draws inside the prior support.
        """
        z = rng.standard_normal((n_draws, self.flow.dim))
        cond = np.broadcast_to(condition, (n_draws, condition.shape[-1])).copy()
        theta_u = flow_inverse(self.flow, z, cond)
        return self.transform.inverse(theta_u)

    def save(self, path):
        meta = {
            "kind": self.kind,
            "variant": self.variant_name,
            "covmodel": self.covmodel_name,
            "target_names": list(self.target_names),
            "transform": self.transform.to_table(),
            "prior": self.prior.to_dict(),
            "sites": _sites_payload(self.sites),
            "net_config": self.net.config(),
            "flow_config": self.flow.config(),
            "seed": self.seed,
            "train_config": self.train_config,
            "training_log": self.training_log,
        }
        tensors = {}
        for prefix, module in (("net", self.net), ("flow", self.flow)):
            for name, value in module.state_dict().items():
                tensors[f"{prefix}.{name}"] = value.detach().cpu().numpy()
        save_checkpoint(path, meta, tensors)

    @classmethod
    def load(cls, path) -> "TrainedEstimator":
        meta, tensors = load_checkpoint(path)
        net_cfg = meta["net_config"]
        if meta["kind"] == "ralpha":
            net = RAlphaNet(
                net_cfg["n_sites"],
                net_cfg["hyper_names"],
                np.asarray(net_cfg["hyper_loc"]),
                np.asarray(net_cfg["hyper_scale"]),
                net_cfg["n_lstm"],
                net_cfg["n_dense"],
                value_transform=net_cfg.get("value_transform", "log1p"),
            )
        elif meta["kind"] == "rx":
            net = RXNet(net_cfg["d1"], net_cfg["d2"], net_cfg["n_lstm"], net_cfg["n_dense"])
        else:
            raise ConfigError(f"unknown estimator kind {meta['kind']!r}")
        flow_cfg = meta["flow_config"]
        flow = CouplingFlow(
            flow_cfg["dim"],
            flow_cfg["cond_dim"],
            flow_cfg["n_blocks"],
            flow_cfg["hidden"],
            flow_cfg["clamp"],
        )
        net_state = {
            key[len("net."):]: torch.as_tensor(value)
            for key, value in tensors.items()
            if key.startswith("net.")
        }
        flow_state = {
            key[len("flow."):]: torch.as_tensor(value)
            for key, value in tensors.items()
            if key.startswith("flow.")
        }
        net.load_state_dict(net_state)
        flow.load_state_dict(flow_state)
        net.eval()
        flow.eval()
        return cls(
            kind=meta["kind"],
            net=net,
            flow=flow,
            transform=SupportTransform.from_table(meta["transform"]),
            variant_name=meta["variant"],
            covmodel_name=meta["covmodel"],
            sites=_sites_from_payload(meta["sites"]),
            prior=PriorSpec.from_dict(meta["prior"]),
            seed=meta["seed"],
            train_config=meta["train_config"],
            training_log=meta["training_log"],
        )


def save_checkpoint(path, meta: dict, tensors: dict):
    index = []
    payload = bytearray()
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        raw = arr.tobytes()
        index.append(
            {
                "name": name,
                "dtype": str(arr.dtype),
                "shape": list(arr.shape),
                "offset": len(payload),
                "nbytes": len(raw),
            }
        )
        payload.extend(raw)
    header = json.dumps(
        {"format_version": 1, "meta": meta, "tensors": index},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as handle:
        handle.write(_MAGIC)
        handle.write(struct.pack("<Q", len(header)))
        handle.write(header)
        handle.write(bytes(payload))


def load_checkpoint(path):
    import os

    if not os.path.exists(path):
        raise ConfigError(f"checkpoint file {path} does not exist")
    with open(path, "rb") as handle:
        magic = handle.read(len(_MAGIC))
        if magic != _MAGIC:
            raise ConfigError(f"{path}: not a checkpoint file")
        (header_len,) = struct.unpack("<Q", handle.read(8))
        header = json.loads(handle.read(header_len).decode("utf-8"))
        if header.get("format_version") != 1:
            raise ConfigError(f"{path}: unsupported checkpoint version")
        payload = handle.read()
    tensors = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]: entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"])
        tensors[entry["name"]] = arr.copy()
    return header["meta"], tensors
