"""Single-file checkpoint container.

Layout (little endian)::

    8 bytes   magic  b"MMSCKPT\\0"
    4 bytes   format version (uint32)
    8 bytes   header length N (uint64)
    N bytes   UTF-8 JSON header (configs, digest, epoch, history, tensor index)
    ...       raw tensor blobs, in index order
    32 bytes  SHA-256 of everything above

Tensors are named ``model/<state_dict key>`` and
``optim/<param index>/<state key>``.
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, CheckpointIncompatibleError, CheckpointIntegrityError
from .models import MMSNet, ModelConfig

MAGIC = b"MMSCKPT\x00"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_DIGEST_LEN = 32

_DTYPES = {
    torch.float32: "float32",
    torch.float64: "float64",
    torch.int64: "int64",
    torch.int32: "int32",
    torch.uint8: "uint8",
    torch.bool: "bool",
}
_TORCH_DTYPES = {v: k for k, v in _DTYPES.items()}


def config_digest(train_config: dict, model_config: dict) -> str:
    blob = json.dumps({"train": train_config, "model": model_config}, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


@dataclass
class CheckpointState:
    model: MMSNet
    optimizer_state: dict | None
    epoch: int
    train_config: dict
    train_config_hash: str
    loss_history: list[dict] = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    @property
    def model_config(self) -> ModelConfig:
        return self.model.cfg


def _tensor_entries(state: CheckpointState):
    for k, v in state.model.state_dict().items():
        yield f"model/{k}", v
    if state.optimizer_state:
        for pid, pstate in state.optimizer_state["state"].items():
            for k, v in pstate.items():
                if torch.is_tensor(v):
                    yield f"optim/{pid}/{k}", v


def _optim_scalars(opt_state: dict | None):
    if not opt_state:
        return None
    scalars = {str(pid): {k: v for k, v in ps.items() if not torch.is_tensor(v)}
               for pid, ps in opt_state["state"].items()}
    return {"param_groups": opt_state["param_groups"], "scalars": scalars,
            "param_ids": [str(p) for p in opt_state["state"]]}


def save_checkpoint(state: CheckpointState, path) -> None:
    """Write ``state`` atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    index, blobs, offset = [], [], 0
    for name, t in _tensor_entries(state):
        t = t.detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        raw = t.numpy().tobytes()
        index.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(t.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "config_hash": state.train_config_hash,
        "epoch": state.epoch,
        "train_config": state.train_config,
        "model_config": state.model.cfg.to_dict(),
        "use_classifiers": state.model.has_classifiers,
        "use_projectors": state.model.has_projectors,
        "loss_history": state.loss_history,
        "meta": state.meta,
        "optimizer": _optim_scalars(state.optimizer_state),
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    body = _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + b"".join(blobs)
    data = body + hashlib.sha256(body).digest()
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_checkpoint(path, expected_config_hash: str | None = None) -> CheckpointState:
    """Read and verify a checkpoint.

    Raises :class:`CheckpointIntegrityError` for truncated or altered files and
    :class:`CheckpointIncompatibleError` when ``expected_config_hash`` is given
    and differs from the stored digest. Nothing is built before both checks pass.
    """
    data = Path(path).read_bytes()
    if len(data) < _PREFIX.size + _DIGEST_LEN:
        raise CheckpointIntegrityError(f"{path}: file too short")
    body, digest = data[:-_DIGEST_LEN], data[-_DIGEST_LEN:]
    magic, version, hlen = _PREFIX.unpack_from(body)
    if magic != MAGIC:
        raise CheckpointIntegrityError(f"{path}: bad magic")
    if hashlib.sha256(body).digest() != digest:
        raise CheckpointIntegrityError(f"{path}: checksum mismatch")
    if version != FORMAT_VERSION:
        raise CheckpointIncompatibleError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    try:
        header = json.loads(body[start:start + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointIntegrityError(f"{path}: unreadable header") from exc
    if config_digest(header["train_config"], header["model_config"]) != header["config_hash"]:
        raise CheckpointIntegrityError(f"{path}: stored config does not match its digest")
    if expected_config_hash is not None and expected_config_hash != header["config_hash"]:
        raise CheckpointIncompatibleError(
            f"{path}: config digest {header['config_hash'][:12]} != expected {expected_config_hash[:12]}")

    blob_start = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        lo = blob_start + entry["offset"]
        raw = body[lo:lo + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)

    model = MMSNet(ModelConfig.from_dict(header["model_config"]),
                   use_classifiers=header["use_classifiers"], use_projectors=header["use_projectors"])
    model.load_state_dict({k[len("model/"):]: v for k, v in tensors.items() if k.startswith("model/")})

    opt_state = None
    opt = header["optimizer"]
    if opt is not None:
        state = {}
        for pid in opt["param_ids"]:
            ps = dict(opt["scalars"].get(pid, {}))
            prefix = f"optim/{pid}/"
            ps.update({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
            state[int(pid)] = ps
        opt_state = {"state": state, "param_groups": opt["param_groups"]}

    return CheckpointState(
        model=model,
        optimizer_state=opt_state,
        epoch=header["epoch"],
        train_config=header["train_config"],
        train_config_hash=header["config_hash"],
        loss_history=header["loss_history"],
        meta=header["meta"],
    )
