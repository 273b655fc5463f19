"""Encoder branches: a small convolutional backbone plus an affine projection head.

Each branch maps a (3, P, P) patch to a 128-d descriptor.  The network is
written directly in numpy with hand-derived backpropagation; the
im2col/col2im gather-scatter kernels live in :mod:`croco.kernels`.

Activations are NHWC internally; public inputs are channel-first patches.
"""

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from croco import kernels
from croco.raster import Modality, NormalizationStats

EMBED_DIM = 128
INPUT_CHANNELS = 3
KERNEL = 3
SUPPORTED_PATCH_PX = (8, 16, 32, 64)
DESK_WIDTHS = (32, 64, 128, 256)

CKPT_MAGIC = b"CROCOCKPT"
CKPT_VERSION = 1


class EncoderError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


def _layer_plan(arch):
    """List of (cin, cout, stride, residual) conv layers."""
    plan = []
    cin = INPUT_CHANNELS
    for w in DESK_WIDTHS:
        plan.append((cin, w, 2, False))
        if arch == "deep":
            plan.append((w, w, 1, True))
            plan.append((w, w, 1, True))
        elif arch != "desk":
            raise EncoderError(f"unknown architecture {arch!r}")
        cin = w
    return plan


@dataclass(eq=False)
class EncoderBranch:
    modality: Modality
    arch: str
    seed: int
    params: dict = field(repr=False)

    @property
    def plan(self):
        return _layer_plan(self.arch)

    @property
    def dtype(self):
        return self.params["proj.weight"].dtype

    @property
    def embed_dim(self):
        return self.params["proj.weight"].shape[1]

    def astype(self, dtype):
        """Copy of this branch with parameters cast to ``dtype``."""
        return EncoderBranch(
            self.modality, self.arch, self.seed, {k: v.astype(dtype) for k, v in self.params.items()}
        )

    def copy(self):
        return EncoderBranch(self.modality, self.arch, self.seed, {k: v.copy() for k, v in self.params.items()})

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(f"{self.modality.value}:{self.arch}".encode())
        for name in sorted(self.params):
            h.update(name.encode())
            h.update(np.ascontiguousarray(self.params[name], dtype="<f4").tobytes())
        return h.hexdigest()

    def n_params(self):
        return sum(p.size for p in self.params.values())


def init_branch(modality, arch="desk", seed=0, dtype=np.float32):
    """Seeded fan-in uniform init for convolutions, zero biases.

    The modality is mixed into the seed so the two branches of a model
    start from different weights even under a shared run seed.
    """
    modality = Modality(modality)
    code = 0 if modality is Modality.RGB else 1
    rng = np.random.default_rng([int(seed), code])
    params = {}
    for i, (cin, cout, _, _) in enumerate(_layer_plan(arch)):
        fan_in = KERNEL * KERNEL * cin
        bound = np.sqrt(6.0 / fan_in)
        params[f"conv{i}.weight"] = rng.uniform(-bound, bound, size=(fan_in, cout)).astype(dtype)
        params[f"conv{i}.bias"] = np.zeros(cout, dtype=dtype)
    feat = DESK_WIDTHS[-1]
    bound = np.sqrt(1.0 / feat)
    params["proj.weight"] = rng.uniform(-bound, bound, size=(feat, EMBED_DIM)).astype(dtype)
    params["proj.bias"] = np.zeros(EMBED_DIM, dtype=dtype)
    return EncoderBranch(modality, arch, int(seed), params)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_input(branch, patches):
    x = np.asarray(patches)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != INPUT_CHANNELS or x.shape[2] != x.shape[3]:
        raise EncoderError(f"expected (k, 3, P, P) patches, got shape {np.shape(patches)}")
    if x.shape[2] not in SUPPORTED_PATCH_PX:
        raise EncoderError(f"patch size {x.shape[2]} not in supported set {SUPPORTED_PATCH_PX}")
    if not np.all(np.isfinite(x)):
        raise EncoderError("non-finite values in input patch")
    return np.ascontiguousarray(x.transpose(0, 2, 3, 1), dtype=branch.dtype), single


def _forward(branch, x, keep):
    caches = []
    p = branch.params
    for i, (cin, cout, stride, residual) in enumerate(branch.plan):
        n, h, w, _ = x.shape
        ho = (h + 2 - KERNEL) // stride + 1
        wo = (w + 2 - KERNEL) // stride + 1
        xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
        cols = kernels.im2col(xp, KERNEL, stride, ho, wo).reshape(n * ho * wo, KERNEL * KERNEL * cin)
        pre = cols @ p[f"conv{i}.weight"] + p[f"conv{i}.bias"]
        sig = _sigmoid(pre)
        out = (pre * sig).reshape(n, ho, wo, cout)
        if residual:
            out = out + x
        if keep:
            caches.append((cols, pre, sig, xp.shape, (n, ho, wo)))
        x = out
    feat = x.mean(axis=(1, 2))
    z = feat @ p["proj.weight"] + p["proj.bias"]
    return z, (caches, feat, x.shape)


def forward(branch, patches):
    """Embed one (3, P, P) patch or a batch (k, 3, P, P); no normalization."""
    x, single = _check_input(branch, patches)
    z, _ = _forward(branch, x, keep=False)
    return z[0] if single else z


def forward_train(branch, patches):
    """Forward pass that keeps the activations needed by :func:`backward`."""
    x, _ = _check_input(branch, patches)
    return _forward(branch, x, keep=True)


def backward(branch, cache, dz):
    """Parameter gradients given dL/dz for a batch from :func:`forward_train`."""
    caches, feat, last_shape = cache
    p = branch.params
    dz = np.asarray(dz, dtype=branch.dtype)
    grads = {
        "proj.weight": feat.T @ dz,
        "proj.bias": dz.sum(axis=0),
    }
    n, hl, wl, cl = last_shape
    dfeat = dz @ p["proj.weight"].T
    dout = np.broadcast_to((dfeat / (hl * wl))[:, None, None, :], last_shape)
    plan = branch.plan
    for i in range(len(plan) - 1, -1, -1):
        cin, cout, stride, residual = plan[i]
        cols, pre, sig, xp_shape, (n, ho, wo) = caches[i]
        dpre = dout.reshape(-1, cout) * (sig * (1.0 + pre * (1.0 - sig)))
        grads[f"conv{i}.weight"] = cols.T @ dpre
        grads[f"conv{i}.bias"] = dpre.sum(axis=0)
        if i == 0:
            break
        dcols = (dpre @ p[f"conv{i}.weight"].T).reshape(n, ho, wo, KERNEL * KERNEL, cin)
        dxp = kernels.col2im(dcols, xp_shape[1], xp_shape[2], KERNEL, stride)
        dx = dxp[:, 1:-1, 1:-1, :]
        if residual:
            dx = dx + dout
        dout = dx
    return {k: grads[k] for k in p}


def data_init(branch, patches, eps=1e-5):
    """Data-dependent rescaling of a freshly initialized branch, in place.

    Layer by layer, each convolution channel is rescaled and shifted so its
    pre-activation has zero mean and unit variance over ``patches``; the
    projection bias is then set so the sample's mean embedding is zero.
    Without this the pooled features of all patches share one dominant
    direction and the contrastive loss starts on a flat plateau.
    """
    p = branch.params
    for i in range(len(branch.plan)):
        _, (caches, _, _) = forward_train(branch, patches)
        pre = caches[i][1].astype(np.float64)
        mean = pre.mean(axis=0)
        std = pre.std(axis=0) + eps
        w = p[f"conv{i}.weight"]
        p[f"conv{i}.weight"] = (w / std).astype(w.dtype)
        p[f"conv{i}.bias"] = ((p[f"conv{i}.bias"] - mean) / std).astype(w.dtype)
    _, (_, feat, _) = forward_train(branch, patches)
    w = p["proj.weight"]
    p["proj.bias"] = (-(feat.astype(np.float64).mean(axis=0) @ w)).astype(w.dtype)
    return branch


def embed(encoder, patches, chunk=256):
    """Embeddings for a batch from either an EncoderBranch or a plain callable.

    Callables (e.g. test oracles) receive the (k, 3, P, P) batch and must
    return a (k, D) array.
    """
    patches = np.asarray(patches)
    if not isinstance(encoder, EncoderBranch):
        return np.asarray(encoder(patches), dtype=np.float64)
    outs = [forward(encoder, patches[s : s + chunk]) for s in range(0, len(patches), chunk)]
    return np.concatenate(outs, axis=0)


def modality_of(encoder):
    return getattr(encoder, "modality", None)


def l2_normalize(z, axis=-1):
    z = np.asarray(z, dtype=np.float64)
    norms = np.linalg.norm(z, axis=axis, keepdims=True)
    if np.any(norms == 0) or not np.all(np.isfinite(norms)):
        raise EncoderError("cannot normalize a zero or non-finite embedding")
    return z / norms


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Checkpoint:
    rgb: EncoderBranch
    dem: EncoderBranch
    dem_stats: NormalizationStats = None
    rgb_stats: NormalizationStats = None
    config: dict = field(default_factory=dict)
    step: int = 0
    version: int = CKPT_VERSION

    def fingerprint(self):
        h = hashlib.sha256()
        h.update(self.rgb.fingerprint().encode())
        h.update(self.dem.fingerprint().encode())
        return h.hexdigest()


def save_checkpoint(ckpt, path):
    """Write magic, version, length-prefixed JSON header, then float32 blocks."""
    blocks = []
    manifest = []
    offset = 0
    for tag, branch in (("rgb", ckpt.rgb), ("dem", ckpt.dem)):
        for name, arr in branch.params.items():
            data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            manifest.append({"branch": tag, "name": name, "shape": list(arr.shape), "offset": offset})
            blocks.append(data)
            offset += len(data)
    header = {
        "version": ckpt.version,
        "step": int(ckpt.step),
        "branches": {
            tag: {"modality": b.modality.value, "arch": b.arch, "seed": b.seed}
            for tag, b in (("rgb", ckpt.rgb), ("dem", ckpt.dem))
        },
        "stats": {
            "dem": ckpt.dem_stats.to_dict() if ckpt.dem_stats else None,
            "rgb": ckpt.rgb_stats.to_dict() if ckpt.rgb_stats else None,
        },
        "config": ckpt.config,
        "params": manifest,
        "payload_bytes": offset,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(struct.pack("<IQ", CKPT_VERSION, len(hb)))
        f.write(hb)
        for b in blocks:
            f.write(b)
    return path


def load_checkpoint(path):
    raw = Path(path).read_bytes()
    m = len(CKPT_MAGIC)
    if raw[:m] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic bytes")
    if len(raw) < m + 12:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<IQ", raw[m : m + 12])
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    start = m + 12
    if len(raw) < start + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[start : start + hlen])
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header") from exc
    payload = raw[start + hlen :]
    if len(payload) != header["payload_bytes"]:
        raise CheckpointError(
            f"{path}: payload is {len(payload)} bytes, header declares {header['payload_bytes']}"
        )
    params = {"rgb": {}, "dem": {}}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=entry["offset"])
        params[entry["branch"]][entry["name"]] = arr.astype(np.float32).reshape(shape)
    branches = {
        tag: EncoderBranch(Modality(meta["modality"]), meta["arch"], meta["seed"], params[tag])
        for tag, meta in header["branches"].items()
    }
    stats = header["stats"]
    return Checkpoint(
        rgb=branches["rgb"],
        dem=branches["dem"],
        dem_stats=NormalizationStats.from_dict(stats["dem"]) if stats.get("dem") else None,
        rgb_stats=NormalizationStats.from_dict(stats["rgb"]) if stats.get("rgb") else None,
        config=header["config"],
        step=header["step"],
        version=version,
    )
