"""Tiny set-prediction detector on patch tokens, written as pure functions.

Parameters live in an ordered name -> float64 tensor dict so partitions
(backbone / encoder / decoder) can be snapshotted, swapped and EMA-averaged by
name prefix without touching module state.  Forward is deterministic; all
nonlinearities are smooth (gelu, sigmoid, softmax) so central differences
validate the gradients cleanly.

Architecture, defaults in parentheses:
  backbone  linear projection of p x p patches (p=8) to width d (32), plus a
            fixed 2-d sinusoidal position code
  encoder   2 pre-norm self-attention blocks, 2 heads, mlp ratio 4, final norm
  decoder   10 learned queries, 3 blocks of self-attention / cross-attention /
            mlp, shared output norm, shared heads: 1-linear class head with
            per-class sigmoid, 3-layer mlp box head with sigmoid (cx, cy, w, h)

Parameter count for the defaults is 85351:
  backbone 3 p^2 d + d; per encoder block 12 d^2 + 13 d; per decoder block
  16 d^2 + 19 d; queries Q d; the two shared norms 2 d each; class head
  d C + C; box head 2 (d^2 + d) + 4 d + 4.
"""

import io
import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache

import numpy as np
import torch

PARTITIONS = ("backbone", "encoder", "decoder")
CHECKPOINT_VERSION = "sfodlab-checkpoint-v1"
MLP_RATIO = 4
# patches arrive in [0, 1]; centering them roughly doubles early learning
# speed because the projection no longer has to cancel the common 0.5 offset
PE_SCALE = 1.0
PE_BASE = 10000.0  # frequency base of the sinusoidal code
CENTER_INPUT = True
INIT_GAIN = 1.0  # scales every uniform fan-in bound
CLS_GAIN = 1.0  # multiplies class logits before the sigmoid


class NonFiniteLossError(RuntimeError):
    pass


@dataclass(frozen=True)
class DetectorConfig:
    """Shape of the detector; equality of configs gates EMA / partition swaps."""

    image_size: int = 64
    channels: int = 3
    patch_size: int = 8
    embed_dim: int = 32
    heads: int = 2
    encoder_layers: int = 2
    decoder_layers: int = 3
    queries: int = 10
    classes: int = 3

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("image_size must be divisible by patch_size")
        if self.embed_dim % self.heads != 0:
            raise ValueError("embed_dim must be divisible by heads")
        if self.embed_dim % 4 != 0:
            raise ValueError("embed_dim must be divisible by 4 for the position code")
        if self.decoder_layers < 2:
            raise ValueError("need at least 2 decoder layers for the uncertainty signal")
        if min(self.encoder_layers, self.queries, self.classes, self.channels) < 1:
            raise ValueError("all size fields must be positive")

    @property
    def grid(self):
        return self.image_size // self.patch_size

    @property
    def tokens(self):
        return self.grid * self.grid

    @property
    def patch_dim(self):
        return self.channels * self.patch_size * self.patch_size


@dataclass
class DetectorParams:
    """config plus an ordered name -> tensor dict; names carry the partition."""

    config: DetectorConfig
    tensors: dict

    def partition(self, name):
        if name not in PARTITIONS:
            raise ValueError(f"unknown partition {name!r}")
        return {k: v for k, v in self.tensors.items() if k.split(".", 1)[0] == name}

    def count(self):
        return sum(t.numel() for t in self.tensors.values())


@dataclass
class ForwardOutput:
    """Per-decoder-layer sigmoid outputs.

    class_probs: (L, B, Q, C), boxes: (L, B, Q, 4), both in (0, 1).
    """

    class_probs: torch.Tensor
    boxes: torch.Tensor

    @property
    def final_probs(self):
        return self.class_probs[-1]

    @property
    def final_boxes(self):
        return self.boxes[-1]


def _uniform(rng, fan_in, shape):
    bound = INIT_GAIN / math.sqrt(fan_in)
    return torch.from_numpy(rng.uniform(-bound, bound, size=shape))


def init_detector(config: DetectorConfig, seed: int) -> DetectorParams:
    """Fresh parameters: uniform fan-in weights, zero biases, unit norms.

    Same (config, seed) always yields bitwise-identical tensors; the draw uses
    one numpy PCG64 stream in fixed creation order.
    """
    rng = np.random.default_rng(seed)
    d = config.embed_dim
    t = {}

    def linear(prefix, fan_in, fan_out):
        t[f"{prefix}.w"] = _uniform(rng, fan_in, (fan_in, fan_out))
        t[f"{prefix}.b"] = torch.zeros(fan_out, dtype=torch.float64)

    def norm(prefix):
        t[f"{prefix}.g"] = torch.ones(d, dtype=torch.float64)
        t[f"{prefix}.b"] = torch.zeros(d, dtype=torch.float64)

    linear("backbone.patch", config.patch_dim, d)

    for i in range(config.encoder_layers):
        p = f"encoder.{i}"
        norm(f"{p}.ln1")
        linear(f"{p}.attn.qkv", d, 3 * d)
        linear(f"{p}.attn.out", d, d)
        norm(f"{p}.ln2")
        linear(f"{p}.mlp.fc1", d, MLP_RATIO * d)
        linear(f"{p}.mlp.fc2", MLP_RATIO * d, d)
    norm("encoder.norm")

    t["decoder.queries"] = _uniform(rng, d, (config.queries, d))
    for i in range(config.decoder_layers):
        p = f"decoder.{i}"
        norm(f"{p}.ln1")
        linear(f"{p}.self.qkv", d, 3 * d)
        linear(f"{p}.self.out", d, d)
        norm(f"{p}.ln2")
        linear(f"{p}.cross.q", d, d)
        linear(f"{p}.cross.kv", d, 2 * d)
        linear(f"{p}.cross.out", d, d)
        norm(f"{p}.ln3")
        linear(f"{p}.mlp.fc1", d, MLP_RATIO * d)
        linear(f"{p}.mlp.fc2", MLP_RATIO * d, d)
    norm("decoder.norm")
    linear("decoder.cls", d, config.classes)
    linear("decoder.box.fc1", d, d)
    linear("decoder.box.fc2", d, d)
    linear("decoder.box.fc3", d, 4)

    for name in t:
        if name.split(".", 1)[0] not in PARTITIONS:
            raise AssertionError(f"parameter {name} outside known partitions")
    return DetectorParams(config=config, tensors=t)


@lru_cache(maxsize=8)
def _position_code(grid: int, dim: int) -> torch.Tensor:
    """Fixed 2-d sinusoidal code, (grid*grid, dim); half row, half column."""
    half = dim // 2
    quarter = half // 2
    freqs = 1.0 / (PE_BASE ** (np.arange(quarter, dtype=np.float64) / quarter))
    pos = np.arange(grid, dtype=np.float64)
    angles = pos[:, None] * freqs[None, :]
    axis = np.concatenate([np.sin(angles), np.cos(angles)], axis=1)  # (grid, half)
    rows = np.repeat(axis, grid, axis=0)
    cols = np.tile(axis, (grid, 1))
    return torch.from_numpy(np.concatenate([rows, cols], axis=1))


def _layer_norm(x, p, prefix):
    return torch.nn.functional.layer_norm(
        x, (x.shape[-1],), weight=p[f"{prefix}.g"], bias=p[f"{prefix}.b"], eps=1e-5
    )


def _split_heads(x, heads):
    b, t, d = x.shape
    return x.reshape(b, t, heads, d // heads).permute(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, dh = x.shape
    return x.permute(0, 2, 1, 3).reshape(b, t, h * dh)


def _attend(q, k, v):
    scale = 1.0 / math.sqrt(q.shape[-1])
    attn = torch.softmax(q @ k.transpose(-1, -2) * scale, dim=-1)
    return attn @ v


def _self_attention(x, p, prefix, heads):
    qkv = x @ p[f"{prefix}.qkv.w"] + p[f"{prefix}.qkv.b"]
    q, k, v = qkv.chunk(3, dim=-1)
    out = _merge_heads(
        _attend(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads))
    )
    return out @ p[f"{prefix}.out.w"] + p[f"{prefix}.out.b"]


def _cross_attention(x, memory, p, prefix, heads):
    q = x @ p[f"{prefix}.q.w"] + p[f"{prefix}.q.b"]
    kv = memory @ p[f"{prefix}.kv.w"] + p[f"{prefix}.kv.b"]
    k, v = kv.chunk(2, dim=-1)
    out = _merge_heads(
        _attend(_split_heads(q, heads), _split_heads(k, heads), _split_heads(v, heads))
    )
    return out @ p[f"{prefix}.out.w"] + p[f"{prefix}.out.b"]


def _mlp(x, p, prefix):
    h = torch.nn.functional.gelu(x @ p[f"{prefix}.fc1.w"] + p[f"{prefix}.fc1.b"])
    return h @ p[f"{prefix}.fc2.w"] + p[f"{prefix}.fc2.b"]


def _patchify(images, cfg):
    b = images.shape[0]
    g, s = cfg.grid, cfg.patch_size
    x = images.reshape(b, cfg.channels, g, s, g, s)
    x = x.permute(0, 2, 4, 1, 3, 5)  # (B, gy, gx, C, s, s), row-major patch order
    return x.reshape(b, g * g, cfg.patch_dim)


def forward(params: DetectorParams, images) -> ForwardOutput:
    """Run the detector on a (B, C, H, W) float batch.

    Accepts numpy or torch input in [0, 1]; computes in float64.  Raises on a
    shape mismatch with the config.
    """
    cfg = params.config
    p = params.tensors
    if isinstance(images, np.ndarray):
        images = torch.from_numpy(images)
    images = images.to(torch.float64)
    expected = (cfg.channels, cfg.image_size, cfg.image_size)
    if images.ndim != 4 or tuple(images.shape[1:]) != expected:
        raise ValueError(f"expected (B, {expected}), got {tuple(images.shape)}")

    patches = _patchify(images, cfg)
    if CENTER_INPUT:
        patches = 2.0 * patches - 1.0
    x = patches @ p["backbone.patch.w"] + p["backbone.patch.b"]
    x = x + PE_SCALE * _position_code(cfg.grid, cfg.embed_dim)

    for i in range(cfg.encoder_layers):
        pre = f"encoder.{i}"
        x = x + _self_attention(_layer_norm(x, p, f"{pre}.ln1"), p, f"{pre}.attn", cfg.heads)
        x = x + _mlp(_layer_norm(x, p, f"{pre}.ln2"), p, f"{pre}.mlp")
    memory = _layer_norm(x, p, "encoder.norm")

    q = p["decoder.queries"].unsqueeze(0).expand(images.shape[0], -1, -1)
    probs_layers, box_layers = [], []
    for i in range(cfg.decoder_layers):
        pre = f"decoder.{i}"
        q = q + _self_attention(_layer_norm(q, p, f"{pre}.ln1"), p, f"{pre}.self", cfg.heads)
        q = q + _cross_attention(
            _layer_norm(q, p, f"{pre}.ln2"), memory, p, f"{pre}.cross", cfg.heads
        )
        q = q + _mlp(_layer_norm(q, p, f"{pre}.ln3"), p, f"{pre}.mlp")
        h = _layer_norm(q, p, "decoder.norm")
        probs_layers.append(
            torch.sigmoid(CLS_GAIN * (h @ p["decoder.cls.w"] + p["decoder.cls.b"]))
        )
        bh = torch.nn.functional.gelu(h @ p["decoder.box.fc1.w"] + p["decoder.box.fc1.b"])
        bh = torch.nn.functional.gelu(bh @ p["decoder.box.fc2.w"] + p["decoder.box.fc2.b"])
        box_layers.append(torch.sigmoid(bh @ p["decoder.box.fc3.w"] + p["decoder.box.fc3.b"]))

    return ForwardOutput(
        class_probs=torch.stack(probs_layers), boxes=torch.stack(box_layers)
    )


def loss_and_grad(params: DetectorParams, images, loss_spec):
    """Differentiate loss_spec(forward(params, images)) with respect to params.

    loss_spec maps a ForwardOutput to a scalar tensor.  Returns (loss_value,
    gradients dict keyed like params).  A constant loss_spec yields a zero
    gradient for every tensor; a non-finite loss raises NonFiniteLossError
    naming the first offending tensor.
    """
    leaves = {k: v.detach().clone().requires_grad_(True) for k, v in params.tensors.items()}
    out = forward(DetectorParams(params.config, leaves), images)
    loss = loss_spec(out)
    loss_t = torch.as_tensor(loss, dtype=torch.float64)
    if not torch.isfinite(loss_t).all():
        for name, t in [("class_probs", out.class_probs), ("boxes", out.boxes)]:
            if not torch.isfinite(t).all():
                raise NonFiniteLossError(f"non-finite forward output: {name}")
        for name, t in leaves.items():
            if not torch.isfinite(t).all():
                raise NonFiniteLossError(f"non-finite parameter: {name}")
        raise NonFiniteLossError("loss_spec produced a non-finite value")

    names = list(leaves)
    if isinstance(loss, torch.Tensor) and loss.requires_grad:
        grads = torch.autograd.grad(
            loss, [leaves[n] for n in names], allow_unused=True
        )
        grad_dict = {
            n: (g.detach() if g is not None else torch.zeros_like(leaves[n]))
            for n, g in zip(names, grads)
        }
    else:
        grad_dict = {n: torch.zeros_like(leaves[n]) for n in names}
    return float(loss_t.detach()), grad_dict


def snapshot(params: DetectorParams) -> DetectorParams:
    """Deep, detached copy; later updates to the source leave it untouched."""
    return DetectorParams(
        config=params.config,
        tensors={k: v.detach().clone() for k, v in params.tensors.items()},
    )


def replace_partition(dst: DetectorParams, src: DetectorParams, name) -> DetectorParams:
    """New params taking partition `name` from src and the rest from dst."""
    if name not in PARTITIONS:
        raise ValueError(f"unknown partition {name!r}")
    if dst.config != src.config:
        raise ValueError("partition swap requires identical configs")
    out = {}
    for k, v in dst.tensors.items():
        donor = src.tensors[k] if k.split(".", 1)[0] == name else v
        out[k] = donor.detach().clone()
    return DetectorParams(config=dst.config, tensors=out)


def save_checkpoint(params: DetectorParams, path):
    """Write a versioned binary container; no timestamps, bitwise reproducible.

    Layout: 8-byte little-endian header length, JSON header (sorted keys) with
    the format version, config and tensor index, then raw little-endian
    float64 buffers in index order.
    """
    index = [
        {"name": k, "shape": list(v.shape)} for k, v in params.tensors.items()
    ]
    header = json.dumps(
        {
            "format_version": CHECKPOINT_VERSION,
            "config": asdict(params.config),
            "tensors": index,
        },
        sort_keys=True,
    ).encode("utf-8")
    buf = io.BytesIO()
    buf.write(len(header).to_bytes(8, "little"))
    buf.write(header)
    for v in params.tensors.values():
        buf.write(np.ascontiguousarray(v.detach().numpy(), dtype="<f8").tobytes())
    with open(path, "wb") as f:
        f.write(buf.getvalue())


def load_checkpoint(path) -> DetectorParams:
    with open(path, "rb") as f:
        raw = f.read()
    hlen = int.from_bytes(raw[:8], "little")
    header = json.loads(raw[8 : 8 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')!r}")
    cfg = DetectorConfig(**header["config"])
    tensors = {}
    offset = 8 + hlen
    for entry in header["tensors"]:
        shape = tuple(entry["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f8", count=n, offset=offset).reshape(shape)
        tensors[entry["name"]] = torch.from_numpy(arr.copy())
        offset += n * 8
    return DetectorParams(config=cfg, tensors=tensors)
