"""Wide residual encoder, linear student head, and checkpoint container."""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autodiff import (
    Tensor,
    conv2d,
    dropout,
    global_avg_pool,
    group_norm,
    linear,
    no_grad,
    relu,
)


@dataclass(frozen=True)
class EncoderConfig:
    depth: int = 10
    width_factor: int = 1
    dropout_rate: float = 0.3
    embed_dim: int = 64
    input_size: int = 32
    in_channels: int = 3
    norm_groups: int = 8

    def __post_init__(self):
        if self.depth < 10 or (self.depth - 4) % 6:
            raise ValueError(f"depth must satisfy (depth - 4) % 6 == 0 and depth >= 10, got {self.depth}")
        if self.width_factor < 1:
            raise ValueError(f"width_factor must be >= 1, got {self.width_factor}")
        if not 0 <= self.dropout_rate < 1:
            raise ValueError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if self.embed_dim < 2:
            raise ValueError(f"embed_dim must be >= 2, got {self.embed_dim}")
        if self.input_size < 4 or self.input_size % 4:
            raise ValueError(f"input_size must be a positive multiple of 4, got {self.input_size}")
        if self.in_channels < 1:
            raise ValueError(f"in_channels must be >= 1, got {self.in_channels}")
        for ch in self.widths:
            if ch % self.norm_groups:
                raise ValueError(f"norm_groups={self.norm_groups} does not divide channel count {ch}")

    @property
    def widths(self) -> tuple[int, int, int, int]:
        k = self.width_factor
        return 16, 16 * k, 32 * k, 64 * k

    @property
    def blocks_per_group(self) -> int:
        return (self.depth - 4) // 6


FULL_SCALE_ENCODER = EncoderConfig(depth=28, width_factor=2, dropout_rate=0.3, embed_dim=128, input_size=128)


def _he_normal(rng: np.random.Generator, shape, fan_in: int, gain: float = 2.0) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(gain / fan_in), size=shape)


class WideResNet:
    """Pre-activation wide residual network followed by a linear projection.

    Normalization is per-sample (group norm), so an embedding never depends
    on which other images share its batch.
    """

    def __init__(self, config: EncoderConfig, rng: np.random.Generator, dtype=np.float32):
        self.config = config
        self.params: dict[str, Tensor] = {}
        # (prefix, in_ch, out_ch, stride)
        self.blocks: list[tuple[str, int, int, int]] = []
        w0, w1, w2, w3 = config.widths

        def add(name, arr):
            self.params[name] = Tensor(arr.astype(dtype), requires_grad=True, name=name)

        add("stem.conv", _he_normal(rng, (w0, config.in_channels, 3, 3), config.in_channels * 9))
        in_ch = w0
        for g, (out_ch, stride) in enumerate(((w1, 1), (w2, 2), (w3, 2)), start=1):
            for b in range(config.blocks_per_group):
                prefix = f"group{g}.block{b}"
                s = stride if b == 0 else 1
                add(f"{prefix}.norm1.weight", np.ones(in_ch))
                add(f"{prefix}.norm1.bias", np.zeros(in_ch))
                add(f"{prefix}.conv1", _he_normal(rng, (out_ch, in_ch, 3, 3), in_ch * 9))
                add(f"{prefix}.norm2.weight", np.ones(out_ch))
                add(f"{prefix}.norm2.bias", np.zeros(out_ch))
                add(f"{prefix}.conv2", _he_normal(rng, (out_ch, out_ch, 3, 3), out_ch * 9))
                if in_ch != out_ch or s != 1:
                    add(f"{prefix}.shortcut", _he_normal(rng, (out_ch, in_ch, 1, 1), in_ch))
                self.blocks.append((prefix, in_ch, out_ch, s))
                in_ch = out_ch
        add("final_norm.weight", np.ones(in_ch))
        add("final_norm.bias", np.zeros(in_ch))
        add("proj.weight", _he_normal(rng, (config.embed_dim, in_ch), in_ch, gain=1.0))
        add("proj.bias", np.zeros(config.embed_dim))

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def _check_input(self, x: Tensor) -> None:
        c = self.config
        if x.ndim != 4:
            raise ValueError(f"expected a [B,{c.in_channels},{c.input_size},{c.input_size}] batch, got {x.shape}")
        if x.shape[1] != c.in_channels:
            raise ValueError(f"expected {c.in_channels} input channels, got {x.shape[1]}")
        if x.shape[2:] != (c.input_size, c.input_size):
            raise ValueError(f"expected spatial size {c.input_size}x{c.input_size}, got {x.shape[2]}x{x.shape[3]}")

    def __call__(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        return self.embed(x, training=training, rng=rng)

    def embed(self, x, training: bool = False, rng: np.random.Generator | None = None) -> Tensor:
        """Map a batch of images to [B, embed_dim] embeddings."""
        if not isinstance(x, Tensor):
            x = Tensor(np.asarray(x, dtype=self.params["stem.conv"].dtype))
        self._check_input(x)
        P, G = self.params, self.config.norm_groups
        h = conv2d(x, P["stem.conv"], 1, 1)
        for prefix, _, _, stride in self.blocks:
            o = relu(group_norm(h, P[f"{prefix}.norm1.weight"], P[f"{prefix}.norm1.bias"], G))
            shortcut = conv2d(o, P[f"{prefix}.shortcut"], stride, 0) if f"{prefix}.shortcut" in P else h
            y = conv2d(o, P[f"{prefix}.conv1"], stride, 1)
            y = relu(group_norm(y, P[f"{prefix}.norm2.weight"], P[f"{prefix}.norm2.bias"], G))
            y = dropout(y, self.config.dropout_rate, rng, training)
            y = conv2d(y, P[f"{prefix}.conv2"], 1, 1)
            h = shortcut + y
        h = relu(group_norm(h, P["final_norm.weight"], P["final_norm.bias"], G))
        return linear(global_avg_pool(h), P["proj.weight"], P["proj.bias"])

    def embed_numpy(self, images: np.ndarray, batch_size: int = 128) -> np.ndarray:
        """Eval-mode embeddings without graph recording, batched."""
        out = []
        with no_grad():
            for i in range(0, len(images), batch_size):
                out.append(self.embed(images[i : i + batch_size]).data)
        if not out:
            return np.zeros((0, self.config.embed_dim), dtype=self.params["proj.bias"].dtype)
        return np.concatenate(out)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"shape mismatch for {k}: {state[k].shape} vs {p.shape}")
            p.data = state[k].astype(p.dtype).copy()

    def astype(self, dtype) -> WideResNet:
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        return self


class StudentHead:
    """Linear classifier on top of the embeddings."""

    def __init__(self, embed_dim: int, num_classes: int, rng: np.random.Generator, dtype=np.float32):
        if num_classes < 1:
            raise ValueError("num_classes must be >= 1")
        self.weight = Tensor(
            _he_normal(rng, (num_classes, embed_dim), embed_dim, gain=1.0).astype(dtype),
            requires_grad=True,
            name="head.weight",
        )
        self.bias = Tensor(np.zeros(num_classes, dtype=dtype), requires_grad=True, name="head.bias")

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {"head.weight": self.weight.data.copy(), "head.bias": self.bias.data.copy()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.weight.data = state["head.weight"].astype(self.weight.dtype).copy()
        self.bias.data = state["head.bias"].astype(self.bias.dtype).copy()


def student_logits(embeddings: Tensor, head: StudentHead) -> Tensor:
    """Raw class scores from the student head."""
    if embeddings.shape[-1] != head.weight.shape[1]:
        raise ValueError(f"embedding dim {embeddings.shape[-1]} does not match head input {head.weight.shape[1]}")
    return linear(embeddings, head.weight, head.bias)


# ---------------------------------------------------------------- checkpoint
MAGIC = b"PKDCKPT\x00"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    """Everything needed to classify new samples with a trained model."""

    encoder_config: EncoderConfig
    encoder_state: dict[str, np.ndarray]
    head_state: dict[str, np.ndarray]
    prototypes: np.ndarray
    class_names: list[str]
    predict_rule: str = "prototype"
    modality: str = "image"
    meta: dict = field(default_factory=dict)

    def build_encoder(self) -> WideResNet:
        dtype = self.encoder_state["stem.conv"].dtype
        enc = WideResNet(self.encoder_config, np.random.default_rng(0), dtype=dtype)
        enc.load_state_dict(self.encoder_state)
        return enc

    def build_head(self) -> StudentHead:
        w = self.head_state["head.weight"]
        head = StudentHead(w.shape[1], w.shape[0], np.random.default_rng(0), dtype=w.dtype)
        head.load_state_dict(self.head_state)
        return head


def _tensor_entries(ckpt: Checkpoint):
    items = [(f"encoder/{k}", v) for k, v in ckpt.encoder_state.items()]
    items += [(f"head/{k}", v) for k, v in ckpt.head_state.items()]
    items.append(("prototypes", ckpt.prototypes))
    return items


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    """Write ``MAGIC | u32 version | u64 header length | JSON header | raw tensors``.

    Tensors are stored little-endian in header order; the output is a pure
    function of the checkpoint contents.
    """
    index = []
    blobs = []
    offset = 0
    for name, arr in _tensor_entries(ckpt):
        arr = np.ascontiguousarray(arr)
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        index.append({"name": name, "shape": list(arr.shape), "dtype": le.dtype.str, "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = {
        "encoder_config": asdict(ckpt.encoder_config),
        "class_names": list(ckpt.class_names),
        "predict_rule": ckpt.predict_rule,
        "modality": ckpt.modality,
        "meta": ckpt.meta,
        "tensors": index,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    buf = path.read_bytes()
    if not buf.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(buf[start : start + hlen].decode("utf-8"))
    data_start = start + hlen
    tensors = {}
    for entry in header["tensors"]:
        lo = data_start + entry["offset"]
        arr = np.frombuffer(buf[lo : lo + entry["nbytes"]], dtype=np.dtype(entry["dtype"]))
        tensors[entry["name"]] = arr.reshape(entry["shape"]).astype(np.dtype(entry["dtype"]).newbyteorder("="))
    return Checkpoint(
        encoder_config=EncoderConfig(**header["encoder_config"]),
        encoder_state={k[len("encoder/"):]: v for k, v in tensors.items() if k.startswith("encoder/")},
        head_state={k[len("head/"):]: v for k, v in tensors.items() if k.startswith("head/")},
        prototypes=tensors["prototypes"],
        class_names=header["class_names"],
        predict_rule=header["predict_rule"],
        modality=header["modality"],
        meta=header["meta"],
    )
