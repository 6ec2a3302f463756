"""Small deterministic causal transformer used for all embedding passes.

The model is frozen after construction except for two learnable vectors: a
write marker prepended to every encoded sequence and a read marker whose
final-layer hidden state is taken as the sequence's memory vector.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .tokens import VOCAB_SIZE, ByteTokenizer


class ContextOverflowError(RuntimeError):
    """Sequence longer than the model context window."""


@dataclass(frozen=True)
class BackboneConfig:
    d: int = 64
    layers: int = 2
    heads: int = 2
    vocab: int = VOCAB_SIZE
    ctx: int = 512
    seed: int = 0
    ffn_mult: int = 4

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError(f"d={self.d} not divisible by heads={self.heads}")

    @property
    def head_dim(self) -> int:
        return self.d // self.heads


class Backbone(nn.Module):
    """Pre-LN causal transformer with explicit parameters.

    Everything is initialized from ``config.seed`` in a fixed order, so two
    instances with the same config are bitwise identical. Only ``write_emb``
    and ``read_emb`` are trainable; the rest of the model stays frozen.
    """

    def __init__(self, config: BackboneConfig, dtype: torch.dtype = torch.float32):
        super().__init__()
        self.config = config
        self.dtype = dtype
        self.tokenizer = ByteTokenizer()
        gen = torch.Generator().manual_seed(config.seed)

        def normal(*shape: int, std: float = 0.02) -> nn.Parameter:
            t = torch.empty(*shape, dtype=dtype)
            t.normal_(0.0, std, generator=gen)
            return nn.Parameter(t)

        d, ff = config.d, config.ffn_mult * config.d
        self.tok_emb = normal(config.vocab, d)
        self.pos_emb = normal(config.ctx, d)
        self.layers_params = nn.ModuleList()
        for _ in range(config.layers):
            layer = nn.ParameterDict(
                {
                    "ln1_w": nn.Parameter(torch.ones(d, dtype=dtype)),
                    "ln1_b": nn.Parameter(torch.zeros(d, dtype=dtype)),
                    "w_qkv": normal(3 * d, d),
                    "b_qkv": nn.Parameter(torch.zeros(3 * d, dtype=dtype)),
                    "w_proj": normal(d, d),
                    "b_proj": nn.Parameter(torch.zeros(d, dtype=dtype)),
                    "ln2_w": nn.Parameter(torch.ones(d, dtype=dtype)),
                    "ln2_b": nn.Parameter(torch.zeros(d, dtype=dtype)),
                    "w_fc1": normal(ff, d),
                    "b_fc1": nn.Parameter(torch.zeros(ff, dtype=dtype)),
                    "w_fc2": normal(d, ff),
                    "b_fc2": nn.Parameter(torch.zeros(d, dtype=dtype)),
                }
            )
            self.layers_params.append(layer)
        self.lnf_w = nn.Parameter(torch.ones(d, dtype=dtype))
        self.lnf_b = nn.Parameter(torch.zeros(d, dtype=dtype))
        self.lm_head = normal(config.vocab, d)
        self.write_emb = normal(d)
        self.read_emb = normal(d)

        for name, p in self.named_parameters():
            p.requires_grad_(name in ("write_emb", "read_emb"))

    # -- embedding helpers --------------------------------------------------

    def encode(self, text: str) -> list[int]:
        return self.tokenizer.encode(text)

    def decode(self, ids) -> str:
        return self.tokenizer.decode(ids)

    def embed_tokens(self, ids) -> torch.Tensor:
        if len(ids) == 0:
            return torch.empty(0, self.config.d, dtype=self.dtype)
        idx = torch.as_tensor(list(ids), dtype=torch.long)
        if idx.numel() and int(idx.max()) >= self.config.vocab:
            raise ValueError(f"token id {int(idx.max())} out of vocab")
        return self.tok_emb[idx]

    # -- forward ------------------------------------------------------------

    def forward(self, embeddings: torch.Tensor, return_attn: bool = False):
        """Run all layers over an (n, d) embedding matrix; returns (n, d)."""
        if embeddings.ndim != 2 or embeddings.shape[1] != self.config.d:
            raise ValueError(f"expected (n, {self.config.d}) input, got {tuple(embeddings.shape)}")
        n = embeddings.shape[0]
        if n == 0:
            raise ValueError("empty input sequence")
        if n > self.config.ctx:
            raise ContextOverflowError(f"sequence length {n} exceeds context {self.config.ctx}")

        h = embeddings + self.pos_emb[:n]
        mask = torch.triu(torch.ones(n, n, dtype=torch.bool), diagonal=1)
        attns = []
        nh, hd = self.config.heads, self.config.head_dim
        for layer in self.layers_params:
            x = F.layer_norm(h, (self.config.d,), layer["ln1_w"], layer["ln1_b"])
            qkv = x @ layer["w_qkv"].T + layer["b_qkv"]
            q, k, v = qkv.split(self.config.d, dim=-1)
            q = q.view(n, nh, hd).transpose(0, 1)
            k = k.view(n, nh, hd).transpose(0, 1)
            v = v.view(n, nh, hd).transpose(0, 1)
            att = (q @ k.transpose(-2, -1)) / math.sqrt(hd)
            att = att.masked_fill(mask, float("-inf"))
            att = F.softmax(att, dim=-1)
            if return_attn:
                attns.append(att)
            y = (att @ v).transpose(0, 1).reshape(n, self.config.d)
            h = h + y @ layer["w_proj"].T + layer["b_proj"]
            x = F.layer_norm(h, (self.config.d,), layer["ln2_w"], layer["ln2_b"])
            x = F.gelu(x @ layer["w_fc1"].T + layer["b_fc1"])
            h = h + x @ layer["w_fc2"].T + layer["b_fc2"]
        h = F.layer_norm(h, (self.config.d,), self.lnf_w, self.lnf_b)
        if return_attn:
            return h, attns
        return h

    def readout(self, embeddings: torch.Tensor) -> torch.Tensor:
        """Final hidden state at the last position (the read-marker slot)."""
        if embeddings.shape[0] == 0:
            raise ValueError("readout needs a non-empty sequence")
        return self.forward(embeddings)[-1]

    def lm_logits(self, hidden: torch.Tensor) -> torch.Tensor:
        return hidden @ self.lm_head.T

    # -- identity -----------------------------------------------------------

    def weights_hash(self) -> str:
        digest = hashlib.sha256()
        digest.update(json.dumps(asdict(self.config), sort_keys=True).encode())
        for name, p in sorted(self.named_parameters()):
            digest.update(name.encode())
            digest.update(p.detach().to(torch.float32).numpy().astype("<f4").tobytes())
        return digest.hexdigest()


def next_token_ce(logits: torch.Tensor, targets) -> torch.Tensor:
    """Mean negative log-likelihood of targets under row-wise softmax."""
    targets = torch.as_tensor(list(targets), dtype=torch.long)
    if logits.shape[0] != targets.shape[0]:
        raise ValueError(f"{logits.shape[0]} logit rows vs {targets.shape[0]} targets")
    if targets.numel() == 0:
        return torch.zeros((), dtype=torch.float64)
    if int(targets.max()) >= logits.shape[1] or int(targets.min()) < 0:
        raise ValueError("target id outside vocab")
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp[torch.arange(targets.shape[0]), targets]
    return nll.to(torch.float64).mean()


# ---------------------------------------------------------------------------
# checkpoint file: u32 header length, JSON header, then raw little-endian f32


_MAGIC = b"HMW1"


def save_weights(
    backbone: Backbone, path, extras: dict[str, torch.Tensor] | None = None
) -> None:
    """Write the model (and optional named companion tensors, e.g. pooling or
    routing projections) as little-endian float32 with a JSON header."""
    named = dict(backbone.named_parameters())
    if extras:
        clash = set(named) & set(extras)
        if clash:
            raise ValueError(f"extra tensor names collide with model parameters: {clash}")
        named.update({k: v for k, v in extras.items()})
    tensors = []
    blobs = []
    offset = 0
    for name in sorted(named):
        p = named[name].detach()
        blob = p.to(torch.float32).numpy().astype("<f4").tobytes()
        tensors.append({"name": name, "shape": list(p.shape), "offset": offset})
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {
            "config": asdict(backbone.config),
            "seed": backbone.config.seed,
            "tensors": tensors,
            "extras": sorted(extras) if extras else [],
        }
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def _read_checkpoint(path) -> tuple[dict, bytes]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a weight checkpoint: bad magic {magic!r}")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        data = fh.read()
    return header, data


def _tensor_at(entry: dict, data: bytes, dtype: torch.dtype) -> torch.Tensor:
    shape = tuple(entry["shape"])
    count = int(math.prod(shape)) if shape else 1
    arr = np.frombuffer(data, dtype="<f4", count=count, offset=entry["offset"]).reshape(shape)
    return torch.from_numpy(arr.copy()).to(dtype)


def load_weights(path, dtype: torch.dtype = torch.float32) -> Backbone:
    header, data = _read_checkpoint(path)
    config = BackboneConfig(**header["config"])
    model = Backbone(config, dtype=dtype)
    params = dict(model.named_parameters())
    extras = set(header.get("extras", []))
    with torch.no_grad():
        for entry in header["tensors"]:
            if entry["name"] in extras:
                continue
            params[entry["name"]].copy_(_tensor_at(entry, data, dtype))
    return model


def load_extras(path, dtype: torch.dtype = torch.float32) -> dict[str, torch.Tensor]:
    """Companion tensors stored alongside the model weights, by name."""
    header, data = _read_checkpoint(path)
    extras = set(header.get("extras", []))
    return {
        entry["name"]: _tensor_at(entry, data, dtype)
        for entry in header["tensors"]
        if entry["name"] in extras
    }
