"""Tiny decoder-only transformer LM with exact gradients and checkpoints.

Pre-normalization residual blocks, learned positional embeddings, a
tanh-form gelu MLP, and a biased output head.  Parameters live in a flat
name -> Tensor map so the optimizer, gradient checks, and checkpoints
all share one addressing scheme.  Everything runs on the autodiff tape;
float64 parameters give gradients tight enough for finite-difference
verification, float32 is the experiment mode.
"""

from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .tokenizer import ROLE_NAMES

CHECKPOINT_MAGIC = b"FRULCKP1"
CHECKPOINT_VERSION = 1

_NEG_INF = -1e9


class ModelError(ValueError):
    pass


class CheckpointError(ModelError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int
    n_layers: int = 2
    n_heads: int = 4
    d_model: int = 128
    d_ff: int = 512
    context_len: int = 256
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads != 0:
            raise ModelError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        for name in ("vocab_size", "n_layers", "n_heads", "d_model", "d_ff", "context_len"):
            if getattr(self, name) < 1:
                raise ModelError(f"{name} must be positive")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    def to_dict(self) -> dict:
        return {
            "vocab_size": self.vocab_size, "n_layers": self.n_layers,
            "n_heads": self.n_heads, "d_model": self.d_model, "d_ff": self.d_ff,
            "context_len": self.context_len, "init_seed": self.init_seed,
        }


@dataclass
class Parameters:
    """Named parameter tensors plus the config that shaped them."""

    config: ModelConfig
    tensors: dict[str, ad.Tensor]

    def __getitem__(self, name: str) -> ad.Tensor:
        return self.tensors[name]

    def names(self) -> list[str]:
        return list(self.tensors)

    def zero_grads(self) -> None:
        for t in self.tensors.values():
            t.grad = None

    def copy(self) -> "Parameters":
        return Parameters(self.config, {
            n: ad.Tensor(t.data.copy(), requires_grad=True, name=n)
            for n, t in self.tensors.items()})

    def astype(self, dtype) -> "Parameters":
        return Parameters(self.config, {
            n: ad.Tensor(t.data.astype(dtype), requires_grad=True, name=n)
            for n, t in self.tensors.items()})

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).data.dtype

    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.tensors.values())


def _expected_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    shapes = {
        "tok_emb": (cfg.vocab_size, cfg.d_model),
        "pos_emb": (cfg.context_len, cfg.d_model),
    }
    for i in range(cfg.n_layers):
        p = f"layer{i}."
        shapes.update({
            p + "ln1.gain": (cfg.d_model,), p + "ln1.bias": (cfg.d_model,),
            p + "attn.w_qkv": (cfg.d_model, 3 * cfg.d_model),
            p + "attn.b_qkv": (3 * cfg.d_model,),
            p + "attn.w_o": (cfg.d_model, cfg.d_model),
            p + "attn.b_o": (cfg.d_model,),
            p + "ln2.gain": (cfg.d_model,), p + "ln2.bias": (cfg.d_model,),
            p + "mlp.w1": (cfg.d_model, cfg.d_ff), p + "mlp.b1": (cfg.d_ff,),
            p + "mlp.w2": (cfg.d_ff, cfg.d_model), p + "mlp.b2": (cfg.d_model,),
        })
    shapes.update({
        "ln_f.gain": (cfg.d_model,), "ln_f.bias": (cfg.d_model,),
        "head.w": (cfg.d_model, cfg.vocab_size), "head.b": (cfg.vocab_size,),
    })
    return shapes


def init_model(config: ModelConfig, dtype=np.float32) -> Parameters:
    """Scaled-normal weight init (std 0.02), unit gains, zero biases."""
    rng = np.random.default_rng(config.init_seed)
    tensors = {}
    for name, shape in _expected_shapes(config).items():
        if name.endswith((".gain",)) or name == "ln_f.gain":
            data = np.ones(shape)
        elif name.endswith((".bias", ".b_qkv", ".b_o", ".b1", ".b2")) or name == "head.b":
            data = np.zeros(shape)
        else:
            data = rng.normal(0.0, 0.02, size=shape)
        tensors[name] = ad.Tensor(np.ascontiguousarray(data, dtype=dtype),
                                  requires_grad=True, name=name)
    return Parameters(config, tensors)


def _causal_mask(t: int, dtype) -> np.ndarray:
    mask = np.zeros((t, t), dtype=dtype)
    mask[np.triu_indices(t, k=1)] = _NEG_INF
    return mask


def _trunk(params: Parameters, ids: np.ndarray, upto_layer: int | None = None):
    """Residual stream through the blocks; returns per-block outputs.

    ids is (B, T) int.  Output list has one (B, T, d_model) tensor per
    executed block.
    """
    cfg = params.config
    b, t = ids.shape
    if t > cfg.context_len:
        raise ModelError(f"sequence length {t} exceeds context_len {cfg.context_len}")
    n_blocks = cfg.n_layers if upto_layer is None else upto_layer + 1

    x = ad.embedding(params["tok_emb"], ids) + ad.embedding(params["pos_emb"], np.arange(t))
    mask = ad.Tensor(_causal_mask(t, x.data.dtype))
    scale = 1.0 / np.sqrt(cfg.d_head)
    outputs = []
    for i in range(n_blocks):
        p = f"layer{i}."
        h = ad.layernorm(x, params[p + "ln1.gain"], params[p + "ln1.bias"])
        qkv = h @ params[p + "attn.w_qkv"] + params[p + "attn.b_qkv"]
        d = cfg.d_model
        def heads(z):
            return z.reshape(b, t, cfg.n_heads, cfg.d_head).transpose(0, 2, 1, 3)
        q = heads(qkv[:, :, 0:d])
        k = heads(qkv[:, :, d:2 * d])
        v = heads(qkv[:, :, 2 * d:3 * d])
        scores = (q @ k.transpose(0, 1, 3, 2)) * scale + mask
        attn = scores.softmax() @ v
        merged = attn.transpose(0, 2, 1, 3).reshape(b, t, d)
        x = x + (merged @ params[p + "attn.w_o"] + params[p + "attn.b_o"])
        h2 = ad.layernorm(x, params[p + "ln2.gain"], params[p + "ln2.bias"])
        x = x + ((h2 @ params[p + "mlp.w1"] + params[p + "mlp.b1"]).gelu()
                 @ params[p + "mlp.w2"] + params[p + "mlp.b2"])
        outputs.append(x)
    return outputs


def _as_batch(token_ids) -> tuple[np.ndarray, bool]:
    arr = np.asarray(token_ids, dtype=np.int64)
    if arr.ndim == 1:
        return arr[None, :], True
    if arr.ndim == 2:
        return arr, False
    raise ModelError(f"token_ids must be 1-d or 2-d, got shape {arr.shape}")


def forward_logprobs(params: Parameters, token_ids) -> ad.Tensor:
    """Per-position next-token log-probabilities (..., T, vocab)."""
    ids, squeeze = _as_batch(token_ids)
    x = _trunk(params, ids)[-1]
    x = ad.layernorm(x, params["ln_f.gain"], params["ln_f.bias"])
    logits = x @ params["head.w"] + params["head.b"]
    out = logits.log_softmax()
    return out[0] if squeeze else out


def hidden_state(params: Parameters, token_ids, layer_index: int) -> ad.Tensor:
    """Residual-stream activations after block layer_index (differentiable)."""
    if not 0 <= layer_index < params.config.n_layers:
        raise ModelError(f"layer_index {layer_index} out of range "
                         f"[0, {params.config.n_layers})")
    ids, squeeze = _as_batch(token_ids)
    out = _trunk(params, ids, upto_layer=layer_index)[-1]
    return out[0] if squeeze else out


def _resolve_roles(role_filter) -> set[int]:
    roles = set()
    for r in role_filter:
        roles.add(ROLE_NAMES[r] if isinstance(r, str) else int(r))
    return roles


def sequence_logprob(params: Parameters, rendered, role_filter) -> dict:
    """Teacher-forced log-probability of a rendered sequence.

    Sums log p(token_t | tokens_<t) over positions whose role is in
    role_filter.  Position 0 (BOS) has no prediction and never counts.
    """
    roles = _resolve_roles(role_filter)
    ids = rendered.token_ids
    sel = [t for t in range(1, len(ids)) if int(rendered.role_mask[t]) in roles]
    if not sel:
        raise ModelError("role_filter selects no positions in this sequence")
    logprobs = forward_logprobs(params, ids[:-1]).data
    per_token = [float(logprobs[t - 1, ids[t]]) for t in sel]
    return {"total": float(sum(per_token)), "per_token": per_token, "positions": sel}


# ---------------------------------------------------------------------------
# Gradients and optimizer
# ---------------------------------------------------------------------------


def grad(params: Parameters, loss_fn, batch) -> dict[str, np.ndarray]:
    """Exact reverse-mode gradients of loss_fn(params, batch)."""
    params.zero_grads()
    loss = loss_fn(params, batch)
    value = float(loss.data)
    if not np.isfinite(value):
        raise ModelError(f"non-finite loss: {value}")
    loss.backward()
    return {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data))
            for name, t in params.tensors.items()}


@dataclass(frozen=True)
class OptimizerHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    warmup_steps: int = 100


@dataclass
class OptimizerState:
    hyper: OptimizerHyper
    step: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def init(cls, params: Parameters, hyper: OptimizerHyper) -> "OptimizerState":
        return cls(
            hyper=hyper,
            first_moment={n: np.zeros_like(t.data) for n, t in params.tensors.items()},
            second_moment={n: np.zeros_like(t.data) for n, t in params.tensors.items()},
        )


def lr_at(step: int, hyper: OptimizerHyper) -> float:
    """Linear warm-up to the base rate, constant afterward."""
    if step < 0:
        raise ModelError("step must be >= 0")
    if hyper.warmup_steps <= 0:
        return hyper.lr
    return hyper.lr * min(1.0, (step + 1) / hyper.warmup_steps)


def adamw_step(params: Parameters, grads: dict, state: OptimizerState):
    """One decoupled-weight-decay Adam update, in place.

    m <- b1 m + (1-b1) g;  v <- b2 v + (1-b2) g^2; bias-corrected;
    theta <- theta - lr (m_hat / (sqrt(v_hat) + eps) + wd theta).
    """
    h = state.hyper
    lr = lr_at(state.step, h)
    t = state.step + 1
    bc1 = 1.0 - h.beta1 ** t
    bc2 = 1.0 - h.beta2 ** t
    for name, tensor in params.tensors.items():
        g = grads[name]
        if not np.all(np.isfinite(g)):
            raise ModelError(f"non-finite gradient for {name}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= h.beta1
        m += (1.0 - h.beta1) * g
        v *= h.beta2
        v += (1.0 - h.beta2) * g * g
        m_hat = m / bc1
        v_hat = v / bc2
        tensor.data -= lr * (m_hat / (np.sqrt(v_hat) + h.eps) + h.weight_decay * tensor.data)
    state.step = t
    return params, state


# ---------------------------------------------------------------------------
# Decoding
# ---------------------------------------------------------------------------


def greedy_decode(params: Parameters, prompt_ids, max_new: int, stop_token: int) -> list[int]:
    """Argmax continuation of one prompt; ties resolve to the lowest id."""
    out = greedy_decode_batch(params, [list(map(int, prompt_ids))], max_new, stop_token)
    return out[0]


def greedy_decode_batch(params: Parameters, prompts: list, max_new: int,
                        stop_token: int) -> list[list[int]]:
    """Greedy decode several prompts at once with right-padding.

    Causal attention means pad tokens after a row's frontier cannot leak
    into its next-token distribution, so rows of different lengths share
    one forward pass.
    """
    cfg = params.config
    if max_new <= 0 or not prompts:
        return [[] for _ in prompts]
    rows = [list(map(int, p)) for p in prompts]
    for r in rows:
        if len(r) > cfg.context_len:
            raise ModelError("prompt exceeds context_len")
    produced = [[] for _ in rows]
    done = [False] * len(rows)
    for _ in range(max_new):
        active = [i for i, d in enumerate(done) if not d and len(rows[i]) < cfg.context_len]
        if not active:
            break
        t_max = max(len(rows[i]) for i in active)
        ids = np.zeros((len(active), t_max), dtype=np.int64)
        for j, i in enumerate(active):
            ids[j, :len(rows[i])] = rows[i]
        logprobs = forward_logprobs(params, ids).data
        for j, i in enumerate(active):
            nxt = int(np.argmax(logprobs[j, len(rows[i]) - 1]))
            rows[i].append(nxt)
            produced[i].append(nxt)
            if nxt == stop_token:
                done[i] = True
    return produced


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _payload_and_manifest(tensors: dict):
    manifest = []
    chunks = []
    offset = 0
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        manifest.append({
            "name": name, "shape": list(arr.shape),
            "dtype": arr.dtype.str.lstrip("<>=|"), "byte_offset": offset,
        })
        chunks.append(raw)
        offset += len(raw)
    return b"".join(chunks), manifest


def save_checkpoint(params: Parameters, path, state: OptimizerState | None = None) -> str:
    """Binary checkpoint; returns the content id (sha256 of the payload)."""
    tensors = {n: t.data for n, t in params.tensors.items()}
    header_extra = {}
    if state is not None:
        for n, m in state.first_moment.items():
            tensors[f"opt.m.{n}"] = m
        for n, v in state.second_moment.items():
            tensors[f"opt.v.{n}"] = v
        header_extra["optimizer"] = {
            "step": state.step,
            "hyper": {
                "lr": state.hyper.lr, "beta1": state.hyper.beta1,
                "beta2": state.hyper.beta2, "eps": state.hyper.eps,
                "weight_decay": state.hyper.weight_decay,
                "warmup_steps": state.hyper.warmup_steps,
            },
        }
    payload, manifest = _payload_and_manifest(tensors)
    header = {"version": CHECKPOINT_VERSION, "config": params.config.to_dict(),
              "tensors": manifest, **header_extra}
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<Q", len(header_bytes)))
        f.write(header_bytes)
        f.write(payload)
        f.write(struct.pack("<I", zlib.crc32(payload) & 0xFFFFFFFF))
    return hashlib.sha256(payload).hexdigest()


def checkpoint_id(path) -> str:
    """Content id of a checkpoint file without fully deserializing it."""
    _, _, payload, _ = _read_raw(path)
    return hashlib.sha256(payload).hexdigest()


def params_id(params: Parameters) -> str:
    """Content id of in-memory parameters; equals checkpoint_id after save."""
    payload, _ = _payload_and_manifest({n: t.data for n, t in params.tensors.items()})
    return hashlib.sha256(payload).hexdigest()


def _read_raw(path):
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (header_len,) = struct.unpack("<Q", blob[8:16])
    header_end = 16 + header_len
    try:
        header = json.loads(blob[16:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError(f"corrupt header: {e}") from e
    payload = blob[header_end:-4]
    (crc_stored,) = struct.unpack("<I", blob[-4:])
    return header, header_end, payload, crc_stored


def load_checkpoint(path, expected_config: ModelConfig | None = None):
    """Returns (params, state-or-None); validates version, shapes, CRC."""
    header, _, payload, crc_stored = _read_raw(path)
    if header.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {header.get('version')}")
    if zlib.crc32(payload) & 0xFFFFFFFF != crc_stored:
        raise CheckpointError("checksum mismatch: checkpoint payload is corrupt")
    config = ModelConfig(**header["config"])
    if expected_config is not None and config != expected_config:
        raise CheckpointError("checkpoint config does not match the expected config")
    expected = _expected_shapes(config)

    arrays = {}
    for entry in header["tensors"]:
        dtype = np.dtype("<" + entry["dtype"])
        shape = tuple(entry["shape"])
        start = entry["byte_offset"]
        nbytes = dtype.itemsize * int(np.prod(shape, dtype=np.int64)) if shape else dtype.itemsize
        raw = payload[start:start + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"truncated payload for tensor {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    tensors = {}
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"missing tensor {name}")
        if arrays[name].shape != shape:
            raise CheckpointError(
                f"shape mismatch for {name}: file {arrays[name].shape}, config wants {shape}")
        tensors[name] = ad.Tensor(arrays[name], requires_grad=True, name=name)
    params = Parameters(config, tensors)

    state = None
    if "optimizer" in header:
        hy = header["optimizer"]["hyper"]
        state = OptimizerState(
            hyper=OptimizerHyper(lr=hy["lr"], beta1=hy["beta1"], beta2=hy["beta2"],
                                 eps=hy["eps"], weight_decay=hy["weight_decay"],
                                 warmup_steps=hy["warmup_steps"]),
            step=header["optimizer"]["step"],
            first_moment={n[len("opt.m."):]: a for n, a in arrays.items() if n.startswith("opt.m.")},
            second_moment={n[len("opt.v."):]: a for n, a in arrays.items() if n.startswith("opt.v.")},
        )
    return params, state
