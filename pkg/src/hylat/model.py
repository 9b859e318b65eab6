"""Tiny pre-norm decoder-only transformer over mixed token/latent inputs.

Sequences are processed in *chunks* appended to a per-batch key/value state.
A single-shot forward is one chunk from the empty state; latent rollout
appends one position at a time so every rolled-out vector stays on the
autodiff graph.  Within a chunk, rows are left-padded: the last column is
always a real item, and padded columns are masked out as keys.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, fields

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .errors import CapacityError, InputError, IoError, ShapeError


@dataclass(frozen=True)
class ModelConfig:
    num_layers: int = 2
    num_heads: int = 4
    d_model: int = 64
    d_ff: int = 256
    vocab_size: int = 64
    max_seq_len: int = 256
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or isinstance(v, bool):
                raise InputError(f"{f.name} must be an integer, got {v!r}")
            if f.name == "seed":
                if not 0 <= v < 2**64:
                    raise InputError("seed must fit in an unsigned 64-bit integer")
            elif v <= 0:
                raise InputError(f"{f.name} must be positive")
        if self.d_model % self.num_heads:
            raise InputError("d_model must be divisible by num_heads")


@dataclass
class ForwardOutput:
    logits: np.ndarray  # (n, vocab)
    hidden: np.ndarray  # (num_layers, n, d_model), residual stream after each block


@dataclass
class State:
    """Key/value cache for a batch of sequences (immutable once built)."""

    keys: list  # per layer Tensor (B, H, n, dh)
    values: list
    valid: np.ndarray  # bool (B, n)
    next_pos: np.ndarray  # int (B,)

    @property
    def length(self):
        return self.valid.shape[1]


def param_names(cfg: ModelConfig):
    """Fixed parameter order, used by checkpoints and gradient reports."""
    names = ["tok_emb", "pos_emb"]
    for i in range(cfg.num_layers):
        names += [f"h{i}.{n}" for n in (
            "ln1_g", "ln1_b", "w_qkv", "b_qkv", "w_o", "b_o",
            "ln2_g", "ln2_b", "w_fc", "b_fc", "w_proj", "b_proj")]
    names += ["lnf_g", "lnf_b", "w_head", "b_head"]
    return names


def _param_shapes(cfg):
    d, f, v = cfg.d_model, cfg.d_ff, cfg.vocab_size
    shapes = {"tok_emb": (v, d), "pos_emb": (cfg.max_seq_len, d)}
    for i in range(cfg.num_layers):
        p = f"h{i}."
        shapes.update({
            p + "ln1_g": (d,), p + "ln1_b": (d,),
            p + "w_qkv": (d, 3 * d), p + "b_qkv": (3 * d,),
            p + "w_o": (d, d), p + "b_o": (d,),
            p + "ln2_g": (d,), p + "ln2_b": (d,),
            p + "w_fc": (d, f), p + "b_fc": (f,),
            p + "w_proj": (f, d), p + "b_proj": (d,),
        })
    shapes.update({"lnf_g": (d,), "lnf_b": (d,), "w_head": (d, v), "b_head": (v,)})
    return shapes


def init_params(cfg: ModelConfig, dtype=np.float32):
    rng = np.random.default_rng(cfg.seed)
    shapes = _param_shapes(cfg)
    proj_std = 0.02 / np.sqrt(2 * cfg.num_layers)
    params = {}
    for name in param_names(cfg):
        shape = shapes[name]
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            arr = np.ones(shape)
        elif leaf.startswith("b_") or leaf.endswith("_b"):
            arr = np.zeros(shape)
        elif leaf in ("w_o", "w_proj"):
            arr = rng.normal(0.0, proj_std, shape)
        else:
            arr = rng.normal(0.0, 0.02, shape)
        params[name] = ag.parameter(arr.astype(dtype), name=name)
    return params


class TinyTransformer:
    def __init__(self, cfg: ModelConfig, params=None, dtype=np.float32):
        self.cfg = cfg
        self.params = params if params is not None else init_params(cfg, dtype)
        self.dtype = self.params["tok_emb"].dtype

    # --- parameter utilities ----------------------------------------------
    def astype(self, dtype):
        params = {k: ag.parameter(v.data.astype(dtype), name=k) for k, v in self.params.items()}
        return TinyTransformer(self.cfg, params)

    def copy(self):
        return self.astype(self.dtype)

    def num_parameters(self):
        return sum(p.data.size for p in self.params.values())

    # --- core -----------------------------------------------------------------
    def empty_state(self, batch):
        cfg = self.cfg
        dh = cfg.d_model // cfg.num_heads
        z = np.zeros((batch, cfg.num_heads, 0, dh), dtype=self.dtype)
        keys = [Tensor(z) for _ in range(cfg.num_layers)]
        values = [Tensor(z) for _ in range(cfg.num_layers)]
        return State(keys, values, np.zeros((batch, 0), dtype=bool),
                     np.zeros(batch, dtype=np.int64))

    def extend(self, state: State, x: Tensor, valid: np.ndarray, capture=False):
        """Append a chunk of input embeddings ``x`` (B, c, d).

        Returns ``(hidden, new_state, attn)`` where ``hidden`` lists the
        residual stream (B, c, d) after every block and ``attn`` is the
        final-layer attention probability array (B, H, c, n) if ``capture``.
        """
        cfg, P = self.cfg, self.params
        B, c, d = x.shape
        H, dh = cfg.num_heads, d // cfg.num_heads
        valid = np.asarray(valid, dtype=bool)
        pos = state.next_pos[:, None] + np.cumsum(valid, axis=1) - 1
        pos = np.where(valid, pos, 0)
        next_pos = state.next_pos + valid.sum(axis=1)
        if next_pos.max(initial=0) > cfg.max_seq_len:
            raise CapacityError(
                f"sequence length {int(next_pos.max())} exceeds max_seq_len {cfg.max_seq_len}")
        n_prev = state.length
        all_valid = np.concatenate([state.valid, valid], axis=1)
        kidx = np.arange(n_prev + c)
        qidx = n_prev + np.arange(c)
        causal = kidx[None, :] <= qidx[:, None]
        allowed = causal[None] & all_valid[:, None, :]
        allowed |= (kidx[None, :] == qidx[:, None])[None]  # pads attend to themselves
        allowed = allowed[:, None]

        h = x + ag.index(P["pos_emb"], pos)
        hidden, keys, values, attn = [], [], [], None
        for i in range(cfg.num_layers):
            p = f"h{i}."
            a = ag.layer_norm(h, P[p + "ln1_g"], P[p + "ln1_b"])
            qkv = ag.linear(a, P[p + "w_qkv"], P[p + "b_qkv"])
            qkv = qkv.reshape(B, c, 3, H, dh).transpose(2, 0, 3, 1, 4)
            q, k, v = qkv[0], qkv[1], qkv[2]
            K = ag.concat([state.keys[i], k], axis=2)
            V = ag.concat([state.values[i], v], axis=2)
            out, probs = ag.attention(q, K, V, allowed)
            if capture and i == cfg.num_layers - 1:
                attn = probs
            out = out.transpose(0, 2, 1, 3).reshape(B, c, d)
            h = h + ag.linear(out, P[p + "w_o"], P[p + "b_o"])
            a = ag.layer_norm(h, P[p + "ln2_g"], P[p + "ln2_b"])
            f = ag.gelu(ag.linear(a, P[p + "w_fc"], P[p + "b_fc"]))
            h = h + ag.linear(f, P[p + "w_proj"], P[p + "b_proj"])
            hidden.append(h)
            keys.append(K)
            values.append(V)
        return hidden, State(keys, values, all_valid, next_pos), attn

    def logits(self, h: Tensor) -> Tensor:
        P = self.params
        return ag.linear(ag.layer_norm(h, P["lnf_g"], P["lnf_b"]), P["w_head"], P["b_head"])

    # --- single-sequence API ------------------------------------------------
    def forward(self, items) -> ForwardOutput:
        """Forward one mixed sequence; items are token ids or latent vectors."""
        n = len(items)
        if n == 0:
            raise InputError("empty input sequence")
        if n > self.cfg.max_seq_len:
            raise CapacityError(f"sequence length {n} exceeds max_seq_len {self.cfg.max_seq_len}")
        with ag.no_grad():
            x, valid = build_chunk(self, [list(items)])
            hidden, _, _ = self.extend(self.empty_state(1), x, valid)
            logits = self.logits(hidden[-1])
        return ForwardOutput(logits.data[0], np.stack([h.data[0] for h in hidden]))


@dataclass(frozen=True)
class LatentRef:
    """A latent input taken from row ``row`` of a (rows, d) graph tensor."""

    tensor: Tensor
    row: int


def check_item(model, item):
    cfg = model.cfg
    if isinstance(item, (int, np.integer)) and not isinstance(item, bool):
        if not 0 <= item < cfg.vocab_size:
            raise InputError(f"token id {item} outside vocabulary of size {cfg.vocab_size}")
        return
    if isinstance(item, LatentRef):
        if item.tensor.shape[-1] != cfg.d_model:
            raise InputError("latent width does not match d_model")
        return
    arr = np.asarray(item)
    if arr.ndim != 1 or arr.shape[0] != cfg.d_model or not np.issubdtype(arr.dtype, np.floating):
        raise InputError(f"latent item must be a float vector of length {cfg.d_model}")


def build_chunk(model, rows):
    """Left-pad per-sequence item lists into an embedded chunk.

    Items are ints (tokens), float vectors (constant latents) or
    :class:`LatentRef` (latents on the graph).  Returns ``(x, valid)``.
    """
    B = len(rows)
    c = max((len(r) for r in rows), default=0)
    d = model.cfg.d_model
    ids = np.full(B * c, -1, dtype=np.int64)
    valid = np.zeros((B, c), dtype=bool)
    consts_dst, consts = [], []
    refs = {}
    for b, row in enumerate(rows):
        off = c - len(row)
        valid[b, off:] = True
        for j, item in enumerate(row):
            check_item(model, item)
            dst = b * c + off + j
            if isinstance(item, (int, np.integer)):
                ids[dst] = item
            elif isinstance(item, LatentRef):
                key = id(item.tensor)
                if key not in refs:
                    refs[key] = (item.tensor, [], [])
                refs[key][1].append(item.row)
                refs[key][2].append(dst)
            else:
                consts_dst.append(dst)
                consts.append(np.asarray(item, dtype=model.dtype))
    sources = []
    if consts:
        sources.append((Tensor(np.stack(consts)), np.arange(len(consts)), np.array(consts_dst)))
    for t, s_rows, d_rows in refs.values():
        sources.append((t, np.array(s_rows), np.array(d_rows)))
    pad_rows = np.nonzero(~valid.reshape(-1))[0]
    ids[pad_rows] = 0  # pads embed as token 0 and are masked as keys
    x = ag.compose_rows(model.params["tok_emb"], ids, sources, B * c, model.dtype)
    return x.reshape(B, c, d), valid


def fork(state: State, rows):
    """Select a subset of batch rows from a state."""
    rows = np.asarray(rows)
    keys = [ag.index(k, rows) for k in state.keys]
    values = [ag.index(v, rows) for v in state.values]
    return State(keys, values, state.valid[rows], state.next_pos[rows])


# --- optimisation ---------------------------------------------------------------------
class Adam:
    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, clip=1.0):
        self.params = params
        self.lr, self.b1, self.b2, self.eps, self.clip = lr, betas[0], betas[1], eps, clip
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self, grads):
        """Clip by global norm, update in place; returns the pre-clip norm."""
        norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads.values())))
        scale = min(1.0, self.clip / (norm + 1e-12)) if self.clip else 1.0
        self.t += 1
        bc1 = 1 - self.b1**self.t
        bc2 = 1 - self.b2**self.t
        for k, p in self.params.items():
            if k not in grads:
                continue
            g = grads[k] * scale
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            upd = self.lr * (self.m[k] / bc1) / (np.sqrt(self.v[k] / bc2) + self.eps)
            p.data = (p.data - upd).astype(p.data.dtype)
        return norm

    def state_arrays(self):
        out = {"t": np.array([self.t], dtype=np.int64)}
        for k in self.params:
            out["m." + k] = self.m[k]
            out["v." + k] = self.v[k]
        return out

    def load_state_arrays(self, arrays):
        self.t = int(arrays["t"][0])
        for k in self.params:
            self.m[k] = arrays["m." + k].astype(self.params[k].dtype)
            self.v[k] = arrays["v." + k].astype(self.params[k].dtype)


# --- checkpoint file -------------------------------------------------------------------
CKPT_MAGIC = b"HYLT"
CKPT_VERSION = 1
_CFG_FIELDS = ("num_layers", "num_heads", "d_model", "d_ff", "vocab_size", "max_seq_len")


def encode_tensors(arrays):
    """rank u32, dims u32..., then float32 little-endian payload, per tensor."""
    parts = []
    for arr in arrays:
        a = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    return b"".join(parts)


def decode_tensors(buf, offset, count):
    out = []
    for _ in range(count):
        if offset + 4 > len(buf):
            raise IoError(f"truncated checkpoint at byte {offset}")
        (rank,) = struct.unpack_from("<I", buf, offset)
        offset += 4
        if rank > 8 or offset + 4 * rank > len(buf):
            raise IoError(f"corrupt tensor header at byte {offset - 4}")
        dims = struct.unpack_from(f"<{rank}I", buf, offset)
        offset += 4 * rank
        n = int(np.prod(dims)) if rank else 1
        if offset + 4 * n > len(buf):
            raise IoError(f"truncated checkpoint at byte {offset}")
        out.append(np.frombuffer(buf, dtype="<f4", count=n, offset=offset).reshape(dims).copy())
        offset += 4 * n
    return out, offset


def checkpoint_bytes(model: TinyTransformer, extra=None) -> bytes:
    """Serialize ``model`` (and optional trailing named float32 tensors)."""
    cfg = model.cfg
    head = CKPT_MAGIC + struct.pack("<H", CKPT_VERSION)
    head += struct.pack("<6I", *(getattr(cfg, f) for f in _CFG_FIELDS))
    head += struct.pack("<Q", cfg.seed)
    names = param_names(cfg)
    body = encode_tensors([model.params[n].data for n in names])
    extra = extra or {}
    tail = struct.pack("<I", len(extra))
    for name in sorted(extra):
        raw = name.encode("utf-8")
        tail += struct.pack("<H", len(raw)) + raw + encode_tensors([extra[name]])
    return head + body + tail


def model_from_bytes(buf: bytes):
    """Inverse of :func:`checkpoint_bytes`; returns ``(model, extra)``."""
    if buf[:4] != CKPT_MAGIC:
        raise IoError("not a HYLT checkpoint (bad magic)")
    (version,) = struct.unpack_from("<H", buf, 4)
    if version != CKPT_VERSION:
        raise IoError(f"unsupported checkpoint version {version}")
    vals = struct.unpack_from("<6I", buf, 6)
    (seed,) = struct.unpack_from("<Q", buf, 30)
    cfg = ModelConfig(**dict(zip(_CFG_FIELDS, vals)), seed=seed)
    names = param_names(cfg)
    arrays, off = decode_tensors(buf, 38, len(names))
    shapes = _param_shapes(cfg)
    params = {}
    for n, a in zip(names, arrays):
        if a.shape != shapes[n]:
            raise ShapeError(f"checkpoint tensor {n} has shape {a.shape}, expected {shapes[n]}")
        params[n] = ag.parameter(a.astype(np.float32), name=n)
    extra = {}
    if off < len(buf):
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        for _ in range(count):
            (ln,) = struct.unpack_from("<H", buf, off)
            name = buf[off + 2: off + 2 + ln].decode("utf-8")
            off += 2 + ln
            (arr,), off = decode_tensors(buf, off, 1)
            extra[name] = arr
    return TinyTransformer(cfg, params), extra


def save_checkpoint(path, model, extra=None):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(model, extra))


def load_checkpoint(path):
    try:
        with open(path, "rb") as fh:
            buf = fh.read()
    except OSError as exc:
        raise IoError(f"cannot read checkpoint {path}: {exc}") from exc
    return model_from_bytes(buf)
