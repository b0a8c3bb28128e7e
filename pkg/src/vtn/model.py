"""The voice transformer network: prenets, encoder/decoder stacks, postnet.

Conventions: sequences are (rows x time) matrices.  Attention matrices are
(source positions x target positions) and column-stochastic.  Speaker
conditioning appends an embedding column to the input of a sub-layer
(after layer norm, so LN statistics stay speaker independent).
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import FormatError, ShapeError

_MODEL_MAGIC = b"VTNM"
_MODEL_VERSION = 1

PRENET_KERNEL = 5
PRENET_DILATIONS = (1, 2, 4)


@dataclass
class VtnConfig:
    L: int = 4
    H: int = 4
    d: int = 512
    d_ffn: int = 1024
    n_mcc: int = 28
    r: int = 3
    ln_placement: str = "pre"       # "pre" or "post"
    mode: str = "many_to_many"      # "one_to_one", "many_to_many", "any_to_many"
    realtime: bool = False
    n_speakers: int = 2
    e: int = 32
    dropout_rate: float = 0.1
    final_ln: bool = True

    def __post_init__(self):
        if self.d % self.H != 0:
            raise ShapeError(f"d={self.d} not divisible by H={self.H}")
        if self.ln_placement not in ("pre", "post"):
            raise ShapeError(f"unknown ln_placement {self.ln_placement!r}")
        if self.mode not in ("one_to_one", "many_to_many", "any_to_many"):
            raise ShapeError(f"unknown mode {self.mode!r}")

    @property
    def D(self) -> int:
        return (self.n_mcc + 3) * self.r

    @property
    def src_conditioned(self) -> bool:
        return self.mode == "many_to_many"

    @property
    def tgt_conditioned(self) -> bool:
        return self.mode in ("many_to_many", "any_to_many")


def positional_encoding(n: int, dim: int) -> np.ndarray:
    """Sinusoidal position matrix (dim x n); odd dim drops the last cos row."""
    rows = np.arange((dim + 1) // 2)
    angles = np.arange(n)[None, :] / (10000.0 ** (2.0 * rows[:, None] / dim))
    out = np.empty((2 * len(rows), n))
    out[0::2] = np.sin(angles)
    out[1::2] = np.cos(angles)
    return out[:dim]


def causal_mask(n: int) -> np.ndarray:
    """(key, query) additive mask: key position may not exceed query position."""
    keys = np.arange(n)[:, None]
    queries = np.arange(n)[None, :]
    return np.where(keys <= queries, 0.0, ad.NEG_INF)


# ---------------------------------------------------------------------------
# parameter construction

def _uniform(rng, shape, fan_in):
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class VtnModel:
    """All learnable parameters plus the architecture configuration."""

    def __init__(self, config: VtnConfig, params: dict[str, Tensor],
                 speakers: list[str] | None = None):
        self.config = config
        self.params = params
        self.speakers = speakers

    # -- construction -------------------------------------------------------

    @classmethod
    def init(cls, config: VtnConfig, seed: int = 0,
             speakers: list[str] | None = None) -> "VtnModel":
        rng = np.random.default_rng(seed)
        p: dict[str, Tensor] = {}
        cfg = config
        d, e = cfg.d, cfg.e

        def param(name, arr):
            p[name] = Tensor(arr, requires_grad=True)

        def conv_layer(name, c_in, c_out):
            direction = _uniform(rng, (c_out, c_in, PRENET_KERNEL), c_in * PRENET_KERNEL)
            norms = np.sqrt((direction.reshape(c_out, -1) ** 2).sum(axis=1))
            param(f"{name}.dir", direction)
            # gain 2 compensates the sigmoid gate's signal attenuation; without
            # it activations shrink ~4x per GLU layer and training crawls
            param(f"{name}.scale", 2.0 * norms)

        def prenet(name, c_in, conditioned):
            chans = [c_in + (e if conditioned else 0), d, d]
            for i, ci in enumerate(chans):
                conv_layer(f"{name}.{i}", ci, 2 * d)  # GLU halves back to d

        src_in = d + e if cfg.src_conditioned else d
        tgt_in = d + e if cfg.tgt_conditioned else d

        prenet("src_prenet", cfg.D, cfg.src_conditioned)
        prenet("tgt_prenet", cfg.D, cfg.tgt_conditioned)
        # postnet: two GLU conv layers then a linear conv back to D
        post_c0 = d + (e if cfg.tgt_conditioned else 0)
        conv_layer("postnet.0", post_c0, 2 * d)
        conv_layer("postnet.1", d, 2 * d)
        conv_layer("postnet.2", d, cfg.D)

        def ln(name):
            param(f"{name}.gain", np.ones((d, 1)))
            param(f"{name}.bias", np.zeros((d, 1)))

        def ffn(name, d_in):
            param(f"{name}.W3", _uniform(rng, (2 * cfg.d_ffn, d_in), d_in))
            param(f"{name}.b3", np.zeros((2 * cfg.d_ffn, 1)))
            param(f"{name}.W4", _uniform(rng, (d, cfg.d_ffn), cfg.d_ffn))
            param(f"{name}.b4", np.zeros((d, 1)))

        for l in range(cfg.L):
            ln(f"enc.{l}.ln1")
            ln(f"enc.{l}.ln2")
            param(f"enc.{l}.sa.W1", _uniform(rng, (3 * d, src_in), src_in))
            param(f"enc.{l}.sa.W2", _uniform(rng, (d, d), d))
            ffn(f"enc.{l}.ffn", src_in)
        for l in range(cfg.L):
            ln(f"dec.{l}.ln1")
            ln(f"dec.{l}.ln2")
            ln(f"dec.{l}.ln3")
            param(f"dec.{l}.sa.W1", _uniform(rng, (3 * d, tgt_in), tgt_in))
            param(f"dec.{l}.sa.W2", _uniform(rng, (d, d), d))
            param(f"dec.{l}.tsa.W5", _uniform(rng, (d, tgt_in), tgt_in))
            param(f"dec.{l}.tsa.W6", _uniform(rng, (2 * d, d), d))
            param(f"dec.{l}.tsa.W7", _uniform(rng, (d, d), d))
            ffn(f"dec.{l}.ffn", tgt_in)
        if cfg.ln_placement == "pre" and cfg.final_ln:
            ln("enc_final_ln")
            ln("dec_final_ln")
        if cfg.mode != "one_to_one":
            param("emb", rng.normal(0.0, 0.01, size=(cfg.n_speakers, e)))
        return cls(cfg, p, speakers)

    # -- helpers ------------------------------------------------------------

    def zero_grads(self):
        for t in self.params.values():
            t.zero_grad()

    def _conv(self, name, x, causal, dilation):
        w = ad.weight_norm_apply(self.params[f"{name}.dir"], self.params[f"{name}.scale"])
        return ad.conv1d(x, w, dilation=dilation, causal=causal)

    def _condition(self, x: Tensor, k: int | None) -> Tensor:
        if k is None:
            return x
        emb = self.params["emb"]
        if not 0 <= k < self.config.n_speakers:
            raise ShapeError(f"speaker index {k} out of range")
        col = ad.transpose(ad.slice_rows(emb, k, k + 1))
        return ad.concat_rows([x, ad.tile_cols(col, x.data.shape[1])])

    def _ln(self, name, x):
        return ad.layer_norm(x, self.params[f"{name}.gain"], self.params[f"{name}.bias"])

    def _prenet(self, name, x, k, causal):
        x = self._condition(x, k)
        for i, dil in enumerate(PRENET_DILATIONS):
            x = ad.glu(self._conv(f"{name}.{i}", x, causal, dil))
        return x

    def _postnet(self, x, k):
        x = self._condition(x, k)
        x = ad.glu(self._conv("postnet.0", x, True, PRENET_DILATIONS[0]))
        x = ad.glu(self._conv("postnet.1", x, True, PRENET_DILATIONS[1]))
        return self._conv("postnet.2", x, True, PRENET_DILATIONS[2])

    def _sa(self, prefix, x, mask, causal=False):
        cfg = self.config
        d, h = cfg.d, cfg.H
        dh = d // h
        qkv = ad.matmul(self.params[f"{prefix}.W1"], x)
        heads = []
        for i in range(h):
            q = ad.slice_rows(qkv, i * dh, (i + 1) * dh)
            key = ad.slice_rows(qkv, d + i * dh, d + (i + 1) * dh)
            v = ad.slice_rows(qkv, 2 * d + i * dh, 2 * d + (i + 1) * dh)
            if causal and ad.is_column_exact():
                # inference path: key count for column j is always j+1, so
                # the logit gemv shape never changes as the prefix grows
                n = x.data.shape[1]
                ld = np.full((n, n), ad.NEG_INF)
                for j in range(n):
                    keys = np.ascontiguousarray(key.data[:, :j + 1])
                    ld[:j + 1, j] = keys.T @ q.data[:, j].copy()
                logits = ad.scale(Tensor(ld), 1.0 / math.sqrt(d))
            else:
                logits = ad.scale(ad.matmul(ad.transpose(key), q), 1.0 / math.sqrt(d))
            a = ad.masked_softmax_columns(logits, mask)
            heads.append(ad.matmul(v, a))
        return ad.matmul(self.params[f"{prefix}.W2"], ad.concat_rows(heads))

    def _tsa(self, prefix, x, z, window_mask, identity):
        cfg = self.config
        d, h = cfg.d, cfg.H
        dh = d // h
        n_src = z.data.shape[1]
        n_tgt = x.data.shape[1]
        q_all = ad.matmul(self.params[f"{prefix}.W5"], x)
        kv = ad.matmul(self.params[f"{prefix}.W6"], z)
        mask = np.zeros((n_src, n_tgt)) if window_mask is None else window_mask
        heads, attn = [], []
        for i in range(h):
            q = ad.slice_rows(q_all, i * dh, (i + 1) * dh)
            key = ad.slice_rows(kv, i * dh, (i + 1) * dh)
            v = ad.slice_rows(kv, d + i * dh, d + (i + 1) * dh)
            if identity:
                if n_tgt > n_src:
                    raise ShapeError("identity alignment needs N_tgt <= N_src")
                a_data = np.zeros((n_src, n_tgt))
                a_data[np.arange(n_tgt), np.arange(n_tgt)] = 1.0
                a = Tensor(a_data)
                heads.append(ad.slice_cols(v, 0, n_tgt))
            else:
                logits = ad.scale(ad.matmul(ad.transpose(key), q), 1.0 / math.sqrt(d))
                a = ad.masked_softmax_columns(logits, mask)
                heads.append(ad.matmul(v, a))
            attn.append(a)
        return ad.matmul(self.params[f"{prefix}.W7"], ad.concat_rows(heads)), attn

    def _ffn(self, prefix, x):
        p = self.params
        inner = ad.glu(ad.add_bias(ad.matmul(p[f"{prefix}.W3"], x), p[f"{prefix}.b3"]))
        return ad.add_bias(ad.matmul(p[f"{prefix}.W4"], inner), p[f"{prefix}.b4"])

    # -- encoder / decoder --------------------------------------------------

    def encoder_layer(self, l: int, x: Tensor, k: int | None) -> Tensor:
        cfg = self.config
        n = x.data.shape[1]
        mask = causal_mask(n) if cfg.realtime else np.zeros((n, n))
        name = f"enc.{l}"
        if cfg.ln_placement == "pre":
            u = ad.add(x, self._sa(f"{name}.sa", self._condition(self._ln(f"{name}.ln1", x), k),
                                   mask, causal=cfg.realtime))
            return ad.add(u, self._ffn(f"{name}.ffn", self._condition(self._ln(f"{name}.ln2", u), k)))
        u = self._ln(f"{name}.ln1", ad.add(x, self._sa(f"{name}.sa", self._condition(x, k),
                                                       mask, causal=cfg.realtime)))
        return self._ln(f"{name}.ln2", ad.add(u, self._ffn(f"{name}.ffn", self._condition(u, k))))

    def decoder_layer(self, l: int, x: Tensor, z: Tensor, k: int | None,
                      window_mask: np.ndarray | None,
                      tsa_identity: bool) -> tuple[Tensor, list[Tensor]]:
        cfg = self.config
        n = x.data.shape[1]
        mask = causal_mask(n)
        name = f"dec.{l}"
        if cfg.ln_placement == "pre":
            u1 = ad.add(x, self._sa(f"{name}.sa", self._condition(self._ln(f"{name}.ln1", x), k),
                                    mask, causal=True))
            tsa_out, attn = self._tsa(f"{name}.tsa", self._condition(self._ln(f"{name}.ln2", u1), k),
                                      z, window_mask, tsa_identity)
            u2 = ad.add(u1, tsa_out)
            out = ad.add(u2, self._ffn(f"{name}.ffn", self._condition(self._ln(f"{name}.ln3", u2), k)))
            return out, attn
        u1 = self._ln(f"{name}.ln1", ad.add(x, self._sa(f"{name}.sa", self._condition(x, k),
                                                        mask, causal=True)))
        tsa_out, attn = self._tsa(f"{name}.tsa", self._condition(u1, k), z, window_mask, tsa_identity)
        u2 = self._ln(f"{name}.ln2", ad.add(u1, tsa_out))
        out = self._ln(f"{name}.ln3", ad.add(u2, self._ffn(f"{name}.ffn", self._condition(u2, k))))
        return out, attn

    def _speaker_args(self, k, kp):
        cfg = self.config
        k_eff = k if cfg.src_conditioned else None
        kp_eff = kp if cfg.tgt_conditioned else None
        if cfg.src_conditioned and k is None:
            raise ShapeError("many_to_many mode requires a source speaker index")
        if cfg.tgt_conditioned and kp is None:
            raise ShapeError("conditioned modes require a target speaker index")
        return k_eff, kp_eff

    def encode(self, src, k: int | None = None, training: bool = False,
               rng: np.random.Generator | None = None) -> Tensor:
        cfg = self.config
        src = src if isinstance(src, Tensor) else Tensor(src)
        k_eff = k if cfg.src_conditioned else None
        n = src.data.shape[1]
        x = ad.add(src, Tensor(positional_encoding(n, cfg.D)))
        x = ad.dropout(x, cfg.dropout_rate, training, rng)
        x = self._prenet("src_prenet", x, k_eff, causal=cfg.realtime)
        for l in range(cfg.L):
            x = self.encoder_layer(l, x, k_eff)
        if cfg.ln_placement == "pre" and cfg.final_ln:
            x = self._ln("enc_final_ln", x)
        return x

    def decode(self, tgt_in, z: Tensor, kp: int | None = None,
               training: bool = False, rng: np.random.Generator | None = None,
               window_mask: np.ndarray | None = None,
               tsa_identity: bool = False) -> tuple[Tensor, list[list[Tensor]]]:
        cfg = self.config
        tgt_in = tgt_in if isinstance(tgt_in, Tensor) else Tensor(tgt_in)
        kp_eff = kp if cfg.tgt_conditioned else None
        if cfg.tgt_conditioned and kp is None:
            raise ShapeError("conditioned modes require a target speaker index")
        n = tgt_in.data.shape[1]
        x = ad.add(tgt_in, Tensor(positional_encoding(n, cfg.D)))
        x = ad.dropout(x, cfg.dropout_rate, training, rng)
        x = self._prenet("tgt_prenet", x, kp_eff, causal=True)
        attn_set: list[list[Tensor]] = []
        for l in range(cfg.L):
            x, attn = self.decoder_layer(l, x, z, kp_eff, window_mask, tsa_identity)
            attn_set.append(attn)
        if cfg.ln_placement == "pre" and cfg.final_ln:
            x = self._ln("dec_final_ln", x)
        x = ad.dropout(x, cfg.dropout_rate, training, rng)
        y = self._postnet(x, kp_eff)
        return y, attn_set

    def forward(self, src, tgt_in, k: int | None = None, kp: int | None = None,
                training: bool = False, rng: np.random.Generator | None = None,
                window_mask: np.ndarray | None = None,
                tsa_identity: bool = False) -> tuple[Tensor, list[list[Tensor]]]:
        """Teacher-forced pass: src (D x N_src), tgt_in (D x N_tgt+1, zero-prepended)."""
        self._speaker_args(k, kp)
        z = self.encode(src, k, training, rng)
        return self.decode(tgt_in, z, kp, training, rng, window_mask, tsa_identity)

    # -- checkpoint I/O -----------------------------------------------------

    def save(self, path) -> None:
        header = {"config": asdict(self.config), "speakers": self.speakers}
        blob = json.dumps(header, sort_keys=True).encode("utf-8")
        with open(path, "wb") as fh:
            fh.write(_MODEL_MAGIC)
            fh.write(struct.pack("<I", _MODEL_VERSION))
            fh.write(struct.pack("<I", len(blob)))
            fh.write(blob)
            write_named_blocks(fh, {k: v.data for k, v in self.params.items()})

    @classmethod
    def load(cls, path) -> "VtnModel":
        raw = Path(path).read_bytes()
        if raw[:4] != _MODEL_MAGIC:
            raise FormatError(f"{path}: bad magic {raw[:4]!r}")
        version, blob_len = struct.unpack_from("<II", raw, 4)
        if version != _MODEL_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        off = 12
        header = json.loads(raw[off:off + blob_len].decode("utf-8"))
        off += blob_len
        arrays, _ = read_named_blocks(raw, off)
        params = {k: Tensor(v, requires_grad=True) for k, v in arrays.items()}
        return cls(VtnConfig(**header["config"]), params, header.get("speakers"))


# ---------------------------------------------------------------------------
# named binary blocks (shared by model checkpoints and optimizer state)

def write_named_blocks(fh, arrays: dict[str, np.ndarray]) -> None:
    fh.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        fh.write(struct.pack("<H", len(nb)))
        fh.write(nb)
        fh.write(struct.pack("<B", arr.ndim))
        fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def read_named_blocks(raw: bytes, off: int) -> tuple[dict[str, np.ndarray], int]:
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", raw, off)
        off += 2
        name = raw[off:off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", raw, off)
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(raw, dtype="<f8", count=n, offset=off).reshape(shape).copy()
        off += 8 * n
    return arrays, off
