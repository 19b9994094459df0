"""The MSTN network: convolutional pathway and sequence core in parallel,
gated fusion, squeeze-and-excitation, multi-head temporal attention and a
task head.

Shape table for input ``[B, T, D]`` with the default widths
(``d = 64 + core width``)::

    stage            Transformer core   BiLSTM core
    h_conv1          [B, 128, T]        [B, 128, T]
    h_conv2          [B, 64, T]         [B, 64, T]
    z_cnn            [B, 64]            [B, 64]
    h_core           [B, T, 64]         [B, T, 128]
    z_core           [B, 64]            [B, 128]
    z_concat/fused   [B, 128]           [B, 192]
    z_seq / z_se     [B, T, 128]        [B, T, 192]
    z_final          [B, 128]           [B, 192]

Ablations shrink ``d``: NoCNN gives the core width, NoCore gives 64.

Parameter count (trainable), with C1, C2 conv widths, k1, k2 kernels,
m/f/L/h transformer width/ffn/layers, H LSTM units per direction, d fused
width, r = d / se_reduction, P head length, R head rank::

    conv      C1*D*k1 + 3*C1 + C2*C1*k2 + 3*C2
    trans     m*D + m + L*(4*m*m + 4*m + 2*m*f + f + m + 4*m) + 2*m
    bilstm    sum over layers l of 2*(4H*in_l + 4H*H + 4H),  in_0 = D, in_l = 2H
    gate      d*d + d
    se        2*d*r
    mhta      4*d*d + 4*d + 2*d
    classify  C*d + C
    seq head  R*D*d + R*D + P*R + D

Sequence heads add the per-feature mean of the observed input window to
their output (a fixed, parameter-free level offset).

Batch-norm running statistics (2*(C1 + C2) values) are serialized next to
the parameters but are not counted as parameters.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field

import numpy as np

from . import serialize
from .config import MstnConfig
from .errors import ContractError, DimensionError, MstnError, WeightsError
from .functional import (BatchNormState, batch_norm1d, broadcast_to_sequence, conv1d_same, dropout,
                         layer_norm, linear, mean_over_time, softmax_lastdim)
from .rng import Rng
from .tensor import Tensor, concat, matmul, reshape, sigmoid, stack, tanh, transpose

# ---------------------------------------------------------------- layout/init
# kinds: ("w", fan_in) uniform(+-sqrt(1/fan_in)); "zeros"; "ones"; "lstm_bias"


def param_layout(cfg: MstnConfig) -> dict[str, tuple[tuple, object]]:
    """Ordered ``name -> (shape, init kind)`` for every trainable tensor."""
    D, d = cfg.input_dim, cfg.fused_dim
    spec: dict[str, tuple[tuple, object]] = {}

    def lin(name, n_out, n_in, bias=True):
        spec[f"{name}.weight"] = ((n_out, n_in), ("w", n_in))
        if bias:
            spec[f"{name}.bias"] = ((n_out,), "zeros")

    def norm(name, n):
        spec[f"{name}.gamma"] = ((n,), "ones")
        spec[f"{name}.beta"] = ((n,), "zeros")

    if cfg.uses_cnn:
        (c1, c2), (k1, k2) = cfg.conv_channels, cfg.conv_kernels
        spec["conv1.weight"] = ((c1, D, k1), ("w", D * k1))
        spec["conv1.bias"] = ((c1,), "zeros")
        norm("bn1", c1)
        spec["conv2.weight"] = ((c2, c1, k2), ("w", c1 * k2))
        spec["conv2.bias"] = ((c2,), "zeros")
        norm("bn2", c2)
    if cfg.uses_core and cfg.core == "transformer":
        t = cfg.transformer
        lin("trans.embed", t.model_dim, D)
        for i in range(t.layers):
            p = f"trans.layer{i}"
            norm(f"{p}.ln1", t.model_dim)
            for w in ("wq", "wk", "wv", "wo"):
                lin(f"{p}.attn.{w}", t.model_dim, t.model_dim)
            norm(f"{p}.ln2", t.model_dim)
            lin(f"{p}.ffn1", t.ffn_dim, t.model_dim)
            lin(f"{p}.ffn2", t.model_dim, t.ffn_dim)
        norm("trans.norm", t.model_dim)
    if cfg.uses_core and cfg.core == "bilstm":
        H = cfg.bilstm.hidden_per_dir
        for i in range(cfg.bilstm.layers):
            n_in = D if i == 0 else 2 * H
            for direction in ("fwd", "bwd"):
                p = f"lstm.layer{i}.{direction}"
                spec[f"{p}.w_ih"] = ((4 * H, n_in), ("w", n_in))
                spec[f"{p}.w_hh"] = ((4 * H, H), ("w", H))
                spec[f"{p}.bias"] = ((4 * H,), "lstm_bias")
    if cfg.variant != "NoGatedFusion":
        spec["gate.W_g"] = ((d, d), ("w", d))
        spec["gate.b_g"] = ((d,), "zeros")
    if cfg.variant != "NoSE":
        r = d // cfg.se_reduction
        spec["se.W_1"] = ((r, d), ("w", d))
        spec["se.W_2"] = ((d, r), ("w", r))
    if cfg.variant != "NoMHTA":
        for w in ("wq", "wk", "wv", "wo"):
            lin(f"mhta.{w}", d, d)
    norm("mhta.ln", d)
    if cfg.task == "classify":
        lin("head", cfg.num_classes, d)
    else:
        R, P = cfg.head_rank, cfg.out_len
        lin("head.coef", R * D, d)
        spec["head.basis"] = ((P, R), ("w", R))
        spec["head.bias"] = ((D,), "zeros")
    return spec


def buffer_layout(cfg: MstnConfig) -> dict[str, tuple]:
    if not cfg.uses_cnn:
        return {}
    c1, c2 = cfg.conv_channels
    return {"bn1.running_mean": (c1,), "bn1.running_var": (c1,),
            "bn2.running_mean": (c2,), "bn2.running_var": (c2,)}


def init_params(cfg: MstnConfig, rng: Rng | None = None) -> dict[str, Tensor]:
    """Fresh parameters; each tensor draws from its own named sub-stream."""
    cfg.validate()
    rng = rng or Rng(cfg.seed)
    params = {}
    for name, (shape, kind) in param_layout(cfg).items():
        if kind == "zeros":
            arr = np.zeros(shape)
        elif kind == "ones":
            arr = np.ones(shape)
        elif kind == "lstm_bias":
            arr = np.zeros(shape)
            H = shape[0] // 4
            arr[H:2 * H] = 1.0
        else:
            bound = np.sqrt(1.0 / kind[1])
            arr = rng.child(name).uniform(-bound, bound, shape)
        params[name] = Tensor(arr, requires_grad=True, dtype=cfg.dtype, name=name)
    return params


def fresh_buffers(cfg: MstnConfig) -> dict[str, BatchNormState]:
    if not cfg.uses_cnn:
        return {}
    c1, c2 = cfg.conv_channels
    return {"bn1": BatchNormState.fresh(c1, cfg.dtype), "bn2": BatchNormState.fresh(c2, cfg.dtype)}


def param_count(cfg: MstnConfig) -> int:
    return int(sum(np.prod(shape) for shape, _ in param_layout(cfg).values()))


def analytic_param_count(cfg: MstnConfig) -> int:
    """Closed-form parameter count (see module docstring); independent of the layout table."""
    D, d = cfg.input_dim, cfg.fused_dim
    n = 0
    if cfg.uses_cnn:
        (c1, c2), (k1, k2) = cfg.conv_channels, cfg.conv_kernels
        n += c1 * D * k1 + 3 * c1 + c2 * c1 * k2 + 3 * c2
    if cfg.uses_core and cfg.core == "transformer":
        m, f, L = cfg.transformer.model_dim, cfg.transformer.ffn_dim, cfg.transformer.layers
        n += m * D + m + L * (4 * m * m + 4 * m + 2 * m * f + f + m + 4 * m) + 2 * m
    if cfg.uses_core and cfg.core == "bilstm":
        H = cfg.bilstm.hidden_per_dir
        for i in range(cfg.bilstm.layers):
            n_in = D if i == 0 else 2 * H
            n += 2 * (4 * H * n_in + 4 * H * H + 4 * H)
    if cfg.variant != "NoGatedFusion":
        n += d * d + d
    if cfg.variant != "NoSE":
        n += 2 * d * (d // cfg.se_reduction)
    if cfg.variant != "NoMHTA":
        n += 4 * d * d + 4 * d
    n += 2 * d
    if cfg.task == "classify":
        n += cfg.num_classes * d + cfg.num_classes
    else:
        R, P = cfg.head_rank, cfg.out_len
        n += R * D * d + R * D + P * R + D
    return n


def serialized_size_bytes(cfg: MstnConfig) -> int:
    shapes = {name: shape for name, (shape, _) in param_layout(cfg).items()}
    shapes.update(buffer_layout(cfg))
    return serialize.container_size(shapes)


# ---------------------------------------------------------------------- trace
@dataclass
class ForwardTrace:
    """Intermediate activations captured during one forward pass (numpy copies)."""

    h_conv1: np.ndarray | None = None
    h_conv2: np.ndarray | None = None
    z_cnn: np.ndarray | None = None
    h_core: np.ndarray | None = None
    z_core: np.ndarray | None = None
    z_concat: np.ndarray | None = None
    z_fused: np.ndarray | None = None
    z_seq: np.ndarray | None = None
    se_gate: np.ndarray | None = None
    z_se: np.ndarray | None = None
    z_final: np.ndarray | None = None
    output: np.ndarray | None = None
    encoder_attention: list = field(default_factory=list)
    mhta_attention: np.ndarray | None = None

    def shapes(self) -> dict[str, tuple]:
        return {k: v.shape for k, v in vars(self).items() if isinstance(v, np.ndarray)}


def _keep(trace: ForwardTrace | None, name: str, value: Tensor) -> None:
    if trace is not None:
        setattr(trace, name, value.data.copy())


@contextlib.contextmanager
def _stage(name: str):
    try:
        yield
    except MstnError as exc:
        if getattr(exc, "_stage_tagged", False):
            raise
        tagged = type(exc)(f"[{name}] {exc}")
        tagged._stage_tagged = True
        raise tagged from exc


@dataclass
class Mode:
    """Train/eval switch plus the stream dropout masks come from."""

    train: bool = False
    rng: Rng | None = None

    def drop(self, x: Tensor, p: float) -> Tensor:
        return dropout(x, p, self.train, self.rng)


# --------------------------------------------------------------------- stages
def conv_pathway(x: Tensor, params: dict, bn: dict, mode: Mode, trace: ForwardTrace | None = None):
    """Conv(k1) -> BN -> ReLU -> Conv(k2) -> BN -> ReLU -> mean over time.

    ``x`` is ``[B, T, D]``; returns ``(h1 [B, C1, T], h2 [B, C2, T], z_cnn [B, C2])``.
    """
    xc = transpose(x, (0, 2, 1))
    h1 = conv1d_same(xc, params["conv1.weight"], params["conv1.bias"])
    h1 = batch_norm1d(h1, params["bn1.gamma"], params["bn1.beta"], bn["bn1"], mode.train).relu()
    h2 = conv1d_same(h1, params["conv2.weight"], params["conv2.bias"])
    h2 = batch_norm1d(h2, params["bn2.gamma"], params["bn2.beta"], bn["bn2"], mode.train).relu()
    z_cnn = h2.mean(axis=2)
    _keep(trace, "h_conv1", h1)
    _keep(trace, "h_conv2", h2)
    _keep(trace, "z_cnn", z_cnn)
    return h1, h2, z_cnn


def sinusoidal_encoding(T: int, d: int, dtype=np.float32) -> np.ndarray:
    pos = np.arange(T)[:, None]
    rate = np.exp(-np.log(10000.0) * (np.arange(0, d, 2) / d))
    pe = np.zeros((T, d))
    pe[:, 0::2] = np.sin(pos * rate)
    pe[:, 1::2] = np.cos(pos * rate[: d // 2])
    return pe.astype(dtype)


def multi_head_attention(x: Tensor, params: dict, prefix: str, heads: int,
                         store: list | None = None) -> Tensor:
    """Scaled dot-product self-attention over the time axis of ``[B, T, d]``."""
    B, T, d = x.shape
    dh = d // heads

    def split(t):
        return transpose(reshape(t, (B, T, heads, dh)), (0, 2, 1, 3))

    # scaling q is cheaper than scaling the [B, heads, T, T] scores
    q = split(linear(x, params[f"{prefix}.wq.weight"], params[f"{prefix}.wq.bias"]) * (1.0 / np.sqrt(dh)))
    k = split(linear(x, params[f"{prefix}.wk.weight"], params[f"{prefix}.wk.bias"]))
    v = split(linear(x, params[f"{prefix}.wv.weight"], params[f"{prefix}.wv.bias"]))
    scores = matmul(q, transpose(k, (0, 1, 3, 2)))
    attn = softmax_lastdim(scores)
    if store is not None:
        store.append(attn.data.copy())
    ctx = reshape(transpose(matmul(attn, v), (0, 2, 1, 3)), (B, T, d))
    return linear(ctx, params[f"{prefix}.wo.weight"], params[f"{prefix}.wo.bias"])


def transformer_core(x: Tensor, params: dict, cfg: MstnConfig, mode: Mode,
                     trace: ForwardTrace | None = None):
    """Linear embedding + sinusoidal positions, then pre-norm encoder layers.

    Each layer is ``x + drop(MHA(LN(x)))`` followed by
    ``x + drop(W2 drop(ReLU(W1 LN(x))))``; a final LayerNorm closes the stack.
    Returns ``(h_trans [B, T, m], z_trans [B, m])``.
    """
    t = cfg.transformer
    T = x.shape[1]
    h = linear(x, params["trans.embed.weight"], params["trans.embed.bias"])
    h = h + sinusoidal_encoding(T, t.model_dim, h.dtype)
    store = trace.encoder_attention if trace is not None else None
    for i in range(t.layers):
        p = f"trans.layer{i}"
        a = layer_norm(h, params[f"{p}.ln1.gamma"], params[f"{p}.ln1.beta"])
        h = h + mode.drop(multi_head_attention(a, params, f"{p}.attn", t.heads, store), cfg.dropout)
        f = layer_norm(h, params[f"{p}.ln2.gamma"], params[f"{p}.ln2.beta"])
        f = mode.drop(linear(f, params[f"{p}.ffn1.weight"], params[f"{p}.ffn1.bias"]).relu(), cfg.dropout)
        h = h + mode.drop(linear(f, params[f"{p}.ffn2.weight"], params[f"{p}.ffn2.bias"]), cfg.dropout)
    h = layer_norm(h, params["trans.norm.gamma"], params["trans.norm.beta"])
    z = mean_over_time(h)
    _keep(trace, "h_core", h)
    _keep(trace, "z_core", z)
    return h, z


def lstm_cell(gates_x: Tensor, h: Tensor, c: Tensor, w_hh_t: Tensor):
    """One LSTM step from the precomputed input projection ``gates_x = W_ih x + b``.

    Gate order along the 4H axis is (input, forget, output, candidate).
    ``w_hh_t`` is the transposed recurrent matrix ``[H, 4H]``.
    """
    H = h.shape[-1]
    gates = gates_x + matmul(h, w_hh_t)
    ifo = sigmoid(gates[:, : 3 * H])
    g = tanh(gates[:, 3 * H:])
    c = ifo[:, H:2 * H] * c + ifo[:, :H] * g
    h = ifo[:, 2 * H:] * tanh(c)
    return h, c


def lstm_direction(x: Tensor, w_ih: Tensor, w_hh: Tensor, bias: Tensor, reverse: bool) -> Tensor:
    B, T, _ = x.shape
    H = w_hh.shape[1]
    gx = linear(x, w_ih, bias)
    w_hh_t = transpose(w_hh, (1, 0))
    h = Tensor(np.zeros((B, H), dtype=x.dtype))
    c = Tensor(np.zeros((B, H), dtype=x.dtype))
    outs: list = [None] * T
    for t in (range(T - 1, -1, -1) if reverse else range(T)):
        h, c = lstm_cell(gx[:, t], h, c, w_hh_t)
        outs[t] = h
    return stack(outs, axis=1)


def bilstm_core(x: Tensor, params: dict, cfg: MstnConfig, trace: ForwardTrace | None = None):
    """Stacked bidirectional LSTM; returns ``(h_bi [B, T, 2H], z_bi [B, 2H])``."""
    h = x
    for i in range(cfg.bilstm.layers):
        p = f"lstm.layer{i}"
        fwd = lstm_direction(h, params[f"{p}.fwd.w_ih"], params[f"{p}.fwd.w_hh"], params[f"{p}.fwd.bias"], False)
        bwd = lstm_direction(h, params[f"{p}.bwd.w_ih"], params[f"{p}.bwd.w_hh"], params[f"{p}.bwd.bias"], True)
        h = concat([fwd, bwd], axis=-1)
    z = mean_over_time(h)
    _keep(trace, "h_core", h)
    _keep(trace, "z_core", z)
    return h, z


def gated_fusion(z_cnn: Tensor | None, z_core: Tensor | None, params: dict, cfg: MstnConfig,
                 trace: ForwardTrace | None = None):
    """``z_concat = [z_cnn; z_core]``, ``z_fused = z_concat * sigmoid(W_g z_concat + b_g)``."""
    expected = []
    if cfg.uses_cnn:
        expected.append((z_cnn, cfg.cnn_out_dim, "conv pathway"))
    if cfg.uses_core:
        expected.append((z_core, cfg.core_out_dim, f"{cfg.core} core"))
    for z, width, label in expected:
        if z is None or z.shape[-1] != width:
            got = None if z is None else z.shape
            raise DimensionError(f"gated_fusion: {label} output should have width {width} "
                                 f"for core={cfg.core}, got {got}")
    parts = [z for z, _, _ in expected]
    z_concat = parts[0] if len(parts) == 1 else concat(parts, axis=-1)
    if cfg.variant == "NoGatedFusion":
        z_fused = z_concat
    else:
        z_fused = z_concat * sigmoid(linear(z_concat, params["gate.W_g"], params["gate.b_g"]))
    _keep(trace, "z_concat", z_concat)
    _keep(trace, "z_fused", z_fused)
    return z_concat, z_fused


def se_block(z_seq: Tensor, params: dict, cfg: MstnConfig, trace: ForwardTrace | None = None) -> Tensor:
    """Channel gate ``sigmoid(W_2 ReLU(W_1 mean_t z_seq))`` broadcast over time."""
    if cfg.variant == "NoSE":
        return z_seq
    B, T, d = z_seq.shape
    s = mean_over_time(z_seq)
    g = sigmoid(linear(linear(s, params["se.W_1"]).relu(), params["se.W_2"]))
    z_se = z_seq * reshape(g, (B, 1, d))
    _keep(trace, "se_gate", g)
    _keep(trace, "z_se", z_se)
    return z_se


def mhta_final(z_se: Tensor, params: dict, cfg: MstnConfig, mode: Mode,
               trace: ForwardTrace | None = None) -> Tensor:
    """``dropout(LayerNorm(mean_t MHA(z_se)))`` with ``cfg.mhta_heads`` heads of width d/heads."""
    if cfg.variant == "NoMHTA":
        att = z_se
    else:
        store = [] if trace is not None else None
        att = multi_head_attention(z_se, params, "mhta", cfg.mhta_heads, store)
        if store:
            trace.mhta_attention = store[0]
    pooled = mean_over_time(att)
    z_final = mode.drop(layer_norm(pooled, params["mhta.ln.gamma"], params["mhta.ln.beta"]), cfg.dropout)
    _keep(trace, "z_final", z_final)
    return z_final


def task_head(z_final: Tensor, params: dict, cfg: MstnConfig, x: Tensor | None = None,
              mask: np.ndarray | None = None) -> Tensor:
    """Classification logits ``[B, C]``, or a ``[B, P, D]`` sequence for forecast/impute.

    Sequence heads expand ``z_final`` into per-feature coefficients on R
    learned temporal basis vectors: ``y[p, j] = sum_r basis[p, r] * coef[r, j] + bias[j]``.
    For imputation only the masked cells (mask == 1) are taken from the
    prediction; observed cells are copied from ``x``.
    """
    if cfg.task == "classify":
        return linear(z_final, params["head.weight"], params["head.bias"])
    if cfg.task == "impute" and mask is None:
        raise ContractError("imputation head needs a mask")
    B = z_final.shape[0]
    R, D = cfg.head_rank, cfg.input_dim
    coef = reshape(linear(z_final, params["head.coef.weight"], params["head.coef.bias"]), (B, R, D))
    y = matmul(params["head.basis"], coef) + params["head.bias"]
    if cfg.task == "forecast":
        return y + window_level(x.data)
    m = np.asarray(mask, dtype=y.dtype)
    if m.shape != y.shape:
        raise DimensionError(f"mask shape {m.shape} != output shape {y.shape}")
    y = y + window_level(x.data, m)
    return y * m + x.data * (1.0 - m)


def window_level(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    """Per-window, per-feature mean of the observed input cells, shape ``[B, 1, D]``.

    The sequence heads predict a residual on top of this level, so a freshly
    initialised model starts from the mean-fill forecast instead of zero.
    A feature with no observed cell gets level 0.
    """
    if mask is None:
        return x.mean(axis=1, keepdims=True)
    seen = 1.0 - mask
    n = seen.sum(axis=1, keepdims=True)
    return ((x * seen).sum(axis=1, keepdims=True) / np.maximum(n, 1.0)).astype(x.dtype)


# ---------------------------------------------------------------------- model
class MSTN:
    """Parameters, batch-norm state and config bundled behind one forward call."""

    def __init__(self, cfg: MstnConfig, params: dict | None = None, bn: dict | None = None):
        self.cfg = cfg.validate()
        self.params = params if params is not None else init_params(cfg)
        self.bn = bn if bn is not None else fresh_buffers(cfg)

    def __call__(self, x, train: bool = False, mask=None, rng: Rng | None = None,
                 trace: ForwardTrace | None = None) -> Tensor:
        return forward(x, self.params, self.bn, self.cfg, Mode(train, rng), mask=mask, trace=trace)

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    # ---------------------------------------------------------- state handling
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {name: p.data for name, p in self.params.items()}
        for name, st in self.bn.items():
            out[f"{name}.running_mean"] = st.running_mean
            out[f"{name}.running_var"] = st.running_var
        return out

    def snapshot(self) -> dict[str, np.ndarray]:
        return {k: v.copy() for k, v in self.state_arrays().items()}

    def load_state(self, arrays: dict[str, np.ndarray]) -> None:
        expected = {n: s for n, (s, _) in param_layout(self.cfg).items()}
        expected.update(buffer_layout(self.cfg))
        for name in arrays:
            if name not in expected:
                raise WeightsError(f"unexpected tensor {name!r} for this config")
        for name, shape in expected.items():
            if name not in arrays:
                raise WeightsError(f"missing tensor {name!r}")
            if tuple(arrays[name].shape) != tuple(shape):
                raise WeightsError(f"shape mismatch for {name!r}: file {tuple(arrays[name].shape)}, "
                                   f"config {tuple(shape)}")
        dt = self.cfg.dtype
        for name, p in self.params.items():
            p.data = np.array(arrays[name], dtype=dt)
        for name, st in self.bn.items():
            st.running_mean = np.array(arrays[f"{name}.running_mean"], dtype=dt)
            st.running_var = np.array(arrays[f"{name}.running_var"], dtype=dt)

    def save(self, path) -> int:
        return serialize.save(path, self.state_arrays())

    @classmethod
    def load(cls, cfg: MstnConfig, path) -> "MSTN":
        model = cls(cfg)
        model.load_state(serialize.load(path))
        return model


def forward(x, params: dict, bn: dict, cfg: MstnConfig, mode: Mode | None = None,
            mask=None, trace: ForwardTrace | None = None) -> Tensor:
    """Full MSTN forward pass for ``x`` of shape ``[B, T, D]``."""
    mode = mode or Mode()
    if not isinstance(x, Tensor):
        x = Tensor(np.asarray(x, dtype=cfg.dtype))
    elif x.dtype != cfg.dtype:
        x = Tensor(x.data.astype(cfg.dtype))
    if x.ndim != 3 or x.shape[2] != cfg.input_dim:
        raise DimensionError(f"input should be [B, T, {cfg.input_dim}], got {x.shape}")
    if cfg.task == "impute" and x.shape[1] != cfg.seq_len:
        raise DimensionError(f"input length {x.shape[1]} != seq_len {cfg.seq_len}")
    T = x.shape[1]
    z_cnn = z_core = None
    if cfg.uses_cnn:
        with _stage("conv_pathway"):
            _, _, z_cnn = conv_pathway(x, params, bn, mode, trace)
    if cfg.uses_core:
        with _stage(f"{cfg.core}_core"):
            if cfg.core == "transformer":
                _, z_core = transformer_core(x, params, cfg, mode, trace)
            else:
                _, z_core = bilstm_core(x, params, cfg, trace)
    with _stage("gated_fusion"):
        _, z_fused = gated_fusion(z_cnn, z_core, params, cfg, trace)
    z_seq = broadcast_to_sequence(z_fused, T)
    _keep(trace, "z_seq", z_seq)
    with _stage("se_block"):
        z_se = se_block(z_seq, params, cfg, trace)
    if trace is not None and cfg.variant == "NoSE":
        trace.z_se = z_se.data.copy()
    with _stage("mhta_final"):
        z_final = mhta_final(z_se, params, cfg, mode, trace)
    with _stage("task_head"):
        out = task_head(z_final, params, cfg, x, mask)
    _keep(trace, "output", out)
    return out
