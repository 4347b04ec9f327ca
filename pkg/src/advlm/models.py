"""Word-level LSTM language model and the perturbation generator RNN."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import ShapeMismatch, TokenOutOfRange

FORGET_BIAS = 1.0


@dataclass
class LSTMCellParams:
    """Weights of one LSTM layer, gates ordered (input, forget, cell, output)."""

    w_ih: Tensor  # [4h, in]
    w_hh: Tensor  # [4h, h]
    b: Tensor  # [4h]

    @classmethod
    def create(cls, in_dim: int, hidden: int, rng: np.random.Generator, dtype=np.float64) -> "LSTMCellParams":
        bound = 1.0 / np.sqrt(hidden)
        w_ih = rng.uniform(-bound, bound, (4 * hidden, in_dim)).astype(dtype)
        w_hh = rng.uniform(-bound, bound, (4 * hidden, hidden)).astype(dtype)
        b = np.zeros(4 * hidden, dtype=dtype)
        b[hidden : 2 * hidden] = FORGET_BIAS
        return cls(Tensor(w_ih, requires_grad=True), Tensor(w_hh, requires_grad=True), Tensor(b, requires_grad=True))

    @property
    def in_dim(self) -> int:
        return self.w_ih.shape[1]

    @property
    def hidden(self) -> int:
        return self.w_hh.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.w_ih": self.w_ih, f"{prefix}.w_hh": self.w_hh, f"{prefix}.b": self.b}


@dataclass
class HiddenState:
    """Per-layer ``(h, c)`` arrays, each ``[batch, hidden]``. Always detached."""

    layers: list[tuple[np.ndarray, np.ndarray]]

    @classmethod
    def zeros(cls, dims: list[int], batch: int, dtype=np.float64) -> "HiddenState":
        return cls([(np.zeros((batch, d), dtype=dtype), np.zeros((batch, d), dtype=dtype)) for d in dims])

    def copy(self) -> "HiddenState":
        return HiddenState([(h.copy(), c.copy()) for h, c in self.layers])


@dataclass
class LanguageModel:
    embedding: Tensor  # [V, e]; doubles as the output projection when tied
    layers: list[LSTMCellParams]
    out_bias: Tensor  # [V]
    out_weight: Tensor | None = None  # only when untied
    dropout_emb: float = 0.0
    dropout_hid: float = 0.0
    weight_drop: float = 0.0
    variational: bool = True

    @classmethod
    def create(
        cls,
        vocab_size: int,
        emb_dim: int,
        hidden_dim: int,
        n_layers: int,
        *,
        tie_weights: bool = True,
        dropout_emb: float = 0.1,
        dropout_hid: float = 0.25,
        weight_drop: float = 0.5,
        variational: bool = True,
        seed: int = 0,
        dtype=np.float64,
    ) -> "LanguageModel":
        if n_layers < 1:
            raise ValueError("need at least one LSTM layer")
        rng = np.random.default_rng(seed)
        emb = Tensor(rng.uniform(-0.1, 0.1, (vocab_size, emb_dim)).astype(dtype), requires_grad=True)
        last = emb_dim if tie_weights else hidden_dim
        dims = [emb_dim] + [hidden_dim] * (n_layers - 1) + [last]
        layers = [LSTMCellParams.create(dims[i], dims[i + 1], rng, dtype) for i in range(n_layers)]
        out_weight = None
        if not tie_weights:
            out_weight = Tensor(rng.uniform(-0.1, 0.1, (vocab_size, last)).astype(dtype), requires_grad=True)
        return cls(
            embedding=emb,
            layers=layers,
            out_bias=Tensor(np.zeros(vocab_size, dtype=dtype), requires_grad=True),
            out_weight=out_weight,
            dropout_emb=dropout_emb,
            dropout_hid=dropout_hid,
            weight_drop=weight_drop,
            variational=variational,
        )

    @property
    def vocab_size(self) -> int:
        return self.embedding.shape[0]

    @property
    def emb_dim(self) -> int:
        return self.embedding.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.layers[0].hidden

    @property
    def tied(self) -> bool:
        return self.out_weight is None

    @property
    def output_weight(self) -> Tensor:
        return self.embedding if self.out_weight is None else self.out_weight

    @property
    def dtype(self):
        return self.embedding.dtype

    def parameters(self) -> dict[str, Tensor]:
        params = {"embedding": self.embedding}
        for i, layer in enumerate(self.layers):
            params.update(layer.named(f"lstm.{i}"))
        params["out_bias"] = self.out_bias
        if self.out_weight is not None:
            params["out_weight"] = self.out_weight
        return params

    def init_state(self, batch: int) -> HiddenState:
        return HiddenState.zeros([layer.hidden for layer in self.layers], batch, self.dtype)


@dataclass
class GeneratorRNN:
    """Single-layer LSTM plus a linear map back to the embedding space.

    ``input_mode`` selects what the generator reads at position t: the
    (already perturbed) embedding being perturbed (``"current"``) or the
    previous word's embedding (``"previous"``).
    """

    cell: LSTMCellParams
    proj: Tensor  # [h_g, e]
    dropout: float = 0.0
    input_mode: str = "current"

    @classmethod
    def create(
        cls,
        emb_dim: int,
        hidden_dim: int,
        *,
        dropout: float = 0.1,
        input_mode: str = "current",
        proj_init: float = 0.01,
        seed: int = 1,
        dtype=np.float64,
    ) -> "GeneratorRNN":
        if input_mode not in ("current", "previous"):
            raise ValueError(f"input_mode must be 'current' or 'previous', got {input_mode!r}")
        rng = np.random.default_rng(seed)
        cell = LSTMCellParams.create(emb_dim, hidden_dim, rng, dtype)
        proj = rng.uniform(-proj_init, proj_init, (hidden_dim, emb_dim)).astype(dtype)
        return cls(cell, Tensor(proj, requires_grad=True), dropout, input_mode)

    @property
    def emb_dim(self) -> int:
        return self.proj.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.cell.hidden

    @property
    def dtype(self):
        return self.proj.dtype

    def parameters(self) -> dict[str, Tensor]:
        params = self.cell.named("gen")
        params["gen.proj"] = self.proj
        return params

    def init_state(self, batch: int) -> tuple[np.ndarray, np.ndarray]:
        z = np.zeros((batch, self.hidden_dim), dtype=self.dtype)
        return z, z.copy()


def lstm_cell_step(x, state, params: LSTMCellParams):
    """``(h', c')`` for one step; ``state`` is an ``(h, c)`` pair."""
    h, c = state
    return ad.lstm_cell(x, h, c, params.w_ih, params.w_hh, params.b)


def _check_tokens(tokens: np.ndarray, vocab: int) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.ndim != 2 or tokens.shape[0] < 1:
        raise ShapeMismatch(f"token batch must be [T, batch] with T >= 1, got {tokens.shape}")
    if tokens.min() < 0 or tokens.max() >= vocab:
        raise TokenOutOfRange(f"token ids must lie in [0, {vocab})")
    return tokens


def embed(model: LanguageModel, tokens) -> Tensor:
    """Embedded batch ``[T, batch, e]``."""
    return ad.embedding(model.embedding, _check_tokens(tokens, model.vocab_size))


def _locked_mask(shape3, rate, rng, variational, dtype):
    steps, batch, dim = shape3
    if variational:
        m = ad.dropout_mask((batch, dim), rate, rng, dtype)
        m = np.broadcast_to(m, shape3)
    else:
        m = ad.dropout_mask(shape3, rate, rng, dtype)
    return m / (1.0 - rate)


def forward_embedded(
    model: LanguageModel,
    x: Tensor,
    state: HiddenState | None,
    train: bool = False,
    rng: np.random.Generator | None = None,
):
    """Run the recurrent stack and tied decoder on embedded inputs ``x[T, b, e]``.

    Random draws happen in a fixed order (input mask, then per layer the
    weight-drop mask followed by the output mask), so one rng stream fixes
    every mask.
    """
    steps, batch, _ = x.shape
    if state is None:
        state = model.init_state(batch)
    dtype = model.dtype
    if train and model.dropout_emb > 0:
        x = ad.mul_const(x, _locked_mask(x.shape, model.dropout_emb, rng, model.variational, dtype))
    new_state = []
    h = x
    for layer, (h0, c0) in zip(model.layers, state.layers):
        w_hh = layer.w_hh
        if train and model.weight_drop > 0:
            m = ad.dropout_mask(w_hh.shape, model.weight_drop, rng, dtype) / (1.0 - model.weight_drop)
            w_hh = ad.mul_const(w_hh, m)
        h, h_last, c_last = ad.lstm_layer(h, h0, c0, layer.w_ih, w_hh, layer.b)
        new_state.append((h_last.data.copy(), c_last.data.copy()))
        if train and model.dropout_hid > 0:
            h = ad.mul_const(h, _locked_mask(h.shape, model.dropout_hid, rng, model.variational, dtype))
    flat = ad.reshape(h, (steps * batch, h.shape[2]))
    logits = ad.add_bias(ad.matmul(flat, ad.transpose(model.output_weight)), model.out_bias)
    return ad.reshape(logits, (steps, batch, model.vocab_size)), HiddenState(new_state)


def lm_forward(tokens, state, model: LanguageModel, train: bool = False, rng=None):
    """Logits ``[T, batch, V]`` and the detached carry-over state."""
    return forward_embedded(model, embed(model, tokens), state, train, rng)


def lm_forward_perturbed(tokens, state, model: LanguageModel, r, train: bool = False, rng=None):
    """As :func:`lm_forward`, with ``x_t + r_t`` fed to the first layer."""
    x = embed(model, tokens)
    r = r if isinstance(r, Tensor) else Tensor(np.asarray(r, dtype=model.dtype))
    if r.shape != x.shape:
        raise ShapeMismatch(f"perturbation {r.shape} does not match embedded batch {x.shape}")
    return forward_embedded(model, ad.add(x, r), state, train, rng)


def generator_step(x_emb, state, gen: GeneratorRNN, mask: np.ndarray | None = None, rng=None):
    """One generator step: ``(r[b, e], (h', c'))``.

    ``mask`` is a keep-mask over the generator's hidden units; without one a
    fresh mask is drawn from ``rng`` (no dropout when ``rng`` is None too).
    """
    x_emb = x_emb if isinstance(x_emb, Tensor) else Tensor(np.asarray(x_emb, dtype=gen.dtype))
    if x_emb.data.ndim != 2 or x_emb.shape[1] != gen.emb_dim:
        raise ShapeMismatch(f"generator input must be [batch, {gen.emb_dim}], got {x_emb.shape}")
    h, c = lstm_cell_step(x_emb, state, gen.cell)
    if gen.dropout > 0:
        if mask is None and rng is not None:
            mask = ad.dropout_mask(h.shape, gen.dropout, rng, gen.dtype)
        if mask is not None:
            h_out, _ = ad.dropout(h, gen.dropout, mask=mask)
        else:
            h_out = h
    else:
        h_out = h
    return ad.matmul(h_out, gen.proj), (h, c)


def generator_sequence(xs, state, gen: GeneratorRNN, mask: np.ndarray | None = None):
    """Generator over a whole window ``xs[T, b, e]`` with one fixed hidden mask.

    Returns ``(r[T, b, e], final (h, c) arrays)``.
    """
    xs = np.asarray(xs.data if isinstance(xs, Tensor) else xs, dtype=gen.dtype)
    steps = xs.shape[0]
    if gen.input_mode == "previous":
        xs = np.concatenate([np.zeros_like(xs[:1]), xs[:-1]])
    if state is None:
        state = gen.init_state(xs.shape[1])
    out = []
    for t in range(steps):
        r_t, state = generator_step(xs[t], state, gen, mask=mask)
        out.append(r_t)
    h, c = state
    return ad.stack(out), (h.data.copy(), c.data.copy())
