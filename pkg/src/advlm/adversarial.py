"""Embedding perturbations and the joint descent/ascent training step.

The language model is trained by descent on the loss of perturbed inputs
while the generator is trained by ascent on the same loss minus a hinge
penalty that keeps each perturbation inside its per-token budget
``alpha * ||x_t||``.
"""
from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Tensor
from .corpus import Batch
from .errors import ConfigInvalid, NonFiniteLoss, ShapeMismatch
from .models import GeneratorRNN, HiddenState, LanguageModel, embed, forward_embedded, generator_sequence
from .optim import Optimizer, clip_gradients

MODES = ("none", "fgsm", "generator")
FGSM_MIN_NORM = 1e-12


@dataclass
class PerturbConfig:
    alpha: float = 0.1
    eps0: float = 0.01
    K: int = 1
    gen_dropout: float = 0.1
    lambda_reg: float = 10.0
    mode: str = "generator"

    def validate(self) -> "PerturbConfig":
        if self.mode not in MODES:
            raise ConfigInvalid(f"adversarial.mode must be one of {MODES}, got {self.mode!r}")
        if self.alpha < 0 or self.eps0 < 0:
            raise ConfigInvalid("alpha and eps0 must be non-negative")
        if int(self.K) != self.K or self.K < 1:
            raise ConfigInvalid(f"K must be an integer >= 1, got {self.K}")
        if not 0.0 <= self.gen_dropout < 1.0:
            raise ConfigInvalid(f"gen_dropout must lie in [0, 1), got {self.gen_dropout}")
        if self.lambda_reg < 0:
            raise ConfigInvalid("lambda_reg must be non-negative")
        return self


@dataclass
class PerturbationBatch:
    r: Tensor  # [T, b, e]
    norms: np.ndarray  # [T, b]
    budgets: np.ndarray  # [T, b], alpha * ||x_t||

    @classmethod
    def build(cls, r: Tensor, x: np.ndarray, alpha: float) -> "PerturbationBatch":
        if r.shape != x.shape:
            raise ShapeMismatch(f"perturbation {r.shape} vs embeddings {x.shape}")
        return cls(r, _norms(r.data), alpha * _norms(x))

    def ratios(self) -> np.ndarray:
        """``||r_t|| / eps_t``; NaN where the budget is zero."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.budgets > 0, self.norms / np.where(self.budgets > 0, self.budgets, 1.0), np.nan)


def _norms(a: np.ndarray) -> np.ndarray:
    return np.sqrt((np.asarray(a, dtype=np.float64) ** 2).sum(axis=-1))


def mean_norm_ratio(pb: PerturbationBatch) -> float | None:
    ratios = pb.ratios()
    if np.all(np.isnan(ratios)):
        return None
    return float(np.nanmean(ratios))


def random_start(shape, eps0: float, rng: np.random.Generator, dtype=np.float64) -> Tensor:
    """``eps0 * N(0, I)``, a constant with no gradient."""
    if eps0 < 0:
        raise ConfigInvalid("eps0 must be non-negative")
    return Tensor((eps0 * rng.standard_normal(shape)).astype(dtype))


def mc_perturb(x_emb, gen: GeneratorRNN, cfg: PerturbConfig, rng: np.random.Generator, states=None):
    """Iteratively refined generator perturbation.

    Starting from a random start, pass k runs the generator over
    ``x + r_hat^(k-1)`` under a fresh dropout mask and its own hidden
    trajectory, and ``r_hat^k`` is the mean of the k generator outputs so far.
    Only pass 1 is recorded on the graph; later passes are constants, so the
    generator's gradient flows through ``g_1 / K`` alone.

    ``states`` holds one carried ``(h, c)`` pair per pass (or None).
    Returns ``(PerturbationBatch, new_states)``.
    """
    if int(cfg.K) != cfg.K or cfg.K < 1:
        raise ConfigInvalid(f"K must be an integer >= 1, got {cfg.K}")
    K = int(cfg.K)
    x = np.asarray(x_emb.data if isinstance(x_emb, Tensor) else x_emb, dtype=gen.dtype)
    steps, batch, _ = x.shape
    if states is None or len(states) != K:
        states = [None] * K
    r_hat = random_start(x.shape, cfg.eps0, rng, gen.dtype).data
    new_states = []
    rest = None
    for k in range(1, K + 1):
        mask = ad.dropout_mask((batch, gen.hidden_dim), gen.dropout, rng, gen.dtype)
        if k == 1:
            first, st = generator_sequence(x + r_hat, states[0], gen, mask)
            r_hat = first.data
        else:
            with ad.no_grad():
                g_k, st = generator_sequence(x + r_hat, states[k - 1], gen, mask)
            rest = g_k.data if rest is None else rest + g_k.data
            r_hat = (first.data + rest) * (1.0 / k)
        new_states.append(st)
    r = first if K == 1 else ad.scale(ad.add(first, Tensor(rest)), 1.0 / K)
    return PerturbationBatch.build(r, x, cfg.alpha), new_states


def reg_loss(r, x_emb, alpha: float) -> Tensor:
    """Mean over all T*b positions of ``max(0, ||r_t|| - alpha * ||x_t||)``."""
    r = r.r if isinstance(r, PerturbationBatch) else r
    x = np.asarray(x_emb.data if isinstance(x_emb, Tensor) else x_emb)
    if r.shape != x.shape:
        raise ShapeMismatch(f"reg_loss: perturbation {r.shape} vs embeddings {x.shape}")
    budget = Tensor((alpha * _norms(x)).astype(r.dtype))
    return ad.mean(ad.relu(ad.sub(ad.row_norms(r), budget)))


def fgsm_perturb(grad_x, eps) -> PerturbationBatch:
    """Per-token normalized gradient scaled to ``eps_t``; zero where the gradient vanishes."""
    grad_x = np.asarray(grad_x)
    eps = np.asarray(eps, dtype=np.float64)
    if eps.shape != grad_x.shape[:-1]:
        raise ShapeMismatch(f"fgsm: budgets {eps.shape} vs gradient {grad_x.shape}")
    gnorm = _norms(grad_x)
    ok = gnorm >= FGSM_MIN_NORM
    coef = np.where(ok, eps, 0.0)[..., None]
    r = np.where(ok[..., None], grad_x * coef / np.where(ok, gnorm, 1.0)[..., None], 0.0).astype(grad_x.dtype)
    return PerturbationBatch(Tensor(r), _norms(r), eps)


@dataclass
class StepMetrics:
    step: int
    adv_loss: float
    reg_loss: float
    mean_r_norm_ratio: float | None
    lr_model: float
    lr_gen: float
    wall_ms: float
    clean_loss: float | None = None

    def to_json(self) -> str:
        d = asdict(self)
        if d["clean_loss"] is None:
            del d["clean_loss"]
        return json.dumps(d)


@dataclass
class StepResult:
    metrics: StepMetrics
    state: HiddenState
    gen_state: list | None
    perturbation: PerturbationBatch | None = None


def _xent(logits: Tensor, targets: np.ndarray, reduction: str = "mean") -> Tensor:
    steps, batch, vocab = logits.shape
    return ad.softmax_cross_entropy(ad.reshape(logits, (steps * batch, vocab)), targets.reshape(-1), reduction)


def input_gradient(batch: Batch, state, model: LanguageModel, rng_factory) -> tuple[np.ndarray, np.ndarray]:
    """Gradient of the mean cross-entropy w.r.t. the embedded inputs.

    Runs on a private graph; model parameter grads are left untouched.
    Returns ``(embeddings, d loss / d embeddings)``.
    """
    x = embed_constant(model, batch.inputs)
    x_leaf = Tensor(x, requires_grad=True)
    saved = {name: p.requires_grad for name, p in model.parameters().items()}
    for p in model.parameters().values():
        p.requires_grad = False
    try:
        with Graph() as g:
            logits, _ = forward_embedded(model, x_leaf, state, True, rng_factory())
            ad.backward(_xent(logits, batch.targets), g)
    finally:
        for name, p in model.parameters().items():
            p.requires_grad = saved[name]
    return x, x_leaf.grad


def embed_constant(model: LanguageModel, tokens) -> np.ndarray:
    with ad.no_grad():
        return embed(model, tokens).data


def adversarial_step(
    batch: Batch,
    state: HiddenState | None,
    model: LanguageModel,
    gen: GeneratorRNN | None,
    cfg: PerturbConfig,
    opt_model: Optimizer,
    opt_gen: Optimizer | None = None,
    *,
    seed: int = 0,
    step: int = 0,
    clip: float | None = 0.25,
    gen_state=None,
    report_clean: bool = False,
) -> StepResult:
    """One joint update on a mini-batch.

    The model descends on the perturbed-input loss. In generator mode the
    generator ascends on ``L_adv - lambda_reg * L_reg``; both gradient sets
    come out of a single backward pass over ``L_adv - lambda_reg * L_reg``,
    since the model parameters do not influence ``L_reg``.
    """
    t0 = time.perf_counter()
    graph = Graph(seed=seed, step=step)
    lm_rng = lambda: graph.rng("lm")  # noqa: E731 - the same masks for every LM pass of this step
    gen_params = list(gen.parameters().values()) if gen is not None else []
    opt_model.zero_grad()
    if opt_gen is not None:
        opt_gen.zero_grad()
    pb = None
    lreg = None
    with graph:
        if cfg.mode == "fgsm":
            x_clean, grad_x = input_gradient(batch, state, model, lm_rng)
            pb = fgsm_perturb(grad_x, cfg.alpha * _norms(x_clean))
        x = embed(model, batch.inputs)
        if cfg.mode == "generator":
            if gen is None:
                raise ConfigInvalid("generator mode needs a generator")
            pb, gen_state = mc_perturb(x.data, gen, cfg, graph.rng("perturb"), gen_state)
        elif cfg.mode not in MODES:
            raise ConfigInvalid(f"unknown mode {cfg.mode!r}")
        x_in = x if pb is None else ad.add(x, pb.r)
        logits, new_state = forward_embedded(model, x_in, state, True, lm_rng())
        loss = _xent(logits, batch.targets)
        if not np.isfinite(loss.data):
            raise NonFiniteLoss(f"non-finite loss {float(loss.data)} at step {step}", step=step)
        clean = None
        if report_clean:
            # Same parameters and dropout masks as the perturbed pass, before the update.
            with graph.paused():
                clean_logits, _ = forward_embedded(model, ad.detach(x), state, True, lm_rng())
                clean = float(_xent(clean_logits, batch.targets).data)
        objective = loss
        if cfg.mode == "generator":
            lreg = reg_loss(pb.r, x.data, cfg.alpha)
            if not np.isfinite(lreg.data):
                raise NonFiniteLoss(f"non-finite perturbation penalty at step {step}", step=step)
            objective = ad.sub(loss, ad.scale(lreg, cfg.lambda_reg))
        ad.backward(objective, graph)
    if clip:
        clip_gradients(model.parameters().values(), clip)
    opt_model.step()
    if cfg.mode == "generator" and opt_gen is not None:
        if clip:
            clip_gradients(gen_params, clip)
        opt_gen.step()
    wall_ms = (time.perf_counter() - t0) * 1000.0

    if cfg.mode == "generator":
        reg_value = float(lreg.data)
    elif pb is not None:
        reg_value = float(np.maximum(pb.norms - pb.budgets, 0.0).mean())
    else:
        reg_value = 0.0
    metrics = StepMetrics(
        step=step,
        adv_loss=float(loss.data),
        reg_loss=reg_value,
        mean_r_norm_ratio=0.0 if pb is None else mean_norm_ratio(pb),
        lr_model=opt_model.lr,
        lr_gen=opt_gen.lr if opt_gen is not None else 0.0,
        wall_ms=wall_ms,
        clean_loss=clean,
    )
    return StepResult(metrics, new_state, gen_state if cfg.mode == "generator" else None, pb)
