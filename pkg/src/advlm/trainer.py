"""Training loop, perplexity evaluation, checkpoints and the overhead benchmark."""
from __future__ import annotations

import gc
import json
import logging
import math
import statistics
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint as ckpt
from .adversarial import adversarial_step
from .config import RunConfig, config_hash, dump_config, parse_config
from .corpus import Corpus, Vocabulary, batchify, synthetic_corpus
from .errors import ConfigInvalid, CorruptCheckpoint, NonFiniteLoss
from .models import GeneratorRNN, HiddenState, LanguageModel, lm_forward
from .optim import Optimizer, clip_gradients, make_optimizer

log = logging.getLogger(__name__)

__all__ = [
    "EvalResult",
    "evaluate",
    "clip_gradients",
    "Trainer",
    "train",
    "save_checkpoint",
    "load_checkpoint",
    "OverheadReport",
    "bench_overhead",
    "load_corpus",
]


@dataclass
class EvalResult:
    nll: float  # mean per-token negative log-likelihood
    token_count: int
    perplexity: float


def evaluate(model: LanguageModel, ids, batch_size: int = 1, bptt: int = 35) -> EvalResult:
    """Perplexity over every target token of full windows, dropout off, state carried."""
    state = model.init_state(batch_size)
    total = 0.0
    count = 0
    with ad.no_grad():
        for batch in batchify(ids, batch_size, bptt):
            logits, state = lm_forward(batch.inputs, state, model, train=False)
            steps, b, vocab = logits.shape
            nll = ad.softmax_cross_entropy(ad.reshape(logits, (steps * b, vocab)), batch.targets.reshape(-1), "none")
            total += float(np.sum(nll.data, dtype=np.float64))
            count += nll.size
    mean = total / count
    return EvalResult(mean, count, math.exp(mean) if mean < 709.0 else math.inf)


def load_corpus(cfg: RunConfig) -> Corpus:
    d = cfg.data
    if d.synthetic_tokens > 0:
        return synthetic_corpus(d.synthetic_tokens, d.synthetic_vocab, d.synthetic_seed)
    if not (d.train and d.valid and d.test):
        raise ConfigInvalid("data.train, data.valid and data.test are required unless data.synthetic_tokens > 0")
    return Corpus.load(d.train, d.valid, d.test)


def build_models(cfg: RunConfig, vocab_size: int) -> tuple[LanguageModel, GeneratorRNN | None]:
    dtype = ad.dtype_for(cfg.train.precision)
    m, a = cfg.model, cfg.adversarial
    model = LanguageModel.create(
        vocab_size,
        m.emb_dim,
        m.hidden_dim,
        m.layers,
        tie_weights=m.tie_weights,
        dropout_emb=m.dropout_emb,
        dropout_hid=m.dropout_hid,
        weight_drop=m.weight_drop,
        variational=m.variational,
        seed=cfg.train.seed,
        dtype=dtype,
    )
    gen = None
    if a.mode == "generator":
        gen = GeneratorRNN.create(
            m.emb_dim,
            a.gen_hidden,
            dropout=a.gen_dropout,
            input_mode=a.gen_input,
            proj_init=a.gen_proj_init,
            seed=cfg.train.seed + 7919,
            dtype=dtype,
        )
        if a.gen_zero_init:
            for p in gen.parameters().values():
                p.data[...] = 0
    return model, gen


def build_optimizers(cfg: RunConfig, model: LanguageModel, gen: GeneratorRNN | None):
    t = cfg.train
    kw = dict(momentum=t.momentum, betas=(t.beta1, t.beta2), weight_decay=t.weight_decay)
    opt_model = make_optimizer(t.optimizer, model.parameters(), t.lr, **kw)
    opt_gen = None
    if gen is not None:
        opt_gen = make_optimizer(t.optimizer, gen.parameters(), t.lr * cfg.adversarial.gen_lr_scale, maximize=True, **kw)
    return opt_model, opt_gen


@dataclass
class RunResult:
    out_dir: Path
    history: list[dict]
    best_val_ppl: float
    steps: int


class Trainer:
    """Owns every piece of mutable training state, so it can be checkpointed whole."""

    def __init__(self, cfg: RunConfig, corpus: Corpus, out_dir=None):
        self.cfg = cfg.validate()
        self.corpus = corpus
        self.out_dir = Path(out_dir if out_dir is not None else cfg.train.out_dir)
        self.model, self.gen = build_models(cfg, len(corpus.vocab))
        self.opt_model, self.opt_gen = build_optimizers(cfg, self.model, self.gen)
        self.batches = batchify(corpus.train, cfg.train.batch_size, cfg.train.bptt)
        self.epoch = 0
        self.batch_index = 0
        self.step = 0
        self.lm_state: HiddenState | None = None
        self.gen_state: list | None = None
        self.best_val = math.inf
        self.bad_epochs = 0
        self.history: list[dict] = []
        self.loss_sum = 0.0
        self.loss_count = 0

    @property
    def steps_per_epoch(self) -> int:
        cap = self.cfg.train.max_steps_per_epoch
        return min(cap, len(self.batches)) if cap > 0 else len(self.batches)

    def train_step(self):
        t = self.cfg.train
        batch = self.batches[self.batch_index]
        res = adversarial_step(
            batch,
            self.lm_state,
            self.model,
            self.gen,
            self.cfg.adversarial,
            self.opt_model,
            self.opt_gen,
            seed=t.seed,
            step=self.step,
            clip=t.clip or None,
            gen_state=self.gen_state,
            report_clean=t.report_clean_loss,
        )
        if not t.log_wall_time:
            res.metrics.wall_ms = 0.0
        self.lm_state, self.gen_state = res.state, res.gen_state
        self.loss_sum += res.metrics.adv_loss
        self.loss_count += 1
        self.step += 1
        self.batch_index += 1
        return res

    def _end_epoch(self) -> dict:
        t = self.cfg.train
        val = evaluate(self.model, self.corpus.valid, t.eval_batch_size, t.bptt)
        if not math.isfinite(val.nll):
            raise NonFiniteLoss(f"non-finite validation loss after epoch {self.epoch}", self.step)
        improved = val.perplexity < self.best_val
        record = {
            "epoch": self.epoch,
            "val_ppl": val.perplexity,
            "val_nll": val.nll,
            "train_loss": self.loss_sum / max(self.loss_count, 1),
            "lr_model": self.opt_model.lr,
            "lr_gen": self.opt_gen.lr if self.opt_gen else 0.0,
            "best": improved,
        }
        self.history.append(record)
        if improved:
            self.best_val = val.perplexity
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= t.patience:
                self.opt_model.lr *= t.lr_decay
                if self.opt_gen is not None:
                    self.opt_gen.lr *= t.lr_decay
                self.bad_epochs = 0
        self.epoch += 1
        self.batch_index = 0
        self.loss_sum, self.loss_count = 0.0, 0
        self.lm_state, self.gen_state = None, None
        return record

    def run(self) -> RunResult:
        t = self.cfg.train
        self.out_dir.mkdir(parents=True, exist_ok=True)
        (self.out_dir / "resolved_config.txt").write_text(dump_config(self.cfg), encoding="utf-8")
        last = self.out_dir / "last.ckpt"
        best = self.out_dir / "best.ckpt"
        if self.step == 0:
            self.save(last)
        with open(self.out_dir / "metrics.jsonl", "a", encoding="utf-8") as fh:
            while self.epoch < t.epochs:
                while self.batch_index < self.steps_per_epoch:
                    try:
                        res = self.train_step()
                    except NonFiniteLoss as e:
                        raise NonFiniteLoss(f"{e}; last good checkpoint: {last}", e.step) from e
                    fh.write(res.metrics.to_json() + "\n")
                    if t.checkpoint_every and self.step % t.checkpoint_every == 0:
                        fh.flush()
                        self.save(last)
                try:
                    record = self._end_epoch()
                except NonFiniteLoss as e:
                    raise NonFiniteLoss(f"{e}; last good checkpoint: {last}", e.step) from e
                fh.write(json.dumps(record) + "\n")
                fh.flush()
                log.info("epoch %d: val ppl %.3f lr %.4g", record["epoch"], record["val_ppl"], record["lr_model"])
                if record["best"]:
                    self.save(best)
                self.save(last)
        return RunResult(self.out_dir, list(self.history), self.best_val, self.step)

    # -- persistence ---------------------------------------------------------

    def to_checkpoint(self) -> ckpt.CheckpointData:
        blocks: dict[str, np.ndarray] = {}
        for name, p in self.model.parameters().items():
            blocks[f"param.{name}"] = p.data
        if self.gen is not None:
            for name, p in self.gen.parameters().items():
                blocks[f"param.{name}"] = p.data
        for tag, opt in (("model", self.opt_model), ("gen", self.opt_gen)):
            if opt is not None:
                for k, v in sorted(opt.state_arrays().items()):
                    blocks[f"opt.{tag}.{k}"] = v
        if self.lm_state is not None:
            for i, (h, c) in enumerate(self.lm_state.layers):
                blocks[f"state.lm.{i}.h"], blocks[f"state.lm.{i}.c"] = h, c
        if self.gen_state is not None:
            for i, (h, c) in enumerate(self.gen_state):
                blocks[f"state.gen.{i}.h"], blocks[f"state.gen.{i}.c"] = h, c
        meta = {
            "config": dump_config(self.cfg),
            "vocab": self.corpus.vocab.itos,
            "has_generator": self.gen is not None,
            "progress": {
                "epoch": self.epoch,
                "batch_index": self.batch_index,
                "step": self.step,
                "best_val": None if math.isinf(self.best_val) else self.best_val,
                "bad_epochs": self.bad_epochs,
                "history": self.history,
                "loss_sum": self.loss_sum,
                "loss_count": self.loss_count,
                "lr_model": self.opt_model.lr,
                "lr_gen": self.opt_gen.lr if self.opt_gen else 0.0,
                "opt_model_t": self.opt_model.t,
                "opt_gen_t": self.opt_gen.t if self.opt_gen else 0,
            },
        }
        m = self.model
        return ckpt.CheckpointData(self.cfg.train.precision, m.vocab_size, m.emb_dim, m.hidden_dim, len(m.layers), blocks, meta)

    def save(self, path) -> None:
        ckpt.write(path, self.to_checkpoint())

    @classmethod
    def from_checkpoint(cls, data: ckpt.CheckpointData, corpus: Corpus | None = None, out_dir=None) -> "Trainer":
        cfg = parse_config(data.meta["config"])
        vocab = Vocabulary(data.meta["vocab"])
        if corpus is None:
            empty = np.zeros(0, dtype=np.int64)
            corpus = Corpus(vocab, empty, empty, empty)
        elif corpus.vocab != vocab:
            raise ConfigInvalid("corpus vocabulary differs from the checkpoint's")
        self = cls.__new__(cls)
        self.cfg, self.corpus = cfg, corpus
        self.out_dir = Path(out_dir if out_dir is not None else cfg.train.out_dir)
        self.model, self.gen = build_models(cfg, len(vocab))
        if not data.meta.get("has_generator", False):
            self.gen = None
        self.opt_model, self.opt_gen = build_optimizers(cfg, self.model, self.gen)
        self.batches = batchify(corpus.train, cfg.train.batch_size, cfg.train.bptt) if len(corpus.train) else []
        params = dict(self.model.parameters())
        if self.gen is not None:
            params.update(self.gen.parameters())
        for name, p in params.items():
            key = f"param.{name}"
            if key not in data.blocks or data.blocks[key].shape != p.shape:
                raise CorruptCheckpoint(f"missing or misshapen parameter block {key!r}")
            p.data[...] = data.blocks[key]
        for tag, opt in (("model", self.opt_model), ("gen", self.opt_gen)):
            if opt is not None:
                prefix = f"opt.{tag}."
                opt.load_state_arrays({k[len(prefix) :]: v for k, v in data.blocks.items() if k.startswith(prefix)})
        dtype = self.model.dtype
        n_lm = sum(1 for k in data.blocks if k.startswith("state.lm.") and k.endswith(".h"))
        self.lm_state = (
            HiddenState([(data.blocks[f"state.lm.{i}.h"].astype(dtype), data.blocks[f"state.lm.{i}.c"].astype(dtype)) for i in range(n_lm)])
            if n_lm
            else None
        )
        n_gen = sum(1 for k in data.blocks if k.startswith("state.gen.") and k.endswith(".h"))
        self.gen_state = (
            [(data.blocks[f"state.gen.{i}.h"].astype(dtype), data.blocks[f"state.gen.{i}.c"].astype(dtype)) for i in range(n_gen)]
            if n_gen
            else None
        )
        pr = data.meta["progress"]
        self.epoch, self.batch_index, self.step = pr["epoch"], pr["batch_index"], pr["step"]
        self.best_val = math.inf if pr["best_val"] is None else pr["best_val"]
        self.bad_epochs = pr["bad_epochs"]
        self.history = pr["history"]
        self.loss_sum, self.loss_count = pr["loss_sum"], pr["loss_count"]
        self.opt_model.lr, self.opt_model.t = pr["lr_model"], pr["opt_model_t"]
        if self.opt_gen is not None:
            self.opt_gen.lr, self.opt_gen.t = pr["lr_gen"], pr["opt_gen_t"]
        return self


def save_checkpoint(trainer: Trainer, path) -> None:
    trainer.save(path)


def load_checkpoint(path, corpus: Corpus | None = None, out_dir=None) -> Trainer:
    """Restore a :class:`Trainer` exactly as it was when saved."""
    return Trainer.from_checkpoint(ckpt.read(path), corpus, out_dir)


def train(cfg: RunConfig, corpus: Corpus, out_dir=None, resume=None) -> RunResult:
    trainer = load_checkpoint(resume, corpus, out_dir) if resume else Trainer(cfg, corpus, out_dir)
    return trainer.run()


# -- overhead benchmark ----------------------------------------------------------

@dataclass
class OverheadReport:
    baseline_ms_median: float
    adv_ms_median: float
    ratio: float
    K: int
    config_hash: str
    mode: str = "generator"
    steps: int = 0
    baseline_ms: list[float] = field(default_factory=list, repr=False)
    adv_ms: list[float] = field(default_factory=list, repr=False)

    def to_json(self) -> str:
        d = asdict(self)
        del d["baseline_ms"], d["adv_ms"]
        return json.dumps(d)


class _Arm:
    def __init__(self, cfg: RunConfig, vocab_size: int):
        self.cfg = cfg
        self.model, self.gen = build_models(cfg, vocab_size)
        self.opt_model, self.opt_gen = build_optimizers(cfg, self.model, self.gen)
        self.state = None
        self.gen_state = None
        self.times: list[float] = []

    def step(self, batch, step: int) -> float:
        res = adversarial_step(
            batch,
            self.state,
            self.model,
            self.gen,
            self.cfg.adversarial,
            self.opt_model,
            self.opt_gen,
            seed=self.cfg.train.seed,
            step=step,
            clip=self.cfg.train.clip or None,
            gen_state=self.gen_state,
        )
        self.state, self.gen_state = res.state, res.gen_state
        return res.metrics.wall_ms


def bench_overhead(cfg: RunConfig, corpus: Corpus, warmup: int | None = None, steps: int | None = None, adv_mode: str | None = None) -> OverheadReport:
    """Median step time of the baseline (mode none) against an adversarial arm.

    Both arms start from identical weights and see the same batches. Steps
    alternate between arms, with the order flipped every step, so slow drift
    in machine speed hits both equally. Only the update itself is timed.
    The reported ratio is the median of per-pair ratios: the two steps of a
    pair run back to back, so a shift in machine speed between pairs cancels
    instead of landing in one arm's median and not the other's.
    """
    warmup = cfg.bench.warmup if warmup is None else warmup
    steps = cfg.bench.steps if steps is None else steps
    adv_cfg = cfg.copy()
    if adv_mode is not None:
        adv_cfg.adversarial.mode = adv_mode
    base_cfg = cfg.copy()
    base_cfg.adversarial.mode = "none"
    vocab = len(corpus.vocab)
    arms = [_Arm(base_cfg, vocab), _Arm(adv_cfg, vocab)]
    batches = batchify(corpus.train, cfg.train.batch_size, cfg.train.bptt)
    gc.collect()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(warmup + steps):
            batch = batches[i % len(batches)]
            order = arms if i % 2 == 0 else arms[::-1]
            for arm in order:
                ms = arm.step(batch, i)
                if i >= warmup:
                    arm.times.append(ms)
            gc.collect()
    finally:
        if was_enabled:
            gc.enable()
    base = statistics.median(arms[0].times)
    adv = statistics.median(arms[1].times)
    return OverheadReport(
        baseline_ms_median=base,
        adv_ms_median=adv,
        ratio=statistics.median(a / b for a, b in zip(arms[1].times, arms[0].times)),
        K=int(adv_cfg.adversarial.K),
        config_hash=config_hash(adv_cfg),
        mode=adv_cfg.adversarial.mode,
        steps=steps,
        baseline_ms=arms[0].times,
        adv_ms=arms[1].times,
    )
