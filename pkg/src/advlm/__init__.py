"""LSTM language models regularized by a generator-based adversarial perturbation."""

from .autodiff import Graph, Tensor, backward
from .adversarial import PerturbConfig, adversarial_step, fgsm_perturb, mc_perturb, random_start, reg_loss
from .config import RunConfig, load_config
from .corpus import Corpus, Vocabulary, batchify, build_vocab
from .models import GeneratorRNN, LanguageModel, lm_forward, lm_forward_perturbed
from .trainer import Trainer, bench_overhead, evaluate, train

__version__ = "0.1.0"
