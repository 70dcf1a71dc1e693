"""Adversarial cross-domain image captioning at desk scale.

A small numpy reverse-mode autodiff core, an LSTM captioner, a domain critic
and a multi-modal critic, the rollout/REINFORCE adversarial trainer, three
decoders and the usual caption metrics, all run on a synthetic two-domain
caption world.
"""
from .autodiff import Adam, ParamStore, Tensor, no_grad
from .captioner import Captioner, CaptionerConfig
from .critics import Critics, DomainCritic, DomainCriticConfig, MultiModalCritic, MultiModalCriticConfig
from .data import DatasetBundle, Vocabulary, WorldConfig, generate_world
from .decoding import PlanningConfig, beam_decode, greedy_decode, planning_decode
from .metrics import EvalCorpus, MetricReport, evaluate
from .trainer import PretrainConfig, TrainConfig, adversarial_train, pretrain

__version__ = "0.1.0"
