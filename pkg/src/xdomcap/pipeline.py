"""Stage functions and the end-to-end experiment pipeline.

A run directory holds everything a run reads or writes::

    config.txt  manifest.txt  report.csv  critic_fraction.csv
    data/                 generated world
    pretrain/             source-pretrained captioner + loss log
    adapt_<mode>/         adapted captioner, dc, mc, train_log.csv
    finetune/             captioner fine-tuned on paired target data
    decode/<method>_<mode>.jsonl
    eval/<method>_<mode>.csv
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import logging
import os
import time
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint
from .captioner import Captioner, CaptionerConfig
from .config import ExperimentConfig, _parse
from .critics import (Critics, DomainCritic, DomainCriticConfig, MultiModalCritic,
                      MultiModalCriticConfig)
from .data import CaptionRecord, DatasetBundle, generate_world, load_bundle, read_records, save_bundle
from .decoding import PlanningConfig, beam_decode, greedy_decode, planning_decode
from .metrics import EvalCorpus, MetricReport, METRIC_COLUMNS, evaluate
from .trainer import PackedData, adversarial_train, per_word_loss, pretrain, save_models

log = logging.getLogger(__name__)

RUN_ROOT_ENV = "XDOMCAP_RUN_ROOT"

METHODS = {
    "pretrained": "Source Pre-trained",
    "mc": "Ours(+MC)",
    "dc": "Ours(+DC)",
    "both": "Ours(+MC+DC)",
    "finetune": "Fine-tuning",
}
DECODE_MODES = ("greedy", "beam", "plan")
REPORT_COLUMNS = ("Bleu-1", "Bleu-2", "Bleu-3", "Bleu-4", "ROUGE-L", "CIDEr-D", "style", "fidelity")


class StageError(RuntimeError):
    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


def run_root() -> Path:
    return Path(os.environ.get(RUN_ROOT_ENV, "runs"))


def content_hash(data: bytes) -> str:
    """Git blob hash of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _atomic_write(path: Path, text: str):
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


# ---------------------------------------------------------------------------
# manifest


@dataclass
class RunManifest:
    run_dir: str
    config: dict[str, str]
    input_hash: str
    started: str
    finished: str = ""
    stages: dict[str, str] = field(default_factory=dict)
    failed_stage: str = ""
    error: str = ""

    def dumps(self) -> str:
        lines = [f"run_dir={self.run_dir}", f"input_hash={self.input_hash}", f"started={self.started}",
                 f"finished={self.finished}", f"failed_stage={self.failed_stage}",
                 f"error={self.error.replace(chr(10), ' ')}"]
        lines += [f"config.{k}={v}" for k, v in self.config.items()]
        lines += [f"stage.{k}={v}" for k, v in self.stages.items()]
        return "\n".join(lines) + "\n"

    def save(self):
        _atomic_write(Path(self.run_dir) / "manifest.txt", self.dumps())

    def record(self, stage: str, path):
        self.stages[stage] = str(Path(path).relative_to(self.run_dir))
        self.save()

    def path(self, stage: str) -> Path:
        return Path(self.run_dir) / self.stages[stage]

    @classmethod
    def load(cls, path) -> "RunManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.txt"
        head, conf, stages = {}, {}, {}
        for line in path.read_text().splitlines():
            if not line.strip():
                continue
            k, _, v = line.partition("=")
            if k.startswith("config."):
                conf[k[7:]] = v
            elif k.startswith("stage."):
                stages[k[6:]] = v
            else:
                head[k] = v
        return cls(run_dir=head.get("run_dir", str(path.parent)), config=conf, input_hash=head.get("input_hash", ""),
                   started=head.get("started", ""), finished=head.get("finished", ""), stages=stages,
                   failed_stage=head.get("failed_stage", ""), error=head.get("error", ""))


# ---------------------------------------------------------------------------
# model loading


def _from_strings(cls, values: dict[str, str], **fixed):
    hints = typing.get_type_hints(cls)
    kw = {}
    for f in dataclasses.fields(cls):
        if f.name in fixed:
            kw[f.name] = fixed[f.name]
        elif f.name in values:
            kw[f.name] = _parse(values[f.name], hints[f.name], f.name)
    return cls(**kw)


def load_captioner(path) -> Captioner:
    params, conf = checkpoint.load(path, "captioner")
    masked = tuple(int(i) for i in conf.pop("masked_ids", "0,1").split(","))
    return Captioner(_from_strings(CaptionerConfig, conf), params=params, masked_ids=masked)


def load_critics(path, mode: str = "both") -> Critics:
    path = Path(path)
    dc_params, dc_conf = checkpoint.load(path / "dc", "dc")
    mc_params, mc_conf = checkpoint.load(path / "mc", "mc")
    dc = DomainCritic(_from_strings(DomainCriticConfig, dc_conf), params=dc_params)
    mc = MultiModalCritic(_from_strings(MultiModalCriticConfig, mc_conf), params=mc_params)
    return Critics(dc, mc, mode)


def new_critics(cfg: ExperimentConfig, vocab_size: int, mode: str = "both") -> Critics:
    w = cfg.world
    dc = DomainCritic(DomainCriticConfig(vocab_size, cfg.dc.embed_dim, cfg.dc.widths, cfg.dc.filters, w.t_max),
                      seed=cfg.seed + 1)
    mc = MultiModalCritic(MultiModalCriticConfig(vocab_size, w.feature_dim, cfg.mc.embed_dim, cfg.mc.hidden_dim,
                                                 cfg.mc.fusion_dim, w.t_max), seed=cfg.seed + 2)
    return Critics(dc, mc, mode)


# ---------------------------------------------------------------------------
# stages


def gen_data(cfg: ExperimentConfig, out_dir) -> DatasetBundle:
    bundle = generate_world(cfg.world, cfg.seed)
    save_bundle(bundle, out_dir)
    return bundle


def _features(records: list[CaptionRecord]) -> np.ndarray:
    return np.stack([r.feature for r in records])


def _loss_csv(path: Path, losses: list[float]):
    path.write_text("epoch,loss\n" + "".join(f"{i},{v!r}\n" for i, v in enumerate(losses)))


def pretrain_stage(cfg: ExperimentConfig, bundle: DatasetBundle, out_dir) -> Captioner:
    captioner = Captioner(cfg.captioner_config(len(bundle.vocab)), seed=cfg.seed)
    pcfg = dataclasses.replace(cfg.pretrain, seed=cfg.seed)
    losses = pretrain(captioner, _features(bundle.source_paired), [r.tokens for r in bundle.source_paired], pcfg)
    out = Path(out_dir)
    checkpoint.save(out, captioner.params, "captioner", captioner.manifest_config())
    _loss_csv(out / "loss.csv", losses)
    return captioner


def adapt_stage(cfg: ExperimentConfig, bundle: DatasetBundle, captioner: Captioner, out_dir,
                critic_mode: str | None = None, progress=None):
    """Adversarial adaptation of a copy of ``captioner``; returns (captioner, critics, log)."""
    mode = critic_mode or cfg.train.critic_mode
    if bundle.source_eval:
        loss = per_word_loss(captioner, _features(bundle.source_eval), [r.tokens for r in bundle.source_eval])
        if loss > cfg.run.max_pretrain_loss:
            raise StageError("adapt", f"captioner is not pretrained: source loss {loss:.3f} "
                                      f"> {cfg.run.max_pretrain_loss}")
    tcfg = dataclasses.replace(cfg.train, seed=cfg.seed, critic_mode=mode)
    cap = captioner.copy()
    critics = new_critics(cfg, len(bundle.vocab), mode)
    data = PackedData.from_bundle(bundle, cfg.world.t_max)
    out = Path(out_dir)
    cap, critics, tlog = adversarial_train(data, cap, critics, tcfg, out_dir=out, progress=progress)
    save_models(out, cap, critics)
    tlog.to_csv(out / "train_log.csv")
    return cap, critics, tlog


def finetune_stage(cfg: ExperimentConfig, bundle: DatasetBundle, captioner: Captioner, out_dir) -> Captioner:
    """Likelihood training on held-out paired target data: the supervised upper bound."""
    if not bundle.target_finetune:
        raise StageError("finetune", "dataset has no paired target split")
    cap = captioner.copy()
    pcfg = dataclasses.replace(cfg.pretrain, seed=cfg.seed, epochs=cfg.run.finetune_epochs)
    losses = pretrain(cap, _features(bundle.target_finetune), [r.tokens for r in bundle.target_finetune], pcfg)
    out = Path(out_dir)
    checkpoint.save(out, cap.params, "captioner", cap.manifest_config())
    _loss_csv(out / "loss.csv", losses)
    return cap


@dataclass
class DecodeResult:
    sentences: dict[str, str]
    critic_fraction: float = float("nan")


def decode_records(records: list[CaptionRecord], captioner: Captioner, vocab, mode: str,
                   critics: Critics | None = None, planning: PlanningConfig | None = None,
                   beam_size: int = 2, out_file=None) -> DecodeResult:
    if mode not in DECODE_MODES:
        raise ValueError(f"unknown decode mode {mode!r}")
    if mode == "plan" and critics is None:
        raise ValueError("planning needs critics")
    planning = planning or PlanningConfig()
    sentences, lines = {}, []
    decided = total = 0
    for i, r in enumerate(records):
        trace = ""
        if mode == "greedy":
            toks = greedy_decode(r.feature, captioner)
        elif mode == "beam":
            toks = beam_decode(r.feature, captioner, beam_size)
        else:
            pc = dataclasses.replace(planning, seed=planning.seed + 7919 * i)
            toks, tr = planning_decode(r.feature, captioner, critics, pc)
            decided += sum(tr.critic_decided)
            total += len(tr.critic_decided)
            trace = tr.summary()
        sentences[r.id] = vocab.detokenize(toks)
        lines.append(json.dumps({"id": r.id, "sentence": sentences[r.id], "mode": mode, "trace": trace}))
    if out_file is not None:
        Path(out_file).parent.mkdir(parents=True, exist_ok=True)
        _atomic_write(Path(out_file), "\n".join(lines) + "\n")
    frac = decided / total if (mode == "plan" and total) else float("nan")
    return DecodeResult(sentences, frac)


def read_candidates(path) -> dict[str, str]:
    out = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                o = json.loads(line)
                out[o["id"]] = o["sentence"]
    return out


def evaluate_records(candidates: dict[str, str], records: list[CaptionRecord]) -> MetricReport:
    refs = {r.id: [r.sentence] for r in records}
    scenes = {r.id: r.scene for r in records}
    missing = set(refs) - set(candidates)
    if missing:
        raise ValueError(f"no candidate for {len(missing)} reference ids")
    return evaluate(EvalCorpus(candidates, refs), scenes)


def write_eval_csv(path, report: MetricReport, method: str = "", decode: str = ""):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "decode") + REPORT_COLUMNS)
    w.writerow([method, decode] + [repr(float(v)) for v in report.row()])
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    _atomic_write(Path(path), buf.getvalue())


def eval_files(candidates_path, references_path, out_csv, scenes_path=None, method="", decode="") -> MetricReport:
    """Score a decode file against reference records (scenes default to the references' own)."""
    candidates = read_candidates(candidates_path)
    refs = read_records(references_path)
    if scenes_path is not None:
        by_id = {r.id: r.scene for r in read_records(scenes_path)}
        refs = [dataclasses.replace(r, scene=by_id[r.id]) for r in refs]
    report = evaluate_records(candidates, refs)
    write_eval_csv(out_csv, report, method, decode)
    return report


# ---------------------------------------------------------------------------
# reporting


def _row_key(row):
    methods = list(METHODS.values())
    m = methods.index(row[0]) if row[0] in methods else len(methods)
    d = DECODE_MODES.index(row[1]) if row[1] in DECODE_MODES else len(DECODE_MODES)
    return (m, d)


def compare_report(manifests: list[RunManifest]) -> str:
    """One CSV row per (method, decode mode) across the given runs."""
    if not manifests:
        raise StageError("report", "no manifests given")
    rows = []
    for man in manifests:
        for stage in man.stages:
            if not stage.startswith("eval:"):
                continue
            path = man.path(stage)
            if not path.exists():
                raise StageError("report", f"missing metric file {path}")
            with open(path) as fh:
                body = list(csv.reader(fh))
            if len(body) < 2 or tuple(body[0][2:]) != REPORT_COLUMNS:
                raise StageError("report", f"malformed metric file {path}")
            rows.extend(body[1:])
    rows.sort(key=_row_key)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("method", "decode") + REPORT_COLUMNS)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# the whole thing


def run_pipeline(cfg: ExperimentConfig, run_dir=None) -> RunManifest:
    """gen-data, pretrain, adapt (one run per critic mode), finetune, decode, eval, report."""
    text = cfg.dumps()
    digest = content_hash(text.encode())
    run_dir = Path(run_dir) if run_dir is not None else run_root() / f"run-{digest[:12]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.txt").write_text(text)
    man = RunManifest(str(run_dir), cfg.to_flat(), digest, time.strftime("%Y-%m-%dT%H:%M:%S"))
    man.save()
    stage = "gen-data"
    try:
        bundle = gen_data(cfg, run_dir / "data")
        man.record(stage, run_dir / "data")

        stage = "pretrain"
        base = pretrain_stage(cfg, bundle, run_dir / "pretrain")
        man.record(stage, run_dir / "pretrain")

        models: dict[str, tuple[Captioner, Critics | None]] = {"pretrained": (base, None)}
        for mode in cfg.run.critic_modes:
            stage = f"adapt:{mode}"
            cap, critics, _ = adapt_stage(cfg, bundle, base, run_dir / f"adapt_{mode}", mode)
            models[mode] = (cap, critics)
            man.record(stage, run_dir / f"adapt_{mode}")

        if cfg.run.finetune:
            stage = "finetune"
            models["finetune"] = (finetune_stage(cfg, bundle, base, run_dir / "finetune"), None)
            man.record(stage, run_dir / "finetune")

        planning = dataclasses.replace(cfg.planning, seed=cfg.seed)
        fractions = []
        for method in METHODS:
            if method not in models:
                continue
            cap, critics = models[method]
            for mode in cfg.decode.modes:
                if mode == "plan" and critics is None:
                    continue
                stage = f"decode:{method}:{mode}"
                dec_path = run_dir / "decode" / f"{method}_{mode}.jsonl"
                res = decode_records(bundle.target_eval, cap, bundle.vocab, mode, critics, planning,
                                     cfg.decode.beam_size, dec_path)
                man.record(stage, dec_path)
                if mode == "plan":
                    fractions.append((METHODS[method], res.critic_fraction))
                stage = f"eval:{method}:{mode}"
                ev_path = run_dir / "eval" / f"{method}_{mode}.csv"
                write_eval_csv(ev_path, evaluate_records(res.sentences, bundle.target_eval), METHODS[method], mode)
                man.record(stage, ev_path)
        if fractions:
            _atomic_write(run_dir / "critic_fraction.csv",
                          "method,critic_fraction\n" + "".join(f"{m},{f!r}\n" for m, f in fractions))

        stage = "report"
        _atomic_write(run_dir / "report.csv", compare_report([man]))
        man.record(stage, run_dir / "report.csv")
    except Exception as exc:
        man.failed_stage = stage
        man.error = f"{type(exc).__name__}: {exc}"
        man.finished = time.strftime("%Y-%m-%dT%H:%M:%S")
        man.save()
        if isinstance(exc, StageError):
            raise
        raise StageError(stage, man.error) from exc
    man.finished = time.strftime("%Y-%m-%dT%H:%M:%S")
    man.save()
    return man


def load_dataset(path) -> DatasetBundle:
    return load_bundle(path)
