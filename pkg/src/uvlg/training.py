"""Pretraining, single-task and round-robin multi-task finetuning.

Training configs are INI files::

    [data]
    dir = runs/world
    [train]
    tasks = mlm, vqa, itm, ground, gcap
    steps = 2000
    lr = 1e-4
    [batch_size]
    vqa = 64
    [model]
    d = 64

Any key can be overridden from the environment as ``UVLG_<SECTION>_<KEY>``
(upper case), e.g. ``UVLG_TRAIN_STEPS=100``.
"""

from __future__ import annotations

import configparser
import dataclasses
import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint as ckpt_mod
from .checkpoint import Checkpoint
from .data import Dataset, collate
from .model import HEAD_MODES, ConfigError, ModelConfig, VLModel
from .nn_core import AdamW, backward
from .tasks import PREFIXES, PRETRAIN_TASKS, merged_vqa_prefixes

ENV_PREFIX = "UVLG_"
MODES = ("gen", "disc")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, task: str, value: float):
        super().__init__(f"non-finite loss {value} at step {step} (task {task})")
        self.step, self.task, self.value = step, task, value


@dataclass
class TrainConfig:
    data_dir: str = ""
    split: str = "train"
    eval_split: str = "val"
    tasks: tuple = PRETRAIN_TASKS
    steps: int = 2000
    batch_size: int = 32
    task_batch: dict = field(default_factory=dict)
    lr: float = 1e-4
    warmup: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    mode: str = "gen"
    head_mode: str = "shared"
    merged_vqa_prefix: bool = False
    log_every: int = 10
    eval_every: int = 0
    eval_examples: int = 200
    checkpoint: str = ""
    checkpoint_every: int = 0
    log: str = ""
    init: str = ""
    model: dict = field(default_factory=dict)

    def __post_init__(self):
        if isinstance(self.tasks, str):
            self.tasks = tuple(t.strip() for t in self.tasks.split(",") if t.strip())
        self.tasks = tuple(self.tasks)
        self.validate()

    def validate(self) -> None:
        if not 0 <= self.warmup < 1:
            raise ConfigError(f"warmup fraction must be in [0, 1), got {self.warmup}")
        if self.batch_size < 1 or any(int(b) < 1 for b in self.task_batch.values()):
            raise ConfigError("batch sizes must be >= 1")
        if self.steps < 0:
            raise ConfigError("steps must be >= 0")
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if self.mode not in MODES:
            raise ConfigError(f"mode must be one of {MODES}")
        if self.head_mode not in HEAD_MODES:
            raise ConfigError(f"head_mode must be one of {HEAD_MODES}")
        bad = [t for t in self.tasks if t not in PREFIXES]
        if bad:
            raise ConfigError(f"unknown task tag(s): {', '.join(bad)}")

    def batch_for(self, task: str) -> int:
        return int(self.task_batch.get(task, self.batch_size))

    def prefixes(self):
        return merged_vqa_prefixes() if self.merged_vqa_prefix else None

    # ------------------------------------------------------------------
    # INI round trip
    # ------------------------------------------------------------------
    _SECTIONS = {
        "data": ("data_dir", "split", "eval_split"),
        "train": ("tasks", "steps", "batch_size", "lr", "warmup", "beta1", "beta2", "eps", "weight_decay",
                  "seed", "mode", "head_mode", "merged_vqa_prefix", "log_every", "eval_every",
                  "eval_examples", "checkpoint", "checkpoint_every", "log", "init"),
    }
    _ALIASES = {("data", "dir"): "data_dir"}

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        d = dataclasses.asdict(self)
        cp["data"] = {"dir": self.data_dir, "split": self.split, "eval_split": self.eval_split}
        cp["train"] = {k: (", ".join(d[k]) if k == "tasks" else str(d[k])) for k in self._SECTIONS["train"]}
        cp["batch_size"] = {k: str(v) for k, v in sorted(self.task_batch.items())}
        cp["model"] = {k: (", ".join(v) if isinstance(v, (list, tuple)) else str(v))
                       for k, v in sorted(self.model.items())}
        from io import StringIO
        buf = StringIO()
        cp.write(buf)
        return buf.getvalue()

    @classmethod
    def from_ini(cls, text: str, env=None, base_dir: str = "") -> "TrainConfig":
        cp = configparser.ConfigParser()
        cp.read_string(text)
        env = os.environ if env is None else env
        for key, value in env.items():
            if not key.startswith(ENV_PREFIX):
                continue
            rest = key[len(ENV_PREFIX):].lower()
            for sec in ("data", "train", "batch_size", "model"):
                if rest.startswith(sec + "_"):
                    if not cp.has_section(sec):
                        cp.add_section(sec)
                    cp[sec][rest[len(sec) + 1:]] = value
                    break
        fields = {f.name: f for f in dataclasses.fields(cls)}
        kw = {}
        for sec in ("data", "train"):
            if not cp.has_section(sec):
                continue
            for key, raw in cp[sec].items():
                name = cls._ALIASES.get((sec, key), key)
                if name not in cls._SECTIONS.get(sec, ()) and name != "data_dir":
                    raise ConfigError(f"[{sec}] unknown key {key!r}")
                kw[name] = _coerce(fields[name], raw, f"[{sec}] {key}")
        if cp.has_section("batch_size"):
            kw["task_batch"] = {k: _int(v, f"[batch_size] {k}") for k, v in cp["batch_size"].items()}
        if cp.has_section("model"):
            kw["model"] = _model_overrides(cp["model"])
        if base_dir:
            for k in ("data_dir", "checkpoint", "log", "init"):
                if kw.get(k) and not os.path.isabs(kw[k]):
                    kw[k] = os.path.normpath(os.path.join(base_dir, kw[k]))
        return cls(**kw)

    @classmethod
    def load(cls, path, env=None) -> "TrainConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_ini(fh.read(), env=env, base_dir=os.path.dirname(os.path.abspath(path)))


def _int(raw, where):
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{where}: expected an integer, got {raw!r}") from None


def _coerce(f, raw: str, where: str):
    default = f.default if f.default is not dataclasses.MISSING else None
    try:
        if isinstance(default, bool):
            if raw.strip().lower() not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError
            return raw.strip().lower() in ("true", "1", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise ConfigError(f"{where}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw.strip()


def _model_overrides(section) -> dict:
    fields = {f.name: f for f in dataclasses.fields(ModelConfig)}
    out = {}
    for key, raw in section.items():
        if key not in fields:
            raise ConfigError(f"[model] unknown key {key!r}")
        if key == "head_tasks":
            out[key] = tuple(t.strip() for t in raw.split(",") if t.strip())
        else:
            out[key] = _coerce(fields[key], raw, f"[model] {key}")
    return out


# Desk-scale budgets: every learning rate is 10x the full-scale value.
TOY_PRESETS = {
    "pretrain": dict(steps=4000, lr=1e-3, batch_size=32, tasks=PRETRAIN_TASKS),
    "finetune": dict(steps=1000, lr=5e-4, batch_size=32),
}
# Full-scale (peak lr, batch size, epochs), kept for reference only.
FULL_SCALE_PRESETS = {
    "pretrain": (1e-4, 320, 30),
    "vcr_pretrain": (5e-5, 80, 20),
    "vqa": (5e-5, 320, 20),
    "gqa": (1e-5, 240, 20),
    "nlvr": (5e-5, 120, 20),
    "refexp": (5e-5, 360, 20),
    "vcr_qa": (5e-5, 16, 20),
    "caption": (3e-5, 320, 20),
    "translate": (5e-5, 120, 20),
}


def preset(kind: str, **overrides) -> TrainConfig:
    """TrainConfig from a toy preset ("pretrain" or "finetune") plus overrides."""
    if kind not in TOY_PRESETS:
        raise ConfigError(f"unknown preset {kind!r}; choose from {sorted(TOY_PRESETS)}")
    return TrainConfig(**{**TOY_PRESETS[kind], **overrides})


# --------------------------------------------------------------------------
# schedules
# --------------------------------------------------------------------------

def warmup_steps(total: int, warmup: float) -> int:
    return math.ceil(warmup * total)


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to the peak over ceil(warmup * steps), then constant."""
    if step < 0:
        raise ValueError("step must be >= 0")
    w = warmup_steps(cfg.steps, cfg.warmup)
    if w and step < w:
        return cfg.lr * step / w
    return cfg.lr


class ProportionalSchedule:
    """Draw each step's task with probability proportional to its corpus size."""

    def __init__(self, tasks, sizes, seed: int):
        self.tasks = list(tasks)
        w = np.asarray(sizes, dtype=np.float64)
        self.p = w / w.sum()
        self.rng = np.random.default_rng([seed, 101])

    def next(self, step: int) -> str:
        return self.tasks[int(self.rng.choice(len(self.tasks), p=self.p))]

    def state(self) -> dict:
        return {"rng": self.rng.bit_generator.state}

    def restore(self, st: dict) -> None:
        self.rng.bit_generator.state = st["rng"]


class RoundRobinSchedule:
    def __init__(self, tasks):
        if len(tasks) < 2:
            raise ConfigError("round-robin multi-task training needs at least 2 tasks")
        self.tasks = list(tasks)

    def next(self, step: int) -> str:
        return self.tasks[step % len(self.tasks)]

    def state(self) -> dict:
        return {}

    def restore(self, st: dict) -> None:
        pass


class Loader:
    """Cycles through a corpus in seeded per-epoch permutations."""

    def __init__(self, items, batch_size: int, seed: int, key: int):
        if not items:
            raise ConfigError("empty corpus")
        self.items, self.bs, self.seed, self.key = items, batch_size, seed, key
        self.epoch, self.cursor = 0, 0
        self._perm = self._make_perm()

    def _make_perm(self):
        return np.random.default_rng([self.seed, 202, self.key, self.epoch]).permutation(len(self.items))

    def next(self) -> list:
        out = []
        while len(out) < self.bs:
            if self.cursor >= len(self.items):
                self.epoch, self.cursor = self.epoch + 1, 0
                self._perm = self._make_perm()
            out.append(self.items[self._perm[self.cursor]])
            self.cursor += 1
        return out

    def state(self) -> list:
        return [self.epoch, self.cursor]

    def restore(self, st) -> None:
        self.epoch, self.cursor = int(st[0]), int(st[1])
        self._perm = self._make_perm()


# --------------------------------------------------------------------------
# trainer
# --------------------------------------------------------------------------

def vqa_targets(items, topk) -> np.ndarray:
    """Soft-score targets over the candidate answers for a batch."""
    from .evaldecode import vqa_score
    out = np.zeros((len(items), len(topk)))
    for i, it in enumerate(items):
        answers = it.example.aux.get("answers", {})
        for j, cand in enumerate(topk):
            out[i, j] = vqa_score(cand, answers)
    return out


def make_model(cfg: TrainConfig, dataset: Dataset, init: Checkpoint | None = None) -> VLModel:
    vocab = dataset.vocab
    if init is not None:
        if init.vocab and init.vocab != vocab.to_text():
            n_ck = int(init.config.get("vocab_size", -1))
            raise ConfigError(f"checkpoint vocabulary (size {n_ck}) does not match the dataset "
                              f"vocabulary (size {len(vocab)})")
        model = ckpt_mod.build_model(init)
        if model.cfg.head_mode == "per-task" and cfg.head_mode == "shared":
            raise ConfigError("head-mode mismatch: checkpoint has per-task heads, config asks for shared")
        return model
    kw = dict(cfg.model)
    kw.setdefault("masking", dataset.manifest.get("masking", "span-sentinel"))
    kw.setdefault("seed", cfg.seed)
    return VLModel(ModelConfig.for_vocab(vocab, **kw))


class Trainer:
    """Owns model, optimizer, data cursors and the step loop."""

    def __init__(self, cfg: TrainConfig, dataset: Dataset, model: VLModel, schedule: str = "proportional",
                 modes=None):
        self.cfg, self.data, self.model = cfg, dataset, model
        self.vocab = dataset.vocab
        self.modes = {t: (modes or {}).get(t, "gen") for t in cfg.tasks}
        if cfg.head_mode == "per-task":
            model.add_task_heads(cfg.tasks)
        if any(m == "disc" for t, m in self.modes.items() if t == "vqa"):
            k = len(dataset.topk)
            if model.cfg.vqa_candidates != k:
                model.add_vqa_head(k, seed=cfg.seed)
        self.items = {t: dataset.corpus(cfg.split, t, cfg.prefixes()) for t in cfg.tasks}
        self.scenes = dataset.scenes(cfg.split)
        self.loaders = {t: Loader(self.items[t], cfg.batch_for(t), cfg.seed, i)
                        for i, t in enumerate(cfg.tasks)}
        if schedule == "round-robin":
            self.schedule = RoundRobinSchedule(cfg.tasks)
        else:
            self.schedule = ProportionalSchedule(cfg.tasks, [len(self.items[t]) for t in cfg.tasks], cfg.seed)
        self.optimizer = AdamW(model.named_parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
                               eps=cfg.eps, weight_decay=cfg.weight_decay)
        self.step = 0
        self.task_steps = {t: 0 for t in cfg.tasks}
        self.best = {}
        self.records = []
        self.eval_fn = None
        self._names = set(dict(model.named_parameters()))

    # ------------------------------------------------------------------
    def loss_on(self, task: str, items):
        model = self.model
        batch = collate(items, self.scenes, model.cfg.decoder_start_id, model.cfg.n_regions)
        mode = self.modes[task]
        head_task = task if model.cfg.head_mode == "per-task" else None
        if mode == "disc" and task == "vqa":
            return model.discriminative_vqa_loss(batch, vqa_targets(items, self.data.topk)), "disc-vqa"
        if mode == "disc" and task in ("ground", "refexp"):
            targets = [it.example.aux["region"] for it in items]
            return model.region_scoring_loss(batch, targets), "disc-region"
        if mode == "disc":
            raise ConfigError(f"no discriminative baseline for task {task!r}")
        return model.generation_loss(batch, task=head_task), "gen"

    def train_step(self) -> dict:
        cfg = self.cfg
        task = self.schedule.next(self.step)
        items = self.loaders[task].next()
        lr = lr_at(self.step, cfg)
        loss, mode = self.loss_on(task, items)
        value = float(loss.item())
        if not np.isfinite(value):
            raise NonFiniteLossError(self.step, task, value)
        self.model.zero_grad()
        backward(loss)
        unused = self.model.head_parameter_names(task, mode)
        self.optimizer.step(lr=lr, active=self._names - unused)
        rec = {"step": self.step, "task": task, "loss": value, "lr": lr}
        self.step += 1
        self.task_steps[task] += 1
        return rec

    def run(self, steps: int | None = None) -> list:
        """Run until the global step reaches ``steps`` (default cfg.steps)."""
        cfg = self.cfg
        target = cfg.steps if steps is None else steps
        log_fh = open(cfg.log, "a", encoding="utf-8") if cfg.log else None
        try:
            while self.step < target:
                rec = self.train_step()
                if cfg.log_every and (rec["step"] % cfg.log_every == 0 or self.step == target):
                    self.records.append(rec)
                    if log_fh:
                        log_fh.write(json.dumps(rec) + "\n")
                if cfg.eval_every and self.step % cfg.eval_every == 0 and self.eval_fn is not None:
                    for row in self.eval_fn(self):
                        row = {"step": self.step, **row}
                        self.records.append(row)
                        if log_fh:
                            log_fh.write(json.dumps(row) + "\n")
                if cfg.checkpoint and cfg.checkpoint_every and self.step % cfg.checkpoint_every == 0:
                    self.checkpoint().save(cfg.checkpoint)
        finally:
            if log_fh:
                log_fh.close()
        if cfg.checkpoint:
            self.checkpoint().save(cfg.checkpoint)
        return self.records

    # ------------------------------------------------------------------
    def state(self) -> dict:
        return {"step": self.step, "task_steps": dict(self.task_steps), "schedule": self.schedule.state(),
                "loaders": {t: ld.state() for t, ld in self.loaders.items()}, "best": dict(self.best),
                "train_config": self.cfg.to_ini()}

    def checkpoint(self) -> Checkpoint:
        return ckpt_mod.from_model(self.model, self.vocab, self.state(), self.optimizer)

    def restore(self, ck: Checkpoint) -> None:
        """Resume data cursors, counters and optimizer moments from ``ck``."""
        st = ck.state
        self.step = int(st.get("step", 0))
        self.task_steps.update(st.get("task_steps", {}))
        self.schedule.restore(st.get("schedule", {}))
        for t, s in st.get("loaders", {}).items():
            if t in self.loaders:
                self.loaders[t].restore(s)
        self.best = dict(st.get("best", {}))
        ckpt_mod.restore_optimizer(ck, self.optimizer)


def held_out_loss(trainer: Trainer, split: str | None = None, n: int | None = None) -> list:
    """Mean generation loss per task on the first ``n`` held-out examples."""
    from .nn_core import no_grad
    split = split or trainer.cfg.eval_split
    n = n or trainer.cfg.eval_examples
    rows = []
    scenes = trainer.data.scenes(split)
    m = trainer.model
    with no_grad():
        for t in trainer.cfg.tasks:
            items = trainer.data.corpus(split, t, trainer.cfg.prefixes())[:n]
            total, count = 0.0, 0
            for i in range(0, len(items), 64):
                chunk = items[i:i + 64]
                b = collate(chunk, scenes, m.cfg.decoder_start_id, m.cfg.n_regions)
                head = t if m.cfg.head_mode == "per-task" else None
                total += float(m.generation_loss(b, task=head).item()) * len(chunk)
                count += len(chunk)
            rows.append({"task": t, "metric": "heldout_loss", "value": total / count, "split": split})
    return rows


def _load_init(cfg: TrainConfig, init):
    if init is None and cfg.init:
        init = Checkpoint.load(cfg.init)
    return init


def pretrain(cfg: TrainConfig, dataset: Dataset | None = None, init=None) -> Checkpoint:
    """Multi-task pretraining with proportional task mixing."""
    dataset = dataset or Dataset(cfg.data_dir)
    model = make_model(cfg, dataset, _load_init(cfg, init))
    tr = Trainer(cfg, dataset, model, "proportional")
    tr.eval_fn = held_out_loss
    tr.run()
    return tr.checkpoint()


def finetune(task: str, cfg: TrainConfig, init=None, dataset: Dataset | None = None) -> Checkpoint:
    """Single-task training; ``cfg.mode`` "disc" swaps in the discriminative loss."""
    if task not in PREFIXES:
        raise ConfigError(f"unknown task tag {task!r}")
    cfg = dataclasses.replace(cfg, tasks=(task,))
    dataset = dataset or Dataset(cfg.data_dir)
    model = make_model(cfg, dataset, _load_init(cfg, init))
    tr = Trainer(cfg, dataset, model, "proportional", modes={task: cfg.mode})
    from .evaldecode import evaluate_trainer
    tr.eval_fn = evaluate_trainer
    tr.run()
    return tr.checkpoint()


def multitask_finetune(tasks, cfg: TrainConfig, init=None, dataset: Dataset | None = None) -> Checkpoint:
    """Round-robin over ``tasks`` with one parameter set (optionally per-task heads)."""
    cfg = dataclasses.replace(cfg, tasks=tuple(tasks))
    dataset = dataset or Dataset(cfg.data_dir)
    model = make_model(cfg, dataset, _load_init(cfg, init))
    tr = Trainer(cfg, dataset, model, "round-robin")
    from .evaldecode import evaluate_trainer
    tr.eval_fn = evaluate_trainer
    tr.run()
    return tr.checkpoint()
