"""Flat ``dotted.key = value`` run configuration.

Blank lines and ``#`` comments are ignored.  Every key must appear in
:data:`DEFAULTS`; its default value fixes the type the text is parsed into.
List-valued settings are comma-separated strings interpreted by the caller.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

from .core import InvalidInput

DEFAULTS: dict[str, object] = {
    "run.seed": 0,
    "run.threads": 1,
    "output.dir": "runs/default",
    "data.dir": "",
    # task
    "task.kind": "synonym",
    "task.v_src": 10,
    "task.v_tgt": 20,
    "task.t_min": 4,
    "task.t_max": 8,
    "task.n_pairs": 10000,
    "task.valid_frac": 0.1,
    "task.test_frac": 0.1,
    # model
    "model.d": 32,
    "model.h": 64,
    "model.max_len": 0,
    # training
    "train.strategy": "ce,bon:2,rl:traverse_ref",
    "train.steps": "3000,300,100",
    "train.batch_size": "32,32,16",
    "train.lr": "5e-3,1e-3,1e-3",
    "train.eval_every": 500,
    "train.eval_limit": 200,
    "train.resume_from": "",
    "train.resume_stage": 0,
    # reinforcement stage
    "rl.n_samples": 10,
    "rl.k": 5,
    "rl.reward": "rouge2",
    # evaluation
    "eval.checkpoint": "",
    "eval.split": "test",
    "eval.metrics": "gleu,bleu,rouge2",
    # estimator bench
    "bench.methods": "base,step,topk,traverse_ref",
    "bench.V": 8,
    "bench.T": 4,
    "bench.peak": 3.0,
    "bench.instance_seed": 0,
    "bench.k": 4,
    "bench.n_samples": 10,
    "bench.runs": 10000,
    "bench.reward": "rouge2",
    # complexity bench
    "complexity.trials": 20,
    "complexity.max_V": 12,
    "complexity.max_T": 8,
    "complexity.max_n": 10,
    # correlation
    "correlate.checkpoint": "",
    "correlate.split": "valid",
    "correlate.n": 500,
    "correlate.ngram": 2,
    "correlate.ce_steps": 800,
    "correlate.batch_size": 32,
    "correlate.lr": 5e-3,
}

PATH_KEYS = ("output.dir", "data.dir", "train.resume_from", "eval.checkpoint", "correlate.checkpoint")


def _coerce(key: str, raw: str, default: object) -> object:
    try:
        if isinstance(default, bool):
            if raw.lower() in ("1", "true", "yes", "on"):
                return True
            if raw.lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise InvalidInput(f"config key {key!r}: cannot parse {raw!r} as {type(default).__name__}") from None
    return raw


@dataclass
class RunConfig:
    values: dict[str, object] = field(default_factory=lambda: dict(DEFAULTS))
    text: str = ""
    source: Path | None = None

    @classmethod
    def parse(cls, text: str, source: Path | None = None) -> "RunConfig":
        values = dict(DEFAULTS)
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or not key:
                raise InvalidInput(f"config line {lineno}: expected 'key = value'")
            if key not in DEFAULTS:
                raise InvalidInput(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(key, raw, DEFAULTS[key])
        cfg = cls(values=values, text=text, source=source)
        cfg.resolve_paths()
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise InvalidInput(f"config file not found: {path}")
        return cls.parse(path.read_text(encoding="utf-8"), source=path)

    def resolve_paths(self) -> None:
        for key in PATH_KEYS:
            if self.values[key]:
                self.values[key] = str(Path(str(self.values[key])).expanduser().resolve())

    def __getitem__(self, key: str):
        return self.values[key]

    def set(self, key: str, value: object) -> None:
        if key not in DEFAULTS:
            raise InvalidInput(f"unknown key {key!r}")
        self.values[key] = value

    def list(self, key: str, kind=str) -> list:
        return [kind(x.strip()) for x in str(self.values[key]).split(",") if x.strip()]
