"""Synthetic parallel corpora: copy, reverse and two-mode synonym translation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from ..core import InvalidInput, make_rng

TASK_KINDS = ("copy", "reverse", "synonym")

Pair = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class TaskSpec:
    kind: str = "copy"
    v_src: int = 20
    v_tgt: int = 20
    t_min: int = 4
    t_max: int = 8
    n_pairs: int = 5000
    seed: int = 0
    valid_frac: float = 0.1
    test_frac: float = 0.1

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise InvalidInput(f"unknown task {self.kind!r}; valid: {', '.join(TASK_KINDS)}")
        if self.v_src < 2 or self.v_tgt < 2:
            raise InvalidInput("vocabularies need at least 2 tokens")
        if self.kind in ("copy", "reverse") and self.v_src != self.v_tgt:
            raise InvalidInput(f"{self.kind} task needs v_src == v_tgt")
        if self.kind == "synonym" and self.v_tgt < self.v_src:
            raise InvalidInput("synonym task needs v_tgt >= v_src")
        if not 1 <= self.t_min <= self.t_max:
            raise InvalidInput("need 1 <= t_min <= t_max")
        n_test = int(round(self.n_pairs * self.test_frac))
        n_valid = int(round(self.n_pairs * self.valid_frac))
        if min(n_test, n_valid, self.n_pairs - n_test - n_valid) < 1:
            raise InvalidInput("every split must be non-empty")


@dataclass
class Corpus:
    spec: TaskSpec
    train: list[Pair]
    valid: list[Pair]
    test: list[Pair]
    # synonym task: modes[m][s] is the target for source token s under mode m
    modes: np.ndarray | None = field(default=None, repr=False)

    def split(self, name: str) -> list[Pair]:
        if name not in ("train", "valid", "test"):
            raise InvalidInput(f"unknown split {name!r}")
        return getattr(self, name)

    @property
    def max_len(self) -> int:
        return self.spec.t_max


def synonym_modes(spec: TaskSpec) -> np.ndarray:
    """Two injective source->target maps, disjoint when ``v_tgt >= 2 * v_src``."""
    perm = make_rng(spec.seed, 1).permutation(spec.v_tgt)
    s = np.arange(spec.v_src)
    return np.stack([perm[s], perm[(s + spec.v_src) % spec.v_tgt]])


def generate_corpus(spec: TaskSpec) -> Corpus:
    """Deterministic corpus with distinct source sentences, shuffled into splits."""
    rng = make_rng(spec.seed, 0)
    modes = synonym_modes(spec) if spec.kind == "synonym" else None
    seen: set[tuple[int, ...]] = set()
    pairs: list[Pair] = []
    attempts = 0
    while len(pairs) < spec.n_pairs:
        attempts += 1
        if attempts > 50 * spec.n_pairs:
            raise InvalidInput("cannot draw enough distinct source sentences for this task")
        T = int(rng.integers(spec.t_min, spec.t_max + 1))
        src = rng.integers(0, spec.v_src, size=T)
        key = tuple(src.tolist())
        if key in seen:
            continue
        seen.add(key)
        if spec.kind == "copy":
            ref = src.copy()
        elif spec.kind == "reverse":
            ref = src[::-1].copy()
        else:
            ref = modes[int(rng.integers(0, 2))][src]
        pairs.append((src.astype(np.int64), ref.astype(np.int64)))
    n_test = int(round(spec.n_pairs * spec.test_frac))
    n_valid = int(round(spec.n_pairs * spec.valid_frac))
    n_train = spec.n_pairs - n_test - n_valid
    return Corpus(spec, pairs[:n_train], pairs[n_train:n_train + n_valid], pairs[n_train + n_valid:], modes)


SPLITS = ("train", "valid", "test")


def write_corpus(corpus: Corpus, out_dir: str | Path) -> list[Path]:
    """One ``<split>.tsv`` per split plus a ``corpus.json`` header."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name in SPLITS:
        path = out / f"{name}.tsv"
        lines = [" ".join(map(str, s)) + "\t" + " ".join(map(str, r)) + "\n" for s, r in corpus.split(name)]
        path.write_text("".join(lines), encoding="utf-8")
        written.append(path)
    header = {"task": asdict(corpus.spec), "v_src": corpus.spec.v_src, "v_tgt": corpus.spec.v_tgt,
              "kind": corpus.spec.kind, "seed": corpus.spec.seed,
              "sizes": {name: len(corpus.split(name)) for name in SPLITS}}
    hpath = out / "corpus.json"
    hpath.write_text(json.dumps(header, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(hpath)
    return written


def read_corpus(in_dir: str | Path) -> Corpus:
    src_dir = Path(in_dir)
    header = json.loads((src_dir / "corpus.json").read_text(encoding="utf-8"))
    spec = TaskSpec(**header["task"])
    splits = {}
    for name in SPLITS:
        pairs = []
        for line in (src_dir / f"{name}.tsv").read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            s, r = line.split("\t")
            pairs.append((np.array(s.split(), dtype=np.int64), np.array(r.split(), dtype=np.int64)))
        splits[name] = pairs
    modes = synonym_modes(spec) if spec.kind == "synonym" else None
    return Corpus(spec, modes=modes, **splits)
