"""Run configuration: an INI file with sections, overridden by command-line flags.

Example::

    [data]
    dataset = mnist
    root = /data/mnist

    [problems]
    pairs = 1-7,0-1
    test_cap = 100

    [budgets]
    eps_inf = 0.3

    [run]
    methods = 1nn,normal,trades_recom
    seed = 0
    out = runs/mnist
"""

from __future__ import annotations

import configparser
import math
from dataclasses import dataclass, field
from pathlib import Path

from .attacks import AttackBudget, AttackConfig
from .dataset import (CIFAR10_CLASSES, FASHION_CLASSES, MNIST_CLASSES, LabeledSet, load_cifar10_bin,
                      load_dump, load_idx)
from .errors import ConfigurationError, DataError
from .trades import TradesConfig

# dataset -> (eps_inf, eps_l2, class names, N)
DATASET_DEFAULTS = {
    "mnist": (0.3, 8.4, MNIST_CLASSES, 784),
    "fashion": (0.3, 8.4, FASHION_CLASSES, 784),
    "cifar10": (8 / 255, 1.74, CIFAR10_CLASSES, 3072),
}
KNOWN_METHODS = ("1nn", "normal", "early_stop", "trades_best", "trades_recom", "trades_both")
IDX_NAMES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


@dataclass
class RunConfig:
    dataset: str = "mnist"
    root: str = ""
    train_files: tuple[str, ...] = ()
    test_files: tuple[str, ...] = ()
    pairs: str = "all"
    test_cap: int | None = 100
    train_cap: int | None = None
    train_eval_cap: int | None = 100
    eps_inf: float | None = None
    eps_l2: float | None = None
    methods: tuple[str, ...] = ("1nn",)
    seed: int = 0
    out: str = "out"
    attack: AttackConfig = field(default_factory=lambda: AttackConfig(steps=100, variant="apgd_ce"))
    epochs: int = 100
    lr: float = 0.01
    batch_size: int = 128
    trades_lambda: float = 6.0
    trades_eta1: float | None = None
    trades_eta2: float = 0.01
    trades_steps: int = 10
    trades_epochs: int = 20
    sweep_grid: dict = field(default_factory=lambda: {"lam": [1.0, 6.0], "eta2": [0.01, 0.05]})
    geometry_box: bool = False
    exact: bool = True
    minimal: bool = False
    splits: tuple[str, ...] = ("train", "test")
    hist_norm: str = "2"
    hist_examples: int = 20
    bench_repeats: int = 3
    figures: bool = False

    def __post_init__(self):
        if self.dataset not in (*DATASET_DEFAULTS, "dump"):
            raise ConfigurationError(f"unknown dataset {self.dataset!r}")
        unknown = [m for m in self.methods if m not in KNOWN_METHODS]
        if unknown:
            raise ConfigurationError(f"unknown method(s) {unknown}; choose from {list(KNOWN_METHODS)}")
        if not self.methods:
            raise ConfigurationError("the method list is empty")
        for name in ("eps_inf", "eps_l2"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise ConfigurationError(f"{name} must be positive")
        bad = [s for s in self.splits if s not in ("train", "test")]
        if bad:
            raise ConfigurationError(f"unknown split(s) {bad}")

    def budgets(self, n_features: int) -> tuple[AttackBudget, AttackBudget]:
        """(l-inf, l2) budgets; an unset l2 radius becomes sqrt(N) * eps_inf."""
        d_inf, d_l2, _, d_n = DATASET_DEFAULTS.get(self.dataset, (0.3, None, None, None))
        eps_inf = self.eps_inf if self.eps_inf is not None else d_inf
        if self.eps_l2 is not None:
            eps_l2 = self.eps_l2
        elif self.eps_inf is None and d_l2 is not None and n_features == d_n:
            eps_l2 = d_l2
        else:
            eps_l2 = math.sqrt(n_features) * eps_inf
        return AttackBudget(math.inf, eps_inf), AttackBudget(2, eps_l2)

    def trades_config(self, budget: AttackBudget) -> TradesConfig:
        return TradesConfig(eta1=self.trades_eta1 if self.trades_eta1 else budget.eps / 4,
                            eta2=self.trades_eta2, batch_size=self.batch_size,
                            inner_steps=self.trades_steps, lam=self.trades_lambda,
                            epochs=self.trades_epochs, budget=budget, seed=self.seed)

    def class_names(self):
        return DATASET_DEFAULTS[self.dataset][2] if self.dataset in DATASET_DEFAULTS else None


def _split_list(text):
    return tuple(t.strip() for t in text.split(",") if t.strip())


def _opt_int(text):
    return None if text.strip().lower() in ("", "none", "all") else int(text)


def _parse_grid(text):
    grid = {}
    for part in text.split(";"):
        if not part.strip():
            continue
        key, _, values = part.partition("=")
        grid[key.strip()] = [float(v) for v in values.split(",")]
    return grid


# (section, key) -> (RunConfig field, parser)
_FIELDS = {
    ("data", "dataset"): ("dataset", str),
    ("data", "root"): ("root", str),
    ("data", "train"): ("train_files", _split_list),
    ("data", "test"): ("test_files", _split_list),
    ("problems", "pairs"): ("pairs", str),
    ("problems", "test_cap"): ("test_cap", _opt_int),
    ("problems", "train_cap"): ("train_cap", _opt_int),
    ("problems", "train_eval_cap"): ("train_eval_cap", _opt_int),
    ("budgets", "eps_inf"): ("eps_inf", float),
    ("budgets", "eps_l2"): ("eps_l2", float),
    ("run", "methods"): ("methods", _split_list),
    ("run", "seed"): ("seed", int),
    ("run", "out"): ("out", str),
    ("run", "figures"): ("figures", lambda s: s.strip().lower() in ("1", "yes", "true", "on")),
    ("train", "epochs"): ("epochs", int),
    ("train", "lr"): ("lr", float),
    ("train", "batch_size"): ("batch_size", int),
    ("trades", "lambda"): ("trades_lambda", float),
    ("trades", "eta1"): ("trades_eta1", float),
    ("trades", "eta2"): ("trades_eta2", float),
    ("trades", "inner_steps"): ("trades_steps", int),
    ("trades", "epochs"): ("trades_epochs", int),
    ("trades", "sweep_grid"): ("sweep_grid", _parse_grid),
    ("certify", "box"): ("geometry_box", lambda s: s.strip().lower() in ("1", "yes", "true", "on")),
    ("certify", "exact"): ("exact", lambda s: s.strip().lower() in ("1", "yes", "true", "on")),
    ("certify", "splits"): ("splits", _split_list),
    ("certify", "minimal"): ("minimal", lambda s: s.strip().lower() in ("1", "yes", "true", "on")),
    ("hist", "norm"): ("hist_norm", str),
    ("hist", "examples"): ("hist_examples", int),
    ("bench", "repeats"): ("bench_repeats", int),
}
_ATTACK_KEYS = {"steps": int, "step_size": float, "restarts": int, "variant": str,
                "box": lambda s: s.strip().lower() in ("1", "yes", "true", "on")}


def load_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Read an INI file (optional) and apply ``overrides`` (flag values win)."""
    values, attack = {}, {}
    if path is not None:
        parser = configparser.ConfigParser()
        try:
            with open(path, encoding="utf-8") as f:
                parser.read_file(f)
        except FileNotFoundError as exc:
            raise ConfigurationError(f"config file not found: {path}") from exc
        except configparser.Error as exc:
            raise ConfigurationError(f"cannot parse {path}: {exc}") from exc
        for section in parser.sections():
            for key, raw in parser.items(section):
                if section == "attack":
                    if key not in _ATTACK_KEYS:
                        raise ConfigurationError(f"unknown key [attack] {key}")
                    try:
                        attack[key] = _ATTACK_KEYS[key](raw)
                    except ValueError as exc:
                        raise ConfigurationError(f"[attack] {key}: {exc}") from exc
                    continue
                if (section, key) not in _FIELDS:
                    raise ConfigurationError(f"unknown key [{section}] {key}")
                name, conv = _FIELDS[(section, key)]
                try:
                    values[name] = conv(raw)
                except ValueError as exc:
                    raise ConfigurationError(f"[{section}] {key}: {exc}") from exc
    if attack:
        box = attack.pop("box", True)
        attack.setdefault("variant", "apgd_ce")
        attack.setdefault("steps", 100)
        values["attack"] = AttackConfig(box_constrain=box, **attack)
    for k, v in (overrides or {}).items():
        if v is not None:
            values[k] = v
    if "attack" in values and "seed" in values:
        from dataclasses import replace
        values["attack"] = replace(values["attack"], seed=values["seed"])
    return RunConfig(**values)


def load_splits(cfg: RunConfig) -> tuple[LabeledSet, LabeledSet]:
    """Load (train, test) according to the configuration."""
    try:
        if cfg.dataset == "dump":
            if len(cfg.train_files) != 1 or len(cfg.test_files) != 1:
                raise ConfigurationError("a dump dataset needs one train and one test file")
            return load_dump(cfg.train_files[0]), load_dump(cfg.test_files[0])
        names = cfg.class_names()
        if cfg.dataset == "cifar10":
            train = cfg.train_files or tuple(str(Path(cfg.root, f"data_batch_{i}.bin")) for i in range(1, 6))
            test = cfg.test_files or (str(Path(cfg.root, "test_batch.bin")),)
            return load_cifar10_bin(train, names), load_cifar10_bin(test, names)
        out = []
        for split, files in (("train", cfg.train_files), ("test", cfg.test_files)):
            if not files:
                files = tuple(_find_idx(cfg.root, stem) for stem in IDX_NAMES[split])
            if len(files) != 2:
                raise ConfigurationError(f"{split}: give an images file and a labels file")
            out.append(load_idx(files[0], files[1], names))
        return out[0], out[1]
    except FileNotFoundError as exc:
        raise DataError(f"missing data file: {exc.filename}") from exc


def _find_idx(root, stem):
    # accept both "train-images-idx3-ubyte" and "train-images.idx3-ubyte", optionally gzipped
    base = Path(root)
    for name in (stem, stem.replace("-idx", ".idx")):
        for suffix in ("", ".gz"):
            p = base / (name + suffix)
            if p.exists():
                return str(p)
    raise DataError(f"no IDX file matching {stem!r} under {root or '.'}")
