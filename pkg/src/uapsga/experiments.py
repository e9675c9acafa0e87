"""Config-driven pipelines: train surrogates, attack, evaluate and sweep.

A config is a flat ``key=value`` text file::

    # digits, white-box cnn-small
    data.images = digits-images-idx3-ubyte.gz
    data.labels = digits-labels-idx1-ubyte.gz
    split.eval = 2000
    attack.variant = spgd, sga
    attack.epsilon = 10/255
    seeds = 0, 1, 2

Relative paths resolve against the config file's directory. Every run writes a
``<command>.manifest.json`` next to its artifacts and refuses to overwrite an
existing one unless forced.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import re
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import attacks, diagnostics, models
from .attacks import AttackConfig
from .data import Dataset, load_idx, make_splits, write_split_manifest
from .errors import ConfigError, FormatError
from .losses import LossSpec

WORKERS_ENV = "UAPSGA_WORKERS"
SWEEP_AXES = ("inner-batch", "K", "n-train-samples", "variant")
SWEEP_HEADER = ["axis", "value", "variant", "seed", "inner_iters", "outer_sign_count",
                "mean_cosine", "fr_white_box", "fr_transfer"]


# -- value parsers -------------------------------------------------------------


def _number(text: str) -> float:
    """Decimal or ``a/b`` fraction, normalised to a float."""
    try:
        return float(Fraction(text.replace(" ", "")))
    except (ValueError, ZeroDivisionError):
        raise ValueError(f"not a number: {text!r}") from None


def _int(text: str) -> int:
    value = _number(text)
    if value != int(value):
        raise ValueError(f"not an integer: {text!r}")
    return int(value)


def _optional_int(text: str):
    return None if text.lower() in ("", "none", "auto") else _int(text)


def _str(text: str) -> str:
    return text


def _list(item):
    def parse(text: str):
        parts = [p.strip() for p in text.split(",")]
        if not text.strip() or any(not p for p in parts):
            raise ValueError(f"malformed list: {text!r}")
        return tuple(item(p) for p in parts)
    return parse


# key -> (parser, default); ``None`` default means "must be given when used"
SCHEMA: dict[str, tuple] = {
    "data.images": (_str, None),
    "data.labels": (_str, None),
    "data.num_classes": (_optional_int, None),
    "split.train": (_optional_int, None),
    "split.eval": (_int, 2000),
    "split.attack": (_int, 500),
    "split.seed": (_int, 0),
    "models.dir": (_str, "."),
    "train.archs": (_list(_str), ("cnn-small", "mlp-2", "cnn-wide")),
    "train.epochs": (_int, 6),
    "train.learning_rate": (_number, 0.05),
    "train.batch_size": (_int, 32),
    "train.seed": (_int, 0),
    "attack.variant": (_list(_str), ("sga",)),
    "attack.surrogate": (_list(_str), ("cnn-small",)),
    "attack.momentum": (_str, "none"),
    "attack.momentum_placement": (_str, "outer"),
    "attack.decay": (_number, 0.9),
    "attack.epsilon": (_number, 10 / 255),
    "attack.alpha": (_number, 1 / 255),
    "attack.epochs": (_int, 20),
    "attack.large_batch": (_int, 250),
    "attack.small_batch": (_int, 10),
    "attack.traversals": (_int, 4),
    "attack.inner_iters": (_optional_int, None),
    "loss.kind": (_str, "clipped-ce"),
    "loss.beta": (_number, 9.0),
    "eval.models": (_list(_str), ("cnn-small", "mlp-2", "cnn-wide")),
    "eval.uap": (_str, None),
    "eval.white_box": (_list(_str), ()),
    "sweep.axis": (_str, "inner-batch"),
    "sweep.values": (_list(_str), ()),
    "seeds": (_list(_int), (0,)),
    "output.dir": (_str, "runs"),
}
_WIDTH_KEY = re.compile(r"^model\.([a-z0-9-]+)\.widths$")


def _schema_for(key: str):
    if key in SCHEMA:
        return SCHEMA[key]
    m = _WIDTH_KEY.match(key)
    if m and m.group(1) in models.ARCHITECTURES:
        return _list(_int), None
    return None


@dataclass(frozen=True)
class ExperimentConfig:
    """Parsed config values plus the directory relative paths resolve against."""

    values: dict = field(default_factory=dict)
    base_dir: Path = Path(".")

    def __getitem__(self, key: str):
        if key in self.values:
            return self.values[key]
        spec = _schema_for(key)
        if spec is None:
            raise KeyError(key)
        if spec[1] is None and key in ("data.images", "data.labels", "eval.uap"):
            raise ConfigError(f"missing required key {key!r}", key=key)
        return spec[1]

    def path(self, key: str) -> Path:
        p = Path(self[key])
        return p if p.is_absolute() else self.base_dir / p

    @property
    def out_dir(self) -> Path:
        return self.path("output.dir")

    @property
    def hash(self) -> str:
        """Digest of the normalised values; the output directory is left out."""
        lines = [f"{k}={self.values[k]!r}" for k in sorted(self.values) if k != "output.dir"]
        return hashlib.sha256("\n".join(lines).encode()).hexdigest()[:16]

    def with_overrides(self, *, seed: int | None = None, out: str | None = None) -> "ExperimentConfig":
        values = dict(self.values)
        if seed is not None:
            values["seeds"] = (seed,)
            values["train.seed"] = seed
        if out is not None:
            values["output.dir"] = str(Path(out).resolve())
        return ExperimentConfig(values, self.base_dir)

    def widths(self, arch: str):
        return self.values.get(f"model.{arch}.widths")

    def attack_config(self, variant: str, seed: int, **overrides) -> AttackConfig:
        fields = dict(
            variant=variant, momentum=self["attack.momentum"], decay=self["attack.decay"],
            epsilon=self["attack.epsilon"], alpha=self["attack.alpha"], epochs=self["attack.epochs"],
            large_batch=self["attack.large_batch"], small_batch=self["attack.small_batch"],
            traversals=self["attack.traversals"], inner_iters=self["attack.inner_iters"],
            momentum_placement=self["attack.momentum_placement"], seed=seed,
            run_id=f"{variant}_s{seed}",
        )
        fields.update(overrides)
        return AttackConfig(**fields)


def parse_config(text: str, base_dir=".") -> ExperimentConfig:
    values = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"expected key=value, got {raw.strip()!r}", line=lineno)
        key, value = (s.strip() for s in line.split("=", 1))
        spec = _schema_for(key)
        if spec is None:
            raise ConfigError(f"unknown key {key!r}", line=lineno, key=key)
        if key in values:
            raise ConfigError(f"duplicate key {key!r}", line=lineno, key=key)
        try:
            values[key] = spec[0](value)
        except ValueError as exc:
            raise ConfigError(f"bad value for {key!r}: {exc}", line=lineno, key=key) from None
    return ExperimentConfig(values, Path(base_dir))


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    return parse_config(text, path.parent)


# -- manifests -----------------------------------------------------------------


@dataclass
class RunManifest:
    command: str
    config_hash: str
    artifacts: list[str] = field(default_factory=list)
    runs: list[dict] = field(default_factory=list)
    wall_time: float = 0.0
    created: float = 0.0

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def read(cls, path) -> "RunManifest":
        return cls(**json.loads(Path(path).read_text()))


def manifest_path(out_dir, command: str) -> Path:
    return Path(out_dir) / f"{command}.manifest.json"


def _prepare_out(cfg: ExperimentConfig, command: str, force: bool) -> Path:
    out = cfg.out_dir
    existing = manifest_path(out, command)
    if existing.exists() and not force:
        try:
            old = RunManifest.read(existing).config_hash
        except (ValueError, TypeError):
            old = "unreadable"
        same = "same" if old == cfg.hash else "different"
        raise ConfigError(f"{existing} already records a {command} run ({same} config hash {old}); "
                          "pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _verify(out: Path, artifact: str) -> None:
    path = out / artifact
    if not path.exists():
        raise FormatError("manifest artifact missing", path)
    if path.suffix == ".uapd":
        attacks.load_uap(path)
    elif path.suffix == ".uapw":
        models.load(path)


def _finish(out: Path, manifest: RunManifest, started: float) -> RunManifest:
    for artifact in manifest.artifacts:
        _verify(out, artifact)
    manifest.wall_time = round(time.perf_counter() - started, 3)
    manifest.created = round(time.time(), 3)
    manifest_path(out, manifest.command).write_text(manifest.to_json())
    return manifest


# -- shared plumbing -----------------------------------------------------------


def _check_paths(cfg: ExperimentConfig, keys) -> None:
    for key in keys:
        p = cfg.path(key)
        if not p.exists():
            raise ConfigError(f"{key} points at a missing path: {p}", key=key)


def load_dataset(cfg: ExperimentConfig) -> Dataset:
    return load_idx(cfg.path("data.images"), cfg.path("data.labels"), cfg["data.num_classes"])


def dataset_splits(cfg: ExperimentConfig, ds: Dataset):
    """``(pool, eval)``: the training pool and the held-out evaluation set."""
    n_eval = cfg["split.eval"]
    n_train = cfg["split.train"]
    if n_train is None:
        n_train = len(ds) - n_eval
    pool, held_out = make_splits(ds, n_train, n_eval, seed=cfg["split.seed"])
    return pool, held_out


def attack_indices(pool_set: Dataset, n_attack: int, seed: int) -> np.ndarray:
    """Class-stratified attack samples drawn from the training pool for one run seed."""
    return make_splits(pool_set, n_attack, 0, seed=seed)[0]


def weights_path(cfg: ExperimentConfig, arch: str) -> Path:
    return cfg.path("models.dir") / f"{arch}.uapw"


def load_models(cfg: ExperimentConfig, ids) -> dict[str, models.Network]:
    nets = {}
    for arch in ids:
        path = weights_path(cfg, arch)
        if not path.exists():
            raise ConfigError(f"no weights for {arch!r} at {path}; run train first")
        nets[arch] = models.load(path)
    return nets


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ConfigError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(1, n)


def _map(fn, jobs):
    """Run independent jobs, in worker processes when the environment asks for them."""
    n = min(_workers(), len(jobs))
    if n <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=n) as pool:
        return list(pool.map(fn, jobs))


# -- train -----------------------------------------------------------------------


def _train_job(job):
    cfg, arch = job
    ds = load_dataset(cfg)
    pool, held_out = dataset_splits(cfg, ds)
    seed = cfg["train.seed"]
    net = models.build(arch, ds.image_shape, ds.num_classes, seed=seed, widths=cfg.widths(arch))
    report = models.train(net, ds.subset(pool), epochs=cfg["train.epochs"],
                          learning_rate=cfg["train.learning_rate"], batch_size=cfg["train.batch_size"],
                          seed=seed, eval_set=ds.subset(held_out))
    models.save(net, cfg.out_dir / f"{arch}.uapw")
    return {"arch": arch, "seed": seed, "train_accuracy": report.final_train_accuracy,
            "eval_accuracy": report.final_eval_accuracy}


def cmd_train(cfg: ExperimentConfig, force: bool = False) -> RunManifest:
    """Train every configured architecture and save its weights into the output directory."""
    started = time.perf_counter()
    _check_paths(cfg, ("data.images", "data.labels"))
    for arch in cfg["train.archs"]:
        if arch not in models.ARCHITECTURES:
            raise ConfigError(f"unknown architecture {arch!r}", key="train.archs")
    ds = load_dataset(cfg)
    pool, held_out = dataset_splits(cfg, ds)
    out = _prepare_out(cfg, "train", force)
    write_split_manifest(out / "splits.csv", {"train": pool, "eval": held_out})
    runs = _map(_train_job, [(cfg, arch) for arch in cfg["train.archs"]])
    with open(out / "train.csv", "w") as fh:
        fh.write("arch,seed,train_acc,eval_acc\n")
        for r in runs:
            fh.write(f"{r['arch']},{r['seed']},{r['train_accuracy']!r},{r['eval_accuracy']!r}\n")
    artifacts = ["splits.csv", "train.csv"] + [f"{r['arch']}.uapw" for r in runs]
    return _finish(out, RunManifest("train", cfg.hash, artifacts, runs), started)


# -- attack ----------------------------------------------------------------------


def _loss_spec(cfg: ExperimentConfig, nets) -> LossSpec:
    return LossSpec(tuple(nets[a] for a in cfg["attack.surrogate"]), kind=cfg["loss.kind"], beta=cfg["loss.beta"])


def _run_one(cfg: ExperimentConfig, attack_cfg: AttackConfig, n_attack: int, tag: str):
    """Attack, save δ and metrics, evaluate on every configured model. Returns a summary row."""
    ids = list(dict.fromkeys(list(cfg["attack.surrogate"]) + list(cfg["eval.models"])))
    nets = load_models(cfg, ids)
    ds = load_dataset(cfg)
    pool, held_out = dataset_splits(cfg, ds)
    pool_set, eval_set = ds.subset(pool), ds.subset(held_out)
    attack_set = pool_set.subset(attack_indices(pool_set, n_attack, attack_cfg.seed))
    result = attacks.run_attack(attack_cfg, attack_set, _loss_spec(cfg, nets), record=True)

    out = cfg.out_dir
    names = {k: f"{k}_{tag}" for k in ("uap", "metrics", "eval")}
    attacks.save_uap(result.state, out / f"{names['uap']}.uapd")
    diagnostics.write_metrics_csv(out / f"{names['metrics']}.csv", result.metrics)
    reports = [diagnostics.fooling_ratio(nets[m], eval_set, result.delta, model_id=m) for m in cfg["eval.models"]]
    white_box = set(cfg["attack.surrogate"])
    diagnostics.write_eval_csv(out / f"{names['eval']}.csv", reports, white_box=white_box)

    cosines = [m.cosine_sim for m in result.metrics if m.cosine_sim is not None]
    transfer = [r.fooling_ratio for r in reports if r.model_id not in white_box]
    white = [r.fooling_ratio for r in reports if r.model_id in white_box]
    return {
        "variant": attack_cfg.variant,
        "seed": attack_cfg.seed,
        "inner_iters": attack_cfg.inner_iterations if attack_cfg.variant != "spgd" else 0,
        "fooling_ratios": {r.model_id: r.fooling_ratio for r in reports},
        "fr_white_box": float(np.mean(white)) if white else None,
        "fr_transfer": float(np.mean(transfer)) if transfer else None,
        "mean_cosine": float(np.mean(cosines)) if cosines else None,
        "outer_sign_count": result.outer_sign_count,
        "artifacts": [f"{names['uap']}.uapd", f"{names['metrics']}.csv", f"{names['eval']}.csv"],
    }


def _attack_job(job):
    cfg, variant, seed = job
    return _run_one(cfg, cfg.attack_config(variant, seed), cfg["split.attack"], f"{variant}_s{seed}")


def _validate_attack(cfg: ExperimentConfig) -> None:
    _check_paths(cfg, ("data.images", "data.labels", "models.dir"))
    for v in cfg["attack.variant"]:
        cfg.attack_config(v, 0)
    ids = list(cfg["attack.surrogate"]) + list(cfg["eval.models"])
    nets = load_models(cfg, dict.fromkeys(ids))
    _loss_spec(cfg, nets)


def cmd_attack(cfg: ExperimentConfig, force: bool = False) -> RunManifest:
    """Every configured variant × seed against the surrogate(s); one δ, metrics CSV and eval CSV per run."""
    started = time.perf_counter()
    _validate_attack(cfg)
    out = _prepare_out(cfg, "attack", force)
    jobs = [(cfg, v, s) for v in cfg["attack.variant"] for s in cfg["seeds"]]
    runs = _map(_attack_job, jobs)
    artifacts = [a for r in runs for a in r["artifacts"]]
    return _finish(out, RunManifest("attack", cfg.hash, artifacts, runs), started)


# -- eval ------------------------------------------------------------------------


def cmd_eval(cfg: ExperimentConfig, force: bool = False) -> RunManifest:
    """Fooling ratio of a saved δ on each configured model over the held-out split."""
    started = time.perf_counter()
    _check_paths(cfg, ("data.images", "data.labels", "models.dir", "eval.uap"))
    state = attacks.load_uap(cfg.path("eval.uap"))
    nets = load_models(cfg, cfg["eval.models"])
    ds = load_dataset(cfg)
    _, held_out = dataset_splits(cfg, ds)
    eval_set = ds.subset(held_out)
    out = _prepare_out(cfg, "eval", force)
    reports = [diagnostics.fooling_ratio(net, eval_set, state.delta, model_id=m) for m, net in nets.items()]
    white_box = cfg["eval.white_box"] or cfg["attack.surrogate"]
    diagnostics.write_eval_csv(out / "eval.csv", reports, white_box=set(white_box))
    runs = [{"model": r.model_id, "fooling_ratio": r.fooling_ratio, "n": r.n_eval} for r in reports]
    return _finish(out, RunManifest("eval", cfg.hash, ["eval.csv"], runs), started)


# -- sweep -----------------------------------------------------------------------


def sweep_grid(cfg: ExperimentConfig):
    """``(value, attack-config overrides, attack sample count)`` per grid point."""
    axis, values = cfg["sweep.axis"], cfg["sweep.values"]
    if axis not in SWEEP_AXES:
        raise ConfigError(f"sweep.axis must be one of {SWEEP_AXES}, got {axis!r}", key="sweep.axis")
    if not values:
        raise ConfigError("empty sweep grid", key="sweep.values")
    variant = cfg["attack.variant"][0]
    points = []
    for raw in values:
        try:
            if axis == "inner-batch":
                sb = _int(raw)
                point = ({"variant": "spgd"} if sb == 0 else {"variant": variant if variant != "spgd" else "sga",
                                                              "small_batch": sb})
                points.append((sb, point, cfg["split.attack"]))
            elif axis == "K":
                points.append((_int(raw), {"variant": variant, "traversals": _int(raw)}, cfg["split.attack"]))
            elif axis == "n-train-samples":
                points.append((_int(raw), {"variant": variant}, _int(raw)))
            else:
                points.append((raw, {"variant": raw}, cfg["split.attack"]))
        except ValueError as exc:
            raise ConfigError(f"bad sweep value: {exc}", key="sweep.values") from None
    for _, overrides, _ in points:
        cfg.attack_config(overrides["variant"], 0, **{k: v for k, v in overrides.items() if k != "variant"})
    return points


def _sweep_job(job):
    cfg, value, overrides, n_attack, seed = job
    overrides = dict(overrides)
    variant = overrides.pop("variant")
    tag = f"{cfg['sweep.axis']}-{value}_{variant}_s{seed}"
    attack_cfg = cfg.attack_config(variant, seed, run_id=tag, **overrides)
    row = _run_one(cfg, attack_cfg, n_attack, tag)
    row["value"] = value
    return row


def cmd_sweep(cfg: ExperimentConfig, force: bool = False) -> RunManifest:
    """One run per grid point × seed, consolidated into ``sweep.csv``."""
    started = time.perf_counter()
    points = sweep_grid(cfg)
    _validate_attack(cfg)
    out = _prepare_out(cfg, "sweep", force)
    jobs = [(cfg, value, overrides, n, seed) for value, overrides, n in points for seed in cfg["seeds"]]
    runs = _map(_sweep_job, jobs)
    with open(out / "sweep.csv", "w") as fh:
        fh.write(",".join(SWEEP_HEADER) + "\n")
        for r in runs:
            cells = [cfg["sweep.axis"], r["value"], r["variant"], r["seed"], r["inner_iters"],
                     r["outer_sign_count"], r["mean_cosine"], r["fr_white_box"], r["fr_transfer"]]
            fh.write(",".join("" if c is None else repr(c) if isinstance(c, float) else str(c) for c in cells) + "\n")
    artifacts = ["sweep.csv"] + [a for r in runs for a in r["artifacts"]]
    return _finish(out, RunManifest("sweep", cfg.hash, artifacts, runs), started)


# -- demo ------------------------------------------------------------------------


def cmd_demo_vanishing(out_dir=None) -> diagnostics.VanishingReport:
    """The two-gradient comparison; written to ``vanishing.csv`` when an output dir is given."""
    report = diagnostics.vanishing_demo()
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        report.write_csv(Path(out_dir) / "vanishing.csv")
    return report

