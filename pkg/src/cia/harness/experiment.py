"""Attack campaigns: config parsing, crafting, 8-bit round trip, evaluation, CSV."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .. import attack, defenses, netlib
from ..prng import SplitMix64, derive_seed
from .dataset import Dataset, load_dataset, quantize8
from .imageio import read_ppm, write_ppm

REPORT_HEADER = ("model", "defense", "delta_int", "metric", "value", "n")
TARGET_POLICIES = ("seeded_random_excluding_true",)


class ConfigError(ValueError):
    """Malformed or inconsistent experiment config."""


class ModelFileMissing(FileNotFoundError):
    pass


class QuantizationGuaranteeError(AssertionError):
    """An 8-bit adversarial image strayed further than delta_int from its original."""


# ---------------------------------------------------------------- config


@dataclass(frozen=True)
class ModelEntry:
    name: str
    path: str
    role: str = "attacked"
    defense: str = "none"


@dataclass(frozen=True)
class AttackSection:
    mode: str = "targeted"
    iterations: int = 20
    lr: float = 0.2
    beta1: float = 0.1
    beta2: float = 0.6
    eps: float = 1e-8
    squash: str = "tanh"
    composition: str = "single"
    hybrid_weights: tuple[float, float] = (1.0, 1.0)
    weights: dict | None = None


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: str
    models: tuple[ModelEntry, ...]
    attack: AttackSection = AttackSection()
    delta_int: tuple[int, ...] = (16,)
    target_policy: str = "seeded_random_excluding_true"
    eval_defenses: tuple[str, ...] = ("none",)
    n_samples: int = 200
    seed: int = 1
    images_dir: str | None = None
    report: str | None = None
    batch_size: int = 100
    base_dir: str = field(default=".", compare=False)

    def resolve(self, p: str) -> Path:
        path = Path(p)
        return path if path.is_absolute() else Path(self.base_dir) / path

    @property
    def attacked(self) -> list[ModelEntry]:
        return [m for m in self.models if m.role == "attacked"]


def _strict(section: dict, allowed, where: str) -> None:
    unknown = set(section) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {where}: {sorted(unknown)}")


def parse_defense(name: str):
    """'none' | 'smoothing[:k]' | 'jpeg_approx[:luma,chroma]' | 'jpeg_codec:Q' -> spec or None."""
    kind, _, arg = name.partition(":")
    try:
        if kind == "none" and not arg:
            return None
        if kind == "smoothing":
            return defenses.SmoothingSpec(int(arg)) if arg else defenses.SmoothingSpec()
        if kind == "jpeg_approx":
            if arg:
                luma, chroma = (int(a) for a in arg.split(","))
                return defenses.JpegApproxSpec(luma, chroma)
            return defenses.JpegApproxSpec()
        if kind == "jpeg_codec":
            return defenses.JpegCodecSpec(int(arg))
    except ValueError as e:
        raise ConfigError(f"bad defense {name!r}: {e}") from None
    raise ConfigError(f"unknown defense {name!r}")


def config_from_dict(d: dict, base_dir: str = ".") -> ExperimentConfig:
    _strict(d, [f for f in ExperimentConfig.__dataclass_fields__ if f != "base_dir"], "config")
    for key in ("dataset", "models"):
        if key not in d:
            raise ConfigError(f"config is missing {key!r}")
    models = []
    for i, m in enumerate(d["models"]):
        _strict(m, ModelEntry.__dataclass_fields__, f"models[{i}]")
        entry = ModelEntry(**m)
        if entry.role not in ("attacked", "holdout"):
            raise ConfigError(f"model {entry.name!r}: role must be 'attacked' or 'holdout'")
        if entry.defense not in ("none", "smoothing", "jpeg_approx"):
            raise ConfigError(f"model {entry.name!r}: defense must be none, smoothing or jpeg_approx")
        models.append(entry)
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ConfigError("model names must be unique")
    a = dict(d.get("attack", {}))
    _strict(a, AttackSection.__dataclass_fields__, "attack")
    if "hybrid_weights" in a:
        a["hybrid_weights"] = tuple(float(w) for w in a["hybrid_weights"])
    section = AttackSection(**a)
    deltas = d.get("delta_int", 16)
    deltas = tuple(int(v) for v in (deltas if isinstance(deltas, list) else [deltas]))
    if any(v < 0 or v > 255 for v in deltas):
        raise ConfigError("delta_int values must lie in [0, 255]")
    rest = {k: d[k] for k in ("target_policy", "n_samples", "seed", "images_dir", "report", "batch_size") if k in d}
    cfg = ExperimentConfig(
        dataset=d["dataset"],
        models=tuple(models),
        attack=section,
        delta_int=deltas,
        eval_defenses=tuple(d.get("eval_defenses", ["none"])),
        base_dir=base_dir,
        **rest,
    )
    validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return config_from_dict(d, str(path.parent))


def validate(cfg: ExperimentConfig) -> None:
    if not cfg.attacked:
        raise ConfigError("at least one model must have role 'attacked'")
    if cfg.target_policy not in TARGET_POLICIES:
        raise ConfigError(f"unknown target policy {cfg.target_policy!r}")
    if cfg.n_samples < 0 or cfg.batch_size < 1:
        raise ConfigError("n_samples must be >= 0 and batch_size >= 1")
    a = cfg.attack
    if a.composition not in attack.COMPOSITIONS:
        raise ConfigError(f"invalid composition {a.composition!r}")
    if a.composition in ("single", "hybrid") and len(cfg.attacked) != 1:
        raise ConfigError(f"{a.composition} composition needs exactly one attacked model")
    if a.composition in ("hybrid", "ensemble_hybrid") and any(m.defense == "none" for m in cfg.attacked):
        raise ConfigError(f"{a.composition} composition needs a defense on every attacked model")
    if a.weights is not None and set(a.weights) - {m.name for m in cfg.attacked}:
        raise ConfigError("attack weights name models that are not attacked")
    for name in cfg.eval_defenses:
        parse_defense(name)
    try:
        attack.SquashFn(a.squash)
        attack.AdamSettings(a.lr, a.beta1, a.beta2, a.eps)
        attack.AttackConfig(attack.PerturbationBudget(0.0), a.mode, a.iterations)
    except ValueError as e:
        raise ConfigError(str(e)) from None


# ---------------------------------------------------------------- pieces


def select_target(seed: int, index: int, label: int, num_classes: int = 10) -> int:
    """Uniform over the classes other than ``label``, keyed by (seed, index)."""
    rng = SplitMix64(derive_seed(seed, index))
    return (label + 1 + rng.randbelow(num_classes - 1)) % num_classes


def quantize_roundtrip(img) -> np.ndarray:
    """Snap to the 8-bit grid, round(v * 255) / 255 with halves away from zero."""
    img = np.asarray(img)
    if np.any(img < -1e-6) or np.any(img > 1 + 1e-6):
        raise ValueError("quantize_roundtrip expects values in [0, 1]")
    return quantize8(np.clip(img, 0, 1)).astype(np.float32) / np.float32(255)


def majority_vote(predictions: Sequence[int], probs: Sequence[np.ndarray] | None = None) -> int:
    """Modal class; ties go to the highest mean voter probability, then the lowest index."""
    if len(predictions) == 0:
        raise ValueError("majority_vote needs at least one prediction")
    counts = np.bincount(np.asarray(predictions, dtype=np.int64))
    tied = np.flatnonzero(counts == counts.max())
    if len(tied) == 1 or probs is None:
        return int(tied[0])
    mean_p = np.mean(np.asarray(probs, dtype=np.float64), axis=0)
    best = tied[np.argmax(mean_p[tied])]  # argmax keeps the lowest index among equals
    return int(best)


def _vote_batch(preds: np.ndarray, probs: np.ndarray) -> np.ndarray:
    """preds: voters x N, probs: voters x N x m."""
    return np.array([majority_vote(preds[:, i], probs[:, i]) for i in range(preds.shape[1])], dtype=np.int64)


@dataclass(frozen=True)
class RateMetrics:
    success: float
    misclassification: float
    clean_accuracy: float
    n: int


@dataclass(frozen=True)
class Metrics:
    per_model: dict[str, RateMetrics]
    vote: RateMetrics


def _classify(net, images, spec, batch: int = 500):
    probs = []
    for s in range(0, len(images), batch):
        x = defenses.apply_defense(images[s:s + batch], spec)
        probs.append(netlib.softmax(net.logits(x)))
    return np.concatenate(probs) if probs else np.zeros((0, net.num_classes), dtype=np.float32)


def evaluate(models_with_defenses, originals, adversarials, targets, true_labels) -> Metrics:
    """Success / misclassification / clean accuracy per model and for the vote.

    ``models_with_defenses`` is a sequence of ``(name, network, defense_spec)``.
    ``targets`` may be None for untargeted attacks (success then equals
    misclassification).
    """
    originals = np.asarray(originals, dtype=np.float32)
    adversarials = np.asarray(adversarials, dtype=np.float32)
    labels = np.asarray(true_labels, dtype=np.int64)
    n = len(labels)
    if len(originals) != n or len(adversarials) != n or (targets is not None and len(targets) != n):
        raise ValueError("originals, adversarials, targets and labels must be aligned")
    goal = labels if targets is None else np.asarray(targets, dtype=np.int64)

    def rates(adv_pred, clean_pred):
        if n == 0:
            return RateMetrics(0.0, 0.0, 0.0, 0)
        mis = float(np.mean(adv_pred != labels))
        succ = mis if targets is None else float(np.mean(adv_pred == goal))
        return RateMetrics(succ, mis, float(np.mean(clean_pred == labels)), n)

    per_model = {}
    adv_probs, clean_probs = [], []
    for name, net, spec in models_with_defenses:
        pa = _classify(net, adversarials, spec)
        pc = _classify(net, originals, spec)
        adv_probs.append(pa)
        clean_probs.append(pc)
        per_model[name] = rates(pa.argmax(axis=-1), pc.argmax(axis=-1))
    adv_probs, clean_probs = np.array(adv_probs), np.array(clean_probs)
    vote = rates(_vote_batch(adv_probs.argmax(-1), adv_probs), _vote_batch(clean_probs.argmax(-1), clean_probs))
    return Metrics(per_model, vote)


# -------------------------------------------------------------- campaign


@dataclass
class Campaign:
    """Everything produced by the crafting stage, ready for evaluation."""

    indices: np.ndarray
    labels: np.ndarray
    targets: np.ndarray | None
    originals: np.ndarray  # float32 on the 8-bit grid
    adversarials: dict[int, np.ndarray] = field(default_factory=dict)  # delta_int -> 8-bit-grid floats


def load_models(cfg: ExperimentConfig) -> dict[str, netlib.Network]:
    nets = {}
    for m in cfg.models:
        path = cfg.resolve(m.path)
        if not path.exists():
            raise ModelFileMissing(f"model file for {m.name!r} not found: {path}")
        nets[m.name] = netlib.load(path)
    return nets


def build_objective(cfg: ExperimentConfig, nets: dict[str, netlib.Network]) -> attack.ObjectiveSpec:
    a = cfg.attack
    attacked = cfg.attacked
    weights = a.weights or {}
    fronts = {m.name: defenses.defense_as_layers(parse_defense(m.defense)) if m.defense != "none" else None
              for m in attacked}
    terms = []
    for m in attacked:
        w = float(weights.get(m.name, 1.0))
        net = nets[m.name]
        if a.composition in ("hybrid", "ensemble_hybrid"):
            wa, wb = a.hybrid_weights
            terms.append(attack.ObjectiveTerm(net, w * wa, m.name, m.name, False))
            terms.append(attack.ObjectiveTerm(netlib.prepend(net, fronts[m.name]), w * wb, m.name + "'", m.name, True))
        elif fronts[m.name]:
            terms.append(attack.ObjectiveTerm(netlib.prepend(net, fronts[m.name]), w, m.name + "'", m.name, True))
        else:
            terms.append(attack.ObjectiveTerm(net, w, m.name, m.name, False))
    try:
        return attack.ObjectiveSpec(tuple(terms), a.composition)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def check_quantized(original8: np.ndarray, adversarial8: np.ndarray, delta_int: int) -> int:
    """Max 8-bit deviation; raises if it exceeds the budget."""
    dev = int(np.max(np.abs(original8.astype(np.int16) - adversarial8.astype(np.int16)), initial=0))
    if dev > delta_int:
        raise QuantizationGuaranteeError(f"8-bit deviation {dev} exceeds delta_int {delta_int}")
    return dev


def craft_campaign(cfg: ExperimentConfig, test: Dataset, nets: dict[str, netlib.Network], log=None) -> Campaign:
    n = min(cfg.n_samples, len(test))
    idx = np.arange(n)
    labels = test.labels[:n].astype(np.int64)
    targeted = cfg.attack.mode == "targeted"
    targets = np.array([select_target(cfg.seed, int(i), int(l)) for i, l in zip(idx, labels)], dtype=np.int64)
    originals = test.floats(slice(0, n))
    camp = Campaign(idx, labels, targets if targeted else None, originals)
    if n == 0:
        for d in cfg.delta_int:
            camp.adversarials[d] = originals.copy()
        return camp
    obj = build_objective(cfg, nets)
    a = cfg.attack
    for d in cfg.delta_int:
        conf = attack.AttackConfig(
            attack.PerturbationBudget.from_int(d),
            a.mode,
            a.iterations,
            attack.AdamSettings(a.lr, a.beta1, a.beta2, a.eps),
            attack.SquashFn(a.squash),
        )
        out = []
        for s in range(0, n, cfg.batch_size):
            sl = slice(s, s + cfg.batch_size)
            res = attack.craft_batch(originals[sl], conf, obj, labels[sl], targets[sl] if targeted else None)
            out.extend(r.adversarial for r in res)
        adv8 = quantize8(np.stack(out))
        check_quantized(test.images[:n], adv8, d)
        camp.adversarials[d] = adv8.astype(np.float32) / np.float32(255)
        if log:
            log(f"crafted {n} samples at delta_int={d}")
    return camp


def save_campaign(cfg: ExperimentConfig, camp: Campaign, images_dir: Path) -> None:
    images_dir.mkdir(parents=True, exist_ok=True)
    (images_dir / "original").mkdir(exist_ok=True)
    for i, img in zip(camp.indices, camp.originals):
        write_ppm(images_dir / "original" / f"{i:05d}.ppm", quantize8(img))
    for d, advs in camp.adversarials.items():
        sub = images_dir / f"delta_{d:03d}"
        sub.mkdir(exist_ok=True)
        for i, img in zip(camp.indices, advs):
            write_ppm(sub / f"{i:05d}.ppm", quantize8(img))
    manifest = {
        "indices": camp.indices.tolist(),
        "labels": camp.labels.tolist(),
        "targets": None if camp.targets is None else camp.targets.tolist(),
        "delta_int": sorted(camp.adversarials),
    }
    (images_dir / "manifest.json").write_text(json.dumps(manifest, indent=1) + "\n")


def load_campaign(images_dir: Path) -> Campaign:
    manifest_path = images_dir / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no campaign manifest in {images_dir}; run the attack stage first")
    man = json.loads(manifest_path.read_text())
    idx = np.array(man["indices"], dtype=np.int64)

    def read(sub):
        imgs = [read_ppm(images_dir / sub / f"{i:05d}.ppm") for i in idx]
        return np.stack(imgs) if imgs else np.zeros((0, 32, 32, 3), dtype=np.uint8)

    orig8 = read("original")
    camp = Campaign(
        idx,
        np.array(man["labels"], dtype=np.int64),
        None if man["targets"] is None else np.array(man["targets"], dtype=np.int64),
        orig8.astype(np.float32) / np.float32(255),
    )
    for d in man["delta_int"]:
        adv8 = read(f"delta_{d:03d}")
        check_quantized(orig8, adv8, d)
        camp.adversarials[d] = adv8.astype(np.float32) / np.float32(255)
    return camp


def evaluate_campaign(cfg: ExperimentConfig, camp: Campaign, nets: dict[str, netlib.Network]) -> list[tuple]:
    rows = []
    holdout = {m.name for m in cfg.models if m.role == "holdout"}
    n = len(camp.labels)
    for d in sorted(camp.adversarials):
        for dname in cfg.eval_defenses:
            spec = parse_defense(dname)
            models = [(m.name, nets[m.name], spec) for m in cfg.models]
            if n:
                met = evaluate(models, camp.originals, camp.adversarials[d], camp.targets, camp.labels)
                entries = list(met.per_model.items()) + [("vote", met.vote)]
            else:
                entries = []
            for name, r in entries:
                if name in holdout:
                    rows.append((name, dname, d, "holdout", 1.0, r.n))
                rows.append((name, dname, d, "clean_accuracy", r.clean_accuracy, r.n))
                rows.append((name, dname, d, "success", r.success, r.n))
                rows.append((name, dname, d, "misclassification", r.misclassification, r.n))
    return rows


def format_report(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(REPORT_HEADER)
    for model, dname, d, metric, value, n in rows:
        w.writerow((model, dname, d, metric, f"{value:.6g}", n))
    return buf.getvalue()


def write_report(cfg: ExperimentConfig, rows) -> str:
    text = format_report(rows)
    if cfg.report:
        path = cfg.resolve(cfg.report)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(text)
    return text


def run_attack_stage(cfg: ExperimentConfig, log=None) -> Campaign:
    nets = load_models(cfg)
    _, test = load_dataset(cfg.resolve(cfg.dataset))
    camp = craft_campaign(cfg, test, nets, log)
    if cfg.images_dir:
        save_campaign(cfg, camp, cfg.resolve(cfg.images_dir))
    return camp


def run_eval_stage(cfg: ExperimentConfig, camp: Campaign | None = None) -> str:
    nets = load_models(cfg)
    if camp is None:
        if not cfg.images_dir:
            raise ConfigError("evaluation from disk needs images_dir")
        camp = load_campaign(cfg.resolve(cfg.images_dir))
    return write_report(cfg, evaluate_campaign(cfg, camp, nets))


def run_experiment(cfg: ExperimentConfig, log=None) -> str:
    """Craft, round-trip through 8-bit images, evaluate; returns the CSV text.

    When ``images_dir`` is set the adversarial examples are written as PPM
    files and evaluation reloads them from disk.
    """
    camp = run_attack_stage(cfg, log)
    if cfg.images_dir:
        camp = load_campaign(cfg.resolve(cfg.images_dir))
    return run_eval_stage(cfg, camp)


def pivot_report(csv_text: str) -> str:
    """Markdown tables (one per defense / delta) with models as columns."""
    rows = list(csv.DictReader(io.StringIO(csv_text)))
    if rows and list(rows[0].keys()) != list(REPORT_HEADER):
        raise ValueError("not a campaign report")
    blocks: dict[tuple[str, str], dict[str, dict[str, str]]] = {}
    models: list[str] = []
    for r in rows:
        if r["model"] not in models:
            models.append(r["model"])
        blk = blocks.setdefault((r["defense"], r["delta_int"]), {})
        blk.setdefault(r["metric"], {})[r["model"]] = r["value"]
    out = []
    for (dname, d), metrics in blocks.items():
        held = metrics.get("holdout", {})
        heads = [m + (" (holdout)" if m in held else "") for m in models]
        out.append(f"### defense={dname} delta_int={d}\n")
        out.append("| metric | " + " | ".join(heads) + " |")
        out.append("|---" * (len(models) + 1) + "|")
        for metric, vals in metrics.items():
            if metric == "holdout":
                continue
            cells = [f"{100 * float(vals[m]):.1f}%" if m in vals else "" for m in models]
            out.append(f"| {metric} | " + " | ".join(cells) + " |")
        out.append("")
    return "\n".join(out)
