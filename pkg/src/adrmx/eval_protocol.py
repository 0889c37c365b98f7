"""Leave-one-domain-out evaluation, invariance probes, ablations and embedding export."""
from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .data.domains import DomainDataset, MultiDomainTask
from .losses import cross_entropy
from .metrics import accuracy
from .model import AdrmxParams, Mlp, embed, predict
from .training import (AdamState, AuditLog, TrainConfig, TrainState, adam_step, best_params, split_sources,
                       train_loop)

logger = logging.getLogger(__name__)

__all__ = ["accuracy", "ExperimentResult", "leave_one_domain_out", "probe_domain_invariance",
           "run_ablations", "export_embeddings", "pca_2d", "PAPER_REFERENCE"]

# Published reference numbers (ImageNet-pretrained ResNet-50, full corpora); not reproducible here.
PAPER_REFERENCE = {
    "table1_adrmx": {"CMNIST": 52.5, "RMNIST": 97.8, "average": 67.6},
    "domainnet_remix": {"with": 43.1, "without": 42.4},
    "pacs_avg": {"original": 85.87, "domain_invariant": 84.01, "no_contrastive": 84.66},
}


@dataclass
class ExperimentResult:
    domain_names: list[str]
    per_target: list[float]  # seed-mean held-out accuracy per target domain
    per_seed: dict[int, list[float]]
    seeds: list[int]
    config: dict
    label: str = "ADRMX"
    complete: bool = True
    val_acc: list[float] = field(default_factory=list)  # seed-mean selection score per target

    @property
    def mean(self) -> float:
        return float(np.mean(self.per_target))

    @property
    def std_over_seeds(self) -> float:
        return float(np.std([np.mean(v) for v in self.per_seed.values()]))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_seed"] = {str(k): v for k, v in self.per_seed.items()}
        d["mean"] = self.mean
        return d

    def row(self) -> dict:
        out = {"model": self.label}
        out.update({n: 100.0 * a for n, a in zip(self.domain_names, self.per_target)})
        out["Avg"] = 100.0 * self.mean
        return out


def _run_cell(task: MultiDomainTask, config: TrainConfig, target: int) -> dict:
    """Train on every domain except ``target``, select on source validation, test on ``target``."""
    audit = AuditLog()
    cell_task = task.with_target(target)
    state, record = train_loop(cell_task, config, audit=audit)
    params = best_params(state)
    tgt = cell_task.target
    audit.record(tgt.domain_id, "test", len(tgt))
    acc = accuracy(predict(params, tgt.inputs, config.predict_from == "dinv"), tgt.labels)
    return {"target": target, "seed": config.seed, "test_acc": acc, "record": record,
            "audit": audit.events, "state": state}


def leave_one_domain_out(task: MultiDomainTask, config: TrainConfig, seeds: Sequence[int] = (0, 1, 2),
                         label: str = "ADRMX", runner: Callable | None = None,
                         keep: list | None = None) -> ExperimentResult:
    """Every domain in turn is the unseen target; results are averaged over seeds.

    ``runner`` maps a list of (task, config, target) jobs to cell dicts
    (default: sequential). Cells come back as dicts with test accuracy, the
    RunRecord and the data-access audit; pass a list as ``keep`` to collect them.
    """
    if len(task.domains) < 3:
        raise ValueError("leave-one-domain-out needs at least 3 domains")
    jobs = [(task, replace(config, seed=s), t) for s in seeds for t in range(len(task.domains))]
    run = runner or (lambda js: [_run_cell(*j) for j in js])
    cells = run(jobs)
    if keep is not None:
        keep.extend(cells)
    n = len(task.domains)
    per_seed = {s: [np.nan] * n for s in seeds}
    val = {s: [np.nan] * n for s in seeds}
    complete = True
    for c in cells:
        if c["record"].status != "completed":
            complete = False
        per_seed[c["seed"]][c["target"]] = c["test_acc"]
        val[c["seed"]][c["target"]] = c["record"].best_val_acc
    per_target = [float(np.mean([per_seed[s][t] for s in seeds])) for t in range(n)]
    val_mean = [float(np.mean([val[s][t] for s in seeds])) for t in range(n)]
    return ExperimentResult([d.domain_name for d in task.domains], per_target, per_seed, list(seeds),
                            config.to_dict(), label, complete, val_mean)


def train_probe(features: np.ndarray, targets: np.ndarray, num_out: int, hidden: Sequence[int],
                steps: int, lr: float, batch: int, seed: int) -> Mlp:
    """Fit a fresh MLP classifier on frozen features with Adam and minibatches."""
    rng = np.random.default_rng(seed)
    probe = Mlp("probe", [features.shape[1], *hidden, num_out], rng)
    opt = AdamState.for_params(probe.parameters(), lr)
    n = features.shape[0]
    for _ in range(steps):
        rows = rng.choice(n, size=min(batch, n), replace=False)
        tape = Tape()
        loss = cross_entropy(probe(Tensor(features[rows]), tape), targets[rows])
        tape.backward(loss)
        adam_step(opt, probe.parameters())
    return probe


@dataclass
class ProbeConfig:
    steps: int = 1000
    lr: float = 1e-3
    batch: int = 64
    hidden: tuple[int, ...] = (128, 128)
    seed: int = 0


def probe_domain_invariance(params: AdrmxParams, train_sets: Sequence[DomainDataset],
                            held_out: Sequence[DomainDataset],
                            probe: ProbeConfig | None = None) -> tuple[float, float]:
    """Domain-classification accuracy of identical fresh probes on frozen x_label and x_dinv.

    Probes are fit on ``train_sets`` and scored on ``held_out``; the domain
    target of each dataset is its position in the list.
    """
    probe = probe or ProbeConfig()

    def stack(sets):
        x = np.concatenate([d.inputs for d in sets])
        y = np.concatenate([np.full(len(d), k) for k, d in enumerate(sets)])
        return embed(params, x), y

    feats_tr, y_tr = stack(train_sets)
    feats_te, y_te = stack(held_out)
    out = []
    for kind in ("label", "dinv"):
        clf = train_probe(feats_tr[kind], y_tr, len(train_sets), probe.hidden, probe.steps, probe.lr,
                          probe.batch, probe.seed)
        out.append(accuracy(clf.numpy_forward(feats_te[kind]), y_te))
    return out[0], out[1]


def probe_after_training(task: MultiDomainTask, state: TrainState, config: TrainConfig,
                         probe: ProbeConfig | None = None, checkpoint: str = "final") -> tuple[float, float]:
    """Probe a trained run on its own source train/validation splits.

    ``checkpoint="final"`` probes the parameters at the end of training, where
    the adversarial game has run its full course; ``"best"`` probes the
    validation-selected checkpoint, which on easy tasks is often an early step.
    """
    if checkpoint not in ("final", "best"):
        raise ValueError(f"checkpoint must be 'final' or 'best', got {checkpoint!r}")
    params = state.params if checkpoint == "final" else best_params(state)
    train_sets, val_sets = split_sources(task.sources, config.holdout_fraction, config.seed)
    return probe_domain_invariance(params, train_sets, val_sets, probe)


ABLATIONS = {
    "ADRMX (original)": {},
    "ADRMX w/o remix loss": {"use_remix": False},
    "ADRMX w/o contrastive": {"use_contrastive": False},
    "ADRMX w/domain invariant": {"predict_from": "dinv"},
}


def run_ablations(task: MultiDomainTask, base: TrainConfig, seeds: Sequence[int] = (0, 1, 2),
                  runner: Callable | None = None) -> list[ExperimentResult]:
    """The four ablation variants, each evaluated leave-one-domain-out on identical seeds."""
    results = []
    for label, flags in ABLATIONS.items():
        results.append(leave_one_domain_out(task, replace(base, **flags), seeds, label=label, runner=runner))
    return results


def results_table(results: Sequence[ExperimentResult]) -> list[dict]:
    return [r.row() for r in results]


def write_results(results: Sequence[ExperimentResult], csv_path: str | Path, json_path: str | Path | None = None):
    import json

    rows = results_table(results)
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    if json_path is not None:
        Path(json_path).write_text(json.dumps([r.to_dict() for r in results], indent=2, sort_keys=True))


def _power_iteration(cov: np.ndarray, rng: np.random.Generator, tol: float = 1e-9,
                     max_iter: int = 20000) -> tuple[float, np.ndarray]:
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(max_iter):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            return 0.0, v
        w /= norm
        if w @ v < 0:
            w = -w
        done = np.linalg.norm(w - v) < tol
        v = w
        if done:
            break
    else:
        logger.warning("power iteration stopped after %d iterations without reaching tol %g", max_iter, tol)
    return float(v @ cov @ v), v


def pca_2d(x: np.ndarray, tol: float = 1e-9, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Project centred rows onto the top two principal directions (power iteration + deflation).

    Returns ``(coords (N, 2), eigenvalues (2,))``. Directions whose variance
    is negligible are replaced by zero columns with a warning.
    """
    x = np.asarray(x, dtype=np.float64)
    xc = x - x.mean(axis=0)
    cov = xc.T @ xc / max(x.shape[0] - 1, 1)
    rng = np.random.default_rng(seed)
    scale = max(np.trace(cov), np.finfo(float).tiny)
    coords = np.zeros((x.shape[0], 2))
    eig = np.zeros(2)
    for k in range(min(2, x.shape[1])):
        lam, v = _power_iteration(cov, rng, tol)
        if lam <= 1e-12 * scale:
            warnings.warn(f"covariance has rank {k}; padding principal component {k + 1} with zeros")
            break
        # sign convention: largest-magnitude loading is positive
        if v[np.argmax(np.abs(v))] < 0:
            v = -v
        coords[:, k] = xc @ v
        eig[k] = lam
        cov = cov - lam * np.outer(v, v)
    else:
        if x.shape[1] < 2:
            warnings.warn("features are 1-D; padding principal component 2 with zeros")
    return coords, eig


def export_embeddings(params: AdrmxParams, datasets: Sequence[DomainDataset], path: str | Path | None = None,
                      tol: float = 1e-9) -> list[dict]:
    """2-D PCA views of x_domain and x_dinv, one row per sample and feature kind."""
    x = np.concatenate([d.inputs for d in datasets])
    labels = np.concatenate([d.labels for d in datasets])
    dom = np.concatenate([np.full(len(d), d.domain_id) for d in datasets])
    sample_ids = np.concatenate([d.index for d in datasets])
    feats = embed(params, x)
    rows = []
    for kind in ("domain", "dinv"):
        coords, _ = pca_2d(feats[kind], tol)
        for i in range(x.shape[0]):
            rows.append({"sample_id": int(sample_ids[i]), "feature_kind": kind, "pc1": float(coords[i, 0]),
                         "pc2": float(coords[i, 1]), "class_label": int(labels[i]), "domain_label": int(dom[i])})
    if path is not None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["sample_id", "feature_kind", "pc1", "pc2", "class_label",
                                               "domain_label"])
            w.writeheader()
            for r in rows:
                w.writerow({**r, "pc1": repr(r["pc1"]), "pc2": repr(r["pc2"])})
    return rows
