"""Generation per evaluation group and the MetricsReport built from it."""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from ..cfm import generate
from ..condenc import encode
from ..errors import ParseError
from ..metrics import MetricsReport, pfd, rmse, temperature_discrimination
from ..synthdata import TRAIN_GROUP, Corpus, eval_corpora, target_train_corpus
from .config import RunConfig, data_config, derive_seed


def real_groups(cfg: RunConfig, seed: int) -> dict[str, tuple[float, np.ndarray]]:
    """Held-out groups plus an in-distribution ``Train`` group of the same size."""
    dcfg = data_config(cfg)
    out = {name: (float(c.temps[0]), c.values) for name, c in eval_corpora(dcfg, seed).items()}
    train: Corpus = target_train_corpus(dcfg, seed)
    idx = np.linspace(0, len(train) - 1, dcfg.per_eval_group).round().astype(int)
    out[TRAIN_GROUP[0]] = (TRAIN_GROUP[1], train.values[idx])
    return out


def generate_groups(cfg: RunConfig, field, fno, seed: int, groups=None) -> dict[str, tuple[float, np.ndarray]]:
    """Generate ``len(real)`` samples per group in one batched integration."""
    groups = real_groups(cfg, seed) if groups is None else groups
    conds, sizes = [], []
    for temp, real in groups.values():
        conds.append(np.tile(encode(temp, cfg.encoding).as_array(), (len(real), 1)))
        sizes.append(len(real))
    x = generate(np.concatenate(conds), field, fno, steps=cfg.eval.steps, seed=derive_seed(seed, scale=1009), n=sum(sizes)).numpy()
    out, start = {}, 0
    for (name, (temp, _)), n in zip(groups.items(), sizes):
        out[name] = (temp, x[start:start + n])
        start += n
    return out


def evaluate_generated(
    cfg: RunConfig, generated: dict[str, tuple[float, np.ndarray]], field, fno, seed: int, real=None
) -> MetricsReport:
    real = real_groups(cfg, seed) if real is None else real
    rm, counts = {}, {}
    for name, (temp, r) in real.items():
        g = generated[name][1][: len(r)]
        rm[name] = rmse(g, r[: len(g)])
        counts[name] = int(len(g))
    per, agg = pfd({k: real[k][1] for k in generated}, {k: v[1] for k, v in generated.items()})
    report = MetricsReport(rmse=rm, pfd=per, pfd_aggregate=agg, sample_counts=counts)
    if field is not None:
        by_temp: dict[float, np.ndarray] = {}
        for temp, x in generated.values():
            by_temp.setdefault(temp, x[: cfg.eval.discrimination_per_temp])
        temps = sorted(by_temp)
        xs = np.concatenate([by_temp[t] for t in temps])
        truth = np.concatenate([[t] * len(by_temp[t]) for t in temps])
        acc, base, _ = temperature_discrimination(
            xs, truth, field, fno, temps, n_mc=cfg.eval.n_mc, seed=seed, enc=cfg.encoding
        )
        report.discrimination_accuracy = acc
        report.discrimination_baseline = base
    return report


def evaluate_model(cfg: RunConfig, field, fno, seed: int) -> tuple[MetricsReport, dict]:
    real = real_groups(cfg, seed)
    generated = generate_groups(cfg, field, fno, seed, real)
    return evaluate_generated(cfg, generated, field, fno, seed, real), generated


def write_generated(generated: dict[str, tuple[float, np.ndarray]], out_dir) -> list[Path]:
    """One CSV per group: ``temperature_c, v0..v{L-1}`` per row."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, (temp, x) in generated.items():
        p = out / f"generated_{name}.csv"
        with p.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["temperature_c"] + [f"v{i}" for i in range(x.shape[1])])
            for row in x:
                w.writerow([repr(float(temp))] + [repr(float(v)) for v in row])
        paths.append(p)
    return paths


def read_generated(in_dir) -> dict[str, tuple[float, np.ndarray]]:
    out = {}
    for p in sorted(Path(in_dir).glob("generated_*.csv")):
        name = p.stem[len("generated_"):]
        with p.open(newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "temperature_c":
            raise ParseError(f"{p.name}: missing header", line=1)
        try:
            data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=np.float64)
        except ValueError as exc:
            raise ParseError(f"{p.name}: {exc}") from None
        if data.ndim != 2 or data.shape[0] == 0:
            raise ParseError(f"{p.name}: no samples", line=2)
        out[name] = (float(data[0, 0]), data[:, 1:])
    return out
