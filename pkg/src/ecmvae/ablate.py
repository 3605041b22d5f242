"""Ablation sweeps: config grids over seeds, cached runs, mean +- sd tables."""
from __future__ import annotations

import csv
import json
import logging
import statistics
from dataclasses import dataclass
from pathlib import Path

from .config import TrainConfig
from .train import train

log = logging.getLogger(__name__)

SUITES = ("factorization", "divergence", "losses", "multimodal")


@dataclass(frozen=True)
class Variant:
    label: str
    overrides: dict


def suite_variants(suite: str) -> list[Variant]:
    """Rows of each comparison table, as overrides on a base config."""
    if suite == "factorization":
        # the factorisation effect in isolation: KL regulariser, no extra constraints
        base = {"divergence": "KL", "lambda1": 0.0, "lambda2": 0.0}
        return [
            Variant("VAE unfact L=16", base | {"factorized": False, "latent_dim": 16}),
            Variant("VAE unfact L=48", base | {"factorized": False, "latent_dim": 48}),
            Variant("VAE fact L=16", base | {"factorized": True, "latent_dim": 16}),
            Variant("AE fact L=16", base | {"factorized": True, "latent_dim": 16, "latent_kind": "ae"}),
        ]
    if suite == "divergence":
        return [Variant(d, {"divergence": d}) for d in ("KL", "PoE", "MoE", "JS")]
    if suite == "losses":
        rows = []
        for l1 in (False, True):
            for l2 in (False, True):
                label = f"diff={'on' if l1 else 'off'} sic={'on' if l2 else 'off'}"
                rows.append(Variant(label, {"lambda1": None if l1 else 0.0, "lambda2": None if l2 else 0.0}))
        return rows
    if suite == "multimodal":
        plain = {"divergence": "KL", "factorized": False, "lambda1": 0.0, "lambda2": 0.0, "lambda3": 0.0}
        return [Variant("CVAE (video only)", plain | {"use_audio": False}),
                Variant("CMVAE (audio+video)", plain | {"use_audio": True})]
    raise ValueError(f"unknown suite {suite!r}; choose from {SUITES}")


def run_cached(cfg: TrainConfig, root: Path, corpus=None) -> dict:
    """Train unless a finished run with the same config hash exists under ``root``."""
    h = cfg.config_hash()
    out = Path(root) / h
    done = out / "eval_test.json"
    if done.exists():
        ev = json.loads(done.read_text())
        if ev.get("config_hash") == h:
            return ev | {"path": str(done)}
    cfg = cfg.with_overrides(out=str(out))
    log.info("training %s -> %s", h, out)
    rec = train(cfg, corpus=corpus)
    return rec.final_eval | {"path": str(done)}


def run_suite(suite: str, base: TrainConfig, seeds=(0, 1, 2), root="runs/ablate", corpus=None,
              variants: list[str] | None = None) -> list[dict]:
    """One record per (variant, seed) with the path of its eval file.

    ``variants`` restricts the grid to the named rows.
    """
    if len(seeds) < 3:
        raise ValueError("an ablation needs at least 3 seeds")
    rows = suite_variants(suite)
    if variants is not None:
        unknown = set(variants) - {v.label for v in rows}
        if unknown:
            raise ValueError(f"unknown variants for {suite}: {sorted(unknown)}")
        rows = [v for v in rows if v.label in variants]
    runs = []
    for v in rows:
        ov = {k: x for k, x in v.overrides.items() if x is not None}
        for seed in seeds:
            cfg = base.with_overrides(seed=seed, **ov)
            ev = run_cached(cfg, Path(root), corpus)
            runs.append({"suite": suite, "variant": v.label, "seed": seed, "config_hash": cfg.config_hash(),
                         "eval_path": ev["path"]})
    return runs


def summarize(runs: list[dict]) -> list[dict]:
    """Mean and sample sd per variant, recomputed from the referenced eval files."""
    by: dict[str, list[dict]] = {}
    for r in runs:
        ev = json.loads(Path(r["eval_path"]).read_text())
        by.setdefault(r["variant"], []).append(ev)
    rows = []
    for label, evs in by.items():
        m = [e["miou"] for e in evs]
        f = [e["fscore"] for e in evs]
        rows.append({"variant": label, "n": len(evs),
                     "miou_mean": statistics.fmean(m), "miou_sd": _sd(m),
                     "fscore_mean": statistics.fmean(f), "fscore_sd": _sd(f)})
    return rows


def _sd(xs) -> float:
    return statistics.stdev(xs) if len(xs) > 1 else 0.0


def write_tables(runs: list[dict], out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    suite = runs[0]["suite"]
    rows = summarize(runs)
    (out_dir / f"{suite}_runs.json").write_text(json.dumps(runs, indent=2))
    csv_path = out_dir / f"{suite}.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        for r in rows:
            wr.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
    txt_path = out_dir / f"{suite}.txt"
    txt_path.write_text(format_table(rows))
    return csv_path, txt_path


def format_table(rows: list[dict]) -> str:
    w = max(len("variant"), *(len(r["variant"]) for r in rows))
    lines = [f"{'variant':<{w}}  {'n':>2}  {'mIoU':>15}  {'F-score':>15}"]
    for r in rows:
        lines.append(f"{r['variant']:<{w}}  {r['n']:>2}  "
                     f"{r['miou_mean']:.4f} +- {r['miou_sd']:.4f}  {r['fscore_mean']:.4f} +- {r['fscore_sd']:.4f}")
    return "\n".join(lines) + "\n"
