"""Training step, training loop, evaluation and latent export."""
from __future__ import annotations

import csv
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NonFiniteError, Tensor, forward_backward, no_grad
from .checkpoint import load_checkpoint, read_checkpoint, save_checkpoint
from .config import TrainConfig
from .experts import ExpertSet, moe_sample
from .factorization import LatentBundle, build_bundle, cross_gram_norms, difference_loss, fuse, write_latent_csv
from .gaussian import reparam_sample
from .metrics import EvalResult, evaluate
from .mi import sic_loss
from .model import Batch, ToyModel, make_batch
from .objective import LossReport, NonFiniteLossError, elbo_hat, rec_loss, total_loss, zero_avm
from .optim import AdamState, adam_step
from .rng import make_rng
from . import synth

log = logging.getLogger(__name__)

EXTRA_COLUMNS = ("gram_c_sa", "gram_c_sv", "gram_sa_sv", "i_ba_po", "i_ba_pr")


class NumericalAbort(RuntimeError):
    def __init__(self, msg: str, checkpoint: Path | None):
        super().__init__(msg)
        self.checkpoint = checkpoint


@dataclass
class StepOutput:
    loss: Tensor
    report: LossReport
    extras: dict[str, float]
    bundles: dict[str, object] = field(default_factory=dict)


def _sample_code(dist, rng):
    if isinstance(dist, ExpertSet):
        return moe_sample(dist, rng)
    return reparam_sample(dist, rng)


def _mean_code(dist) -> Tensor:
    if isinstance(dist, ExpertSet):
        out = None
        for w, e in zip(dist.weights, dist.experts):
            out = e.mu * w if out is None else out + e.mu * w
        return out
    return dist.mu


def _ae_bundle(d: dict) -> LatentBundle:
    c, s_a, s_v = _mean_code(d["c"]), d["s_a"].mu, d["s_v"].mu
    sc_a, sc_v = fuse(c, s_a, s_v)
    return LatentBundle(c, s_a, s_v, sc_a, sc_v, d)


def compute_losses(model: ToyModel, batch: Batch, rng: np.random.Generator, cfg: TrainConfig,
                   avm_hook=zero_avm) -> StepOutput:
    """All loss components for one mini-batch.

    With alpha1 == 0 (GSNN only) the posterior branch is never built, so L_diff
    and L_sic fall back to prior codes and no posterior weight gets gradient.
    """
    mc = model.cfg
    w = cfg.effective_weights()
    B, T = batch.B, batch.T
    y = batch.target
    feats = model.features(batch.frames, batch.audio)
    pr = model.encode_priors(batch.frames, batch.audio)
    use_post = mc.latent_kind == "vae" and w.alpha1 > 0
    po = model.encode_posteriors(batch.frames, batch.audio, y) if use_post else None
    comps: dict[str, Tensor | float] = {}
    extras = {k: 0.0 for k in EXTRA_COLUMNS}
    bundles: dict[str, object] = {}

    if mc.factorized:
        if mc.latent_kind == "ae":
            b_pr = _ae_bundle(pr)
        else:
            b_pr = build_bundle(pr["c"], pr["s_a"], pr["s_v"], rng)
        paths = [b_pr.sc_a, b_pr.sc_v]
        if po is not None:
            b_po = build_bundle(po["c"], po["s_a"], po["s_v"], rng)
            paths = [b_po.sc_a, b_po.sc_v] + paths
            bundles["posterior"] = b_po
        bundles["prior"] = b_pr
    else:
        z_pr = _sample_code(pr["c"], rng) if mc.latent_kind == "vae" else _mean_code(pr["c"])
        paths = [z_pr]
        if po is not None:
            paths = [_sample_code(po["c"], rng)] + paths

    logits = _decode_paths(model, feats, paths, rng)
    per_path = len(paths)
    if mc.factorized:
        pr_logits = logits[per_path - 2:]
        po_logits = logits[:2] if po is not None else []
    else:
        pr_logits = logits[-1:]
        po_logits = logits[:1] if po is not None else []
    comps["rec_prior"] = rec_loss(pr_logits, y)
    if po is not None:
        rec_po = rec_loss(po_logits, y)
        pi = list(cfg.js_pi) if cfg.js_pi is not None else None
        _, terms = elbo_hat(rec_po, po, pr, w.beta, mode=mc.divergence, rng=rng,
                            n_samples=cfg.jsd_samples, pi=pi, batch_size=B)
        comps["rec_posterior"] = rec_po
        comps.update(terms)

    if mc.factorized:
        codes = bundles.get("posterior", bundles["prior"])
        ga, gv, gav = cross_gram_norms(codes.c, codes.s_a, codes.s_v)
        extras.update(gram_c_sa=float(ga.data.mean()), gram_c_sv=float(gv.data.mean()),
                      gram_sa_sv=float(gav.data.mean()))
        if w.lambda1 > 0:
            comps["diff"] = difference_loss(codes.c, codes.s_a, codes.s_v)
        else:
            comps["diff"] = float(np.mean(ga.data + gv.data + gav.data))
        if model.critic is not None:
            a2 = w.alpha2 if "posterior" in bundles else 0.0
            sic, i_po, i_pr = sic_loss(model.critic, bundles.get("posterior"), bundles["prior"], a2,
                                       vc_pr=model.critic_pr)
            extras.update(i_ba_po=i_po.item(), i_ba_pr=i_pr.item())
            comps["sic"] = sic if w.lambda2 > 0 else sic.item()
    avm = avm_hook(model=model, batch=batch, features=feats, bundles=bundles)
    comps["avm"] = avm if w.lambda3 > 0 else (avm.item() if isinstance(avm, Tensor) else float(avm))
    loss, report = total_loss(comps, w)
    return StepOutput(loss, report, extras, bundles)


def _decode_paths(model: ToyModel, feats, paths, rng) -> list[Tensor]:
    """Decode P code tensors (B, T, D) in one stacked pass; returns P logits (B, T, 1, H, W)."""
    B, T = paths[0].shape[:2]
    mc = model.cfg
    if mc.shared_decoder or not mc.factorized:
        stacked = ad.concat([ad.reshape(p, (1,) + p.shape) for p in paths], axis=0)
        out = model.decode(feats, stacked, rng)
        hw = out.shape[-2:]
        out = ad.reshape(out, (len(paths), B, T, 1) + hw)
        return [out[i] for i in range(len(paths))]
    # unshared: even paths (audio-fused) -> decoder, odd (visual-fused) -> decoder_v
    res = []
    for i, p in enumerate(paths):
        dec = model.decoder if i % 2 == 0 else model.decoder_v
        o = model.decode(feats, p, rng, decoder=dec)
        res.append(ad.reshape(o, (B, T, 1) + o.shape[-2:]))
    return res


def predict(model: ToyModel, batch: Batch, rng: np.random.Generator, per_path: bool = False):
    """Test-time probabilities from prior codes; factorised models average both paths."""
    mc = model.cfg
    with no_grad():
        feats = model.features(batch.frames, batch.audio)
        pr = model.encode_priors(batch.frames, batch.audio)
        if mc.factorized:
            b = _ae_bundle(pr) if mc.latent_kind == "ae" else build_bundle(pr["c"], pr["s_a"], pr["s_v"], rng)
            paths = [b.sc_a, b.sc_v]
        else:
            paths = [_sample_code(pr["c"], rng) if mc.latent_kind == "vae" else _mean_code(pr["c"])]
        logits = _decode_paths(model, feats, paths, rng)
    probs = [ad._np_sigmoid(lg.data) for lg in logits]
    avg = sum(probs) / len(probs)
    return (avg, probs) if per_path else avg


def evaluate_model(model: ToyModel, clips, seed: int = 0, batch_size: int = 20) -> EvalResult:
    probs, gts, ids = [], [], []
    for i in range(0, len(clips), batch_size):
        chunk = clips[i:i + batch_size]
        batch = make_batch(chunk, "MS3")
        probs.append(predict(model, batch, make_rng(seed, 99, i)))
        gts.append(batch.masks)
        ids += [c.clip_id for c in chunk]
    return evaluate(np.concatenate(probs), np.concatenate(gts), ids)


def code_diagnostics(model: ToyModel, clips, protocol: str, seed: int = 0, batch_size: int = 20) -> dict:
    """Mean per-clip cross-Gram norms of posterior codes (prior codes for AE models)."""
    if not model.cfg.factorized:
        return {}
    sums = np.zeros(3)
    n = 0
    with no_grad():
        for i in range(0, len(clips), batch_size):
            batch = make_batch(clips[i:i + batch_size], protocol)
            rng = make_rng(seed, 98, i)
            if model.cfg.latent_kind == "vae":
                d = model.encode_posteriors(batch.frames, batch.audio, batch.target)
                b = build_bundle(d["c"], d["s_a"], d["s_v"], rng)
            else:
                b = _ae_bundle(model.encode_priors(batch.frames, batch.audio))
            g = cross_gram_norms(b.c, b.s_a, b.s_v)
            sums += [x.data.sum() for x in g]
            n += batch.B
    m = sums / max(n, 1)
    return {"gram_c_sa": float(m[0]), "gram_c_sv": float(m[1]), "gram_sa_sv": float(m[2])}


# ------------------------------------------------------------------ training loop

@dataclass
class RunRecord:
    out_dir: Path
    config_hash: str
    rows: list[dict]
    evals: list[dict]
    final_eval: dict
    checkpoint: Path
    wall_clock: float


def load_corpus(cfg: TrainConfig):
    if cfg.data is None:
        raise FileNotFoundError("no corpus given (set 'data' or --data)")
    return synth.load(cfg.data)


def train(cfg: TrainConfig, corpus=None, avm_hook=zero_avm, progress: bool = False) -> RunRecord:
    """Train to completion and write config, metrics CSV, eval JSONs, checkpoint and run record."""
    t0 = time.perf_counter()
    if corpus is None:
        corpus, _ = load_corpus(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg_json = cfg.to_json()
    chash = cfg.config_hash()
    (out / "config.json").write_text(json.dumps(cfg_json, indent=2, sort_keys=True))

    if cfg.protocol == "S4" and any(c.multi_source for c in corpus):
        raise ValueError("S4 protocol needs a single-source corpus")
    train_clips = synth.split(corpus, "train")
    if cfg.train_clips is not None:
        train_clips = train_clips[:cfg.train_clips]
    eval_clips = synth.split(corpus, cfg.eval_split)
    if cfg.eval_split == "train" and cfg.train_clips is not None:
        eval_clips = train_clips
    test_clips = synth.split(corpus, "test")

    model = ToyModel(cfg.model_config())
    adam = AdamState.for_store(model.store, lr=cfg.lr)
    meta = {"config": cfg_json, "config_hash": chash, "model": model.cfg.to_json()}
    columns = ["step", "epoch"] + LossReport.field_names() + list(EXTRA_COLUMNS)
    rows, evals = [], []
    step = 0
    ckpt = out / "checkpoint"
    good = model.store.snapshot()
    with open(out / "metrics.csv", "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(columns)
        for epoch in range(cfg.epochs):
            order = make_rng(cfg.seed, 1, epoch).permutation(len(train_clips))
            for lo in range(0, len(order), cfg.batch_size):
                batch = make_batch([train_clips[i] for i in order[lo:lo + cfg.batch_size]], cfg.protocol)
                rng = make_rng(cfg.seed, 2, step)
                holder = {}

                def fn():
                    holder["out"] = compute_losses(model, batch, rng, cfg, avm_hook)
                    return holder["out"].loss

                try:
                    forward_backward(fn, model.store)
                except (NonFiniteError, NonFiniteLossError) as e:
                    model.store.restore(good)
                    save_checkpoint(ckpt, model.store, adam, meta | {"aborted_at_step": step})
                    raise NumericalAbort(f"step {step}: {e}", ckpt) from e
                good = model.store.snapshot()
                adam_step(model.store, adam)
                r = holder["out"]
                row = {"step": step, "epoch": epoch, **r.report.as_dict(), **r.extras}
                wr.writerow([_fmt(row[c]) for c in columns])
                rows.append(row)
                step += 1
            fh.flush()
            if cfg.eval_every and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
                res = evaluate_model(model, eval_clips, seed=cfg.seed)
                ev = {"epoch": epoch, "split": cfg.eval_split, "miou": res.miou, "fscore": res.fscore,
                      "config_hash": chash}
                evals.append(ev)
                (out / f"eval_epoch_{epoch:03d}.json").write_text(json.dumps(ev | {"config": cfg_json}, indent=2))
                if progress:
                    log.info("epoch %d  loss %.4f  %s mIoU %.4f  F %.4f", epoch, rows[-1]["total"],
                             cfg.eval_split, res.miou, res.fscore)
    save_checkpoint(ckpt, model.store, adam, meta)
    test = evaluate_model(model, test_clips, seed=cfg.seed)
    final = {"split": "test", "miou": test.miou, "fscore": test.fscore,
             "codes": code_diagnostics(model, test_clips, "MS3" if cfg.protocol == "MS3" else "S4", cfg.seed),
             "config_hash": chash, "config": cfg_json}
    (out / "eval_test.json").write_text(json.dumps(final, indent=2))
    (out / "per_clip_test.json").write_text(json.dumps(test.per_clip, indent=1))
    wall = time.perf_counter() - t0
    record = {"config_hash": chash, "config": cfg_json, "steps": step, "final_eval": "eval_test.json",
              "checkpoint": str(ckpt.with_suffix(".json")), "wall_clock_s": wall,
              "evals": [f"eval_epoch_{e['epoch']:03d}.json" for e in evals]}
    (out / "run.json").write_text(json.dumps(record, indent=2))
    return RunRecord(out, chash, rows, evals, final, ckpt, wall)


def _fmt(v) -> str:
    return repr(float(v)) if isinstance(v, float) else str(v)


# ------------------------------------------------------------------ checkpoints

def load_model(checkpoint) -> tuple[ToyModel, TrainConfig]:
    _, manifest = read_checkpoint(checkpoint)
    meta = manifest["meta"]
    cfg = TrainConfig.from_json(meta["config"])
    model = ToyModel(cfg.model_config())
    load_checkpoint(checkpoint, model.store)
    return model, cfg


def eval_checkpoint(checkpoint, corpus, split_name: str = "test", seed: int | None = None) -> EvalResult:
    model, cfg = load_model(checkpoint)
    clips = synth.split(corpus, split_name)
    if not clips:
        raise ValueError(f"split {split_name!r} is empty")
    return evaluate_model(model, clips, seed=cfg.seed if seed is None else seed)


def export_latents(checkpoint, corpus, path, split_name: str = "test", source: str = "prior") -> int:
    """One CSV row per (clip, t, code) with the distribution means of c, s_a, s_v."""
    model, cfg = load_model(checkpoint)
    if not model.cfg.factorized:
        raise ValueError("latent export needs a factorised model")
    clips = synth.split(corpus, split_name)
    rows = []
    with no_grad():
        for i in range(0, len(clips), 20):
            chunk = clips[i:i + 20]
            batch = make_batch(chunk, cfg.protocol if source == "posterior" else "MS3")
            if source == "posterior":
                d = model.encode_posteriors(batch.frames, batch.audio, batch.target)
            else:
                d = model.encode_priors(batch.frames, batch.audio)
            codes = {"c": _mean_code(d["c"]).data, "s_a": d["s_a"].mu.data, "s_v": d["s_v"].mu.data}
            for b, clip in enumerate(chunk):
                for t in range(batch.T):
                    for name in ("c", "s_a", "s_v"):
                        rows.append((clip.clip_id, t, name, codes[name][b, t]))
    return write_latent_csv(path, rows, model.cfg.latent_dim)
