"""Experiment drivers. Each returns a list of ``ResultRow`` records."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .. import attack_blackbox as bb
from .. import attack_scaling as sa
from .. import attack_whitebox as wb
from ..classifier import Model, TrainConfig, accuracy, init, load_model, predict, save_model, train
from ..defenses import (
    DetectionSpec,
    apply_prevention,
    calibrate_threshold,
    detect_score,
    spectrum_detector,
)
from ..imagecore import AttackResult, Dataset, load_idx, make_rng, mse, save_ppm
from ..scaling import ScalerSpec, identify_mask, scale
from . import desk
from .config import ExperimentConfig
from .protocol import hr_predict, quantize_boundary, vote_correct
from .report import ResultRow, read_rows, render_svgs, summarize, write_rows, write_summary

# stream ids for Context.seed
S_HR, S_POOL, S_ATTACK, S_VOTE, S_ORACLE = 11, 12, 14, 15, 16


@dataclass
class Context:
    cfg: ExperimentConfig
    train: Dataset
    test: Dataset
    model: Model

    def seed(self, stream: int, index: int = 0) -> int:
        # hashed, so distinct (stream, index) pairs never share a seed
        return int(np.random.SeedSequence([self.cfg.seed, stream, index]).generate_state(1, np.uint64)[0])

    def rng(self, stream: int, index: int = 0) -> np.random.Generator:
        return make_rng(self.seed(stream, index))

    def scaler(self, kind: str | None = None) -> ScalerSpec:
        h, w, _ = self.model.input_shape
        return ScalerSpec.from_ratio(kind or self.cfg.scaler, (h, w), self.cfg.beta)

    def attacked(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(LR images, labels, HR sources) of the attacked images."""
        n = min(self.cfg.images, len(self.test))
        lr = self.test.images[:n]
        return lr, self.test.labels[:n], desk.make_hr(lr, self.cfg.beta, self.rng(S_HR))

    def pool(self, count: int = 60) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Disjoint images for targets, starting points and calibration."""
        start = min(self.cfg.images, len(self.test))
        lr = self.test.images[start : start + count]
        return lr, self.test.labels[start : start + count], desk.make_hr(lr, self.cfg.beta, self.rng(S_POOL))

    def defense(self, name: str, scaler: ScalerSpec):
        return None if name == "none" else desk.prevention(name, scaler, self.cfg.window)


def load_data(cfg: ExperimentConfig) -> tuple[Dataset, Dataset]:
    if cfg.dataset == "idx":
        tr = load_idx(cfg.idx_train_images, cfg.idx_train_labels)
        te = load_idx(cfg.idx_test_images, cfg.idx_test_labels, tr.class_count)
        return tr, te
    return desk.datasets(_setup(cfg))


def _setup(cfg: ExperimentConfig) -> desk.DeskSetup:
    return desk.DeskSetup(cfg.side, cfg.class_count, cfg.train_size, cfg.test_size, cfg.seed, cfg.epochs)


def load_context(cfg: ExperimentConfig) -> Context:
    tr, te = load_data(cfg)
    if cfg.model_path:
        model = load_model(cfg.model_path)
    elif cfg.dataset == "synth":
        model = desk.trained_model(_setup(cfg), cfg.adv_epsilon or None)
    else:
        tc = TrainConfig(epochs=cfg.epochs, seed=cfg.seed, adv_epsilon=cfg.adv_epsilon or None)
        model = train(init(cfg.seed, tr.shape, tr.class_count), tr, tc)
    return Context(cfg, tr, te, model)


# ---------------------------------------------------------------------------


def run_train(cfg: ExperimentConfig, out: Path, sink: list | None = None) -> list[ResultRow]:
    tr, te = load_data(cfg)
    tc = TrainConfig(epochs=cfg.epochs, seed=cfg.seed, adv_epsilon=cfg.adv_epsilon or None)
    model = train(init(cfg.seed, tr.shape, tr.class_count), tr, tc)
    save_model(model, out / "model.bin")
    rows = [] if sink is None else sink
    rows += [ResultRow("train", -1, "loss", float(e + 1), score=v) for e, v in enumerate(tc.history)]
    rows.append(ResultRow("train", -1, "train-accuracy", float(cfg.epochs), score=accuracy(model, tr)))
    rows.append(ResultRow("train", -1, "test-accuracy", float(cfg.epochs), score=accuracy(model, te)))
    return rows


def _targets(labels, pool_lr, pool_y) -> list[np.ndarray]:
    """For each label, the first pool image of a different class (cycling through the pool)."""
    out, k = [], 0
    for y in labels:
        while pool_y[k % len(pool_y)] == y:
            k += 1
        out.append(pool_lr[k % len(pool_y)])
        k += 1
    return out


def run_scale_attack(ctx: Context, out: Path, sink: list | None = None) -> list[ResultRow]:
    cfg = ctx.cfg
    spec = ctx.scaler()
    lr, y, hr = ctx.attacked()
    pool_lr, pool_y, pool_hr = ctx.pool()
    det = calibrate_threshold(DetectionSpec("unscaling", spec), pool_hr, cfg.percentile)
    med = desk.prevention("median", spec, cfg.window)
    save_ppm(identify_mask(spec).astype(float), _masks(out) / f"mask-{spec.kind}-b{cfg.beta}.ppm")
    rows = [] if sink is None else sink
    for i, (S, T) in enumerate(zip(hr, _targets(y, pool_lr, pool_y))):
        res = sa.craft(spec, S, T, sa.ScalingAttackConfig(epsilon=cfg.scale_epsilon, seed=ctx.seed(S_ATTACK, i)))
        ev = sa.evaluate(spec, S, T, res.image, ctx.model)
        qA = quantize_boundary(res.image)
        q_ok = sa.evaluate(spec, S, T, qA).residual <= cfg.scale_epsilon
        score = detect_score(det, res.image)
        base = dict(experiment="scale-attack", image=i, param=cfg.scale_epsilon, group=spec.kind)
        rows.append(ResultRow(mode="craft", scaled_l2=ev.scaled_l2, success=res.success, success_quantized=q_ok,
                              score=ev.residual, **base))
        rows.append(ResultRow(mode="flip", success=ev.flip, score=float(ev.flip), **base))
        flagged = score > det.threshold
        rows.append(ResultRow(mode="unscaling-flagged", success=flagged, score=score, **base))
        restored = scale(spec, apply_prevention(med, res.image))
        closer = mse(restored, scale(spec, S)) < mse(restored, T)
        rows.append(ResultRow(mode="median-restores", success=closer, score=mse(restored, T), **base))
    return rows


def _masks(out: Path) -> Path:
    p = out / "masks"
    p.mkdir(parents=True, exist_ok=True)
    return p


def _pgd_rows(ctx, pipe, group, mode, S, y, eps_s, beta, index) -> list[ResultRow]:
    cfg = ctx.cfg
    pc = wb.PgdConfig(eps_s * beta, steps=cfg.pgd_steps, seed=ctx.seed(S_ATTACK, index))
    results = wb.pgd_joint_batch(pipe, S, y, pc)
    return _verdict_rows(ctx, pipe, group, mode, results, y, eps_s, index)


def _verdict_rows(ctx, pipe, group, mode, results, y, param, index) -> list[ResultRow]:
    """Attack succeeds when the deployed pipeline (with the vote rule) gets the image wrong."""
    rows = []
    vote_rng = ctx.rng(S_VOTE, index)
    for i, r in enumerate(results):
        ok, okq = r.success, r.success
        if pipe.randomized:
            ok = not vote_correct(*hr_predict(pipe.model, pipe.scaler, pipe.defense, r.image, vote_rng, ctx.cfg.repeats), y[i])
            okq = not vote_correct(*hr_predict(pipe.model, pipe.scaler, pipe.defense, quantize_boundary(r.image),
                                               vote_rng, ctx.cfg.repeats), y[i])
        elif r.success:
            okq = bool(wb.predict_batch(pipe, quantize_boundary(r.image)[None], vote_rng)[0] != y[i])
        rows.append(ResultRow("whitebox", i, mode, float(param), scaled_l2=r.scaled_l2, success=bool(ok),
                              success_quantized=bool(okq), group=group))
    return rows


def run_whitebox(ctx: Context, out: Path, experiment: str = "whitebox", scaler_kind: str | None = None,
                 defenses=None, sink: list | None = None) -> list[ResultRow]:
    cfg = ctx.cfg
    spec = ctx.scaler(scaler_kind)
    lr, y, hr = ctx.attacked()
    lr_in = scale(spec, hr)  # what the model sees without any defense
    vanilla = wb.identity_pipeline(ctx.model)
    rows = [] if sink is None else sink
    grid = cfg.eps_grid if cfg.attack == "pgd" else cfg.kappa_grid
    for g, param in enumerate(grid):
        if cfg.attack == "pgd":
            rows += _pgd_rows(ctx, vanilla, f"{spec.kind}-vanilla", "pgd-vanilla", lr_in, y, param, 1.0, g)
        else:
            cc = wb.CwConfig(param, cfg.cw_binary_steps, cfg.cw_iterations, cfg.cw_learning_rate, ctx.seed(S_ATTACK, g))
            rows += _verdict_rows(ctx, vanilla, f"{spec.kind}-vanilla", "cw-vanilla",
                                  wb.cw_joint_batch(vanilla, lr_in, y, cc), y, param, g)
        for d, name in enumerate(defenses or cfg.defense):
            pipe = wb.Pipeline(ctx.model, spec, ctx.defense(name, spec))
            idx = 1000 * (d + 1) + g
            if cfg.attack == "pgd":
                rows += _pgd_rows(ctx, pipe, name, "pgd-joint", hr, y, param, spec.beta, idx)
            else:
                cc = wb.CwConfig(param, cfg.cw_binary_steps, cfg.cw_iterations, cfg.cw_learning_rate,
                                 ctx.seed(S_ATTACK, idx))
                rows += _verdict_rows(ctx, pipe, name, "cw-joint", wb.cw_joint_batch(pipe, hr, y, cc), y, param, idx)
    for r in rows:
        r.experiment = experiment
    return rows


def run_robust(ctx: Context, out: Path, sink: list | None = None) -> list[ResultRow]:
    return run_whitebox(ctx, out, "robust-scalers", "area", ("none",), sink)


def blackbox_run(ctx: Context, spec: ScalerSpec, defense_name: str, mode: str, budget: int):
    """Yield ``(index, label, source, AttackResult, oracle)`` for every attacked image."""
    lr, y, hr = ctx.attacked()
    _, pool_y, pool_hr = ctx.pool()
    defense = ctx.defense(defense_name, spec)
    for i in range(len(hr)):
        oracle = bb.pipeline_oracle(ctx.model, spec, defense, int(y[i]), budget, ctx.rng(S_ORACLE, i))
        cands = [pool_hr[j] for j in range(len(pool_y)) if pool_y[j] != y[i]]
        hc = bb.HsjConfig(budget=budget, mode=mode, quantiles=tuple(ctx.cfg.quantiles), seed=ctx.seed(S_ATTACK, i))
        try:
            res = bb.attack(oracle, spec, defense, hr[i], hc, cands)
        except bb.InitializationError:
            # e.g. lr_subspace against median: every projected start is filtered back
            res = AttackResult.from_images(hr[i], hr[i], spec.beta, False, queries=oracle.count,
                                           info={"trajectory": bb.Trajectory(), "mode": mode})
        yield i, int(y[i]), hr[i], res, oracle


def run_blackbox(ctx: Context, out: Path, sink: list | None = None) -> list[ResultRow]:
    cfg = ctx.cfg
    spec = ctx.scaler()
    det = DetectionSpec("unscaling", spec)
    budget = max(cfg.budget_grid)
    rows = [] if sink is None else sink
    for name in cfg.defense:
        defense = ctx.defense(name, spec)
        for mode in cfg.modes:
            if mode == "lr_subspace_median" and name != "median":
                continue
            for i, y, S, res, oracle in blackbox_run(ctx, spec, name, mode, budget):
                if res.queries != oracle.count:
                    raise RuntimeError("query accounting mismatch")
                traj = res.info["trajectory"]
                check_rng = ctx.rng(S_VOTE, i)
                for b in cfg.budget_grid:
                    A = traj.best_image_at(b)
                    found = A is not None
                    if found:
                        d = quantize_boundary(A)
                        d = d if defense is None else apply_prevention(defense, d, check_rng)
                        okq = bool(predict(ctx.model, scale(spec, d)) != y)
                    rows.append(ResultRow("blackbox", i, mode, float(b), scaled_l2=traj.best_at(b), success=found,
                                          success_quantized=found and okq, queries=min(b, res.queries),
                                          score=detect_score(det, A) if found else math.nan, group=name))
    return rows


def run_detect(ctx: Context, out: Path, sink: list | None = None) -> list[ResultRow]:
    cfg = ctx.cfg
    spec = ctx.scaler()
    lr, y, hr = ctx.attacked()
    pool_lr, pool_y, pool_hr = ctx.pool()
    detectors = {}
    for kind in cfg.detectors:
        if kind == "spectrum":
            detectors[kind] = spectrum_detector()
        else:
            base = DetectionSpec(kind, spec if kind == "unscaling" else None)
            detectors[kind] = calibrate_threshold(base, pool_hr, cfg.percentile)
    populations = {"benign": list(hr)}
    populations["scaling-attack"] = [
        sa.craft(spec, S, T, sa.ScalingAttackConfig(epsilon=cfg.scale_epsilon)).image
        for S, T in zip(hr, _targets(y, pool_lr, pool_y))
    ]
    budget = max(cfg.budget_grid)
    populations["joint-blackbox"] = [res.image for _, _, _, res, _ in blackbox_run(ctx, spec, "none", "lr_subspace", budget)]
    rows = [] if sink is None else sink
    for kind, det in detectors.items():
        for pop, imgs in populations.items():
            for i, img in enumerate(imgs):
                s = detect_score(det, img)
                rows.append(ResultRow("detect", i, pop, float(cfg.percentile), success=s > det.threshold,
                                      success_quantized=detect_score(det, quantize_boundary(img)) > det.threshold,
                                      score=s, group=kind))
    return rows


RUNNERS = {
    "scale-attack": run_scale_attack,
    "whitebox": run_whitebox,
    "blackbox": run_blackbox,
    "detect": run_detect,
    "robust-scalers": run_robust,
}


def finish(rows: list[ResultRow], out: Path) -> None:
    write_rows(rows, out / "rows.csv")
    report(out)


def report(out: Path) -> None:
    """Recompute summary.csv from rows.csv and the SVGs from summary.csv."""
    summary = summarize(read_rows(out / "rows.csv"))
    write_summary(summary, out / "summary.csv")
    render_svgs(summary, out)


def run(cfg: ExperimentConfig) -> Path:
    """Run one experiment; rows are flushed even when a grid point fails."""
    from .config import dump_config

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if cfg.experiment == "report":
        report(out)
        return out
    (out / "config.txt").write_text(dump_config(cfg))
    t0 = time.perf_counter()
    rows: list[ResultRow] = []
    try:
        if cfg.experiment == "train":
            run_train(cfg, out, rows)
        else:
            RUNNERS[cfg.experiment](load_context(cfg), out, sink=rows)
    finally:
        if rows:
            finish(rows, out)
        # wall time lives outside rows.csv so that file stays byte-reproducible
        (out / "timing.csv").write_text(f"experiment,wall_seconds\r\n{cfg.experiment},{time.perf_counter() - t0:.3f}\r\n")
    return out
