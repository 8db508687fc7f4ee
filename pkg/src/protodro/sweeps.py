"""Sweep orchestration: disturbance grids, weight heatmaps, CSV persistence.

Every sweep writes three kinds of artifact into its output directory:
per-cell CSV rows (one line per level x method x seed), an aggregate CSV
(mean and std over seeds), and a manifest with the config hash, version,
wall time, and per-cell status. Reals are serialized with 17 significant
digits so reruns are byte-comparable; wall times live only in the manifest.
"""

from __future__ import annotations

import os
import subprocess
import time
from dataclasses import dataclass, field

import numpy as np

from . import __version__
from .config import ExperimentConfig, config_hash, shift_at_level
from .dro import DroConfig
from .metrics import ClassificationReport, eval_classification, eval_regression
from .models import (
    NoiseSpec,
    RobustClassifier,
    empirical_prior,
    train_erm,
    train_erm_regressor,
    train_fewshot,
    train_ot_adapt,
    train_ot_adapt_regressor,
    train_pgdro_classifier,
    train_pgdro_regressor,
    train_saa,
    train_wdro,
)
from .numkit import SeededRng, gaussian_sample
from .priors import PriorConfig, SupportSet, build_priors, compute_class_stats
from .synthgen import DomainPair, make_domain_pair, make_regression

DATA_STREAM = 7
REGRESSION_STREAM = 8

CLASSIFICATION_CELL_COLUMNS = (
    "config_hash", "level", "method", "seed", "avg_accuracy", "worst10_accuracy"
)
REGRESSION_CELL_COLUMNS = (
    "config_hash", "level", "method", "seed", "mse", "mae", "worst10_mse"
)


def format_real(value: float) -> str:
    return format(float(value), ".17g")


def write_csv(path, columns, rows) -> None:
    """Plain comma-separated text, one header line, deterministic order."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(columns) + "\n")
        for row in rows:
            fh.write(",".join(row) + "\n")


def version_string() -> str:
    try:
        rev = subprocess.run(
            ["git", "rev-parse", "--short", "HEAD"],
            capture_output=True, text=True, timeout=5, check=True,
        ).stdout.strip()
        return f"{__version__}+{rev}"
    except (OSError, subprocess.SubprocessError):
        return __version__


@dataclass
class CellStatus:
    level: float
    method: str
    seed: int
    status: str
    seconds: float


@dataclass
class SweepResult:
    """What a sweep produced: aggregate values plus cell bookkeeping."""

    config_digest: str
    cells: list[CellStatus] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    output_files: list[str] = field(default_factory=list)

    def failed_cells(self) -> list[CellStatus]:
        return [c for c in self.cells if c.status != "ok"]


def write_manifest(path, cfg: ExperimentConfig, result: SweepResult,
                   wall_seconds: float) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"config_hash = {result.config_digest}\n")
        fh.write(f"version = {version_string()}\n")
        fh.write(f"task = {cfg.task}\n")
        fh.write(f"seeds = {','.join(str(s) for s in cfg.seeds)}\n")
        fh.write(f"wall_seconds = {wall_seconds:.3f}\n")
        for cell in result.cells:
            fh.write(
                f"cell level={format_real(cell.level)} method={cell.method} "
                f"seed={cell.seed} status={cell.status} seconds={cell.seconds:.3f}\n"
            )


def build_adapted_priors(pair: DomainPair, prior_cfg: PriorConfig) -> list:
    """Phase-I pipeline: source class stats, soft-min OT coupling, priors."""
    stats = compute_class_stats(pair.source.features, pair.source.labels)
    return build_priors(stats, pair.source.per_class(),
                        pair.target_train_supports, prior_cfg)


def _classification_predictions(method: str, pair: DomainPair,
                                cfg: ExperimentConfig, seed: int) -> np.ndarray:
    """Train one method and return its test-set class predictions."""
    n_classes = cfg.generator.n_classes
    train_cfg = type(cfg.train)(**{**cfg.train.__dict__, "seed": seed})
    test = pair.target_test.features
    if method == "erm":
        return train_erm(pair.source, n_classes, train_cfg).head.predict(test)
    if method == "fewshot":
        return train_fewshot(
            pair.target_train_supports, n_classes, train_cfg
        ).head.predict(test)
    if method == "ot":
        return train_ot_adapt(
            pair.source, pair.target_train_supports, n_classes, train_cfg
        ).head.predict(test)
    if method == "saa":
        return train_saa(
            pair.target_train_supports, NoiseSpec(), n_classes, train_cfg
        ).head.predict(test)
    if method == "wdro":
        result = train_wdro(
            pair.target_train_supports, n_classes, train_cfg, cfg.dro
        )
        reference = empirical_prior(pair.target_train_supports.features)
        clf = RobustClassifier(result.head, [reference] * n_classes, cfg.dro)
        return clf.predict(test)
    if method == "pgdro":
        prior_cfg = type(cfg.prior)(**{**_prior_kwargs(cfg.prior), "atom_seed": seed})
        priors = build_adapted_priors(pair, prior_cfg)
        # robust loss sees base samples and supports alike, batched together
        data = SupportSet(
            features=np.vstack(
                [pair.source.features, pair.target_train_supports.features]
            ),
            labels=np.concatenate(
                [pair.source.labels, pair.target_train_supports.labels]
            ),
        )
        result = train_pgdro_classifier(data, priors, train_cfg, cfg.dro)
        return RobustClassifier(result.head, priors, cfg.dro).predict(test)
    raise ValueError(f"method {method!r} has no classification runner")


def _prior_kwargs(prior_cfg: PriorConfig) -> dict:
    return {
        "eps_sample": prior_cfg.eps_sample,
        "eps_class": prior_cfg.eps_class,
        "covariance_inflation": prior_cfg.covariance_inflation,
        "ridge": prior_cfg.ridge,
        "atoms_per_component": prior_cfg.atoms_per_component,
        "ot_tol": prior_cfg.ot_tol,
        "ot_max_iters": prior_cfg.ot_max_iters,
        "atom_seed": prior_cfg.atom_seed,
    }


def _regression_predictions(method: str, pair: DomainPair, task,
                            cfg: ExperimentConfig, seed: int) -> np.ndarray:
    n_classes = cfg.generator.n_classes
    train_cfg = type(cfg.train)(**{**cfg.train.__dict__, "seed": seed})
    test = pair.target_test.features
    if method == "erm":
        result = train_erm_regressor(
            pair.source.features, task.source_responses, train_cfg
        )
        return result.head.predict_response(test)
    if method == "ot":
        result = train_ot_adapt_regressor(
            pair.source, task.source_responses, pair.target_train_supports, train_cfg
        )
        return result.head.predict_response(test)
    if method == "pgdro":
        prior_cfg = type(cfg.prior)(**{**_prior_kwargs(cfg.prior), "atom_seed": seed})
        priors = build_adapted_priors(pair, prior_cfg)
        data = SupportSet(
            features=np.vstack(
                [pair.source.features, pair.target_train_supports.features]
            ),
            labels=np.concatenate(
                [pair.source.labels, pair.target_train_supports.labels]
            ),
        )
        responses = np.concatenate([task.source_responses, task.support_responses])
        result = train_pgdro_regressor(data, responses, priors, train_cfg, cfg.dro)
        return result.head.predict_response(test)
    raise ValueError(f"method {method!r} has no regression runner")


def make_pair(cfg: ExperimentConfig, level: float, seed: int) -> DomainPair:
    gen = cfg.generator
    return make_domain_pair(
        gen.n_classes, gen.dim, gen.n_train, gen.n_test,
        shift_at_level(cfg, level), SeededRng(seed, DATA_STREAM),
        shots=gen.shots, mean_scale=gen.mean_scale,
        separation=gen.separation, eig_range=gen.eig_range,
    )


def run_table1_sweep(cfg: ExperimentConfig, out_dir=None) -> SweepResult:
    """Disturbance-level grid over methods and seeds, classification."""
    if cfg.task != "classification":
        raise ValueError("run_table1_sweep needs a classification config")
    out_dir = out_dir or cfg.resolve_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    digest = config_hash(cfg)
    result = SweepResult(config_digest=digest)
    t_start = time.time()

    cell_rows = []
    scores: dict = {}
    for level in cfg.levels:
        pairs = {seed: make_pair(cfg, level, seed) for seed in cfg.seeds}
        for method in cfg.methods:
            for seed in cfg.seeds:
                t0 = time.time()
                try:
                    pred = _classification_predictions(method, pairs[seed], cfg, seed)
                    report = eval_classification(
                        pred, pairs[seed].target_test.labels, cfg.generator.n_classes
                    )
                    status = "ok"
                except Exception as exc:  # contain the cell, keep sweeping
                    report = None
                    status = f"failed:{type(exc).__name__}"
                seconds = time.time() - t0
                result.cells.append(CellStatus(level, method, seed, status, seconds))
                if report is None:
                    continue
                scores.setdefault((level, method), []).append(report)
                cell_rows.append((
                    digest, format_real(level), method, str(seed),
                    format_real(report.avg_accuracy),
                    format_real(report.worst10_accuracy),
                ))

    cells_path = os.path.join(out_dir, "cells.csv")
    write_csv(cells_path, CLASSIFICATION_CELL_COLUMNS, cell_rows)
    result.output_files.append(cells_path)

    agg_columns = ["config_hash", "level"]
    for method in cfg.methods:
        agg_columns += [
            f"{method}_avg_mean", f"{method}_avg_std",
            f"{method}_w10_mean", f"{method}_w10_std",
        ]
    agg_rows = []
    for level in cfg.levels:
        row = [digest, format_real(level)]
        for method in cfg.methods:
            reports = scores.get((level, method), [])
            if reports:
                avgs = np.array([r.avg_accuracy for r in reports])
                tails = np.array([r.worst10_accuracy for r in reports])
                row += [
                    format_real(avgs.mean()), format_real(avgs.std()),
                    format_real(tails.mean()), format_real(tails.std()),
                ]
                result.aggregate[(level, method)] = (
                    float(avgs.mean()), float(tails.mean())
                )
            else:
                row += ["nan"] * 4
        agg_rows.append(tuple(row))
    table_path = os.path.join(out_dir, "table1.csv")
    write_csv(table_path, agg_columns, agg_rows)
    result.output_files.append(table_path)

    manifest_path = os.path.join(out_dir, "manifest.txt")
    write_manifest(manifest_path, cfg, result, time.time() - t_start)
    result.output_files.append(manifest_path)
    return result


def run_regression_sweep(cfg: ExperimentConfig, out_dir=None) -> SweepResult:
    """Disturbance-level grid over regression methods and seeds."""
    if cfg.task != "regression":
        raise ValueError("run_regression_sweep needs a regression config")
    out_dir = out_dir or cfg.resolve_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    digest = config_hash(cfg)
    result = SweepResult(config_digest=digest)
    t_start = time.time()

    cell_rows = []
    scores = {}
    for level in cfg.levels:
        tasks = {}
        for seed in cfg.seeds:
            pair = make_pair(cfg, level, seed)
            tasks[seed] = (pair, make_regression(
                pair, SeededRng(seed, REGRESSION_STREAM), cfg.generator.noise_sigma
            ))
        for method in cfg.methods:
            for seed in cfg.seeds:
                pair, task = tasks[seed]
                t0 = time.time()
                try:
                    pred = _regression_predictions(method, pair, task, cfg, seed)
                    report = eval_regression(pred, task.test_responses)
                    status = "ok"
                except Exception as exc:
                    report = None
                    status = f"failed:{type(exc).__name__}"
                seconds = time.time() - t0
                result.cells.append(CellStatus(level, method, seed, status, seconds))
                if report is None:
                    continue
                scores.setdefault((level, method), []).append(report)
                cell_rows.append((
                    digest, format_real(level), method, str(seed),
                    format_real(report.mse), format_real(report.mae),
                    format_real(report.worst10_mse),
                ))

    cells_path = os.path.join(out_dir, "regression_cells.csv")
    write_csv(cells_path, REGRESSION_CELL_COLUMNS, cell_rows)
    result.output_files.append(cells_path)

    agg_columns = ["config_hash", "level"]
    for method in cfg.methods:
        agg_columns += [
            f"{method}_mse_mean", f"{method}_mse_std",
            f"{method}_w10mse_mean", f"{method}_w10mse_std",
        ]
    agg_rows = []
    for level in cfg.levels:
        row = [digest, format_real(level)]
        for method in cfg.methods:
            reports = scores.get((level, method), [])
            if reports:
                mses = np.array([r.mse for r in reports])
                tails = np.array([r.worst10_mse for r in reports])
                row += [
                    format_real(mses.mean()), format_real(mses.std()),
                    format_real(tails.mean()), format_real(tails.std()),
                ]
                result.aggregate[(level, method)] = (
                    float(mses.mean()), float(tails.mean())
                )
            else:
                row += ["nan"] * 4
        agg_rows.append(tuple(row))
    table_path = os.path.join(out_dir, "regression_table.csv")
    write_csv(table_path, agg_columns, agg_rows)
    result.output_files.append(table_path)

    manifest_path = os.path.join(out_dir, "regression_manifest.txt")
    write_manifest(manifest_path, cfg, result, time.time() - t_start)
    result.output_files.append(manifest_path)
    return result


def nested_supports(target_params, k_max: int, rng: SeededRng) -> np.ndarray:
    """Per-class draws of k_max supports whose prefixes nest across budgets."""
    return np.stack([
        gaussian_sample(params, k_max, rng.child(c))
        for c, params in enumerate(target_params)
    ])


def run_heatmap(cfg: ExperimentConfig, shots_list=(1, 4, 16),
                out_dir=None) -> SweepResult:
    """Adaptive-weight matrices at growing support budgets.

    Support draws nest across budgets (the k-shot set is a prefix of the
    4k-shot set) so the diagonal-mass trend reflects budget, not redraw
    noise. Matrices are written one CSV per (seed, k) with classes as
    columns; the trace CSV records the mean diagonal mass.
    """
    out_dir = out_dir or cfg.resolve_output_dir()
    os.makedirs(out_dir, exist_ok=True)
    digest = config_hash(cfg)
    result = SweepResult(config_digest=digest)
    t_start = time.time()
    k_max = max(shots_list)
    n_classes = cfg.generator.n_classes

    trace_rows = []
    for seed in cfg.seeds:
        pair = make_pair(cfg, cfg.shift.lambda_cov, seed)
        draws = nested_supports(
            pair.target_params, k_max, SeededRng(seed, DATA_STREAM).child(99)
        )
        stats = compute_class_stats(pair.source.features, pair.source.labels)
        protos = pair.source.per_class()
        for k in shots_list:
            t0 = time.time()
            supports = SupportSet(
                features=draws[:, :k, :].reshape(n_classes * k, cfg.generator.dim),
                labels=np.repeat(np.arange(n_classes), k),
            )
            prior_cfg = type(cfg.prior)(**{
                **_prior_kwargs(cfg.prior), "atoms_per_component": 1,
                "atom_seed": seed,
            })
            try:
                priors = build_priors(stats, protos, supports, prior_cfg)
                status = "ok"
            except Exception as exc:
                result.cells.append(
                    CellStatus(float(k), "heatmap", seed,
                               f"failed:{type(exc).__name__}", time.time() - t0)
                )
                continue
            weights = np.stack([p.weights for p in priors], axis=1)  # B x C
            diag_mass = float(np.mean(np.diag(weights)))
            matrix_path = os.path.join(out_dir, f"heatmap_seed{seed}_k{k}.csv")
            write_csv(
                matrix_path,
                ["base_class"] + [f"target_{c}" for c in range(n_classes)],
                [
                    tuple([str(b)] + [format_real(weights[b, c])
                                      for c in range(n_classes)])
                    for b in range(weights.shape[0])
                ],
            )
            result.output_files.append(matrix_path)
            trace_rows.append((
                digest, str(seed), str(k), format_real(diag_mass)
            ))
            result.aggregate[(seed, k)] = diag_mass
            result.cells.append(
                CellStatus(float(k), "heatmap", seed, status, time.time() - t0)
            )

    trace_path = os.path.join(out_dir, "heatmap_trace.csv")
    write_csv(trace_path, ("config_hash", "seed", "shots", "diagonal_mass"),
              trace_rows)
    result.output_files.append(trace_path)
    manifest_path = os.path.join(out_dir, "heatmap_manifest.txt")
    write_manifest(manifest_path, cfg, result, time.time() - t_start)
    result.output_files.append(manifest_path)
    return result
