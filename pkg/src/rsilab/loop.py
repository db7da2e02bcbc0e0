"""Round loop: generate, curate, weight, fine-tune, evaluate, advance.

Round 0 fits the base model on world data and evaluates it; each later
round generates a synthetic pool with the current model, curates it
according to the active strategy, fine-tunes from the current weights,
checkpoints, and evaluates on frozen held-out conditions. The pool the
base model generates in round 1 is frozen as the reference set for
distance weighting across the whole run.

Every piece of randomness is keyed by (seed, purpose, round), never by
execution history, so an interrupted run resumed from its manifest
reproduces the uninterrupted run bit for bit. Artifacts are persisted
before the manifest advances, so a crash loses at most the round in
progress.
"""

from __future__ import annotations

import csv
import json
import logging
import os
import shutil
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .config import (
    RunConfig,
    apply_ablation_value,
    config_hash,
    strategy_preset,
)
from .curation import (
    CurationConfig,
    Sample,
    calibrate_from_reference,
    distances_to_reference,
    preference_sample,
    score_pool,
    weights_from_distances,
    write_curation_csv,
)
from .diffusion import (
    TrainExample,
    build_denoiser,
    generate_batch,
    load_checkpoint,
    make_schedule,
    save_checkpoint,
    train,
)
from .metrics import (
    EvalSettings,
    calibrate_density_threshold,
    evaluate_round,
    median_heuristic_bandwidth,
)
from .numkit import RngStream
from .prompts import (
    EmbeddingNormLimit,
    PromptRecord,
    build_round_prompts,
    filter_prompts,
    generate_prompt_pool,
    kmeans,
    load_pool,
    make_eval_conditions,
    save_pool,
    select_diverse,
)
from .world import build_world, sample_world, world_to_config

__all__ = [
    "RunError",
    "RunDirectoryExists",
    "ConfigMismatch",
    "TrainingDiverged",
    "run_rsi",
    "run_baseline_random",
    "run_baseline_sft",
    "resume",
    "run_ablation",
    "worker_count",
    "MANIFEST_NAME",
]

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
MANIFEST_NAME = "manifest.json"
METRICS_CSV_COLUMNS = [
    "run", "round", "mmd_to_reference", "mean_composite",
    "hallucination_rate", "mean_alignment", "mean_aesthetic",
]


class RunError(RuntimeError):
    """Base class; ``kind`` is 'config' or 'runtime' for exit-code mapping."""

    kind = "runtime"


class RunDirectoryExists(RunError):
    kind = "config"


class ConfigMismatch(RunError):
    kind = "config"


class TrainingDiverged(RunError):
    kind = "runtime"


def worker_count() -> int:
    """Worker cap from RSILAB_THREADS, default hardware parallelism."""
    raw = os.environ.get("RSILAB_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            raise RunError(f"RSILAB_THREADS must be an integer, got {raw!r}")
    return os.cpu_count() or 1


# ---------------------------------------------------------------------------
# Run directory layout
# ---------------------------------------------------------------------------


class RunPaths:
    def __init__(self, root: str):
        self.root = root

    @property
    def manifest(self) -> str:
        return os.path.join(self.root, MANIFEST_NAME)

    @property
    def pool(self) -> str:
        return os.path.join(self.root, "pool.json")

    @property
    def eval_conditions(self) -> str:
        return os.path.join(self.root, "eval_conditions.json")

    @property
    def reference(self) -> str:
        return os.path.join(self.root, "reference.npy")

    @property
    def metrics_csv(self) -> str:
        return os.path.join(self.root, "metrics.csv")

    def round_dir(self, i: int) -> str:
        return os.path.join(self.root, "rounds", f"round_{i}")

    def checkpoint(self, i: int) -> str:
        return os.path.join(self.round_dir(i), "model.ckpt")

    def curation_csv(self, i: int) -> str:
        return os.path.join(self.round_dir(i), "curation.csv")

    def metrics_json(self, i: int) -> str:
        return os.path.join(self.round_dir(i), "metrics.json")


def _atomic_json(path: str, obj) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
    os.replace(tmp, path)


def _write_manifest(paths: RunPaths, manifest: dict) -> None:
    _atomic_json(paths.manifest, manifest)


def _as_run_dir(path: str) -> str:
    """Accept either a run directory or a path to its manifest."""
    if os.path.basename(path) == MANIFEST_NAME:
        return os.path.dirname(path) or "."
    return path


def load_manifest(run_dir: str) -> dict:
    path = RunPaths(_as_run_dir(run_dir)).manifest
    if not os.path.exists(path):
        raise RunError(f"no manifest at {path}")
    with open(path) as fh:
        return json.load(fh)


# ---------------------------------------------------------------------------
# Deterministic run context
# ---------------------------------------------------------------------------


@dataclass
class _RunContext:
    config: RunConfig
    paths: RunPaths
    root: RngStream
    world: object
    sched: object
    pool_conditions: list
    working_pool: list
    eval_conditions: list
    eval_settings: EvalSettings
    d0_eval: np.ndarray | None
    kmeans_trace: list[float] | None


def _prepare(config: RunConfig, paths: RunPaths) -> _RunContext:
    """Build every pre-round artifact, loading persisted ones when present."""
    root = RngStream(config.seed)
    world = build_world(config.world)

    if os.path.exists(paths.pool):
        pool = load_pool(paths.pool)
    else:
        if config.prompts.source == "generated":
            pool = generate_prompt_pool(
                world, config.prompts.size, config.prompts.vague_fraction,
                root.child("pool"), jitter=config.prompts.jitter,
            )
        else:
            pool = load_pool(config.prompts.source)
        save_pool(paths.pool, pool)

    if os.path.exists(paths.eval_conditions):
        evals = load_pool(paths.eval_conditions)
    else:
        evals = make_eval_conditions(world)
        save_pool(paths.eval_conditions, evals)

    world.register(pool)
    world.register(evals)

    kmeans_trace = None
    if config.strategy.use_prompt_filtering:
        records = filter_prompts(
            [PromptRecord(c) for c in pool],
            [EmbeddingNormLimit(config.prompts.norm_limit)],
        )
        if not records:
            raise RunError("prompt filtering removed every record")
        k = config.prompts.n_clusters or len(world.groups)
        emb = np.stack([r.condition.embedding for r in records])
        model = kmeans(emb, min(k, len(records)), rng=root.child("kmeans"))
        kmeans_trace = model.inertia_trace
        working = [r.condition for r in
                   select_diverse(records, model, config.prompts.per_cluster)]
    else:
        working = list(pool)

    sched = make_schedule(
        config.diffusion.timesteps, config.diffusion.beta_min, config.diffusion.beta_max
    )

    eval_settings = EvalSettings(
        n_samples=config.evaluation.n_samples,
        alignment_weight=config.curation.alignment_weight,
        aesthetic_weight=config.curation.aesthetic_weight,
        bandwidth=config.evaluation.mmd_bandwidth,
        density_threshold=calibrate_density_threshold(
            world, evals, config.evaluation.hallucination_quantile,
            config.evaluation.calibration_draws, root.child("halluc-calib"),
        ),
    )
    return _RunContext(
        config=config, paths=paths, root=root, world=world, sched=sched,
        pool_conditions=pool, working_pool=working, eval_conditions=evals,
        eval_settings=eval_settings, d0_eval=None, kmeans_trace=kmeans_trace,
    )


def _eval_condition_ids(ctx: _RunContext) -> list[int]:
    n = ctx.config.evaluation.n_samples
    evals = ctx.eval_conditions
    per, extra = n // len(evals), n % len(evals)
    conds: list[int] = []
    for i, c in enumerate(evals):
        conds.extend([c.id] * (per + (1 if i < extra else 0)))
    return conds


def _attach_reference(ctx: _RunContext) -> None:
    """Freeze the evaluation reference: the world law behind the data.

    The full pipeline is supposed to keep generating world-like points
    while unfiltered self-training drifts away, so shift is measured
    against an ideal-law draw on the held-out conditions. The kernel
    bandwidth comes from within-condition distances of that draw unless
    the config pins one.
    """
    conds = _eval_condition_ids(ctx)
    blocks, arr = [], np.asarray(conds)
    for c in sorted(set(conds)):
        blocks.append(sample_world(ctx.world, c, int((arr == c).sum()),
                                   ctx.root.child("eval-ref", c)))
    X = np.vstack(blocks)
    ctx.d0_eval = X
    if ctx.eval_settings.bandwidth is None:
        # pooled median lands on the between-mode scale; within-condition
        # medians resolve drift at the mode scale
        ctx.eval_settings.bandwidth = float(np.median(
            [median_heuristic_bandwidth(b) for b in blocks]
        ))


def _new_manifest(config: RunConfig, kind: str, ctx: _RunContext) -> dict:
    return {
        "manifest_version": MANIFEST_VERSION,
        "kind": kind,
        "seed": config.seed,
        "config": config.model_dump(),
        "config_hash": config_hash(config),
        "world": world_to_config(ctx.world),
        "status": "in-progress",
        "error": None,
        "paths": {
            "pool": "pool.json",
            "eval_conditions": "eval_conditions.json",
            "reference": "reference.npy",
        },
        "resolved": {
            "beta": config.curation.beta,
            "sigma_sq": config.curation.sigma_sq,
            "mmd_bandwidth": None,
            "density_threshold": ctx.eval_settings.density_threshold,
            "pool_conditions": len(ctx.pool_conditions),
            "working_pool_conditions": len(ctx.working_pool),
            "kmeans_inertia_trace": ctx.kmeans_trace,
            "init_scheme": "uniform-fan-in",
        },
        "rounds": [],
    }


# ---------------------------------------------------------------------------
# Round execution
# ---------------------------------------------------------------------------


def _require_finite_model(model, where: str):
    for arr in model.mlp.to_arrays() + [model.embeddings]:
        if not np.all(np.isfinite(arr)):
            raise TrainingDiverged(f"non-finite parameters after {where}")


def _fit_base_model(ctx: _RunContext):
    """Round 0: fit the denoiser to world draws for every known condition."""
    cfg = ctx.config
    conds = ctx.pool_conditions + ctx.eval_conditions
    model = build_denoiser(
        conds, cfg.diffusion.data_dim, cfg.diffusion.hidden,
        cfg.diffusion.embed_dim, ctx.root.child("init"),
        n_time_freqs=cfg.diffusion.time_freqs,
    )
    examples = []
    for c in conds:
        X = sample_world(ctx.world, c.id, cfg.base_model.draws_per_condition,
                         ctx.root.child("base-data", c.id))
        examples.extend(TrainExample(x, c.id) for x in X)
    trace: list[float] = []
    if cfg.base_model.epochs > 0:
        model, trace = train(
            model, examples, ctx.sched, cfg.base_model.epochs,
            cfg.diffusion.batch_size, ctx.root.child("base-train"),
            lr=cfg.diffusion.lr,
        )
        if not np.all(np.isfinite(trace)):
            raise TrainingDiverged("base model training diverged")
    _require_finite_model(model, "base training")
    return model, trace


def _evaluate(ctx: _RunContext, model, i: int):
    return evaluate_round(
        model, ctx.eval_conditions, ctx.world, ctx.d0_eval, ctx.eval_settings,
        ctx.sched, ctx.root.child("round", i, "eval"), i,
    )


def _round_entry(ctx: _RunContext, i: int, metrics, train_trace, selected: int | None) -> dict:
    rel = os.path.relpath
    entry = {
        "round": i,
        "checkpoint": rel(ctx.paths.checkpoint(i), ctx.paths.root),
        "metrics": rel(ctx.paths.metrics_json(i), ctx.paths.root),
        "curation": rel(ctx.paths.curation_csv(i), ctx.paths.root) if selected is not None else None,
        "selected": selected,
        "final_train_loss": train_trace[-1] if train_trace else None,
        "train_loss": train_trace,
    }
    _atomic_json(ctx.paths.metrics_json(i), metrics.to_dict())
    return entry


def _persist_round(ctx, manifest, i, model, metrics, train_trace, selected=None):
    os.makedirs(ctx.paths.round_dir(i), exist_ok=True)
    save_checkpoint(ctx.paths.checkpoint(i), model, ctx.sched)
    manifest["rounds"].append(_round_entry(ctx, i, metrics, train_trace, selected))
    _write_manifest(ctx.paths, manifest)


def _uniform_selection(n: int, k: int, rng: RngStream) -> list[int]:
    return sorted(int(j) for j in rng.permutation(n)[:k])


def _run_round(ctx: _RunContext, manifest: dict, model, i: int):
    """One self-training round: generate, curate, weight, fine-tune."""
    cfg = ctx.config
    strat = cfg.strategy
    prompts = build_round_prompts(
        ctx.working_pool, i, cfg.prompts.per_round, ctx.root,
        exclude=_used_ids(manifest) if cfg.prompts.disjoint_rounds else None,
    )
    if cfg.prompts.disjoint_rounds:
        _record_used(manifest, prompts)
    gen_conds = [c.id for c in prompts for _ in range(cfg.samples_per_prompt)]
    X = generate_batch(model, gen_conds, ctx.sched, ctx.root.child("round", i, "gen"))
    if not np.all(np.isfinite(X)):
        raise TrainingDiverged(f"non-finite samples generated in round {i}")
    pool = [Sample(j, X[j], gen_conds[j], i) for j in range(len(X))]

    if i == 1:
        np.save(ctx.paths.reference, X)
        if manifest["resolved"]["beta"] is None or manifest["resolved"]["sigma_sq"] is None:
            beta, sigma_sq = calibrate_from_reference(X, cfg.curation.distance_mode)
            if manifest["resolved"]["beta"] is None:
                manifest["resolved"]["beta"] = beta
            if manifest["resolved"]["sigma_sq"] is None:
                manifest["resolved"]["sigma_sq"] = sigma_sq
    reference = np.load(ctx.paths.reference)
    beta = manifest["resolved"]["beta"]
    sigma_sq = manifest["resolved"]["sigma_sq"]

    cur_cfg = CurationConfig(
        k_select=cfg.curation.k_select, beta=beta, sigma_sq=sigma_sq,
        alignment_weight=cfg.curation.alignment_weight,
        aesthetic_weight=cfg.curation.aesthetic_weight,
        distance_mode=cfg.curation.distance_mode,
    )
    cards = score_pool(pool, ctx.world, cur_cfg)
    if strat.selection_mode == "top_k":
        selected = preference_sample(cards, cur_cfg.k_select)
    else:
        selected = _uniform_selection(
            len(pool), min(cur_cfg.k_select, len(pool)), ctx.root.child("round", i, "select")
        )
    X_sel = X[selected]
    dists = distances_to_reference(X_sel, reference, cur_cfg.distance_mode)
    if strat.use_distribution_weighting:
        weights = weights_from_distances(dists, beta, sigma_sq)
    else:
        weights = np.ones(len(selected))

    os.makedirs(ctx.paths.round_dir(i), exist_ok=True)
    write_curation_csv(ctx.paths.curation_csv(i), i, pool, cards, selected, dists, weights)

    trace: list[float] = []
    if cfg.epochs_per_round > 0:
        examples = [
            TrainExample(pool[j].x, pool[j].condition, float(w))
            for j, w in zip(selected, weights)
        ]
        model, trace = train(
            model, examples, ctx.sched, cfg.epochs_per_round,
            cfg.diffusion.batch_size, ctx.root.child("round", i, "train"),
            lr=cfg.diffusion.round_lr or cfg.diffusion.lr,
        )
        if not np.all(np.isfinite(trace)):
            raise TrainingDiverged(f"training loss diverged in round {i}")
    _require_finite_model(model, f"round {i} training")

    metrics = _evaluate(ctx, model, i)
    _persist_round(ctx, manifest, i, model, metrics, trace, selected=len(selected))
    log.info("round %d: mmd=%.4f composite=%.4f halluc=%.4f",
             i, metrics.mmd_to_reference, metrics.mean_composite,
             metrics.hallucination_rate)
    return model


def _used_ids(manifest: dict) -> set[int]:
    used = set(manifest.get("used_prompt_ids", []))
    return used


def _record_used(manifest: dict, prompts) -> None:
    used = set(manifest.get("used_prompt_ids", []))
    used.update(c.id for c in prompts)
    manifest["used_prompt_ids"] = sorted(used)


def _write_metrics_csv(ctx: _RunContext, manifest: dict) -> None:
    run_name = os.path.basename(os.path.normpath(ctx.paths.root))
    tmp = ctx.paths.metrics_csv + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(METRICS_CSV_COLUMNS)
        for entry in manifest["rounds"]:
            with open(os.path.join(ctx.paths.root, entry["metrics"])) as mf:
                m = json.load(mf)
            writer.writerow([
                run_name, m["round"], repr(m["mmd_to_reference"]),
                repr(m["mean_composite"]), repr(m["hallucination_rate"]),
                repr(m["mean_alignment"]), repr(m["mean_aesthetic"]),
            ])
    os.replace(tmp, ctx.paths.metrics_csv)


# ---------------------------------------------------------------------------
# Entry points
# ---------------------------------------------------------------------------


def _claim_run_dir(out_dir: str, force: bool) -> RunPaths:
    paths = RunPaths(out_dir)
    if os.path.exists(paths.manifest):
        if not force:
            raise RunDirectoryExists(
                f"{out_dir} already holds a run; pass force to overwrite or resume to continue"
            )
        shutil.rmtree(out_dir)
    elif os.path.isdir(out_dir) and os.listdir(out_dir):
        # refuse to stomp arbitrary directories even with force
        raise RunDirectoryExists(f"{out_dir} exists and is not a run directory")
    os.makedirs(out_dir, exist_ok=True)
    os.makedirs(os.path.join(out_dir, "rounds"), exist_ok=True)
    return paths


def _resolve_out_dir(config: RunConfig, out_dir: str | None) -> str:
    out = out_dir or config.output_dir
    if not out:
        raise RunError("no output directory: set output_dir in the config or pass one")
    return out


def _finalize(ctx: _RunContext, manifest: dict) -> dict:
    manifest["status"] = "completed"
    _write_manifest(ctx.paths, manifest)
    _write_metrics_csv(ctx, manifest)
    return manifest


def _abort(ctx: _RunContext, manifest: dict, exc: Exception) -> None:
    manifest["status"] = "failed"
    manifest["error"] = str(exc)
    _write_manifest(ctx.paths, manifest)


def _loop_rounds(ctx: _RunContext, manifest: dict, model, start: int,
                 stop_after_round: int | None) -> dict:
    cfg = ctx.config
    try:
        for i in range(start, cfg.rounds + 1):
            model = _run_round(ctx, manifest, model, i)
            if stop_after_round is not None and i >= stop_after_round:
                return manifest
    except TrainingDiverged as exc:
        _abort(ctx, manifest, exc)
        raise
    return _finalize(ctx, manifest)


def run_rsi(config: RunConfig, out_dir: str | None = None, kind: str = "full",
            force: bool = False, stop_after_round: int | None = None) -> dict:
    """Execute the full self-training procedure; returns the manifest.

    Writes the run directory layout (manifest.json, pool.json,
    reference.npy, rounds/round_<i>/...) with every round persisted
    before the next begins. ``stop_after_round`` leaves the run
    in-progress for later resume, which is also how interruption is
    simulated in tests.
    """
    out = _resolve_out_dir(config, out_dir)
    paths = _claim_run_dir(out, force)
    ctx = _prepare(config, paths)
    manifest = _new_manifest(config, kind, ctx)

    model, base_trace = _fit_base_model(ctx)
    _attach_reference(ctx)
    manifest["resolved"]["mmd_bandwidth"] = ctx.eval_settings.bandwidth
    metrics = _evaluate(ctx, model, 0)
    _persist_round(ctx, manifest, 0, model, metrics, base_trace, selected=None)
    if stop_after_round is not None and stop_after_round < 1:
        return manifest
    return _loop_rounds(ctx, manifest, model, 1, stop_after_round)


def run_baseline_random(config: RunConfig, out_dir: str | None = None,
                        force: bool = False, stop_after_round: int | None = None) -> dict:
    """Self-training with uniform-random selection and no other strategy."""
    cfg = config.model_copy(deep=True)
    cfg.strategy = strategy_preset("none")
    return run_rsi(cfg, out_dir, kind="random", force=force,
                   stop_after_round=stop_after_round)


def run_baseline_sft(config: RunConfig, out_dir: str | None = None,
                     force: bool = False) -> dict:
    """One non-recursive fine-tune on a single synthetic pool.

    The pool is one round's worth of generations from the base model and
    is trained for ``sft_epochs`` with no selection or weighting.
    """
    out = _resolve_out_dir(config, out_dir)
    paths = _claim_run_dir(out, force)
    ctx = _prepare(config, paths)
    manifest = _new_manifest(config, "sft", ctx)

    model, base_trace = _fit_base_model(ctx)
    _attach_reference(ctx)
    manifest["resolved"]["mmd_bandwidth"] = ctx.eval_settings.bandwidth
    metrics = _evaluate(ctx, model, 0)
    _persist_round(ctx, manifest, 0, model, metrics, base_trace, selected=None)

    cfg = ctx.config
    prompts = build_round_prompts(ctx.working_pool, 1, cfg.prompts.per_round, ctx.root)
    gen_conds = [c.id for c in prompts for _ in range(cfg.samples_per_prompt)]
    X = generate_batch(model, gen_conds, ctx.sched, ctx.root.child("round", 1, "gen"))
    if not np.all(np.isfinite(X)):
        raise TrainingDiverged("non-finite samples generated for the fine-tune pool")
    np.save(ctx.paths.reference, X)

    trace: list[float] = []
    try:
        if cfg.sft_epochs > 0:
            examples = [TrainExample(X[j], gen_conds[j]) for j in range(len(X))]
            model, trace = train(
                model, examples, ctx.sched, cfg.sft_epochs,
                cfg.diffusion.batch_size, ctx.root.child("round", 1, "train"),
                lr=cfg.diffusion.round_lr or cfg.diffusion.lr,
            )
            if not np.all(np.isfinite(trace)):
                raise TrainingDiverged("fine-tune loss diverged")
        _require_finite_model(model, "fine-tune")
    except TrainingDiverged as exc:
        _abort(ctx, manifest, exc)
        raise
    metrics = _evaluate(ctx, model, 1)
    _persist_round(ctx, manifest, 1, model, metrics, trace, selected=None)
    return _finalize(ctx, manifest)


def resume(run_dir: str, config: RunConfig | None = None) -> dict:
    """Continue an interrupted run from its last completed round.

    The final manifest and checkpoints are bit-identical to an
    uninterrupted run with the same seed. A config argument must hash to
    the manifest's snapshot; a completed run is a no-op; a failed run is
    refused.
    """
    run_dir = _as_run_dir(run_dir)
    manifest = load_manifest(run_dir)
    stored = RunConfig.model_validate(manifest["config"])
    if config is not None and config_hash(config) != manifest["config_hash"]:
        raise ConfigMismatch("config does not match the manifest's snapshot")
    if manifest["status"] == "completed":
        return manifest
    if manifest["status"] == "failed":
        raise RunError(f"run failed previously: {manifest['error']}; not resumable")
    if manifest["kind"] == "sft":
        raise RunError("sft baseline runs are single-shot; rerun instead of resuming")
    if not manifest["rounds"]:
        raise RunError("manifest has no completed rounds; rerun from scratch")

    paths = RunPaths(run_dir)
    ctx = _prepare(stored, paths)
    _attach_reference(ctx)
    last = manifest["rounds"][-1]["round"]
    model, _ = load_checkpoint(paths.checkpoint(last))
    return _loop_rounds(ctx, manifest, model, last + 1, None)


# ---------------------------------------------------------------------------
# Ablation sweeps
# ---------------------------------------------------------------------------


def _slug(value) -> str:
    return str(value).replace(".", "p").replace("/", "_")


def run_ablation(config: RunConfig, parameter: str, values: list, seeds: list[int],
                 out_root: str, force: bool = False) -> dict:
    """One run per (value, seed) plus an aggregate trajectory CSV.

    Runs share the world and base-model recipe through the common seed
    and differ only in the swept parameter. Executes up to
    RSILAB_THREADS runs in parallel; each run owns its directory, so the
    outputs are identical at any worker count.
    """
    if not values:
        raise RunError("ablation grid is empty")
    if not seeds:
        raise RunError("ablation needs at least one seed")
    os.makedirs(out_root, exist_ok=True)
    jobs = []
    for value in values:
        for seed in seeds:
            cfg = apply_ablation_value(config, parameter, value)
            cfg.seed = int(seed)
            run_dir = os.path.join(out_root, f"{parameter}_{_slug(value)}_seed{seed}")
            jobs.append((value, seed, cfg, run_dir))

    def _one(job):
        value, seed, cfg, run_dir = job
        manifest = run_rsi(cfg, run_dir, kind="full", force=force)
        return value, seed, run_dir, manifest

    results = []
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_one, jobs))
    else:
        results = [_one(j) for j in jobs]

    agg_path = os.path.join(out_root, "ablation.csv")
    tmp = agg_path + ".tmp"
    with open(tmp, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["parameter", "value", "seed", "round",
                         "mmd_to_reference", "mean_composite", "hallucination_rate"])
        for value, seed, run_dir, manifest in results:
            for entry in manifest["rounds"]:
                with open(os.path.join(run_dir, entry["metrics"])) as mf:
                    m = json.load(mf)
                writer.writerow([
                    parameter, value, seed, m["round"],
                    repr(m["mmd_to_reference"]), repr(m["mean_composite"]),
                    repr(m["hallucination_rate"]),
                ])
    os.replace(tmp, agg_path)
    return {
        "parameter": parameter,
        "values": list(values),
        "seeds": list(seeds),
        "runs": [run_dir for _, _, run_dir, _ in results],
        "csv": agg_path,
    }
