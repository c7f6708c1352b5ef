"""Imitation and evolutionary training for the block-rule policy.

Imitation: roll out the current policy, label every visited state with the
hand-built traffic expert, regress the policy onto the labels end to end
through the field recurrence. Evolution: perturb parameters, score each
perturbation by a full rollout's soft-min reward, and step along the
rank-shaped estimator.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import CheckpointError, DimensionMismatch, EmptyDataset, ShapeMismatch
from .geometry import BlockGrid
from .nn import (
    POLICY_SPECS,
    STREAM_DATASET,
    STREAM_PROBE,
    STREAM_ROLLOUT,
    Adam,
    ParamVector,
    collect_gradient,
    load_array_bundle,
    rng_stream,
    sample_perturbation,
    save_array_bundle,
    save_checkpoint,
    tensor_layers,
)
from .policy import (
    ExpertPolicy,
    RulePolicy,
    baseline_policy_factory,
    default_sweeps,
    derive_rulebook,
    expert_policy_factory,
    grnn_infer_t,
    rfu_modulate_t,
    rule_policy_factory,
)
from .scenario import MetricsReport, Scenario, metrics, reward, simulate
from .visibility import PathPlanner, build_visibility_graph


@dataclass(frozen=True)
class TransitionTuple:
    x: np.ndarray
    g: np.ndarray
    pi: np.ndarray
    pi_star: np.ndarray


@dataclass(frozen=True)
class ILConfig:
    rounds: int = 20
    horizon: int = 500
    adam_steps: int = 1000
    lr: float = 1e-4
    batch_size: int | None = 1024
    behavior_cloning: bool = False
    sweeps: int | None = None
    validation: tuple = ()
    validation_every: int = 10
    validation_runs: int = 1
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.rounds < 1 or self.adam_steps < 1 or self.horizon < 1:
            raise ShapeMismatch("rounds, adam_steps, and horizon must be positive")


@dataclass(frozen=True)
class RLConfig:
    iterations: int = 500
    horizon: int = 500
    sigma: float = 0.02
    batch: int = 10
    alpha0: float = 0.0
    alpha_step: float = 0.01
    alpha_every: int = 2000
    alpha_cap: float = 5.0
    alpha_sign: float = 1.0
    lr_initial: float = 2e-4
    lr_late: float = 2e-5
    lr_switch: int = 5000
    mirrored: bool = False
    shaped: bool = True
    sweeps: int | None = None
    probe_every: int = 500
    validation: tuple = ()
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.sigma <= 0.0:
            raise ShapeMismatch("sigma must be positive")
        if self.batch < 2:
            raise ShapeMismatch("batch must be at least 2")
        if self.mirrored and self.batch % 2:
            raise ShapeMismatch("mirrored sampling needs an even batch")


# ---------------------------------------------------------------------------
# Imitation data


class _RecordingPolicy:
    """Wraps a driving policy; labels every queried state with the expert."""

    def __init__(self, inner, expert: ExpertPolicy):
        self.inner = inner
        self.expert = expert
        self.planner = getattr(inner, "planner", None)
        self.steps: list[tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]] = []

    def prepare(self):
        prepare = getattr(self.inner, "prepare", None)
        if prepare is not None:
            prepare()

    def eval_batch(self, x, g):
        v = self.inner.eval_batch(x, g)
        label = self.expert.eval_batch(x, g)
        self.steps.append((x.copy(), g.copy(), v.copy(), label.copy()))
        return v


def collect_il_dataset(
    params: ParamVector,
    expert: ExpertPolicy,
    scenario: Scenario,
    T: int | None = None,
    seed: int = 0,
    sweeps: int | None = None,
    behavior_cloning: bool = False,
    planner: PathPlanner | None = None,
) -> list[TransitionTuple]:
    """One on-policy rollout; every (agent, step) yields one labeled tuple."""
    if planner is None:
        planner = expert.planner
    driver = (
        expert
        if behavior_cloning
        else RulePolicy(
            params,
            scenario.env,
            scenario.radius,
            v_max=scenario.v_max,
            sweeps=sweeps,
            planner=planner,
        )
    )
    recorder = _RecordingPolicy(driver, expert)
    simulate(scenario, recorder, T=T, seed=seed, planner=planner)
    out = []
    for x, g, pi, pi_star in recorder.steps:
        for row in range(x.shape[0]):
            out.append(
                TransitionTuple(x=x[row], g=g[row], pi=pi[row], pi_star=pi_star[row])
            )
    return out


@dataclass
class ILGroup:
    grid: BlockGrid
    sweeps: int
    block_idx: np.ndarray
    rel: np.ndarray
    v_bar: np.ndarray
    labels: np.ndarray

    @property
    def n(self) -> int:
        return self.block_idx.shape[0]


@dataclass
class ILDataset:
    groups: list[ILGroup]
    v_max: float

    @property
    def size(self) -> int:
        return sum(g.n for g in self.groups)

    @classmethod
    def build(
        cls,
        batches: list[tuple[Scenario, list[TransitionTuple], PathPlanner]],
        sweeps: int | None = None,
    ) -> "ILDataset":
        """Precompute everything the loss needs: block ids, in-block offsets,
        and tentative velocities are all fixed functions of (x, g)."""
        groups = []
        v_max = None
        for scenario, tuples, planner in batches:
            if not tuples:
                continue
            grid = scenario.block_grid()
            x = np.array([t.x for t in tuples])
            g = np.array([t.g for t in tuples])
            labels = np.array([t.pi_star for t in tuples])
            ids = grid.ids_at(x)
            rel = x - grid.centers[ids]
            v_bar = planner.tentative(x, g, scenario.v_max)
            groups.append(
                ILGroup(
                    grid=grid,
                    sweeps=default_sweeps(grid) if sweeps is None else sweeps,
                    block_idx=ids,
                    rel=rel,
                    v_bar=v_bar,
                    labels=labels,
                )
            )
            v_max = scenario.v_max
        if not groups:
            raise EmptyDataset("no transition tuples to learn from")
        return cls(groups=groups, v_max=v_max)

    def subset(self, indices: np.ndarray) -> "ILDataset":
        """Rows selected by global index over the concatenated groups."""
        indices = np.asarray(indices)
        picked = []
        offset = 0
        for grp in self.groups:
            local = indices[(indices >= offset) & (indices < offset + grp.n)] - offset
            if local.size:
                picked.append(
                    ILGroup(
                        grid=grp.grid,
                        sweeps=grp.sweeps,
                        block_idx=grp.block_idx[local],
                        rel=grp.rel[local],
                        v_bar=grp.v_bar[local],
                        labels=grp.labels[local],
                    )
                )
            offset += grp.n
        if not picked:
            raise EmptyDataset("subset selected no rows")
        return ILDataset(groups=picked, v_max=self.v_max)


def il_loss(dataset: ILDataset, params: ParamVector) -> tuple[float, np.ndarray]:
    """Mean squared expert discrepancy and its gradient in theta.

    Differentiates through the steering head and the full field recurrence;
    states, goals, and tentative velocities are constants of the graph.
    """
    if dataset.size == 0:
        raise EmptyDataset("empty imitation dataset")
    leaves = {net: tensor_layers(params, net, spec) for net, spec in POLICY_SPECS.items()}
    grnn_leaves = {"edge": leaves["edge"], "update": leaves["update"]}
    total = None
    for grp in dataset.groups:
        h = grnn_infer_t(grnn_leaves, grp.grid, grp.sweeps)
        rows = ad.gather_rows(h, grp.block_idx)
        out = rfu_modulate_t(leaves["steer"], rows, grp.rel, grp.v_bar, dataset.v_max)
        sq = ad.sum_squares(ad.sub(out, ad.constant(grp.labels)))
        total = sq if total is None else ad.add(total, sq)
    loss = ad.scale(total, 1.0 / dataset.size)
    ad.backward(loss)
    return float(loss.value), collect_gradient(params, leaves)


def il_loss_value(dataset: ILDataset, flat_params: np.ndarray) -> float:
    """Loss alone for finite-difference probes."""
    params = ParamVector(ParamVector.for_specs(POLICY_SPECS).segments, flat_params)
    loss, _ = il_loss(dataset, params)
    return loss


def _config_meta(config) -> dict:
    from dataclasses import asdict

    return {
        k: v for k, v in asdict(config).items() if isinstance(v, (int, float, str, bool))
    }


@dataclass
class _StoreEntry:
    """One round's worth of collected states, goals, and expert labels."""

    scenario: int
    x: np.ndarray
    g: np.ndarray
    labels: np.ndarray


def _store_path(checkpoint_path) -> str:
    return str(checkpoint_path) + ".data"


def _save_store(path, entries: list[_StoreEntry], round_no: int, seed: int) -> None:
    arrays = []
    rows = []
    for e in entries:
        arrays.extend([e.x, e.g, e.labels])
        rows.append({"scenario": e.scenario, "rows": int(e.x.shape[0])})
    save_array_bundle(
        path,
        arrays,
        meta={"kind": "il-dataset", "round": round_no, "seed": seed, "entries": rows},
    )


def _load_store(path, expected_round: int) -> list[_StoreEntry]:
    arrays, meta = load_array_bundle(path)
    if meta.get("kind") != "il-dataset":
        raise CheckpointError(f"{path}: not an imitation dataset bundle")
    if meta.get("round") != expected_round:
        raise CheckpointError(
            f"{path}: dataset is from round {meta.get('round')}, "
            f"checkpoint is from round {expected_round}"
        )
    entries = []
    for i, row in enumerate(meta.get("entries", [])):
        x, g, labels = arrays[3 * i : 3 * i + 3]
        entries.append(_StoreEntry(scenario=int(row["scenario"]), x=x, g=g, labels=labels))
    return entries


def _group_from_arrays(grid, planner, x, g, labels, v_max, sweeps) -> ILGroup:
    ids = grid.ids_at(x)
    return ILGroup(
        grid=grid,
        sweeps=default_sweeps(grid) if sweeps is None else sweeps,
        block_idx=ids,
        rel=x - grid.centers[ids],
        v_bar=planner.tentative(x, g, v_max),
        labels=labels,
    )


def _merged_dataset(entries, trainset, caches, sweeps) -> ILDataset:
    """One group per scenario, concatenating every round collected on it."""
    order: list[int] = []
    by_scn: dict[int, list[_StoreEntry]] = {}
    for e in entries:
        if e.scenario not in by_scn:
            order.append(e.scenario)
            by_scn[e.scenario] = []
        by_scn[e.scenario].append(e)
    groups = []
    v_max = None
    for idx in order:
        scn = trainset[idx]
        grid, planner, _ = caches[idx]
        x = np.concatenate([e.x for e in by_scn[idx]])
        g = np.concatenate([e.g for e in by_scn[idx]])
        labels = np.concatenate([e.labels for e in by_scn[idx]])
        groups.append(_group_from_arrays(grid, planner, x, g, labels, scn.v_max, sweeps))
        v_max = scn.v_max
    if not groups:
        raise EmptyDataset("no transition tuples to learn from")
    return ILDataset(groups=groups, v_max=v_max)


def train_il(
    config: ILConfig,
    trainset: list[Scenario],
    theta0: ParamVector,
    seed: int = 0,
    start_round: int = 0,
    opt: Adam | None = None,
    checkpoint_path=None,
) -> tuple[ParamVector, list[dict]]:
    """Expert-guided regression rounds; Adam state persists across rounds.

    Every round runs the current policy on one training scenario, labels the
    visited states with the expert, and appends them to a dataset that keeps
    growing across rounds, so corrections learned early are never lost.

    All randomness is keyed by the absolute round number, so a run resumed
    from a checkpoint (params, Adam moments, the accumulated dataset sidecar,
    start_round) continues exactly as the uninterrupted one would.
    """
    if not trainset:
        raise EmptyDataset("empty training set")
    params = theta0.copy()
    if opt is None:
        opt = Adam(dim=params.size, lr=config.lr)
    caches = {}
    for i, scn in enumerate(trainset):
        grid = scn.block_grid()
        planner = PathPlanner(build_visibility_graph(scn.env, scn.radius))
        expert = ExpertPolicy(derive_rulebook(grid), planner, v_max=scn.v_max)
        caches[i] = (grid, planner, expert)
    entries: list[_StoreEntry] = []
    if start_round > 0:
        if checkpoint_path is None:
            raise CheckpointError(
                "resuming imitation needs the checkpoint path to reload "
                "the accumulated dataset"
            )
        entries = _load_store(_store_path(checkpoint_path), start_round)
    log: list[dict] = []
    for rnd in range(start_round, config.rounds):
        rng = rng_stream(seed, STREAM_DATASET, rnd)
        idx = int(rng.integers(len(trainset)))
        scn = trainset[idx]
        grid, planner, expert = caches[idx]
        tuples = collect_il_dataset(
            params,
            expert,
            scn,
            T=config.horizon,
            seed=int(rng.integers(2**63)),
            sweeps=config.sweeps,
            behavior_cloning=config.behavior_cloning,
            planner=planner,
        )
        fresh = _StoreEntry(
            scenario=idx,
            x=np.array([t.x for t in tuples]),
            g=np.array([t.g for t in tuples]),
            labels=np.array([t.pi_star for t in tuples]),
        )
        gap = None
        if tuples:
            gap_group = _group_from_arrays(
                grid, planner, fresh.x, fresh.g, fresh.labels, scn.v_max, config.sweeps
            )
            gap, _ = il_loss(ILDataset(groups=[gap_group], v_max=scn.v_max), params)
            entries.append(fresh)
        dataset = _merged_dataset(entries, trainset, caches, config.sweeps)
        loss_before, _ = il_loss(dataset, params)
        for step in range(config.adam_steps):
            batch = dataset
            if config.batch_size is not None and config.batch_size < dataset.size:
                pick = rng_stream(seed, STREAM_DATASET, rnd, step).choice(
                    dataset.size, size=config.batch_size, replace=False
                )
                batch = dataset.subset(pick)
            _, grad = il_loss(batch, params)
            opt.step(params.data, grad)
        loss_after, _ = il_loss(dataset, params)
        entry = {
            "round": rnd,
            "scenario": scn.name or str(idx),
            "tuples": dataset.size,
            "gap": gap,
            "loss_before": loss_before,
            "loss_after": loss_after,
        }
        if config.validation and (rnd + 1) % config.validation_every == 0:
            report = metrics(
                rule_policy_factory(params, sweeps=config.sweeps),
                list(config.validation),
                runs=config.validation_runs,
                seed=seed,
            )
            entry["val_r0"] = report.r0_mean
            entry["val_rinf"] = report.rinf_mean
        log.append(entry)
        due = config.checkpoint_every and (rnd + 1) % config.checkpoint_every == 0
        if checkpoint_path is not None and (due or rnd + 1 == config.rounds):
            save_checkpoint(
                checkpoint_path,
                params,
                seed=seed,
                iteration=rnd + 1,
                hyperparams=_config_meta(config),
                extra={"mode": "il"},
                adam=opt,
            )
            _save_store(_store_path(checkpoint_path), entries, rnd + 1, seed)
    return params, log


# ---------------------------------------------------------------------------
# Evolutionary training


def shaped_utilities(rewards: np.ndarray) -> np.ndarray:
    """Rank-based utilities; best reward gets the largest weight.

    u_k = max(0, log(n/2+1) - log k) normalized to sum 1, minus 1/n, where
    k is the descending-reward rank (ties broken by index). The result is
    aligned with the input order and sums to zero.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    n = rewards.shape[0]
    if n < 2:
        raise ShapeMismatch("need at least 2 rewards to rank")
    order = np.argsort(-rewards, kind="stable")
    ranks = np.empty(n, dtype=np.int64)
    ranks[order] = np.arange(1, n + 1)
    w = np.maximum(0.0, np.log(n / 2.0 + 1.0) - np.log(ranks))
    return w / w.sum() - 1.0 / n


def es_gradient(
    pairs: list[tuple[float, np.ndarray]], sigma: float, shaped: bool = True
) -> np.ndarray:
    """Search-gradient estimate from (reward, perturbation) pairs.

    Coordinates are reduced with exactly rounded summation, so the estimate
    does not depend on pair order and mirrored perturbations with equal
    rewards cancel to exactly zero.
    """
    if len(pairs) < 2:
        raise ShapeMismatch("need at least 2 perturbations")
    dim = pairs[0][1].shape
    if any(eps.shape != dim for _, eps in pairs):
        raise DimensionMismatch("perturbations differ in dimension")
    rewards = np.array([r for r, _ in pairs], dtype=np.float64)
    eps = np.stack([e for _, e in pairs])
    if shaped:
        weights = shaped_utilities(rewards) / sigma
    else:
        weights = rewards / (rewards.shape[0] * sigma)
    terms = weights[:, None] * eps
    return np.array([math.fsum(terms[:, j]) for j in range(terms.shape[1])])


def train_rl(
    config: RLConfig,
    trainset: list[Scenario],
    theta0: ParamVector,
    seed: int = 0,
    start_iteration: int = 0,
    checkpoint_path=None,
) -> tuple[ParamVector, list[dict]]:
    """Perturb, roll out, rank, step: reward ascent on the soft-min reward.

    One scenario per iteration; the soft-min sharpness alpha anneals upward
    on an iteration schedule and the learning rate drops once late in
    training. Updates that would introduce non-finite parameters are
    rejected and logged. Perturbations and rollout seeds are keyed by the
    absolute iteration number, so resuming from (params, start_iteration)
    replays the uninterrupted trajectory.
    """
    if not trainset:
        raise EmptyDataset("empty training set")
    params = theta0.copy()
    caches = {}
    for i, scn in enumerate(trainset):
        grid = scn.block_grid()
        planner = PathPlanner(build_visibility_graph(scn.env, scn.radius))
        caches[i] = (grid, planner)
    log: list[dict] = []

    probe_set = list(config.validation) if config.validation else [trainset[0]]
    probe_caches = {}
    for j, scn in enumerate(probe_set):
        if config.validation:
            probe_caches[j] = (
                scn.block_grid(),
                PathPlanner(build_visibility_graph(scn.env, scn.radius)),
            )
        else:
            probe_caches[j] = caches[0]

    def probe(iteration: int) -> dict:
        r0, rinf = [], []
        for j, scn in enumerate(probe_set):
            grid, planner = probe_caches[j]
            pol = RulePolicy(
                params, scn.env, scn.radius, v_max=scn.v_max,
                sweeps=config.sweeps, grid=grid, planner=planner,
            )
            probe_seed = int(
                rng_stream(seed, STREAM_PROBE, iteration, j).integers(2**63)
            )
            result = simulate(scn, pol, T=config.horizon, seed=probe_seed, planner=planner)
            r0.append(100.0 * reward(result, 0.0))
            rinf.append(100.0 * reward(result, np.inf))
        entry = {
            "iteration": iteration,
            "probe_r0": float(np.mean(r0)),
            "probe_rinf": float(np.mean(rinf)),
        }
        log.append(entry)
        return entry

    if start_iteration == 0:
        probe(0)
    for it in range(start_iteration, config.iterations):
        alpha = config.alpha0 + config.alpha_sign * config.alpha_step * (
            it // config.alpha_every
        )
        alpha = float(np.clip(alpha, -config.alpha_cap, config.alpha_cap))
        lr = config.lr_initial if it < config.lr_switch else config.lr_late
        rng = rng_stream(seed, STREAM_ROLLOUT, it)
        idx = int(rng.integers(len(trainset)))
        scn = trainset[idx]
        grid, planner = caches[idx]
        rollout_seed = int(rng.integers(2**63))
        pairs = []
        for k in range(config.batch):
            if config.mirrored and k >= config.batch // 2:
                eps = -pairs[k - config.batch // 2][1]
            else:
                eps = sample_perturbation(seed, (it, k), params.size)
            candidate = ParamVector(params.segments, params.data + config.sigma * eps)
            pol = RulePolicy(
                candidate, scn.env, scn.radius, v_max=scn.v_max,
                sweeps=config.sweeps, grid=grid, planner=planner,
            )
            result = simulate(scn, pol, T=config.horizon, seed=rollout_seed, planner=planner)
            pairs.append((reward(result, alpha), eps))
        grad = es_gradient(pairs, config.sigma, shaped=config.shaped)
        candidate = params.data + lr * grad
        if np.isfinite(candidate).all():
            params.data[:] = candidate
        else:
            log.append({"iteration": it, "event": "rejected non-finite update"})
        log.append(
            {
                "iteration": it,
                "alpha": alpha,
                "lr": lr,
                "scenario": scn.name or str(idx),
                "rewards": [float(r) for r, _ in pairs],
                "grad_norm": float(np.linalg.norm(grad)),
            }
        )
        if (it + 1) % config.probe_every == 0:
            probe(it + 1)
        due = config.checkpoint_every and (it + 1) % config.checkpoint_every == 0
        if checkpoint_path is not None and (due or it + 1 == config.iterations):
            save_checkpoint(
                checkpoint_path,
                params,
                seed=seed,
                iteration=it + 1,
                hyperparams=_config_meta(config),
                extra={"mode": "rl"},
            )
    return params, log


# ---------------------------------------------------------------------------
# Evaluation frontend


def evaluate(
    subject,
    testset: list[Scenario],
    runs: int = 10,
    seed: int = 0,
    T: int | None = None,
    sweeps: int | None = None,
) -> MetricsReport:
    """Metrics for a parameter vector, 'expert', 'baseline', or a factory."""
    if isinstance(subject, ParamVector):
        factory = rule_policy_factory(subject, sweeps=sweeps)
    elif subject == "expert":
        factory = expert_policy_factory()
    elif subject == "baseline":
        factory = baseline_policy_factory()
    elif callable(subject):
        factory = subject
    else:
        raise ShapeMismatch(f"cannot evaluate subject {subject!r}")
    return metrics(factory, testset, runs=runs, seed=seed, T=T)
