"""Experiment runners for the tables and figures.

Every runner writes its CSVs (and an SVG where there is a figure) into
``spec.out_dir`` plus ``<name>.manifest.json``. The manifest records the full
spec, seeds, dataset and checkpoint digests and output digests; feeding it
back through ``--config`` reruns the experiment with identical CSVs.
"""
from __future__ import annotations

import csv
import hashlib
import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .. import __version__
from ..baselines import wmmse_batch
from ..diffcore.gradcheck import GradCheckReport, grad_check
from ..netgen import ChannelBatch, Dataset, fixed_topology_dataset, gen_dataset, save_dataset
from ..objective import power_homophily
from ..tgt import (
    TgtParams,
    encode_batch,
    forward_encoded,
    init_params,
    load_params,
    num_params,
    predict_batch,
    save_params,
    write_model_card,
)
from ..train import Allocator, EvalSummary, evaluate_allocator, loss, max_power_allocator, tgt_allocator, train
from . import plots
from .config import ExperimentSpec

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1


class MissingCheckpointError(FileNotFoundError):
    pass


class ManifestMismatchError(ValueError):
    pass


class OverlapError(ValueError):
    """Training and evaluation data share a channel instance."""


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def instance_digests(dataset: Dataset) -> set[str]:
    return {hashlib.sha256(inst.H.tobytes()).hexdigest() for inst in dataset.instances}


def check_disjoint(train_set: Dataset, eval_set: Dataset) -> None:
    shared = instance_digests(train_set) & instance_digests(eval_set)
    if shared:
        raise OverlapError(f"{len(shared)} channel instances appear in both training and evaluation data")


def _fmt(value) -> str:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    return str(value)


@dataclass
class Run:
    """Per-experiment bookkeeping: output dir, hashes, emitted files."""

    spec: ExperimentSpec
    threads: int = 1
    datasets: dict[str, str] = field(default_factory=dict)
    checkpoints: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    nondeterministic: dict[str, str] = field(default_factory=dict)
    expected_checkpoints: dict[str, str] = field(default_factory=dict)
    _params: dict[str, TgtParams] = field(default_factory=dict)

    @property
    def out(self) -> Path:
        path = Path(self.spec.out_dir)
        path.mkdir(parents=True, exist_ok=True)
        return path

    # -- data ----------------------------------------------------------

    def eval_set(self, n: int, label: str | None = None, **channel) -> Dataset:
        spec = self.spec
        ds = gen_dataset(
            [n],
            spec.eval_topologies,
            spec.eval_fades,
            spec.channel_params(**channel),
            seed=spec.seeds["eval"],
            threads=self.threads,
        )
        self.datasets[label or f"eval_n{n}"] = ds.digest()
        return ds

    def train_set(self) -> Dataset:
        spec = self.spec
        ds = gen_dataset(
            spec.train_sizes,
            spec.train_topologies,
            spec.train_fades,
            spec.channel_params(),
            seed=spec.seeds["data"],
            threads=self.threads,
        )
        self.datasets["train"] = ds.digest()
        return ds

    # -- models --------------------------------------------------------

    def params(self, key: str) -> TgtParams:
        if key in self._params:
            return self._params[key]
        path = self.spec.checkpoints.get(key)
        if path is None:
            raise MissingCheckpointError(f"no checkpoint configured for {key!r} (set checkpoints.{key} or --checkpoint)")
        if not Path(path).is_file():
            raise MissingCheckpointError(f"checkpoint for {key!r} not found: {path}")
        digest = file_digest(path)
        expected = self.expected_checkpoints.get(key)
        if expected is not None and expected != digest:
            raise ManifestMismatchError(f"checkpoint {path} does not match the manifest digest for {key!r}")
        params, _ = load_params(path)
        self.checkpoints[key] = digest
        self._params[key] = params
        return params

    def tgt_key(self, method: str, n: int | None = None) -> str:
        if method == "tgt" and n is not None and f"tgt@{n}" in self.spec.checkpoints:
            return f"tgt@{n}"
        return method

    def allocator(self, method: str, n: int | None = None) -> Allocator:
        if method == "max_power":
            return max_power_allocator
        if method == "wmmse":
            iterations = int(self.spec.options.get("wmmse_iterations", 100))
            return lambda batch: wmmse_batch(batch, iterations)
        return tgt_allocator(self.params(self.tgt_key(method, n)))

    def score(self, method: str, dataset: Dataset, n: int | None = None) -> EvalSummary:
        return evaluate_allocator(self.allocator(method, n), dataset, threads=self.threads)

    # -- outputs -------------------------------------------------------

    def write_csv(self, name: str, header: Sequence[str], rows: Iterable[Sequence], deterministic: bool = True) -> Path:
        path = self.out / name
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(header)
            for row in rows:
                writer.writerow([_fmt(v) for v in row])
        (self.outputs if deterministic else self.nondeterministic)[name] = file_digest(path)
        return path

    def note_file(self, name: str, deterministic: bool = False) -> None:
        (self.outputs if deterministic else self.nondeterministic)[name] = file_digest(self.out / name)

    def manifest(self) -> dict:
        spec = self.spec
        return {
            "manifest_version": MANIFEST_VERSION,
            "tool": "tgtbench",
            "tool_version": __version__,
            "numpy_version": np.__version__,
            "python_version": platform.python_version(),
            "spec": spec.to_dict(),
            "seeds": dict(spec.seeds),
            "evaluation_set": {"topologies": spec.eval_topologies, "fades_per_topology": spec.eval_fades},
            "dataset_digests": dict(sorted(self.datasets.items())),
            "checkpoint_digests": dict(sorted(self.checkpoints.items())),
            "outputs": dict(sorted(self.outputs.items())),
            "nondeterministic_outputs": dict(sorted(self.nondeterministic.items())),
        }

    def finish(self) -> Path:
        path = self.out / f"{self.spec.name}.manifest.json"
        path.write_text(json.dumps(self.manifest(), indent=2, sort_keys=True) + "\n")
        return path


def start(spec: ExperimentSpec, threads: int = 1, manifest: dict | None = None) -> Run:
    run = Run(spec, threads=threads)
    if manifest is not None:
        run.expected_checkpoints = dict(manifest.get("checkpoint_digests", {}))
    return run


def _summary_rows(method: str, x, summary: EvalSummary) -> list:
    return [method, x, summary.mean, summary.std, len(summary.per_instance)]


# -- datasets and training ---------------------------------------------


def run_gen_data(run: Run) -> dict[str, Path]:
    spec = run.spec
    train_set = run.train_set()
    eval_set = run.eval_set(spec.n, "eval")
    check_disjoint(train_set, eval_set)
    paths = {"train": run.out / "train.d2d", "eval": run.out / "eval.d2d"}
    save_dataset(train_set, paths["train"])
    save_dataset(eval_set, paths["eval"])
    run.note_file("train.d2d", deterministic=True)
    run.note_file("eval.d2d", deterministic=True)
    run.write_csv(
        "datasets.csv",
        ["name", "instances", "topologies", "sizes", "seed", "digest"],
        [
            ["train", len(train_set), len(set(train_set.topology_ids)), " ".join(map(str, spec.train_sizes)),
             train_set.seed, train_set.digest()],
            ["eval", len(eval_set), len(set(eval_set.topology_ids)), spec.n, eval_set.seed, eval_set.digest()],
        ],
    )
    run.finish()
    return paths


def train_model(run: Run, checkpoint: Path, tgt_overrides: dict | None = None, tag: str = "model") -> TgtParams:
    """Train on the spec's training set and write checkpoint, history and model card."""
    spec = run.spec
    train_set = run.train_set()
    check_disjoint(train_set, run.eval_set(spec.n, "eval_disjoint_check"))
    tgt_config = spec.tgt_config(**(tgt_overrides or {}))
    train_config = spec.train_config()
    result = train(train_config, tgt_config, train_set)
    checkpoint = Path(checkpoint)
    checkpoint.parent.mkdir(parents=True, exist_ok=True)
    save_params(checkpoint, result.params, seed=train_config.seed, epoch=result.best_epoch,
                dataset_digest=train_set.digest())
    result.write_history(run.out / f"{tag}_history.csv")
    run.note_file(f"{tag}_history.csv", deterministic=True)
    write_model_card(
        run.out / f"{tag}_card.txt",
        result.params,
        [
            f"train_config: {json.dumps(train_config.to_dict(), sort_keys=True)}",
            "loss: negative batch-mean weighted sum-rate on the raw channel",
            f"validation: {train_config.val_fraction:.0%} of topologies held out, best epoch kept ({result.best_epoch})",
            f"train_sizes: {spec.train_sizes}",
            f"train_instances: {len(result.train_ids)}, validation_instances: {len(result.val_ids)}",
            f"dataset_digest: {train_set.digest()}",
        ],
    )
    run.checkpoints[tag] = file_digest(checkpoint)
    return result.params


def run_train(run: Run, checkpoint=None) -> Path:
    path = Path(checkpoint) if checkpoint else run.out / "tgt.ckpt"
    train_model(run, path)
    run.finish()
    return path


def run_eval(run: Run) -> dict[str, EvalSummary]:
    spec = run.spec
    ds = run.eval_set(spec.n)
    results = {m: run.score(m, ds, spec.n) for m in spec.methods}
    run.write_csv(
        "eval_instances.csv",
        ["id", "topology", *spec.methods],
        ([i, ds.topology_ids[i], *(results[m].per_instance[i] for m in spec.methods)] for i in range(len(ds))),
    )
    run.write_csv(
        "eval.csv",
        ["method", "n", "mean_sum_rate", "std", "count"],
        [_summary_rows(m, spec.n, results[m]) for m in spec.methods],
    )
    run.finish()
    return results


# -- tables ------------------------------------------------------------


def run_homophily_table(run: Run) -> list[tuple[float, float]]:
    """Mean weighted homophily of WMMSE powers at each noise level (same topologies across levels)."""
    spec = run.spec
    count = int(spec.options.get("instances", 100))
    iterations = int(spec.options.get("wmmse_iterations", 100))
    base = gen_dataset([spec.n], count, 1, spec.channel_params(), seed=spec.seeds["eval"], threads=run.threads)
    run.datasets["homophily_base"] = base.digest()
    rows, out = [], []
    for sigma2 in spec.sweep_values:
        instances = [inst.with_sigma2(float(sigma2)) for inst in base.instances]
        p = wmmse_batch(ChannelBatch.stack(instances), iterations)
        h = np.array([power_homophily(inst, pi).h for inst, pi in zip(instances, p)])
        rows.append([float(sigma2), h.mean(), h.std(), len(h)])
        out.append((float(sigma2), float(h.mean())))
    run.write_csv("table1.csv", ["sigma2", "h", "std", "count"], rows)
    plots.curves(run.out / "table1.svg", {"h": ([r[0] for r in rows], [r[1] for r in rows])},
                 "noise power sigma^2", "homophily h", logx=True)
    run.finish()
    return out


def _method_sweep(run: Run, name: str, column: str, points, make_set, labels=None) -> list[list]:
    spec = run.spec
    rows = []
    for k, value in enumerate(points):
        ds, n = make_set(value)
        label = value if labels is None else labels[k]
        for method in spec.methods:
            rows.append(_summary_rows(method, label, run.score(method, ds, n)))
    run.write_csv(f"{name}.csv", ["method", column, "mean_sum_rate", "std", "count"], rows)
    return rows


def _cells(rows) -> dict[tuple[str, object], float]:
    return {(r[0], r[1]): r[2] for r in rows}


def run_table2(run: Run) -> list[list]:
    spec = run.spec
    sizes = [int(v) for v in spec.sweep_values]
    # fail before any compute if a checkpoint is missing
    for method in spec.methods:
        if method.startswith("tgt"):
            for n in sizes:
                run.params(run.tgt_key(method, n))
    rows = _method_sweep(run, "table2", "n", sizes, lambda n: (run.eval_set(n), n))
    cells = _cells(rows)
    ratios = []
    for method in spec.methods:
        for n in sizes:
            mp, wm = cells.get(("max_power", n)), cells.get(("wmmse", n))
            ratios.append([
                method, n,
                cells[(method, n)] / mp if mp else float("nan"),
                cells[(method, n)] / wm if wm else float("nan"),
            ])
    run.write_csv("table2_ratios.csv", ["method", "n", "ratio_to_max_power", "ratio_to_wmmse"], ratios)
    run.finish()
    return rows


def run_fading_sweep(run: Run) -> list[list]:
    spec = run.spec
    rows = _method_sweep(
        run, "table3", "fading_scale", [float(v) for v in spec.sweep_values],
        lambda s: (run.eval_set(spec.n, f"eval_scale{s}", fading_scale=s), spec.n),
    )
    run.finish()
    return rows


def run_density_sweep(run: Run) -> list[list]:
    spec = run.spec
    widths = [float(v) for v in spec.sweep_values]
    labels = spec.options.get("labels") or [f"{w:g}" for w in widths]
    if len(labels) != len(widths):
        raise ValueError("options.labels must match sweep_values")
    rows = _method_sweep(
        run, "table4", "half_width", widths,
        lambda w: (run.eval_set(spec.n, f"eval_width{w:g}", half_width=w), spec.n),
        labels=labels,
    )
    run.finish()
    return rows


# -- figures -----------------------------------------------------------


def run_histogram(run: Run) -> dict[str, float]:
    """Fixed topology, many fading draws; TGT vs WMMSE per instance."""
    spec = run.spec
    fades = int(spec.options.get("fades", 32000))
    bins = int(spec.options.get("bins", 60))
    ds = fixed_topology_dataset(spec.n, fades, spec.channel_params(), seed=spec.seeds["eval"])
    run.datasets["fixed_topology"] = ds.digest()
    tgt = run.score("tgt", ds, spec.n).per_instance
    ref = run.score("wmmse", ds, spec.n).per_instance
    diff = tgt - ref
    run.write_csv("fig2_samples.csv", ["id", "tgt", "wmmse", "difference"],
                  ([i, tgt[i], ref[i], diff[i]] for i in range(len(ds))))
    edges = np.histogram_bin_edges(np.concatenate([tgt, ref]), bins=bins)
    ct, _ = np.histogram(tgt, edges)
    cw, _ = np.histogram(ref, edges)
    run.write_csv("fig2_hist.csv", ["bin_lo", "bin_hi", "tgt", "wmmse"],
                  ([edges[i], edges[i + 1], ct[i], cw[i]] for i in range(bins)))
    stats = {
        "count": len(ds),
        "mean_tgt": float(tgt.mean()),
        "mean_wmmse": float(ref.mean()),
        "mean_difference": float(diff.mean()),
        "std_difference": float(diff.std()),
        "fraction_tgt_better": float((diff > 0).mean()),
    }
    run.write_csv("fig2_stats.csv", list(stats), [list(stats.values())])
    plots.histogram(run.out / "fig2.svg", edges, {"TGT": ct, "WMMSE": cw})
    run.finish()
    return stats


def _curve_keys(run: Run) -> list[str]:
    keys = run.spec.options.get("curves")
    if keys is None:
        keys = sorted(k for k in run.spec.checkpoints if k.startswith("tgt"))
    if not keys:
        raise MissingCheckpointError("no TGT checkpoints configured for the size sweep")
    return list(keys)


def run_size_sweep(run: Run) -> list[list]:
    """Each TGT curve normalized by WMMSE at every network size."""
    spec = run.spec
    keys = _curve_keys(run)
    models = {k: run.params(k) for k in keys}
    rows = []
    for n in (int(v) for v in spec.sweep_values):
        ds = run.eval_set(n)
        ref = run.score("wmmse", ds, n).mean
        rows.append(["wmmse", n, ref, ref, 1.0])
        for key in keys:
            value = evaluate_allocator(tgt_allocator(models[key]), ds, threads=run.threads).mean
            rows.append([key, n, value, ref, value / ref])
    run.write_csv("fig3.csv", ["curve", "n", "mean_sum_rate", "wmmse_mean", "normalized"], rows)
    lo, hi = spec.options.get("summary_range", [20, 50])
    summary = []
    for key in keys:
        inside = [r[4] for r in rows if r[0] == key and lo <= r[1] <= hi]
        summary.append([key, lo, hi, min(inside) if inside else float("nan")])
    run.write_csv("fig3_summary.csv", ["curve", "n_lo", "n_hi", "min_normalized"], summary)
    series = {key: ([r[1] for r in rows if r[0] == key], [r[4] for r in rows if r[0] == key]) for key in ["wmmse", *keys]}
    plots.curves(run.out / "fig3.svg", series, "network size n", "sum rate / WMMSE")
    run.finish()
    return rows


def forward_timing(config, sizes: Sequence[int], batch: int = 4, repeats: int = 5, seed: int = 0) -> list[tuple[int, float]]:
    """Best-of-``repeats`` eval forward wall time per network size."""
    params = init_params(config, np.random.default_rng(seed))
    out = []
    for n in sizes:
        ds = gen_dataset([n], 1, batch, seed=seed)
        b = ChannelBatch.stack(ds.instances)
        enc = encode_batch(b.H, b.weights)
        forward_encoded(enc, params, training=False)  # warm-up
        best = np.inf
        for _ in range(repeats):
            t0 = time.perf_counter()
            forward_encoded(enc, params, training=False)
            best = min(best, time.perf_counter() - t0)
        out.append((int(n), float(best)))
    return out


def _width_config(spec: ExperimentSpec, d: int) -> dict:
    head_dim = int(spec.options.get("head_dim", 2))
    if d % head_dim:
        raise ValueError(f"width {d} is not a multiple of head_dim {head_dim}")
    return {"d": d, "heads": d // head_dim}


def _scaling_models(run: Run) -> dict[int, TgtParams]:
    spec = run.spec
    models = {}
    for d in (int(v) for v in spec.sweep_values):
        key = f"width{d}"
        if key not in spec.checkpoints:
            path = run.out / "models" / f"{key}.ckpt"
            if not path.is_file():
                log.info("training width %d", d)
                train_model(run, path, _width_config(spec, d), tag=key)
            spec.checkpoints[key] = str(path)
        models[d] = run.params(key)
    return models


def run_scaling_study(run: Run, part: str = "fig4") -> list[list]:
    """Sum rate vs parameter count (fig4) or size generalization per width (fig5)."""
    spec = run.spec
    models = _scaling_models(run)
    if part == "fig4":
        ds = run.eval_set(spec.n)
        ref = run.score("wmmse", ds, spec.n).mean
        rows = []
        for d, params in sorted(models.items()):
            value = evaluate_allocator(tgt_allocator(params), ds, threads=run.threads).mean
            rows.append([d, params.config.heads, num_params(params.config), value, ref, value / ref])
        run.write_csv("fig4.csv", ["d", "heads", "params", "mean_sum_rate", "wmmse_mean", "normalized"], rows)
        timing = forward_timing(spec.tgt_config(), spec.options.get("timing_sizes", [64, 128]))
        base = timing[0][1]
        run.write_csv("fig4_timing.csv", ["n", "seconds", "ratio_to_first"],
                      ([n, t, t / base] for n, t in timing), deterministic=False)
        plots.curves(run.out / "fig4.svg", {"TGT": ([r[2] for r in rows], [r[5] for r in rows])},
                     "trainable parameters", "sum rate / WMMSE", logx=True)
    elif part == "fig5":
        rows = []
        for n in (int(v) for v in spec.options.get("generalization_sizes", [20, 30, 40, 50])):
            ds = run.eval_set(n)
            ref = run.score("wmmse", ds, n).mean
            for d, params in sorted(models.items()):
                value = evaluate_allocator(tgt_allocator(params), ds, threads=run.threads).mean
                rows.append([d, num_params(params.config), n, value, ref, value / ref])
        run.write_csv("fig5.csv", ["d", "params", "n", "mean_sum_rate", "wmmse_mean", "normalized"], rows)
        series = {f"d={d}": ([r[2] for r in rows if r[0] == d], [r[5] for r in rows if r[0] == d]) for d in sorted(models)}
        plots.curves(run.out / "fig5.svg", series, "network size n", "sum rate / WMMSE")
    else:
        raise ValueError(f"unknown scaling output {part!r}")
    run.finish()
    return rows


# -- diagnostics -------------------------------------------------------


def tgt_gradcheck(config, n: int = 4, seed: int = 0, tol: float = 1e-4, jitter: float = 0.1) -> GradCheckReport:
    """Finite-difference check of the full model on one random n-pair instance.

    Parameters are perturbed away from init first: with unit layer-norm gains
    the output head sees a zero feature sum and every upstream gradient is 0.
    """
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    params = init_params(config, rng)
    for t in params.tensors.values():
        t.data = t.data + jitter * rng.standard_normal(t.data.shape)
    batch = ChannelBatch.stack(gen_dataset([n], 1, 1, seed=seed).instances)
    return grad_check(lambda: loss(batch, params, training=True, update_stats=False), params.tensors, tol=tol)


def run_gradcheck(run: Run) -> GradCheckReport:
    spec = run.spec
    n = int(spec.options.get("gradcheck_n", 4))
    report = tgt_gradcheck(spec.tgt_config(), n=n, seed=spec.seeds["train"])
    run.write_csv("gradcheck.csv", ["tensor", "relative_error", "passed"],
                  ([name, err, err < report.tol] for name, err in sorted(report.errors.items())))
    run.finish()
    return report


RUNNERS: dict[str, Callable[[Run], object]] = {
    "gen-data": run_gen_data,
    "train": run_train,
    "eval": run_eval,
    "table1": run_homophily_table,
    "table2": run_table2,
    "table3": run_fading_sweep,
    "table4": run_density_sweep,
    "fig2": run_histogram,
    "fig3": run_size_sweep,
    "fig4": lambda run: run_scaling_study(run, "fig4"),
    "fig5": lambda run: run_scaling_study(run, "fig5"),
    "gradcheck": run_gradcheck,
}
